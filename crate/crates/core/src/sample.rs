use std::fmt;

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Genuine,
    Manipulated,
}

impl Label {
    /// Class index used by the logits: 0 = genuine/real, 1 = manipulated/fake.
    pub fn index(self) -> usize {
        match self {
            Label::Genuine => 0,
            Label::Manipulated => 1,
        }
    }

    pub fn is_manipulated(self) -> bool {
        self == Label::Manipulated
    }

    pub fn parse(s: &str) -> Option<Label> {
        match s {
            "genuine" => Some(Label::Genuine),
            "manipulated" => Some(Label::Manipulated),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Genuine => "genuine",
            Label::Manipulated => "manipulated",
        })
    }
}

/// Image with its pixel ground truth and image-level label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub gt_mask: BinaryMask,
    pub label: Label,
}

impl Sample {
    /// Checks that the mask matches the image and agrees with the label:
    /// genuine samples have an empty mask, manipulated ones a non-empty one.
    pub fn new(image: Image, gt_mask: BinaryMask, label: Label) -> Result<Self> {
        if gt_mask.height != image.height() || gt_mask.width != image.width() {
            return Err(Error::shape(
                "sample",
                format!(
                    "mask {}×{} for image {}×{}",
                    gt_mask.height,
                    gt_mask.width,
                    image.height(),
                    image.width()
                ),
            ));
        }
        let empty = gt_mask.is_empty_region();
        match (label, empty) {
            (Label::Genuine, false) => Err(Error::InvalidParam {
                name: "gt_mask".into(),
                detail: "genuine sample with a non-empty mask".into(),
            }),
            (Label::Manipulated, true) => Err(Error::InvalidParam {
                name: "gt_mask".into(),
                detail: "manipulated sample with an empty mask".into(),
            }),
            _ => Ok(Sample { image, gt_mask, label }),
        }
    }
}
