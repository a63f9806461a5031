use monfap::backbone::Image;
use monfap::checkpoint::Checkpoint;
use monfap::config::RunConfig;
use monfap::metrics::{fake_probability, Aggregation};
use monfap::model::{ModelConfig, Monfap};
use monfap::optim::AdamWConfig;
use monfap::rng::stream_rng;
use monfap::sample::Label;
use monfap::synth::{build_split, load_split, perturb, DatasetConfig, Family, PerturbConfig, SceneConfig, SplitCounts};
use monfap::train::{evaluate, train, EvalOptions, TrainOptions};
use monfap::Tensor;

fn small_dataset() -> DatasetConfig {
    DatasetConfig {
        scene: SceneConfig {
            height: 32,
            width: 32,
            ..SceneConfig::default()
        },
        fake_ratio: 0.5,
    }
}

fn opts(iterations: usize, checkpoint: Option<std::path::PathBuf>) -> TrainOptions {
    TrainOptions {
        iterations,
        batch_size: 4,
        lambda: 10.0,
        adamw: AdamWConfig { lr: 1e-3, ..AdamWConfig::default() },
        poly_power: 0.9,
        flip: true,
        seed: 9,
        log_every: 5,
        checkpoint_every: 5,
        checkpoint,
        log: None,
        config_text: RunConfig::default().to_text(),
    }
}

#[test]
fn disk_round_trip_train_checkpoint_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let counts = SplitCounts { train: 6, val: 2, test: 6 };
    let records = build_split(&root, counts, &small_dataset(), 3).unwrap();
    assert_eq!(records.len(), 14);
    let train_set = load_split(&root, "train").unwrap();
    let test_set = load_split(&root, "test").unwrap();
    for s in train_set.iter().chain(&test_set) {
        assert_eq!(s.label == Label::Manipulated, s.gt_mask.count() > 0);
        assert!(s.gt_mask.count() * 2 <= 32 * 32);
    }

    let cfg = ModelConfig { channels: 4, ..ModelConfig::default() };
    let (model, mut store) = Monfap::build(cfg, 9).unwrap();
    let ck = dir.path().join("m.ckpt");
    let report = train(&model, &mut store, &train_set, &opts(10, Some(ck.clone()))).unwrap();
    assert_eq!(report.steps.len(), 10);
    assert!(report.steps.iter().all(|s| s.loss.is_finite()));

    let loaded = Checkpoint::load(&ck).unwrap();
    let (_, mut fresh) = Monfap::build(cfg, 1234).unwrap();
    loaded.apply(&mut fresh).unwrap();
    for ((_, a), (_, b)) in store.iter().zip(fresh.iter()) {
        assert_eq!(a.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    assert_eq!(RunConfig::from_text(&loaded.config).unwrap(), RunConfig::default());

    let eo = EvalOptions { batch_size: 4, lambda: 10.0, aggregation: Aggregation::Micro, perturb: None };
    let a = evaluate(&model, &store, &test_set, &eo).unwrap();
    let b = evaluate(&model, &fresh, &test_set, &eo).unwrap();
    assert_eq!(a.to_string(), b.to_string());
    let macro_report = evaluate(&model, &fresh, &test_set, &EvalOptions { aggregation: Aggregation::Macro, ..eo }).unwrap();
    assert!(macro_report.to_string().contains("aggregation=macro"));
}

#[test]
fn perturbation_keeps_masks_labels_and_range() {
    let dir = tempfile::tempdir().unwrap();
    build_split(dir.path(), SplitCounts { train: 0, val: 0, test: 8 }, &small_dataset(), 4).unwrap();
    let samples = load_split(dir.path(), "test").unwrap();
    let cfg = PerturbConfig { families: Family::ALL.to_vec(), intensity: 1.0, seed: 2 };
    let mut rng = stream_rng(2, "perturb");
    for s in &samples {
        let p = perturb(&s.image, &cfg, &mut rng).unwrap();
        assert_eq!(p.tensor().shape(), s.image.tensor().shape());
        assert!(p.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // evaluation through perturbations keeps labels and masks: report sample count matches
    let (model, store) = Monfap::build(ModelConfig { channels: 4, ..ModelConfig::default() }, 1).unwrap();
    let eo = EvalOptions { batch_size: 4, lambda: 10.0, aggregation: Aggregation::Micro, perturb: Some(cfg) };
    let r = evaluate(&model, &store, &samples, &eo).unwrap();
    assert_eq!(r.samples, samples.len());
}

#[test]
fn genuine_trained_model_scores_blank_image_low() {
    let cfg = small_dataset();
    let genuine: Vec<_> = (0..8)
        .map(|i| {
            let scene = monfap::synth::Scene::sample(&cfg.scene, &mut stream_rng(i, "genuine")).unwrap();
            scene.render(&[]).unwrap()
        })
        .collect();
    let (model, mut store) = Monfap::build(ModelConfig { channels: 4, ..ModelConfig::default() }, 2).unwrap();
    train(&model, &mut store, &genuine, &opts(30, None)).unwrap();
    let blank = Image::new(Tensor::full(&[3, 32, 32], 0.5)).unwrap();
    let pred = model.predict(&store, &blank).unwrap();
    let p = fake_probability(pred.logits);
    assert!(p < 0.5, "fake probability {p}");
}
