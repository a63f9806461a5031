use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn monfap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_monfap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const CONFIG: &str = "\
[model]
channels = 4
depth = 1
[data]
root = data
train = 4
val = 2
test = 4
[optim]
iterations = 2
batch_size = 2
[train]
checkpoint = runs/model.ckpt
log = runs/log.txt
log_every = 1
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), CONFIG).unwrap();
    dir
}

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_train_eval_predict() {
    let dir = setup();
    let d = dir.path();

    let o = monfap(d, &["gen-data", "--config", "run.cfg", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for split in ["train", "val", "test"] {
        assert!(d.join("data").join(split).join("manifest.txt").is_file());
        assert!(stdout(&o).contains(&format!("split={split}")));
    }
    let first = read_tree(&d.join("data"));
    let o = monfap(d, &["gen-data", "--config", "run.cfg", "--seed", "5"]);
    assert!(o.status.success());
    assert_eq!(read_tree(&d.join("data")), first, "regeneration with the same seed changed files");

    let o = monfap(d, &["train", "--config", "run.cfg", "--seed", "5", "--deterministic"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("runs/model.ckpt").is_file());
    let log = fs::read_to_string(d.join("runs/log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|l| l.starts_with("iter=") && l.contains("loss.total=")));

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--config", "run.cfg", "--seed", "5"];
        args.extend_from_slice(extra);
        let o = monfap(d, &args);
        assert!(o.status.success(), "{}", stderr(&o));
        stdout(&o)
    };
    let a = eval(&[]);
    for key in ["acc=", "auc=", "f1_f=", "iou_f=", "loss.total="] {
        assert!(a.contains(key), "{a}");
    }
    assert_eq!(a, eval(&[]), "eval is not reproducible");
    let p = eval(&["--perturb", "--split", "val"]);
    assert!(p.contains("perturbed=true") && p.contains("split=val"));
    assert_eq!(p, eval(&["--perturb", "--split", "val"]));

    // a 40×50 image gets padded to 64×64 and cropped back
    let img = image::RgbImage::from_fn(50, 40, |x, y| image::Rgb([(x * 5) as u8, (y * 6) as u8, 128]));
    img.save(d.join("odd.png")).unwrap();
    let o = monfap(d, &["predict", "--checkpoint", "runs/model.ckpt", "--out", "pred", "odd.png"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mask = image::open(d.join("pred/odd.mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (50, 40));
    let overlay = image::open(d.join("pred/odd.overlay.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (50, 40));
    let prob = fs::read_to_string(d.join("pred/odd.prob.txt")).unwrap();
    let p: f64 = prob.lines().next().unwrap().strip_prefix("fake_probability=").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&p));
}

#[test]
fn invalid_size_exits_2_naming_the_field() {
    let dir = setup();
    let o = monfap(dir.path(), &["gen-data", "--config", "run.cfg", "--set", "data.height=48"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.height"), "{}", stderr(&o));
    assert!(!dir.path().join("data").exists(), "validation must precede side effects");

    let o = monfap(dir.path(), &["train", "--config", "run.cfg", "--set", "optim.lr=-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.lr"), "{}", stderr(&o));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn checkpoint_errors_exit_3() {
    let dir = setup();
    let d = dir.path();
    let o = monfap(d, &["eval", "--config", "run.cfg", "--checkpoint", "missing.ckpt"]);
    assert_eq!(o.status.code(), Some(3));
    let o = monfap(d, &["predict", "--checkpoint", "missing.ckpt", "x.png"]);
    assert_eq!(o.status.code(), Some(3));

    assert!(monfap(d, &["gen-data", "--config", "run.cfg"]).status.success());
    assert!(monfap(d, &["train", "--config", "run.cfg"]).status.success());
    let o = monfap(d, &["eval", "--config", "run.cfg", "--set", "model.channels=8"]);
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.contains("[4, 3, 4, 4]") && err.contains("[8, 3, 4, 4]"), "{err}");
}

#[test]
fn unreadable_image_exits_2() {
    let dir = setup();
    let d = dir.path();
    assert!(monfap(d, &["gen-data", "--config", "run.cfg"]).status.success());
    assert!(monfap(d, &["train", "--config", "run.cfg"]).status.success());
    fs::write(d.join("bad.png"), b"not a png").unwrap();
    let o = monfap(d, &["predict", "--checkpoint", "runs/model.ckpt", "bad.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = monfap(d, &["predict", "--checkpoint", "runs/model.ckpt", "absent.png"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = monfap(dir.path(), &["train", "--config", "nope.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}
