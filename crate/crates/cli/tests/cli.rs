use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "width = 24\nheight = 24\ntrain_poses = 2\nviews_per_pose = 2\n\
novel_view_frames = 2\nnovel_pose_frames = 2\nfocal = 27.0\ngt_samples = 48\n";
const TRAIN: &str = "rays_per_batch = 16\nsamples_per_ray = 16\nframes_per_batch = 2\n";

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avatar-field"))
        .arg("--serial")
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> (i32, String) {
    let out = cli(args);
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path, name: &str) -> PathBuf {
    let cfg = dir.join("gen.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = dir.join(name);
    ok(&["generate", "--scene", "default", "--out", s(&out), "--config", s(&cfg)]);
    out
}

#[test]
fn gradcheck_passes() {
    let stdout = ok(&["gradcheck", "--module", "window"]);
    assert!(stdout.contains("window"));
}

#[test]
fn generate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_dataset(dir.path(), "a");
    let b = small_dataset(dir.path(), "b");
    let ta = tree(&a);
    assert!(ta.contains_key(Path::new("manifest.json")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn ground_truth_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data");
    let out = dir.path().join("gt.csv");
    ok(&["eval", "--ckpt", "gt", "--data", s(&data), "--split", "novel_view", "--out", s(&out)]);
    let text = fs::read_to_string(out).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[2].parse::<f64>().unwrap(), 99.99);
        assert_eq!(f[3].parse::<f64>().unwrap(), 1.0);
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn train_render_eval_freq_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), "data");
    let before = tree(&data);
    let cfg = dir.path().join("train.toml");
    fs::write(&cfg, TRAIN).unwrap();
    let ckpt = dir.path().join("run/model.ckpt");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--iterations", "4", "--cull", "off"]);
    assert!(ckpt.exists());
    let log = fs::read_to_string(dir.path().join("run/model.ckpt.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 5);

    let img = dir.path().join("render.png");
    ok(&[
        "render",
        "--ckpt",
        s(&ckpt),
        "--camera",
        s(&data.join("cameras.json")),
        "--pose",
        s(&data.join("poses.json")),
        "--out",
        s(&img),
        "--samples",
        "16",
    ]);
    assert!(img.exists());

    let scores = dir.path().join("scores.csv");
    ok(&[
        "eval", "--ckpt", s(&ckpt), "--data", s(&data), "--split", "novel_pose", "--out", s(&scores), "--maps",
        "--samples", "16",
    ]);
    assert_eq!(fs::read_to_string(&scores).unwrap().lines().count(), 3);
    assert_eq!(fs::read_dir(dir.path().join("scores.csv.maps")).unwrap().count(), 8);

    let freq = dir.path().join("freq");
    let reference = tree(&data)
        .keys()
        .find(|k| k.extension().is_some_and(|e| e == "png") && !k.to_string_lossy().contains("mask"))
        .cloned()
        .unwrap();
    ok(&["freq", "--image", s(&img), "--ref", s(&data.join(reference)), "--out", s(&freq)]);
    for f in ["freq_image.png", "freq_ref.png", "error.png", "histogram.csv", "f_dist.txt"] {
        assert!(freq.join(f).exists(), "{f}");
    }
    assert_eq!(before, tree(&data));
}

#[test]
fn exit_codes_name_the_failure() {
    let dir = tempfile::tempdir().unwrap();
    let (c, _) = code(&["train", "--bogus"]);
    assert_eq!(c, 2);

    let missing = dir.path().join("nope");
    let (c, err) = code(&["eval", "--ckpt", "gt", "--data", s(&missing), "--split", "novel_view", "--out", "x.csv"]);
    assert_eq!(c, 3);
    assert!(err.contains("kind=missing_file"), "{err}");

    let bad = dir.path().join("scene.json");
    fs::write(&bad, "{\"capsules\": 3}").unwrap();
    let (c, err) = code(&["generate", "--scene", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(c, 4);
    assert_eq!(err.lines().count(), 1, "{err}");
}
