use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

const TINY: &str = "\
# 32px model small enough for debug-speed tests
preset = desk
model.image_size = 32
model.latent_dim = 8
model.encoder_widths = 4,8
model.decoder_widths = 8,4
model.disc_widths = 4,8
model.perceptual_widths = 4,8,8,8,8
train.batch_size = 8
train.epochs = 2
pretrain.samples = 64
pretrain.epochs = 1
";

// 40 faces at batch 8: 5 steps per epoch.
const FACES: usize = 40;
const STEPS: usize = 10;
const CELL: u32 = 32 + 2;

fn vwgn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vwgn"))
        .args(args)
        .env_remove("VWGN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = vwgn(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

/// Synthetic faces plus one trained tiny run, shared by every test.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture { dir: tempfile::tempdir().unwrap() };
        fs::write(f.path("tiny.cfg"), TINY).unwrap();
        ok(&["--out", s(&f.path("faces")), "--seed", "5", "synth", "--n", &FACES.to_string()]);
        ok(&[
            "--out",
            s(&f.path("run")),
            "--seed",
            "3",
            "train",
            "--config",
            s(&f.path("tiny.cfg")),
            "--data",
            s(&f.path("faces")),
        ]);
        f
    })
}

fn dims(p: &Path) -> (u32, u32) {
    image::image_dimensions(p).unwrap()
}

#[test]
fn train_writes_log_and_snapshots() {
    let f = fixture();
    let log = fs::read_to_string(f.path("run/loss_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,kl,rec,gan,total");
    assert_eq!(lines.len(), STEPS + 1);
    assert!(lines[STEPS].starts_with(&format!("{STEPS},")));
    for name in ["step_5.ckpt", "step_10.ckpt", "final.ckpt", "perceptual.ckpt"] {
        assert!(f.path("run").join(name).is_file(), "{name}");
    }
}

#[test]
fn training_is_reproducible_under_seed() {
    let f = fixture();
    let again = f.path("again");
    ok(&["--out", s(&again), "--seed", "3", "train", "--config", s(&f.path("tiny.cfg")), "--data", s(&f.path("faces"))]);
    assert_eq!(fs::read(again.join("final.ckpt")).unwrap(), fs::read(f.path("run/final.ckpt")).unwrap());
    assert_eq!(fs::read(again.join("loss_log.csv")).unwrap(), fs::read(f.path("run/loss_log.csv")).unwrap());
}

#[test]
fn single_tap_run_and_resume() {
    let f = fixture();
    let out = f.path("tap");
    ok(&[
        "--out",
        s(&out),
        "train",
        "--config",
        s(&f.path("tiny.cfg")),
        "--data",
        s(&f.path("faces")),
        "--perceptual",
        s(&f.path("run/perceptual.ckpt")),
        "--loss-taps",
        "relu3_1",
        "--max-steps",
        "3",
    ]);
    assert!(!out.join("perceptual.ckpt").exists());
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    ok(&["--out", s(&out), "train", "--data", s(&f.path("faces")), "--resume", s(&out.join("final.ckpt"))]);
    let log = fs::read_to_string(out.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), STEPS + 1);
}

#[test]
fn usage_errors_exit_2() {
    let f = fixture();
    let missing = f.path("no_such_dir");
    let out = vwgn(&["train", "--config", s(&f.path("tiny.cfg")), "--data", s(&missing)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains(s(&missing)), "{}", stderr(&out));

    let out = vwgn(&["train", "--data", s(&f.path("faces")), "--set", "train.epoch=3"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("unknown config key"));

    let out = vwgn(&["generate"]);
    assert_eq!(code(&out), 2);
    let out = vwgn(&["frobnicate"]);
    assert_eq!(code(&out), 2);

    let four = [0; 4].map(|_| f.path("run/final.ckpt").to_str().unwrap().to_string()).join(",");
    let out = vwgn(&[
        "--out",
        s(&f.path("ev4")),
        "eval-attrs",
        "--checkpoints",
        &four,
        "--data",
        s(&f.path("faces")),
        "--attributes",
        s(&f.path("faces/list_attr.txt")),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("needs 5 encoders"), "{}", stderr(&out));
}

#[test]
fn runtime_failures_exit_1() {
    let f = fixture();
    let bad = f.path("bad.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = vwgn(&["--out", s(&f.path("g_bad")), "generate", "--checkpoint", s(&bad)]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("format error"), "{}", stderr(&out));
}

#[test]
fn generate_grid_and_determinism() {
    let f = fixture();
    let ckpt = f.path("run/final.ckpt");
    let run = |dir: &str, seed: &str| {
        let out = f.path(dir);
        ok(&["--out", s(&out), "--seed", seed, "generate", "--checkpoint", s(&ckpt), "--count", "64"]);
        fs::read(out.join("generated.png")).unwrap()
    };
    let a = run("g1", "1");
    assert_eq!(dims(&f.path("g1/generated.png")), (8 * CELL + 2, 8 * CELL + 2));
    assert_eq!(a, run("g2", "1"));
    assert_ne!(a, run("g3", "2"));

    let out = f.path("g_env");
    let o = Command::new(env!("CARGO_BIN_EXE_vwgn"))
        .args(["--out", s(&out), "generate", "--checkpoint", s(&ckpt), "--count", "64"])
        .env("VWGN_SEED", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(fs::read(out.join("generated.png")).unwrap(), a);
}

#[test]
fn generate_score_is_within_bounds() {
    let f = fixture();
    let out = f.path("gs");
    let o = ok(&["--out", s(&out), "generate", "--checkpoint", s(&f.path("run/final.ckpt")), "--count", "20", "--score"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("inception-style score over 20 images"), "{text}");
    let v: f64 = fs::read_to_string(out.join("score.txt")).unwrap().trim().parse().unwrap();
    assert!((1.0..=10.0).contains(&v), "{v}");
}

#[test]
fn reconstruct_pairs_rows_and_skips_corrupt_files() {
    let f = fixture();
    let corrupt = f.path("corrupt.png");
    fs::write(&corrupt, b"\x89PNG garbage").unwrap();
    let out = f.path("rec");
    let faces = f.path("faces");
    let o = ok(&[
        "--out",
        s(&out),
        "reconstruct",
        "--checkpoint",
        s(&f.path("run/final.ckpt")),
        s(&faces.join("000001.png")),
        s(&corrupt),
        s(&faces.join("000002.png")),
    ]);
    assert!(stderr(&o).contains("corrupt.png"), "{}", stderr(&o));
    assert_eq!(dims(&out.join("reconstruction.png")), (2 * CELL + 2, 2 * CELL + 2));
}

#[test]
fn interpolate_default_is_eleven_frames() {
    let f = fixture();
    let out = f.path("interp");
    ok(&["--out", s(&out), "interpolate", "--checkpoint", s(&f.path("run/final.ckpt"))]);
    assert_eq!(dims(&out.join("interpolation.png")), (11 * CELL + 2, CELL + 2));
    let faces = f.path("faces");
    ok(&[
        "--out",
        s(&out),
        "interpolate",
        "--checkpoint",
        s(&f.path("run/final.ckpt")),
        "--left",
        s(&faces.join("000003.png")),
        "--right",
        s(&faces.join("000004.png")),
        "--frames",
        "5",
    ]);
    assert_eq!(dims(&out.join("interpolation.png")), (5 * CELL + 2, CELL + 2));
}

#[test]
fn attribute_vectors_and_manipulation() {
    let f = fixture();
    let ckpt = f.path("run/final.ckpt");
    let out = f.path("attr");
    let table = f.path("faces/list_attr.txt");
    let faces = f.path("faces");
    let common = ["--checkpoint", s(&ckpt), "--data", s(&faces), "--attributes", s(&table)];
    let mut args = vec!["--out", s(&out), "attr-vector"];
    args.extend(common);
    args.extend(["--attr", "Smiling", "--attr", "Male"]);
    ok(&args);
    let vectors = out.join("attr_vectors.vwnv");
    let first = fs::read(&vectors).unwrap();
    ok(&args);
    assert_eq!(first, fs::read(&vectors).unwrap());

    let mut bad = vec!["--out", s(&out), "attr-vector"];
    bad.extend(common);
    bad.extend(["--attr", "Smilling"]);
    let o = vwgn(&bad);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("available") && stderr(&o).contains("Eyeglasses"), "{}", stderr(&o));

    let m = ["--out", s(&out), "manipulate", "--checkpoint", s(&ckpt), "--vectors", s(&vectors)];
    let mut good = m.to_vec();
    good.extend(["--attr", "Smiling", "--alpha-steps", "11", "--count", "3"]);
    ok(&good);
    assert_eq!(dims(&out.join("manipulate_Smiling.png")), (11 * CELL + 2, 3 * CELL + 2));

    let mut unknown = m.to_vec();
    unknown.extend(["--attr", "Bald"]);
    let o = vwgn(&unknown);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("available: Smiling, Male"), "{}", stderr(&o));
}

#[test]
fn embed_writes_deterministic_csv() {
    let f = fixture();
    let ckpt = f.path("run/final.ckpt");
    let run = |dir: &str, method: &str| {
        let out = f.path(dir);
        ok(&[
            "--out",
            s(&out),
            "--seed",
            "4",
            "embed",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&f.path("faces")),
            "--n",
            "30",
            "--perplexity",
            "5",
            "--iterations",
            "300",
            "--method",
            method,
        ]);
        fs::read_to_string(out.join("embedding.csv")).unwrap()
    };
    let a = run("emb1", "tsne_exact");
    assert_eq!(a.lines().count(), 31);
    assert_eq!(a.lines().next(), Some("id,x,y"));
    assert_eq!(a, run("emb2", "tsne_exact"));
    assert_eq!(run("emb3", "pca").lines().count(), 31);
    let o = vwgn(&["--out", s(&f.path("emb4")), "embed", "--checkpoint", s(&ckpt), "--data", s(&f.path("faces")), "--n", "41"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_attrs_writes_accuracy_csv() {
    let f = fixture();
    let views = ["final.ckpt", "step_5.ckpt", "step_10.ckpt", "final.ckpt", "step_5.ckpt"]
        .map(|n| f.path("run").join(n).to_str().unwrap().to_string())
        .join(",");
    let out = f.path("ev");
    ok(&[
        "--out",
        s(&out),
        "eval-attrs",
        "--checkpoints",
        &views,
        "--data",
        s(&f.path("faces")),
        "--attributes",
        s(&f.path("faces/list_attr.txt")),
        "--attr",
        "Male",
        "--attr",
        "Smiling",
        "--test-count",
        "10",
    ]);
    let csv = fs::read_to_string(out.join("attribute_accuracy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "attribute,accuracy");
    assert!(lines[1].starts_with("Male,") && lines[2].starts_with("Smiling,") && lines[3].starts_with("average,"));
    assert_eq!(fs::read_to_string(out.join("test_ids.txt")).unwrap().lines().count(), 10);
    assert_eq!(fs::read_to_string(out.join("train_ids.txt")).unwrap().lines().count(), FACES - 10);
}

#[test]
fn score_folder() {
    let f = fixture();
    let out = f.path("score");
    let o = ok(&["--out", s(&out), "score", "--data", s(&f.path("faces")), "--score-net", s(&f.path("run/perceptual.ckpt")), "--n", "25"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 25 images"));
    let v: f64 = fs::read_to_string(out.join("score.txt")).unwrap().trim().parse().unwrap();
    assert!((1.0..=10.0).contains(&v));
}
