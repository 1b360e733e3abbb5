//! End-to-end runs of the `scenenet` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn scenenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scenenet"))
        .args(args)
        .env_remove("GENEO_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = scenenet(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stderr),
        stdout(&o)
    );
    stdout(&o)
}

fn code(args: &[&str]) -> i32 {
    scenenet(args).status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a briefly trained checkpoint on 24^3 grids.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(scenes: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        ok(&["synth", "--out", p(dir.path()), "--scenes", scenes, "--seed", "5", "--split", "0.4,0.2,0.4"]);
        Self { dir }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }

    fn manifest(&self) -> String {
        self.path("manifest.json")
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let m = self.manifest();
        let mut args = vec!["train", "--manifest", &m, "-o", out, "--grid", "24", "--kernel", "7", "--batch", "2"];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

#[test]
fn every_subcommand_documents_its_flags() {
    let expect: [(&str, &[&str]); 8] = [
        ("synth", &["--out", "--config", "--scenes", "--seed", "--towers", "--noise-rate", "--split"]),
        (
            "train",
            &[
                "--manifest", "--config", "--seed", "--grid", "--kernel", "--epochs", "--batch", "--lr", "--alpha",
                "--epsilon", "--rho-l", "--rho-t", "--tversky", "--csv", "--threads",
            ],
        ),
        ("predict", &["--checkpoint", "--input", "--grid", "--kernel", "--tau"]),
        ("eval", &["--checkpoint", "--manifest", "--level", "--split", "--tau", "--csv"]),
        ("gradcheck", &["--seed", "--configs"]),
        ("inspect", &["--checkpoint", "--init"]),
        ("ablate", &["--manifest", "--epochs", "--csv"]),
        ("match", &["--manifest", "--radius", "--checkpoint"]),
    ];
    for (sub, flags) in expect {
        let help = ok(&[sub, "--help"]);
        for f in flags {
            assert!(help.contains(f), "{sub} --help lacks {f}");
        }
    }
    let train = ok(&["train", "--help"]);
    for default in [
        "[default: 50]",
        "[default: 8]",
        "[default: 0.001]",
        "[default: 5]",
        "[default: 0.1]",
        "[default: 64,64,64]",
        "[default: 9,9,9]",
    ] {
        assert!(train.contains(default), "train --help lacks {default}");
    }
    assert!(!ok(&["gradcheck", "--help"]).contains("inject"));
    assert_eq!(code(&["train", "--no-such-flag"]), 2);
}

#[test]
fn synth_is_reproducible_and_summarizes_classes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = ok(&["synth", "--out", p(a.path()), "--scenes", "10", "--seed", "7"]);
    ok(&["synth", "--out", p(b.path()), "--scenes", "10", "--seed", "7"]);
    let ma = fs::read(a.path().join("manifest.json")).unwrap();
    assert_eq!(ma, fs::read(b.path().join("manifest.json")).unwrap());
    assert!(sa.contains("wrote 10 scenes"));

    // recount the tower fraction from the emitted files
    let (_, ds) = scenenet::dataset::load_manifest_dataset(&a.path().join("manifest.json")).unwrap();
    let (mut tower, mut total) = (0usize, 0usize);
    for (_, s) in ds.scenes() {
        tower += s.cloud.count_label(1);
        total += s.cloud.len();
    }
    let line = sa.lines().find(|l| l.trim_start().starts_with("tower")).unwrap();
    let printed: f64 = line.rsplit(' ').next().unwrap().parse().unwrap();
    assert!((printed - tower as f64 / total as f64).abs() < 1e-6);

    let c = tempfile::tempdir().unwrap();
    let none = ok(&["synth", "--out", p(c.path()), "--scenes", "3", "--towers", "0"]);
    let line = none.lines().find(|l| l.trim_start().starts_with("tower")).unwrap();
    assert!(line.ends_with("fraction 0.000000"), "{line}");
}

#[test]
fn data_dir_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_scenenet"))
        .args(["synth", "--scenes", "2"])
        .env("GENEO_DATA_DIR", d.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(d.path().join("manifest.json").exists());
}

#[test]
fn zero_epochs_writes_the_initialization() {
    let f = Fixture::new("6");
    let ck = f.path("init.json");
    f.train(&ck, &["--epochs", "0", "--seed", "3"]);
    let from_ckpt = ok(&["inspect", "--checkpoint", &ck]);
    let fresh = ok(&["inspect", "--init", "--seed", "3", "--kernel", "7"]);
    assert_eq!(from_ckpt, fresh);
    assert_eq!(fresh.matches("[trainable]").count(), 11);
}

#[test]
fn training_is_byte_reproducible_and_flags_beat_config() {
    let f = Fixture::new("6");
    let cfg = f.path("train.cfg");
    fs::write(&cfg, "# short run\nepochs = 1\nlr = 0.01\nseed = 4\n").unwrap();
    let (a, b) = (f.path("a.json"), f.path("b.json"));
    let out = f.train(&a, &["--config", &cfg, "--epochs", "2"]);
    f.train(&b, &["--config", &cfg, "--epochs", "2"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let history = fs::read_to_string(format!("{a}.history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "header plus two epochs");
    assert!(out.contains("validation: precision"));

    // seed from the config file: same as passing it on the command line
    let c = f.path("c.json");
    f.train(&c, &["--epochs", "2", "--lr", "0.01", "--seed", "4"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    fs::write(&cfg, "epochs = 1\nmystery = 3\n").unwrap();
    let m = f.manifest();
    assert_eq!(code(&["train", "--manifest", &m, "--config", &cfg, "-o", &f.path("d.json")]), 2);
}

#[test]
fn predict_and_eval_agree() {
    let f = Fixture::new("6");
    let ck = f.path("m.json");
    f.train(&ck, &["--epochs", "1"]);
    let (_, ds) = scenenet::dataset::load_manifest_dataset(Path::new(&f.manifest())).unwrap();
    let scene = &ds.test[0];
    let input = f.path(&format!("scenes/{}.gpc", scene.name));
    let ply = f.path("pred.ply");
    let out = ok(&["predict", "--checkpoint", &ck, "--input", &input, "--grid", "24", "-o", &ply]);
    assert!(fs::read_to_string(&ply).unwrap().starts_with("ply"));

    let params = scenenet::model::load_checkpoint(Path::new(&ck)).unwrap();
    let m = scenenet::training::evaluate(
        &params,
        std::slice::from_ref(scene),
        [24; 3],
        1,
        scenenet::training::EvalLevel::Voxel,
    )
    .unwrap();
    let voxels = out.lines().find(|l| l.starts_with("voxels")).unwrap();
    let nums: Vec<u64> = voxels.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    assert_eq!(nums, vec![m.tp, m.fp, m.fn_, m.tn]);

    // tau 0 marks every occupied voxel
    let all = ok(&["predict", "--checkpoint", &ck, "--input", &input, "--grid", "24", "--tau", "0", "-o", &ply]);
    let v = all.lines().find(|l| l.starts_with("voxels")).unwrap();
    let n: Vec<u64> = v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    assert_eq!((n[2], n[3]), (0, 0), "{v}");

    // the 64^3 kernel runs at a finer grid with a rediscretized kernel
    ok(&["predict", "--checkpoint", &ck, "--input", &input, "--grid", "48", "--kernel", "12,5,5", "-o", &ply]);

    let csv = f.path("eval.csv");
    let table = ok(&["eval", "--checkpoint", &ck, "--manifest", &f.manifest(), "--grid", "24", "--csv", &csv]);
    assert!(table.contains(&scene.name));
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + ds.test.len() + 1);
    assert!(rows.lines().last().unwrap().starts_with("all,"));
    ok(&["eval", "--checkpoint", &ck, "--manifest", &f.manifest(), "--grid", "24", "--level", "point"]);
}

#[test]
fn match_and_ablate_report() {
    let f = Fixture::new("6");
    let ck = f.path("m.json");
    f.train(&ck, &["--epochs", "1"]);
    let out = ok(&["match", "--manifest", &f.manifest(), "--grid", "24", "--checkpoint", &ck]);
    assert!(out.contains("template AP") && out.contains("model AP"));
    let fixed = ok(&["match", "--manifest", &f.manifest(), "--grid", "24", "--radius", "1.5"]);
    assert!(fixed.contains("radius 1.500"));

    let csv = f.path("ablate.csv");
    let m = f.manifest();
    let table = ok(&["ablate", "--manifest", &m, "--epochs", "1", "--grid", "16", "--kernel", "5", "--csv", &csv]);
    for row in ['A', 'B', 'C', 'D', 'E', 'F', 'G'] {
        assert!(table.lines().any(|l| l.starts_with(row)), "missing row {row}");
    }
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 8);
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let o = ok(&["gradcheck", "--configs", "2"]);
    assert!(o.contains("PASS") && o.contains("worst:"));
    let bad = scenenet(&["gradcheck", "--configs", "1", "--inject-fault", "arrow.sigma"]);
    assert_eq!(bad.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("arrow.sigma"));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.json");
    assert_eq!(code(&["eval", "--checkpoint", p(&missing), "--manifest", p(&missing)]), 3);
    assert_eq!(code(&["inspect", "--checkpoint", p(&missing)]), 3);

    let f = Fixture::new("4");
    let ck = f.path("init.json");
    f.train(&ck, &["--epochs", "0"]);
    let text = fs::read_to_string(&ck).unwrap();
    let broken = f.path("broken.json");
    fs::write(&broken, text.replace("\"format_version\": 1", "\"format_version\": 99")).unwrap();
    assert_eq!(code(&["inspect", "--checkpoint", &broken]), 5);

    assert_eq!(code(&["synth", "--out", p(d.path()), "--split", "0.5,0.5,0.5"]), 2);
    assert_eq!(code(&["train", "--manifest", &f.manifest(), "--lr", "-1", "-o", &f.path("x.json")]), 2);
}
