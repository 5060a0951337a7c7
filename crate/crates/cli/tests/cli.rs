use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use brainvcs::vcs::read_report_json;

fn brainvcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_brainvcs"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = brainvcs(args);
    assert!(
        out.status.success(),
        "brainvcs {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = brainvcs(args);
    assert!(!out.status.success(), "brainvcs {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path → file bytes for every file below `root`.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small_cohort(dir: &Path, seed: &str) -> PathBuf {
    let out = dir.join("cohort");
    ok(&["synth", "--out", s(&out), "--seed", seed, "--n-ad", "4", "--n-nc", "4", "--test-per-class", "2"]);
    out
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ta = tree(&small_cohort(a.path(), "7"));
    let tb = tree(&small_cohort(b.path(), "7"));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    assert!(ta == tb, "same seed produced different trees");
    // 8 patients x 3 visits x (image + labels) + manifest, volumes, planted, provenance
    assert_eq!(ta.len(), 8 * 3 * 2 + 4);
    let tc = tree(&small_cohort(c.path(), "8"));
    assert_ne!(ta[Path::new("volumes.csv")], tc[Path::new("volumes.csv")]);
}

#[test]
fn oracle_saliency_scores_above_point_nine() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), "3");
    let manifest = cohort.join("manifest.csv");
    let sal = dir.path().join("oracle");
    let regions = dir.path().join("regions.csv");
    let report = dir.path().join("vcs.json");
    ok(&["saliency", "--manifest", s(&manifest), "--oracle", "--out", s(&sal)]);
    ok(&["aggregate", "--manifest", s(&manifest), "--saliency", s(&sal.join("saliency.csv")), "--out", s(&regions)]);
    let stdout = ok(&["vcs", "--regions", s(&regions), "--volumes", s(&cohort.join("volumes.csv")), "--out", s(&report)]);
    assert!(stdout.starts_with("VCS "), "{stdout}");
    let r = read_report_json(&report).unwrap();
    assert_eq!(r.per_patient.len(), 8);
    assert!(r.vcs >= 0.9, "oracle VCS {}", r.vcs);
    assert!(r.per_patient.values().all(|&p| p >= 0.9), "{:?}", r.per_patient);
}

/// Runs train → saliency → aggregate → distribution → vcs → attack → metrics
/// into `out` and returns the tree of everything written there.
fn pipeline(cohort: &Path, out: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let manifest = cohort.join("manifest.csv");
    let m = s(&manifest);
    let model = out.join("model");
    let ckpt = model.join("model.ckpt");
    let sal = out.join("saliency");
    let regions = out.join("regions.csv");
    ok(&["train", "--manifest", m, "--strategy", "fgsm+mask", "--epochs", "2", "--seed", "5", "--out", s(&model)]);
    ok(&["saliency", "--manifest", m, "--checkpoint", s(&ckpt), "--split", "test", "--out", s(&sal)]);
    ok(&["aggregate", "--manifest", m, "--saliency", s(&sal.join("saliency.csv")), "--out", s(&regions)]);
    ok(&["distribution", "--manifest", m, "--regions", s(&regions), "--out", s(&out.join("dist.csv"))]);
    ok(&[
        "vcs",
        "--regions",
        s(&regions),
        "--volumes",
        s(&cohort.join("volumes.csv")),
        "--out",
        s(&out.join("vcs.json")),
        "--scatter",
        s(&out.join("scatter.csv")),
        "--boxplot",
        s(&out.join("box.csv")),
        "--model-name",
        "fgsm+mask",
    ]);
    ok(&["attack", "--manifest", m, "--checkpoint", s(&ckpt), "--steps", "1", "--out", s(&out.join("attack"))]);
    ok(&["metrics", "--manifest", m, "--checkpoint", s(&ckpt), "--out", s(&out.join("metrics.json")), "--predictions", s(&out.join("pred.csv"))]);
    tree(out)
}

#[test]
fn pipeline_reruns_are_byte_identical_and_leave_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), "11");
    let before = tree(&cohort);
    let out = dir.path().join("run");
    let first = pipeline(&cohort, &out);
    let second = pipeline(&cohort, &out);
    assert!(first == second, "rerun changed outputs");
    assert!(tree(&cohort) == before, "pipeline modified its inputs");

    for name in [
        "model/model.ckpt",
        "model/train_log.csv",
        "model/provenance.json",
        "saliency/saliency.csv",
        "regions.csv.provenance.json",
        "vcs.json",
        "scatter.csv",
        "box.csv",
        "attack/attack.csv",
        "metrics.json",
    ] {
        assert!(first.contains_key(Path::new(name)), "missing {name}");
    }
    let prov: serde_json::Value = serde_json::from_slice(&first[Path::new("model/provenance.json")]).unwrap();
    assert_eq!(prov["seed"], 5);
    assert_eq!(prov["config"]["train"]["epochs"], 2);
    assert_eq!(prov["config"]["strategy"], "fgsm+mask");
    assert!(prov["version"].is_string());
    let log = String::from_utf8(first[Path::new("model/train_log.csv")].clone()).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,split,loss,acc"));
    assert_eq!(log.lines().count(), 1 + 2 * 2);
}

#[test]
fn invalid_inputs_fail_with_field_level_messages() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = small_cohort(dir.path(), "2");
    let manifest = cohort.join("manifest.csv");
    let out = dir.path().join("out");

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "tau = 1.5\n").unwrap();
    let e = fails(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    assert!(e.contains("tau"), "{e}");
    fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let e = fails(&["train", "--manifest", s(&manifest), "--config", s(&cfg), "--out", s(&out)]);
    assert!(e.contains("learning_rate"), "{e}");
    assert!(!out.exists(), "failed run created outputs");

    let text = fs::read_to_string(&manifest).unwrap();
    let broken = cohort.join("broken.csv");
    fs::write(&broken, text.replacen("images/AD-0001_t0.nii", "images/none.nii", 1)).unwrap();
    let e = fails(&["saliency", "--manifest", s(&broken), "--oracle", "--out", s(&out)]);
    assert!(e.contains("image") && e.contains("none.nii"), "{e}");
    fs::write(&broken, text.replacen(",AD,", ",MCI,", 1)).unwrap();
    let e = fails(&["saliency", "--manifest", s(&broken), "--oracle", "--out", s(&out)]);
    assert!(e.contains("MCI"), "{e}");
    assert!(!out.exists());

    let e = fails(&["synth", "--out", s(&out), "--n-ad", "2", "--n-nc", "2", "--test-per-class", "3"]);
    assert!(e.contains("test-per-class"), "{e}");
    let e = fails(&["train", "--manifest", s(&manifest), "--strategy", "pgd", "--out", s(&out)]);
    assert!(e.contains("pgd"), "{e}");
    let e = fails(&["saliency", "--manifest", s(&manifest), "--out", s(&out)]);
    assert!(e.contains("--checkpoint"), "{e}");
}
