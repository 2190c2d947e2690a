use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use maq_cli::manifest::verify_dir;
use maq_cli::pipeline::{read_heatmap, HEATMAP_HEADER};
use maq_core::dataset::load_dataset;

const TINY: &[&str] = &[
    "vq_epochs=2",
    "vq_hidden=32",
    "latent_dim=8",
    "agent_hidden=32",
    "decisions=120",
    "warmup=40",
    "eval_interval=60",
    "grid_decisions=120",
    "grid_eval_interval=60",
    "train_eval_episodes=2",
    "eval_episodes=3",
    "random_episodes=3",
    "bc_epochs=2",
    "demo_count=20",
];

fn lab(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maq-lab"));
    cmd.arg("--out").arg(out);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).env_remove("MAQ_LAB_OUT").output().expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = lab(out, args);
    assert!(
        o.status.success(),
        "maq-lab {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fail(out: &Path, args: &[&str]) -> String {
    let o = lab(out, args);
    assert!(!o.status.success(), "maq-lab {args:?} unexpectedly succeeded");
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(!err.trim().is_empty(), "no diagnostic on stderr");
    err
}

fn demos(root: &Path) -> PathBuf {
    let path = root.join("gen-demos/demos.maqtraj");
    if !path.exists() {
        ok(root, &["gen-demos"]);
    }
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_demos_is_deterministic_and_successful() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(a.path(), &["gen-demos", "--count", "25"]);
    ok(b.path(), &["gen-demos", "--count", "25"]);
    let ma = verify_dir(&a.path().join("gen-demos")).unwrap();
    let mb = verify_dir(&b.path().join("gen-demos")).unwrap();
    assert_eq!(ma.files, mb.files);
    let loaded = load_dataset(&a.path().join("gen-demos/demos.maqtraj")).unwrap();
    assert_eq!(loaded.len(), 25);
    assert!(loaded.iter().all(|t| t.success));
}

#[test]
fn unwritable_output_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"not a directory").unwrap();
    let err = fail(&blocker.join("sub"), &["gen-demos"]);
    assert!(err.contains("cannot create output directory"), "{err}");
}

#[test]
fn codebook_agents_require_a_vqvae() {
    let dir = tempfile::tempdir().unwrap();
    let d = demos(dir.path());
    for agent in ["maq_symmetric", "maq_dsac"] {
        let err = fail(dir.path(), &["train-agent", "--agent", agent, "--demos", s(&d)]);
        assert!(err.contains("requires a VQVAE checkpoint"), "{err}");
    }
    let err = fail(
        dir.path(),
        &["train-agent", "--agent", "maq_dsac", "--vqvae", s(&dir.path().join("absent.maqvq"))],
    );
    assert!(err.contains("not found"), "{err}");
}

#[test]
fn out_of_range_shape_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = demos(dir.path());
    let err = fail(dir.path(), &["train-vqvae", "--demos", s(&d), "--H", "10"]);
    assert!(err.contains("H = 10"), "{err}");
    let err = fail(dir.path(), &["train-vqvae", "--demos", s(&d), "--K", "12"]);
    assert!(err.contains("K = 12"), "{err}");
}

#[test]
fn evaluate_writes_one_row_per_seed_and_checks_codebooks() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let d = demos(root);
    ok(root, &["train-vqvae", "--demos", s(&d), "--H", "2", "--K", "8", "--seed", "1"]);
    ok(root, &["train-vqvae", "--demos", s(&d), "--H", "2", "--K", "8", "--seed", "10"]);
    let vq1 = root.join("train-vqvae/vqvae/2x8/seed1/vqvae.maqvq");
    let vq10 = root.join("train-vqvae/vqvae/2x8/seed10/vqvae.maqvq");
    for (seed, vq) in [("1", &vq1), ("10", &vq10)] {
        ok(root, &["train-agent", "--agent", "maq_dsac", "--vqvae", s(vq), "--seed", seed]);
    }
    let p1 = root.join("train-agent/maq_dsac/2x8/seed1/policy.maqpol");
    let p10 = root.join("train-agent/maq_dsac/2x8/seed10/policy.maqpol");

    let err = fail(root, &["evaluate", "--demos", s(&d), "--policy", s(&p1), "--vqvae", s(&vq10)]);
    assert!(err.contains("mismatch"), "{err}");

    ok(
        root,
        &[
            "evaluate", "--demos", s(&d), "--policy", s(&p10), "--policy", s(&p1), "--vqvae", s(&vq1), "--vqvae",
            s(&vq10),
        ],
    );
    let summary = std::fs::read_to_string(root.join("evaluate/maq_dsac/2x8/report.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("maq_dsac,1,") && lines[2].starts_with("maq_dsac,10,"));
    assert!(lines.iter().all(|l| l.split(',').count() == 11));
    let json = std::fs::read_to_string(root.join("evaluate/maq_dsac/2x8/seed1/report.json")).unwrap();
    assert!(json.contains("\"human_ref\"") && json.contains("\"random_ref\""));
    verify_dir(&root.join("evaluate/maq_dsac/2x8/seed10")).unwrap();
}

#[test]
fn baselines_train_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let d = demos(root);
    ok(root, &["train-agent", "--agent", "grid_dsac", "--seed", "3"]);
    ok(root, &["train-agent", "--agent", "bc", "--demos", s(&d), "--seed", "3"]);
    let err = fail(root, &["train-agent", "--agent", "bc"]);
    assert!(err.contains("requires demonstrations"), "{err}");
    ok(
        root,
        &[
            "evaluate",
            "--demos",
            s(&d),
            "--policy",
            s(&root.join("train-agent/grid_dsac/1x27/seed3/policy.maqpol")),
            "--policy",
            s(&root.join("train-agent/bc/1x0/seed3/policy.maqpol")),
        ],
    );
    assert!(root.join("evaluate/grid_dsac/1x27/seed3/report.csv").exists());
    assert!(root.join("evaluate/bc/1x0/seed3/report.csv").exists());
}

#[test]
fn ablate_resumes_and_sorts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let args = ["ablate", "--H-list", "2,1", "--K-list", "8", "--seeds", "5,4"];
    let first = ok(root, &args);
    assert_eq!(first.matches("computed").count(), 4, "{first}");
    let heatmap_path = root.join("ablate/maq_symmetric/heatmap.csv");
    let heatmap = std::fs::read_to_string(&heatmap_path).unwrap();
    let lines: Vec<&str> = heatmap.lines().collect();
    assert_eq!(lines[0], HEATMAP_HEADER);
    assert_eq!(lines.len(), 1 + 4 * 5);
    let keys: Vec<(usize, usize, u64, String)> = lines[1..]
        .iter()
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].to_string())
        })
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
    assert_eq!(read_heatmap(&heatmap).unwrap().len(), 20);

    // interrupt one cell, then rerun
    std::fs::remove_file(root.join("ablate/maq_symmetric/2x8/seed4/manifest.json")).unwrap();
    let second = ok(root, &args);
    assert_eq!(second.matches("resumed").count(), 3, "{second}");
    assert_eq!(second.matches("computed").count(), 1, "{second}");
    assert!(second.contains("H=2 K=8 seed=4: computed"), "{second}");
    assert_eq!(std::fs::read_to_string(&heatmap_path).unwrap(), heatmap);
}

#[test]
fn ablate_records_failed_cells_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    // a 200-step window is longer than any demonstration, so that cell fails
    let o = lab(
        root,
        &["--set", "unchecked_shape=true", "ablate", "--H-list", "1,200", "--K-list", "8", "--seeds", "1"],
    );
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("H=200 K=8 seed=1: FAILED"), "{err}");
    assert!(root.join("ablate/maq_symmetric/200x8/seed1/error.txt").exists());
    let heatmap = std::fs::read_to_string(root.join("ablate/maq_symmetric/heatmap.csv")).unwrap();
    assert_eq!(heatmap.lines().count(), 1 + 5);
}

#[test]
fn configuration_layers() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("lab.conf");
    std::fs::write(&file, "# sweep\nhorizon = 4\ncodes = 32\nseeds = 2, 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_maq-lab"))
        .args(["--preset", "paper", "--config", s(&file), "--set", "codes=8", "show-config"])
        .env("MAQ_LAB_OUT", dir.path().join("env-root"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    for line in ["horizon = 4", "codes = 8", "seeds = 2,3", "latent_dim = 256", "warmup = 8000"] {
        assert!(text.lines().any(|l| l == line), "missing '{line}' in:\n{text}");
    }
    let env_root = format!("out = {}", dir.path().join("env-root").display());
    assert!(text.lines().any(|l| l == env_root), "{text}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_maq-lab"))
        .args(["gen-demos", "--count", "3"])
        .env("MAQ_LAB_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    verify_dir(&dir.path().join("gen-demos")).unwrap();
}
