use std::path::Path;
use std::process::{Command, Output};

use lsn_core::backbone::ArchConfig;
use lsn_core::checkpoint::load_checkpoint;

const TINY: &[&str] = &[
    "arch.preset=tiny",
    "data.n=96",
    "data.num_classes=4",
    "optim.epochs=2",
    "optim.batch_size=16",
    "head.hidden=16",
    "head.embed=8",
    "probe.epochs=5",
    "run.threads=1",
];

fn lsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsn"))
        .args(args)
        .env_remove("LSN_THREADS")
        .output()
        .expect("run lsn")
}

fn with_sets<'a>(mut args: Vec<&'a str>, sets: &[&'a str]) -> Vec<&'a str> {
    for s in sets {
        args.push("--set");
        args.push(s);
    }
    args
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn pretrain(dir: &Path, extra: &[&str]) -> Output {
    let out = dir.to_str().unwrap();
    let mut sets = TINY.to_vec();
    sets.extend_from_slice(extra);
    lsn(&with_sets(vec!["pretrain", "--out", out], &sets))
}

fn trained(dir: &Path, extra: &[&str]) -> String {
    let o = pretrain(dir, extra);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("final.ckpt").to_str().unwrap().to_string()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pretrain_writes_artifacts_and_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    std::fs::write(&cfg, "# base\nladder.preset = ladder_dense_byol\nrun.checkpoint_every = 1\n").unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["pretrain", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args = with_sets(args, TINY);
    args = with_sets(args, &["ladder.preset=byol"]);
    let o = lsn(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["final.ckpt", "epoch1.ckpt", "metrics.csv", "resolved.cfg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let snap = std::fs::read_to_string(out.join("resolved.cfg")).unwrap();
    assert!(snap.contains("ladder.preset = byol\n"), "{snap}");
    assert!(snap.contains("ladder.weights = 0,0,0,1\n"), "{snap}");
    assert_eq!(csv_rows(&out.join("metrics.csv")).len(), 2 * 96 / 16);
}

#[test]
fn configuration_errors_exit_2_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), &["ladder.presett=byol"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ladder.presett"), "{}", stderr(&o));

    let o = pretrain(dir.path(), &["optim.lr=fast"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optim.lr"));
}

#[test]
fn weight_w_half_resolves_to_powers_of_two() {
    let dir = tempfile::tempdir().unwrap();
    trained(dir.path(), &["ladder.weight_w=0.5"]);
    let snap = std::fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
    assert!(snap.contains("ladder.weights = 0.0625,0.125,0.25,1\n"), "{snap}");
}

#[test]
fn training_failure_exits_1_with_level_losses() {
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), &["optim.lr=1e30"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("training failed") && err.contains("L1="), "{err}");
}

#[test]
fn snapshot_alone_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    trained(&a, &["ladder.preset=ladder_dense_byol"]);
    let snap = a.join("resolved.cfg");
    let o = lsn(&["pretrain", "--config", snap.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(a.join("metrics.csv")).unwrap(), std::fs::read(b.join("metrics.csv")).unwrap());
    let (ca, cb) = (load_checkpoint(&a.join("final.ckpt")).unwrap(), load_checkpoint(&b.join("final.ckpt")).unwrap());
    assert!(ca.online == cb.online && ca.target == cb.target && ca.momentum == cb.momentum);
}

#[test]
fn probe_rows_and_stage_selection() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let all = dir.path().join("all");
    let o = lsn(&["probe", "--ckpt", &ckpt, "--stage", "all", "--out", all.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&all.join("probes.csv"));
    assert_eq!(rows.len(), 4 * 3);
    for r in &rows {
        let acc: f64 = r[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    let one = dir.path().join("one");
    let o = lsn(&["probe", "--ckpt", &ckpt, "--stage", "4", "--out", one.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let single = csv_rows(&one.join("probes.csv"));
    let stage4: Vec<_> = rows.into_iter().filter(|r| r[0] == "4").collect();
    assert_eq!(single, stage4);

    let o = lsn(&["probe", "--ckpt", &ckpt, "--stage", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out of range"));
    let o = lsn(&["probe", "--ckpt", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn seed_flag_selects_probe_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &[]);
    let o = lsn(&["probe", "--ckpt", &ckpt, "--stage", "2", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("probes.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][..2], ["2".to_string(), "7".to_string()]);
}

#[test]
fn analyze_dist_grad_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path(), &["data.n=500", "ladder.preset=ladder_dense_byol"]);
    let out = dir.path().to_str().unwrap();

    let o = lsn(&["analyze", "dist", "--ckpt", &ckpt, "--stages", "1,2,3,4", "--n", "500"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("distances.csv"));
    assert_eq!(rows.len(), 2000);
    assert!(rows.iter().all(|r| (0.0..=2.0).contains(&r[2].parse::<f64>().unwrap())));

    let o = lsn(&["analyze", "grad", "--ckpt", &ckpt, "--level", "4", "--samples", "8", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let side = ArchConfig::tiny().input_size;
    for s in 0..8 {
        let bytes = std::fs::read(dir.path().join(format!("grad_L4_s{s}.pgm"))).unwrap();
        let header = format!("P5\n{side} {side}\n255\n");
        assert!(bytes.starts_with(header.as_bytes()));
        assert_eq!(bytes.len(), header.len() + side * side);
    }
    let o = lsn(&["analyze", "grad", "--ckpt", &ckpt, "--level", "1"]);
    assert_eq!(o.status.code(), Some(2), "a level at the probe stage is rejected");

    let o = lsn(&["analyze", "collapse", "--ckpt", &ckpt, "--n", "200"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("collapse.csv"));
    assert_eq!(rows[0][..2], ["200".to_string(), "8".to_string()]);
    let o = lsn(&["analyze", "collapse", "--ckpt", &ckpt, "--n", "10"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn analyze_theorem1_needs_no_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = lsn(&["analyze", "theorem1", "--set", "arch.preset=compact", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("theorem1.csv"));
    assert_eq!(rows.len(), 16);
    for r in rows {
        let (l, m): (usize, usize) = (r[0].parse().unwrap(), r[1].parse().unwrap());
        assert_eq!(r[2] == "true", m >= l, "zeroed {l}, stage {m}");
    }
}

#[test]
fn unknown_kind_lists_valid_ones() {
    let o = lsn(&["analyze", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    for k in ["dist", "grad", "collapse", "theorem1"] {
        assert!(err.contains(k), "{err}");
    }
    let o = lsn(&["analyze", "dist"]);
    assert_eq!(o.status.code(), Some(2));
}
