use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coldfed::cli::MetricRecord;
use coldfed::config::ExperimentConfig;
use coldfed::data::{generate_synthetic, SyntheticConfig};

fn small() -> SyntheticConfig {
    SyntheticConfig {
        users: 20,
        warm_items: 40,
        cold_val_items: 15,
        cold_test_items: 15,
        latent_dim: 4,
        attribute_dim: 8,
        interactions_per_user: 5,
        relevant_per_user: 3,
        ..SyntheticConfig::default()
    }
}

fn write_config(dir: &Path, seed: u64, extra: &str) -> PathBuf {
    let mut config = ExperimentConfig::synthetic_default();
    config.dataset.seed = seed;
    config.dataset.synthetic = Some(small());
    config.train.dim = 8;
    config.train.rounds = 4;
    config.train.eval_every = 2;
    config.train.ks = vec![5, 10];
    config.output.dir = dir.join("out");
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml_string().unwrap() + extra).unwrap();
    path
}

fn coldfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coldfed"))
        .args(args)
        .env_remove("COLDFED_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_records(path: &Path) -> Vec<MetricRecord> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generated_files_load_back_to_the_same_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 5, "");
    let data = tmp.path().join("data");
    let out = coldfed(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let mut from_files = ExperimentConfig::default();
    from_files.dataset.interactions = Some(data.join("interactions.tsv"));
    from_files.dataset.attributes = Some(data.join("attributes.txt"));
    from_files.dataset.split = Some(data.join("split.txt"));
    let (loaded, _) = from_files.load_dataset().unwrap();
    assert_eq!(loaded, generate_synthetic(&small(), 5).unwrap());
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 0, "");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "11"), (&b, "11"), (&c, "12")] {
        assert!(coldfed(&["generate", "--config", s(&cfg), "--out", s(dir), "--seed", seed]).status.success());
    }
    for f in ["interactions.tsv", "attributes.txt", "split.txt", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(
        std::fs::read(a.join("attributes.txt")).unwrap(),
        std::fs::read(c.join("attributes.txt")).unwrap()
    );
}

#[test]
fn planted_fingerprints_differ_across_seeds() {
    let config = small();
    let hashes: HashSet<String> = (0..100)
        .map(|seed| coldfed::data::generate_planted(&config, seed).unwrap().1.fingerprint())
        .collect();
    assert_eq!(hashes.len(), 100);
}

#[test]
fn zero_rounds_evaluates_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 1, "");
    let out = coldfed(&["train", "--config", s(&cfg), "--rounds", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_records(&tmp.path().join("out/metrics.jsonl"));
    assert!(records.iter().all(|r| r.round == 0));
    assert!(records.iter().any(|r| r.split == "test"));
}

#[test]
fn errors_map_to_exit_codes_with_a_json_record() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write_config(tmp.path(), 0, "");
    let out = coldfed(&["train", "--config", s(&bad), "--alpha", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let record: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(record["exit_code"], 2);

    let unknown = tmp.path().join("unknown.toml");
    std::fs::write(&unknown, "[train]\nroundz = 1\n").unwrap();
    assert_eq!(coldfed(&["train", "--config", s(&unknown)]).status.code(), Some(2));

    let garbage = tmp.path().join("bad.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let out = coldfed(&["eval", "--config", s(&bad), "--checkpoint", s(&garbage)]);
    assert_eq!(out.status.code(), Some(3));

    let mut files = ExperimentConfig::default();
    let interactions = tmp.path().join("i.tsv");
    std::fs::write(&interactions, "0\t1\nzero\t2\n").unwrap();
    let attributes = tmp.path().join("a.txt");
    std::fs::write(&attributes, "0.1 0.2\n0.3 0.4\n0.5 0.6\n").unwrap();
    files.dataset.interactions = Some(interactions);
    files.dataset.attributes = Some(attributes);
    files.dataset.split_ratio = Some(coldfed::config::RatioSplit { seed: 0, warm: 0.4, val: 0.3, test: 0.3 });
    let path = tmp.path().join("files.toml");
    std::fs::write(&path, files.to_toml_string().unwrap()).unwrap();
    assert_eq!(coldfed(&["train", "--config", s(&path)]).status.code(), Some(3));
}

#[test]
fn environment_overrides_file_and_flag_overrides_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 0, "");
    let env_dir = tmp.path().join("from_env");
    let run = |extra: &[&str]| {
        let mut args = vec!["train", "--config", s(&cfg), "--rounds", "0", "--no-checkpoint"];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_coldfed"))
            .args(&args)
            .env("COLDFED_OUTPUT_DIR", &env_dir)
            .output()
            .unwrap()
    };
    assert!(run(&[]).status.success());
    assert!(env_dir.join("summary.txt").is_file());
    assert!(!tmp.path().join("out").exists());

    let flag_dir = tmp.path().join("from_flag");
    assert!(run(&["--out", s(&flag_dir)]).status.success());
    assert!(flag_dir.join("summary.txt").is_file());
}

#[test]
fn eval_reproduces_the_training_test_record_and_sweep_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), 2, "");

    let sweep_dir = tmp.path().join("sweep");
    let out = coldfed(&["sweep", "--config", s(&cfg), "--out", s(&sweep_dir), "--sweep", "delta=0.0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = std::fs::read_to_string(sweep_dir.join("sweep.tsv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split('\t').collect();
    let row: Vec<&str> = lines[1].split('\t').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("status"), "ok");
    let seed = col("seed").to_string();

    // the same cell run through `train` with the cell's derived seed
    let out = coldfed(&["train", "--config", s(&cfg), "--seed", &seed, "--delta", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = read_records(&tmp.path().join("out/metrics.jsonl"));
    let trained: Vec<&MetricRecord> = records.iter().filter(|r| r.split == "test").collect();
    assert_eq!(trained.len(), 2);
    for r in &trained {
        let got: f64 = col(&format!("recall@{}", r.k)).parse().unwrap();
        assert!((got - r.recall).abs() < 1e-6, "k={} {got} vs {}", r.k, r.recall);
    }

    let ckpt = tmp.path().join("out/model.ckpt");
    let out = coldfed(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evaluated: Vec<MetricRecord> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(evaluated.iter().collect::<Vec<_>>(), trained);
}
