//! Command-line front end: `generate`, `train`, `sweep` and `eval`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_system, save_system};
use crate::config::ExperimentConfig;
use crate::data::{write_attributes, write_interactions, write_split, ItemSplit, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::federation::{
    evaluate, run_experiment_grid, run_training, Ablation, GridRow, Sweep, SweepValue, TrainConfig,
};
use crate::model::Variant;

/// Environment variable overriding the output directory of the config file.
pub const OUTPUT_DIR_ENV: &str = "COLDFED_OUTPUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "coldfed", version, about = "Federated cold-start item recommendation simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (interactions, attributes, split, manifest).
    Generate(GenerateArgs),
    /// Train, evaluate on the test cold items and write a checkpoint.
    Train(TrainArgs),
    /// Run every cell of a parameter grid and write one table row per cell.
    Sweep(SweepArgs),
    /// Re-evaluate a checkpoint on a cold split.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (default: the config's output dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    /// Client sampling ratio α.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Server epochs per round (E₁).
    #[arg(long)]
    pub e1: Option<usize>,
    /// Client epochs per round (E₂).
    #[arg(long)]
    pub e2: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Meta network learning rate γ.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// User embedding / predictor learning rate η₁.
    #[arg(long)]
    pub eta1: Option<f64>,
    /// Item embedding learning rate η₂.
    #[arg(long)]
    pub eta2: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Laplace noise scale δ.
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub negative_ratio: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// `none` or `no-iram`.
    #[arg(long)]
    pub ablation: Option<Ablation>,
    /// Any sweepable parameter as `name=value`; repeatable.
    #[arg(long = "set", value_name = "NAME=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// Skip writing the checkpoint.
    #[arg(long)]
    pub no_checkpoint: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    /// `name=v1,v2,...`; repeatable, replaces the config's entry for that name.
    #[arg(long = "sweep", value_name = "NAME=VALUES")]
    pub sweep: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config describing the dataset the checkpoint was trained on.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
}

fn parse_split(s: &str) -> Result<ItemSplit> {
    match s {
        "val" | "validation" => Ok(ItemSplit::Val),
        "test" => Ok(ItemSplit::Test),
        other => Err(Error::Config(format!("unknown split `{other}` (expected val or test)"))),
    }
}

fn split_name(split: ItemSplit) -> &'static str {
    match split {
        ItemSplit::Warm => "warm",
        ItemSplit::Val => "val",
        ItemSplit::Test => "test",
    }
}

fn base_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let mut config = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::synthetic_default(),
    };
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|v| !v.is_empty()) {
        config.output.dir = PathBuf::from(dir);
    }
    Ok(config)
}

fn key_value(arg: &str) -> Result<(&str, &str)> {
    arg.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::Config(format!("expected NAME=VALUE, got `{arg}`")))
}

/// Loads the config file (or the synthetic default), then applies the
/// environment and command-line overrides, flags last.
pub fn resolve_config(o: &TrainOverrides) -> Result<ExperimentConfig> {
    let mut config = base_config(o.config.as_deref())?;
    if let Some(out) = &o.out {
        config.output.dir = out.clone();
    }
    let t: &mut TrainConfig = &mut config.train;
    macro_rules! apply {
        ($($flag:ident => $field:ident),* $(,)?) => {
            $(if let Some(v) = o.$flag.clone() { t.$field = v; })*
        };
    }
    apply!(
        variant => variant, dim => dim, rounds => rounds, alpha => client_ratio,
        e1 => meta_epochs, e2 => local_epochs, batch_size => batch_size, gamma => meta_lr,
        eta1 => user_lr, eta2 => item_lr, delta => ldp_scale, negative_ratio => negative_ratio,
        eval_every => eval_every, seed => seed, workers => workers, ablation => ablation,
    );
    if let Some(l) = o.lambda {
        t.lambda = Some(l);
    }
    for arg in &o.set {
        let (k, v) = key_value(arg)?;
        match k {
            "seed" => t.seed = v.parse().map_err(|_| Error::Config(format!("bad seed `{v}`")))?,
            "workers" => t.workers = v.parse().map_err(|_| Error::Config(format!("bad workers `{v}`")))?,
            _ => t.set(k, &SweepValue::parse(v))?,
        }
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    planted_hash: String,
    synthetic: &'a SyntheticConfig,
    users: usize,
    items: usize,
    warm_items: usize,
    cold_val_items: usize,
    cold_test_items: usize,
}

pub const INTERACTIONS_FILE: &str = "interactions.tsv";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";
pub const SPLIT_FILE: &str = "split.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

pub fn cmd_generate(args: &GenerateArgs) -> Result<PathBuf> {
    let mut config = base_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.dataset.seed = seed;
    }
    let Some(synthetic) = config.dataset.synthetic.clone() else {
        return Err(Error::Config("generate needs a [dataset.synthetic] table".into()));
    };
    let out = args.out.clone().unwrap_or(config.output.dir.clone());
    let (dataset, planted) = config.load_dataset()?;
    let planted = planted.expect("synthetic data has a planted model");
    create_dir(&out)?;
    write_file(&out.join(INTERACTIONS_FILE), |w| write_interactions(&dataset, w))?;
    write_file(&out.join(ATTRIBUTES_FILE), |w| write_attributes(dataset.attributes(), w))?;
    write_file(&out.join(SPLIT_FILE), |w| write_split(&dataset, w))?;
    let manifest = Manifest {
        seed: config.dataset.seed,
        planted_hash: planted.fingerprint(),
        synthetic: &synthetic,
        users: dataset.num_users(),
        items: dataset.num_items(),
        warm_items: dataset.num_warm(),
        cold_val_items: dataset.cold_val_items().len(),
        cold_test_items: dataset.cold_test_items().len(),
    };
    write_file(&out.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)
    })?;
    Ok(out)
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub config_hash: String,
    pub seed: u64,
    pub round: usize,
    pub split: String,
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

pub fn metric_records(config: &TrainConfig, round: usize, split: ItemSplit, report: &MetricsReport) -> Vec<MetricRecord> {
    let hash = config.config_hash();
    report
        .at
        .iter()
        .map(|m| MetricRecord {
            config_hash: hash.clone(),
            seed: config.seed,
            round,
            split: split_name(split).to_string(),
            k: m.k,
            recall: m.recall,
            precision: m.precision,
            ndcg: m.ndcg,
        })
        .collect()
}

/// Human-readable table, metrics in units of 1e-2.
pub fn summary_table(config: &TrainConfig, best_round: usize, report: &MetricsReport, split: ItemSplit) -> String {
    let mut s = String::new();
    let ablation = match config.ablation {
        Ablation::None => "full",
        Ablation::NoIram => "w/o IRAM",
    };
    s.push_str(&format!(
        "variant {} ({ablation})  lambda {}  delta {}  alpha {}  seed {}  config {}\n",
        config.variant,
        config.lambda(),
        config.ldp_scale,
        config.client_ratio,
        config.seed,
        config.config_hash()
    ));
    s.push_str(&format!(
        "{} cold items, {} users, best validation round {best_round} (units of 1e-2)\n",
        split_name(split),
        report.users
    ));
    s.push_str(&format!("{:>6} {:>9} {:>10} {:>9}\n", "k", "Recall", "Precision", "NDCG"));
    for m in &report.at {
        s.push_str(&format!(
            "{:>6} {:>9.2} {:>10.2} {:>9.2}\n",
            m.k,
            100.0 * m.recall,
            100.0 * m.precision,
            100.0 * m.ndcg
        ));
    }
    s
}

pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub test: MetricsReport,
    pub records: Vec<MetricRecord>,
    pub summary: String,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let config = resolve_config(&args.overrides)?;
    let (dataset, _) = config.load_dataset()?;
    let system = run_training(&dataset, &config.train)?;
    let test = evaluate(&system, &dataset, ItemSplit::Test)?;

    let mut records = Vec::new();
    for h in &system.history {
        records.extend(metric_records(&config.train, h.round, h.split, &h.report));
    }
    records.extend(metric_records(&config.train, system.best_round, ItemSplit::Test, &test));
    let summary = summary_table(&config.train, system.best_round, &test, ItemSplit::Test);

    let out = config.output.dir.clone();
    create_dir(&out)?;
    write_file(&out.join(METRICS_FILE), |w| {
        for r in &records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    })?;
    write_file(&out.join(SUMMARY_FILE), |w| w.write_all(summary.as_bytes()))?;
    write_file(&out.join("config.toml"), |w| {
        w.write_all(config.to_toml_string().map_err(std::io::Error::other)?.as_bytes())
    })?;
    if config.output.checkpoint && !args.no_checkpoint {
        save_system(&system, &out.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainOutcome {
        out_dir: out,
        test,
        records,
        summary,
    })
}

fn parse_sweep_arg(arg: &str) -> Result<(String, Vec<SweepValue>)> {
    let (k, v) = key_value(arg)?;
    let values: Vec<SweepValue> = v.split(',').map(|s| SweepValue::parse(s.trim())).collect();
    Ok((k.to_string(), values))
}

/// The sweep table: one row per cell; swept parameters, seed, rounds to the
/// best validation round, status, then test metrics at every k.
pub fn sweep_table(rows: &[GridRow], ks: &[usize], delimiter: char) -> String {
    let names: Vec<&str> = rows
        .first()
        .map(|r| r.params.iter().map(|(n, _)| n.as_str()).collect())
        .unwrap_or_default();
    let mut header: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    header.extend(["seed", "rounds_to_best", "status"].map(String::from));
    for k in ks {
        header.extend([format!("recall@{k}"), format!("precision@{k}"), format!("ndcg@{k}")]);
    }
    let d = delimiter.to_string();
    let mut out = header.join(&d);
    out.push('\n');
    for row in rows {
        let mut cells: Vec<String> = row.params.iter().map(|(_, v)| v.to_string()).collect();
        cells.push(row.seed.to_string());
        match &row.outcome {
            Ok(o) => {
                cells.push(o.best_round.to_string());
                cells.push("ok".into());
                for &k in ks {
                    match o.test.at_k(k) {
                        Some(m) => cells.extend([m.recall, m.precision, m.ndcg].map(|v| format!("{v:.6}"))),
                        None => cells.extend(std::iter::repeat_n(String::new(), 3)),
                    }
                }
            }
            Err(e) => {
                cells.push(String::new());
                cells.push(format!("failed: {}", e.replace(['\t', '\n', ','], " ")));
                cells.extend(std::iter::repeat_n(String::new(), 3 * ks.len()));
            }
        }
        out.push_str(&cells.join(&d));
        out.push('\n');
    }
    out
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(PathBuf, Vec<GridRow>)> {
    let mut config = resolve_config(&args.overrides)?;
    for arg in &args.sweep {
        let (name, values) = parse_sweep_arg(arg)?;
        config.sweep.insert(name, values);
    }
    let sweep: Sweep = config.sweep.clone();
    let (dataset, _) = config.load_dataset()?;
    let rows = run_experiment_grid(&dataset, &config.train, &sweep)?;
    let format = config.output.table_format;
    let table = sweep_table(&rows, &config.train.ks, format.delimiter());
    create_dir(&config.output.dir)?;
    let path = config.output.dir.join(format!("sweep.{}", format.extension()));
    write_file(&path, |w| w.write_all(table.as_bytes()))?;
    Ok((path, rows))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Vec<MetricRecord>> {
    let split = parse_split(&args.split)?;
    let config = base_config(args.config.as_deref())?;
    let (dataset, _) = config.load_dataset()?;
    let system = load_system(&args.checkpoint)?;
    if system.server.global_item_embedding.rows() != dataset.num_warm() || system.clients.len() != dataset.num_users() {
        return Err(Error::Checkpoint(
            "checkpoint does not match the dataset's warm items or users".into(),
        ));
    }
    let report = evaluate(&system, &dataset, split)?;
    Ok(metric_records(&system.config, system.best_round, split, &report))
}

fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io(Path::new("<stdout>"), e)),
        _ => Ok(()),
    }
}

/// Runs a parsed command, printing results to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(args) => {
            let out = cmd_generate(&args)?;
            emit(&format!("wrote dataset to {}\n", out.display()))
        }
        Command::Train(args) => {
            let outcome = cmd_train(&args)?;
            emit(&format!("{}outputs in {}\n", outcome.summary, outcome.out_dir.display()))
        }
        Command::Sweep(args) => {
            let (path, rows) = cmd_sweep(&args)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            emit(&format!("{} cells ({failed} failed), table at {}\n", rows.len(), path.display()))
        }
        Command::Eval(args) => {
            let mut text = String::new();
            for r in cmd_eval(&args)? {
                text.push_str(&serde_json::to_string(&r).expect("record serializes"));
                text.push('\n');
            }
            emit(&text)
        }
    }
}

/// The structured record printed on stderr when a command fails.
pub fn error_record(err: &Error) -> String {
    serde_json::json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": err.exit_code(),
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[dataset.synthetic]\nusers = 7\n[train]\nrounds = 3\nlambda = 0.5\n").unwrap();
        let o = TrainOverrides {
            config: Some(path),
            rounds: Some(9),
            set: vec!["delta=0.3".into()],
            ..TrainOverrides::default()
        };
        let c = resolve_config(&o).unwrap();
        assert_eq!(c.train.rounds, 9);
        assert_eq!(c.train.lambda(), 0.5);
        assert_eq!(c.train.ldp_scale, 0.3);
        assert_eq!(c.dataset.synthetic.unwrap().users, 7);
    }

    #[test]
    fn clap_parses_train_flags() {
        let cli = Cli::try_parse_from([
            "coldfed", "train", "--variant", "ncf", "--lambda", "1.0", "--ablation", "no-iram", "--rounds", "0",
        ])
        .unwrap();
        let Command::Train(args) = cli.command else { panic!("not train") };
        let c = resolve_config(&args.overrides).unwrap();
        assert_eq!(c.train.variant, Variant::Ncf);
        assert_eq!(c.train.ablation, Ablation::NoIram);
        assert_eq!(c.train.lambda(), 0.0);
        assert!(Cli::try_parse_from(["coldfed", "train", "--ablation", "maybe"]).is_err());
    }

    #[test]
    fn sweep_arguments_parse() {
        let (name, values) = parse_sweep_arg("delta=0,0.1,0.2").unwrap();
        assert_eq!(name, "delta");
        assert_eq!(values, vec![SweepValue::Int(0), SweepValue::Float(0.1), SweepValue::Float(0.2)]);
        assert!(parse_sweep_arg("delta").is_err());
    }

    #[test]
    fn error_records_are_json() {
        let rec: serde_json::Value = serde_json::from_str(&error_record(&Error::Config("bad".into()))).unwrap();
        assert_eq!(rec["exit_code"], 2);
        assert_eq!(rec["error"], "config");
    }
}
