//! Round loop over the warm items, cold-item inference, and sweep grids.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::client::{client_update, ClientState, LocalData, LocalTraining};
use crate::data::{Dataset, ItemSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_users, IdcgMode, MetricsReport};
use crate::model::Variant;
use crate::server::{aggregate, ServerState};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    /// Meta network left at its random init and λ forced to 0.
    NoIram,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "no-iram" => Ok(Ablation::NoIram),
            other => Err(Error::Config(format!("unknown ablation `{other}` (expected none or no-iram)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Embedding dimension `d`.
    pub dim: usize,
    pub rounds: usize,
    /// Client sampling ratio α.
    pub client_ratio: f64,
    /// E₁, server epochs per round.
    pub meta_epochs: usize,
    /// E₂, client epochs per round.
    pub local_epochs: usize,
    pub batch_size: usize,
    /// γ.
    pub meta_lr: f64,
    /// η₁.
    pub user_lr: f64,
    /// η₂.
    pub item_lr: f64,
    /// λ; the variant default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    /// δ, Laplace noise scale on uploads.
    pub ldp_scale: f64,
    pub negative_ratio: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Standard deviation of the initial global item embedding.
    pub embedding_init_scale: f64,
    /// Mini-batch size for the meta network; full batch when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meta_batch_size: Option<usize>,
    pub ks: Vec<usize>,
    pub idcg: IdcgMode,
    pub ablation: Ablation,
    /// Client-parallel threads; 0 uses all cores. Does not affect results.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Ncf,
            dim: 200,
            rounds: 100,
            client_ratio: 1.0,
            meta_epochs: 1,
            local_epochs: 1,
            batch_size: 256,
            meta_lr: 0.01,
            user_lr: 0.01,
            item_lr: 3.0,
            lambda: None,
            ldp_scale: 0.0,
            negative_ratio: 5,
            eval_every: 10,
            seed: 0,
            embedding_init_scale: 0.1,
            meta_batch_size: None,
            ks: vec![20, 50, 100],
            idcg: IdcgMode::MinRelevant,
            ablation: Ablation::None,
            workers: 0,
        }
    }
}

/// A value in a sweep grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Int(v) => write!(f, "{v}"),
            SweepValue::Float(v) => write!(f, "{v}"),
            SweepValue::Text(v) => f.write_str(v),
            SweepValue::Bool(v) => write!(f, "{v}"),
        }
    }
}

impl SweepValue {
    fn as_f64(&self, name: &str) -> Result<f64> {
        match self {
            SweepValue::Int(v) => Ok(*v as f64),
            SweepValue::Float(v) => Ok(*v),
            other => Err(Error::Config(format!("`{name}` needs a number, got `{other}`"))),
        }
    }

    fn as_usize(&self, name: &str) -> Result<usize> {
        match self {
            SweepValue::Int(v) if *v >= 0 => Ok(*v as usize),
            SweepValue::Float(v) if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
            other => Err(Error::Config(format!("`{name}` needs a non-negative integer, got `{other}`"))),
        }
    }

    /// Parses a command-line value: integer, then float, then bool, else text.
    pub fn parse(s: &str) -> Self {
        if let Ok(v) = s.parse::<i64>() {
            SweepValue::Int(v)
        } else if let Ok(v) = s.parse::<f64>() {
            SweepValue::Float(v)
        } else if let Ok(v) = s.parse::<bool>() {
            SweepValue::Bool(v)
        } else {
            SweepValue::Text(s.to_string())
        }
    }
}

/// Parameter names accepted by [`TrainConfig::set`], with their aliases.
pub const SWEEPABLE: &[(&str, &[&str])] = &[
    ("variant", &[]),
    ("dim", &["d"]),
    ("rounds", &["t"]),
    ("client_ratio", &["alpha"]),
    ("meta_epochs", &["e1"]),
    ("local_epochs", &["e2"]),
    ("batch_size", &["b"]),
    ("meta_lr", &["gamma"]),
    ("user_lr", &["eta1"]),
    ("item_lr", &["eta2"]),
    ("lambda", &[]),
    ("ldp_scale", &["delta"]),
    ("negative_ratio", &[]),
    ("embedding_init_scale", &[]),
    ("ablation", &[]),
];

fn canonical_name(name: &str) -> Option<&'static str> {
    let lower = name.to_ascii_lowercase();
    SWEEPABLE
        .iter()
        .find(|(canon, aliases)| *canon == lower || aliases.contains(&lower.as_str()))
        .map(|(canon, _)| *canon)
}

impl TrainConfig {
    pub fn lambda(&self) -> f64 {
        match self.ablation {
            Ablation::NoIram => 0.0,
            Ablation::None => self.lambda.unwrap_or_else(|| self.variant.default_lambda()),
        }
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            lambda: self.lambda(),
            user_lr: self.user_lr,
            item_lr: self.item_lr,
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            negative_ratio: self.negative_ratio,
            ldp_scale: self.ldp_scale,
        }
    }

    /// The Recall cutoff used for model selection: 20 when configured, else the first.
    pub fn selection_k(&self) -> usize {
        if self.ks.contains(&20) {
            20
        } else {
            self.ks[0]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.dim == 0 {
            return bad("embedding dimension must be positive".into());
        }
        if !(self.client_ratio > 0.0 && self.client_ratio <= 1.0) {
            return bad(format!("client ratio must be in (0, 1], got {}", self.client_ratio));
        }
        for (name, lr) in [("meta_lr", self.meta_lr), ("user_lr", self.user_lr), ("item_lr", self.item_lr)] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0) || !l.is_finite() {
                return bad(format!("lambda must be finite and non-negative, got {l}"));
            }
        }
        if !(self.ldp_scale >= 0.0) || !self.ldp_scale.is_finite() {
            return bad(format!("ldp_scale must be finite and non-negative, got {}", self.ldp_scale));
        }
        if !(self.embedding_init_scale >= 0.0) || !self.embedding_init_scale.is_finite() {
            return bad(format!("embedding_init_scale must be finite and non-negative, got {}", self.embedding_init_scale));
        }
        if self.batch_size == 0 || self.negative_ratio == 0 || self.eval_every == 0 {
            return bad("batch_size, negative_ratio and eval_every must be positive".into());
        }
        if self.meta_batch_size == Some(0) {
            return bad("meta_batch_size must be positive".into());
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad(format!("ks must be non-empty and positive, got {:?}", self.ks));
        }
        Ok(())
    }

    /// Sets one sweepable parameter by name or alias.
    pub fn set(&mut self, name: &str, value: &SweepValue) -> Result<()> {
        let Some(canon) = canonical_name(name) else {
            let known: Vec<&str> = SWEEPABLE.iter().map(|(n, _)| *n).collect();
            return Err(Error::Config(format!("unknown parameter `{name}` (known: {})", known.join(", "))));
        };
        match canon {
            "variant" => self.variant = value.to_string().parse()?,
            "ablation" => self.ablation = value.to_string().parse()?,
            "dim" => self.dim = value.as_usize(canon)?,
            "rounds" => self.rounds = value.as_usize(canon)?,
            "meta_epochs" => self.meta_epochs = value.as_usize(canon)?,
            "local_epochs" => self.local_epochs = value.as_usize(canon)?,
            "batch_size" => self.batch_size = value.as_usize(canon)?,
            "negative_ratio" => self.negative_ratio = value.as_usize(canon)?,
            "client_ratio" => self.client_ratio = value.as_f64(canon)?,
            "meta_lr" => self.meta_lr = value.as_f64(canon)?,
            "user_lr" => self.user_lr = value.as_f64(canon)?,
            "item_lr" => self.item_lr = value.as_f64(canon)?,
            "lambda" => self.lambda = Some(value.as_f64(canon)?),
            "ldp_scale" => self.ldp_scale = value.as_f64(canon)?,
            "embedding_init_scale" => self.embedding_init_scale = value.as_f64(canon)?,
            _ => unreachable!("every canonical name is handled"),
        }
        Ok(())
    }

    /// SHA-256 of the configuration with seed and worker count cleared, hex.
    pub fn config_hash(&self) -> String {
        let normalized = TrainConfig {
            seed: 0,
            workers: 0,
            ..self.clone()
        };
        let json = serde_json::to_string(&normalized).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Metrics of one evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub round: usize,
    pub split: ItemSplit,
    pub report: MetricsReport,
}

/// Per-round training diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub clients: usize,
    /// Meta-network loss of the round's last server epoch.
    pub meta_loss: Option<f64>,
    /// Mean over participating clients of their mean batch BCE.
    pub mean_bce: Option<f64>,
    pub mean_alignment: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainedSystem {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub config: TrainConfig,
    pub history: Vec<EvalRecord>,
    pub round_stats: Vec<RoundStats>,
    /// Round whose parameters this system holds.
    pub best_round: usize,
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a pool of {workers} threads: {e}")))
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Initial server and client states for `config`.
pub fn initialize(dataset: &Dataset, config: &TrainConfig) -> Result<(ServerState, Vec<ClientState>)> {
    let server = ServerState::new(
        dataset.num_warm(),
        config.dim,
        dataset.attribute_dim(),
        config.embedding_init_scale,
        config.seed,
    )?;
    let clients = (0..dataset.num_users())
        .map(|u| ClientState::new(u, config.variant, config.dim, config.seed))
        .collect();
    Ok((server, clients))
}

/// Runs `config.rounds` rounds. Each round fits the meta network to the
/// round-start global embedding, computes warm representations, samples
/// clients, runs their local updates in parallel and averages the uploads in
/// ascending client order.
///
/// Validation-cold metrics are recorded at round 0, every `eval_every`
/// rounds and after the last round. The returned system holds the
/// parameters of the round with the best validation Recall@20 (the last
/// round when there is no validation set).
pub fn run_training(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedSystem> {
    config.validate()?;
    let pool = thread_pool(config.workers)?;
    pool.install(|| train_in_pool(dataset, config))
}

fn train_in_pool(dataset: &Dataset, config: &TrainConfig) -> Result<TrainedSystem> {
    let (server, clients) = initialize(dataset, config)?;
    let warm_attributes = dataset.warm_attributes();
    let local_data = (0..dataset.num_users())
        .map(|u| LocalData::for_user(dataset, u))
        .collect::<Result<Vec<_>>>()?;
    let local = config.local_training();
    let train_meta = config.ablation != Ablation::NoIram;
    let has_val = !dataset.cold_val_items().is_empty();
    let select_k = config.selection_k();

    let mut system = TrainedSystem {
        server,
        clients,
        config: config.clone(),
        history: Vec::new(),
        round_stats: Vec::new(),
        best_round: 0,
    };
    let mut best: Option<(f64, ServerState, Vec<ClientState>)> = None;

    let mut record = |system: &mut TrainedSystem, round: usize| -> Result<()> {
        if !has_val {
            return Ok(());
        }
        let report = evaluate(system, dataset, ItemSplit::Val)?;
        let recall = report.recall_at(select_k).unwrap_or(0.0);
        log::info!("round {round}: validation Recall@{select_k} = {recall:.4}");
        system.history.push(EvalRecord {
            round,
            split: ItemSplit::Val,
            report,
        });
        if best.as_ref().is_none_or(|(r, _, _)| recall > *r) {
            best = Some((recall, system.server.clone(), system.clients.clone()));
            system.best_round = round;
        }
        Ok(())
    };

    record(&mut system, 0)?;
    let n = dataset.num_users();
    for round in 1..=config.rounds {
        let scope = format!("round {round}");
        let server = &mut system.server;
        let meta_loss = if train_meta {
            server
                .train_meta_network(&warm_attributes, config.meta_epochs, config.meta_lr, config.meta_batch_size)
                .map_err(|e| e.within(&scope))?
                .last()
                .copied()
        } else {
            None
        };
        let representation = server.meta_net.attribute_representation(&warm_attributes)?;
        let sampled = server.sample_clients(n, config.client_ratio)?;
        let mut chosen = vec![false; n];
        for &id in &sampled {
            chosen[id] = true;
        }
        let global = &server.global_item_embedding;
        let reports = system
            .clients
            .par_iter_mut()
            .zip(local_data.par_iter())
            .zip(chosen.par_iter())
            .filter(|(_, &c)| c)
            .map(|((client, data), _)| client_update(client, global, &representation, &local, data))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.within(&scope))?;

        let uploads: Vec<_> = reports.iter().map(|r| r.item_embedding.clone()).collect();
        system.server.global_item_embedding = aggregate(&uploads)?;
        system.server.round = round;
        system.round_stats.push(RoundStats {
            round,
            clients: reports.len(),
            meta_loss,
            mean_bce: mean(reports.iter().filter_map(|r| r.mean_recommendation_loss())),
            mean_alignment: mean(reports.iter().filter_map(|r| r.alignment_penalty.last().copied())),
        });
        if round % config.eval_every == 0 || round == config.rounds {
            record(&mut system, round)?;
        }
    }

    match best {
        Some((_, server, clients)) => {
            system.server = server;
            system.clients = clients;
        }
        None => system.best_round = config.rounds,
    }
    Ok(system)
}

/// Ranks `items` for every user with `users[u] = true`: the server computes
/// `r = ℳ_φ(X_items)` once and each client scores those rows with its own
/// predictor. Higher score first, ties by ascending item id.
pub fn infer_cold_for(
    system: &TrainedSystem,
    dataset: &Dataset,
    items: &[usize],
    users: &[usize],
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if let Some(&bad) = items.iter().find(|&&i| i >= dataset.num_items()) {
        return Err(Error::Lookup(format!("unknown item {bad}")));
    }
    let representation = system.server.cold_representations(&dataset.attributes_of(items)?)?;
    users
        .par_iter()
        .map(|&u| {
            let client = system
                .clients
                .get(u)
                .ok_or_else(|| Error::Lookup(format!("unknown user {u}")))?;
            let scores = if items.is_empty() {
                Vec::new()
            } else {
                client.model.item_scorer().forward_logits(&representation)?.into_vec()
            };
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
            Ok((u, order.into_iter().map(|i| items[i]).collect()))
        })
        .collect()
}

/// [`infer_cold_for`] over every user.
pub fn infer_cold(system: &TrainedSystem, dataset: &Dataset, items: &[usize]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let users: Vec<usize> = (0..system.clients.len()).collect();
    infer_cold_for(system, dataset, items, &users)
}

/// Ranks one cold split and scores it against each user's interactions there.
pub fn evaluate(system: &TrainedSystem, dataset: &Dataset, split: ItemSplit) -> Result<MetricsReport> {
    let items = dataset.cold_items(split);
    let mut relevants = BTreeMap::new();
    for u in 0..dataset.num_users() {
        let rel: HashSet<usize> = dataset.interactions_in(u, split)?.into_iter().collect();
        if !rel.is_empty() {
            relevants.insert(u, rel);
        }
    }
    let users: Vec<usize> = relevants.keys().copied().collect();
    let rankings = infer_cold_for(system, dataset, items, &users)?;
    evaluate_users(&rankings, &relevants, &system.config.ks, system.config.idcg)
}

/// Parameter name → values; the grid is their Cartesian product.
pub type Sweep = BTreeMap<String, Vec<SweepValue>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub best_round: usize,
    pub validation: Option<MetricsReport>,
    pub test: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub params: Vec<(String, SweepValue)>,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: std::result::Result<CellOutcome, String>,
}

/// Every combination of sweep values, parameters in name order.
pub fn grid_cells(sweep: &Sweep) -> Vec<Vec<(String, SweepValue)>> {
    let mut cells = vec![Vec::new()];
    for (name, values) in sweep {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                values.iter().map(move |v| {
                    let mut next = cell.clone();
                    next.push((name.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    cells
}

/// `base_seed` plus a stable hash of the cell's assignments; the empty cell keeps `base_seed`.
pub fn derive_seed(base_seed: u64, cell: &[(String, SweepValue)]) -> u64 {
    if cell.is_empty() {
        return base_seed;
    }
    let mut hasher = Sha256::new();
    for (name, value) in cell {
        hasher.update(name.as_bytes());
        hasher.update(b"=");
        hasher.update(serde_json::to_string(value).expect("value serializes").as_bytes());
        hasher.update(b";");
    }
    let digest = hasher.finalize();
    base_seed.wrapping_add(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Applies one cell to `base`, including its derived seed.
pub fn cell_config(base: &TrainConfig, cell: &[(String, SweepValue)]) -> Result<TrainConfig> {
    let mut config = base.clone();
    for (name, value) in cell {
        config.set(name, value)?;
    }
    config.seed = derive_seed(base.seed, cell);
    config.validate()?;
    Ok(config)
}

pub fn run_cell(dataset: &Dataset, config: &TrainConfig) -> Result<CellOutcome> {
    let system = run_training(dataset, config)?;
    let validation = system
        .history
        .iter()
        .find(|r| r.round == system.best_round)
        .map(|r| r.report.clone());
    Ok(CellOutcome {
        best_round: system.best_round,
        validation,
        test: evaluate(&system, dataset, ItemSplit::Test)?,
    })
}

/// Runs every cell of the grid, up to `base.workers` at a time. Unknown
/// parameter names fail up front; a cell that fails during training is
/// recorded and the rest continue.
pub fn run_experiment_grid(dataset: &Dataset, base: &TrainConfig, sweep: &Sweep) -> Result<Vec<GridRow>> {
    base.validate()?;
    let cells = grid_cells(sweep);
    let configs = cells
        .iter()
        .map(|cell| cell_config(base, cell))
        .collect::<Result<Vec<_>>>()?;
    let pool = thread_pool(base.workers)?;
    Ok(pool.install(|| {
        cells
            .into_par_iter()
            .zip(configs.into_par_iter())
            .map(|(params, config)| {
                let outcome = run_cell(dataset, &config).map_err(|e| {
                    log::warn!("sweep cell {params:?} failed: {e}");
                    e.to_string()
                });
                GridRow {
                    params,
                    seed: config.seed,
                    config_hash: config.config_hash(),
                    outcome,
                }
            })
            .collect()
    }))
}
