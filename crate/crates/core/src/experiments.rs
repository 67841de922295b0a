//! Reproducible experiment runs: metrics, configuration, presets and the
//! artifact layout shared by every method.
//!
//! A run directory holds `config.toml` (the fully resolved config),
//! `metrics.csv`, a checkpoint where the method has one, and
//! `summary.json`. The first line of `metrics.csv` is a `#` provenance
//! comment carrying the SHA-256 of `config.toml`.

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::active::{self, ActiveConfig, ActiveError, GfnGenerator, Generator, MhGenerator, PpoGenerator};
use crate::baselines::{mh_sample_with, ppo_train, PpoConfig, PpoPolicy};
use crate::env::{ActionId, DagEnv, Trajectory};
use crate::flownet::{
    exact_terminal_dist, sample_terminals, train, Control, FlowModel, GfnError, LossKind, LossParams, MlpFlow,
    TrainConfig, TrainingData,
};
use crate::hypergrid::{self, GridError, GridReward, GridSpec, GridState, HyperGrid, OfflineMode};
use crate::nn::{Mlp, NnError};
use crate::oracles::{self, enumerate_states, ExactTables, OracleError, StateGraph, DEFAULT_STATE_CAP};

pub const CSV_HEADER: &str = "trajectories_seen,states_visited,leaf_loss,flow_loss,L1_exact,modes_found";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("distributions have different supports ({0} vs {1} outcomes)")]
    SupportMismatch(usize, usize),
    #[error("distribution sums to {0}, not 1")]
    NotNormalized(f64),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Gfn(#[from] GfnError),
    #[error(transparent)]
    Active(#[from] ActiveError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Mean over outcomes of `|p(x) - q(x)|`.
pub fn l1_error(p: &[f64], q: &[f64]) -> Result<f64, ExperimentError> {
    if p.len() != q.len() || p.is_empty() {
        return Err(ExperimentError::SupportMismatch(p.len(), q.len()));
    }
    for d in [p, q] {
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(ExperimentError::NotNormalized(s));
        }
    }
    Ok(l1_sum(p, q) / p.len() as f64)
}

/// `sum_x |p(x) - q(x)|` without validation.
pub fn l1_sum(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Distinct mode cells seen so far, shared by every method.
#[derive(Debug, Clone)]
pub struct ModeCounter {
    modes: HashSet<usize>,
    found: HashSet<usize>,
    all_found_at: Option<usize>,
}

impl ModeCounter {
    pub fn new(grid: &HyperGrid) -> Self {
        Self::from_modes(grid.mode_cells())
    }

    pub fn from_modes(modes: impl IntoIterator<Item = usize>) -> Self {
        Self { modes: modes.into_iter().collect(), found: HashSet::new(), all_found_at: None }
    }

    /// Records a visit to `cell` after `states_visited` states. Returns
    /// `true` if it was a new mode.
    pub fn visit(&mut self, cell: usize, states_visited: usize) -> bool {
        if !self.modes.contains(&cell) || !self.found.insert(cell) {
            return false;
        }
        if self.all_found() && self.all_found_at.is_none() {
            self.all_found_at = Some(states_visited);
        }
        true
    }

    pub fn count(&self) -> usize {
        self.found.len()
    }

    pub fn total(&self) -> usize {
        self.modes.len()
    }

    pub fn all_found(&self) -> bool {
        self.found.len() == self.modes.len()
    }

    /// States visited when the last mode was first seen.
    pub fn all_found_at(&self) -> Option<usize> {
        self.all_found_at
    }
}

/// Position of each cell's sink among `graph.terminals()`.
pub fn terminal_slots(grid: &HyperGrid, graph: &StateGraph<GridState>) -> Vec<usize> {
    let slot_of: std::collections::HashMap<usize, usize> =
        graph.terminals().enumerate().map(|(slot, i)| (i, slot)).collect();
    grid.cells().map(|c| slot_of[&graph.index[&GridState::sink(&c)]]).collect()
}

/// `R/Z` aligned with `graph.terminals()`.
pub fn target_probs<S>(graph: &StateGraph<S>) -> Vec<f64> {
    oracles::target_distribution(graph).into_iter().map(|(_, p)| p).collect()
}

/// Exact terminal distribution of a model and its L1 to `R/Z`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExactEval {
    pub l1_mean: f64,
    pub l1_sum: f64,
    pub distribution: Vec<f64>,
}

pub fn eval_policy_exact<E: DagEnv, M: FlowModel<E>>(
    model: &M,
    env: &E,
    graph: &StateGraph<E::State>,
) -> Result<ExactEval, ExperimentError> {
    let dist = exact_terminal_dist(model, env, graph)?;
    exact_eval(graph, dist)
}

fn exact_eval<S>(graph: &StateGraph<S>, dist: Vec<f64>) -> Result<ExactEval, ExperimentError> {
    let target = target_probs(graph);
    Ok(ExactEval { l1_mean: l1_error(&dist, &target)?, l1_sum: l1_sum(&dist, &target), distribution: dist })
}

/// Exact terminal distribution of per-state action probabilities, aligned
/// with `graph.terminals()`. `probs` maps every non-terminal state to a
/// distribution over all actions.
pub fn policy_terminal_dist<S, F>(graph: &StateGraph<S>, mut probs: F) -> Result<Vec<f64>, ExperimentError>
where
    S: std::fmt::Display,
    F: FnMut(usize) -> Vec<f64>,
{
    let flow: oracles::EdgeValues = (0..graph.len())
        .map(|i| {
            if graph.children[i].is_empty() {
                return Vec::new();
            }
            let p = probs(i);
            graph.children[i].iter().map(|&(ActionId(a), _)| p[a].max(f64::MIN_POSITIVE)).collect()
        })
        .collect();
    Ok(oracles::induced_terminal_dist(graph, &flow)?.into_iter().map(|(_, p)| p).collect())
}

pub fn eval_ppo_exact(policy: &PpoPolicy, grid: &HyperGrid, graph: &StateGraph<GridState>) -> Result<ExactEval, ExperimentError> {
    let interior: Vec<usize> = (0..graph.len()).filter(|&i| !graph.terminal[i]).collect();
    let mut table = vec![Vec::new(); graph.len()];
    for chunk in interior.chunks(2048) {
        let states: Vec<GridState> = chunk.iter().map(|&i| graph.states[i].clone()).collect();
        for (&i, (p, _)) in chunk.iter().zip(policy.evaluate(grid, &states)?) {
            table[i] = p;
        }
    }
    let dist = policy_terminal_dist(graph, |i| std::mem::take(&mut table[i]))?;
    exact_eval(graph, dist)
}

/// Monte Carlo estimate of the terminal distribution from `draws` rollouts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampledEval {
    pub draws: usize,
    pub l1_mean: f64,
    pub l1_sum: f64,
    /// Fraction of terminals whose frequency lies within 3 binomial
    /// standard deviations of the exact model distribution.
    pub within_3sigma: f64,
}

pub fn sampled_eval(
    model: &MlpFlow,
    grid: &HyperGrid,
    graph: &StateGraph<GridState>,
    exact: &[f64],
    draws: usize,
    seed: u64,
) -> Result<SampledEval, ExperimentError> {
    let slots = terminal_slots(grid, graph);
    let mut counts = vec![0usize; exact.len()];
    for x in sample_terminals(model, grid, draws, seed)? {
        counts[slots[grid.cell_index(&x.coords)]] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / draws.max(1) as f64).collect();
    let target = target_probs(graph);
    Ok(SampledEval {
        draws,
        l1_mean: l1_sum(&freq, &target) / freq.len() as f64,
        l1_sum: l1_sum(&freq, &target),
        within_3sigma: within_sigma_fraction(&freq, exact, draws, 3.0),
    })
}

/// Fraction of outcomes with `|f - p| <= k sqrt(p (1 - p) / n)`.
pub fn within_sigma_fraction(freq: &[f64], p: &[f64], n: usize, k: f64) -> f64 {
    let ok = freq
        .iter()
        .zip(p)
        .filter(|(&f, &q)| (f - q).abs() <= k * (q * (1.0 - q) / n as f64).sqrt() + 1e-15)
        .count();
    ok as f64 / freq.len().max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Gflownet,
    Mcmc,
    Ppo,
    Active,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gflownet => "gflownet",
            Self::Mcmc => "mcmc",
            Self::Ppo => "ppo",
            Self::Active => "active",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardKind {
    Corners,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub n: usize,
    pub h: usize,
    pub reward: RewardKind,
    pub r0: f64,
    pub r1: f64,
    pub r2: f64,
    pub beta: f64,
    pub r_min: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self { n: 2, h: 8, reward: RewardKind::Corners, r0: 0.1, r1: 0.5, r2: 2.0, beta: 1.0, r_min: 1e-4 }
    }
}

impl EnvConfig {
    pub fn spec(&self) -> GridSpec {
        let reward = match self.reward {
            RewardKind::Corners => GridReward::Corners { r0: self.r0, r1: self.r1, r2: self.r2 },
            RewardKind::Cosine => GridReward::Cosine,
        };
        GridSpec { n: self.n, h: self.h, reward, beta: self.beta, r_min: self.r_min }
    }

    pub fn grid(&self) -> Result<HyperGrid, ExperimentError> {
        Ok(HyperGrid::new(self.spec())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GflownetConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub explore_prob: f64,
    pub total_trajectories: usize,
    pub loss: LossKind,
    pub epsilon: f64,
    pub leaf_weight: f64,
    pub hidden: Vec<usize>,
}

impl Default for GflownetConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            explore_prob: t.explore_prob,
            total_trajectories: t.total_trajectories,
            loss: t.loss.kind,
            epsilon: t.loss.epsilon,
            leaf_weight: t.loss.leaf_weight,
            hidden: MlpFlow::DEFAULT_HIDDEN.to_vec(),
        }
    }
}

impl GflownetConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            loss: LossParams { kind: self.loss, epsilon: self.epsilon, leaf_weight: self.leaf_weight },
            explore_prob: self.explore_prob,
            batch_size: self.batch_size,
            total_trajectories: self.total_trajectories,
            learning_rate: self.learning_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McmcConfig {
    pub chains: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self { chains: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OfflineKind {
    /// Train on fresh rollouts of the model.
    Online,
    UniformPolicy,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineConfig {
    pub data: OfflineKind,
    pub dataset_size: usize,
    /// Dataset file to load instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_path: Option<PathBuf>,
    /// Seed for dataset generation, independent of the training seed.
    pub dataset_seed: u64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self { data: OfflineKind::Online, dataset_size: 2000, dataset_path: None, dataset_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActiveSection {
    pub generator: Method,
    pub rounds: usize,
    pub batch: usize,
    pub k: usize,
    pub beta: f64,
    pub initial_size: usize,
    /// Negative accepts any initial draw.
    pub initial_modes: i64,
    /// Non-positive selects the median heuristic.
    pub bandwidth: f64,
    pub ridge: f64,
    pub max_resample: usize,
    /// Generator training budget per round, in states visited.
    pub round_budget_states: usize,
    pub mh_burn_in: usize,
    pub mh_thin: usize,
}

impl Default for ActiveSection {
    fn default() -> Self {
        let a = ActiveConfig::default();
        Self {
            generator: Method::Gflownet,
            rounds: a.rounds,
            batch: a.batch,
            k: a.k,
            beta: a.beta,
            initial_size: a.initial_size,
            initial_modes: a.initial_modes.map_or(-1, |m| m as i64),
            bandwidth: 0.0,
            ridge: a.ridge,
            max_resample: a.max_resample,
            round_budget_states: 25_000,
            mh_burn_in: 1000,
            mh_thin: 10,
        }
    }
}

impl ActiveSection {
    pub fn active_config(&self, seed: u64) -> ActiveConfig {
        ActiveConfig {
            rounds: self.rounds,
            batch: self.batch,
            k: self.k,
            beta: self.beta,
            initial_size: self.initial_size,
            initial_modes: (self.initial_modes >= 0).then_some(self.initial_modes as usize),
            bandwidth: (self.bandwidth > 0.0).then_some(self.bandwidth),
            ridge: self.ridge,
            max_resample: self.max_resample,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub method: Method,
    pub seed: u64,
    /// Stop after this many states visited; 0 means no state budget.
    pub budget_states: usize,
    /// A metrics row is written each time this many more states are visited.
    pub eval_every_states: usize,
    pub stop_when_all_modes: bool,
    /// Rollouts for the sampled L1 in the summary; 0 skips it.
    pub sampled_l1_draws: usize,
    pub env: EnvConfig,
    pub gflownet: GflownetConfig,
    pub offline: OfflineConfig,
    pub mcmc: McmcConfig,
    pub ppo: PpoConfig,
    pub active: ActiveSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            method: Method::Gflownet,
            seed: 0,
            budget_states: 0,
            eval_every_states: 5000,
            stop_when_all_modes: false,
            sampled_l1_draws: 100_000,
            env: EnvConfig::default(),
            gflownet: GflownetConfig::default(),
            offline: OfflineConfig::default(),
            mcmc: McmcConfig::default(),
            ppo: PpoConfig::default(),
            active: ActiveSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fig3,
    Fig7,
    Offline,
    Active,
}

impl std::str::FromStr for Preset {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fig3" => Ok(Self::Fig3),
            "fig7" => Ok(Self::Fig7),
            "offline" => Ok(Self::Offline),
            "active" => Ok(Self::Active),
            _ => Err(ExperimentError::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let mut c = Self::default();
        match p {
            Preset::Fig3 => {
                c.name = "fig3".into();
                c.env = EnvConfig { n: 4, h: 8, ..EnvConfig::default() };
                c.budget_states = 200_000;
                c.eval_every_states = 10_000;
                c.gflownet.learning_rate = 2e-3;
                c.gflownet.batch_size = 4;
                c.gflownet.total_trajectories = usize::MAX >> 12;
                c.sampled_l1_draws = 0;
            }
            Preset::Fig7 => {
                c.name = "fig7".into();
                c.eval_every_states = 2000;
            }
            Preset::Offline => {
                c.name = "offline".into();
                c.env = EnvConfig { n: 2, h: 30, reward: RewardKind::Cosine, ..EnvConfig::default() };
                c.offline = OfflineConfig { data: OfflineKind::Backward, dataset_size: 2000, dataset_path: None, dataset_seed: 0 };
                c.gflownet.total_trajectories = 100_000;
                c.gflownet.learning_rate = 3e-3;
                c.gflownet.hidden = vec![128, 128];
                c.eval_every_states = 200_000;
            }
            Preset::Active => {
                c.name = "active".into();
                c.method = Method::Active;
                c.env = EnvConfig { n: 4, h: 8, ..EnvConfig::default() };
                c.active.beta = 8.0;
                c.active.bandwidth = 0.4;
            }
        }
        c
    }

    pub fn from_toml(s: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(s)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Merges the keys present in `s` over `self`.
    pub fn overlay_toml(&self, s: &str) -> Result<Self, ExperimentError> {
        let mut base: toml::Value = toml::Value::try_from(self).expect("config serializes");
        let top: toml::Value = toml::from_str(s)?;
        merge(&mut base, top);
        Ok(base.try_into()?)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.eval_every_states == 0 {
            return Err(ExperimentError::Config("eval_every_states must be positive".into()));
        }
        self.env.grid()?;
        self.gflownet.train_config(self.seed).validate()?;
        self.ppo.validate()?;
        if self.mcmc.chains == 0 {
            return Err(ExperimentError::Config("mcmc.chains must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One metrics row; `None` losses are written as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub trajectories_seen: usize,
    pub states_visited: usize,
    pub leaf_loss: Option<f64>,
    pub flow_loss: Option<f64>,
    pub l1_exact: f64,
    pub modes_found: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes the provenance comment, the header and rows, flushing each row.
pub struct MetricsWriter<W: Write> {
    out: W,
    last_states: Option<usize>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, config_hash: &str, seed: u64) -> io::Result<Self> {
        writeln!(out, "# config_sha256={config_hash} seed={seed} version={}", env!("CARGO_PKG_VERSION"))?;
        writeln!(out, "{CSV_HEADER}")?;
        Ok(Self { out, last_states: None })
    }

    /// Rows with a `states_visited` not above the previous one are dropped.
    pub fn write(&mut self, r: &MetricsRow) -> io::Result<()> {
        if self.last_states.is_some_and(|s| r.states_visited <= s) {
            return Ok(());
        }
        self.last_states = Some(r.states_visited);
        writeln!(
            self.out,
            "{},{},{},{},{},{}",
            r.trajectories_seen,
            r.states_visited,
            opt(r.leaf_loss),
            opt(r.flow_loss),
            r.l1_exact,
            r.modes_found
        )?;
        self.out.flush()
    }
}

/// Parsed `metrics.csv`: provenance line and rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFile {
    pub provenance: String,
    pub rows: Vec<MetricsRow>,
}

pub fn read_metrics(text: &str) -> Result<MetricsFile, ExperimentError> {
    let bad = |m: &str| ExperimentError::Config(format!("malformed metrics file: {m}"));
    let mut lines = text.lines();
    let provenance = lines.next().and_then(|l| l.strip_prefix("# ")).ok_or_else(|| bad("missing provenance"))?;
    if lines.next() != Some(CSV_HEADER) {
        return Err(bad("unexpected header"));
    }
    let mut rows = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        rows.push(MetricsRow {
            trajectories_seen: int(f[0])?,
            states_visited: int(f[1])?,
            leaf_loss: maybe(f[2])?,
            flow_loss: maybe(f[3])?,
            l1_exact: num(f[4])?,
            modes_found: int(f[5])?,
        });
    }
    Ok(MetricsFile { provenance: provenance.to_string(), rows })
}

/// What a run leaves in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub method: String,
    pub seed: u64,
    pub config_sha256: String,
    pub version: String,
    pub trajectories_seen: usize,
    pub states_visited: usize,
    pub modes_found: usize,
    pub num_modes: usize,
    pub states_to_all_modes: Option<usize>,
    pub l1_exact_mean: Option<f64>,
    pub l1_exact_sum: Option<f64>,
    pub l1_sampled_mean: Option<f64>,
    pub l1_sampled_sum: Option<f64>,
    pub sampled_draws: usize,
    pub sampled_within_3sigma: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
}

/// Run output paths.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model.ckpt")
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("summary.json")
    }
    pub fn rounds(&self) -> PathBuf {
        self.root.join("rounds.jsonl")
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset.txt")
    }
}

struct Ctx {
    grid: HyperGrid,
    graph: StateGraph<GridState>,
    slots: Vec<usize>,
    modes: ModeCounter,
    hash: String,
    started: Instant,
}

impl Ctx {
    fn summary(&self, cfg: &ExperimentConfig, seen: usize, visited: usize) -> RunSummary {
        RunSummary {
            name: cfg.name.clone(),
            method: cfg.method.as_str().into(),
            seed: cfg.seed,
            config_sha256: self.hash.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            trajectories_seen: seen,
            states_visited: visited,
            modes_found: self.modes.count(),
            num_modes: self.modes.total(),
            states_to_all_modes: self.modes.all_found_at(),
            l1_exact_mean: None,
            l1_exact_sum: None,
            l1_sampled_mean: None,
            l1_sampled_sum: None,
            sampled_draws: 0,
            sampled_within_3sigma: None,
            final_loss: None,
            wall_seconds: 0.0,
        }
    }
}

/// Decides when the next metrics row is due.
struct Cadence {
    every: usize,
    next: usize,
}

impl Cadence {
    fn new(every: usize) -> Self {
        Self { every, next: every }
    }

    fn due(&mut self, visited: usize) -> bool {
        if visited < self.next {
            return false;
        }
        while self.next <= visited {
            self.next += self.every;
        }
        true
    }
}

fn budget_left(cfg: &ExperimentConfig, visited: usize) -> bool {
    cfg.budget_states == 0 || visited < cfg.budget_states
}

/// Writes `config.toml` and returns the hash of its bytes.
pub fn write_config(dir: &RunDir, cfg: &ExperimentConfig) -> io::Result<String> {
    let text = cfg.to_toml();
    fs::write(dir.config(), &text)?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Executes `cfg` and fills `out`. Returns the summary also written to disk.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    let dir = RunDir::create(out)?;
    let hash = write_config(&dir, cfg)?;
    let grid = cfg.env.grid()?;
    let graph = enumerate_states(&grid, DEFAULT_STATE_CAP)?;
    let slots = terminal_slots(&grid, &graph);
    let modes = ModeCounter::new(&grid);
    let mut ctx = Ctx { grid, graph, slots, modes, hash, started: Instant::now() };
    let mut summary = match cfg.method {
        Method::Gflownet => run_gflownet(cfg, &dir, &mut ctx)?,
        Method::Mcmc => run_mcmc(cfg, &dir, &mut ctx)?,
        Method::Ppo => run_ppo(cfg, &dir, &mut ctx)?,
        Method::Active => run_active(cfg, &dir, &mut ctx)?,
    };
    summary.wall_seconds = ctx.started.elapsed().as_secs_f64();
    fs::write(dir.summary(), serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n")?;
    Ok(summary)
}

fn metrics_writer(dir: &RunDir, ctx: &Ctx, seed: u64) -> io::Result<MetricsWriter<BufWriter<fs::File>>> {
    MetricsWriter::new(BufWriter::new(fs::File::create(dir.metrics())?), &ctx.hash, seed)
}

/// Loads or generates the offline dataset, saving a copy in the run dir.
fn offline_dataset(cfg: &ExperimentConfig, dir: &RunDir, grid: &HyperGrid) -> Result<Option<Vec<Trajectory<GridState>>>, ExperimentError> {
    let mode = match cfg.offline.data {
        OfflineKind::Online => return Ok(None),
        OfflineKind::UniformPolicy => OfflineMode::UniformPolicy,
        OfflineKind::Backward => OfflineMode::BackwardFromUniformTerminals,
    };
    let data = match &cfg.offline.dataset_path {
        Some(p) => hypergrid::read_dataset(grid, io::BufReader::new(fs::File::open(p)?))?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.offline.dataset_seed);
            grid.make_offline_dataset(mode, cfg.offline.dataset_size, &mut rng)?
        }
    };
    hypergrid::write_dataset(BufWriter::new(fs::File::create(dir.dataset())?), &data)?;
    Ok(Some(data))
}

fn run_gflownet(cfg: &ExperimentConfig, dir: &RunDir, ctx: &mut Ctx) -> Result<RunSummary, ExperimentError> {
    let dataset = offline_dataset(cfg, dir, &ctx.grid)?;
    let data = match &dataset {
        Some(d) => TrainingData::Offline(d),
        None => TrainingData::Online,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpFlow::new(&ctx.grid, &cfg.gflownet.hidden, &mut rng)?;
    let tc = cfg.gflownet.train_config(cfg.seed);
    let mut csv = metrics_writer(dir, ctx, cfg.seed)?;
    let mut cadence = Cadence::new(cfg.eval_every_states);
    let mut failure: Option<ExperimentError> = None;
    let mut last: Option<MetricsRow> = None;
    let (grid, graph) = (&ctx.grid, &ctx.graph);
    let modes = &mut ctx.modes;
    let summary = train(grid, &mut model, &tc, data, |p, m| {
        let before = p.states_visited - p.batch.iter().map(|t| t.len()).sum::<usize>();
        let mut acc = before;
        for t in p.batch {
            acc += t.len();
            modes.visit(grid.cell_index(&t.final_state.coords), acc);
        }
        let stop = !budget_left(cfg, p.states_visited) || (cfg.stop_when_all_modes && modes.all_found());
        let mut prelim = MetricsRow {
            trajectories_seen: p.trajectories_seen,
            states_visited: p.states_visited,
            leaf_loss: Some(p.leaf_loss),
            flow_loss: Some(p.flow_loss),
            l1_exact: f64::NAN,
            modes_found: modes.count(),
        };
        if cadence.due(p.states_visited) || stop {
            match eval_policy_exact(m, grid, graph) {
                Ok(e) => {
                    prelim.l1_exact = e.l1_mean;
                    if let Err(e) = csv.write(&prelim) {
                        failure = Some(e.into());
                        return Control::Stop;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    return Control::Stop;
                }
            }
        }
        last = Some(prelim);
        if stop {
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let exact = eval_policy_exact(&model, &ctx.grid, &ctx.graph)?;
    if let Some(mut r) = last {
        r.l1_exact = exact.l1_mean;
        csv.write(&r)?;
    }
    model.net.save_to(&dir.checkpoint(), cfg.seed, summary.steps)?;
    let mut s = ctx.summary(cfg, summary.trajectories_seen, summary.states_visited);
    s.l1_exact_mean = Some(exact.l1_mean);
    s.l1_exact_sum = Some(exact.l1_sum);
    s.final_loss = Some(summary.final_loss);
    if cfg.sampled_l1_draws > 0 {
        let se = sampled_eval(&model, &ctx.grid, &ctx.graph, &exact.distribution, cfg.sampled_l1_draws, cfg.seed ^ 0x5eed)?;
        s.l1_sampled_mean = Some(se.l1_mean);
        s.l1_sampled_sum = Some(se.l1_sum);
        s.sampled_draws = se.draws;
        s.sampled_within_3sigma = Some(se.within_3sigma);
    }
    Ok(s)
}

fn run_mcmc(cfg: &ExperimentConfig, dir: &RunDir, ctx: &mut Ctx) -> Result<RunSummary, ExperimentError> {
    if cfg.budget_states == 0 {
        return Err(ExperimentError::Config("mcmc runs need a positive budget_states".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let chains = cfg.mcmc.chains;
    let steps = cfg.budget_states.saturating_sub(chains).div_ceil(chains);
    let target = target_probs(&ctx.graph);
    let mut counts = vec![0usize; target.len()];
    let mut csv = metrics_writer(dir, ctx, cfg.seed)?;
    let mut cadence = Cadence::new(cfg.eval_every_states);
    let mut io_err = None;
    let mut visited = 0;
    let (slots, modes) = (&ctx.slots, &mut ctx.modes);
    let row = |counts: &[usize], visited: usize, modes: &ModeCounter| {
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / visited as f64).collect();
        MetricsRow {
            trajectories_seen: visited,
            states_visited: visited,
            leaf_loss: None,
            flow_loss: None,
            l1_exact: l1_sum(&freq, &target) / freq.len() as f64,
            modes_found: modes.count(),
        }
    };
    mh_sample_with(&ctx.grid, chains, steps, &mut rng, |cell, v| {
        visited = v;
        counts[slots[cell]] += 1;
        modes.visit(cell, v);
        let stop = v >= cfg.budget_states || (cfg.stop_when_all_modes && modes.all_found());
        if cadence.due(v) || stop {
            if let Err(e) = csv.write(&row(&counts, v, modes)) {
                io_err = Some(e);
                return false;
            }
        }
        !stop
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let final_row = row(&counts, visited, modes);
    csv.write(&final_row)?;
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / visited as f64).collect();
    let mut s = ctx.summary(cfg, visited, visited);
    s.l1_exact_mean = Some(final_row.l1_exact);
    s.l1_exact_sum = Some(l1_sum(&freq, &target));
    Ok(s)
}

fn run_ppo(cfg: &ExperimentConfig, dir: &RunDir, ctx: &mut Ctx) -> Result<RunSummary, ExperimentError> {
    let mut pc = cfg.ppo.clone();
    pc.seed = cfg.seed;
    if cfg.budget_states > 0 {
        pc.budget_states = cfg.budget_states;
    }
    let mut csv = metrics_writer(dir, ctx, cfg.seed)?;
    let mut cadence = Cadence::new(cfg.eval_every_states);
    let mut failure: Option<ExperimentError> = None;
    let (mut seen, mut visited) = (0, 0);
    let (grid, graph) = (&ctx.grid, &ctx.graph);
    let modes = &mut ctx.modes;
    let policy = ppo_train(grid, &pc, |p, policy| {
        let mut acc = p.states_visited - p.batch.iter().map(|t| t.len()).sum::<usize>();
        for t in p.batch {
            acc += t.len();
            modes.visit(grid.cell_index(&t.final_state.coords), acc);
        }
        seen = p.trajectories_seen;
        visited = p.states_visited;
        let stop = cfg.stop_when_all_modes && modes.all_found();
        if cadence.due(p.states_visited) || stop {
            let row = eval_ppo_exact(policy, grid, graph).map(|e| MetricsRow {
                trajectories_seen: p.trajectories_seen,
                states_visited: p.states_visited,
                leaf_loss: None,
                flow_loss: None,
                l1_exact: e.l1_mean,
                modes_found: modes.count(),
            });
            match row {
                Ok(r) => {
                    if let Err(e) = csv.write(&r) {
                        failure = Some(e.into());
                        return Control::Stop;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    return Control::Stop;
                }
            }
        }
        if stop {
            Control::Stop
        } else {
            Control::Continue
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let exact = eval_ppo_exact(&policy, &ctx.grid, &ctx.graph)?;
    csv.write(&MetricsRow {
        trajectories_seen: seen,
        states_visited: visited,
        leaf_loss: None,
        flow_loss: None,
        l1_exact: exact.l1_mean,
        modes_found: ctx.modes.count(),
    })?;
    policy.net.save_to(&dir.checkpoint(), cfg.seed, seen as u64)?;
    let mut s = ctx.summary(cfg, seen, visited);
    s.l1_exact_mean = Some(exact.l1_mean);
    s.l1_exact_sum = Some(exact.l1_sum);
    Ok(s)
}

/// Builds the generator named in the active section.
pub fn make_generator(cfg: &ExperimentConfig) -> Result<Box<dyn Generator>, ExperimentError> {
    let a = &cfg.active;
    Ok(match a.generator {
        Method::Gflownet => {
            let mut tc = cfg.gflownet.train_config(cfg.seed);
            tc.total_trajectories = usize::MAX;
            Box::new(GfnGenerator::new(tc, cfg.gflownet.hidden.clone(), a.round_budget_states))
        }
        Method::Ppo => {
            Box::new(PpoGenerator::new(PpoConfig { budget_states: a.round_budget_states, seed: cfg.seed, ..cfg.ppo.clone() }))
        }
        Method::Mcmc => Box::new(MhGenerator { burn_in: a.mh_burn_in, thin: a.mh_thin }),
        Method::Active => return Err(ExperimentError::Config("active.generator must be gflownet, mcmc or ppo".into())),
    })
}

fn run_active(cfg: &ExperimentConfig, dir: &RunDir, ctx: &mut Ctx) -> Result<RunSummary, ExperimentError> {
    let mut gen = make_generator(cfg)?;
    let ac = cfg.active.active_config(cfg.seed);
    let mut out = BufWriter::new(fs::File::create(dir.rounds())?);
    let mut io_err = None;
    let (data, records) = active::run_active_learning(&ctx.grid, gen.as_mut(), &ac, |r| {
        let line = serde_json::to_string(r).expect("record serializes");
        if let Err(e) = writeln!(out, "{line}").and_then(|_| out.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    for &c in &data.cells {
        ctx.modes.visit(c, 0);
    }
    let visited = records.iter().map(|r| r.generator_states_visited).sum();
    Ok(ctx.summary(cfg, data.len(), visited))
}

/// Writes the exact tables for the configured grid.
pub fn dump_oracle(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf, ExperimentError> {
    let grid = cfg.env.grid()?;
    let graph = enumerate_states(&grid, DEFAULT_STATE_CAP)?;
    let tables = ExactTables::build(&graph)?;
    fs::create_dir_all(out)?;
    let path = out.join("exact_tables.json");
    fs::write(&path, tables.to_json())?;
    Ok(path)
}

/// Exact and sampled evaluation of a flow checkpoint on the configured grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointEval {
    pub checkpoint: PathBuf,
    pub seed: u64,
    pub step: u64,
    pub l1_exact_mean: f64,
    pub l1_exact_sum: f64,
    pub sampled: Option<SampledEval>,
}

pub fn eval_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<CheckpointEval, ExperimentError> {
    let grid = cfg.env.grid()?;
    let graph = enumerate_states(&grid, DEFAULT_STATE_CAP)?;
    let (net, header) = Mlp::load_from(checkpoint)?;
    let model = MlpFlow::from_net(&grid, net)?;
    let exact = eval_policy_exact(&model, &grid, &graph)?;
    let sampled = if cfg.sampled_l1_draws > 0 {
        Some(sampled_eval(&model, &grid, &graph, &exact.distribution, cfg.sampled_l1_draws, cfg.seed)?)
    } else {
        None
    };
    Ok(CheckpointEval {
        checkpoint: checkpoint.to_path_buf(),
        seed: header.seed,
        step: header.step,
        l1_exact_mean: exact.l1_mean,
        l1_exact_sum: exact.l1_sum,
        sampled,
    })
}

/// Averages metrics files row by row (runs of one preset share a cadence)
/// into `states_visited,runs,L1_exact_mean,L1_exact_std,modes_found_mean,modes_found_std`.
pub fn figure_data(files: &[MetricsFile]) -> String {
    let mut out = String::from("states_visited,runs,L1_exact_mean,L1_exact_std,modes_found_mean,modes_found_std\n");
    let len = files.iter().map(|f| f.rows.len()).max().unwrap_or(0);
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    };
    for i in 0..len {
        let rows: Vec<&MetricsRow> = files.iter().filter_map(|f| f.rows.get(i)).collect();
        let states: Vec<f64> = rows.iter().map(|r| r.states_visited as f64).collect();
        let l1: Vec<f64> = rows.iter().map(|r| r.l1_exact).collect();
        let modes: Vec<f64> = rows.iter().map(|r| r.modes_found as f64).collect();
        let (s, _) = stats(&states);
        let (l, ls) = stats(&l1);
        let (m, ms) = stats(&modes);
        out.push_str(&format!("{},{},{l},{ls},{m},{ms}\n", s.round() as usize, rows.len()));
    }
    out
}
