//! Multi-round active learning on the hypergrid.
//!
//! Each round fits a kernel ridge regression proxy to the labelled cells,
//! trains a generator on `max(proxy, r_min)^beta`, acquires a batch of new
//! cells, labels them with the true reward and grows the dataset.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{mh_sample_with, ppo_continue, PpoConfig, PpoPolicy};
use crate::flownet::{sample_trajectories, train, Control, GfnError, MlpFlow, TrainConfig, TrainingData};
use crate::hypergrid::{cell_to_point, Coords, GridError, GridReward, HyperGrid};

#[derive(Debug, Error)]
pub enum ActiveError {
    #[error("kernel bandwidth must be positive, got {0}")]
    DegenerateKernel(f64),
    #[error("kernel matrix is not positive definite; increase the ridge")]
    NotPositiveDefinite,
    #[error("top-k needs k <= {len}, got k = {k}")]
    KTooLarge { k: usize, len: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid active-learning config: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Generator(#[from] GfnError),
}

/// Labelled cells without duplicates, in acquisition order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledDataset {
    pub round: usize,
    pub cells: Vec<usize>,
    pub values: Vec<f64>,
    seen: HashSet<usize>,
}

impl LabeledDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.seen.contains(&cell)
    }

    /// Returns `false` (and changes nothing) if `cell` is already present.
    pub fn insert(&mut self, cell: usize, value: f64) -> bool {
        if !self.seen.insert(cell) {
            return false;
        }
        self.cells.push(cell);
        self.values.push(value);
        true
    }

    /// Indices of the `k` largest values; ties keep acquisition order.
    fn top_k_indices(&self, k: usize) -> Result<Vec<usize>, ActiveError> {
        if k > self.len() {
            return Err(ActiveError::KTooLarge { k, len: self.len() });
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.values[b].total_cmp(&self.values[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }

    pub fn top_k_mean(&self, k: usize) -> Result<f64, ActiveError> {
        let idx = self.top_k_indices(k)?;
        if idx.is_empty() {
            return Ok(0.0);
        }
        Ok(idx.iter().map(|&i| self.values[i]).sum::<f64>() / idx.len() as f64)
    }

    /// Mean pairwise L2 distance between the top-`k` cells in `[-1, 1]^n`.
    pub fn top_k_pairwise_distance(&self, grid: &HyperGrid, k: usize) -> Result<f64, ActiveError> {
        let pts: Vec<Vec<f64>> =
            self.top_k_indices(k)?.iter().map(|&i| cell_to_point(&grid.cell_coords(self.cells[i]), grid.side())).collect();
        let mut total = 0.0;
        let mut pairs = 0usize;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                total += sq_dist(&pts[i], &pts[j]).sqrt();
                pairs += 1;
            }
        }
        Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
    }

    pub fn modes_covered(&self, modes: &HashSet<usize>) -> usize {
        self.cells.iter().filter(|c| modes.contains(c)).count()
    }
}

/// `mean(top-k(current)) - mean(top-k(previous))`.
pub fn topk_return(current: &LabeledDataset, previous: &LabeledDataset, k: usize) -> Result<f64, ActiveError> {
    if current.is_empty() || previous.is_empty() {
        return Err(ActiveError::EmptyDataset);
    }
    if k > previous.len() {
        return Err(ActiveError::KTooLarge { k, len: previous.len() });
    }
    Ok(current.top_k_mean(k)? - previous.top_k_mean(k)?)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Median pairwise distance between the given points.
pub fn median_heuristic(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sq_dist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    d[d.len() / 2]
}

/// Kernel ridge regression with the RBF kernel `exp(-|x-y|^2 / (2 h^2))`.
#[derive(Debug, Clone)]
pub struct KrrProxy {
    pub bandwidth: f64,
    pub ridge: f64,
    centers: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

impl KrrProxy {
    /// Fits on `dataset`; `bandwidth = None` uses the median heuristic.
    pub fn fit(grid: &HyperGrid, dataset: &LabeledDataset, bandwidth: Option<f64>, ridge: f64) -> Result<Self, ActiveError> {
        if dataset.is_empty() {
            return Err(ActiveError::EmptyDataset);
        }
        let centers: Vec<Vec<f64>> =
            dataset.cells.iter().map(|&c| cell_to_point(&grid.cell_coords(c), grid.side())).collect();
        let h = bandwidth.unwrap_or_else(|| median_heuristic(&centers));
        if !(h > 0.0) || !h.is_finite() {
            return Err(ActiveError::DegenerateKernel(h));
        }
        let m = centers.len();
        let gamma = 1.0 / (2.0 * h * h);
        let k = DMatrix::from_fn(m, m, |i, j| (-gamma * sq_dist(&centers[i], &centers[j])).exp() + if i == j { ridge } else { 0.0 });
        let chol = k.cholesky().ok_or(ActiveError::NotPositiveDefinite)?;
        let alpha = chol.solve(&DVector::from_column_slice(&dataset.values));
        Ok(Self { bandwidth: h, ridge, centers, alpha: alpha.iter().copied().collect() })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        let gamma = 1.0 / (2.0 * self.bandwidth * self.bandwidth);
        self.centers.iter().zip(&self.alpha).map(|(c, a)| a * (-gamma * sq_dist(c, x)).exp()).sum()
    }

    /// `max(prediction, floor)^beta` for every cell, indexed by cell.
    pub fn reward_table(&self, grid: &HyperGrid, floor: f64, beta: f64) -> Vec<f64> {
        grid.cells().map(|c| self.predict(&cell_to_point(&c, grid.side())).max(floor).powf(beta)).collect()
    }
}

/// A sampler that can be refit to a new reward and then drawn from.
pub trait Generator {
    fn name(&self) -> &'static str;

    /// Trains on `grid`'s reward. Returns the number of states visited.
    fn fit(&mut self, grid: &HyperGrid, rng: &mut ChaCha8Rng) -> Result<usize, GfnError>;

    /// Draws `count` terminal cells (duplicates allowed).
    fn draw(&mut self, grid: &HyperGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Coords>, GfnError>;
}

/// Flow-matching generator, warm-started across rounds. Each fit stops at
/// `cfg.total_trajectories` or `budget_states`, whichever comes first.
pub struct GfnGenerator {
    pub cfg: TrainConfig,
    pub hidden: Vec<usize>,
    pub budget_states: usize,
    model: Option<MlpFlow>,
}

impl GfnGenerator {
    pub fn new(cfg: TrainConfig, hidden: Vec<usize>, budget_states: usize) -> Self {
        Self { cfg, hidden, budget_states, model: None }
    }
}

impl Generator for GfnGenerator {
    fn name(&self) -> &'static str {
        "gflownet"
    }

    fn fit(&mut self, grid: &HyperGrid, rng: &mut ChaCha8Rng) -> Result<usize, GfnError> {
        if self.model.is_none() {
            self.model = Some(MlpFlow::new(grid, &self.hidden, rng)?);
        }
        let model = self.model.as_mut().unwrap();
        let cfg = TrainConfig { seed: rng.gen(), ..self.cfg.clone() };
        let budget = self.budget_states;
        let summary = train(grid, model, &cfg, TrainingData::Online, |p, _| {
            if p.states_visited >= budget {
                Control::Stop
            } else {
                Control::Continue
            }
        })?;
        Ok(summary.states_visited)
    }

    fn draw(&mut self, grid: &HyperGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Coords>, GfnError> {
        let model = self.model.as_ref().ok_or_else(|| GfnError::Config("draw before fit".into()))?;
        Ok(sample_trajectories(model, grid, count, 0.0, rng)?.into_iter().map(|t| t.final_state.coords).collect())
    }
}

/// PPO generator, warm-started across rounds.
pub struct PpoGenerator {
    pub cfg: PpoConfig,
    policy: Option<PpoPolicy>,
}

impl PpoGenerator {
    pub fn new(cfg: PpoConfig) -> Self {
        Self { cfg, policy: None }
    }
}

impl Generator for PpoGenerator {
    fn name(&self) -> &'static str {
        "ppo"
    }

    fn fit(&mut self, grid: &HyperGrid, rng: &mut ChaCha8Rng) -> Result<usize, GfnError> {
        if self.policy.is_none() {
            self.policy = Some(PpoPolicy::new(grid, &self.cfg.hidden, rng)?);
        }
        let policy = self.policy.as_mut().unwrap();
        let mut visited = 0;
        ppo_continue(grid, &self.cfg, policy, rng, |p, _| {
            visited = p.states_visited;
            Control::Continue
        })?;
        Ok(visited)
    }

    fn draw(&mut self, grid: &HyperGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Coords>, GfnError> {
        let policy = self.policy.as_ref().ok_or_else(|| GfnError::Config("draw before fit".into()))?;
        Ok(policy.sample(grid, count, rng)?.into_iter().map(|t| t.final_state.coords).collect())
    }
}

/// Metropolis-Hastings generator: a single chain per draw call, thinned.
pub struct MhGenerator {
    pub burn_in: usize,
    pub thin: usize,
}

impl Generator for MhGenerator {
    fn name(&self) -> &'static str {
        "mcmc"
    }

    fn fit(&mut self, _grid: &HyperGrid, _rng: &mut ChaCha8Rng) -> Result<usize, GfnError> {
        Ok(0)
    }

    fn draw(&mut self, grid: &HyperGrid, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Coords>, GfnError> {
        let thin = self.thin.max(1);
        let run = mh_sample_with(grid, 1, self.burn_in + count * thin, rng, |_, _| true);
        Ok(run.visits[self.burn_in + 1..].iter().step_by(thin).take(count).map(|&c| grid.cell_coords(c)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ActiveConfig {
    pub rounds: usize,
    pub batch: usize,
    pub k: usize,
    pub beta: f64,
    pub initial_size: usize,
    /// Exact number of modes the initial dataset must cover; `None` accepts
    /// any draw.
    pub initial_modes: Option<usize>,
    /// `None` selects the median heuristic.
    pub bandwidth: Option<f64>,
    pub ridge: f64,
    /// Draws per acquisition slot before giving up on finding a new cell.
    pub max_resample: usize,
    pub seed: u64,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            batch: 16,
            k: 10,
            beta: 1.0,
            initial_size: 512,
            initial_modes: Some(4),
            bandwidth: None,
            ridge: 1e-3,
            max_resample: 50,
            seed: 0,
        }
    }
}

/// Per-round summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub generator: String,
    pub dataset_size: usize,
    pub acquired: usize,
    pub topk_mean: f64,
    pub topk_return: f64,
    pub modes_covered: usize,
    pub topk_pairwise_distance: f64,
    pub generator_states_visited: usize,
    /// Proxy bandwidth; absent for round 0, which fits no proxy.
    pub bandwidth: Option<f64>,
}

/// Samples `size` distinct cells uniformly, retrying with fresh draws until
/// exactly `modes` of them are modes (if requested).
pub fn initial_dataset<R: Rng + ?Sized>(
    grid: &HyperGrid,
    size: usize,
    modes: Option<usize>,
    rng: &mut R,
) -> Result<LabeledDataset, ActiveError> {
    if size > grid.num_cells() {
        return Err(ActiveError::Config(format!("{size} initial cells requested from a grid of {}", grid.num_cells())));
    }
    let mode_set: HashSet<usize> = grid.mode_cells().into_iter().collect();
    if let Some(m) = modes {
        if m > mode_set.len() || m > size {
            return Err(ActiveError::Config(format!("cannot cover {m} modes")));
        }
    }
    for _ in 0..10_000 {
        let cells = rand::seq::index::sample(rng, grid.num_cells(), size);
        if let Some(m) = modes {
            if cells.iter().filter(|c| mode_set.contains(c)).count() != m {
                continue;
            }
        }
        let mut d = LabeledDataset::new();
        for c in cells.iter() {
            d.insert(c, grid.raw_reward(&grid.cell_coords(c)));
        }
        return Ok(d);
    }
    Err(ActiveError::Config("no initial draw matched the requested mode count".into()))
}

/// Picks up to `batch` cells absent from `dataset` from the generator. Each
/// slot gets `max_resample` draws; if the budget runs out the unique cells
/// found so far are returned, highest proxy first.
pub fn acquire<G: Generator + ?Sized>(
    gen: &mut G,
    proxy_grid: &HyperGrid,
    dataset: &LabeledDataset,
    batch: usize,
    max_resample: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, ActiveError> {
    let mut picked: Vec<usize> = Vec::with_capacity(batch);
    let mut taken = HashSet::new();
    let budget = batch * max_resample.max(1);
    let mut draws = 0;
    while picked.len() < batch && draws < budget {
        let want = (batch - picked.len()).min(budget - draws);
        for c in gen.draw(proxy_grid, want, rng)? {
            draws += 1;
            let idx = proxy_grid.cell_index(&c);
            if !dataset.contains(idx) && taken.insert(idx) && picked.len() < batch {
                picked.push(idx);
            }
        }
    }
    if picked.len() < batch {
        picked.sort_by(|&a, &b| {
            let ra = proxy_grid.raw_reward(&proxy_grid.cell_coords(a));
            let rb = proxy_grid.raw_reward(&proxy_grid.cell_coords(b));
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
    }
    Ok(picked)
}

/// Runs the loop with `oracle` supplying true rewards. Returns the final
/// dataset and one record per round (round 0 describes the initial set).
pub fn run_active_learning<G: Generator + ?Sized>(
    oracle: &HyperGrid,
    gen: &mut G,
    cfg: &ActiveConfig,
    mut on_round: impl FnMut(&RoundRecord),
) -> Result<(LabeledDataset, Vec<RoundRecord>), ActiveError> {
    if cfg.rounds == 0 {
        return Err(ActiveError::Config("at least one round is required".into()));
    }
    if !(cfg.beta > 0.0) {
        return Err(ActiveError::Config("beta must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let modes: HashSet<usize> = oracle.mode_cells().into_iter().collect();
    let mut data = initial_dataset(oracle, cfg.initial_size, cfg.initial_modes, &mut rng)?;
    let k = cfg.k.min(data.len());
    let mut records = vec![RoundRecord {
        round: 0,
        generator: gen.name().to_string(),
        dataset_size: data.len(),
        acquired: data.len(),
        topk_mean: data.top_k_mean(k)?,
        topk_return: 0.0,
        modes_covered: data.modes_covered(&modes),
        topk_pairwise_distance: data.top_k_pairwise_distance(oracle, k)?,
        generator_states_visited: 0,
        bandwidth: None,
    }];
    on_round(&records[0]);
    let floor = oracle.spec().r_min;
    for round in 1..=cfg.rounds {
        let proxy = KrrProxy::fit(oracle, &data, cfg.bandwidth, cfg.ridge)?;
        let table = proxy.reward_table(oracle, floor, cfg.beta);
        // The table already carries the exponent, so the generator sees it verbatim.
        let mut spec = oracle.spec().clone();
        spec.reward = GridReward::Table(Arc::new(table));
        spec.beta = 1.0;
        spec.r_min = spec.r_min.powf(cfg.beta).min(spec.r_min);
        let proxy_grid = HyperGrid::new(spec)?;
        let visited = gen.fit(&proxy_grid, &mut rng)?;
        let picked = acquire(gen, &proxy_grid, &data, cfg.batch, cfg.max_resample, &mut rng)?;
        let previous = data.clone();
        for &c in &picked {
            data.insert(c, oracle.raw_reward(&oracle.cell_coords(c)));
        }
        data.round = round;
        let rec = RoundRecord {
            round,
            generator: gen.name().to_string(),
            dataset_size: data.len(),
            acquired: picked.len(),
            topk_mean: data.top_k_mean(k)?,
            topk_return: topk_return(&data, &previous, k)?,
            modes_covered: data.modes_covered(&modes),
            topk_pairwise_distance: data.top_k_pairwise_distance(oracle, k)?,
            generator_states_visited: visited,
            bandwidth: Some(proxy.bandwidth),
        };
        on_round(&rec);
        records.push(rec);
    }
    Ok((data, records))
}
