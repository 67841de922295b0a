//! The n-dimensional hypergrid environment.
//!
//! The agent starts at the origin and either increments one coordinate
//! (action `i` for coordinate `i`) or stops (action `n`). Stopping moves to a
//! distinct terminal sink attached to the current cell, so every cell is a
//! possible outcome.

use std::f64::consts::PI;
use std::fmt::{self, Display};
use std::io::{self, BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use smallvec::SmallVec;
use thiserror::Error;

use crate::env::{self, ActionId, DagEnv, EnvError, Featurize, Trajectory};

pub type Coords = SmallVec<[u16; 8]>;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("dataset line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridState {
    pub coords: Coords,
    pub terminal: bool,
}

impl GridState {
    pub fn cell(coords: &[u16]) -> Self {
        Self { coords: SmallVec::from_slice(coords), terminal: false }
    }

    pub fn sink(coords: &[u16]) -> Self {
        Self { coords: SmallVec::from_slice(coords), terminal: true }
    }
}

impl Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terminal {
            write!(f, "sink")?;
        }
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Raw reward over points of `[-1, 1]^n`.
#[derive(Clone)]
pub enum GridReward {
    Corners { r0: f64, r1: f64, r2: f64 },
    Cosine,
    /// Per-cell values indexed by [`HyperGrid::cell_index`].
    Table(Arc<Vec<f64>>),
}

impl fmt::Debug for GridReward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Corners { r0, r1, r2 } => write!(f, "Corners {{ r0: {r0}, r1: {r1}, r2: {r2} }}"),
            Self::Cosine => write!(f, "Cosine"),
            Self::Table(t) => write!(f, "Table({} cells)", t.len()),
        }
    }
}

impl GridReward {
    pub fn corners(r0: f64) -> Self {
        Self::Corners { r0, r1: 0.5, r2: 2.0 }
    }
}

#[derive(Debug, Clone)]
pub struct GridSpec {
    pub n: usize,
    pub h: usize,
    pub reward: GridReward,
    pub beta: f64,
    pub r_min: f64,
}

impl GridSpec {
    pub fn corners(n: usize, h: usize, r0: f64) -> Self {
        Self { n, h, reward: GridReward::corners(r0), beta: 1.0, r_min: 1e-4 }
    }

    pub fn cosine(n: usize, h: usize) -> Self {
        Self { n, h, reward: GridReward::Cosine, beta: 1.0, r_min: 1e-4 }
    }
}

/// `x_i = 2 c_i / (H - 1) - 1`.
pub fn cell_to_point(coords: &[u16], h: usize) -> Vec<f64> {
    let scale = 2.0 / (h as f64 - 1.0);
    coords.iter().map(|&c| c as f64 * scale - 1.0).collect()
}

pub fn corners_reward(x: &[f64], r0: f64, r1: f64, r2: f64) -> f64 {
    let outer = x.iter().all(|v| v.abs() > 0.5);
    let ring = x.iter().all(|v| v.abs() > 0.6 && v.abs() < 0.8);
    r0 + if outer { r1 } else { 0.0 } + if ring { r2 } else { 0.0 }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

pub fn cosine_reward(x: &[f64]) -> f64 {
    0.01 + x
        .iter()
        .map(|&v| ((50.0 * v).cos() + 1.0) * std_normal_pdf(5.0 * v))
        .product::<f64>()
}

/// How an offline dataset of trajectories is generated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfflineMode {
    /// Rollouts of the uniform policy over allowed actions.
    UniformPolicy,
    /// A uniformly chosen terminal, walked back to the origin through
    /// uniformly chosen parents.
    BackwardFromUniformTerminals,
}

#[derive(Debug, Clone)]
pub struct HyperGrid {
    spec: GridSpec,
}

impl HyperGrid {
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        if spec.n < 1 {
            return Err(GridError::InvalidSpec("n must be at least 1".into()));
        }
        if spec.h < 2 || spec.h > u16::MAX as usize {
            return Err(GridError::InvalidSpec(format!("side length {} out of range", spec.h)));
        }
        if !(spec.beta > 0.0) || !(spec.r_min > 0.0) {
            return Err(GridError::InvalidSpec("beta and r_min must be positive".into()));
        }
        match &spec.reward {
            GridReward::Corners { r0, r1, r2 } => {
                if !(*r0 > 0.0) || *r1 < 0.0 || *r2 < 0.0 {
                    return Err(GridError::InvalidSpec("corners reward needs R0 > 0 and R1, R2 >= 0".into()));
                }
            }
            GridReward::Cosine => {}
            GridReward::Table(t) => {
                let cells = (spec.h as u128).checked_pow(spec.n as u32);
                if cells != Some(t.len() as u128) {
                    return Err(GridError::InvalidSpec("reward table size must be H^n".into()));
                }
                if t.iter().any(|v| !v.is_finite()) {
                    return Err(GridError::InvalidSpec("reward table has non-finite entries".into()));
                }
            }
        }
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn ndim(&self) -> usize {
        self.spec.n
    }

    pub fn side(&self) -> usize {
        self.spec.h
    }

    /// Same grid with a different raw reward.
    pub fn with_reward(&self, reward: GridReward) -> Result<Self, GridError> {
        Self::new(GridSpec { reward, ..self.spec.clone() })
    }

    pub fn stop_action(&self) -> ActionId {
        ActionId(self.spec.n)
    }

    pub fn num_cells(&self) -> usize {
        self.spec.h.pow(self.spec.n as u32)
    }

    /// Mixed-radix index with coordinate 0 as the least significant digit.
    pub fn cell_index(&self, coords: &[u16]) -> usize {
        coords.iter().rev().fold(0, |acc, &c| acc * self.spec.h + c as usize)
    }

    pub fn cell_coords(&self, mut index: usize) -> Coords {
        let mut c = Coords::with_capacity(self.spec.n);
        for _ in 0..self.spec.n {
            c.push((index % self.spec.h) as u16);
            index /= self.spec.h;
        }
        c
    }

    /// All cells in index order.
    pub fn cells(&self) -> impl Iterator<Item = Coords> + '_ {
        (0..self.num_cells()).map(|i| self.cell_coords(i))
    }

    pub fn raw_reward(&self, coords: &[u16]) -> f64 {
        match &self.spec.reward {
            GridReward::Corners { r0, r1, r2 } => {
                corners_reward(&cell_to_point(coords, self.spec.h), *r0, *r1, *r2)
            }
            GridReward::Cosine => cosine_reward(&cell_to_point(coords, self.spec.h)),
            GridReward::Table(t) => t[self.cell_index(coords)],
        }
    }

    /// `max(R, r_min)^beta` for the sink at `coords`.
    pub fn effective_reward(&self, coords: &[u16]) -> f64 {
        effective_reward(self.raw_reward(coords), self.spec.beta, self.spec.r_min)
    }

    /// Cells on the top reward plateau. For the corners reward these are
    /// the cells with every point coordinate in `(0.6, 0.8)` in absolute value.
    pub fn mode_cells(&self) -> Vec<usize> {
        match &self.spec.reward {
            GridReward::Corners { r2, .. } if *r2 > 0.0 => (0..self.num_cells())
                .filter(|&i| {
                    cell_to_point(&self.cell_coords(i), self.spec.h)
                        .iter()
                        .all(|v| v.abs() > 0.6 && v.abs() < 0.8)
                })
                .collect(),
            _ => {
                let values: Vec<f64> = self.cells().map(|c| self.raw_reward(&c)).collect();
                let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                (0..values.len())
                    .filter(|&i| values[i] >= best - 1e-12 * best.abs())
                    .collect()
            }
        }
    }

    pub fn make_offline_dataset<R: Rng + ?Sized>(
        &self,
        mode: OfflineMode,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<Trajectory<GridState>>, GridError> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let traj = match mode {
                OfflineMode::UniformPolicy => {
                    let na = self.num_actions();
                    env::rollout(self, |_, allowed| env::uniform_policy(na, allowed), rng)?
                }
                OfflineMode::BackwardFromUniformTerminals => {
                    let cell = self.cell_coords(rng.gen_range(0..self.num_cells()));
                    self.backward_walk(GridState::sink(&cell), rng)?
                }
            };
            out.push(traj);
        }
        Ok(out)
    }

    /// Walks from `sink` to the origin choosing a uniform parent each step.
    pub fn backward_walk<R: Rng + ?Sized>(
        &self,
        sink: GridState,
        rng: &mut R,
    ) -> Result<Trajectory<GridState>, GridError> {
        if !sink.terminal {
            return Err(GridError::InvalidSpec(format!("{sink} is not a terminal state")));
        }
        let reward = self.reward(&sink);
        let root = self.initial_state();
        let mut steps = Vec::new();
        let mut s = sink.clone();
        while s != root {
            let parents = self.parents(&s);
            let (p, a) = parents.choose(rng).expect("non-root states have parents").clone();
            steps.push((p.clone(), a));
            s = p;
        }
        steps.reverse();
        Ok(Trajectory { steps, final_state: sink, reward })
    }
}

pub fn effective_reward(raw: f64, beta: f64, r_min: f64) -> f64 {
    raw.max(r_min).powf(beta)
}

impl DagEnv for HyperGrid {
    type State = GridState;

    fn initial_state(&self) -> GridState {
        GridState { coords: SmallVec::from_elem(0, self.spec.n), terminal: false }
    }

    fn num_actions(&self) -> usize {
        self.spec.n + 1
    }

    fn allowed_actions(&self, s: &GridState) -> Vec<ActionId> {
        if s.terminal {
            return Vec::new();
        }
        let top = (self.spec.h - 1) as u16;
        let mut out: Vec<ActionId> = s
            .coords
            .iter()
            .enumerate()
            .filter(|(_, &c)| c < top)
            .map(|(i, _)| ActionId(i))
            .collect();
        out.push(self.stop_action());
        out
    }

    fn is_allowed(&self, s: &GridState, a: ActionId) -> bool {
        !s.terminal
            && (a.0 == self.spec.n || (a.0 < self.spec.n && (s.coords[a.0] as usize) < self.spec.h - 1))
    }

    fn transition(&self, s: &GridState, a: ActionId) -> Option<GridState> {
        if !self.is_allowed(s, a) {
            return None;
        }
        if a.0 == self.spec.n {
            return Some(GridState { coords: s.coords.clone(), terminal: true });
        }
        let mut coords = s.coords.clone();
        coords[a.0] += 1;
        Some(GridState { coords, terminal: false })
    }

    fn parents(&self, s: &GridState) -> Vec<(GridState, ActionId)> {
        if s.terminal {
            return vec![(GridState { coords: s.coords.clone(), terminal: false }, self.stop_action())];
        }
        s.coords
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, _)| {
                let mut coords = s.coords.clone();
                coords[i] -= 1;
                (GridState { coords, terminal: false }, ActionId(i))
            })
            .collect()
    }

    fn is_terminal(&self, s: &GridState) -> bool {
        s.terminal
    }

    fn reward(&self, s: &GridState) -> f64 {
        if s.terminal {
            self.effective_reward(&s.coords)
        } else {
            0.0
        }
    }

    fn horizon(&self) -> usize {
        self.spec.n * (self.spec.h - 1) + 1
    }
}

impl Featurize for HyperGrid {
    fn feature_dim(&self) -> usize {
        self.spec.n * self.spec.h
    }

    /// Concatenated one-hot encoding of each coordinate.
    fn featurize(&self, s: &GridState, out: &mut [f64]) {
        out.fill(0.0);
        for (i, &c) in s.coords.iter().enumerate() {
            out[i * self.spec.h + c as usize] = 1.0;
        }
    }
}

/// Writes one trajectory per line as comma-separated action indices.
pub fn write_dataset<W: Write>(mut w: W, trajectories: &[Trajectory<GridState>]) -> io::Result<()> {
    for t in trajectories {
        let line: Vec<String> = t.actions().map(|a| a.0.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

/// Parses the line format of [`write_dataset`], replaying each line from the origin.
pub fn read_dataset<R: BufRead>(grid: &HyperGrid, r: R) -> Result<Vec<Trajectory<GridState>>, GridError> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let actions = line
            .split(',')
            .map(|tok| tok.trim().parse::<usize>().map(ActionId))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GridError::Parse { line: lineno + 1, msg: e.to_string() })?;
        let traj = env::replay(grid, &actions)
            .map_err(|e| GridError::Parse { line: lineno + 1, msg: e.to_string() })?;
        out.push(traj);
    }
    Ok(out)
}
