//! Metropolis-Hastings over grid cells.
//!
//! The chain moves by `+-1` in a single coordinate. There is no stop
//! action: the chain state is itself the sample, scored with the reward of
//! the corresponding terminal. Near the boundary the proposal has fewer
//! options, so the acceptance ratio carries the Hastings correction
//! `|N(c)| / |N(c')|`.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::hypergrid::{Coords, HyperGrid};

/// In-bounds single-coordinate `+-1` moves from `c`.
pub fn neighbors(grid: &HyperGrid, c: &[u16]) -> Vec<Coords> {
    let top = (grid.side() - 1) as u16;
    let mut out = Vec::with_capacity(2 * c.len());
    for i in 0..c.len() {
        if c[i] > 0 {
            let mut d = Coords::from_slice(c);
            d[i] -= 1;
            out.push(d);
        }
        if c[i] < top {
            let mut d = Coords::from_slice(c);
            d[i] += 1;
            out.push(d);
        }
    }
    out
}

fn neighbor_count(grid: &HyperGrid, c: &[u16]) -> usize {
    let top = (grid.side() - 1) as u16;
    c.iter().map(|&v| (v > 0) as usize + (v < top) as usize).sum()
}

/// `min(1, R(c') |N(c)| / (R(c) |N(c')|))`.
pub fn mh_acceptance(grid: &HyperGrid, from: &[u16], to: &[u16]) -> f64 {
    let ratio = grid.effective_reward(to) * neighbor_count(grid, from) as f64
        / (grid.effective_reward(from) * neighbor_count(grid, to) as f64);
    ratio.min(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhChain {
    pub current: Coords,
    pub steps: usize,
    /// Every state the chain has occupied, starting with the initial cell.
    pub log: Vec<Coords>,
}

impl MhChain {
    pub fn new(start: Coords) -> Self {
        Self { log: vec![start.clone()], current: start, steps: 0 }
    }
}

/// One proposal and accept/reject. A rejected move repeats the current cell.
pub fn mh_step<R: Rng + ?Sized>(chain: &mut MhChain, grid: &HyperGrid, rng: &mut R) {
    let proposals = neighbors(grid, &chain.current);
    let candidate = proposals.choose(rng).expect("every cell has a neighbor").clone();
    if rng.gen::<f64>() < mh_acceptance(grid, &chain.current, &candidate) {
        chain.current = candidate;
    }
    chain.steps += 1;
    chain.log.push(chain.current.clone());
}

/// Dense transition matrix over cells (indexed by `HyperGrid::cell_index`).
pub fn mh_transition_matrix(grid: &HyperGrid) -> Vec<Vec<f64>> {
    let n = grid.num_cells();
    let mut p = vec![vec![0.0; n]; n];
    for (i, row) in p.iter_mut().enumerate() {
        let c = grid.cell_coords(i);
        let nb = neighbors(grid, &c);
        let q = 1.0 / nb.len() as f64;
        let mut stay = 1.0;
        for d in &nb {
            let move_prob = q * mh_acceptance(grid, &c, d);
            row[grid.cell_index(d)] += move_prob;
            stay -= move_prob;
        }
        row[i] += stay;
    }
    p
}

#[derive(Debug, Clone)]
pub struct MhRun {
    pub chains: Vec<MhChain>,
    /// Cell indices in visiting order: the initial cells, then one entry per
    /// chain step with chains advanced round-robin.
    pub visits: Vec<usize>,
    /// Visit frequency per cell over `visits`.
    pub empirical: Vec<f64>,
}

/// Runs `chains` independent chains from uniformly random cells for
/// `steps` steps each.
pub fn mh_sample_batch<R: Rng + ?Sized>(grid: &HyperGrid, chains: usize, steps: usize, rng: &mut R) -> MhRun {
    mh_sample_with(grid, chains, steps, rng, |_, _| true)
}

/// Like [`mh_sample_batch`] but calls `observe(cell, states_visited)` after
/// every visit and stops early when it returns `false`.
pub fn mh_sample_with<R, F>(grid: &HyperGrid, chains: usize, steps: usize, rng: &mut R, mut observe: F) -> MhRun
where
    R: Rng + ?Sized,
    F: FnMut(usize, usize) -> bool,
{
    let mut run: Vec<MhChain> = (0..chains)
        .map(|_| MhChain::new(grid.cell_coords(rng.gen_range(0..grid.num_cells()))))
        .collect();
    let mut visits: Vec<usize> = Vec::with_capacity(chains * (steps + 1));
    let mut go = true;
    for chain in &run {
        visits.push(grid.cell_index(&chain.current));
        if go && !observe(*visits.last().unwrap(), visits.len()) {
            go = false;
        }
    }
    'outer: for _ in 0..steps {
        if !go {
            break;
        }
        for chain in run.iter_mut() {
            mh_step(chain, grid, rng);
            visits.push(grid.cell_index(&chain.current));
            if !observe(*visits.last().unwrap(), visits.len()) {
                break 'outer;
            }
        }
    }
    let mut empirical = vec![0.0; grid.num_cells()];
    for &v in &visits {
        empirical[v] += 1.0;
    }
    let total = visits.len().max(1) as f64;
    empirical.iter_mut().for_each(|e| *e /= total);
    MhRun { chains: run, visits, empirical }
}
