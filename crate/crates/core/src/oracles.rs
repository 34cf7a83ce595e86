//! Independent reference implementations used for double-entry checks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Adjacency, FactorGraph};
use crate::policy::{count_vectors, multinomial_pmf, support_count, MAX_PMF_SUPPORT};
use crate::tensor::DenseTensor;

pub use crate::maxplus::brute_force_argmax as exhaustive_q_argmax;

/// Largest joint-action space the exhaustive oracles enumerate.
pub const MAX_JOINT_ACTIONS: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    pub counts: Vec<usize>,
    pub probability: f64,
    /// Agents with a nonzero count, ascending.
    pub group: Vec<usize>,
}

/// Every count vector of length `p.len()` summing to `d_max`, with its multinomial probability.
pub fn enumerate_pmf_support(p: &[f64], d_max: usize) -> Result<Vec<SupportEntry>> {
    let size = support_count(p.len(), d_max);
    if size > MAX_PMF_SUPPORT {
        return Err(Error::Budget { size, budget: MAX_PMF_SUPPORT });
    }
    count_vectors(p.len(), d_max)?
        .into_iter()
        .map(|counts| {
            let probability = multinomial_pmf(p, &counts, d_max)?;
            let group = counts.iter().enumerate().filter(|&(_, &c)| c > 0).map(|(i, _)| i).collect();
            Ok(SupportEntry { counts, probability, group })
        })
        .collect()
}

/// Groups support entries by connected agent set.
pub fn partition_by_group(entries: &[SupportEntry]) -> BTreeMap<Vec<usize>, Vec<SupportEntry>> {
    let mut cells: BTreeMap<Vec<usize>, Vec<SupportEntry>> = BTreeMap::new();
    for e in entries {
        cells.entry(e.group.clone()).or_default().push(e.clone());
    }
    cells
}

/// Forest test by union-find over the bipartite agent/factor graph.
pub fn is_forest(graph: &FactorGraph) -> bool {
    let n = graph.n_agents();
    let mut parent: Vec<usize> = (0..n + graph.n_factors()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for (j, agents) in graph.factors().iter().enumerate() {
        for &i in agents {
            let (a, b) = (find(&mut parent, i), find(&mut parent, n + j));
            if a == b {
                return false;
            }
            parent[a] = b;
        }
    }
    true
}

/// All joint actions of `n` agents with `actions` choices, first agent slowest.
pub fn joint_actions(n: usize, actions: usize) -> Result<Vec<Vec<usize>>> {
    let size = (actions as u128).pow(n as u32);
    if size > MAX_JOINT_ACTIONS {
        return Err(Error::Budget { size, budget: MAX_JOINT_ACTIONS });
    }
    Ok((0..size as usize)
        .map(|mut idx| {
            let mut joint = vec![0; n];
            for slot in joint.iter_mut().rev() {
                *slot = idx % actions;
                idx /= actions;
            }
            joint
        })
        .collect())
}

/// Random connected tree over `n` agents: each new factor joins one agent that is
/// already connected with up to `max_order - 1` fresh ones. Some unary factors are sprinkled in.
pub fn random_tree_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, actions: usize, max_order: usize) -> Result<FactorGraph> {
    if n == 0 || max_order < 2 {
        return Err(Error::InvalidArgument("need n ≥ 1 and max_order ≥ 2".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut connected = vec![order[0]];
    let mut factors = Vec::new();
    let mut next = 1;
    while next < n {
        let fresh = rng.gen_range(1..max_order).min(n - next);
        let mut agents = vec![*connected.choose(rng).expect("nonempty")];
        agents.extend_from_slice(&order[next..next + fresh]);
        connected.extend_from_slice(&order[next..next + fresh]);
        next += fresh;
        agents.sort_unstable();
        factors.push(agents);
    }
    for i in 0..n {
        if rng.gen_bool(0.3) {
            factors.push(vec![i]);
        }
    }
    if factors.is_empty() {
        factors.push(vec![0]);
    }
    FactorGraph::build(Adjacency::from_factors(n, &factors)?, actions)
}

/// A tree plus extra factors until the graph contains a cycle.
pub fn random_loopy_graph<R: Rng + ?Sized>(rng: &mut R, n: usize, actions: usize, max_order: usize) -> Result<FactorGraph> {
    if n < 2 {
        return Err(Error::InvalidArgument("a cycle needs at least two agents".into()));
    }
    let tree = random_tree_graph(rng, n, actions, max_order)?;
    let mut factors = tree.factors().to_vec();
    loop {
        let k = rng.gen_range(2..=max_order.min(n));
        let mut agents: Vec<usize> = rand::seq::index::sample(rng, n, k).into_vec();
        agents.sort_unstable();
        factors.push(agents);
        let g = FactorGraph::build(Adjacency::from_factors(n, &factors)?, actions)?;
        if !is_forest(&g) {
            return Ok(g);
        }
    }
}

/// Independent uniform `[-1, 1)` entries for every factor table.
pub fn random_tables<R: Rng + ?Sized>(rng: &mut R, graph: &FactorGraph) -> Result<Vec<DenseTensor>> {
    graph
        .factor_orders()
        .into_iter()
        .map(|d| {
            let size = graph.actions().pow(d as u32);
            DenseTensor::new(d, graph.actions(), (0..size).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect()
}
