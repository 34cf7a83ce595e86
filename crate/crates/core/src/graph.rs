//! Factor-graph topologies.
//!
//! Agents are variable nodes, local value functions are factor nodes, and the
//! bipartite edge set is carried by an `n × m` binary adjacency matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary `n × m` adjacency matrix, stored row-major (agent-major).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Adjacency {
    n: usize,
    m: usize,
    entries: Vec<u8>,
}

impl Adjacency {
    pub fn new(n: usize, m: usize, entries: Vec<u8>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidAdjacency("at least one agent is required".into()));
        }
        if entries.len() != n * m {
            return Err(Error::shape(n * m, entries.len()));
        }
        if let Some(pos) = entries.iter().position(|&e| e > 1) {
            return Err(Error::InvalidAdjacency(format!(
                "entry ({}, {}) is {}, expected 0 or 1",
                pos / m.max(1),
                pos % m.max(1),
                entries[pos]
            )));
        }
        Ok(Adjacency { n, m, entries })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(Error::shape(m, bad.len()));
        }
        Self::new(n, m, rows.concat())
    }

    /// Zero-width matrix: no factor nodes.
    pub fn empty(n: usize) -> Result<Self> {
        Self::new(n, 0, Vec::new())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut entries = vec![0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1;
        }
        Self::new(n, n, entries)
    }

    /// Builds a matrix from explicit per-factor agent sets.
    pub fn from_factors(n: usize, factors: &[Vec<usize>]) -> Result<Self> {
        let m = factors.len();
        let mut entries = vec![0; n * m];
        for (j, agents) in factors.iter().enumerate() {
            for &i in agents {
                if i >= n {
                    return Err(Error::OutOfRange { index: i, limit: n });
                }
                entries[i * m + j] = 1;
            }
        }
        Self::new(n, m, entries)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &[u8] {
        &self.entries
    }

    pub fn get(&self, agent: usize, factor: usize) -> bool {
        self.entries[agent * self.m + factor] == 1
    }

    /// Agents connected to `factor`, ascending.
    pub fn column_agents(&self, factor: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.get(i, factor)).collect()
    }

    pub fn column_sum(&self, factor: usize) -> usize {
        (0..self.n).filter(|&i| self.get(i, factor)).count()
    }

    /// `[A, I_n]`: appends one unary factor per agent.
    pub fn augment_identity(&self) -> Adjacency {
        let (n, m) = (self.n, self.m);
        let width = m + n;
        let mut entries = vec![0u8; n * width];
        for i in 0..n {
            entries[i * width..i * width + m].copy_from_slice(&self.entries[i * m..(i + 1) * m]);
            entries[i * width + m + i] = 1;
        }
        Adjacency { n, m: width, entries }
    }
}

/// Fixed topologies that reduce the model to known value-decomposition schemes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// No non-unary factors; after identity augmentation only per-agent utilities remain.
    Vdn,
    /// One order-2 factor per unordered agent pair.
    DcgPairwise,
}

pub fn preset_topology(kind: Preset, n: usize) -> Result<Adjacency> {
    match kind {
        Preset::Vdn => Adjacency::empty(n),
        Preset::DcgPairwise => {
            let pairs: Vec<Vec<usize>> = (0..n)
                .flat_map(|a| ((a + 1)..n).map(move |b| vec![a, b]))
                .collect();
            Adjacency::from_factors(n, &pairs)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorGraph {
    adjacency: Adjacency,
    actions: usize,
    factors: Vec<Vec<usize>>,
}

impl FactorGraph {
    pub fn build(adjacency: Adjacency, actions: usize) -> Result<Self> {
        if actions < 2 {
            return Err(Error::InvalidArgument(format!(
                "actions per agent must be at least 2, got {actions}"
            )));
        }
        let factors: Vec<Vec<usize>> = (0..adjacency.m()).map(|j| adjacency.column_agents(j)).collect();
        if let Some(j) = factors.iter().position(Vec::is_empty) {
            return Err(Error::InvalidAdjacency(format!("factor column {j} has no agents")));
        }
        Ok(FactorGraph { adjacency, actions, factors })
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn n_agents(&self) -> usize {
        self.adjacency.n()
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    /// Agents of factor `j`, ascending.
    pub fn factor_agents(&self, j: usize) -> &[usize] {
        &self.factors[j]
    }

    pub fn factors(&self) -> &[Vec<usize>] {
        &self.factors
    }

    pub fn factor_orders(&self) -> Vec<usize> {
        self.factors.iter().map(Vec::len).collect()
    }

    /// For each agent, the `(factor, position within factor)` pairs it participates in.
    pub fn agent_neighbors(&self) -> Vec<Vec<(usize, usize)>> {
        let mut nbrs = vec![Vec::new(); self.n_agents()];
        for (j, agents) in self.factors.iter().enumerate() {
            for (pos, &i) in agents.iter().enumerate() {
                nbrs[i].push((j, pos));
            }
        }
        nbrs
    }

    /// True iff the bipartite graph is a forest.
    pub fn is_acyclic(&self) -> bool {
        let n = self.n_agents();
        let agent_nbrs = self.agent_neighbors();
        // node ids: agents 0..n, factors n..n+m
        let total = n + self.n_factors();
        let mut seen = vec![false; total];
        for root in 0..total {
            if seen[root] {
                continue;
            }
            seen[root] = true;
            let mut stack = vec![(root, usize::MAX)];
            while let Some((node, parent)) = stack.pop() {
                let next: Vec<usize> = if node < n {
                    agent_nbrs[node].iter().map(|&(j, _)| n + j).collect()
                } else {
                    self.factors[node - n].clone()
                };
                for nb in next {
                    if nb == parent {
                        continue;
                    }
                    if seen[nb] {
                        return false;
                    }
                    seen[nb] = true;
                    stack.push((nb, node));
                }
            }
        }
        true
    }

    /// Longest shortest path between any two nodes of the bipartite graph.
    pub fn diameter(&self) -> usize {
        let n = self.n_agents();
        let total = n + self.n_factors();
        let agent_nbrs = self.agent_neighbors();
        let mut best = 0;
        for src in 0..total {
            let mut dist = vec![usize::MAX; total];
            dist[src] = 0;
            let mut queue = std::collections::VecDeque::from([src]);
            while let Some(node) = queue.pop_front() {
                let next: Vec<usize> = if node < n {
                    agent_nbrs[node].iter().map(|&(j, _)| n + j).collect()
                } else {
                    self.factors[node - n].clone()
                };
                for nb in next {
                    if dist[nb] == usize::MAX {
                        dist[nb] = dist[node] + 1;
                        best = best.max(dist[nb]);
                        queue.push_back(nb);
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_factor_has_order_two() {
        let adj = Adjacency::from_rows(&[vec![1], vec![1]]).unwrap();
        let g = FactorGraph::build(adj, 3).unwrap();
        assert_eq!(g.factor_orders(), vec![2]);
    }

    #[test]
    fn identity_is_vdn_shape() {
        let g = FactorGraph::build(Adjacency::identity(3).unwrap(), 2).unwrap();
        assert_eq!(g.factor_orders(), vec![1, 1, 1]);
    }

    #[test]
    fn pairwise_matrix_is_dcg_shape() {
        let adj = Adjacency::from_rows(&[vec![1, 1, 0], vec![1, 0, 1], vec![0, 1, 1]]).unwrap();
        let g = FactorGraph::build(adj, 2).unwrap();
        assert_eq!(g.factor_orders(), vec![2, 2, 2]);
        assert_eq!(preset_topology(Preset::DcgPairwise, 3).unwrap(), *g.adjacency());
    }

    #[test]
    fn rejects_orphans_and_non_binary() {
        let orphan = Adjacency::from_rows(&[vec![1, 0], vec![1, 0]]).unwrap();
        assert!(matches!(FactorGraph::build(orphan, 2), Err(Error::InvalidAdjacency(_))));
        assert!(Adjacency::from_rows(&[vec![2], vec![1]]).is_err());
        let ok = Adjacency::from_rows(&[vec![1], vec![0]]).unwrap();
        assert!(FactorGraph::build(ok, 1).is_err());
    }

    #[test]
    fn augment_identity_examples() {
        let adj = Adjacency::from_rows(&[vec![1], vec![1]]).unwrap();
        let aug = adj.augment_identity();
        assert_eq!(aug, Adjacency::from_rows(&[vec![1, 1, 0], vec![1, 0, 1]]).unwrap());

        let empty = Adjacency::empty(3).unwrap();
        assert_eq!(empty.augment_identity(), Adjacency::identity(3).unwrap());

        let twice = aug.augment_identity();
        assert_eq!(twice.m(), 5);
        for i in 0..2 {
            for k in 0..2 {
                assert_eq!(twice.get(i, 3 + k), i == k);
            }
            for j in 0..3 {
                assert_eq!(twice.get(i, j), aug.get(i, j));
            }
        }
    }

    #[test]
    fn acyclic_examples() {
        let star = FactorGraph::build(Adjacency::from_rows(&[vec![1], vec![1], vec![1]]).unwrap(), 2).unwrap();
        assert!(star.is_acyclic());
        let square = FactorGraph::build(Adjacency::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap(), 2).unwrap();
        assert!(!square.is_acyclic());
        let dcg = FactorGraph::build(preset_topology(Preset::DcgPairwise, 3).unwrap(), 2).unwrap();
        assert!(!dcg.is_acyclic());
    }

    #[test]
    fn preset_sizes() {
        assert_eq!(preset_topology(Preset::Vdn, 4).unwrap().m(), 0);
        let dcg3 = preset_topology(Preset::DcgPairwise, 3).unwrap();
        assert!((0..3).all(|j| dcg3.column_sum(j) == 2));
        assert_eq!(preset_topology(Preset::DcgPairwise, 9).unwrap().m(), 36);
    }

    #[test]
    fn diameter_of_chain() {
        // a0 - f0 - a1 - f1 - a2
        let g = FactorGraph::build(Adjacency::from_factors(3, &[vec![0, 1], vec![1, 2]]).unwrap(), 2).unwrap();
        assert_eq!(g.diameter(), 4);
    }
}
