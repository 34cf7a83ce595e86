//! Graph-structure policy.
//!
//! Each of the `M` factor columns holds a categorical distribution over agents.
//! A structure is drawn by making `d_max` independent draws per column and
//! connecting every agent drawn at least once, so the per-column counts are
//! multinomial and every factor has order at most `d_max`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::nn::{Hypernetwork, Layout, MlpCache};

/// Largest count-vector support the enumerating helpers accept.
pub const MAX_PMF_SUPPORT: u128 = 1_000_000;

/// `N × M` matrix of edge probabilities, stored agent-major like `Adjacency`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeProbMatrix {
    n: usize,
    m: usize,
    probs: Vec<f64>,
}

impl EdgeProbMatrix {
    pub fn new(n: usize, m: usize, probs: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("edge probabilities need at least one agent".into()));
        }
        if probs.len() != n * m {
            return Err(Error::shape(n * m, probs.len()));
        }
        let out = EdgeProbMatrix { n, m, probs };
        for j in 0..m {
            let col = out.column(j);
            if col.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidArgument(format!("column {j} has a negative or non-finite entry")));
            }
            let s: f64 = col.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("column {j} sums to {s}, expected 1")));
            }
        }
        Ok(out)
    }

    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        Self::new(n, m, vec![1.0 / n as f64; n * m])
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        let mut probs = vec![0.0; n * m];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::shape(n, col.len()));
            }
            for (i, &p) in col.iter().enumerate() {
                probs[i * m + j] = p;
            }
        }
        Self::new(n, m, probs)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn get(&self, agent: usize, factor: usize) -> f64 {
        self.probs[agent * self.m + factor]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// A sampled structure: per-column draw counts and the binarized adjacency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSample {
    counts: Vec<u32>,
    adjacency: Adjacency,
    d_max: usize,
}

impl GraphSample {
    pub fn from_columns(n: usize, columns: &[Vec<usize>], d_max: usize) -> Result<Self> {
        let m = columns.len();
        let mut counts = vec![0u32; n * m];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::shape(n, col.len()));
            }
            if col.iter().sum::<usize>() != d_max {
                return Err(Error::InvalidArgument(format!("counts of column {j} do not sum to {d_max}")));
            }
            for (i, &c) in col.iter().enumerate() {
                counts[i * m + j] = c as u32;
            }
        }
        let entries = counts.iter().map(|&c| u8::from(c > 0)).collect();
        Ok(GraphSample { counts, adjacency: Adjacency::new(n, m, entries)?, d_max })
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn count(&self, agent: usize, factor: usize) -> usize {
        self.counts[agent * self.adjacency.m() + factor] as usize
    }

    pub fn column_counts(&self, j: usize) -> Vec<usize> {
        (0..self.adjacency.n()).map(|i| self.count(i, j)).collect()
    }
}

/// One set of `d_max` categorical draws per column.
pub fn sample_structure<R: Rng + ?Sized>(probs: &EdgeProbMatrix, d_max: usize, rng: &mut R) -> Result<GraphSample> {
    if d_max == 0 {
        return Err(Error::InvalidArgument("d_max must be at least 1".into()));
    }
    let columns = (0..probs.m())
        .map(|j| {
            let dist = WeightedIndex::new(probs.column(j))
                .map_err(|e| Error::InvalidArgument(format!("column {j}: {e}")))?;
            let mut counts = vec![0usize; probs.n()];
            for _ in 0..d_max {
                counts[dist.sample(rng)] += 1;
            }
            Ok(counts)
        })
        .collect::<Result<Vec<_>>>()?;
    GraphSample::from_columns(probs.n(), &columns, d_max)
}

/// Deterministic structure: per column, the most probable count vector
/// (first in enumeration order on ties).
pub fn mode_structure(probs: &EdgeProbMatrix, d_max: usize) -> Result<GraphSample> {
    let support = count_vectors(probs.n(), d_max)?;
    let columns = (0..probs.m())
        .map(|j| {
            let col = probs.column(j);
            let mut best = (f64::NEG_INFINITY, 0);
            for (k, m) in support.iter().enumerate() {
                let lp = log_multinomial_pmf(&col, m)?;
                if lp > best.0 {
                    best = (lp, k);
                }
            }
            Ok(support[best.1].clone())
        })
        .collect::<Result<Vec<_>>>()?;
    GraphSample::from_columns(probs.n(), &columns, d_max)
}

/// `C(n + d_max - 1, n - 1)`: the number of count vectors of length `n` summing to `d_max`.
pub fn support_count(n: usize, d_max: usize) -> u128 {
    if n == 0 {
        return 0;
    }
    let (top, k) = ((n + d_max - 1) as u128, (n - 1).min(d_max) as u128);
    (0..k).fold(1u128, |acc, i| acc * (top - i) / (i + 1))
}

/// All length-`n` count vectors summing to `total`, in descending lexicographic order.
pub fn count_vectors(n: usize, total: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return Err(Error::InvalidArgument("count vectors need n ≥ 1".into()));
    }
    let size = support_count(n, total);
    if size > MAX_PMF_SUPPORT {
        return Err(Error::Budget { size, budget: MAX_PMF_SUPPORT });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut cur = vec![0usize; n];
    fill_counts(&mut cur, 0, total, &mut out);
    Ok(out)
}

fn fill_counts(cur: &mut [usize], pos: usize, left: usize, out: &mut Vec<Vec<usize>>) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.to_vec());
        return;
    }
    for c in (0..=left).rev() {
        cur[pos] = c;
        fill_counts(cur, pos + 1, left - c, out);
    }
}

fn ln_factorial(k: usize) -> f64 {
    (2..=k).map(|x| (x as f64).ln()).sum()
}

/// Log of the multinomial probability of counts `m` under `p`; `-inf` when a
/// counted agent has zero probability.
pub fn log_multinomial_pmf(p: &[f64], m: &[usize]) -> Result<f64> {
    if p.len() != m.len() {
        return Err(Error::shape(p.len(), m.len()));
    }
    let total: usize = m.iter().sum();
    let mut lp = ln_factorial(total);
    for (&pi, &mi) in p.iter().zip(m) {
        if mi == 0 {
            continue;
        }
        if pi <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        lp += mi as f64 * pi.ln() - ln_factorial(mi);
    }
    Ok(lp)
}

pub fn multinomial_pmf(p: &[f64], m: &[usize], d_max: usize) -> Result<f64> {
    let total: usize = m.iter().sum();
    if total != d_max {
        return Err(Error::InvalidArgument(format!("counts sum to {total}, expected {d_max}")));
    }
    Ok(log_multinomial_pmf(p, m)?.exp())
}

/// Probability that a column connects exactly the agents in `group`.
pub fn subpolicy_pmf(p: &[f64], group: &[usize], d_max: usize) -> Result<f64> {
    if group.is_empty() {
        return Err(Error::InvalidArgument("agent set must be nonempty".into()));
    }
    if group.len() > d_max {
        return Err(Error::InvalidArgument(format!("agent set of size {} exceeds d_max = {d_max}", group.len())));
    }
    if let Some(&i) = group.iter().find(|&&i| i >= p.len()) {
        return Err(Error::OutOfRange { index: i, limit: p.len() });
    }
    let mut total = 0.0;
    for extra in count_vectors(group.len(), d_max - group.len())? {
        let mut m = vec![0usize; p.len()];
        for (&i, e) in group.iter().zip(extra) {
            m[i] = e + 1;
        }
        total += multinomial_pmf(p, &m, d_max)?;
    }
    Ok(total)
}

/// `Π_i (p_new[i] / p_old[i])^{m_i}`; the multinomial coefficients cancel.
pub fn importance_ratio(p_new: &[f64], p_old: &[f64], counts: &[usize]) -> Result<f64> {
    Ok(log_importance_ratio(p_new, p_old, counts)?.exp())
}

pub fn log_importance_ratio(p_new: &[f64], p_old: &[f64], counts: &[usize]) -> Result<f64> {
    if p_new.len() != counts.len() {
        return Err(Error::shape(counts.len(), p_new.len()));
    }
    if p_old.len() != counts.len() {
        return Err(Error::shape(counts.len(), p_old.len()));
    }
    let mut lr = 0.0;
    for i in 0..counts.len() {
        if counts[i] == 0 {
            continue;
        }
        if p_old[i] <= 0.0 {
            return Err(Error::ZeroProbability { factor: i });
        }
        if p_new[i] <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        lr += counts[i] as f64 * (p_new[i].ln() - p_old[i].ln());
    }
    Ok(lr)
}

fn plogp(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

pub fn column_entropy(col: &[f64]) -> f64 {
    -col.iter().map(|&p| plogp(p)).sum::<f64>()
}

/// Sum of per-column entropies.
pub fn policy_entropy(probs: &EdgeProbMatrix) -> f64 {
    -probs.as_slice().iter().map(|&p| plogp(p)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPolicySpec {
    pub n_agents: usize,
    pub n_factors: usize,
    pub rnn_hidden: usize,
    pub state_dim: usize,
    pub hyper_hidden: usize,
}

/// Edge-probability network. A hypernetwork maps the global state to the
/// weights of a per-factor linear scorer over agent hidden states; scores are
/// softmaxed over agents within each factor column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPolicy {
    spec: GraphPolicySpec,
    hyper: Hypernetwork,
    layout: Layout,
}

#[derive(Debug, Clone)]
pub struct PolicyCache {
    hyper: MlpCache,
    hidden: Vec<Vec<f64>>,
    pub probs: EdgeProbMatrix,
}

impl GraphPolicy {
    pub fn new(spec: GraphPolicySpec) -> Result<Self> {
        if spec.n_agents == 0 || spec.n_factors == 0 {
            return Err(Error::InvalidArgument("graph policy needs at least one agent and one factor".into()));
        }
        let mut layout = Layout::new();
        let generated = spec.n_factors * spec.rnn_hidden + spec.n_factors;
        let hyper = Hypernetwork::new(&mut layout, "graph_hyper", spec.state_dim, spec.hyper_hidden, generated);
        Ok(GraphPolicy { spec, hyper, layout })
    }

    pub fn spec(&self) -> &GraphPolicySpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// The generated output layer starts at zero, so the initial policy is uniform.
    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.hyper.init(p, rng, true);
    }

    pub fn forward(&self, p: &[f64], hidden: &[Vec<f64>], state: &[f64]) -> Result<PolicyCache> {
        let (n, m, h) = (self.spec.n_agents, self.spec.n_factors, self.spec.rnn_hidden);
        if hidden.len() != n {
            return Err(Error::shape(n, hidden.len()));
        }
        if let Some(bad) = hidden.iter().find(|x| x.len() != h) {
            return Err(Error::shape(h, bad.len()));
        }
        let hyper = self.hyper.weights(p, state)?;
        let gen = hyper.output();
        let (w, b) = gen.split_at(m * h);
        let mut probs = vec![0.0; n * m];
        let mut z = vec![0.0; n];
        for j in 0..m {
            let wj = &w[j * h..(j + 1) * h];
            for i in 0..n {
                z[i] = wj.iter().zip(&hidden[i]).map(|(a, x)| a * x).sum::<f64>() + b[j];
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = z.iter().map(|&zi| (zi - zmax).exp()).sum();
            for i in 0..n {
                probs[i * m + j] = (z[i] - zmax).exp() / s;
            }
        }
        let probs = EdgeProbMatrix { n, m, probs };
        Ok(PolicyCache { hyper, hidden: hidden.to_vec(), probs })
    }

    /// Backpropagates `∂L/∂ln p_ij` (agent-major, like the probability matrix) into `grad`.
    pub fn backward_logp(&self, p: &[f64], cache: &PolicyCache, d_logp: &[f64], grad: &mut [f64]) -> Result<()> {
        let (n, m, h) = (self.spec.n_agents, self.spec.n_factors, self.spec.rnn_hidden);
        if d_logp.len() != n * m {
            return Err(Error::shape(n * m, d_logp.len()));
        }
        let mut d_gen = vec![0.0; m * h + m];
        for j in 0..m {
            let col_sum: f64 = (0..n).map(|i| d_logp[i * m + j]).sum();
            for i in 0..n {
                let dz = d_logp[i * m + j] - cache.probs.get(i, j) * col_sum;
                if dz == 0.0 {
                    continue;
                }
                for (g, x) in d_gen[j * h..(j + 1) * h].iter_mut().zip(&cache.hidden[i]) {
                    *g += dz * x;
                }
                d_gen[m * h + j] += dz;
            }
        }
        self.hyper.backward(p, &cache.hyper, &d_gen, grad);
        Ok(())
    }
}

/// `∂H/∂ln p_ij` for the summed column entropy, scaled. Combined with the
/// softmax Jacobian this gives `∂H/∂z_k = -p_k (ln p_k + H_col)`.
pub fn entropy_logp_grad(probs: &EdgeProbMatrix, scale: f64) -> Vec<f64> {
    probs
        .as_slice()
        .iter()
        .map(|&p| if p > 0.0 { -scale * p * (p.ln() + 1.0) } else { 0.0 })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pmf_examples() {
        assert!((multinomial_pmf(&[0.2, 0.3, 0.5], &[1, 1, 0], 2).unwrap() - 0.12).abs() < 1e-12);
        assert_eq!(multinomial_pmf(&[0.0, 1.0, 0.0], &[0, 3, 0], 3).unwrap(), 1.0);
        assert!(multinomial_pmf(&[0.5, 0.5], &[1, 0], 2).is_err());
        let p = [0.1, 0.6, 0.3];
        let total: f64 = count_vectors(3, 4).unwrap().iter().map(|m| multinomial_pmf(&p, m, 4).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn subpolicy_examples() {
        assert!((subpolicy_pmf(&[0.5, 0.5], &[0], 2).unwrap() - 0.25).abs() < 1e-12);
        assert!((subpolicy_pmf(&[0.5, 0.5], &[0, 1], 2).unwrap() - 0.5).abs() < 1e-12);
        assert!(subpolicy_pmf(&[0.5, 0.5], &[0, 1], 1).is_err());
    }

    #[test]
    fn support_count_examples() {
        assert_eq!(support_count(3, 2), 6);
        assert_eq!(support_count(1, 7), 1);
        assert_eq!(support_count(2, 3), 4);
        assert_eq!(count_vectors(2, 3).unwrap(), vec![vec![3, 0], vec![2, 1], vec![1, 2], vec![0, 3]]);
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(importance_ratio(&[0.3, 0.7], &[0.3, 0.7], &[1, 1]).unwrap(), 1.0);
        assert!((importance_ratio(&[0.6, 0.4], &[0.5, 0.5], &[2, 0]).unwrap() - 1.44).abs() < 1e-12);
        assert!(matches!(importance_ratio(&[0.5, 0.5], &[0.0, 1.0], &[1, 1]), Err(Error::ZeroProbability { .. })));
    }

    #[test]
    fn entropy_examples() {
        let u = EdgeProbMatrix::uniform(4, 3).unwrap();
        assert!((policy_entropy(&u) - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(column_entropy(&[1.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn degenerate_column_sample() {
        let probs = EdgeProbMatrix::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let s = sample_structure(&probs, 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.column_counts(0), vec![3, 0, 0]);
        assert_eq!(s.adjacency().column_agents(0), vec![0]);
    }

    #[test]
    fn mode_of_uniform_spreads_counts() {
        let probs = EdgeProbMatrix::uniform(4, 2).unwrap();
        let s = mode_structure(&probs, 3).unwrap();
        assert_eq!(s.column_counts(0), vec![1, 1, 1, 0]);
        let peaked = EdgeProbMatrix::from_columns(&[vec![0.9, 0.05, 0.05]]).unwrap();
        assert_eq!(mode_structure(&peaked, 2).unwrap().column_counts(0), vec![2, 0, 0]);
    }

    #[test]
    fn zero_policy_is_uniform() {
        let spec = GraphPolicySpec { n_agents: 3, n_factors: 2, rnn_hidden: 4, state_dim: 5, hyper_hidden: 6 };
        let gp = GraphPolicy::new(spec).unwrap();
        let mut p = vec![0.0; gp.layout().len()];
        gp.init(&mut p, &mut ChaCha8Rng::seed_from_u64(1));
        let cache = gp.forward(&p, &vec![vec![0.3, -0.1, 0.2, 0.9]; 3], &[0.1; 5]).unwrap();
        for &x in cache.probs.as_slice() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
