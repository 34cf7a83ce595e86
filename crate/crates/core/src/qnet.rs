//! Factored value networks.
//!
//! A recurrent encoder shared by all agents turns each agent's history into a
//! hidden state. Every factor concatenates the hidden states of its agents in
//! ascending agent order and feeds them to the head for its order, so all
//! factors of equal order share parameters. Heads of order two and above emit
//! CP factors; the order-one head emits a plain utility vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::nn::{Activation, Gru, GruCache, Layout, Mlp, MlpCache};
use crate::tensor::{CpTensor, DenseTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    pub actions: usize,
    pub rnn_hidden: usize,
    pub mlp_hidden: usize,
    pub d_max: usize,
    /// CP rank for orders 2, 3, ...; the last entry repeats for higher orders.
    pub ranks: Vec<usize>,
    /// Append a one-hot agent id to the encoder input.
    pub agent_id: bool,
}

impl QNetSpec {
    pub fn rank_for(&self, order: usize) -> usize {
        debug_assert!(order >= 2);
        let idx = (order - 2).min(self.ranks.len().saturating_sub(1));
        self.ranks.get(idx).copied().unwrap_or(1)
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.obs_dim + self.actions + if self.agent_id { self.n_agents } else { 0 }
    }
}

/// Per-agent recurrent encoder with shared parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub gru: Gru,
    n_agents: usize,
    obs_dim: usize,
    actions: usize,
    agent_id: bool,
}

impl Encoder {
    /// `[o_t^i, onehot(u_{t-1}^i), onehot(i)]`; the previous action is the zero vector at t = 0.
    pub fn input(&self, agent: usize, obs: &[f64], prev_action: Option<usize>) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::shape(self.obs_dim, obs.len()));
        }
        let mut x = Vec::with_capacity(self.gru.n_in);
        x.extend_from_slice(obs);
        let start = x.len();
        x.resize(start + self.actions, 0.0);
        if let Some(a) = prev_action {
            if a >= self.actions {
                return Err(Error::OutOfRange { index: a, limit: self.actions });
            }
            x[start + a] = 1.0;
        }
        if self.agent_id {
            let start = x.len();
            x.resize(start + self.n_agents, 0.0);
            x[start + agent] = 1.0;
        }
        Ok(x)
    }

    /// One encoder step for every agent.
    pub fn encode_histories(
        &self,
        p: &[f64],
        observations: &[Vec<f64>],
        prev_actions: &[Option<usize>],
        h_prev: &[Vec<f64>],
    ) -> Result<Vec<GruCache>> {
        if observations.len() != self.n_agents {
            return Err(Error::shape(self.n_agents, observations.len()));
        }
        if prev_actions.len() != self.n_agents {
            return Err(Error::shape(self.n_agents, prev_actions.len()));
        }
        if h_prev.len() != self.n_agents {
            return Err(Error::shape(self.n_agents, h_prev.len()));
        }
        (0..self.n_agents)
            .map(|i| {
                let x = self.input(i, &observations[i], prev_actions[i])?;
                self.gru.step(p, &h_prev[i], &x)
            })
            .collect()
    }

    pub fn zero_state(&self) -> Vec<Vec<f64>> {
        vec![vec![0.0; self.gru.n_hidden]; self.n_agents]
    }

    /// Encodes a whole episode. `obs[t][i]`, `actions[t][i]`; returns caches indexed `[t][i]`.
    pub fn encode_episode(&self, p: &[f64], obs: &[Vec<Vec<f64>>], actions: &[Vec<usize>]) -> Result<Vec<Vec<GruCache>>> {
        let mut h = self.zero_state();
        let mut out = Vec::with_capacity(obs.len());
        for (t, o) in obs.iter().enumerate() {
            let prev: Vec<Option<usize>> = if t == 0 {
                vec![None; self.n_agents]
            } else {
                actions[t - 1].iter().map(|&a| Some(a)).collect()
            };
            let caches = self.encode_histories(p, o, &prev, &h)?;
            h = caches.iter().map(|c| c.h.clone()).collect();
            out.push(caches);
        }
        Ok(out)
    }
}

pub fn hidden_of(caches: &[GruCache]) -> Vec<Vec<f64>> {
    caches.iter().map(|c| c.h.clone()).collect()
}

fn concat_hidden(agents: &[usize], hidden: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut x = Vec::new();
    for &i in agents {
        let h = hidden.get(i).ok_or(Error::OutOfRange { index: i, limit: hidden.len() })?;
        x.extend_from_slice(h);
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalTable {
    Unary(Vec<f64>),
    Cp(CpTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalQTable {
    pub factor: usize,
    pub agents: Vec<usize>,
    pub table: LocalTable,
}

impl LocalQTable {
    /// Value at the factor's sub-action (one entry per participating agent).
    pub fn value(&self, sub_action: &[usize]) -> Result<f64> {
        match &self.table {
            LocalTable::Unary(v) => {
                if sub_action.len() != 1 {
                    return Err(Error::shape(1, sub_action.len()));
                }
                v.get(sub_action[0]).copied().ok_or(Error::OutOfRange { index: sub_action[0], limit: v.len() })
            }
            LocalTable::Cp(cp) => cp.evaluate(sub_action),
        }
    }

    pub fn value_at(&self, joint: &[usize]) -> Result<f64> {
        let sub: Vec<usize> = self.agents.iter().map(|&i| joint[i]).collect();
        self.value(&sub)
    }

    pub fn dense(&self) -> Result<DenseTensor> {
        match &self.table {
            LocalTable::Unary(v) => DenseTensor::new(1, v.len(), v.clone()),
            LocalTable::Cp(cp) => cp.materialize(),
        }
    }

    /// `∂value(sub_action)/∂head_output`, scaled.
    pub fn head_grad(&self, sub_action: &[usize], scale: f64) -> Result<Vec<f64>> {
        match &self.table {
            LocalTable::Unary(v) => {
                let mut g = vec![0.0; v.len()];
                g[sub_action[0]] = scale;
                Ok(g)
            }
            LocalTable::Cp(cp) => {
                let mut g = vec![0.0; cp.param_count()];
                cp.accumulate_grad(sub_action, scale, &mut g)?;
                Ok(g)
            }
        }
    }
}

/// Q-value network: shared encoder plus one CP head per factor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    spec: QNetSpec,
    pub encoder: Encoder,
    heads: Vec<Mlp>,
    layout: Layout,
}

impl QNetwork {
    pub fn new(spec: QNetSpec) -> Result<Self> {
        if spec.d_max == 0 || spec.actions < 2 || spec.n_agents == 0 {
            return Err(Error::InvalidArgument("q-network needs d_max ≥ 1, actions ≥ 2 and agents ≥ 1".into()));
        }
        let mut layout = Layout::new();
        let gru = Gru::new(&mut layout, "encoder", spec.encoder_input_dim(), spec.rnn_hidden);
        let heads = (1..=spec.d_max)
            .map(|d| {
                let out = if d == 1 { spec.actions } else { d * spec.rank_for(d) * spec.actions };
                Mlp::new(&mut layout, &format!("q_head{d}"), &[d * spec.rnn_hidden, spec.mlp_hidden, out], Activation::Relu)
            })
            .collect();
        let encoder = Encoder {
            gru,
            n_agents: spec.n_agents,
            obs_dim: spec.obs_dim,
            actions: spec.actions,
            agent_id: spec.agent_id,
        };
        Ok(QNetwork { spec, encoder, heads, layout })
    }

    pub fn spec(&self) -> &QNetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.encoder.gru.init(p, rng);
        self.heads.iter().for_each(|h| h.init(p, rng));
    }

    fn head(&self, order: usize) -> Result<&Mlp> {
        if order == 0 || order > self.heads.len() {
            return Err(Error::InvalidArgument(format!(
                "no value head for factor order {order} (d_max = {})",
                self.heads.len()
            )));
        }
        Ok(&self.heads[order - 1])
    }

    /// Local table of factor `j`; `graph` is the identity-augmented graph.
    pub fn local_q(&self, p: &[f64], j: usize, graph: &FactorGraph, hidden: &[Vec<f64>]) -> Result<(LocalQTable, MlpCache)> {
        if j >= graph.n_factors() {
            return Err(Error::OutOfRange { index: j, limit: graph.n_factors() });
        }
        let agents = graph.factor_agents(j).to_vec();
        let order = agents.len();
        let head = self.head(order)?;
        let cache = head.forward_cached(p, &concat_hidden(&agents, hidden)?)?;
        let out = cache.output();
        let table = if order == 1 {
            LocalTable::Unary(out.to_vec())
        } else {
            LocalTable::Cp(CpTensor::from_heads(out, order, self.spec.rank_for(order), self.spec.actions)?)
        };
        Ok((LocalQTable { factor: j, agents, table }, cache))
    }

    pub fn local_tables(&self, p: &[f64], graph: &FactorGraph, hidden: &[Vec<f64>]) -> Result<Vec<LocalQTable>> {
        (0..graph.n_factors()).map(|j| self.local_q(p, j, graph, hidden).map(|(t, _)| t)).collect()
    }

    pub fn dense_tables(&self, p: &[f64], graph: &FactorGraph, hidden: &[Vec<f64>]) -> Result<Vec<DenseTensor>> {
        self.local_tables(p, graph, hidden)?.iter().map(LocalQTable::dense).collect()
    }

    /// `Σ_j Q_j(u^j)` over every factor of the (augmented) graph.
    pub fn q_tot(&self, p: &[f64], graph: &FactorGraph, hidden: &[Vec<f64>], joint: &[usize]) -> Result<f64> {
        if joint.len() != graph.n_agents() {
            return Err(Error::shape(graph.n_agents(), joint.len()));
        }
        if let Some(&a) = joint.iter().find(|&&a| a >= self.spec.actions) {
            return Err(Error::OutOfRange { index: a, limit: self.spec.actions });
        }
        self.local_tables(p, graph, hidden)?.iter().map(|t| t.value_at(joint)).sum()
    }

    /// Accumulates `scale * ∂Q_j(u^j)/∂θ` into `grad` and `∂/∂h` into `d_hidden`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_factor(
        &self,
        p: &[f64],
        table: &LocalQTable,
        cache: &MlpCache,
        sub_action: &[usize],
        scale: f64,
        grad: &mut [f64],
        d_hidden: &mut [Vec<f64>],
    ) -> Result<()> {
        let head = self.head(table.agents.len())?;
        let d_out = table.head_grad(sub_action, scale)?;
        let dx = head.backward(p, cache, &d_out, grad);
        let hs = self.spec.rnn_hidden;
        for (slot, &i) in table.agents.iter().enumerate() {
            d_hidden[i].iter_mut().zip(&dx[slot * hs..(slot + 1) * hs]).for_each(|(d, g)| *d += g);
        }
        Ok(())
    }
}

/// State-value network: per-order scalar heads over the same concatenated
/// hidden states, action independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VNetwork {
    rnn_hidden: usize,
    heads: Vec<Mlp>,
    layout: Layout,
}

impl VNetwork {
    pub fn new(rnn_hidden: usize, mlp_hidden: usize, d_max: usize) -> Self {
        let mut layout = Layout::new();
        let heads = (1..=d_max)
            .map(|d| Mlp::new(&mut layout, &format!("v_head{d}"), &[d * rnn_hidden, mlp_hidden, 1], Activation::Relu))
            .collect();
        VNetwork { rnn_hidden, heads, layout }
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn init<R: Rng + ?Sized>(&self, p: &mut [f64], rng: &mut R) {
        self.heads.iter().for_each(|h| h.init(p, rng));
    }

    fn head(&self, order: usize) -> Result<&Mlp> {
        if order == 0 || order > self.heads.len() {
            return Err(Error::InvalidArgument(format!("no state-value head for order {order}")));
        }
        Ok(&self.heads[order - 1])
    }

    pub fn v_factor(&self, p: &[f64], agents: &[usize], hidden: &[Vec<f64>]) -> Result<(f64, MlpCache)> {
        let cache = self.head(agents.len())?.forward_cached(p, &concat_hidden(agents, hidden)?)?;
        Ok((cache.output()[0], cache))
    }

    /// Returns `V_tot` and the per-factor `V_j`.
    pub fn v_tot(&self, p: &[f64], graph: &FactorGraph, hidden: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
        let per: Vec<f64> = graph
            .factors()
            .iter()
            .map(|agents| self.v_factor(p, agents, hidden).map(|(v, _)| v))
            .collect::<Result<_>>()?;
        Ok((per.iter().sum(), per))
    }

    pub fn backward_factor(&self, p: &[f64], order: usize, cache: &MlpCache, scale: f64, grad: &mut [f64]) -> Result<()> {
        self.head(order)?.backward(p, cache, &[scale], grad);
        Ok(())
    }

    pub fn rnn_hidden(&self) -> usize {
        self.rnn_hidden
    }
}
