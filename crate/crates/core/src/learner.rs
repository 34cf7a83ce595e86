//! Losses, buffers and the alternating training loop.
//!
//! Value networks are trained off-policy from a FIFO episode replay with a
//! TD objective whose bootstrap action comes from max-plus on the target
//! network. The graph policy is trained on-policy from a small buffer of recent
//! episodes with a clipped importance-weighted surrogate and an entropy bonus.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AdvantageMode, GraphMode, RunConfig};
use crate::env::Env;
use crate::error::{Error, Result};
use crate::graph::{preset_topology, Adjacency, FactorGraph};
use crate::maxplus::{run_maxplus, MaxPlusConfig};
use crate::nn::{Adam, GruCache};
use crate::policy::{
    entropy_logp_grad, log_importance_ratio, mode_structure, policy_entropy, sample_structure, EdgeProbMatrix,
    GraphPolicy, GraphPolicySpec, GraphSample,
};
use crate::qnet::{hidden_of, QNetSpec, QNetwork, VNetwork};

/// One environment step as stored in the replay buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    /// Sampled structure in effect at this step (without the unary part).
    pub adjacency: Adjacency,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub steps: Vec<Transition>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    fn observations(&self) -> Vec<Vec<Vec<f64>>> {
        self.steps.iter().map(|s| s.obs.clone()).collect()
    }

    fn actions(&self) -> Vec<Vec<usize>> {
        self.steps.iter().map(|s| s.actions.clone()).collect()
    }
}

/// Graph-policy data recorded while an episode was collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub sample: GraphSample,
    /// Encoder states fed to the policy, treated as constants.
    pub hidden: Vec<Vec<f64>>,
    pub old_probs: EdgeProbMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEpisode {
    pub episode: Episode,
    pub policy: Vec<PolicyStep>,
}

/// Welford running mean and variance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let d = x - self.mean;
        self.mean += d / self.count as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn std(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).sqrt()
        }
    }
}

pub const REWARD_STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    returns: RunningStats,
    normalize: bool,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, normalize: bool) -> Self {
        ReplayBuffer { capacity, episodes: VecDeque::new(), returns: RunningStats::default(), normalize }
    }

    pub fn push(&mut self, episode: Episode) {
        self.returns.push(episode.total_reward());
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Episode> {
        self.episodes.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }

    /// Factor applied to rewards before they enter a loss.
    pub fn reward_scale(&self) -> f64 {
        if !self.normalize || self.returns.count() < 2 {
            1.0
        } else {
            1.0 / self.returns.std().max(REWARD_STD_FLOOR)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Episode>> {
        if self.episodes.is_empty() || batch == 0 {
            return Err(Error::EmptyBatch);
        }
        let k = batch.min(self.episodes.len());
        Ok(rand::seq::index::sample(rng, self.episodes.len(), k).iter().map(|i| &self.episodes[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphPolicyBuffer {
    capacity: usize,
    entries: VecDeque<GraphEpisode>,
}

impl GraphPolicyBuffer {
    pub fn new(capacity: usize) -> Self {
        GraphPolicyBuffer { capacity, entries: VecDeque::new() }
    }

    pub fn push(&mut self, entry: GraphEpisode) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GraphEpisode> {
        self.entries.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub anneal_steps: u64,
}

impl EpsilonSchedule {
    pub fn at(&self, step: u64) -> f64 {
        if self.anneal_steps == 0 || step >= self.anneal_steps {
            return self.end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        (self.start + frac * (self.end - self.start)).max(self.end)
    }
}

/// Scales `grad` so its Euclidean norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

fn augmented(adjacency: &Adjacency, actions: usize) -> Result<FactorGraph> {
    FactorGraph::build(adjacency.augment_identity(), actions)
}

fn by_agent(per_step: Vec<Vec<GruCache>>, n: usize) -> Vec<Vec<GruCache>> {
    let mut out: Vec<Vec<GruCache>> = (0..n).map(|_| Vec::with_capacity(per_step.len())).collect();
    for step in per_step {
        for (i, c) in step.into_iter().enumerate() {
            out[i].push(c);
        }
    }
    out
}

/// Networks and hyperparameters shared by the value losses.
pub struct ValueModel<'a> {
    pub qnet: &'a QNetwork,
    pub vnet: &'a VNetwork,
    pub maxplus: &'a MaxPlusConfig,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct ValueLosses {
    pub q_loss: f64,
    pub v_loss: f64,
    pub q_grad: Vec<f64>,
    pub v_grad: Vec<f64>,
}

/// Mean squared TD errors of `Q_tot` and `V_tot` over every step of the batch,
/// with gradients for the online Q parameters (encoder included) and the V heads.
/// V consumes the encoder states as constants. Rewards are multiplied by `reward_scale`.
#[allow(clippy::too_many_arguments)]
pub fn value_losses(
    model: &ValueModel,
    batch: &[&Episode],
    q_params: &[f64],
    q_target: &[f64],
    v_params: &[f64],
    v_target: &[f64],
    reward_scale: f64,
) -> Result<ValueLosses> {
    let count: usize = batch.iter().map(|e| e.len()).sum();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let (qnet, vnet) = (model.qnet, model.vnet);
    let n = qnet.spec().n_agents;
    let actions = qnet.spec().actions;
    let hs = qnet.spec().rnn_hidden;
    let inv = 1.0 / count as f64;
    let mut out = ValueLosses {
        q_loss: 0.0,
        v_loss: 0.0,
        q_grad: vec![0.0; q_params.len()],
        v_grad: vec![0.0; v_params.len()],
    };

    for ep in batch {
        let t_len = ep.len();
        let obs = ep.observations();
        let acts = ep.actions();
        let online = qnet.encoder.encode_episode(q_params, &obs, &acts)?;
        let target = qnet.encoder.encode_episode(q_target, &obs, &acts)?;
        let graphs: Vec<FactorGraph> = ep.steps.iter().map(|s| augmented(&s.adjacency, actions)).collect::<Result<_>>()?;
        let mut d_hidden = vec![vec![vec![0.0; hs]; n]; t_len];

        for t in 0..t_len {
            let step = &ep.steps[t];
            let g = &graphs[t];
            let h = hidden_of(&online[t]);
            let r = step.reward * reward_scale;

            let (mut y_q, mut y_v) = (r, r);
            if !step.done && t + 1 < t_len {
                let h_next = hidden_of(&target[t + 1]);
                let g_next = &graphs[t + 1];
                let tables = qnet.dense_tables(q_target, g_next, &h_next)?;
                y_q += model.gamma * run_maxplus(g_next, &tables, model.maxplus)?.value;
                y_v += model.gamma * vnet.v_tot(v_target, g_next, &h_next)?.0;
            }

            let mut q = 0.0;
            let mut factors = Vec::with_capacity(g.n_factors());
            for j in 0..g.n_factors() {
                let (table, cache) = qnet.local_q(q_params, j, g, &h)?;
                let sub: Vec<usize> = table.agents.iter().map(|&i| step.actions[i]).collect();
                q += table.value(&sub)?;
                factors.push((table, cache, sub));
            }
            let err = q - y_q;
            out.q_loss += err * err * inv;
            for (table, cache, sub) in &factors {
                qnet.backward_factor(q_params, table, cache, sub, 2.0 * err * inv, &mut out.q_grad, &mut d_hidden[t])?;
            }

            let mut v = 0.0;
            let mut v_caches = Vec::with_capacity(g.n_factors());
            for agents in g.factors() {
                let (vj, cache) = vnet.v_factor(v_params, agents, &h)?;
                v += vj;
                v_caches.push((agents.len(), cache));
            }
            let verr = v - y_v;
            out.v_loss += verr * verr * inv;
            for (order, cache) in &v_caches {
                vnet.backward_factor(v_params, *order, cache, 2.0 * verr * inv, &mut out.v_grad)?;
            }
        }

        let per_agent = by_agent(online, n);
        for (i, caches) in per_agent.iter().enumerate() {
            let upstream: Vec<Vec<f64>> = d_hidden.iter().map(|d| d[i].clone()).collect();
            qnet.encoder.gru.bptt(q_params, caches, &upstream, &mut out.q_grad)?;
        }
    }
    Ok(out)
}

pub fn td_loss(
    model: &ValueModel,
    batch: &[&Episode],
    q_params: &[f64],
    q_target: &[f64],
    reward_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let v_len = model.vnet.layout().len();
    let zeros = vec![0.0; v_len];
    let out = value_losses(model, batch, q_params, q_target, &zeros, &zeros, reward_scale)?;
    Ok((out.q_loss, out.q_grad))
}

pub fn v_td_loss(
    model: &ValueModel,
    batch: &[&Episode],
    q_params: &[f64],
    v_params: &[f64],
    v_target: &[f64],
    reward_scale: f64,
) -> Result<(f64, Vec<f64>)> {
    let out = value_losses(model, batch, q_params, q_params, v_params, v_target, reward_scale)?;
    Ok((out.v_loss, out.v_grad))
}

/// `Â_t = Σ_{l ≥ 0} (γλ)^l δ_{t+l}` with `δ_t = Q_t - V_t`.
pub fn gae_advantages(q: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
    if q.len() != v.len() {
        return Err(Error::shape(q.len(), v.len()));
    }
    let mut adv = vec![0.0; q.len()];
    let mut acc = 0.0;
    for t in (0..q.len()).rev() {
        acc = (q[t] - v[t]) + gamma * lambda * acc;
        adv[t] = acc;
    }
    Ok(adv)
}

/// Per-step advantages for the graph policy: one per sampled factor column, or
/// a single one for the summed value.
pub fn episode_advantages(
    model: &ValueModel,
    episode: &Episode,
    n_factors: usize,
    q_params: &[f64],
    v_params: &[f64],
    lambda: f64,
    mode: AdvantageMode,
) -> Result<Vec<Vec<f64>>> {
    let (qnet, vnet) = (model.qnet, model.vnet);
    let actions = qnet.spec().actions;
    let caches = qnet.encoder.encode_episode(q_params, &episode.observations(), &episode.actions())?;
    let width = match mode {
        AdvantageMode::PerFactor => n_factors,
        AdvantageMode::Global => 1,
    };
    let mut q_seq = vec![Vec::with_capacity(episode.len()); width];
    let mut v_seq = vec![Vec::with_capacity(episode.len()); width];
    for (t, step) in episode.steps.iter().enumerate() {
        let g = augmented(&step.adjacency, actions)?;
        let h = hidden_of(&caches[t]);
        match mode {
            AdvantageMode::PerFactor => {
                for j in 0..n_factors {
                    let (table, _) = qnet.local_q(q_params, j, &g, &h)?;
                    q_seq[j].push(table.value_at(&step.actions)?);
                    v_seq[j].push(vnet.v_factor(v_params, g.factor_agents(j), &h)?.0);
                }
            }
            AdvantageMode::Global => {
                q_seq[0].push(qnet.q_tot(q_params, &g, &h, &step.actions)?);
                v_seq[0].push(vnet.v_tot(v_params, &g, &h)?.0);
            }
        }
    }
    let per_slot: Vec<Vec<f64>> = (0..width)
        .map(|j| gae_advantages(&q_seq[j], &v_seq[j], model.gamma, lambda))
        .collect::<Result<_>>()?;
    Ok((0..episode.len()).map(|t| per_slot.iter().map(|a| a[t]).collect()).collect())
}

/// Clipped surrogate for one step. Returns the objective
/// `Σ_j min(r_j Â_j, clip(r_j) Â_j)` and its gradient with respect to `ln p_new`.
pub fn clipped_pg_terms(
    new: &EdgeProbMatrix,
    old: &EdgeProbMatrix,
    sample: &GraphSample,
    advantages: &[f64],
    clip: f64,
    mode: AdvantageMode,
) -> Result<(f64, Vec<f64>)> {
    let (n, m) = (new.n(), new.m());
    let mut d_logp = vec![0.0; n * m];
    let mut log_ratios = Vec::with_capacity(m);
    for j in 0..m {
        log_ratios.push(log_importance_ratio(&new.column(j), &old.column(j), &sample.column_counts(j))?);
    }
    let surrogate = |ratio: f64, adv: f64| {
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
        (unclipped.min(clipped), unclipped <= clipped)
    };
    match mode {
        AdvantageMode::PerFactor => {
            if advantages.len() != m {
                return Err(Error::shape(m, advantages.len()));
            }
            let mut obj = 0.0;
            for j in 0..m {
                let ratio = log_ratios[j].exp();
                let (value, active) = surrogate(ratio, advantages[j]);
                obj += value;
                if active {
                    for i in 0..n {
                        d_logp[i * m + j] = ratio * advantages[j] * sample.count(i, j) as f64;
                    }
                }
            }
            Ok((obj, d_logp))
        }
        AdvantageMode::Global => {
            if advantages.len() != 1 {
                return Err(Error::shape(1, advantages.len()));
            }
            let ratio = log_ratios.iter().sum::<f64>().exp();
            let (value, active) = surrogate(ratio, advantages[0]);
            if active {
                for i in 0..n {
                    for j in 0..m {
                        d_logp[i * m + j] = ratio * advantages[0] * sample.count(i, j) as f64;
                    }
                }
            }
            Ok((value, d_logp))
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphLoss {
    /// `L_PG - λ_H · mean entropy`
    pub loss: f64,
    pub pg_loss: f64,
    /// Mean summed column entropy per step.
    pub entropy: f64,
    pub grad: Vec<f64>,
}

/// Graph-policy objective over recorded episodes. `advantages[e][t]` holds the
/// step advantages for episode `e`.
pub fn graph_policy_loss(
    policy: &GraphPolicy,
    params: &[f64],
    batch: &[&GraphEpisode],
    advantages: &[Vec<Vec<f64>>],
    clip: f64,
    entropy_coef: f64,
    mode: AdvantageMode,
) -> Result<GraphLoss> {
    if advantages.len() != batch.len() {
        return Err(Error::shape(batch.len(), advantages.len()));
    }
    let count: usize = batch.iter().map(|e| e.policy.len()).sum();
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / count as f64;
    let mut grad = vec![0.0; params.len()];
    let (mut objective, mut entropy) = (0.0, 0.0);
    for (ep, adv) in batch.iter().zip(advantages) {
        if ep.policy.len() != ep.episode.len() || adv.len() != ep.policy.len() {
            return Err(Error::shape(ep.episode.len(), ep.policy.len().min(adv.len())));
        }
        for (t, rec) in ep.policy.iter().enumerate() {
            let cache = policy.forward(params, &rec.hidden, &ep.episode.steps[t].state)?;
            let (obj, d_obj) = clipped_pg_terms(&cache.probs, &rec.old_probs, &rec.sample, &adv[t], clip, mode)?;
            objective += obj;
            entropy += policy_entropy(&cache.probs);
            let d_ent = entropy_logp_grad(&cache.probs, 1.0);
            let d_logp: Vec<f64> = d_obj.iter().zip(&d_ent).map(|(a, e)| -(a + entropy_coef * e) * inv).collect();
            policy.backward_logp(params, &cache, &d_logp, &mut grad)?;
        }
    }
    let pg_loss = -objective * inv;
    let entropy = entropy * inv;
    Ok(GraphLoss { loss: pg_loss - entropy_coef * entropy, pg_loss, entropy, grad })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
struct Mean {
    sum: f64,
    count: u64,
}

impl Mean {
    fn push(&mut self, x: f64) {
        self.sum += x;
        self.count += 1;
    }

    fn take(&mut self) -> f64 {
        let v = if self.count == 0 { f64::NAN } else { self.sum / self.count as f64 };
        *self = Mean::default();
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return_mean: f64,
    pub eval_return_median: f64,
    pub td_loss: f64,
    pub pg_loss: f64,
    pub entropy: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEpisode {
    pub total_reward: f64,
    pub actions: Vec<Vec<usize>>,
    pub structures: Vec<Adjacency>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EvalEpisode>,
}

impl EvalReport {
    pub fn returns(&self) -> Vec<f64> {
        self.episodes.iter().map(|e| e.total_reward).collect()
    }

    pub fn median(&self) -> f64 {
        median(&self.returns())
    }

    pub fn mean(&self) -> f64 {
        let r = self.returns();
        if r.is_empty() {
            f64::NAN
        } else {
            r.iter().sum::<f64>() / r.len() as f64
        }
    }
}

/// Median of a sample; the mean of the two middle values for even sizes.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    }
}

/// Mutable training state; everything a checkpoint must restore.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub q_params: Vec<f64>,
    pub q_target: Vec<f64>,
    pub v_params: Vec<f64>,
    pub v_target: Vec<f64>,
    pub g_params: Vec<f64>,
    q_opt: Adam,
    v_opt: Adam,
    g_opt: Adam,
    replay: ReplayBuffer,
    graph_buffer: GraphPolicyBuffer,
    pub env_steps: u64,
    pub episodes: u64,
    pub q_updates: u64,
    pub graph_updates: u64,
    pub evals: u64,
    next_eval: u64,
    rng: ChaCha8Rng,
    returns: Mean,
    td: Mean,
    pg: Mean,
    entropy: Mean,
}

/// How structures are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StructureChoice {
    Sample,
    Greedy,
}

pub struct Trainer {
    config: RunConfig,
    qnet: QNetwork,
    vnet: VNetwork,
    policy: GraphPolicy,
    preset: Adjacency,
    pub state: TrainerState,
}

struct Rollout {
    episode: Episode,
    policy: Vec<PolicyStep>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let (qnet, vnet, policy, preset) = Self::networks(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut q_params = vec![0.0; qnet.layout().len()];
        qnet.init(&mut q_params, &mut rng);
        let mut v_params = vec![0.0; vnet.layout().len()];
        vnet.init(&mut v_params, &mut rng);
        let mut g_params = vec![0.0; policy.layout().len()];
        policy.init(&mut g_params, &mut rng);
        let t = &config.train;
        let state = TrainerState {
            q_target: q_params.clone(),
            v_target: v_params.clone(),
            q_opt: Adam::new(q_params.len(), t.lr_q),
            v_opt: Adam::new(v_params.len(), t.lr_q),
            g_opt: Adam::new(g_params.len(), t.lr_graph),
            q_params,
            v_params,
            g_params,
            replay: ReplayBuffer::new(t.replay_capacity, t.normalize_rewards),
            graph_buffer: GraphPolicyBuffer::new(t.graph_buffer_capacity),
            env_steps: 0,
            episodes: 0,
            q_updates: 0,
            graph_updates: 0,
            evals: 0,
            next_eval: t.eval_interval,
            rng,
            returns: Mean::default(),
            td: Mean::default(),
            pg: Mean::default(),
            entropy: Mean::default(),
        };
        Ok(Trainer { config, qnet, vnet, policy, preset, state })
    }

    /// Rebuilds a trainer around restored state; shapes are checked against the config.
    pub fn from_state(config: RunConfig, state: TrainerState) -> Result<Self> {
        config.validate()?;
        let (qnet, vnet, policy, preset) = Self::networks(&config)?;
        let check = |what: &str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!("{what} has {got} parameters, config implies {expected}")))
            }
        };
        check("q network", qnet.layout().len(), state.q_params.len())?;
        check("q target", qnet.layout().len(), state.q_target.len())?;
        check("v network", vnet.layout().len(), state.v_params.len())?;
        check("v target", vnet.layout().len(), state.v_target.len())?;
        check("graph policy", policy.layout().len(), state.g_params.len())?;
        Ok(Trainer { config, qnet, vnet, policy, preset, state })
    }

    fn networks(config: &RunConfig) -> Result<(QNetwork, VNetwork, GraphPolicy, Adjacency)> {
        let env = Env::from_config(&config.env, config.seed)?;
        let n = env.n_agents();
        let net = &config.network;
        let qnet = QNetwork::new(QNetSpec {
            n_agents: n,
            obs_dim: env.obs_dim(),
            actions: env.n_actions(),
            rnn_hidden: net.rnn_hidden,
            mlp_hidden: net.mlp_hidden,
            d_max: config.graph.d_max,
            ranks: net.ranks.clone(),
            agent_id: net.agent_id,
        })?;
        let vnet = VNetwork::new(net.rnn_hidden, net.mlp_hidden, config.graph.d_max);
        let policy = GraphPolicy::new(GraphPolicySpec {
            n_agents: n,
            n_factors: config.graph.factors.max(1),
            rnn_hidden: net.rnn_hidden,
            state_dim: env.state_dim(),
            hyper_hidden: net.hyper_hidden,
        })?;
        let preset = preset_topology(config.graph.preset, n)?;
        Ok((qnet, vnet, policy, preset))
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn qnet(&self) -> &QNetwork {
        &self.qnet
    }

    pub fn vnet(&self) -> &VNetwork {
        &self.vnet
    }

    pub fn policy(&self) -> &GraphPolicy {
        &self.policy
    }

    pub fn env_steps(&self) -> u64 {
        self.state.env_steps
    }

    pub fn epsilon(&self) -> f64 {
        let t = &self.config.train;
        EpsilonSchedule { start: t.epsilon_start, end: t.epsilon_end, anneal_steps: t.epsilon_anneal_steps }
            .at(self.state.env_steps)
    }

    fn value_model(&self) -> ValueModel<'_> {
        ValueModel { qnet: &self.qnet, vnet: &self.vnet, maxplus: &self.config.maxplus, gamma: self.config.train.gamma }
    }

    /// Edge probabilities for the current step, or `None` for a fixed topology.
    fn edge_probs(&self, hidden: &[Vec<f64>], state: &[f64]) -> Result<Option<EdgeProbMatrix>> {
        match self.config.graph.mode {
            GraphMode::Fixed => Ok(None),
            GraphMode::Random => Ok(Some(EdgeProbMatrix::uniform(hidden.len(), self.config.graph.factors)?)),
            GraphMode::Learned => Ok(Some(self.policy.forward(&self.state.g_params, hidden, state)?.probs)),
        }
    }

    fn rollout(&self, env: &mut Env, rng: &mut ChaCha8Rng, epsilon: f64, choice: StructureChoice) -> Result<Rollout> {
        let n = env.n_agents();
        let actions_n = env.n_actions();
        let d_max = self.config.graph.d_max;
        let p = &self.state.q_params;
        let mut h = self.qnet.encoder.zero_state();
        let mut prev: Vec<Option<usize>> = vec![None; n];
        let mut steps = Vec::new();
        let mut policy_steps = Vec::new();
        for _ in 0..env.episode_limit() {
            let obs = env.observations()?;
            let state = env.state();
            let caches = self.qnet.encoder.encode_histories(p, &obs, &prev, &h)?;
            h = hidden_of(&caches);

            let adjacency = match self.edge_probs(&h, &state)? {
                None => self.preset.clone(),
                Some(probs) => {
                    let greedy = choice == StructureChoice::Greedy && self.config.graph.mode == GraphMode::Learned;
                    let sample = if greedy { mode_structure(&probs, d_max)? } else { sample_structure(&probs, d_max, rng)? };
                    let adjacency = sample.adjacency().clone();
                    if choice == StructureChoice::Sample && self.config.graph.mode == GraphMode::Learned {
                        policy_steps.push(PolicyStep { sample, hidden: h.clone(), old_probs: probs });
                    }
                    adjacency
                }
            };

            let explore: Vec<bool> = (0..n).map(|_| epsilon > 0.0 && rng.gen::<f64>() < epsilon).collect();
            let greedy_actions = if explore.iter().all(|&e| e) {
                None
            } else {
                let g = augmented(&adjacency, actions_n)?;
                let tables = self.qnet.dense_tables(p, &g, &h)?;
                Some(run_maxplus(&g, &tables, &self.config.maxplus)?.actions)
            };
            let actions: Vec<usize> = (0..n)
                .map(|i| match (&greedy_actions, explore[i]) {
                    (Some(a), false) => a[i],
                    _ => rng.gen_range(0..actions_n),
                })
                .collect();

            let out = env.step(&actions)?;
            prev = actions.iter().map(|&a| Some(a)).collect();
            steps.push(Transition { obs, state, adjacency, actions, reward: out.reward, done: out.done });
            if out.done {
                break;
            }
        }
        Ok(Rollout { episode: Episode { steps }, policy: policy_steps })
    }

    /// Collects one episode and performs the updates it triggers. Returns a
    /// metrics row when an evaluation point was crossed.
    pub fn train_iteration(&mut self) -> Result<Option<MetricsRow>> {
        let epsilon = self.epsilon();
        let mut rng = self.state.rng.clone();
        let seed: u64 = rng.gen();
        let mut env = Env::from_config(&self.config.env, seed)?;
        let rollout = self.rollout(&mut env, &mut rng, epsilon, StructureChoice::Sample)?;
        self.state.rng = rng;

        let ep_len = rollout.episode.len() as u64;
        self.state.env_steps += ep_len;
        self.state.episodes += 1;
        self.state.returns.push(rollout.episode.total_reward());
        if self.config.graph.mode == GraphMode::Learned {
            self.state.graph_buffer.push(GraphEpisode { episode: rollout.episode.clone(), policy: rollout.policy });
        }
        self.state.replay.push(rollout.episode);

        if self.state.replay.len() >= self.config.train.batch_size {
            self.value_update()?;
            if self.config.graph.mode == GraphMode::Learned
                && self.state.q_updates.is_multiple_of(self.config.train.graph_update_interval)
                && !self.state.graph_buffer.is_empty()
            {
                self.graph_update()?;
            }
        }

        if self.state.env_steps >= self.state.next_eval {
            let interval = self.config.train.eval_interval;
            self.state.next_eval = (self.state.env_steps / interval + 1) * interval;
            let report = self.evaluate(self.config.train.eval_episodes, self.state.evals)?;
            self.state.evals += 1;
            let s = &mut self.state;
            return Ok(Some(MetricsRow {
                step: s.env_steps,
                episode_return_mean: s.returns.take(),
                eval_return_median: report.median(),
                td_loss: s.td.take(),
                pg_loss: s.pg.take(),
                entropy: s.entropy.take(),
                epsilon: self.epsilon(),
            }));
        }
        Ok(None)
    }

    fn value_update(&mut self) -> Result<()> {
        let t = &self.config.train;
        let mut rng = self.state.rng.clone();
        let batch = self.state.replay.sample(t.batch_size, &mut rng)?;
        let scale = self.state.replay.reward_scale();
        let mut out = value_losses(
            &self.value_model(),
            &batch,
            &self.state.q_params,
            &self.state.q_target,
            &self.state.v_params,
            &self.state.v_target,
            scale,
        )?;
        self.state.rng = rng;
        clip_grad_norm(&mut out.q_grad, t.grad_clip);
        clip_grad_norm(&mut out.v_grad, t.grad_clip);
        let s = &mut self.state;
        s.q_opt.update(&mut s.q_params, &out.q_grad)?;
        s.v_opt.update(&mut s.v_params, &out.v_grad)?;
        s.td.push(out.q_loss);
        s.q_updates += 1;
        if s.q_updates.is_multiple_of(t.target_update_interval) {
            s.q_target.clone_from(&s.q_params);
            s.v_target.clone_from(&s.v_params);
        }
        Ok(())
    }

    fn graph_update(&mut self) -> Result<()> {
        let t = &self.config.train;
        let model = self.value_model();
        let batch: Vec<&GraphEpisode> = self.state.graph_buffer.iter().collect();
        let advantages: Vec<Vec<Vec<f64>>> = batch
            .iter()
            .map(|e| {
                episode_advantages(
                    &model,
                    &e.episode,
                    self.config.graph.factors,
                    &self.state.q_params,
                    &self.state.v_params,
                    t.gae_lambda,
                    t.advantage,
                )
            })
            .collect::<Result<_>>()?;
        let mut loss = graph_policy_loss(
            &self.policy,
            &self.state.g_params,
            &batch,
            &advantages,
            t.clip,
            t.entropy_coef,
            t.advantage,
        )?;
        clip_grad_norm(&mut loss.grad, t.grad_clip);
        let s = &mut self.state;
        s.g_opt.update(&mut s.g_params, &loss.grad)?;
        s.pg.push(loss.pg_loss);
        s.entropy.push(loss.entropy);
        s.graph_updates += 1;
        Ok(())
    }

    /// Greedy rollouts with an RNG derived from the run seed and `eval_index`,
    /// so evaluation never perturbs the training stream.
    pub fn evaluate(&self, episodes: usize, eval_index: u64) -> Result<EvalReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(eval_index.wrapping_add(1));
        let mut out = Vec::with_capacity(episodes);
        for _ in 0..episodes {
            let mut env = Env::from_config(&self.config.env, rng.gen())?;
            let r = self.rollout(&mut env, &mut rng, 0.0, StructureChoice::Greedy)?;
            out.push(EvalEpisode {
                total_reward: r.episode.total_reward(),
                actions: r.episode.steps.iter().map(|s| s.actions.clone()).collect(),
                structures: r.episode.steps.into_iter().map(|s| s.adjacency).collect(),
            });
        }
        Ok(EvalReport { episodes: out })
    }

    /// Returns of uniformly random joint actions, for baselines.
    pub fn random_policy_returns(config: &RunConfig, episodes: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..episodes)
            .map(|_| {
                let mut env = Env::from_config(&config.env, rng.gen())?;
                let (n, a) = (env.n_agents(), env.n_actions());
                let mut total = 0.0;
                for _ in 0..env.episode_limit() {
                    let acts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..a)).collect();
                    let out = env.step(&acts)?;
                    total += out.reward;
                    if out.done {
                        break;
                    }
                }
                Ok(total)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(rewards: &[f64]) -> Episode {
        Episode {
            steps: rewards
                .iter()
                .map(|&r| Transition {
                    obs: vec![vec![1.0]],
                    state: vec![1.0],
                    adjacency: Adjacency::empty(1).unwrap(),
                    actions: vec![0],
                    reward: r,
                    done: false,
                })
                .collect(),
        }
    }

    #[test]
    fn epsilon_schedule_endpoints() {
        let s = EpsilonSchedule { start: 1.0, end: 0.05, anneal_steps: 50_000 };
        assert_eq!(s.at(0), 1.0);
        assert!((s.at(25_000) - 0.525).abs() < 1e-12);
        assert_eq!(s.at(50_000), 0.05);
        assert_eq!(s.at(90_000), 0.05);
    }

    #[test]
    fn gae_examples() {
        assert_eq!(gae_advantages(&[1.0, 1.0], &[0.0, 0.0], 0.5, 1.0).unwrap(), vec![1.5, 1.0]);
        assert_eq!(gae_advantages(&[3.0, 2.0], &[1.0, 1.0], 0.9, 0.0).unwrap(), vec![2.0, 1.0]);
        assert_eq!(gae_advantages(&[0.5; 4], &[0.5; 4], 0.9, 0.9).unwrap(), vec![0.0; 4]);
        assert!(gae_advantages(&[1.0], &[], 0.9, 0.9).is_err());
    }

    #[test]
    fn replay_is_fifo() {
        let mut b = ReplayBuffer::new(3, false);
        for k in 0..4 {
            b.push(ep(&[k as f64]));
        }
        assert_eq!(b.len(), 3);
        let firsts: Vec<f64> = b.iter().map(|e| e.steps[0].reward).collect();
        assert_eq!(firsts, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn reward_scale_uses_return_std() {
        let mut b = ReplayBuffer::new(10, true);
        b.push(ep(&[1.0]));
        assert_eq!(b.reward_scale(), 1.0);
        b.push(ep(&[3.0]));
        assert!((b.reward_scale() - 1.0 / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
