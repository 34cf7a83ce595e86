//! Max-plus message passing for greedy joint-action selection.
//!
//! Messages run on the bipartite factor graph with a synchronous flooding
//! schedule. Every message is mean-centred after it is computed. Loopy graphs
//! additionally damp each message against its previous value; forests are run
//! undamped and decoded by conditional back-tracking, which makes them exact
//! once messages have propagated across the diameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::FactorGraph;
use crate::tensor::DenseTensor;

/// Joint action spaces larger than this are refused by the exhaustive search.
pub const MAX_JOINT_ACTIONS: u128 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message(Vec<f64>);

impl Message {
    pub fn zeros(actions: usize) -> Self {
        Message(vec![0.0; actions])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn centred(mut values: Vec<f64>) -> Self {
        center(&mut values);
        Message(values)
    }
}

fn center(values: &mut [f64]) {
    if values.is_empty() {
        return;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= mean);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaxPlusConfig {
    pub max_iterations: usize,
    pub damping: f64,
    pub tolerance: f64,
    pub anytime: bool,
}

impl Default for MaxPlusConfig {
    fn default() -> Self {
        MaxPlusConfig { max_iterations: 30, damping: 0.5, tolerance: 1e-6, anytime: true }
    }
}

impl MaxPlusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max-plus iteration budget must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(Error::InvalidArgument(format!("damping must lie in [0, 1), got {}", self.damping)));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::InvalidArgument("tolerance must be non-negative".into()));
        }
        Ok(())
    }
}

/// Variable-to-factor message: sum of the other factors' messages, centred.
pub fn msg_var_to_factor(actions: usize, incoming: &[&[f64]]) -> Result<Message> {
    let mut out = vec![0.0; actions];
    for msg in incoming {
        if msg.len() != actions {
            return Err(Error::shape(actions, msg.len()));
        }
        out.iter_mut().zip(msg.iter()).for_each(|(o, m)| *o += m);
    }
    Ok(Message::centred(out))
}

/// Factor-to-variable message towards the variable at position `target` of the
/// factor. `incoming[k]` is the message from the variable at position `k`;
/// the entry at `target` is ignored.
pub fn msg_factor_to_var(table: &DenseTensor, target: usize, incoming: &[&[f64]]) -> Result<Message> {
    let order = table.modes();
    let actions = table.actions();
    if incoming.len() != order {
        return Err(Error::shape(order, incoming.len()));
    }
    if target >= order {
        return Err(Error::OutOfRange { index: target, limit: order });
    }
    for (k, msg) in incoming.iter().enumerate() {
        if k != target && msg.len() != actions {
            return Err(Error::shape(actions, msg.len()));
        }
    }
    let mut out = vec![f64::NEG_INFINITY; actions];
    factor_max_into(table, target, incoming, &mut out);
    Ok(Message::centred(out))
}

fn factor_max_into(table: &DenseTensor, target: usize, incoming: &[&[f64]], out: &mut [f64]) {
    let order = table.modes();
    let actions = table.actions();
    out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
    let mut digits = vec![0usize; order];
    for &value in table.values() {
        let mut total = value;
        for (k, &a) in digits.iter().enumerate() {
            if k != target {
                total += incoming[k][a];
            }
        }
        let slot = &mut out[digits[target]];
        if total > *slot {
            *slot = total;
        }
        // advance the row-major odometer (last mode fastest)
        for d in (0..order).rev() {
            digits[d] += 1;
            if digits[d] < actions {
                break;
            }
            digits[d] = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPlusOutcome {
    /// Per-agent `b_i(a) = Σ_k μ_{Q_k→v_i}(a)` after the last iteration.
    pub beliefs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    /// Exact global value `Σ_j Q_j` of `actions`.
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Value of the reported action after each iteration.
    pub value_trace: Vec<f64>,
}

fn check_tables(graph: &FactorGraph, tables: &[DenseTensor]) -> Result<()> {
    if tables.len() != graph.n_factors() {
        return Err(Error::shape(graph.n_factors(), tables.len()));
    }
    for (j, t) in tables.iter().enumerate() {
        let order = graph.factor_agents(j).len();
        if t.modes() != order {
            return Err(Error::InvalidArgument(format!(
                "table {j} has {} modes but factor order is {order}",
                t.modes()
            )));
        }
        if t.actions() != graph.actions() {
            return Err(Error::shape(graph.actions(), t.actions()));
        }
    }
    Ok(())
}

/// `Σ_j Q_j(u^j)` for a full joint action.
pub fn joint_value(graph: &FactorGraph, tables: &[DenseTensor], joint: &[usize]) -> f64 {
    graph
        .factors()
        .iter()
        .zip(tables)
        .map(|(agents, t)| t.lookup_unchecked(agents.iter().map(|&i| joint[i])))
        .sum()
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

struct Edges {
    /// first edge id of each factor; edges of factor j are `start[j]..start[j] + order`
    start: Vec<usize>,
    /// edge ids incident to each agent
    by_agent: Vec<Vec<usize>>,
    agent_of: Vec<usize>,
    factor_of: Vec<usize>,
}

impl Edges {
    fn new(graph: &FactorGraph) -> Self {
        let mut start = Vec::with_capacity(graph.n_factors());
        let mut by_agent = vec![Vec::new(); graph.n_agents()];
        let mut agent_of = Vec::new();
        let mut factor_of = Vec::new();
        for (j, agents) in graph.factors().iter().enumerate() {
            start.push(agent_of.len());
            for &i in agents {
                by_agent[i].push(agent_of.len());
                agent_of.push(i);
                factor_of.push(j);
            }
        }
        Edges { start, by_agent, agent_of, factor_of }
    }

    fn len(&self) -> usize {
        self.agent_of.len()
    }
}

pub fn run_maxplus(graph: &FactorGraph, tables: &[DenseTensor], config: &MaxPlusConfig) -> Result<MaxPlusOutcome> {
    config.validate()?;
    if graph.n_factors() == 0 {
        return Err(Error::InvalidArgument("max-plus needs at least one factor".into()));
    }
    check_tables(graph, tables)?;

    let actions = graph.actions();
    let n = graph.n_agents();
    let edges = Edges::new(graph);
    let acyclic = graph.is_acyclic();
    let damping = if acyclic { 0.0 } else { config.damping };

    let mut var_to_factor = vec![vec![0.0; actions]; edges.len()];
    let mut factor_to_var = vec![vec![0.0; actions]; edges.len()];
    let mut scratch = vec![0.0; actions];

    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut last: Option<(Vec<usize>, f64)> = None;
    let mut value_trace = Vec::with_capacity(config.max_iterations);
    let mut beliefs = vec![vec![0.0; actions]; n];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let mut delta: f64 = 0.0;

        // factor -> variable, all from the previous variable -> factor messages
        let mut next_f2v = factor_to_var.clone();
        for (j, agents) in graph.factors().iter().enumerate() {
            let base = edges.start[j];
            let incoming: Vec<&[f64]> = (0..agents.len()).map(|p| var_to_factor[base + p].as_slice()).collect();
            for p in 0..agents.len() {
                factor_max_into(&tables[j], p, &incoming, &mut scratch);
                center(&mut scratch);
                let slot = &mut next_f2v[base + p];
                for (s, &c) in slot.iter_mut().zip(scratch.iter()) {
                    let v = (1.0 - damping) * c + damping * *s;
                    delta = delta.max((v - *s).abs());
                    *s = v;
                }
            }
        }
        factor_to_var = next_f2v;

        // variable -> factor from the fresh factor -> variable messages
        for (i, belief) in beliefs.iter_mut().enumerate() {
            belief.iter_mut().for_each(|b| *b = 0.0);
            for &e in &edges.by_agent[i] {
                belief.iter_mut().zip(&factor_to_var[e]).for_each(|(b, m)| *b += m);
            }
            for &e in &edges.by_agent[i] {
                scratch.iter_mut().zip(belief.iter()).zip(&factor_to_var[e]).for_each(|((s, b), m)| *s = b - m);
                center(&mut scratch);
                let slot = &mut var_to_factor[e];
                for (s, &c) in slot.iter_mut().zip(scratch.iter()) {
                    let v = (1.0 - damping) * c + damping * *s;
                    delta = delta.max((v - *s).abs());
                    *s = v;
                }
            }
        }

        let candidate = if acyclic {
            tree_decode(graph, tables, &edges, &beliefs, &var_to_factor)
        } else {
            beliefs.iter().map(|b| argmax(b)).collect()
        };
        let value = joint_value(graph, tables, &candidate);
        if best.as_ref().is_none_or(|(_, v)| value > *v) {
            best = Some((candidate.clone(), value));
        }
        last = Some((candidate, value));
        let reported = if config.anytime { best.as_ref() } else { last.as_ref() };
        value_trace.push(reported.map(|(_, v)| *v).unwrap_or(f64::NEG_INFINITY));

        if delta <= config.tolerance {
            converged = true;
            break;
        }
    }

    let (actions_out, value) = if config.anytime { best } else { last }.expect("at least one iteration ran");
    Ok(MaxPlusOutcome { beliefs, actions: actions_out, value, iterations, converged, value_trace })
}

/// Exact decoding on a forest: fix each component's root by its belief, then
/// walk outwards choosing every factor's remaining agents jointly given the
/// already fixed neighbour and the children's incoming messages.
fn tree_decode(
    graph: &FactorGraph,
    tables: &[DenseTensor],
    edges: &Edges,
    beliefs: &[Vec<f64>],
    var_to_factor: &[Vec<f64>],
) -> Vec<usize> {
    let n = graph.n_agents();
    let actions = graph.actions();
    let mut assigned: Vec<Option<usize>> = vec![None; n];
    let mut factor_done = vec![false; graph.n_factors()];
    for root in 0..n {
        if assigned[root].is_some() {
            continue;
        }
        assigned[root] = Some(argmax(&beliefs[root]));
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &e in &edges.by_agent[v] {
                let j = edges.factor_of[e];
                if factor_done[j] {
                    continue;
                }
                factor_done[j] = true;
                let agents = graph.factor_agents(j);
                let base = edges.start[j];
                let free: Vec<usize> = (0..agents.len()).filter(|&p| assigned[agents[p]].is_none()).collect();
                if free.is_empty() {
                    continue;
                }
                let mut joint: Vec<usize> = agents.iter().map(|&i| assigned[i].unwrap_or(0)).collect();
                let mut best_sub = 0usize;
                let mut best_val = f64::NEG_INFINITY;
                let combos = actions.pow(free.len() as u32);
                for code in 0..combos {
                    let mut rest = code;
                    let mut val = 0.0;
                    for &p in free.iter().rev() {
                        joint[p] = rest % actions;
                        rest /= actions;
                        val += var_to_factor[base + p][joint[p]];
                    }
                    val += tables[j].lookup_unchecked(joint.iter().copied());
                    if val > best_val {
                        best_val = val;
                        best_sub = code;
                    }
                }
                let mut rest = best_sub;
                for &p in free.iter().rev() {
                    joint[p] = rest % actions;
                    rest /= actions;
                }
                for &p in &free {
                    let agent = agents[p];
                    assigned[agent] = Some(joint[p]);
                    queue.push_back(agent);
                }
            }
        }
    }
    assigned.into_iter().map(|a| a.unwrap_or(0)).collect()
}

/// Exhaustive maximiser of `Σ_j Q_j`; ties resolve to the lexicographically
/// smallest joint action.
pub fn brute_force_argmax(graph: &FactorGraph, tables: &[DenseTensor]) -> Result<(Vec<usize>, f64)> {
    check_tables(graph, tables)?;
    let n = graph.n_agents();
    let actions = graph.actions();
    let size = (actions as u128).pow(n as u32);
    if size > MAX_JOINT_ACTIONS {
        return Err(Error::Budget { size, budget: MAX_JOINT_ACTIONS });
    }
    let mut joint = vec![0usize; n];
    let mut best = (joint.clone(), joint_value(graph, tables, &joint));
    for _ in 1..size {
        for d in (0..n).rev() {
            joint[d] += 1;
            if joint[d] < actions {
                break;
            }
            joint[d] = 0;
        }
        let v = joint_value(graph, tables, &joint);
        if v > best.1 {
            best = (joint.clone(), v);
        }
    }
    Ok(best)
}
