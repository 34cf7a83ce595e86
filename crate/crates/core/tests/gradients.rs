use ddfg::config::AdvantageMode;
use ddfg::graph::{Adjacency, FactorGraph};
use ddfg::learner::{
    graph_policy_loss, td_loss, v_td_loss, Episode, GraphEpisode, PolicyStep, Transition, ValueModel,
};
use ddfg::maxplus::MaxPlusConfig;
use ddfg::nn::{finite_diff_check, sample_coords, Gru, Layout};
use ddfg::policy::{sample_structure, EdgeProbMatrix, GraphPolicy, GraphPolicySpec};
use ddfg::qnet::{QNetSpec, QNetwork, VNetwork};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;
const N: usize = 3;
const OBS: usize = 4;
const ACTIONS: usize = 3;
const HIDDEN: usize = 5;
const STATE: usize = 6;
const FACTORS: usize = 2;
const D_MAX: usize = 3;

fn spec() -> QNetSpec {
    QNetSpec {
        n_agents: N,
        obs_dim: OBS,
        actions: ACTIONS,
        rnn_hidden: HIDDEN,
        mlp_hidden: 6,
        d_max: D_MAX,
        ranks: vec![2, 3],
        agent_id: true,
    }
}

fn noise(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn episode(rng: &mut ChaCha8Rng, len: usize) -> GraphEpisode {
    let uniform = EdgeProbMatrix::uniform(N, FACTORS).unwrap();
    let mut steps = Vec::new();
    let mut policy = Vec::new();
    for t in 0..len {
        let sample = sample_structure(&uniform, D_MAX, rng).unwrap();
        let cols: Vec<Vec<f64>> = (0..FACTORS)
            .map(|_| {
                let raw: Vec<f64> = (0..N).map(|_| rng.gen_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        steps.push(Transition {
            obs: (0..N).map(|_| noise(rng, OBS, 1.0)).collect(),
            state: noise(rng, STATE, 1.0),
            adjacency: sample.adjacency().clone(),
            actions: (0..N).map(|_| rng.gen_range(0..ACTIONS)).collect(),
            reward: rng.gen_range(-2.0..2.0),
            done: t + 1 == len,
        });
        policy.push(PolicyStep {
            sample,
            hidden: (0..N).map(|_| noise(rng, HIDDEN, 1.0)).collect(),
            old_probs: EdgeProbMatrix::from_columns(&cols).unwrap(),
        });
    }
    GraphEpisode { episode: Episode { steps }, policy }
}

fn nets(rng: &mut ChaCha8Rng) -> (QNetwork, VNetwork, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let qnet = QNetwork::new(spec()).unwrap();
    let vnet = VNetwork::new(HIDDEN, 6, D_MAX);
    let mut qp = vec![0.0; qnet.layout().len()];
    qnet.init(&mut qp, rng);
    let mut qt = vec![0.0; qp.len()];
    qnet.init(&mut qt, rng);
    let mut vp = vec![0.0; vnet.layout().len()];
    vnet.init(&mut vp, rng);
    let mut vt = vec![0.0; vp.len()];
    vnet.init(&mut vt, rng);
    (qnet, vnet, qp, qt, vp, vt)
}

#[test]
fn gru_bptt_matches_finite_differences() {
    for steps in [2usize, 5] {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + steps as u64);
        let mut layout = Layout::new();
        let gru = Gru::new(&mut layout, "gru", 4, HIDDEN);
        let mut p = vec![0.0; layout.len()];
        gru.init(&mut p, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..steps).map(|_| noise(&mut rng, 4, 1.0)).collect();
        let weights: Vec<Vec<f64>> = (0..steps).map(|_| noise(&mut rng, HIDDEN, 1.0)).collect();
        let objective = |p: &[f64]| -> f64 {
            let caches = gru.unroll(p, &inputs).unwrap();
            caches.iter().zip(&weights).map(|(c, w)| c.h.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let caches = gru.unroll(&p, &inputs).unwrap();
        let mut grad = vec![0.0; p.len()];
        gru.bptt(&p, &caches, &weights, &mut grad).unwrap();
        let coords: Vec<usize> = (0..p.len()).collect();
        let err = finite_diff_check(objective, &p, &grad, &coords).unwrap();
        assert!(err <= TOL, "{steps} steps: {err:e}");
    }
}

#[test]
fn q_head_with_cp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (qnet, ..) = nets(&mut rng);
    let mut p = vec![0.0; qnet.layout().len()];
    qnet.init(&mut p, &mut rng);
    let graph = FactorGraph::build(Adjacency::from_factors(N, &[vec![0, 1, 2], vec![1, 2]]).unwrap(), ACTIONS).unwrap();
    let hidden: Vec<Vec<f64>> = (0..N).map(|_| noise(&mut rng, HIDDEN, 1.0)).collect();
    for j in 0..graph.n_factors() {
        let sub: Vec<usize> = graph.factor_agents(j).iter().map(|_| rng.gen_range(0..ACTIONS)).collect();
        let (table, cache) = qnet.local_q(&p, j, &graph, &hidden).unwrap();
        let mut grad = vec![0.0; p.len()];
        let mut d_hidden = vec![vec![0.0; HIDDEN]; N];
        qnet.backward_factor(&p, &table, &cache, &sub, 1.0, &mut grad, &mut d_hidden).unwrap();

        let value = |p: &[f64], h: &[Vec<f64>]| qnet.local_q(p, j, &graph, h).unwrap().0.value(&sub).unwrap();
        let coords = sample_coords(p.len(), 200, &mut rng);
        let err = finite_diff_check(|q| value(q, &hidden), &p, &grad, &coords).unwrap();
        assert!(err <= TOL, "factor {j} params: {err:e}");

        let flat: Vec<f64> = hidden.concat();
        let d_flat: Vec<f64> = d_hidden.concat();
        let unflatten = |x: &[f64]| x.chunks(HIDDEN).map(<[f64]>::to_vec).collect::<Vec<_>>();
        let all: Vec<usize> = (0..flat.len()).collect();
        let err = finite_diff_check(|x| value(&p, &unflatten(x)), &flat, &d_flat, &all).unwrap();
        assert!(err <= TOL, "factor {j} hidden: {err:e}");
    }
}

#[test]
fn v_heads_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let vnet = VNetwork::new(HIDDEN, 6, D_MAX);
    let mut p = vec![0.0; vnet.layout().len()];
    vnet.init(&mut p, &mut rng);
    let hidden: Vec<Vec<f64>> = (0..N).map(|_| noise(&mut rng, HIDDEN, 1.0)).collect();
    for agents in [vec![1], vec![0, 2], vec![0, 1, 2]] {
        let (_, cache) = vnet.v_factor(&p, &agents, &hidden).unwrap();
        let mut grad = vec![0.0; p.len()];
        vnet.backward_factor(&p, agents.len(), &cache, 1.0, &mut grad).unwrap();
        let coords: Vec<usize> = (0..p.len()).collect();
        let err = finite_diff_check(|q| vnet.v_factor(q, &agents, &hidden).unwrap().0, &p, &grad, &coords).unwrap();
        assert!(err <= TOL, "{agents:?}: {err:e}");
    }
}

#[test]
fn td_losses_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (qnet, vnet, qp, qt, vp, vt) = nets(&mut rng);
    let maxplus = MaxPlusConfig::default();
    let model = ValueModel { qnet: &qnet, vnet: &vnet, maxplus: &maxplus, gamma: 0.9 };
    let eps: Vec<GraphEpisode> = vec![episode(&mut rng, 4), episode(&mut rng, 3)];
    let batch: Vec<&Episode> = eps.iter().map(|e| &e.episode).collect();
    let scale = 0.7;

    let (_, grad) = td_loss(&model, &batch, &qp, &qt, scale).unwrap();
    let mut coords = sample_coords(qp.len(), 300, &mut rng);
    let encoder: Vec<usize> =
        qnet.layout().blocks().iter().filter(|b| !b.name.starts_with("q_head")).flat_map(|b| b.range()).collect();
    assert!(!encoder.is_empty());
    coords.extend(sample_coords(encoder.len(), 60, &mut rng).into_iter().map(|k| encoder[k]));
    let err =
        finite_diff_check(|q| td_loss(&model, &batch, q, &qt, scale).unwrap().0, &qp, &grad, &coords).unwrap();
    assert!(err <= TOL, "td: {err:e}");

    let (_, grad) = v_td_loss(&model, &batch, &qp, &vp, &vt, scale).unwrap();
    let coords = sample_coords(vp.len(), 300, &mut rng);
    let err =
        finite_diff_check(|v| v_td_loss(&model, &batch, &qp, v, &vt, scale).unwrap().0, &vp, &grad, &coords).unwrap();
    assert!(err <= TOL, "v: {err:e}");
}

fn policy_fixture(rng: &mut ChaCha8Rng) -> (GraphPolicy, Vec<f64>) {
    let policy = GraphPolicy::new(GraphPolicySpec {
        n_agents: N,
        n_factors: FACTORS,
        rnn_hidden: HIDDEN,
        state_dim: STATE,
        hyper_hidden: 7,
    })
    .unwrap();
    let mut p = vec![0.0; policy.layout().len()];
    policy.init(&mut p, rng);
    for x in p.iter_mut() {
        *x += rng.gen_range(-0.3..0.3);
    }
    (policy, p)
}

#[test]
fn edge_probability_entries_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (policy, p) = policy_fixture(&mut rng);
    let hidden: Vec<Vec<f64>> = (0..N).map(|_| noise(&mut rng, HIDDEN, 1.0)).collect();
    let state = noise(&mut rng, STATE, 1.0);
    let cache = policy.forward(&p, &hidden, &state).unwrap();
    let coords: Vec<usize> = (0..p.len()).collect();
    for i in 0..N {
        for j in 0..FACTORS {
            let mut d_logp = vec![0.0; N * FACTORS];
            d_logp[i * FACTORS + j] = 1.0;
            let mut grad = vec![0.0; p.len()];
            policy.backward_logp(&p, &cache, &d_logp, &mut grad).unwrap();
            let f = |q: &[f64]| policy.forward(q, &hidden, &state).unwrap().probs.get(i, j).ln();
            let err = finite_diff_check(f, &p, &grad, &coords).unwrap();
            assert!(err <= TOL, "entry ({i},{j}): {err:e}");
        }
    }
}

#[test]
fn clipped_objective_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (policy, p) = policy_fixture(&mut rng);
    let eps: Vec<GraphEpisode> = vec![episode(&mut rng, 3), episode(&mut rng, 2)];
    let batch: Vec<&GraphEpisode> = eps.iter().collect();
    let coords: Vec<usize> = (0..p.len()).collect();
    for mode in [AdvantageMode::PerFactor, AdvantageMode::Global] {
        let width = if mode == AdvantageMode::PerFactor { FACTORS } else { 1 };
        let adv: Vec<Vec<Vec<f64>>> =
            eps.iter().map(|e| (0..e.episode.len()).map(|_| noise(&mut rng, width, 2.0)).collect()).collect();
        let loss = graph_policy_loss(&policy, &p, &batch, &adv, 0.2, 0.05, mode).unwrap();
        let f = |q: &[f64]| graph_policy_loss(&policy, q, &batch, &adv, 0.2, 0.05, mode).unwrap().loss;
        let err = finite_diff_check(f, &p, &loss.grad, &coords).unwrap();
        assert!(err <= TOL, "{mode:?}: {err:e}");
    }
}
