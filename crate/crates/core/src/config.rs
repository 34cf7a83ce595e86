//! Run configuration, loaded from TOML with strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::graph::Preset;
use crate::maxplus::MaxPlusConfig;

/// Overrides the directory that relative output paths are resolved against.
pub const OUTPUT_ROOT_VAR: &str = "DDFG_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub graph: GraphConfig,
    pub maxplus: MaxPlusConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
            graph: GraphConfig::default(),
            maxplus: MaxPlusConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub rnn_hidden: usize,
    pub mlp_hidden: usize,
    /// CP rank for factor orders 2, 3, ...; the last entry covers higher orders.
    pub ranks: Vec<usize>,
    pub agent_id: bool,
    pub hyper_hidden: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { rnn_hidden: 64, mlp_hidden: 64, ranks: vec![4, 8], agent_id: true, hyper_hidden: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphMode {
    /// Structures sampled from the trained graph policy.
    Learned,
    /// Structures sampled from uniform edge probabilities; no policy updates.
    Random,
    /// A fixed preset topology.
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// One clipped ratio and advantage per non-unary factor.
    PerFactor,
    /// A single advantage from the summed value and the product of factor ratios.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub mode: GraphMode,
    pub preset: Preset,
    /// Number of non-unary factor columns.
    pub factors: usize,
    pub d_max: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { mode: GraphMode::Learned, preset: Preset::Vdn, factors: 9, d_max: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    pub replay_capacity: usize,
    pub normalize_rewards: bool,
    pub lr_q: f64,
    pub lr_graph: f64,
    pub target_update_interval: u64,
    pub graph_buffer_capacity: usize,
    /// Q updates per graph-policy update.
    pub graph_update_interval: u64,
    pub entropy_coef: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub advantage: AdvantageMode,
    pub grad_clip: f64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    /// Environment steps between checkpoints; 0 writes only the initial and final ones.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 2_000_000,
            batch_size: 32,
            gamma: 0.98,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            replay_capacity: 5000,
            normalize_rewards: true,
            lr_q: 1e-3,
            lr_graph: 1e-5,
            target_update_interval: 200,
            graph_buffer_capacity: 8,
            graph_update_interval: 8,
            entropy_coef: 0.01,
            gae_lambda: 0.95,
            clip: 0.2,
            advantage: AdvantageMode::PerFactor,
            grad_clip: 10.0,
            eval_interval: 2000,
            eval_episodes: 10,
            checkpoint_interval: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Output directory, resolved against the override root when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Config(format!("{key}: {why}")));
        match &self.env {
            EnvConfig::PredatorPrey(g) => g.validate()?,
            EnvConfig::Climb(c) => {
                if c.agents == 0 {
                    return bad("env.agents", "must be at least 1");
                }
                if c.actions < 2 {
                    return bad("env.actions", "must be at least 2");
                }
            }
        }
        let n = &self.network;
        if n.rnn_hidden == 0 || n.mlp_hidden == 0 || n.hyper_hidden == 0 {
            return bad("network", "hidden sizes must be positive");
        }
        if n.ranks.is_empty() || n.ranks.contains(&0) {
            return bad("network.ranks", "needs at least one positive rank");
        }
        let g = &self.graph;
        if g.d_max == 0 {
            return bad("graph.d_max", "must be at least 1");
        }
        if g.mode != GraphMode::Fixed && g.factors == 0 {
            return bad("graph.factors", "must be positive for sampled structures");
        }
        if g.mode == GraphMode::Fixed && g.preset == Preset::DcgPairwise && g.d_max < 2 {
            return bad("graph.d_max", "the pairwise preset needs d_max ≥ 2");
        }
        self.maxplus.validate().map_err(|e| Error::Config(format!("maxplus: {e}")))?;
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive");
        }
        if !(0.0..1.0).contains(&t.gamma) {
            return bad("train.gamma", "must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&t.epsilon_start) || !(0.0..=1.0).contains(&t.epsilon_end) {
            return bad("train.epsilon_start", "exploration rates must lie in [0, 1]");
        }
        if t.epsilon_end > t.epsilon_start {
            return bad("train.epsilon_end", "must not exceed epsilon_start");
        }
        if t.replay_capacity == 0 || t.graph_buffer_capacity == 0 {
            return bad("train.replay_capacity", "buffer capacities must be positive");
        }
        if !positive(t.lr_q) || !positive(t.lr_graph) {
            return bad("train.lr_q", "learning rates must be positive");
        }
        if t.target_update_interval == 0 || t.graph_update_interval == 0 {
            return bad("train.target_update_interval", "update intervals must be positive");
        }
        if t.entropy_coef < 0.0 {
            return bad("train.entropy_coef", "must be non-negative");
        }
        if !(0.0..=1.0).contains(&t.gae_lambda) {
            return bad("train.gae_lambda", "must lie in [0, 1]");
        }
        if !(t.clip > 0.0 && t.clip < 1.0) {
            return bad("train.clip", "must lie in (0, 1)");
        }
        if !positive(t.grad_clip) {
            return bad("train.grad_clip", "must be positive");
        }
        if t.eval_interval == 0 {
            return bad("train.eval_interval", "must be positive");
        }
        Ok(())
    }
}

/// False for NaN as well as for non-positive values.
fn positive(x: f64) -> bool {
    x > 0.0
}
