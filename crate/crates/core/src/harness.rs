//! Drivers behind the command-line entry points.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::env::{oracle_optimal, EnvConfig, MatrixGame};
use crate::error::{Error, Result};
use crate::learner::{median, EvalReport, MetricsRow, Trainer};
use crate::maxplus::{brute_force_argmax, run_maxplus, MaxPlusConfig};
use crate::metrics::MetricsWriter;
use crate::oracles::{enumerate_pmf_support, partition_by_group, random_tables, random_tree_graph};
use crate::policy::subpolicy_pmf;
use crate::tensor::CpTensor;

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";

pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub trainer: Trainer,
}

/// Trains from scratch into the configured output directory.
pub fn train(config: RunConfig) -> Result<TrainOutcome> {
    let dir = config.resolved_output_dir();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CONFIG_FILE), config.to_toml_string()?)?;
    let total = config.train.total_steps;
    let trainer = Trainer::new(config)?;
    let writer = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    run_until(trainer, &dir, writer, total)
}

/// Continues a run from its checkpoint, appending to the metrics file next to it.
pub fn resume(checkpoint_path: &Path, total_steps: Option<u64>) -> Result<TrainOutcome> {
    let trainer = checkpoint::load(checkpoint_path)?;
    let dir = checkpoint_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let total = total_steps.unwrap_or(trainer.config().train.total_steps);
    let writer = MetricsWriter::append(&dir.join(METRICS_FILE))?;
    run_until(trainer, &dir, writer, total)
}

fn run_until(mut trainer: Trainer, dir: &Path, mut writer: MetricsWriter, total: u64) -> Result<TrainOutcome> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    let interval = trainer.config().train.checkpoint_interval;
    checkpoint::save(&trainer, &ckpt)?;
    let mut next_ckpt = trainer.env_steps().checked_div(interval).map_or(u64::MAX, |q| (q + 1) * interval);
    let mut rows = Vec::new();
    while trainer.env_steps() < total {
        if let Some(row) = trainer.train_iteration()? {
            writer.emit(&row)?;
            rows.push(row);
        }
        if trainer.env_steps() >= next_ckpt {
            checkpoint::save(&trainer, &ckpt)?;
            next_ckpt = (trainer.env_steps() / interval + 1) * interval;
        }
    }
    checkpoint::save(&trainer, &ckpt)?;
    Ok(TrainOutcome { output_dir: dir.to_path_buf(), rows, trainer })
}

pub fn eval_checkpoint(path: &Path, episodes: usize) -> Result<EvalReport> {
    let trainer = checkpoint::load(path)?;
    trainer.evaluate(episodes, u64::MAX - 1)
}

/// Human-readable evaluation summary; with `dump`, one structure per step.
pub fn format_eval(report: &EvalReport, dump: bool) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "episodes: {}", report.episodes.len());
    if !report.episodes.is_empty() {
        let _ = writeln!(s, "median_return: {}", report.median());
        let _ = writeln!(s, "mean_return: {}", report.mean());
    }
    for (k, ep) in report.episodes.iter().enumerate() {
        let _ = writeln!(s, "episode {k}: return {} steps {}", ep.total_reward, ep.actions.len());
        if dump {
            for (t, adj) in ep.structures.iter().enumerate() {
                let cols: Vec<String> = (0..adj.m())
                    .map(|j| {
                        let agents: Vec<String> = adj.column_agents(j).iter().map(usize::to_string).collect();
                        format!("[{}]", agents.join(" "))
                    })
                    .collect();
                let _ = writeln!(s, "  t={t} factors {}", cols.join(" "));
            }
        }
    }
    s
}

/// Brute-force baselines for the configured environment.
pub fn oracle_report(config: &RunConfig, random_episodes: usize) -> Result<String> {
    let mut s = String::new();
    if let EnvConfig::Climb(c) = &config.env {
        let game = MatrixGame::climb(c)?;
        let (joint, value) = oracle_optimal(&game);
        let _ = writeln!(s, "optimal_joint_action: {joint:?}");
        let _ = writeln!(s, "optimal_value: {value}");
    }
    let returns = Trainer::random_policy_returns(config, random_episodes, config.seed)?;
    let _ = writeln!(s, "random_policy_episodes: {random_episodes}");
    let _ = writeln!(s, "random_policy_median: {}", median(&returns));
    Ok(s)
}

#[derive(Debug, Clone)]
pub struct SelfTestLine {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast invariant checks against the exhaustive oracles.
pub fn selftest() -> Vec<SelfTestLine> {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut lines = Vec::new();
    let mut line = |name: &'static str, r: Result<String>| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        lines.push(SelfTestLine { name, passed, detail });
    };

    line("maxplus-tree-exact", {
        let mut worst: f64 = 0.0;
        let r = (0..50).try_for_each(|_| {
            let g = random_tree_graph(&mut rng, 5, 3, 3)?;
            let tables = random_tables(&mut rng, &g)?;
            let out = run_maxplus(&g, &tables, &MaxPlusConfig::default())?;
            let (_, best) = brute_force_argmax(&g, &tables)?;
            worst = worst.max((best - out.value).abs());
            Ok::<_, Error>(())
        });
        r.and_then(|_| check(worst <= 1e-9, format!("max gap {worst:e}")))
    });

    line("subpolicy-normalization", {
        let mut worst: f64 = 0.0;
        let r = (1..=5).try_for_each(|n| {
            (1..=3).try_for_each(|d| {
                let p = random_simplex(&mut rng, n);
                let cells = partition_by_group(&enumerate_pmf_support(&p, d)?);
                let total: f64 = cells.keys().map(|g| subpolicy_pmf(&p, g, d)).sum::<Result<f64>>()?;
                worst = worst.max((total - 1.0).abs());
                Ok::<_, Error>(())
            })
        });
        r.and_then(|_| check(worst <= 1e-9, format!("max deviation {worst:e}")))
    });

    line("cp-materialize", {
        let mut worst: f64 = 0.0;
        let r = (0..50).try_for_each(|_| {
            use rand::Rng;
            let (d, k, a) = (rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=5));
            let heads: Vec<f64> = (0..d * k * a).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let cp = CpTensor::from_heads(&heads, d, k, a)?;
            let dense = cp.materialize()?;
            for idx in 0..dense.values().len() {
                let mut joint = vec![0; d];
                let mut rest = idx;
                for slot in joint.iter_mut().rev() {
                    *slot = rest % a;
                    rest /= a;
                }
                worst = worst.max((cp.evaluate(&joint)? - dense.values()[idx]).abs());
            }
            Ok::<_, Error>(())
        });
        r.and_then(|_| check(worst <= 1e-9, format!("max gap {worst:e}")))
    });

    lines
}

fn check(ok: bool, detail: String) -> Result<String> {
    if ok {
        Ok(detail)
    } else {
        Err(Error::InvalidArgument(detail))
    }
}

fn random_simplex<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}
