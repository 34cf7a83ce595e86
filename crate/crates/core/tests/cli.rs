use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddfg::config::RunConfig;
use ddfg::env::{ClimbConfig, EnvConfig};
use ddfg::harness;
use ddfg::metrics::{parse_metrics, HEADER};

fn ddfg(args: &[&str], root: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddfg"));
    cmd.args(args);
    match root {
        Some(r) => cmd.env("DDFG_OUTPUT_ROOT", r),
        None => cmd.env_remove("DDFG_OUTPUT_ROOT"),
    };
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn climb_config(dir: &Path, total: u64) -> RunConfig {
    let mut c = RunConfig {
        seed: 3,
        output_dir: dir.to_path_buf(),
        env: EnvConfig::Climb(ClimbConfig::default()),
        ..RunConfig::default()
    };
    c.network.rnn_hidden = 6;
    c.network.mlp_hidden = 8;
    c.network.hyper_hidden = 6;
    c.graph.factors = 2;
    c.train.total_steps = total;
    c.train.batch_size = 4;
    c.train.eval_interval = 20;
    c.train.eval_episodes = 3;
    c
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn zero_budget_writes_header_and_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &climb_config(&out, 0));
    let o = ddfg(&["train", cfg.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(out.join(harness::METRICS_FILE)).unwrap(), format!("{HEADER}\n"));
    assert!(out.join(harness::CHECKPOINT_FILE).exists());
    assert!(out.join(harness::CONFIG_FILE).exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate_typo = 0.1\n").unwrap();
    let o = ddfg(&["train", cfg.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate_typo"));
    let o = ddfg(&["train", tmp.path().join("missing.toml").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_subcommand() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = write_config(tmp.path(), &climb_config(&out, 0));
    assert!(ddfg(&["train", cfg.to_str().unwrap()], None).status.success());
    let ckpt = out.join(harness::CHECKPOINT_FILE);

    let o = ddfg(&["eval", ckpt.to_str().unwrap(), "--episodes", "0"], None);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "episodes: 0\n");

    let o = ddfg(&["eval", ckpt.to_str().unwrap(), "--episodes", "2", "--dump-structures"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    let median: f64 = text.lines().find_map(|l| l.strip_prefix("median_return: ")).unwrap().parse().unwrap();
    assert!(median < 10.0, "untrained policy should not already be optimal: {text}");
    let dumps: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with("t=")).collect();
    assert_eq!(dumps.len(), 2);
    for line in dumps {
        for col in line.split('[').skip(1) {
            let agents = col.trim_end_matches([']', ' ']).split_whitespace().count();
            assert!((1..=3).contains(&agents), "{line}");
        }
    }
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("broken.bin");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = ddfg(&["eval", ckpt.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let mut bytes = b"DDFGCKPT".to_vec();
    bytes.extend_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let o = ddfg(&["eval", ckpt.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn selftest_passes() {
    let o = ddfg(&["selftest"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().count() >= 3);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}

#[test]
fn oracle_reports_climb_optimum() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &climb_config(&tmp.path().join("run"), 0));
    let o = ddfg(&["oracle", cfg.to_str().unwrap(), "--episodes", "20"], None);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("optimal_joint_action: [0, 0, 0]"), "{text}");
    assert!(text.contains("optimal_value: 10"), "{text}");
    assert!(text.contains("random_policy_median:"));
}

#[test]
fn output_root_override_applies_to_relative_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &climb_config(Path::new("relative/run"), 0));
    let o = ddfg(&["train", cfg.to_str().unwrap()], Some(tmp.path()));
    assert!(o.status.success());
    assert!(tmp.path().join("relative/run").join(harness::METRICS_FILE).exists());
}

#[test]
fn metrics_are_reproducible_and_ordered() {
    let tmp = tempfile::tempdir().unwrap();
    let read = |name: &str| {
        let out = tmp.path().join(name);
        let cfg = write_config(tmp.path(), &climb_config(&out, 200));
        let o = ddfg(&["train", cfg.to_str().unwrap()], None);
        assert!(o.status.success());
        std::fs::read(out.join(harness::METRICS_FILE)).unwrap()
    };
    let (a, b) = (read("a"), read("b"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.ends_with('\n') && !text.contains('\r'));
    let rows = parse_metrics(&text).unwrap();
    assert_eq!(rows.len(), 10);
    assert!(rows.windows(2).all(|w| w[0].step < w[1].step));
    let rendered: Vec<String> = rows.iter().map(ddfg::metrics::format_row).collect();
    assert_eq!(rendered, text.lines().skip(1).collect::<Vec<_>>());
}

#[test]
fn resume_through_cli_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let full = tmp.path().join("full");
    let cfg = write_config(tmp.path(), &climb_config(&full, 120));
    assert!(ddfg(&["train", cfg.to_str().unwrap()], None).status.success());

    let split = tmp.path().join("split");
    let half = write_config(tmp.path(), &climb_config(&split, 60));
    assert!(ddfg(&["train", half.to_str().unwrap()], None).status.success());
    let rest = write_config(tmp.path(), &climb_config(&split, 120));
    let ckpt = split.join(harness::CHECKPOINT_FILE);
    let o = ddfg(&["train", rest.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let read = |d: &Path| std::fs::read(d.join(harness::METRICS_FILE)).unwrap();
    assert_eq!(read(&full), read(&split));
    let a = ddfg::checkpoint::load(&full.join(harness::CHECKPOINT_FILE)).unwrap();
    let b = ddfg::checkpoint::load(&ckpt).unwrap();
    assert_eq!(a.state, b.state);
}
