//! C ABI over the ddfg engine.
//!
//! Every entry point returns a [`DdfgStatus`]. On failure a message is kept per
//! thread and can be read with [`ddfg_last_error`]. Handles are opaque and must
//! be released with their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ddfg::config::RunConfig;
use ddfg::graph::{Adjacency, FactorGraph};
use ddfg::learner::Trainer;
use ddfg::maxplus::{run_maxplus, MaxPlusConfig};
use ddfg::policy::multinomial_pmf;
use ddfg::tensor::DenseTensor;
use ddfg::{checkpoint, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DdfgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    BudgetExceeded = 4,
    Config = 5,
    Checkpoint = 6,
    Io = 7,
    Runtime = 8,
    Panic = 9,
}

/// Factor graph over a fixed adjacency and action count.
pub struct DdfgGraph {
    graph: FactorGraph,
}

/// A trainer with all of its networks, buffers and RNG state.
pub struct DdfgTrainer {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DdfgStatus {
    match e {
        Error::Shape { .. } => DdfgStatus::ShapeMismatch,
        Error::Budget { .. } => DdfgStatus::BudgetExceeded,
        Error::Config(_) => DdfgStatus::Config,
        Error::Checkpoint(_) => DdfgStatus::Checkpoint,
        Error::Io(_) => DdfgStatus::Io,
        Error::InvalidAdjacency(_) | Error::InvalidArgument(_) | Error::OutOfRange { .. } | Error::NonFinite(_) => {
            DdfgStatus::InvalidArgument
        }
        _ => DdfgStatus::Runtime,
    }
}

enum Failure {
    Null(&'static str),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn guard<F>(f: F) -> DdfgStatus
where
    F: FnOnce() -> Result<(), Failure>,
{
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DdfgStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            DdfgStatus::NullPointer
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic".into());
            DdfgStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &'static str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::Null(what))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p).to_str().map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ddfg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Builds a factor graph from an agent-major `n_agents × n_factors` 0/1 matrix.
///
/// # Safety
/// `entries` must point to `n_agents * n_factors` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_graph_new(
    n_agents: usize,
    n_factors: usize,
    entries: *const u8,
    actions: usize,
    out: *mut *mut DdfgGraph,
) -> DdfgStatus {
    guard(|| {
        non_null(out, "out")?;
        let len = n_agents.checked_mul(n_factors).ok_or(Error::InvalidArgument("matrix too large".into()))?;
        let entries = slice(entries, len, "entries")?.to_vec();
        let graph = FactorGraph::build(Adjacency::new(n_agents, n_factors, entries)?, actions)?;
        *out = Box::into_raw(Box::new(DdfgGraph { graph }));
        Ok(())
    })
}

/// # Safety
/// `graph` must be null or a handle from [`ddfg_graph_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ddfg_graph_free(graph: *mut DdfgGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_graph_is_acyclic(graph: *const DdfgGraph, out: *mut bool) -> DdfgStatus {
    guard(|| {
        non_null(graph, "graph")?;
        non_null(out, "out")?;
        *out = (*graph).graph.is_acyclic();
        Ok(())
    })
}

/// Runs max-plus over dense local tables laid out factor after factor, each
/// row-major with the lowest-numbered agent slowest. Writes one action per
/// agent to `out_actions` and the joint value to `out_value`.
///
/// # Safety
/// `tables` must hold `tables_len` values, `out_actions` room for one entry per agent.
#[no_mangle]
pub unsafe extern "C" fn ddfg_maxplus_run(
    graph: *const DdfgGraph,
    tables: *const f64,
    tables_len: usize,
    max_iterations: usize,
    damping: f64,
    out_actions: *mut usize,
    out_value: *mut f64,
) -> DdfgStatus {
    guard(|| {
        non_null(graph, "graph")?;
        non_null(out_actions, "out_actions")?;
        non_null(out_value, "out_value")?;
        let g = &(*graph).graph;
        let flat = slice(tables, tables_len, "tables")?;
        let mut dense = Vec::with_capacity(g.n_factors());
        let mut offset = 0;
        for order in g.factor_orders() {
            let size = g.actions().pow(order as u32);
            let chunk = flat.get(offset..offset + size).ok_or(Error::Shape { expected: offset + size, actual: flat.len() })?;
            dense.push(DenseTensor::new(order, g.actions(), chunk.to_vec())?);
            offset += size;
        }
        if offset != flat.len() {
            return Err(Error::Shape { expected: offset, actual: flat.len() }.into());
        }
        let config = MaxPlusConfig { max_iterations, damping, ..MaxPlusConfig::default() };
        let outcome = run_maxplus(g, &dense, &config)?;
        std::slice::from_raw_parts_mut(out_actions, g.n_agents()).copy_from_slice(&outcome.actions);
        *out_value = outcome.value;
        Ok(())
    })
}

/// Multinomial probability of `counts` (summing to `d_max`) under `p`.
///
/// # Safety
/// `p` and `counts` must each hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_multinomial_pmf(
    p: *const f64,
    counts: *const usize,
    n: usize,
    d_max: usize,
    out: *mut f64,
) -> DdfgStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = multinomial_pmf(slice(p, n, "p")?, slice(counts, n, "counts")?, d_max)?;
        Ok(())
    })
}

/// Fresh trainer from a TOML run configuration.
///
/// # Safety
/// `config_path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_new(config_path: *const c_char, out: *mut *mut DdfgTrainer) -> DdfgStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = RunConfig::load(&path_arg(config_path)?)?;
        *out = Box::into_raw(Box::new(DdfgTrainer { trainer: Trainer::new(config)? }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_load(path: *const c_char, out: *mut *mut DdfgTrainer) -> DdfgStatus {
    guard(|| {
        non_null(out, "out")?;
        let trainer = checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(DdfgTrainer { trainer }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_save(trainer: *const DdfgTrainer, path: *const c_char) -> DdfgStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        checkpoint::save(&(*trainer).trainer, &path_arg(path)?)?;
        Ok(())
    })
}

/// Runs training iterations until at least `steps` more environment steps have elapsed.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_train(trainer: *mut DdfgTrainer, steps: u64) -> DdfgStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        let t = &mut (*trainer).trainer;
        let target = t.env_steps().saturating_add(steps);
        while t.env_steps() < target {
            t.train_iteration()?;
        }
        Ok(())
    })
}

/// # Safety
/// `trainer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_env_steps(trainer: *const DdfgTrainer, out: *mut u64) -> DdfgStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        non_null(out, "out")?;
        *out = (*trainer).trainer.env_steps();
        Ok(())
    })
}

/// Greedy evaluation; writes the median return (NaN for zero episodes).
///
/// # Safety
/// `trainer` must be a live handle and `out_median` writable.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_evaluate(
    trainer: *const DdfgTrainer,
    episodes: usize,
    out_median: *mut f64,
) -> DdfgStatus {
    guard(|| {
        non_null(trainer, "trainer")?;
        non_null(out_median, "out_median")?;
        *out_median = (*trainer).trainer.evaluate(episodes, u64::MAX - 1)?.median();
        Ok(())
    })
}

/// # Safety
/// `trainer` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ddfg_trainer_free(trainer: *mut DdfgTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}
