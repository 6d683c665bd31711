//! Shared optimization loop: per-iteration seeding, loss traces, checkpoint
//! cadence and divergence handling.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::net::{opt_step, AdamWConfig, Checkpoint, LossBreakdown, OptimState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    /// Save a checkpoint every this many iterations (0 saves only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            batch_size: 2,
            seed: 0,
            optimizer: AdamWConfig::default(),
            checkpoint_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Per-iteration loss components, stored column-wise.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub names: Vec<String>,
    pub weights: Vec<f64>,
    pub components: Vec<Vec<f64>>,
    pub total: Vec<f64>,
}

impl LossTrace {
    pub fn push(&mut self, b: &LossBreakdown) {
        if self.names.is_empty() && self.total.is_empty() {
            self.names = b.components.iter().map(|c| c.name.clone()).collect();
            self.weights = b.components.iter().map(|c| c.weight).collect();
            self.components = vec![Vec::new(); self.names.len()];
        }
        debug_assert_eq!(b.components.len(), self.names.len());
        for (col, c) in self.components.iter_mut().zip(&b.components) {
            col.push(c.value);
        }
        self.total.push(b.total);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }

    pub fn component(&self, name: &str) -> Option<&[f64]> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&self.components[i])
    }

    /// Mean total loss over iterations `[start, start + window)`.
    pub fn window_mean(&self, start: usize, window: usize) -> Option<f64> {
        let end = start.checked_add(window)?;
        (window > 0 && end <= self.total.len())
            .then(|| self.total[start..end].iter().sum::<f64>() / window as f64)
    }

    /// (first window mean, last window mean).
    pub fn smoothed_endpoints(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.total.len();
        Some((self.window_mean(0, window)?, self.window_mean(n.checked_sub(window)?, window)?))
    }
}

/// Deterministic generator for one iteration: the same `(seed, iteration)`
/// always yields the same stream, so resumed runs replay exactly.
pub fn iteration_rng(seed: u64, iteration: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    rng
}

/// Mutable state of a run; everything needed to resume bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: Vec<f64>,
    pub opt: OptimState,
    pub iteration: usize,
    pub trace: LossTrace,
}

impl TrainState {
    pub fn new(params: Vec<f64>, optimizer: AdamWConfig) -> Self {
        let n = params.len();
        Self {
            params,
            opt: OptimState::new(n, optimizer),
            iteration: 0,
            trace: LossTrace::default(),
        }
    }
}

/// Runs iterations `state.iteration..cfg.iterations`.
///
/// `objective(params, rng)` returns the batch loss and its gradient; `save`
/// persists a state and returns where it went. A non-finite loss or update
/// saves the last finite state and returns [`Error::Diverged`].
pub fn run<F, S>(state: &mut TrainState, cfg: &TrainConfig, mut objective: F, mut save: S) -> Result<()>
where
    F: FnMut(&[f64], &mut ChaCha20Rng) -> Result<(LossBreakdown, Vec<f64>)>,
    S: FnMut(&TrainState) -> Result<PathBuf>,
{
    cfg.validate()?;
    while state.iteration < cfg.iterations {
        let mut rng = iteration_rng(cfg.seed, state.iteration);
        let outcome = objective(&state.params, &mut rng).and_then(|(b, g)| {
            if g.iter().all(|v| v.is_finite()) {
                Ok((b, g))
            } else {
                Err(Error::NonFinite { term: "gradient".into() })
            }
        });
        let (breakdown, grads) = match outcome {
            Ok(v) => v,
            Err(Error::NonFinite { term }) => return Err(diverged(state, term, &mut save)),
            Err(e) => return Err(e),
        };
        let before = (state.params.clone(), state.opt.clone());
        opt_step(&mut state.params, &grads, &mut state.opt)?;
        if !state.params.iter().all(|v| v.is_finite()) {
            (state.params, state.opt) = before;
            return Err(diverged(state, "parameters".into(), &mut save));
        }
        state.trace.push(&breakdown);
        state.iteration += 1;
        let due = cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0;
        if due || state.iteration == cfg.iterations {
            save(state)?;
        }
    }
    Ok(())
}

fn diverged<S>(state: &TrainState, term: String, save: &mut S) -> Error
where
    S: FnMut(&TrainState) -> Result<PathBuf>,
{
    match save(state) {
        Ok(checkpoint) => Error::Diverged {
            iteration: state.iteration,
            term,
            checkpoint,
        },
        Err(e) => e,
    }
}

/// Averages per-member losses and gradients in a fixed order.
pub fn reduce_batch(parts: Vec<(LossBreakdown, Vec<f64>)>) -> (LossBreakdown, Vec<f64>) {
    let n = parts.len() as f64;
    let breakdowns: Vec<LossBreakdown> = parts.iter().map(|p| p.0.clone()).collect();
    let mut iter = parts.into_iter();
    let (_, mut g) = iter.next().expect("non-empty batch");
    for (_, gi) in iter {
        for (a, b) in g.iter_mut().zip(&gi) {
            *a += b;
        }
    }
    g.iter_mut().for_each(|v| *v /= n);
    (LossBreakdown::mean(&breakdowns), g)
}


const PARAMS_ENTRY: &str = "train.params";
const ADAM_M_ENTRY: &str = "train.adam_m";
const ADAM_V_ENTRY: &str = "train.adam_v";

/// Stores the flat parameters, optimizer moments, iteration and trace so
/// that [`read_state`] can resume bitwise.
pub fn write_state(ck: &mut Checkpoint, state: &TrainState) -> Result<()> {
    let n = state.params.len();
    ck.push(PARAMS_ENTRY, vec![n], state.params.clone())?;
    ck.push(ADAM_M_ENTRY, vec![n], state.opt.m.clone())?;
    ck.push(ADAM_V_ENTRY, vec![n], state.opt.v.clone())?;
    let meta = json!({
        "iteration": state.iteration,
        "optimizer_step": state.opt.step,
        "trace": state.trace,
    });
    match &mut ck.meta {
        Value::Object(map) => {
            map.insert("train".into(), meta);
        }
        other => *other = json!({ "train": meta }),
    }
    Ok(())
}

pub fn read_state(ck: &Checkpoint, optimizer: AdamWConfig) -> Result<TrainState> {
    let bad = |what: &str| Error::Checkpoint(format!("training state: {what}"));
    let meta = ck.meta.get("train").ok_or_else(|| bad("missing metadata"))?;
    let iteration = meta
        .get("iteration")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing iteration"))? as usize;
    let step = meta
        .get("optimizer_step")
        .and_then(Value::as_u64)
        .ok_or_else(|| bad("missing optimizer step"))?;
    let trace: LossTrace = serde_json::from_value(meta.get("trace").cloned().unwrap_or(Value::Null))
        .map_err(|e| bad(&e.to_string()))?;
    if trace.len() != iteration {
        return Err(bad("trace length does not match iteration"));
    }
    let params = ck.require(PARAMS_ENTRY)?.data.clone();
    let m = ck.require(ADAM_M_ENTRY)?.data.clone();
    let v = ck.require(ADAM_V_ENTRY)?.data.clone();
    if m.len() != params.len() || v.len() != params.len() {
        return Err(bad("optimizer moments do not match parameters"));
    }
    let mut state = TrainState::new(params, optimizer);
    state.opt.m = m;
    state.opt.v = v;
    state.opt.step = step;
    state.iteration = iteration;
    state.trace = trace;
    Ok(state)
}
