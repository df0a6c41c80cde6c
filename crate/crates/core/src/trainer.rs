//! Seeded mini-batch SGD fine-tuning and the coupled paired-run protocol.
//!
//! Batch indices are a pure function of `(seed, step, slot)` over the
//! effective dataset, so two runs on datasets that differ in one sample see
//! exactly the same index stream.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::model::{batch_grad_into, DataView, Workspace};
use crate::param::ParamVector;
use crate::rng::stream_index;
use crate::tasks::{PerturbedDataset, TaskEnvironment};

/// Iterate norm above which a run is declared diverged.
pub const DIVERGENCE_NORM: f64 = 1e8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum Schedule {
    Constant {
        lr: f64,
    },
    /// `eta^k = lr0 * rate^k`.
    ExpDecay {
        lr0: f64,
        rate: f64,
    },
    /// SGD with a proximal pull toward the starting point:
    /// `x <- x - lr * g - alpha * (x - x0)`.
    Proximal {
        lr: f64,
        alpha: f64,
    },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )))
            }
        };
        match *self {
            Schedule::Constant { lr } => pos(lr, "lr"),
            Schedule::ExpDecay { lr0, rate } => {
                pos(lr0, "lr0")?;
                if !(rate > 0.0 && rate <= 1.0) {
                    return Err(Error::invalid(format!("decay rate {rate} outside (0, 1]")));
                }
                Ok(())
            }
            Schedule::Proximal { lr, alpha } => {
                pos(lr, "lr")?;
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(Error::invalid(format!(
                        "proximal alpha {alpha} outside (0, 1)"
                    )));
                }
                Ok(())
            }
        }
    }

    /// The reference rate `eta_l` that the weight vector is normalized by.
    pub fn eta_l(&self) -> f64 {
        match *self {
            Schedule::Constant { lr } | Schedule::Proximal { lr, .. } => lr,
            Schedule::ExpDecay { lr0, .. } => lr0,
        }
    }

    pub fn with_lr(&self, lr: f64) -> Schedule {
        match *self {
            Schedule::Constant { .. } => Schedule::Constant { lr },
            Schedule::ExpDecay { rate, .. } => Schedule::ExpDecay { lr0: lr, rate },
            Schedule::Proximal { alpha, .. } => Schedule::Proximal { lr, alpha },
        }
    }
}

/// `a = [eta^0 / eta_l, ..., eta^{K-1} / eta_l]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector {
    a: Vec<f64>,
}

impl WeightVector {
    pub fn new(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::invalid("weight vector is empty"));
        }
        if a.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(
                "weight vector entries must be finite and non-negative",
            ));
        }
        if a.iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid("weight vector has zero mass"));
        }
        Ok(Self { a })
    }

    pub fn ones(k: usize) -> Result<Self> {
        Self::new(vec![1.0; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.a
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn l1(&self) -> f64 {
        self.a.iter().sum()
    }

    pub fn l2_sq(&self) -> f64 {
        self.a.iter().map(|v| v * v).sum()
    }

    /// `a_{i,-1}`.
    pub fn last(&self) -> f64 {
        *self.a.last().expect("non-empty")
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.a
    }
}

pub fn schedule_weight_vector(schedule: &Schedule, k: usize) -> Result<WeightVector> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    schedule.validate()?;
    let a = match *schedule {
        Schedule::Constant { .. } => vec![1.0; k],
        Schedule::ExpDecay { rate, .. } => (0..k).map(|t| rate.powi(t as i32)).collect(),
        Schedule::Proximal { alpha, .. } => (0..k)
            .map(|t| (1.0 - alpha).powi((k - 1 - t) as i32))
            .collect(),
    };
    WeightVector::new(a)
}

fn default_ratio() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub b: usize,
    pub schedule: Schedule,
    pub seed: u64,
    #[serde(default = "default_ratio")]
    pub data_ratio: f64,
}

impl FinetuneConfig {
    pub fn constant(k: usize, b: usize, lr: f64, seed: u64) -> Self {
        Self {
            k,
            b,
            schedule: Schedule::Constant { lr },
            seed,
            data_ratio: 1.0,
        }
    }

    /// Effective dataset size `ceil(alpha * n)`.
    pub fn n_used(&self, n: usize) -> usize {
        ((self.data_ratio * n as f64).ceil() as usize).clamp(1, n)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if !(self.data_ratio > 0.0 && self.data_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "data_ratio {} outside (0, 1]",
                self.data_ratio
            )));
        }
        let n_used = self.n_used(n);
        if self.b == 0 || self.b > n_used / 2 {
            return Err(Error::invalid(format!(
                "batch size {} outside [1, {}] for {} effective samples",
                self.b,
                n_used / 2,
                n_used
            )));
        }
        self.schedule.validate()
    }

    /// Fails unless the schedule is constant with `eta_l <= 1/(8 K_bar L)`.
    pub fn check_bound_regime(&self, l: f64, k_bar: f64) -> Result<()> {
        match self.schedule {
            Schedule::Constant { lr } if lr <= 1.0 / (8.0 * k_bar * l) => Ok(()),
            Schedule::Constant { lr } => Err(Error::invalid(format!(
                "lr {lr} exceeds 1/(8 K L) = {} required for bound comparison",
                1.0 / (8.0 * k_bar * l)
            ))),
            _ => Err(Error::invalid(
                "bound comparison requires a constant schedule",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub final_params: ParamVector,
    pub weight_vector: WeightVector,
    pub eta_l: f64,
    /// `K` index sets of size `b`.
    pub batch_log: Vec<Vec<usize>>,
}

impl TrainResult {
    /// SHA-256 over the little-endian `u64` indices of every logged batch.
    pub fn batch_log_digest(&self) -> String {
        batch_log_digest(&self.batch_log)
    }

    pub fn sidecar(&self, cfg: &FinetuneConfig) -> TrainSidecar {
        TrainSidecar {
            weight_vector: self.weight_vector.clone(),
            eta_l: self.eta_l,
            k: cfg.k,
            b: cfg.b,
            seed: cfg.seed,
            data_ratio: cfg.data_ratio,
            batch_log_sha256: self.batch_log_digest(),
            params_sha256: self.final_params.digest(),
        }
    }

    /// Whether index `j` appears in any logged batch.
    pub fn touches(&self, j: usize) -> bool {
        self.batch_log.iter().any(|b| b.contains(&j))
    }

    /// First step whose batch contains `j`.
    pub fn first_touch(&self, j: usize) -> Option<usize> {
        self.batch_log.iter().position(|b| b.contains(&j))
    }
}

pub fn batch_log_digest(log: &[Vec<usize>]) -> String {
    let mut h = Sha256::new();
    for batch in log {
        for &j in batch {
            h.update((j as u64).to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// JSON written next to a persisted expert.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSidecar {
    pub weight_vector: WeightVector,
    pub eta_l: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub b: usize,
    pub seed: u64,
    pub data_ratio: f64,
    pub batch_log_sha256: String,
    pub params_sha256: String,
}

/// The `b` indices of step `k`.
pub fn batch_indices(cfg: &FinetuneConfig, step: usize, n_used: usize) -> Vec<usize> {
    (0..cfg.b)
        .map(|slot| stream_index(cfg.seed, step as u64, slot as u64, n_used))
        .collect()
}

fn run(
    x0: &ParamVector,
    view: &dyn DataView,
    cfg: &FinetuneConfig,
    mut observe: Option<&mut dyn FnMut(usize, &[f64])>,
) -> Result<TrainResult> {
    check_dim(view.arch().dim(), x0.dim())?;
    cfg.validate(view.len())?;
    let n_used = cfg.n_used(view.len());
    let weight_vector = schedule_weight_vector(&cfg.schedule, cfg.k)?;
    let eta_l = cfg.schedule.eta_l();
    let mut ws = Workspace::new(view.arch());
    let start = x0.as_slice();
    let mut x = start.to_vec();
    let mut g = vec![0.0; x.len()];
    let mut log = Vec::with_capacity(cfg.k);
    for k in 0..cfg.k {
        if let Some(f) = observe.as_mut() {
            f(k, &x);
        }
        let idx = batch_indices(cfg, k, n_used);
        batch_grad_into(view, &x, &idx, &mut g, &mut ws);
        match cfg.schedule {
            Schedule::Constant { lr } => x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= lr * gi),
            Schedule::ExpDecay { lr0, rate } => {
                let eta = lr0 * rate.powi(k as i32);
                x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= eta * gi)
            }
            Schedule::Proximal { lr, alpha } => x
                .iter_mut()
                .zip(&g)
                .zip(start)
                .for_each(|((xi, gi), si)| *xi -= lr * gi + alpha * (*xi - si)),
        }
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Diverged { step: k, norm });
        }
        log.push(idx);
    }
    if let Some(f) = observe.as_mut() {
        f(cfg.k, &x);
    }
    Ok(TrainResult {
        final_params: ParamVector::new(x)?,
        weight_vector,
        eta_l,
        batch_log: log,
    })
}

/// `K` steps of mini-batch SGD from `x0` on the first `ceil(alpha n)` samples.
pub fn finetune(
    x0: &ParamVector,
    data: &dyn DataView,
    cfg: &FinetuneConfig,
) -> Result<TrainResult> {
    run(x0, data, cfg, None)
}

/// Like [`finetune`], calling `observe(k, x^k)` for `k = 0..=K`.
pub fn finetune_observed(
    x0: &ParamVector,
    data: &dyn DataView,
    cfg: &FinetuneConfig,
    observe: &mut dyn FnMut(usize, &[f64]),
) -> Result<TrainResult> {
    run(x0, data, cfg, Some(observe))
}

/// Trains on `env` and on `perturbed` with the identical index stream.
pub fn coupled_finetune(
    x0: &ParamVector,
    env: &TaskEnvironment,
    perturbed: &PerturbedDataset<'_>,
    cfg: &FinetuneConfig,
) -> Result<(TrainResult, TrainResult)> {
    if !std::ptr::eq(env, perturbed.origin()) {
        return Err(Error::invalid(
            "perturbed dataset does not originate from this environment",
        ));
    }
    let a = finetune(x0, env, cfg)?;
    let b = finetune(x0, perturbed, cfg)?;
    Ok((a, b))
}

/// Rebuilds `x^K = x0 - eta_l * G a`, with `G`'s columns the batch gradients
/// re-evaluated along the iterates replayed from the logged batches.
pub fn reconstruct_from_log(
    x0: &ParamVector,
    data: &dyn DataView,
    cfg: &FinetuneConfig,
    result: &TrainResult,
) -> Result<ParamVector> {
    check_dim(data.arch().dim(), x0.dim())?;
    if result.batch_log.len() != cfg.k {
        return Err(Error::invalid("batch log length differs from K"));
    }
    let d = x0.dim();
    let eta_l = cfg.schedule.eta_l();
    let a = schedule_weight_vector(&cfg.schedule, cfg.k)?;
    let mut ws = Workspace::new(data.arch());
    let mut x = x0.as_slice().to_vec();
    let mut g = vec![0.0; d];
    let mut columns = Vec::with_capacity(cfg.k);
    for (k, idx) in result.batch_log.iter().enumerate() {
        batch_grad_into(data, &x, idx, &mut g, &mut ws);
        columns.push(g.clone());
        // advance the iterate with the schedule's own rule
        match cfg.schedule {
            Schedule::Constant { lr } => x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= lr * gi),
            Schedule::ExpDecay { lr0, rate } => {
                let eta = lr0 * rate.powi(k as i32);
                x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= eta * gi)
            }
            Schedule::Proximal { lr, alpha } => x
                .iter_mut()
                .zip(&g)
                .zip(x0.as_slice())
                .for_each(|((xi, gi), si)| *xi -= lr * gi + alpha * (*xi - si)),
        }
    }
    let mut out = x0.as_slice().to_vec();
    for (col, ak) in columns.iter().zip(a.as_slice()) {
        for (o, c) in out.iter_mut().zip(col) {
            *o -= eta_l * ak * c;
        }
    }
    ParamVector::new(out)
}

/// Outcome of a full-batch gradient descent.
#[derive(Clone, Debug)]
pub struct DescentOutcome {
    pub x: ParamVector,
    pub iters: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Full-batch gradient descent on `x -> mean_j l(x; z_j)` with a fixed step.
pub fn full_batch_descent(
    data: &dyn DataView,
    x0: &ParamVector,
    step: f64,
    max_iters: usize,
    tol: f64,
) -> Result<DescentOutcome> {
    check_dim(data.arch().dim(), x0.dim())?;
    let n = data.len();
    let mut ws = Workspace::new(data.arch());
    descend(x0, step, max_iters, tol, |x, g| {
        crate::model::prefix_grad_into(data, x, n, g, &mut ws)
    })
}

/// Gradient descent driver over an arbitrary gradient oracle.
pub fn descend(
    x0: &ParamVector,
    step: f64,
    max_iters: usize,
    tol: f64,
    mut grad: impl FnMut(&[f64], &mut [f64]),
) -> Result<DescentOutcome> {
    let mut x = x0.as_slice().to_vec();
    let mut g = vec![0.0; x.len()];
    let mut grad_norm = f64::INFINITY;
    for it in 0..max_iters {
        grad(&x, &mut g);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: it,
                norm: grad_norm,
            });
        }
        if grad_norm <= tol {
            return Ok(DescentOutcome {
                x: ParamVector::new(x)?,
                iters: it,
                grad_norm,
                converged: true,
            });
        }
        x.iter_mut().zip(&g).for_each(|(xi, gi)| *xi -= step * gi);
    }
    if max_iters > 0 {
        grad(&x, &mut g);
        grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    let converged = grad_norm <= tol;
    Ok(DescentOutcome {
        x: ParamVector::new(x)?,
        iters: max_iters,
        grad_norm,
        converged,
    })
}
