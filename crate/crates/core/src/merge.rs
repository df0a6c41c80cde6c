//! Merging strategies over task vectors.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::model::{Architecture, Sample, Workspace};
use crate::param::{
    merge_linear, task_vector, weighted_sum, MergeCoefficients, ParamVector, TaskVector,
};
use crate::rng::{rng_for, stream};
use crate::simplex;
use crate::trainer::TrainResult;

pub fn uniform_average(base: &ParamVector, taskvecs: &[TaskVector]) -> Result<ParamVector> {
    merge_linear(base, taskvecs, &MergeCoefficients::uniform(taskvecs.len())?)
}

/// `base + scale * sum_i tau_i`.
pub fn task_arithmetic(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    scale: f64,
) -> Result<ParamVector> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!(
            "task-arithmetic scale must be positive, got {scale}"
        )));
    }
    if taskvecs.is_empty() {
        return Err(Error::invalid("no task vectors"));
    }
    weighted_sum(base, taskvecs, &vec![scale; taskvecs.len()])
}

/// Decomposition `x_avg = x0 - tau_eff * sum_i lambda_i * eta_l,i * d_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMergePlan {
    pub tau_eff: f64,
    pub lambdas: MergeCoefficients,
    /// `d_i = (x0 - x_i) / (eta_l,i * ||a_i||_1)`.
    #[serde(skip)]
    pub normalized_dirs: Vec<ParamVector>,
    pub eta_l: Vec<f64>,
}

pub fn normalized_merge(
    base: &ParamVector,
    results: &[TrainResult],
) -> Result<(ParamVector, NormalizedMergePlan)> {
    let n = results.len();
    if n == 0 {
        return Err(Error::invalid("no train results"));
    }
    let norms: Vec<f64> = results.iter().map(|r| r.weight_vector.l1()).collect();
    let total: f64 = norms.iter().sum();
    let tau_eff = total / n as f64;
    let lambdas = MergeCoefficients::new(norms.iter().map(|a| a / total).collect())?;
    let mut dirs = Vec::with_capacity(n);
    for (r, a1) in results.iter().zip(&norms) {
        check_dim(base.dim(), r.final_params.dim())?;
        let c = 1.0 / (r.eta_l * a1);
        let d = base
            .as_slice()
            .iter()
            .zip(r.final_params.as_slice())
            .map(|(b, x)| (b - x) * c)
            .collect();
        dirs.push(ParamVector::new(d)?);
    }
    let mut out = base.as_slice().to_vec();
    for ((d, lam), r) in dirs.iter().zip(lambdas.as_slice()).zip(results) {
        let c = tau_eff * lam * r.eta_l;
        for (o, v) in out.iter_mut().zip(d.as_slice()) {
            *o -= c * v;
        }
    }
    let plan = NormalizedMergePlan {
        tau_eff,
        lambdas,
        normalized_dirs: dirs,
        eta_l: results.iter().map(|r| r.eta_l).collect(),
    };
    Ok((ParamVector::new(out)?, plan))
}

fn check_density(density: f64) -> Result<()> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid(format!("density {density} outside (0, 1]")));
    }
    Ok(())
}

/// Keeps the `ceil(density * d)` largest-magnitude entries; ties at the cutoff
/// keep the lower index.
pub fn ties_trim(tv: &TaskVector, density: f64) -> Result<Vec<f64>> {
    check_density(density)?;
    let v = tv.as_slice();
    let keep = ((density * v.len() as f64).ceil() as usize).clamp(1, v.len().max(1));
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &k in &order[..keep.min(v.len())] {
        out[k] = v[k];
    }
    Ok(out)
}

/// Elected sign per coordinate: sign of the unweighted sum of trimmed entries;
/// a zero sum takes the sign of the largest-magnitude entry, then `+`.
/// Returns 0 where every trimmed entry is zero.
pub fn ties_elect(trimmed: &[Vec<f64>]) -> Vec<f64> {
    let d = trimmed.first().map_or(0, Vec::len);
    (0..d)
        .map(|k| {
            let sum: f64 = trimmed.iter().map(|t| t[k]).sum();
            if sum > 0.0 {
                1.0
            } else if sum < 0.0 {
                -1.0
            } else {
                let max = trimmed.iter().map(|t| t[k].abs()).fold(0.0, f64::max);
                if max == 0.0 {
                    return 0.0;
                }
                let pos = trimmed.iter().any(|t| t[k] == max);
                let neg = trimmed.iter().any(|t| t[k] == -max);
                if neg && !pos {
                    -1.0
                } else {
                    1.0
                }
            }
        })
        .collect()
}

/// Trimmed task vectors with entries disagreeing with the elected sign zeroed.
pub fn ties_effective_vectors(taskvecs: &[TaskVector], density: f64) -> Result<Vec<TaskVector>> {
    let trimmed = taskvecs
        .iter()
        .map(|t| ties_trim(t, density))
        .collect::<Result<Vec<_>>>()?;
    let signs = ties_elect(&trimmed);
    trimmed
        .into_iter()
        .map(|t| {
            let v = t
                .iter()
                .zip(&signs)
                .map(|(x, s)| if x * s > 0.0 { *x } else { 0.0 })
                .collect();
            Ok(TaskVector::from_delta(ParamVector::new(v)?))
        })
        .collect()
}

/// Trim, elect, and disjoint weighted mean over agreeing entries.
pub fn ties_merge(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    density: f64,
    coeffs: &MergeCoefficients,
) -> Result<ParamVector> {
    check_density(density)?;
    if taskvecs.len() != coeffs.len() {
        return Err(Error::CoefficientCount {
            coeffs: coeffs.len(),
            vectors: taskvecs.len(),
        });
    }
    for tv in taskvecs {
        check_dim(base.dim(), tv.dim())?;
    }
    let effective = ties_effective_vectors(taskvecs, density)?;
    let lam = coeffs.as_slice();
    let out = base
        .as_slice()
        .iter()
        .enumerate()
        .map(|(k, b)| {
            let mut num = 0.0;
            let mut den = 0.0;
            for (tv, l) in effective.iter().zip(lam) {
                let v = tv.as_slice()[k];
                if v != 0.0 {
                    num += l * v;
                    den += l;
                }
            }
            if den > 0.0 {
                b + num / den
            } else {
                *b
            }
        })
        .collect();
    ParamVector::new(out)
}

/// Drop-and-rescale mask of task `i`: entries kept with probability `1 - p`
/// and scaled by `1 / (1 - p)`.
pub fn dare_mask(tv: &TaskVector, drop_p: f64, seed: u64, task: usize) -> Result<TaskVector> {
    use rand::Rng;
    if !(0.0..1.0).contains(&drop_p) {
        return Err(Error::invalid(format!("drop_p {drop_p} outside [0, 1)")));
    }
    let mut rng = rng_for(seed, &[stream::MASK, task as u64]);
    let scale = 1.0 / (1.0 - drop_p);
    let v = tv
        .as_slice()
        .iter()
        .map(|x| {
            if rng.random::<f64>() < drop_p {
                0.0
            } else {
                x * scale
            }
        })
        .collect();
    Ok(TaskVector::from_delta(ParamVector::new(v)?))
}

pub fn dare_merge(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    drop_p: f64,
    coeffs: &MergeCoefficients,
    seed: u64,
) -> Result<ParamVector> {
    let masked = taskvecs
        .iter()
        .enumerate()
        .map(|(i, tv)| dare_mask(tv, drop_p, seed, i))
        .collect::<Result<Vec<_>>>()?;
    merge_linear(base, &masked, coeffs)
}

/// Heldout samples of one task for coefficient learning.
#[derive(Clone, Debug)]
pub struct HeldoutSet {
    pub arch: Architecture,
    pub samples: Vec<Sample>,
}

impl HeldoutSet {
    /// The unused dataset suffix if it holds at least `m` samples, otherwise
    /// `m` fresh draws from the task distribution.
    pub fn for_task(
        env: &crate::tasks::TaskEnvironment,
        n_used: usize,
        m: usize,
        seed: u64,
    ) -> Self {
        use crate::model::DataView;
        let suffix = &env.dataset()[n_used.min(env.n())..];
        let samples = if suffix.len() >= m && m > 0 {
            suffix[..m].to_vec()
        } else {
            env.draw_samples(m, seed, stream::HELDOUT)
        };
        Self {
            arch: *env.arch(),
            samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveConfig {
    pub steps: usize,
    pub step_size: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptiveOutcome {
    pub coeffs: MergeCoefficients,
    /// Heldout objective after each accepted iterate, starting at uniform.
    pub losses: Vec<f64>,
    /// Every iterate, starting at uniform.
    pub trace: Vec<Vec<f64>>,
}

/// Mean over tasks of the mean heldout loss.
fn heldout_objective(x: &[f64], heldout: &[HeldoutSet]) -> f64 {
    heldout
        .iter()
        .map(|h| h.samples.iter().map(|s| h.arch.loss(x, s)).sum::<f64>() / h.samples.len() as f64)
        .sum::<f64>()
        / heldout.len() as f64
}

fn heldout_grad(x: &[f64], heldout: &[HeldoutSet]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut part = vec![0.0; x.len()];
    for h in heldout {
        let mut ws = Workspace::new(&h.arch);
        part.iter_mut().for_each(|v| *v = 0.0);
        for s in &h.samples {
            h.arch.add_grad(x, s, 1.0, &mut part, &mut ws);
        }
        let c = 1.0 / (h.samples.len() as f64 * heldout.len() as f64);
        out.iter_mut().zip(&part).for_each(|(o, p)| *o += c * p);
    }
    out
}

/// Mean heldout loss of the linear merge at `lambdas`.
pub fn heldout_loss(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    lambdas: &[f64],
    heldout: &[HeldoutSet],
) -> Result<f64> {
    let x = weighted_sum(base, taskvecs, lambdas)?;
    Ok(heldout_objective(x.as_slice(), heldout))
}

pub fn adaptive_coefficients(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    heldout: &[HeldoutSet],
    cfg: &AdaptiveConfig,
) -> Result<MergeCoefficients> {
    adaptive_coefficients_traced(base, taskvecs, heldout, cfg).map(|o| o.coeffs)
}

/// Projected gradient descent on the simplex with Armijo backtracking,
/// started from uniform weights.
pub fn adaptive_coefficients_traced(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    heldout: &[HeldoutSet],
    cfg: &AdaptiveConfig,
) -> Result<AdaptiveOutcome> {
    let n = taskvecs.len();
    if n == 0 {
        return Err(Error::invalid("no task vectors"));
    }
    if heldout.is_empty() || heldout.iter().any(|h| h.samples.is_empty()) {
        return Err(Error::invalid("empty heldout set"));
    }
    if cfg.steps == 0 || !(cfg.step_size > 0.0 && cfg.step_size.is_finite()) {
        return Err(Error::invalid(
            "adaptive merge needs steps >= 1 and a positive step size",
        ));
    }
    let mut lam = vec![1.0 / n as f64; n];
    let mut value = heldout_loss(base, taskvecs, &lam, heldout)?;
    if !value.is_finite() {
        return Err(Error::invalid("non-finite heldout loss"));
    }
    let mut losses = vec![value];
    let mut trace = vec![lam.clone()];
    if n == 1 {
        return Ok(AdaptiveOutcome {
            coeffs: MergeCoefficients::new(lam)?,
            losses,
            trace,
        });
    }
    for _ in 0..cfg.steps {
        let x = weighted_sum(base, taskvecs, &lam)?;
        let gx = heldout_grad(x.as_slice(), heldout);
        let g: Vec<f64> = taskvecs
            .iter()
            .map(|tv| tv.as_slice().iter().zip(&gx).map(|(a, b)| a * b).sum())
            .collect();
        let mut t = cfg.step_size;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = simplex::project(
                &lam.iter()
                    .zip(&g)
                    .map(|(l, gi)| l - t * gi)
                    .collect::<Vec<_>>(),
            );
            let decrease: f64 = g
                .iter()
                .zip(lam.iter().zip(&cand))
                .map(|(gi, (l, c))| gi * (l - c))
                .sum();
            if decrease <= 0.0 {
                break;
            }
            let v = heldout_loss(base, taskvecs, &cand, heldout)?;
            if !v.is_finite() {
                return Err(Error::invalid("non-finite heldout loss"));
            }
            if v <= value - 1e-4 * decrease {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, v)) => {
                lam = cand;
                value = v;
                losses.push(v);
                trace.push(lam.clone());
            }
            None => break,
        }
    }
    Ok(AdaptiveOutcome {
        coeffs: MergeCoefficients::new(lam)?,
        losses,
        trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeMethod {
    Uniform,
    TaskArith,
    Normalized,
    Ties,
    Dare,
    Adaptive,
}

impl MergeMethod {
    pub fn name(&self) -> &'static str {
        match self {
            MergeMethod::Uniform => "uniform",
            MergeMethod::TaskArith => "task-arith",
            MergeMethod::Normalized => "normalized",
            MergeMethod::Ties => "ties",
            MergeMethod::Dare => "dare",
            MergeMethod::Adaptive => "adaptive",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drop_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    /// Heldout samples per task for the adaptive method.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_m: Option<usize>,
}

/// `{method, params: {...}, seed}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub method: MergeMethod,
    #[serde(default)]
    pub params: MergeParams,
    #[serde(default)]
    pub seed: u64,
    /// Report label; defaults to the method name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Everything a merge may consume.
pub struct MergeInputs<'a> {
    pub base: &'a ParamVector,
    pub experts: &'a [ParamVector],
    /// Needed by the normalized method.
    pub results: Option<&'a [TrainResult]>,
    /// Needed by the adaptive method.
    pub heldout: Option<&'a [HeldoutSet]>,
}

#[derive(Clone, Debug)]
pub struct MergeOutcome {
    pub merged: ParamVector,
    /// Coefficients fed to the bound calculator.
    pub lambdas: MergeCoefficients,
}

impl MergeSpec {
    pub fn uniform() -> Self {
        Self {
            method: MergeMethod::Uniform,
            params: MergeParams::default(),
            seed: 0,
            label: None,
        }
    }

    pub fn label(&self) -> String {
        self.label
            .clone()
            .unwrap_or_else(|| self.method.name().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        match self.method {
            MergeMethod::TaskArith => {
                let s = p
                    .scale
                    .ok_or_else(|| Error::invalid("task-arith needs params.scale"))?;
                if !(s > 0.0) {
                    return Err(Error::invalid(format!(
                        "task-arithmetic scale must be positive, got {s}"
                    )));
                }
            }
            MergeMethod::Ties => check_density(
                p.density
                    .ok_or_else(|| Error::invalid("ties needs params.density"))?,
            )?,
            MergeMethod::Dare => {
                let d = p
                    .drop_p
                    .ok_or_else(|| Error::invalid("dare needs params.drop_p"))?;
                if !(0.0..1.0).contains(&d) {
                    return Err(Error::invalid(format!("drop_p {d} outside [0, 1)")));
                }
            }
            MergeMethod::Adaptive => {
                if p.steps.unwrap_or(50) == 0 || !(p.step_size.unwrap_or(1.0) > 0.0) {
                    return Err(Error::invalid(
                        "adaptive needs steps >= 1 and step_size > 0",
                    ));
                }
            }
            MergeMethod::Uniform | MergeMethod::Normalized => {}
        }
        if let Some(l) = &p.lambdas {
            MergeCoefficients::new(l.clone())?;
        }
        Ok(())
    }

    fn coeffs(&self, n: usize) -> Result<MergeCoefficients> {
        match &self.params.lambdas {
            Some(l) => {
                let c = MergeCoefficients::new(l.clone())?;
                if c.len() != n {
                    return Err(Error::CoefficientCount {
                        coeffs: c.len(),
                        vectors: n,
                    });
                }
                Ok(c)
            }
            None => MergeCoefficients::uniform(n),
        }
    }

    pub fn adaptive_config(&self) -> AdaptiveConfig {
        AdaptiveConfig {
            steps: self.params.steps.unwrap_or(50),
            step_size: self.params.step_size.unwrap_or(1.0),
        }
    }

    pub fn apply(&self, inputs: &MergeInputs<'_>) -> Result<MergeOutcome> {
        self.validate()?;
        let base = inputs.base;
        let n = inputs.experts.len();
        if n == 0 {
            return Err(Error::invalid("no experts to merge"));
        }
        let tvs = inputs
            .experts
            .iter()
            .map(|e| task_vector(e, base))
            .collect::<Result<Vec<_>>>()?;
        let p = &self.params;
        match self.method {
            MergeMethod::Uniform => Ok(MergeOutcome {
                merged: uniform_average(base, &tvs)?,
                lambdas: MergeCoefficients::uniform(n)?,
            }),
            MergeMethod::TaskArith => Ok(MergeOutcome {
                merged: task_arithmetic(base, &tvs, p.scale.expect("validated"))?,
                lambdas: MergeCoefficients::uniform(n)?,
            }),
            MergeMethod::Normalized => {
                let results = inputs
                    .results
                    .ok_or_else(|| Error::invalid("normalized merge needs weight vectors"))?;
                if results.len() != n {
                    return Err(Error::invalid(
                        "normalized merge needs one weight vector per expert",
                    ));
                }
                let (merged, plan) = normalized_merge(base, results)?;
                Ok(MergeOutcome {
                    merged,
                    lambdas: plan.lambdas,
                })
            }
            MergeMethod::Ties => {
                let c = self.coeffs(n)?;
                Ok(MergeOutcome {
                    merged: ties_merge(base, &tvs, p.density.expect("validated"), &c)?,
                    lambdas: c,
                })
            }
            MergeMethod::Dare => {
                let c = self.coeffs(n)?;
                Ok(MergeOutcome {
                    merged: dare_merge(base, &tvs, p.drop_p.expect("validated"), &c, self.seed)?,
                    lambdas: c,
                })
            }
            MergeMethod::Adaptive => {
                let heldout = inputs
                    .heldout
                    .ok_or_else(|| Error::invalid("adaptive merge needs heldout data"))?;
                let c = adaptive_coefficients(base, &tvs, heldout, &self.adaptive_config())?;
                Ok(MergeOutcome {
                    merged: merge_linear(base, &tvs, &c)?,
                    lambdas: c,
                })
            }
        }
    }
}
