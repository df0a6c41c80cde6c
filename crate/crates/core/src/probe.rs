//! Estimation of the variance, dissimilarity and smoothness constants.
//!
//! The assumptions quantify over every `x`; here they are realized as maxima
//! over a probe set: the reference point plus `count` points on the sphere
//! of radius `radius` around it.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{dissimilarity_constants, HeterogeneityProfile, Provenance};
use crate::error::{check_dim, Error, Result};
use crate::model::{DataView, Family, Workspace};
use crate::param::{ParamVector, TaskVector};
use crate::rng::{rng_for, stream};
use crate::tasks::{closed_form, TaskEnvironment};

fn default_count() -> usize {
    32
}
fn default_radius() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            count: default_count(),
            radius: default_radius(),
            seed: 0,
        }
    }
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `center` followed by `count` points at distance `radius`.
pub fn probe_points(center: &ParamVector, cfg: &ProbeConfig) -> Vec<ParamVector> {
    let mut rng = rng_for(cfg.seed, &[stream::PROBE]);
    let mut out = vec![center.clone()];
    for _ in 0..cfg.count {
        let u = random_unit(&mut rng, center.dim());
        let v = center
            .as_slice()
            .iter()
            .zip(&u)
            .map(|(c, d)| c + cfg.radius * d)
            .collect();
        out.push(ParamVector::new(v).expect("finite probe"));
    }
    out
}

/// Pairs `(x, x + (radius/2) u)` for every probe point `x`.
pub fn probe_pairs(center: &ParamVector, cfg: &ProbeConfig) -> Vec<(ParamVector, ParamVector)> {
    let points = probe_points(center, cfg);
    let mut rng = rng_for(cfg.seed, &[stream::PROBE, 1]);
    points
        .into_iter()
        .map(|x| {
            let u = random_unit(&mut rng, x.dim());
            let y = x
                .as_slice()
                .iter()
                .zip(&u)
                .map(|(a, d)| a + 0.5 * cfg.radius * d)
                .collect();
            (x, ParamVector::new(y).expect("finite probe"))
        })
        .collect()
}

/// `(1/n) sum_j ||grad l(x; z_j) - grad f(x)||^2`, two-pass.
pub fn per_sample_variance(view: &dyn DataView, x: &[f64]) -> f64 {
    let arch = view.arch();
    let n = view.len();
    let d = arch.dim();
    let mut ws = Workspace::new(arch);
    let mut mean = vec![0.0; d];
    crate::model::prefix_grad_into(view, x, n, &mut mean, &mut ws);
    let mut g = vec![0.0; d];
    let mut total = 0.0;
    for j in 0..n {
        g.iter_mut().zip(&mean).for_each(|(a, m)| *a = -m);
        arch.add_grad(x, view.sample(j), 1.0, &mut g, &mut ws);
        total += g.iter().map(|v| v * v).sum::<f64>();
    }
    total / n as f64
}

/// Max over probes of the per-sample gradient variance.
pub fn estimate_sigma(env: &dyn DataView, probes: &[ParamVector]) -> Result<f64> {
    for p in probes {
        check_dim(env.arch().dim(), p.dim())?;
    }
    let vals: Vec<f64> = probes
        .par_iter()
        .map(|x| per_sample_variance(env, x.as_slice()))
        .collect();
    Ok(vals.into_iter().fold(0.0, f64::max))
}

fn full_grads(envs: &[&dyn DataView], x: &[f64]) -> Vec<Vec<f64>> {
    envs.iter()
        .map(|e| {
            let mut g = vec![0.0; x.len()];
            crate::model::prefix_grad_into(*e, x, e.len(), &mut g, &mut Workspace::new(e.arch()));
            g
        })
        .collect()
}

fn deviations_from_mean(grads: &[Vec<f64>]) -> Vec<f64> {
    let n = grads.len() as f64;
    let d = grads[0].len();
    let mut mean = vec![0.0; d];
    for g in grads {
        mean.iter_mut().zip(g).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    grads
        .iter()
        .map(|g| g.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

/// Per task: max over probes of `||grad f_i(x) - (1/N) sum_j grad f_j(x)||^2`.
pub fn estimate_zeta(envs: &[&dyn DataView], probes: &[ParamVector]) -> Result<Vec<f64>> {
    if probes.is_empty() {
        return Err(Error::invalid("at least one probe point required"));
    }
    if envs.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    if envs.len() == 1 {
        return Ok(vec![0.0]);
    }
    let per_probe: Vec<Vec<f64>> = probes
        .par_iter()
        .map(|x| deviations_from_mean(&full_grads(envs, x.as_slice())))
        .collect();
    Ok(fold_max(&per_probe, envs.len()))
}

fn fold_max(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; n];
    for r in rows {
        out.iter_mut().zip(r).for_each(|(o, v)| *o = o.max(*v));
    }
    out
}

/// Max over pairs and samples of `||grad l(x;z) - grad l(y;z)|| / ||x - y||`.
pub fn estimate_l_probed(
    envs: &[&dyn DataView],
    pairs: &[(ParamVector, ParamVector)],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("at least one probe pair required"));
    }
    for (x, y) in pairs {
        if x == y {
            return Err(Error::invalid("coincident probe pair"));
        }
    }
    let vals: Vec<f64> = pairs
        .par_iter()
        .map(|(x, y)| {
            let dist = crate::param::squared_distance(x, y)
                .expect("same dim")
                .sqrt();
            let mut best = 0.0f64;
            for env in envs {
                let arch = env.arch();
                let mut ws = Workspace::new(arch);
                let mut g = vec![0.0; arch.dim()];
                for j in 0..env.len() {
                    g.iter_mut().for_each(|v| *v = 0.0);
                    arch.add_grad(x.as_slice(), env.sample(j), 1.0, &mut g, &mut ws);
                    arch.add_grad(y.as_slice(), env.sample(j), -1.0, &mut g, &mut ws);
                    best = best.max(g.iter().map(|v| v * v).sum::<f64>().sqrt() / dist);
                }
            }
            best
        })
        .collect();
    Ok(vals.into_iter().fold(0.0, f64::max))
}

/// Headroom on the probed smoothness constant. A finite probe set
/// underestimates a supremum; doubling the probe count moves the raw
/// estimate by well under this factor.
pub const PROBED_L_MARGIN: f64 = 1.25;

/// Smoothness of every per-sample loss: closed form `max_j ||phi_j||^2` for
/// least squares, otherwise the probed maximum times [`PROBED_L_MARGIN`].
pub fn estimate_l(
    envs: &[&TaskEnvironment],
    pairs: &[(ParamVector, ParamVector)],
) -> Result<(f64, Provenance)> {
    if envs.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    if envs[0].arch().family == Family::LeastSquares {
        let l = envs
            .iter()
            .filter_map(|e| e.sample_smoothness())
            .fold(0.0, f64::max);
        return Ok((l, Provenance::ClosedForm));
    }
    let views: Vec<&dyn DataView> = envs.iter().map(|e| *e as &dyn DataView).collect();
    Ok((
        PROBED_L_MARGIN * estimate_l_probed(&views, pairs)?,
        Provenance::Probed,
    ))
}

/// Largest eigenvalue of `(1/n) sum_j phi_j phi_j^T` by power iteration:
/// the smoothness constant of a least-squares empirical risk.
pub fn risk_smoothness(envs: &[&TaskEnvironment], iters: usize) -> f64 {
    let p = envs[0].arch().p;
    let apply = |v: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; p];
        for e in envs {
            let inv = 1.0 / (e.n() as f64 * envs.len() as f64);
            for s in e.dataset() {
                let c = inv * crate::model::dot(&s.features, v);
                out.iter_mut()
                    .zip(&s.features)
                    .for_each(|(o, f)| *o += c * f);
            }
        }
        out
    };
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = apply(&v);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = crate::model::dot(&v, &w);
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Probed profile: per-task `sigma_i^2`, `zeta_i^2` over the probe set around `center`.
pub fn probe_profile(
    envs: &[&TaskEnvironment],
    center: &ParamVector,
    cfg: &ProbeConfig,
) -> Result<HeterogeneityProfile> {
    let probes = probe_points(center, cfg);
    let views: Vec<&dyn DataView> = envs.iter().map(|e| *e as &dyn DataView).collect();
    let sigma_sq = views
        .iter()
        .map(|v| estimate_sigma(*v, &probes))
        .collect::<Result<Vec<_>>>()?;
    let zeta_sq = estimate_zeta(&views, &probes)?;
    let (l, _) = estimate_l(envs, &probe_pairs(center, cfg))?;
    Ok(HeterogeneityProfile {
        sigma_sq,
        zeta_sq,
        l,
        provenance: Provenance::Probed,
    })
}

/// Closed-form least-squares profile: population variance and dissimilarity
/// maximized over the probe set, `L = max_j ||phi_j||^2`.
pub fn closed_form_profile(
    envs: &[&TaskEnvironment],
    center: &ParamVector,
    cfg: &ProbeConfig,
) -> Result<HeterogeneityProfile> {
    if envs.iter().any(|e| e.spec().linear_w().is_none()) {
        return Err(Error::invalid(
            "closed-form profile exists only for the least-squares family",
        ));
    }
    let probes = probe_points(center, cfg);
    let n = envs.len();
    let mut sigma_sq = vec![0.0f64; n];
    let mut zeta_sq = vec![0.0f64; n];
    for x in &probes {
        let grads: Vec<Vec<f64>> = envs
            .iter()
            .map(|e| closed_form::population_grad(e.spec(), x.as_slice()))
            .collect();
        let dev = if n > 1 {
            deviations_from_mean(&grads)
        } else {
            vec![0.0]
        };
        for i in 0..n {
            sigma_sq[i] = sigma_sq[i].max(closed_form::sample_grad_variance(
                envs[i].spec(),
                x.as_slice(),
            ));
            zeta_sq[i] = zeta_sq[i].max(dev[i]);
        }
    }
    let l = envs
        .iter()
        .filter_map(|e| e.sample_smoothness())
        .fold(0.0, f64::max);
    Ok(HeterogeneityProfile {
        sigma_sq,
        zeta_sq,
        l,
        provenance: Provenance::ClosedForm,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityReport {
    pub beta_sq: f64,
    pub kappa_sq: f64,
    /// `(lhs, rhs)` per probe.
    pub per_probe: Vec<(f64, f64)>,
    pub violations: usize,
    pub max_violation: f64,
}

/// Checks `sum_i lambda_i ||grad f_i||^2 <= beta^2 ||sum_i lambda_i grad f_i||^2 + kappa^2`.
pub fn verify_grad_dissimilarity(
    envs: &[&dyn DataView],
    lambdas: &[f64],
    probes: &[ParamVector],
    zeta_sq: &[f64],
) -> Result<DissimilarityReport> {
    if probes.is_empty() {
        return Err(Error::invalid("at least one probe point required"));
    }
    let (beta_sq, kappa_sq) = dissimilarity_constants(lambdas, zeta_sq)?;
    let per_probe: Vec<(f64, f64)> = probes
        .par_iter()
        .map(|x| {
            let grads = full_grads(envs, x.as_slice());
            let lhs: f64 = grads
                .iter()
                .zip(lambdas)
                .map(|(g, l)| l * g.iter().map(|v| v * v).sum::<f64>())
                .sum();
            let mut mix = vec![0.0; x.dim()];
            for (g, l) in grads.iter().zip(lambdas) {
                mix.iter_mut().zip(g).for_each(|(m, v)| *m += l * v);
            }
            let rhs = beta_sq * mix.iter().map(|v| v * v).sum::<f64>() + kappa_sq;
            (lhs, rhs)
        })
        .collect();
    let tol = |rhs: f64| 1e-12 * rhs.abs().max(1.0);
    let violations = per_probe.iter().filter(|(l, r)| l - r > tol(*r)).count();
    let max_violation = per_probe
        .iter()
        .map(|(l, r)| l - r)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DissimilarityReport {
        beta_sq,
        kappa_sq,
        per_probe,
        violations,
        max_violation,
    })
}

/// `(1/n) sum_j phi_j <phi_j, v>` for a least-squares task.
pub fn gram_apply(env: &TaskEnvironment, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    let inv = 1.0 / env.n() as f64;
    for s in env.dataset() {
        let c = inv * crate::model::dot(&s.features, v);
        out.iter_mut()
            .zip(&s.features)
            .for_each(|(o, f)| *o += c * f);
    }
    out
}

/// Dissimilarity of a task-vector ensemble seen through quadratic surrogates:
/// task `i` is modelled as `f'_i(x) = 0.5 (x - x0 - tau_i)^T G_i (x - x0 - tau_i)`
/// with `G_i` the task's empirical Gram matrix, and `zeta'_i^2` is the max over
/// the probes of `||grad f'_i - mean_j grad f'_j||^2`.
pub fn surrogate_zeta(
    envs: &[&TaskEnvironment],
    base: &ParamVector,
    taskvecs: &[TaskVector],
    probes: &[ParamVector],
) -> Result<Vec<f64>> {
    if envs.len() != taskvecs.len() {
        return Err(Error::CoefficientCount {
            coeffs: taskvecs.len(),
            vectors: envs.len(),
        });
    }
    if envs.iter().any(|e| e.arch().family != Family::LeastSquares) {
        return Err(Error::invalid(
            "surrogate dissimilarity is defined for least squares",
        ));
    }
    let rows: Vec<Vec<f64>> = probes
        .iter()
        .map(|x| {
            let grads: Vec<Vec<f64>> = envs
                .iter()
                .zip(taskvecs)
                .map(|(e, tv)| {
                    let r: Vec<f64> = x
                        .as_slice()
                        .iter()
                        .zip(base.as_slice())
                        .zip(tv.as_slice())
                        .map(|((xi, bi), ti)| xi - bi - ti)
                        .collect();
                    gram_apply(e, &r)
                })
                .collect();
            deviations_from_mean(&grads)
        })
        .collect();
    Ok(fold_max(&rows, envs.len()))
}
