//! Empirical stability, generalization-gap and excess-error measurements.
//!
//! Stability is measured with coupled runs: the perturbed run replays the
//! unperturbed run's batch-index stream, so the two trajectories differ only
//! through the replaced sample.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merge::{HeldoutSet, MergeInputs, MergeSpec};
use crate::model::{DataView, Family, Workspace};
use crate::param::{squared_distance, ParamVector};
use crate::probe::{estimate_l_probed, probe_pairs, risk_smoothness, ProbeConfig};
use crate::rng::{derive, rng_for, stream};
use crate::stats;
use crate::tasks::{population_risk_estimate, solve_weighted_least_squares, TaskEnvironment};
use crate::trainer::{descend, finetune, FinetuneConfig, TrainResult};

pub const MIN_REPLICATES: usize = 10;
const BOOTSTRAP_RESAMPLES: usize = 200;

/// How the replaced index and replacement sample are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "index")]
pub enum PerturbationMode {
    /// Uniform `j` and a fresh replacement per replicate.
    Random,
    /// Always index `j`, fresh replacement (debugging).
    FixedIndex(usize),
    /// Uniform `j`, replacement equal to the original sample.
    Null,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrial {
    pub replicate: usize,
    pub task: usize,
    pub j: usize,
    /// `||x_i - x~_i||^2` of the perturbed task's expert.
    pub local_sq: f64,
    /// `||x_avg - x~_avg||^2` after merging (equals `local_sq` for a single task).
    pub merged_sq: f64,
    /// Coefficient the merge gave the perturbed task.
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub eps_sq: f64,
    pub replicates: usize,
    /// Per-task mean squared merged distance.
    pub per_task: Vec<f64>,
    /// Per-replicate mean over tasks.
    pub replicate_values: Vec<f64>,
    pub ci_halfwidth: f64,
    pub trials: Vec<StabilityTrial>,
    /// Unperturbed finals recomputed after the perturbed phase matched the cache.
    pub cache_audit_ok: bool,
}

impl StabilityEstimate {
    fn from_trials(
        trials: Vec<StabilityTrial>,
        replicates: usize,
        tasks: usize,
        seed: u64,
        cache_audit_ok: bool,
    ) -> Self {
        let mut per_task = vec![0.0; tasks];
        let mut replicate_values = vec![0.0; replicates];
        for t in &trials {
            per_task[t.task] += t.merged_sq / replicates as f64;
            replicate_values[t.replicate] += t.merged_sq / tasks as f64;
        }
        let eps_sq = stats::mean(&per_task);
        let ci_halfwidth = stats::bootstrap_halfwidth(&replicate_values, BOOTSTRAP_RESAMPLES, seed);
        Self {
            eps_sq,
            replicates,
            per_task,
            replicate_values,
            ci_halfwidth,
            trials,
            cache_audit_ok,
        }
    }

    pub fn median(&self) -> f64 {
        stats::median(&self.replicate_values)
    }
}

/// Everything needed to train and merge one set of experts.
#[derive(Clone, Copy)]
pub struct MergeSetup<'a> {
    pub base: &'a ParamVector,
    pub envs: &'a [TaskEnvironment],
    pub cfgs: &'a [FinetuneConfig],
    pub merge: &'a MergeSpec,
    /// Required by adaptive merges only.
    pub heldout: Option<&'a [HeldoutSet]>,
}

impl MergeSetup<'_> {
    fn validate(&self) -> Result<()> {
        if self.envs.is_empty() {
            return Err(Error::invalid("no tasks"));
        }
        if self.cfgs.len() != self.envs.len() {
            return Err(Error::invalid(format!(
                "{} configs for {} tasks",
                self.cfgs.len(),
                self.envs.len()
            )));
        }
        self.merge.validate()
    }

    fn train_all(&self) -> Result<Vec<TrainResult>> {
        self.envs
            .par_iter()
            .zip(self.cfgs.par_iter())
            .map(|(e, c)| finetune(self.base, e, c))
            .collect()
    }

    fn merge_results(&self, results: &[TrainResult]) -> Result<(ParamVector, Vec<f64>)> {
        let experts: Vec<ParamVector> = results.iter().map(|r| r.final_params.clone()).collect();
        let out = self.merge.apply(&MergeInputs {
            base: self.base,
            experts: &experts,
            results: Some(results),
            heldout: self.heldout,
        })?;
        Ok((out.merged, out.lambdas.as_slice().to_vec()))
    }
}

fn check_replicates(replicates: usize) -> Result<()> {
    if replicates < MIN_REPLICATES {
        return Err(Error::invalid(format!(
            "replicates must be at least {MIN_REPLICATES}, got {replicates}"
        )));
    }
    Ok(())
}

/// Draws `(j, replacement seed)` for one replicate and task.
fn draw_perturbation(
    seed: u64,
    replicate: usize,
    task: usize,
    n_used: usize,
    mode: PerturbationMode,
) -> (usize, u64) {
    let mut rng = rng_for(seed, &[stream::REPLICATE, replicate as u64, task as u64]);
    let j = rng.random_range(0..n_used);
    let rep_seed = rng.random::<u64>();
    match mode {
        PerturbationMode::FixedIndex(fixed) => (fixed, rep_seed),
        _ => (j, rep_seed),
    }
}

/// Coupled rerun of `cached` on task `env` with sample `j` replaced.
/// When the unperturbed run never sampled `j` the two runs are identical and
/// the rerun is skipped.
fn perturbed_run(
    base: &ParamVector,
    env: &TaskEnvironment,
    cfg: &FinetuneConfig,
    cached: &TrainResult,
    j: usize,
    rep_seed: u64,
    mode: PerturbationMode,
) -> Result<Option<TrainResult>> {
    if !cached.touches(j) {
        return Ok(None);
    }
    let data = match mode {
        PerturbationMode::Null => env.null_perturbation(j)?,
        _ => env.perturb(j, rep_seed)?,
    };
    finetune(base, &data, cfg).map(Some)
}

/// Single-task on-average stability: mean over replicates of the squared
/// distance between coupled fine-tunes.
pub fn empirical_local_stability(
    base: &ParamVector,
    env: &TaskEnvironment,
    cfg: &FinetuneConfig,
    replicates: usize,
    seed: u64,
    mode: PerturbationMode,
) -> Result<StabilityEstimate> {
    check_replicates(replicates)?;
    let n_used = cfg.n_used(env.n());
    if let PerturbationMode::FixedIndex(j) = mode {
        if j >= n_used {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: n_used,
            });
        }
    }
    let cached = finetune(base, env, cfg)?;
    let trials = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let (j, rep_seed) = draw_perturbation(seed, r, env.task_id(), n_used, mode);
            let sq = match perturbed_run(base, env, cfg, &cached, j, rep_seed, mode)? {
                Some(p) => squared_distance(&cached.final_params, &p.final_params)?,
                None => 0.0,
            };
            Ok(StabilityTrial {
                replicate: r,
                task: 0,
                j,
                local_sq: sq,
                merged_sq: sq,
                lambda: 1.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let audit = finetune(base, env, cfg)?.final_params.digest() == cached.final_params.digest();
    Ok(StabilityEstimate::from_trials(
        trials, replicates, 1, seed, audit,
    ))
}

/// Trials of one replicate: every task perturbed in turn against cached finals.
fn global_replicate(
    setup: &MergeSetup<'_>,
    cached: &[TrainResult],
    merged: &ParamVector,
    r: usize,
    seed: u64,
    mode: PerturbationMode,
) -> Result<Vec<StabilityTrial>> {
    let mut out = Vec::with_capacity(setup.envs.len());
    for (i, (env, cfg)) in setup.envs.iter().zip(setup.cfgs).enumerate() {
        let n_used = cfg.n_used(env.n());
        let (j, rep_seed) = draw_perturbation(seed, r, i, n_used, mode);
        let trial = match perturbed_run(setup.base, env, cfg, &cached[i], j, rep_seed, mode)? {
            None => {
                let (_, lambdas) = setup.merge_results(cached)?;
                StabilityTrial {
                    replicate: r,
                    task: i,
                    j,
                    local_sq: 0.0,
                    merged_sq: 0.0,
                    lambda: lambdas[i],
                }
            }
            Some(p) => {
                let local_sq = squared_distance(&cached[i].final_params, &p.final_params)?;
                let mut results = cached.to_vec();
                results[i] = p;
                let (perturbed_merge, lambdas) = setup.merge_results(&results)?;
                let merged_sq = squared_distance(merged, &perturbed_merge)?;
                StabilityTrial {
                    replicate: r,
                    task: i,
                    j,
                    local_sq,
                    merged_sq,
                    lambda: lambdas[i],
                }
            }
        };
        out.push(trial);
    }
    Ok(out)
}

/// On-average stability of the merged model: the mean over tasks `i` (equal
/// weights) and replicates of `||x_avg - x~_avg||^2` where only task `i`'s
/// dataset is perturbed.
pub fn empirical_global_stability(
    setup: &MergeSetup<'_>,
    replicates: usize,
    seed: u64,
    mode: PerturbationMode,
) -> Result<StabilityEstimate> {
    setup.validate()?;
    check_replicates(replicates)?;
    if let PerturbationMode::FixedIndex(j) = mode {
        for (e, c) in setup.envs.iter().zip(setup.cfgs) {
            if j >= c.n_used(e.n()) {
                return Err(Error::IndexOutOfRange {
                    index: j,
                    len: c.n_used(e.n()),
                });
            }
        }
    }
    let cached = setup.train_all()?;
    let (merged, _) = setup.merge_results(&cached)?;
    let per_rep = (0..replicates)
        .into_par_iter()
        .map(|r| global_replicate(setup, &cached, &merged, r, seed, mode))
        .collect::<Result<Vec<_>>>()?;
    let fresh = setup.train_all()?;
    let audit = fresh
        .iter()
        .zip(&cached)
        .all(|(a, b)| a.final_params.digest() == b.final_params.digest());
    let trials = per_rep.into_iter().flatten().collect();
    Ok(StabilityEstimate::from_trials(
        trials,
        replicates,
        setup.envs.len(),
        seed,
        audit,
    ))
}

fn default_max_iters() -> usize {
    100_000
}
fn default_tol() -> f64 {
    1e-8
}

/// Budget of the oracle empirical-risk minimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Step size; defaults to `1/(2 L^)` with `L^` the risk smoothness.
    #[serde(default)]
    pub step: Option<f64>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            max_iters: default_max_iters(),
            tol: default_tol(),
            step: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleOutcome {
    pub x: ParamVector,
    pub risk: f64,
    pub iters: usize,
    pub grad_norm: f64,
    pub converged: bool,
    /// Risk gap to the normal-equation solution (least squares only).
    pub closed_form_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    /// `F^(x) - f(x)`.
    pub gen_gap: f64,
    /// `||grad f(x)||^2` of the task-averaged empirical risk.
    pub grad_norm_sq: f64,
    /// `F^(x) - f(x_oracle)`.
    pub excess_proxy: f64,
    pub population_risk: f64,
    pub empirical_risk: f64,
    pub oracle: OracleOutcome,
}

/// Task-averaged empirical risk `f = (1/N) sum_i f_i`.
pub fn joint_empirical_risk(envs: &[TaskEnvironment], x: &[f64]) -> f64 {
    envs.iter()
        .map(|e| crate::model::prefix_risk(e, x, e.n()))
        .sum::<f64>()
        / envs.len() as f64
}

/// Gradient of [`joint_empirical_risk`].
pub fn joint_grad_into(envs: &[TaskEnvironment], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut part = vec![0.0; x.len()];
    for e in envs {
        let mut ws = Workspace::new(e.arch());
        crate::model::prefix_grad_into(e, x, e.n(), &mut part, &mut ws);
        out.iter_mut()
            .zip(&part)
            .for_each(|(o, p)| *o += p / envs.len() as f64);
    }
}

fn joint_smoothness(envs: &[TaskEnvironment], x0: &ParamVector) -> Result<f64> {
    let refs: Vec<&TaskEnvironment> = envs.iter().collect();
    match envs[0].arch().family {
        Family::LeastSquares => Ok(risk_smoothness(&refs, 500)),
        // Per-sample probed smoothness around the start bounds the risk's locally.
        Family::MlpTanh => {
            let views: Vec<&dyn DataView> = envs.iter().map(|e| e as &dyn DataView).collect();
            estimate_l_probed(&views, &probe_pairs(x0, &ProbeConfig::default()))
        }
    }
}

/// Long full-batch descent on `f` from `x0`.
pub fn oracle_erm(
    envs: &[TaskEnvironment],
    x0: &ParamVector,
    cfg: &OracleConfig,
) -> Result<OracleOutcome> {
    if envs.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    let step = match cfg.step {
        Some(s) => s,
        None => 0.5 / joint_smoothness(envs, x0)?.max(1e-12),
    };
    let out = descend(x0, step, cfg.max_iters, cfg.tol, |x, g| {
        joint_grad_into(envs, x, g)
    })?;
    let risk = joint_empirical_risk(envs, out.x.as_slice());
    let closed_form_gap = if envs[0].arch().family == Family::LeastSquares {
        let weights: Vec<f64> = envs
            .iter()
            .map(|e| 1.0 / (e.n() * envs.len()) as f64)
            .collect();
        let sets: Vec<&[crate::model::Sample]> = envs.iter().map(|e| e.dataset()).collect();
        solve_weighted_least_squares(&sets, &weights, envs[0].arch().p)
            .ok()
            .map(|w| risk - joint_empirical_risk(envs, w.as_slice()))
    } else {
        None
    };
    Ok(OracleOutcome {
        x: out.x,
        risk,
        iters: out.iters,
        grad_norm: out.grad_norm,
        converged: out.converged,
        closed_form_gap,
    })
}

/// Population risk on `fresh_m` fresh samples per task, averaged over tasks.
pub fn joint_population_risk(
    envs: &[TaskEnvironment],
    x: &ParamVector,
    fresh_m: usize,
    seed: u64,
) -> Result<f64> {
    let risks = envs
        .iter()
        .map(|e| population_risk_estimate(e, x, fresh_m, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats::mean(&risks))
}

pub const MIN_FRESH: usize = 1000;

/// Generalization gap, gradient norm and excess-error proxy at `x`.
pub fn empirical_gaps(
    x0: &ParamVector,
    envs: &[TaskEnvironment],
    x: &ParamVector,
    fresh_m: usize,
    oracle_cfg: &OracleConfig,
    seed: u64,
) -> Result<GapEstimate> {
    if fresh_m < MIN_FRESH {
        return Err(Error::invalid(format!(
            "fresh_m must be at least {MIN_FRESH}"
        )));
    }
    let oracle = oracle_erm(envs, x0, oracle_cfg)?;
    gaps_with_oracle(envs, x, fresh_m, seed, oracle)
}

pub fn gaps_with_oracle(
    envs: &[TaskEnvironment],
    x: &ParamVector,
    fresh_m: usize,
    seed: u64,
    oracle: OracleOutcome,
) -> Result<GapEstimate> {
    let population_risk = joint_population_risk(envs, x, fresh_m, seed)?;
    let empirical_risk = joint_empirical_risk(envs, x.as_slice());
    let mut g = vec![0.0; x.dim()];
    joint_grad_into(envs, x.as_slice(), &mut g);
    let grad_norm_sq = g.iter().map(|v| v * v).sum();
    Ok(GapEstimate {
        gen_gap: population_risk - empirical_risk,
        grad_norm_sq,
        excess_proxy: population_risk - oracle.risk,
        population_risk,
        empirical_risk,
        oracle,
    })
}

fn default_fresh() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaAuditConfig {
    pub gamma_grid: Vec<f64>,
    /// Independent dataset draws averaged into the expectations.
    pub replicates: usize,
    #[serde(default = "default_fresh")]
    pub fresh_m: usize,
    pub seed: u64,
    /// Smoothness constant; defaults to the largest per-sample closed form
    /// (least squares) over all drawn datasets.
    #[serde(default)]
    pub l: Option<f64>,
    #[serde(default)]
    pub mode: Option<PerturbationMode>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSlack {
    pub gamma: f64,
    pub rhs: f64,
    /// `rhs - gen_gap`.
    pub slack: f64,
    pub vacuous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub gen_gap: f64,
    pub gen_gap_se: f64,
    pub grad_norm_sq: f64,
    pub eps_sq: f64,
    pub l: f64,
    /// Minimizer `sqrt(G / eps^2)` of the measured right-hand side.
    pub gamma_star: Option<f64>,
    pub rhs_at_gamma_star: f64,
    pub slack_at_gamma_star: f64,
    pub holds: bool,
    pub per_gamma: Vec<GammaSlack>,
    pub mean_slack: f64,
    /// Grid point with the smallest finite slack.
    pub argmin_gamma: Option<f64>,
}

/// `(1/(2 gamma)) G + ((L + gamma)/2) eps^2`.
pub fn lemma_rhs(l: f64, gamma: f64, grad_norm_sq: f64, eps_sq: f64) -> f64 {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return f64::INFINITY;
    }
    grad_norm_sq / (2.0 * gamma) + 0.5 * (l + gamma) * eps_sq
}

struct LemmaDraw {
    gen_gap: f64,
    grad_norm_sq: f64,
    eps_sq: f64,
    l: f64,
}

fn lemma_draw(setup: &MergeSetup<'_>, cfg: &LemmaAuditConfig, r: usize) -> Result<LemmaDraw> {
    let draw_seed = derive(cfg.seed, &[stream::REPLICATE, r as u64]);
    let envs = setup
        .envs
        .iter()
        .map(|e| e.redraw(e.n(), draw_seed))
        .collect::<Result<Vec<_>>>()?;
    let local = MergeSetup {
        envs: &envs,
        ..*setup
    };
    let cached = local.train_all()?;
    let (merged, _) = local.merge_results(&cached)?;
    let trials = global_replicate(
        &local,
        &cached,
        &merged,
        0,
        draw_seed,
        cfg.mode.unwrap_or(PerturbationMode::Random),
    )?;
    let eps_sq = trials.iter().map(|t| t.merged_sq).sum::<f64>() / trials.len() as f64;
    let population = joint_population_risk(&envs, &merged, cfg.fresh_m, draw_seed)?;
    let empirical = joint_empirical_risk(&envs, merged.as_slice());
    // Control variate: the base does not depend on the draw, so its gap has
    // mean exactly zero. Subtracting it on the same fresh samples removes the
    // dataset noise that otherwise swamps the merged model's gap.
    let base_population = joint_population_risk(&envs, setup.base, cfg.fresh_m, draw_seed)?;
    let base_empirical = joint_empirical_risk(&envs, setup.base.as_slice());
    let mut g = vec![0.0; merged.dim()];
    joint_grad_into(&envs, merged.as_slice(), &mut g);
    let l = envs
        .iter()
        .filter_map(|e| e.sample_smoothness())
        .fold(0.0, f64::max);
    Ok(LemmaDraw {
        gen_gap: (population - empirical) - (base_population - base_empirical),
        grad_norm_sq: g.iter().map(|v| v * v).sum(),
        eps_sq,
        l,
    })
}

/// Measures both sides of the stability-to-generalization inequality. Each
/// expectation is a mean over `replicates` independent datasets.
pub fn lemma_audit(setup: &MergeSetup<'_>, cfg: &LemmaAuditConfig) -> Result<LemmaReport> {
    setup.validate()?;
    if cfg.gamma_grid.is_empty() {
        return Err(Error::invalid("gamma grid is empty"));
    }
    if cfg.replicates == 0 || cfg.fresh_m == 0 {
        return Err(Error::invalid("replicates and fresh_m must be positive"));
    }
    let draws = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| lemma_draw(setup, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let gaps: Vec<f64> = draws.iter().map(|d| d.gen_gap).collect();
    let gen_gap = stats::mean(&gaps);
    let gen_gap_se = stats::std_err(&gaps);
    let grad_norm_sq = stats::mean(&draws.iter().map(|d| d.grad_norm_sq).collect::<Vec<_>>());
    let eps_sq = stats::mean(&draws.iter().map(|d| d.eps_sq).collect::<Vec<_>>());
    let l = cfg
        .l
        .unwrap_or_else(|| draws.iter().map(|d| d.l).fold(0.0, f64::max));
    let gamma_star = (eps_sq > 0.0 && grad_norm_sq > 0.0).then(|| (grad_norm_sq / eps_sq).sqrt());
    let rhs_at_gamma_star = match gamma_star {
        Some(g) => lemma_rhs(l, g, grad_norm_sq, eps_sq),
        // G = 0: the infimum over gamma is the gamma -> 0 limit L eps^2 / 2.
        None if grad_norm_sq == 0.0 => 0.5 * l * eps_sq,
        None => f64::INFINITY,
    };
    let per_gamma: Vec<GammaSlack> = cfg
        .gamma_grid
        .iter()
        .map(|&gamma| {
            let rhs = lemma_rhs(l, gamma, grad_norm_sq, eps_sq);
            GammaSlack {
                gamma,
                rhs,
                slack: rhs - gen_gap,
                vacuous: !rhs.is_finite(),
            }
        })
        .collect();
    let finite: Vec<&GammaSlack> = per_gamma.iter().filter(|g| !g.vacuous).collect();
    let mean_slack = if finite.is_empty() {
        f64::INFINITY
    } else {
        finite.iter().map(|g| g.slack).sum::<f64>() / finite.len() as f64
    };
    let argmin_gamma = finite
        .iter()
        .min_by(|a, b| a.slack.total_cmp(&b.slack))
        .map(|g| g.gamma);
    let slack_at_gamma_star = rhs_at_gamma_star - gen_gap;
    Ok(LemmaReport {
        gen_gap,
        gen_gap_se,
        grad_norm_sq,
        eps_sq,
        l,
        gamma_star,
        rhs_at_gamma_star,
        slack_at_gamma_star,
        holds: slack_at_gamma_star >= 0.0,
        per_gamma,
        mean_slack,
        argmin_gamma,
    })
}

/// Training configs with distinct per-task seeds derived from `seed`.
pub fn seeded_configs(template: &FinetuneConfig, tasks: usize, seed: u64) -> Vec<FinetuneConfig> {
    (0..tasks)
        .map(|i| FinetuneConfig {
            seed: derive(seed, &[i as u64]),
            ..template.clone()
        })
        .collect()
}
