//! Hyperparameter sweeps over a task pool: fine-tune, merge, evaluate on a
//! joint test set, and compare the empirical trend with the bound's.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{excess_bound, BoundBreakdown, BoundInputs};
use crate::error::{Error, Result};
use crate::merge::{HeldoutSet, MergeInputs, MergeSpec};
use crate::model::{evaluate_samples, Architecture, DataView, Sample};
use crate::param::ParamVector;
use crate::probe::{probe_profile, ProbeConfig};
use crate::rng::{derive, rng_for, stream};
use crate::stability::{joint_empirical_risk, oracle_erm, OracleConfig};
use crate::stats;
use crate::tasks::{gen_task_family, FamilyManifest, TaskEnvironment};
use crate::trainer::{finetune, FinetuneConfig, TrainResult};

/// Merged models whose joint loss exceeds this are counted as collapsed.
pub const COLLAPSE_LOSS: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Steps,
    Batch,
    Lr,
    DataRatio,
    NumTasks,
}

fn default_group_size() -> usize {
    8
}
fn default_true() -> bool {
    true
}
fn default_test_m() -> usize {
    500
}
fn default_heldout_m() -> usize {
    200
}
fn default_c() -> f64 {
    0.5
}
fn default_zeta_coeff() -> f64 {
    12.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepManifest {
    /// The task pool; `N` is the pool size.
    pub family: FamilyManifest,
    pub base_config: FinetuneConfig,
    pub swept_axis: Axis,
    pub axis_values: Vec<f64>,
    pub merge_specs: Vec<MergeSpec>,
    pub replicate_groups: usize,
    pub seed: u64,
    /// Tasks per group; the `num_tasks` axis uses the axis value instead.
    #[serde(default = "default_group_size")]
    pub group_size: usize,
    /// Draw a random subset of the pool per group; otherwise every group uses
    /// the first `group_size` tasks and differs only in training seeds.
    #[serde(default = "default_true")]
    pub resample_groups: bool,
    /// Fresh test samples per task.
    #[serde(default = "default_test_m")]
    pub test_m: usize,
    #[serde(default = "default_heldout_m")]
    pub heldout_m: usize,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(rename = "C", default = "default_c")]
    pub c: f64,
    #[serde(default = "default_zeta_coeff")]
    pub zeta_coeff: f64,
    #[serde(default)]
    pub oracle: OracleConfig,
}

impl SweepManifest {
    pub fn validate(&self) -> Result<()> {
        self.family.validate()?;
        if self.axis_values.is_empty() {
            return Err(Error::invalid("axis_values is empty"));
        }
        if self.axis_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("axis_values must be strictly increasing"));
        }
        if self.axis_values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::invalid("axis values must be positive"));
        }
        if self.replicate_groups == 0 {
            return Err(Error::invalid("replicate_groups must be at least 1"));
        }
        if self.merge_specs.is_empty() {
            return Err(Error::invalid("merge_specs is empty"));
        }
        let mut labels = std::collections::BTreeSet::new();
        for s in &self.merge_specs {
            s.validate()?;
            if !labels.insert(s.label()) {
                return Err(Error::invalid(format!(
                    "duplicate merge label {}",
                    s.label()
                )));
            }
        }
        if self.test_m == 0 {
            return Err(Error::invalid("test_m must be at least 1"));
        }
        let integral = matches!(self.swept_axis, Axis::Steps | Axis::Batch | Axis::NumTasks);
        if integral && self.axis_values.iter().any(|v| v.fract() != 0.0) {
            return Err(Error::invalid("axis values must be integers for this axis"));
        }
        let pool = self.family.num_tasks;
        if self.group_max() > pool || self.group_max() == 0 {
            return Err(Error::invalid(format!(
                "group size {} outside [1, pool {}]",
                self.group_max(),
                pool
            )));
        }
        if self.swept_axis == Axis::DataRatio && self.axis_values.iter().any(|v| *v > 1.0) {
            return Err(Error::invalid("data ratios must lie in (0, 1]"));
        }
        for v in &self.axis_values {
            let cfg = self.config_for(*v);
            for i in 0..pool {
                cfg.validate(self.family.size_of(i))?;
            }
        }
        Ok(())
    }

    /// Overrides every seed in the manifest.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.family.seed = seed;
        self.base_config.seed = seed;
        self
    }

    fn group_max(&self) -> usize {
        match self.swept_axis {
            Axis::NumTasks => self.axis_values.iter().fold(0.0f64, |a, b| a.max(*b)) as usize,
            _ => self.group_size,
        }
    }

    fn group_len(&self, v: f64) -> usize {
        match self.swept_axis {
            Axis::NumTasks => v as usize,
            _ => self.group_size,
        }
    }

    /// Fine-tuning template for axis value `v`.
    pub fn config_for(&self, v: f64) -> FinetuneConfig {
        let mut cfg = self.base_config.clone();
        match self.swept_axis {
            Axis::Steps => cfg.k = v as usize,
            Axis::Batch => cfg.b = v as usize,
            Axis::Lr => cfg.schedule = cfg.schedule.with_lr(v),
            Axis::DataRatio => cfg.data_ratio = v,
            Axis::NumTasks => {}
        }
        cfg
    }

    /// Pool indices of replicate group `g`, in a fixed order: shorter groups
    /// are prefixes of longer ones.
    pub fn group_members(&self, g: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.family.num_tasks).collect();
        if self.resample_groups {
            idx.shuffle(&mut rng_for(self.seed, &[stream::GROUP, g as u64]));
        }
        idx.truncate(self.group_max());
        idx
    }

    /// Training seed of pool task `task` in group `g`; independent of the axis value.
    pub fn training_seed(&self, g: usize, task: usize) -> u64 {
        derive(self.seed, &[stream::GROUP, g as u64, task as u64])
    }
}

/// Mean loss and, for classifiers, 0/1 accuracy over `test_m` fresh samples per task.
pub fn evaluate_joint(
    x: &ParamVector,
    envs: &[&TaskEnvironment],
    test_m: usize,
    seed: u64,
) -> Result<(f64, Option<f64>)> {
    if envs.is_empty() || test_m == 0 {
        return Err(Error::invalid("need at least one task and one test sample"));
    }
    let arch: Architecture = *envs[0].arch();
    crate::error::check_dim(arch.dim(), x.dim())?;
    let pooled: Vec<Sample> = envs
        .iter()
        .flat_map(|e| e.draw_samples(test_m, seed, stream::TEST))
        .collect();
    Ok(evaluate_samples(&arch, x.as_slice(), &pooled))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub collapsed: bool,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub bound: Option<BoundBreakdown>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub axis_value: f64,
    pub group: usize,
    pub members: Vec<usize>,
    /// Fine-tuning diverged for at least one expert.
    pub diverged: bool,
    pub methods: Vec<MethodOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub method: String,
    pub loss_mean: Option<f64>,
    pub loss_se: Option<f64>,
    pub acc_mean: Option<f64>,
    pub acc_se: Option<f64>,
    pub bound_total: Option<f64>,
    pub stability_term: Option<f64>,
    pub eps_sgd: Option<f64>,
    pub breakdown_digest: String,
    pub n_ok: usize,
    pub n_collapsed: usize,
}

/// Rank correlation, or `"flat"` when either side is constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correlation {
    Value(f64),
    Flat,
}

impl Correlation {
    pub fn value(&self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(*v),
            Correlation::Flat => None,
        }
    }
}

impl Serialize for Correlation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Correlation::Value(v) => s.serialize_f64(*v),
            Correlation::Flat => s.serialize_str("flat"),
        }
    }
}

impl<'de> Deserialize<'de> for Correlation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::String(s) if s == "flat" => Ok(Correlation::Flat),
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(Correlation::Value)
                .ok_or_else(|| serde::de::Error::custom("bad correlation")),
            other => Err(serde::de::Error::custom(format!("bad correlation {other}"))),
        }
    }
}

fn correlation(x: &[f64], y: &[f64]) -> Correlation {
    stats::spearman(x, y).map_or(Correlation::Flat, Correlation::Value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSummary {
    pub method: String,
    /// Fraction of adjacent axis pairs where loss and bound move in the same direction.
    pub sign_agreement: Option<f64>,
    pub spearman_bound_loss: Correlation,
    pub spearman_axis_loss: Correlation,
    /// Adjacent pairs `(k, k+1)` where the signs disagree.
    pub disagreements: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub swept_axis: Axis,
    pub axis_values: Vec<f64>,
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellOutcome>,
    pub total_cells: usize,
    pub collapsed_cells: usize,
    pub trend: Option<Vec<TrendSummary>>,
    pub manifest_digest: String,
}

impl SweepReport {
    pub fn collapse_dominated(&self) -> bool {
        2 * self.collapsed_cells > self.total_cells
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a SweepRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }
}

/// Hex SHA-256 of the compact JSON encoding.
pub fn sha256_json<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("serializable")))
}

/// Cached per-group constants for the bound.
struct GroupConstants {
    profile: crate::bounds::HeterogeneityProfile,
    f0_gap: f64,
}

fn group_constants(
    m: &SweepManifest,
    envs: &[TaskEnvironment],
    base: &ParamVector,
) -> Result<GroupConstants> {
    let refs: Vec<&TaskEnvironment> = envs.iter().collect();
    let profile = probe_profile(&refs, base, &m.probe)?;
    let oracle = oracle_erm(envs, base, &m.oracle)?;
    let f0_gap = (joint_empirical_risk(envs, base.as_slice()) - oracle.risk).max(0.0);
    Ok(GroupConstants { profile, f0_gap })
}

struct SweepContext<'a> {
    m: &'a SweepManifest,
    pool: &'a [TaskEnvironment],
    base: &'a ParamVector,
}

impl SweepContext<'_> {
    fn run_cell(&self, v: f64, g: usize, consts: &GroupConstants) -> Result<CellOutcome> {
        let m = self.m;
        let members: Vec<usize> = m
            .group_members(g)
            .into_iter()
            .take(m.group_len(v))
            .collect();
        let template = m.config_for(v);
        let envs: Vec<&TaskEnvironment> = members.iter().map(|&i| &self.pool[i]).collect();
        let cfgs: Vec<FinetuneConfig> = members
            .iter()
            .map(|&i| FinetuneConfig {
                seed: m.training_seed(g, i),
                ..template.clone()
            })
            .collect();
        let trained: Vec<Result<TrainResult>> = envs
            .iter()
            .zip(&cfgs)
            .map(|(e, c)| finetune(self.base, *e, c))
            .collect();
        if trained
            .iter()
            .any(|r| matches!(r, Err(e) if e.is_divergence()))
        {
            let methods = m
                .merge_specs
                .iter()
                .map(|s| MethodOutcome {
                    method: s.label(),
                    collapsed: true,
                    loss: None,
                    accuracy: None,
                    bound: None,
                    lambdas: vec![],
                })
                .collect();
            return Ok(CellOutcome {
                axis_value: v,
                group: g,
                members,
                diverged: true,
                methods,
            });
        }
        let results = trained.into_iter().collect::<Result<Vec<_>>>()?;
        let experts: Vec<ParamVector> = results.iter().map(|r| r.final_params.clone()).collect();
        let heldout: Vec<HeldoutSet> = envs
            .iter()
            .zip(&cfgs)
            .map(|(e, c)| {
                HeldoutSet::for_task(e, c.n_used(e.n()), m.heldout_m, derive(m.seed, &[g as u64]))
            })
            .collect();
        let mut methods = Vec::with_capacity(m.merge_specs.len());
        for spec in &m.merge_specs {
            let out = spec.apply(&MergeInputs {
                base: self.base,
                experts: &experts,
                results: Some(&results),
                heldout: Some(&heldout),
            })?;
            let (loss, acc) = evaluate_joint(&out.merged, &envs, m.test_m, m.seed)?;
            let collapsed = !loss.is_finite() || loss > COLLAPSE_LOSS;
            let lambdas = out.lambdas.as_slice().to_vec();
            let bound = (!collapsed)
                .then(|| self.bound_for(&envs, &cfgs, &results, &lambdas, consts))
                .and_then(|b| b.ok());
            methods.push(MethodOutcome {
                method: spec.label(),
                collapsed,
                loss: (!collapsed).then_some(loss),
                accuracy: if collapsed { None } else { acc },
                bound,
                lambdas,
            });
        }
        Ok(CellOutcome {
            axis_value: v,
            group: g,
            members,
            diverged: false,
            methods,
        })
    }

    fn bound_for(
        &self,
        envs: &[&TaskEnvironment],
        cfgs: &[FinetuneConfig],
        results: &[TrainResult],
        lambdas: &[f64],
        consts: &GroupConstants,
    ) -> Result<BoundBreakdown> {
        let inputs = BoundInputs {
            profile: consts.profile.clone(),
            n: envs
                .iter()
                .zip(cfgs)
                .map(|(e, c)| c.n_used(e.n()))
                .collect(),
            b: cfgs.iter().map(|c| c.b).collect(),
            k: cfgs.iter().map(|c| c.k).collect(),
            lambdas: lambdas.to_vec(),
            eta_l: cfgs[0].schedule.eta_l(),
            c: self.m.c,
            f0_gap: consts.f0_gap,
            f0_gap_estimated: true,
            weight_vectors: Some(results.iter().map(|r| r.weight_vector.clone()).collect()),
            zeta_coeff: self.m.zeta_coeff,
        };
        excess_bound(&inputs)
    }
}

/// Runs every (axis value, replicate group) cell and aggregates per method.
pub fn run_sweep(m: &SweepManifest) -> Result<SweepReport> {
    m.validate()?;
    let family = gen_task_family(&m.family)?;
    let base = family.base()?.clone();
    let pool = family.envs();
    let ctx = SweepContext {
        m,
        pool,
        base: &base,
    };

    // Bound constants depend on the group's tasks only; the N axis changes them.
    let keys: Vec<(usize, usize)> = {
        let mut k = std::collections::BTreeSet::new();
        for &v in &m.axis_values {
            for g in 0..m.replicate_groups {
                k.insert((g, m.group_len(v)));
            }
        }
        k.into_iter().collect()
    };
    let consts: BTreeMap<(usize, usize), GroupConstants> = keys
        .par_iter()
        .map(|&(g, len)| {
            let envs: Vec<TaskEnvironment> = m
                .group_members(g)
                .into_iter()
                .take(len)
                .map(|i| pool[i].clone())
                .collect();
            group_constants(m, &envs, &base).map(|c| ((g, len), c))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    let jobs: Vec<(f64, usize)> = m
        .axis_values
        .iter()
        .flat_map(|&v| (0..m.replicate_groups).map(move |g| (v, g)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(v, g)| ctx.run_cell(v, g, &consts[&(g, m.group_len(v))]))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for &v in &m.axis_values {
        for spec in &m.merge_specs {
            let label = spec.label();
            let outs: Vec<&MethodOutcome> = cells
                .iter()
                .filter(|c| c.axis_value == v)
                .flat_map(|c| c.methods.iter().filter(|o| o.method == label))
                .collect();
            rows.push(aggregate(v, &label, &outs));
        }
    }
    let total_cells = cells.iter().map(|c| c.methods.len()).sum();
    let collapsed_cells = cells
        .iter()
        .flat_map(|c| &c.methods)
        .filter(|o| o.collapsed)
        .count();
    let mut report = SweepReport {
        swept_axis: m.swept_axis,
        axis_values: m.axis_values.clone(),
        rows,
        cells,
        total_cells,
        collapsed_cells,
        trend: None,
        manifest_digest: sha256_json(m),
    };
    if m.axis_values.len() >= 3 {
        report.trend = Some(trend_report(&report)?);
    }
    Ok(report)
}

fn opt_mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| stats::mean(v))
}

fn aggregate(v: f64, label: &str, outs: &[&MethodOutcome]) -> SweepRow {
    let ok: Vec<&&MethodOutcome> = outs.iter().filter(|o| !o.collapsed).collect();
    let losses: Vec<f64> = ok.iter().filter_map(|o| o.loss).collect();
    let accs: Vec<f64> = ok.iter().filter_map(|o| o.accuracy).collect();
    let bounds: Vec<&BoundBreakdown> = ok.iter().filter_map(|o| o.bound.as_ref()).collect();
    let totals: Vec<f64> = bounds.iter().map(|b| b.total).collect();
    let stab: Vec<f64> = bounds.iter().map(|b| b.stability_term).collect();
    let eps: Vec<f64> = bounds.iter().map(|b| b.eps_sgd).collect();
    SweepRow {
        axis_value: v,
        method: label.to_string(),
        loss_mean: opt_mean(&losses),
        loss_se: (!losses.is_empty()).then(|| stats::std_err(&losses)),
        acc_mean: opt_mean(&accs),
        acc_se: (!accs.is_empty()).then(|| stats::std_err(&accs)),
        bound_total: opt_mean(&totals),
        stability_term: opt_mean(&stab),
        eps_sgd: opt_mean(&eps),
        breakdown_digest: sha256_json(&bounds),
        n_ok: ok.len(),
        n_collapsed: outs.len() - ok.len(),
    }
}

// f64::signum maps 0.0 to 1.0; a flat step must count as its own direction.
fn sign(d: f64) -> i8 {
    if d > 0.0 {
        1
    } else if d < 0.0 {
        -1
    } else {
        0
    }
}

/// Per method: adjacent-pair sign agreement and rank correlations of the
/// empirical loss with the bound and with the axis.
pub fn trend_report(report: &SweepReport) -> Result<Vec<TrendSummary>> {
    if report.axis_values.len() < 3 {
        return Err(Error::invalid("trend report needs at least 3 axis values"));
    }
    let mut methods: Vec<String> = Vec::new();
    for r in &report.rows {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    Ok(methods
        .into_iter()
        .map(|method| {
            let rows: Vec<&SweepRow> = report
                .rows_for(&method)
                .filter(|r| r.loss_mean.is_some() && r.bound_total.is_some())
                .collect();
            let axis: Vec<f64> = rows.iter().map(|r| r.axis_value).collect();
            let loss: Vec<f64> = rows.iter().map(|r| r.loss_mean.unwrap()).collect();
            let bound: Vec<f64> = rows.iter().map(|r| r.bound_total.unwrap()).collect();
            let mut agree = 0usize;
            let mut disagreements = Vec::new();
            for k in 0..rows.len().saturating_sub(1) {
                let dl = sign(loss[k + 1] - loss[k]);
                let db = sign(bound[k + 1] - bound[k]);
                if dl == db {
                    agree += 1;
                } else {
                    disagreements.push((k, k + 1));
                }
            }
            let pairs = rows.len().saturating_sub(1);
            TrendSummary {
                method,
                sign_agreement: (pairs > 0).then(|| agree as f64 / pairs as f64),
                spearman_bound_loss: correlation(&bound, &loss),
                spearman_axis_loss: correlation(&axis, &loss),
                disagreements,
            }
        })
        .collect())
}

pub const CSV_HEADER: &str = "axis_value,method,loss_mean,loss_se,acc_mean,acc_se,bound_total";

fn csv_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Fixed-column CSV, LF line endings, header first.
pub fn report_csv(report: &SweepReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let fields = [
            format!("{}", r.axis_value),
            csv_field(&r.method),
            csv_num(r.loss_mean),
            csv_num(r.loss_se),
            csv_num(r.acc_mean),
            csv_num(r.acc_se),
            csv_num(r.bound_total),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
