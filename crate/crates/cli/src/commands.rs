//! Subcommand implementations. Every output is written with a trailing
//! newline from a deterministic serialization.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mergelab::bounds::{excess_bound, BoundBreakdown, BoundInputs};
use mergelab::merge::{HeldoutSet, MergeInputs, MergeMethod, MergeSpec};
use mergelab::param::{load_params, save_params};
use mergelab::sweep::{
    report_csv, run_sweep, sha256_json, trend_report, SweepManifest, SweepReport,
};
use mergelab::tasks::{gen_task_family, FamilyManifest, TaskEnvironment};
use mergelab::trainer::{finetune, FinetuneConfig, TrainResult, TrainSidecar};
use mergelab::ParamVector;

use crate::suite::{self, StabilitySuite};
use crate::Command;

/// A sweep in which more than half of the cells collapsed.
#[derive(Debug)]
pub struct CollapseDominated {
    pub collapsed: usize,
    pub total: usize,
}

impl fmt::Display for CollapseDominated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} sweep cells collapsed",
            self.collapsed, self.total
        )
    }
}

impl std::error::Error for CollapseDominated {}

/// 2 for divergence or a collapse-dominated sweep, 1 otherwise.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let diverged = e.chain().any(|c| {
        c.downcast_ref::<mergelab::Error>()
            .is_some_and(|m| m.is_divergence())
            || c.is::<CollapseDominated>()
    });
    if diverged {
        2
    } else {
        1
    }
}

/// One task of a generated family: the family manifest plus an index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub family: FamilyManifest,
    pub task: usize,
}

/// Written next to a merged model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeSidecar {
    pub spec: MergeSpec,
    pub lambdas: Vec<f64>,
    pub experts_sha256: Vec<String>,
    pub params_sha256: String,
}

/// Column order of `tasks.csv`.
pub const TASKS_CSV_HEADER: &str = "task,n,theta,noise_scale,mean_norm";
/// Column order of the bound CSV.
pub const BOUND_CSV_HEADER: &str =
    "total,total_at_gamma_star,gamma_star,stability_term,stability_bound,optimization_term,eps_sgd,chi_sq,original_grad_bound";

pub fn run(cmd: Command, seed: Option<u64>) -> Result<()> {
    match cmd {
        Command::GenTasks { manifest, out } => gen_tasks(&manifest, &out, seed),
        Command::Finetune { task, config, out } => finetune_cmd(&task, &config, &out, seed),
        Command::Merge {
            spec,
            base,
            experts,
            out,
            tasks,
        } => merge_cmd(&spec, &base, &experts, &out, &tasks, seed),
        Command::Bound { inputs, out, csv } => bound_cmd(&inputs, out.as_deref(), csv.as_deref()),
        Command::Stability { suite, out, csv } => {
            stability_cmd(&suite, out.as_deref(), csv.as_deref(), seed)
        }
        Command::Sweep { manifest, out, csv } => sweep_cmd(&manifest, &out, csv, seed),
        Command::Report { report, csv } => report_cmd(&report, &csv),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text)
        .map_err(mergelab::Error::from)
        .with_context(|| format!("parsing {}", path.display()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `out` when given, otherwise to stdout.
fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn sidecar_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn load_task(path: &Path, seed: Option<u64>) -> Result<(TaskFile, TaskEnvironment, ParamVector)> {
    let mut tf: TaskFile = read_json(path)?;
    if let Some(s) = seed {
        tf.family.seed = s;
    }
    let family = gen_task_family(&tf.family)?;
    let Some(env) = family.envs().get(tf.task).cloned() else {
        bail!(mergelab::Error::IndexOutOfRange {
            index: tf.task,
            len: family.envs().len()
        });
    };
    let base = family.base()?.clone();
    Ok((tf, env, base))
}

fn gen_tasks(manifest: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut m: FamilyManifest = read_json(manifest)?;
    if let Some(s) = seed {
        m.seed = s;
    }
    let family = gen_task_family(&m)?;
    let base = family.base()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_text(&out.join("manifest.json"), &to_json(&m))?;
    save_params(base, &out.join("base.bin"))?;
    let mut csv = format!("{TASKS_CSV_HEADER}\n");
    for (i, env) in family.envs().iter().enumerate() {
        let tf = TaskFile {
            family: m.clone(),
            task: i,
        };
        write_text(&out.join(format!("task_{i}.json")), &to_json(&tf))?;
        let spec = env.spec();
        let mean_norm = spec.mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        csv.push_str(&format!(
            "{i},{},{},{},{mean_norm}\n",
            env.n(),
            spec.theta,
            spec.noise_scale
        ));
    }
    write_text(&out.join("tasks.csv"), &csv)
}

fn finetune_cmd(task: &Path, config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: FinetuneConfig = read_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (_, env, base) = load_task(task, seed)?;
    let result = finetune(&base, &env, &cfg)?;
    save_params(&result.final_params, out)?;
    write_text(&sidecar_path(out), &to_json(&result.sidecar(&cfg)))
}

fn merge_cmd(
    spec: &Path,
    base: &Path,
    experts: &[PathBuf],
    out: &Path,
    tasks: &[PathBuf],
    seed: Option<u64>,
) -> Result<()> {
    let mut spec: MergeSpec = read_json(spec)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let base = load_params(base)?;
    let params = experts
        .iter()
        .map(|p| load_params(p))
        .collect::<mergelab::Result<Vec<_>>>()?;
    let needs_sidecars = matches!(spec.method, MergeMethod::Normalized | MergeMethod::Adaptive);
    let sidecars: Vec<TrainSidecar> = if needs_sidecars {
        experts
            .iter()
            .map(|p| read_json(&sidecar_path(p)))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    for (s, p) in sidecars.iter().zip(&params) {
        if s.params_sha256 != p.digest() {
            bail!(mergelab::Error::Invalid(
                "expert does not match its sidecar digest".into()
            ));
        }
    }
    // The normalized merge only reads the weight vectors and step sizes.
    let results: Vec<TrainResult> = sidecars
        .iter()
        .zip(&params)
        .map(|(s, p)| TrainResult {
            final_params: p.clone(),
            weight_vector: s.weight_vector.clone(),
            eta_l: s.eta_l,
            batch_log: Vec::new(),
        })
        .collect();
    let heldout: Option<Vec<HeldoutSet>> = if spec.method == MergeMethod::Adaptive {
        if tasks.len() != experts.len() {
            bail!(mergelab::Error::Invalid(format!(
                "adaptive merge needs one --tasks file per expert ({} for {})",
                tasks.len(),
                experts.len()
            )));
        }
        let m = spec.params.heldout_m.unwrap_or(200);
        let mut sets = Vec::with_capacity(tasks.len());
        for (t, s) in tasks.iter().zip(&sidecars) {
            let (_, env, _) = load_task(t, seed)?;
            let cfg = FinetuneConfig {
                data_ratio: s.data_ratio,
                ..FinetuneConfig::constant(s.k, s.b, s.eta_l, s.seed)
            };
            sets.push(HeldoutSet::for_task(
                &env,
                cfg.n_used(env.n()),
                m,
                spec.seed,
            ));
        }
        Some(sets)
    } else {
        None
    };
    let inputs = MergeInputs {
        base: &base,
        experts: &params,
        results: needs_sidecars.then_some(results.as_slice()),
        heldout: heldout.as_deref(),
    };
    let outcome = spec.apply(&inputs)?;
    save_params(&outcome.merged, out)?;
    let side = MergeSidecar {
        spec,
        lambdas: outcome.lambdas.as_slice().to_vec(),
        experts_sha256: params.iter().map(|p| p.digest()).collect(),
        params_sha256: outcome.merged.digest(),
    };
    write_text(&sidecar_path(out), &to_json(&side))
}

fn bound_csv(b: &BoundBreakdown) -> String {
    let gamma = match serde_json::to_value(&b.gamma_star).expect("serializable") {
        serde_json::Value::String(marker) => marker,
        v => v.to_string(),
    };
    format!(
        "{BOUND_CSV_HEADER}\n{},{},{},{},{},{},{},{},{}\n",
        b.total,
        b.total_at_gamma_star,
        gamma,
        b.stability_term,
        b.stability_bound,
        b.optimization_term,
        b.eps_sgd,
        b.chi_sq,
        b.original_grad_bound
    )
}

fn bound_cmd(inputs: &Path, out: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    let inputs: BoundInputs = read_json(inputs)?;
    let b = excess_bound(&inputs)?;
    if let Some(c) = csv {
        write_text(c, &bound_csv(&b))?;
    }
    emit(out, &to_json(&b))
}

fn stability_cmd(
    path: &Path,
    out: Option<&Path>,
    csv: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut s: StabilitySuite = read_json(path)?;
    if let Some(seed) = seed {
        s = s.with_seed(seed);
    }
    let r = suite::run(&s)?;
    if let Some(c) = csv {
        write_text(c, &r.csv())?;
    }
    emit(out, &to_json(&r))
}

fn sweep_cmd(manifest: &Path, out: &Path, csv: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let mut m: SweepManifest = read_json(manifest)?;
    if let Some(s) = seed {
        m = m.with_seed(s);
    }
    let report = run_sweep(&m)?;
    write_text(out, &to_json(&report))?;
    let csv = csv.unwrap_or_else(|| out.with_extension("csv"));
    write_text(&csv, &report_csv(&report))?;
    if report.collapse_dominated() {
        return Err(CollapseDominated {
            collapsed: report.collapsed_cells,
            total: report.total_cells,
        }
        .into());
    }
    Ok(())
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    report_sha256: String,
    total_cells: usize,
    collapsed_cells: usize,
    trend: Option<&'a Vec<mergelab::sweep::TrendSummary>>,
}

fn report_cmd(path: &Path, csv: &Path) -> Result<()> {
    let report: SweepReport = read_json(path)?;
    write_text(csv, &report_csv(&report))?;
    let recomputed = (report.axis_values.len() >= 3)
        .then(|| trend_report(&report))
        .transpose()?;
    let trend = recomputed.as_ref().or(report.trend.as_ref());
    let summary = ReportSummary {
        report_sha256: sha256_json(&report),
        total_cells: report.total_cells,
        collapsed_cells: report.collapsed_cells,
        trend,
    };
    print!("{}", to_json(&summary));
    Ok(())
}
