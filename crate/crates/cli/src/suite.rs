//! Stability suites: one measured on-average stability value next to its
//! closed-form bound.

use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};

use mergelab::bounds::{local_stability_bound, stability_bound, BoundInputs, HeterogeneityProfile};
use mergelab::merge::{HeldoutSet, MergeMethod, MergeSpec};
use mergelab::probe::{closed_form_profile, probe_profile, ProbeConfig};
use mergelab::stability::{
    empirical_global_stability, empirical_local_stability, seeded_configs, MergeSetup,
    PerturbationMode, StabilityEstimate,
};
use mergelab::sweep::sha256_json;
use mergelab::tasks::{gen_task_family, FamilyManifest, TaskEnvironment};
use mergelab::trainer::{schedule_weight_vector, FinetuneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// One task's expert, no merge.
    Local,
    /// The merged model over every task in the family.
    Global,
}

fn default_scope() -> Scope {
    Scope::Global
}
fn default_mode() -> PerturbationMode {
    PerturbationMode::Random
}
fn default_zeta_coeff() -> f64 {
    12.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySuite {
    pub family: FamilyManifest,
    /// Template; task `i` trains with a seed derived from `(seed, i)`.
    pub config: FinetuneConfig,
    #[serde(default = "default_scope")]
    pub scope: Scope,
    /// Task measured by the local scope.
    #[serde(default)]
    pub task: usize,
    #[serde(default = "MergeSpec::uniform")]
    pub merge: MergeSpec,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default = "default_mode")]
    pub mode: PerturbationMode,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default = "default_zeta_coeff")]
    pub zeta_coeff: f64,
    /// Heldout samples per task for adaptive merges.
    #[serde(default)]
    pub heldout_m: Option<usize>,
}

impl StabilitySuite {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.family.seed = seed;
        self.config.seed = seed;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityOutcome {
    pub scope: Scope,
    pub estimate: f64,
    /// Bootstrap 95% half-width over replicates.
    pub ci: f64,
    pub median: f64,
    pub replicates: usize,
    pub bound_value: Option<f64>,
    /// `estimate <= bound_value`; absent when no bound applies.
    pub pass: Option<bool>,
    pub profile: HeterogeneityProfile,
    pub config_digest: String,
}

/// Column order of the stability CSV.
pub const CSV_HEADER: &str = "scope,estimate,ci,median,replicates,bound_value,pass";

impl StabilityOutcome {
    pub fn csv(&self) -> String {
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{CSV_HEADER}\n{},{},{},{},{},{},{}\n",
            match self.scope {
                Scope::Local => "local",
                Scope::Global => "global",
            },
            self.estimate,
            self.ci,
            self.median,
            self.replicates,
            opt(self.bound_value.map(|v| v.to_string())),
            opt(self.pass.map(|v| v.to_string())),
        )
    }
}

fn profile_for(
    envs: &[&TaskEnvironment],
    suite: &StabilitySuite,
    base: &mergelab::ParamVector,
) -> Result<HeterogeneityProfile> {
    if envs.iter().all(|e| e.spec().linear_w().is_some()) {
        Ok(closed_form_profile(envs, base, &suite.probe)?)
    } else {
        Ok(probe_profile(envs, base, &suite.probe)?)
    }
}

/// Merge coefficients that make the merged distance linear in each expert's,
/// so the bound applies; `None` for trimming, masking or learned merges.
fn linear_lambdas(spec: &MergeSpec, n: usize) -> Option<Vec<f64>> {
    match spec.method {
        // Every task shares one template config, so normalized weights are uniform too.
        MergeMethod::Uniform | MergeMethod::Normalized => Some(vec![1.0 / n as f64; n]),
        MergeMethod::TaskArith => {
            let s = spec.params.scale?;
            (s * n as f64 == 1.0).then(|| vec![s; n])
        }
        _ => None,
    }
}

pub fn run(suite: &StabilitySuite) -> Result<StabilityOutcome> {
    if suite.zeta_coeff != 12.0 && suite.zeta_coeff != 5.0 {
        bail!(mergelab::Error::Invalid(format!(
            "zeta_coeff must be 12 or 5, got {}",
            suite.zeta_coeff
        )));
    }
    let family = gen_task_family(&suite.family)?;
    let base = family.base()?;
    let envs = family.envs();
    let cfgs = seeded_configs(&suite.config, envs.len(), suite.seed);
    let eta = suite.config.schedule.eta_l();
    let wv = schedule_weight_vector(&suite.config.schedule, suite.config.k)?;
    let general = wv.as_slice().iter().any(|a| *a != 1.0);
    match suite.scope {
        Scope::Local => {
            let Some(env) = envs.get(suite.task) else {
                bail!(mergelab::Error::IndexOutOfRange {
                    index: suite.task,
                    len: envs.len()
                });
            };
            let profile = profile_for(&envs.iter().collect::<Vec<_>>(), suite, base)?;
            let est = empirical_local_stability(
                base,
                env,
                &cfgs[suite.task],
                suite.replicates,
                suite.seed,
                suite.mode,
            )?;
            let n_used = suite.config.n_used(env.n());
            // The single-task bound is stated for plain SGD steps.
            let bound = (!general).then(|| {
                local_stability_bound(
                    suite.config.k,
                    eta,
                    profile.sigma_sq[suite.task],
                    profile.zeta_sq[suite.task],
                    n_used,
                    suite.config.b,
                )
            });
            Ok(outcome(suite, Scope::Local, &est, bound, profile))
        }
        Scope::Global => {
            let refs: Vec<&TaskEnvironment> = envs.iter().collect();
            let profile = profile_for(&refs, suite, base)?;
            let heldout: Option<Vec<HeldoutSet>> = (suite.merge.method == MergeMethod::Adaptive)
                .then(|| {
                    let m = suite.heldout_m.unwrap_or(200);
                    envs.iter()
                        .zip(&cfgs)
                        .map(|(e, c)| HeldoutSet::for_task(e, c.n_used(e.n()), m, suite.seed))
                        .collect()
                });
            let setup = MergeSetup {
                base,
                envs,
                cfgs: &cfgs,
                merge: &suite.merge,
                heldout: heldout.as_deref(),
            };
            let est = empirical_global_stability(&setup, suite.replicates, suite.seed, suite.mode)?;
            let bound = match linear_lambdas(&suite.merge, envs.len()) {
                Some(lambdas) => {
                    let n = envs.len();
                    let inputs = BoundInputs {
                        profile: profile.clone(),
                        n: envs.iter().map(|e| suite.config.n_used(e.n())).collect(),
                        b: vec![suite.config.b; n],
                        k: vec![suite.config.k; n],
                        lambdas,
                        eta_l: eta,
                        c: 0.5,
                        f0_gap: 0.0,
                        f0_gap_estimated: false,
                        weight_vectors: general.then(|| vec![wv.clone(); n]),
                        zeta_coeff: suite.zeta_coeff,
                    };
                    Some(stability_bound(&inputs)?)
                }
                None => None,
            };
            Ok(outcome(suite, Scope::Global, &est, bound, profile))
        }
    }
}

fn outcome(
    suite: &StabilitySuite,
    scope: Scope,
    est: &StabilityEstimate,
    bound: Option<f64>,
    profile: HeterogeneityProfile,
) -> StabilityOutcome {
    StabilityOutcome {
        scope,
        estimate: est.eps_sq,
        ci: est.ci_halfwidth,
        median: est.median(),
        replicates: est.replicates,
        bound_value: bound,
        pass: bound.map(|b| est.eps_sq <= b),
        profile,
        config_digest: sha256_json(suite),
    }
}
