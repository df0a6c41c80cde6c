//! Synthetic multi-task families and the perturbed-dataset construction.
//!
//! Task `i` (0-based) of an `N`-task family is generated from a shared
//! parameter rotated by `het_knob * (i / N) * pi/2` inside one fixed 2-plane,
//! with features drawn from `N(mu_i, I_p)` where `mu_i = het_knob * mean_shift * e_i`
//! for a random unit direction `e_i`. At `het_knob = 0` every task has the
//! same distribution.
//!
//! Datasets are never stored: they are regenerated from the manifest seed,
//! and samples are drawn sequentially so that a dataset of size `n` is a
//! prefix of the dataset of size `2n`.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Architecture, DataView, Family, Label, Sample};
use crate::param::ParamVector;
use crate::rng::{derive, rng_for, stream};

fn default_hidden() -> usize {
    16
}
fn default_mean_shift() -> f64 {
    0.5
}
fn default_teacher_scale() -> f64 {
    3.0
}
fn default_base_n() -> usize {
    2000
}
fn default_base_steps() -> usize {
    400
}
fn default_classes() -> usize {
    0
}

/// JSON manifest from which a whole family is regenerated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyManifest {
    pub family: Family,
    #[serde(rename = "N")]
    pub num_tasks: usize,
    pub p: usize,
    #[serde(rename = "C", default = "default_classes")]
    pub classes: usize,
    /// Per-task dataset sizes; a single entry is broadcast to every task.
    pub n: Vec<usize>,
    pub het_knob: f64,
    pub noise_scale: f64,
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_mean_shift")]
    pub mean_shift: f64,
    #[serde(default = "default_teacher_scale")]
    pub teacher_scale: f64,
    /// Pooled sample count used to fit the pretrained base.
    #[serde(default = "default_base_n")]
    pub base_n: usize,
    /// Full-batch descent steps used to fit the classification base.
    #[serde(default = "default_base_steps")]
    pub base_steps: usize,
}

impl FamilyManifest {
    pub fn least_squares(
        num_tasks: usize,
        p: usize,
        n: usize,
        het_knob: f64,
        noise_scale: f64,
        seed: u64,
    ) -> Self {
        Self {
            family: Family::LeastSquares,
            num_tasks,
            p,
            classes: 0,
            n: vec![n],
            het_knob,
            noise_scale,
            seed,
            hidden: default_hidden(),
            mean_shift: default_mean_shift(),
            teacher_scale: default_teacher_scale(),
            base_n: default_base_n(),
            base_steps: default_base_steps(),
        }
    }

    pub fn mlp(
        num_tasks: usize,
        p: usize,
        classes: usize,
        n: usize,
        het_knob: f64,
        noise_scale: f64,
        seed: u64,
    ) -> Self {
        Self {
            family: Family::MlpTanh,
            classes,
            ..Self::least_squares(num_tasks, p, n, het_knob, noise_scale, seed)
        }
    }

    pub fn architecture(&self) -> Architecture {
        match self.family {
            Family::LeastSquares => Architecture::least_squares(self.p),
            Family::MlpTanh => Architecture::mlp(self.p, self.hidden, self.classes),
        }
    }

    pub fn size_of(&self, i: usize) -> usize {
        if self.n.len() == 1 {
            self.n[0]
        } else {
            self.n[i]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::invalid("N must be at least 1"));
        }
        if self.p == 0 {
            return Err(Error::invalid("p must be at least 1"));
        }
        if self.n.len() != 1 && self.n.len() != self.num_tasks {
            return Err(Error::invalid(format!(
                "n has {} entries for {} tasks",
                self.n.len(),
                self.num_tasks
            )));
        }
        if let Some(bad) = self.n.iter().find(|&&n| n < 2) {
            return Err(Error::invalid(format!("dataset size {bad} < 2")));
        }
        if !(0.0..=1.0).contains(&self.het_knob) {
            return Err(Error::invalid(format!(
                "het_knob {} outside [0, 1]",
                self.het_knob
            )));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid(
                "noise_scale must be finite and non-negative",
            ));
        }
        if !(self.mean_shift >= 0.0 && self.mean_shift.is_finite()) {
            return Err(Error::invalid("mean_shift must be finite and non-negative"));
        }
        if self.family == Family::MlpTanh && (self.classes < 2 || self.hidden == 0) {
            return Err(Error::invalid("mlp-tanh needs C >= 2 and hidden >= 1"));
        }
        if self.family == Family::LeastSquares && self.base_n < self.p + 1 {
            return Err(Error::invalid(
                "base_n must exceed p for the least-squares base fit",
            ));
        }
        Ok(())
    }
}

/// Generative parameters of one task distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    /// Feature mean `mu_i`; features are `mu_i + N(0, I_p)`.
    pub mean: Vec<f64>,
    pub theta: f64,
    pub noise_scale: f64,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    /// `y = <phi, w> + noise_scale * eps`.
    Linear { w: Vec<f64> },
    /// `label = argmax_c (T phi)_c + noise_scale * Gumbel`; `T` is `C x p` row-major.
    Teacher { weights: Vec<f64>, classes: usize },
}

impl DistributionSpec {
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Sample {
        let features: Vec<f64> = self
            .mean
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        match &self.target {
            Target::Linear { w } => {
                let eps: f64 = rng.sample(StandardNormal);
                let y = model::dot(&features, w) + self.noise_scale * eps;
                Sample::real(features, y)
            }
            Target::Teacher { weights, classes } => {
                let p = features.len();
                let gumbel = Gumbel::new(0.0, 1.0).expect("unit gumbel");
                let scores: Vec<f64> = (0..*classes)
                    .map(|c| {
                        let g: f64 = gumbel.sample(rng);
                        model::dot(&weights[c * p..(c + 1) * p], &features) + self.noise_scale * g
                    })
                    .collect();
                Sample::class(features, model::argmax(&scores))
            }
        }
    }

    /// Generating parameter of the least-squares family.
    pub fn linear_w(&self) -> Option<&[f64]> {
        match &self.target {
            Target::Linear { w } => Some(w),
            Target::Teacher { .. } => None,
        }
    }
}

/// One task: distribution, drawn dataset, and model shape.
#[derive(Clone, Debug)]
pub struct TaskEnvironment {
    task_id: usize,
    arch: Architecture,
    spec: Arc<DistributionSpec>,
    dataset: Vec<Sample>,
}

impl TaskEnvironment {
    /// Draws `n` samples from `spec` with the dataset stream of `(seed, task_id)`.
    pub fn generate(
        task_id: usize,
        arch: Architecture,
        spec: DistributionSpec,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("dataset size {n} < 2")));
        }
        if spec.mean.len() != arch.p {
            return Err(Error::DimMismatch {
                expected: arch.p,
                got: spec.mean.len(),
            });
        }
        let spec = Arc::new(spec);
        let mut rng = rng_for(seed, &[stream::DATASET, task_id as u64]);
        let dataset = (0..n).map(|_| spec.draw(&mut rng)).collect();
        Ok(Self {
            task_id,
            arch,
            spec,
            dataset,
        })
    }

    /// Least-squares task with explicit generating parameter and feature mean.
    pub fn least_squares(
        task_id: usize,
        w: Vec<f64>,
        mean: Vec<f64>,
        noise_scale: f64,
        n: usize,
        seed: u64,
    ) -> Result<Self> {
        let arch = Architecture::least_squares(w.len());
        let spec = DistributionSpec {
            mean,
            theta: 0.0,
            noise_scale,
            target: Target::Linear { w },
        };
        Self::generate(task_id, arch, spec, n, seed)
    }

    /// Builds an environment from an explicit dataset (every sample checked).
    pub fn from_samples(
        task_id: usize,
        arch: Architecture,
        spec: DistributionSpec,
        dataset: Vec<Sample>,
    ) -> Result<Self> {
        if dataset.len() < 2 {
            return Err(Error::invalid(format!(
                "dataset size {} < 2",
                dataset.len()
            )));
        }
        for s in &dataset {
            arch.check_sample(s)?;
        }
        Ok(Self {
            task_id,
            arch,
            spec: Arc::new(spec),
            dataset,
        })
    }

    /// Same distribution, fresh dataset of size `n` drawn under `seed`.
    pub fn redraw(&self, n: usize, seed: u64) -> Result<Self> {
        Self::generate(self.task_id, self.arch, (*self.spec).clone(), n, seed)
    }

    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn spec(&self) -> &DistributionSpec {
        &self.spec
    }

    pub fn dataset(&self) -> &[Sample] {
        &self.dataset
    }

    pub fn n(&self) -> usize {
        self.dataset.len()
    }

    /// `m` i.i.d. draws from this task's distribution on the `(seed, tag)` stream.
    pub fn draw_samples(&self, m: usize, seed: u64, tag: u64) -> Vec<Sample> {
        let mut rng = rng_for(seed, &[tag, self.task_id as u64]);
        (0..m).map(|_| self.spec.draw(&mut rng)).collect()
    }

    /// Replaces sample `j` by a fresh draw determined by `(seed, task_id, j)`.
    pub fn perturb(&self, j: usize, seed: u64) -> Result<PerturbedDataset<'_>> {
        if j >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.n(),
            });
        }
        let mut rng = rng_for(seed, &[stream::REPLACEMENT, self.task_id as u64, j as u64]);
        let replacement = self.spec.draw(&mut rng);
        Ok(PerturbedDataset {
            origin: self,
            j,
            replacement,
        })
    }

    /// A perturbation whose replacement equals the original sample.
    pub fn null_perturbation(&self, j: usize) -> Result<PerturbedDataset<'_>> {
        if j >= self.n() {
            return Err(Error::IndexOutOfRange {
                index: j,
                len: self.n(),
            });
        }
        Ok(PerturbedDataset {
            origin: self,
            j,
            replacement: self.dataset[j].clone(),
        })
    }

    /// Smoothness constant of the least-squares per-sample losses: `max_j ||phi_j||^2`.
    pub fn sample_smoothness(&self) -> Option<f64> {
        (self.arch.family == Family::LeastSquares).then(|| {
            self.dataset
                .iter()
                .map(|s| s.features.iter().map(|v| v * v).sum::<f64>())
                .fold(0.0, f64::max)
        })
    }
}

impl DataView for TaskEnvironment {
    fn arch(&self) -> &Architecture {
        &self.arch
    }
    fn len(&self) -> usize {
        self.dataset.len()
    }
    fn sample(&self, j: usize) -> &Sample {
        &self.dataset[j]
    }
}

/// The origin dataset with sample `j` replaced.
#[derive(Clone, Debug)]
pub struct PerturbedDataset<'a> {
    origin: &'a TaskEnvironment,
    j: usize,
    replacement: Sample,
}

impl<'a> PerturbedDataset<'a> {
    pub fn origin(&self) -> &'a TaskEnvironment {
        self.origin
    }

    pub fn replaced_index(&self) -> usize {
        self.j
    }

    pub fn replacement(&self) -> &Sample {
        &self.replacement
    }

    pub fn is_null(&self) -> bool {
        self.replacement == self.origin.dataset[self.j]
    }
}

impl DataView for PerturbedDataset<'_> {
    fn arch(&self) -> &Architecture {
        &self.origin.arch
    }
    fn len(&self) -> usize {
        self.origin.dataset.len()
    }
    fn sample(&self, j: usize) -> &Sample {
        if j == self.j {
            &self.replacement
        } else {
            &self.origin.dataset[j]
        }
    }
}

pub fn perturb(env: &TaskEnvironment, j: usize, seed: u64) -> Result<PerturbedDataset<'_>> {
    env.perturb(j, seed)
}

/// Mean loss over `m` fresh draws from the task distribution.
pub fn population_risk_estimate(
    env: &TaskEnvironment,
    x: &ParamVector,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("m must be at least 1"));
    }
    crate::error::check_dim(env.arch.dim(), x.dim())?;
    let mut rng = rng_for(seed, &[stream::FRESH, env.task_id as u64]);
    let mut total = 0.0;
    for _ in 0..m {
        let s = env.spec.draw(&mut rng);
        total += env.arch.loss(x.as_slice(), &s);
    }
    Ok(total / m as f64)
}

/// A generated family plus its lazily fitted pretrained base.
#[derive(Debug)]
pub struct TaskFamily {
    manifest: FamilyManifest,
    arch: Architecture,
    envs: Vec<TaskEnvironment>,
    shared: DistributionSpec,
    base: OnceLock<std::result::Result<ParamVector, String>>,
}

struct Geometry {
    shared: DistributionSpec,
    plane: (Vec<f64>, Vec<f64>),
    mean_dirs: Vec<Vec<f64>>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, p: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Gram-Schmidt `v` against unit `u`; falls back to a coordinate axis when `p = 1`
/// or `v` is parallel to `u`.
fn orthonormal_to(u: &[f64], mut v: Vec<f64>) -> Vec<f64> {
    let c = model::dot(u, &v);
    v.iter_mut().zip(u).for_each(|(a, b)| *a -= c * b);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return vec![0.0; u.len()];
    }
    v.into_iter().map(|x| x / norm).collect()
}

/// Rotates `x` by `theta` inside the plane spanned by orthonormal `(u, v)`.
pub fn rotate_in_plane(x: &[f64], u: &[f64], v: &[f64], theta: f64) -> Vec<f64> {
    let a = model::dot(x, u);
    let c = model::dot(x, v);
    let (s, co) = theta.sin_cos();
    let du = a * co - c * s - a;
    let dv = a * s + c * co - c;
    x.iter()
        .zip(u.iter().zip(v))
        .map(|(xi, (ui, vi))| xi + du * ui + dv * vi)
        .collect()
}

fn geometry(m: &FamilyManifest) -> Geometry {
    let mut rng = rng_for(m.seed, &[stream::FAMILY]);
    let p = m.p;
    let (target, u) = match m.family {
        Family::LeastSquares => {
            let w: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            let u = w.iter().map(|x| x / norm).collect();
            (Target::Linear { w }, u)
        }
        Family::MlpTanh => {
            let scale = m.teacher_scale / (p as f64).sqrt();
            let weights = (0..m.classes * p)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (
                Target::Teacher {
                    weights,
                    classes: m.classes,
                },
                unit_gaussian(&mut rng, p),
            )
        }
    };
    let v = orthonormal_to(&u, unit_gaussian(&mut rng, p));
    let mean_dirs = (0..m.num_tasks)
        .map(|_| unit_gaussian(&mut rng, p))
        .collect();
    let shared = DistributionSpec {
        mean: vec![0.0; p],
        theta: 0.0,
        noise_scale: m.noise_scale,
        target,
    };
    Geometry {
        shared,
        plane: (u, v),
        mean_dirs,
    }
}

fn task_spec(m: &FamilyManifest, g: &Geometry, i: usize) -> DistributionSpec {
    let theta = m.het_knob * (i as f64 / m.num_tasks as f64) * std::f64::consts::FRAC_PI_2;
    let shift = m.het_knob * m.mean_shift;
    let mean = g.mean_dirs[i].iter().map(|e| shift * e).collect();
    let (u, v) = &g.plane;
    let target = match &g.shared.target {
        Target::Linear { w } => Target::Linear {
            w: rotate_in_plane(w, u, v, theta),
        },
        Target::Teacher { weights, classes } => {
            let p = m.p;
            let rotated = (0..*classes)
                .flat_map(|c| rotate_in_plane(&weights[c * p..(c + 1) * p], u, v, theta))
                .collect();
            Target::Teacher {
                weights: rotated,
                classes: *classes,
            }
        }
    };
    DistributionSpec {
        mean,
        theta,
        noise_scale: m.noise_scale,
        target,
    }
}

/// Generates the `N` environments described by `manifest`.
pub fn gen_task_family(manifest: &FamilyManifest) -> Result<TaskFamily> {
    manifest.validate()?;
    let arch = manifest.architecture();
    let g = geometry(manifest);
    let envs = (0..manifest.num_tasks)
        .map(|i| {
            TaskEnvironment::generate(
                i,
                arch,
                task_spec(manifest, &g, i),
                manifest.size_of(i),
                manifest.seed,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskFamily {
        manifest: manifest.clone(),
        arch,
        envs,
        shared: g.shared,
        base: OnceLock::new(),
    })
}

impl TaskFamily {
    pub fn manifest(&self) -> &FamilyManifest {
        &self.manifest
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn envs(&self) -> &[TaskEnvironment] {
        &self.envs
    }

    pub fn into_envs(self) -> Vec<TaskEnvironment> {
        self.envs
    }

    /// Distribution shared by every task at `het_knob = 0`.
    pub fn shared_spec(&self) -> &DistributionSpec {
        &self.shared
    }

    /// Pretrained base: the empirical risk minimizer of pooled `het_knob = 0` data.
    pub fn base(&self) -> Result<&ParamVector> {
        self.base
            .get_or_init(|| fit_base(&self.manifest, &self.shared).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| Error::invalid(format!("base fit failed: {e}")))
    }
}

fn fit_base(m: &FamilyManifest, shared: &DistributionSpec) -> Result<ParamVector> {
    let arch = m.architecture();
    let mut rng = rng_for(m.seed, &[stream::PRETRAIN]);
    let pool: Vec<Sample> = (0..m.base_n).map(|_| shared.draw(&mut rng)).collect();
    match m.family {
        Family::LeastSquares => solve_least_squares(&pool, m.p),
        Family::MlpTanh => {
            let mut init = rng_for(m.seed, &[stream::PRETRAIN, 1]);
            let x = init_mlp(&arch, &mut init);
            let view = PooledView {
                arch,
                samples: &pool,
            };
            crate::trainer::full_batch_descent(&view, &x, 0.5, m.base_steps, 0.0).map(|o| o.x)
        }
    }
}

/// Normal-equation solve of `min_x sum (<phi, x> - y)^2`.
pub fn solve_least_squares(samples: &[Sample], p: usize) -> Result<ParamVector> {
    solve_weighted_least_squares(&[samples], &[1.0], p)
}

/// Normal-equation solve of `min_x sum_k w_k sum_{s in sets[k]} (<phi, x> - y)^2`.
pub fn solve_weighted_least_squares(
    sets: &[&[Sample]],
    weights: &[f64],
    p: usize,
) -> Result<ParamVector> {
    let mut gram = nalgebra::DMatrix::<f64>::zeros(p, p);
    let mut rhs = nalgebra::DVector::<f64>::zeros(p);
    for (samples, &w) in sets.iter().zip(weights) {
        for s in samples.iter() {
            let y = match s.label {
                Label::Real(y) => y,
                Label::Class(_) => {
                    return Err(Error::invalid("least-squares solve needs real labels"))
                }
            };
            for a in 0..p {
                rhs[a] += w * s.features[a] * y;
                for b in 0..p {
                    gram[(a, b)] += w * s.features[a] * s.features[b];
                }
            }
        }
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::invalid("singular Gram matrix in least-squares solve"))?;
    ParamVector::new(chol.solve(&rhs).iter().copied().collect())
}

/// Small random initialization: `W1 ~ N(0, 1/p)`, `W2 ~ N(0, 1/h)`, zero biases.
pub fn init_mlp(arch: &Architecture, rng: &mut ChaCha8Rng) -> ParamVector {
    let (p, h, c) = (arch.p, arch.hidden, arch.classes);
    let mut x = Vec::with_capacity(arch.dim());
    let s1 = 1.0 / (p as f64).sqrt();
    x.extend((0..h * p).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)));
    x.extend(std::iter::repeat_n(0.0, h));
    let s2 = 1.0 / (h as f64).sqrt();
    x.extend((0..c * h).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)));
    x.extend(std::iter::repeat_n(0.0, c));
    ParamVector::new(x).expect("finite init")
}

/// Borrowed sample list viewed as a dataset.
pub struct PooledView<'a> {
    pub arch: Architecture,
    pub samples: &'a [Sample],
}

impl DataView for PooledView<'_> {
    fn arch(&self) -> &Architecture {
        &self.arch
    }
    fn len(&self) -> usize {
        self.samples.len()
    }
    fn sample(&self, j: usize) -> &Sample {
        &self.samples[j]
    }
}

/// Closed-form population quantities of the least-squares family with
/// `phi ~ N(mu, I)` and `y = <phi, w> + s * eps`.
pub mod closed_form {
    use super::DistributionSpec;
    use crate::model::dot;

    fn parts(spec: &DistributionSpec, x: &[f64]) -> (Vec<f64>, f64, f64, f64) {
        let w = spec.linear_w().expect("least-squares spec");
        let delta: Vec<f64> = x.iter().zip(w).map(|(a, b)| a - b).collect();
        let a = dot(&spec.mean, &delta);
        let mu_sq = dot(&spec.mean, &spec.mean);
        let d_sq = dot(&delta, &delta);
        (delta, a, mu_sq, d_sq)
    }

    /// `grad F(x) = (I + mu mu^T)(x - w)`.
    pub fn population_grad(spec: &DistributionSpec, x: &[f64]) -> Vec<f64> {
        let (delta, a, _, _) = parts(spec, x);
        delta
            .iter()
            .zip(&spec.mean)
            .map(|(d, m)| d + a * m)
            .collect()
    }

    /// `F(x) = 0.5 * ((x-w)^T (I + mu mu^T)(x-w) + s^2)`.
    pub fn population_risk(spec: &DistributionSpec, x: &[f64]) -> f64 {
        let (_, a, _, d_sq) = parts(spec, x);
        0.5 * (d_sq + a * a + spec.noise_scale * spec.noise_scale)
    }

    /// Per-sample gradient variance `E||grad l(x;z) - grad F(x)||^2`:
    /// `(p+2)(mu.delta)^2 + (p+1+|mu|^2)|delta|^2 + s^2 (p + |mu|^2)`.
    pub fn sample_grad_variance(spec: &DistributionSpec, x: &[f64]) -> f64 {
        let p = x.len() as f64;
        let (_, a, mu_sq, d_sq) = parts(spec, x);
        let s2 = spec.noise_scale * spec.noise_scale;
        (p + 2.0) * a * a + (p + 1.0 + mu_sq) * d_sq + s2 * (p + mu_sq)
    }
}

/// Seed for the `k`-th derived quantity of a task, used by callers that need
/// several independent draws per task.
pub fn task_seed(seed: u64, task_id: usize, k: u64) -> u64 {
    derive(seed, &[task_id as u64, k])
}
