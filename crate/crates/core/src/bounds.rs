//! Stability, convergence and excess-error bound formulas.
//!
//! With `S = sum_i lambda_i K_i (sigma_i^2/n_i + 3 b_i zeta_i^2/n_i)` and
//! `B = chi^2 sum_i lambda_i zeta_i^2 + (chi^2 + 1) eps_sgd`:
//!
//! ```text
//! stability bound        16 eta^2 S
//! bound at gamma         8 (L + gamma) eta^2 S + (1/gamma + 2C) B
//! gamma*                 sqrt(B / (8 eta^2 S))
//! tight total            8 (L + 1) eta^2 S + (2C + 1) B
//! total at gamma*        8 L eta^2 S + 2C B + 4 sqrt(2) eta sqrt(S B)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::WeightVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    ClosedForm,
    Probed,
    Supplied,
}

/// Per-task variance and dissimilarity constants plus a shared smoothness constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    pub sigma_sq: Vec<f64>,
    pub zeta_sq: Vec<f64>,
    #[serde(rename = "L")]
    pub l: f64,
    pub provenance: Provenance,
}

impl HeterogeneityProfile {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_sq.len() != self.zeta_sq.len() {
            return Err(Error::invalid("sigma_sq and zeta_sq lengths differ"));
        }
        if self
            .sigma_sq
            .iter()
            .chain(&self.zeta_sq)
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid(
                "profile constants must be finite and non-negative",
            ));
        }
        if !(self.l > 0.0 && self.l.is_finite()) {
            return Err(Error::invalid("L must be positive and finite"));
        }
        Ok(())
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_sq.iter().cloned().fold(0.0, f64::max)
    }

    pub fn zeta_max(&self) -> f64 {
        self.zeta_sq.iter().cloned().fold(0.0, f64::max)
    }
}

fn default_c() -> f64 {
    0.5
}
fn default_zeta_coeff() -> f64 {
    12.0
}

/// Everything the bound formulas consume. Per-task vectors share one length `N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub profile: HeterogeneityProfile,
    pub n: Vec<usize>,
    pub b: Vec<usize>,
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    pub lambdas: Vec<f64>,
    pub eta_l: f64,
    #[serde(rename = "C", default = "default_c")]
    pub c: f64,
    pub f0_gap: f64,
    /// True when `f0_gap` was estimated by descent rather than supplied exactly.
    #[serde(default)]
    pub f0_gap_estimated: bool,
    /// General-schedule mode; `None` means plain SGD (all-ones vectors).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_vectors: Option<Vec<WeightVector>>,
    /// Coefficient on the last `eps_sgd` term: 12 or 5.
    #[serde(default = "default_zeta_coeff")]
    pub zeta_coeff: f64,
}

impl BoundInputs {
    pub fn num_tasks(&self) -> usize {
        self.lambdas.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        let n = self.lambdas.len();
        if n == 0 {
            return Err(Error::invalid("no tasks"));
        }
        for (name, len) in [
            ("n", self.n.len()),
            ("b", self.b.len()),
            ("K", self.k.len()),
            ("sigma_sq", self.profile.sigma_sq.len()),
            ("zeta_sq", self.profile.zeta_sq.len()),
        ] {
            if len != n {
                return Err(Error::invalid(format!(
                    "{name} has {len} entries for {n} tasks"
                )));
            }
        }
        crate::param::MergeCoefficients::new(self.lambdas.clone())?;
        for i in 0..n {
            if self.b[i] == 0 || self.n[i] < 2 * self.b[i] {
                return Err(Error::invalid(format!(
                    "task {i}: need 1 <= b and n >= 2b (n={}, b={})",
                    self.n[i], self.b[i]
                )));
            }
            if self.k[i] == 0 {
                return Err(Error::invalid(format!("task {i}: K must be at least 1")));
            }
        }
        if !(self.eta_l > 0.0 && self.eta_l.is_finite()) {
            return Err(Error::invalid("eta_l must be positive"));
        }
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(Error::invalid("C must be non-negative"));
        }
        if !(self.f0_gap >= 0.0 && self.f0_gap.is_finite()) {
            return Err(Error::invalid("f0_gap must be non-negative"));
        }
        if self.zeta_coeff != 12.0 && self.zeta_coeff != 5.0 {
            return Err(Error::invalid(format!(
                "zeta_coeff must be 12 or 5, got {}",
                self.zeta_coeff
            )));
        }
        if let Some(wv) = &self.weight_vectors {
            if wv.len() != n {
                return Err(Error::invalid("one weight vector per task required"));
            }
            for (i, (w, k)) in wv.iter().zip(&self.k).enumerate() {
                if w.len() != *k {
                    return Err(Error::invalid(format!(
                        "task {i}: weight vector length {} != K {}",
                        w.len(),
                        k
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn k_bar(&self) -> f64 {
        self.k.iter().sum::<usize>() as f64 / self.k.len() as f64
    }
}

/// `S = sum_i lambda_i K_i (sigma_i^2/n_i + 3 b_i zeta_i^2/n_i)`.
pub fn stability_sum(inputs: &BoundInputs) -> f64 {
    (0..inputs.num_tasks())
        .map(|i| {
            let n = inputs.n[i] as f64;
            let b = inputs.b[i] as f64;
            inputs.lambdas[i]
                * inputs.k[i] as f64
                * (inputs.profile.sigma_sq[i] / n + 3.0 * b * inputs.profile.zeta_sq[i] / n)
        })
        .sum()
}

/// Global model-stability bound `16 eta^2 S`.
pub fn stability_bound(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(16.0 * inputs.eta_l * inputs.eta_l * stability_sum(inputs))
}

/// Single-task bound `16 K eta^2 (sigma^2/n + 3 b zeta^2/n)`.
pub fn local_stability_bound(
    k: usize,
    eta: f64,
    sigma_sq: f64,
    zeta_sq: f64,
    n: usize,
    b: usize,
) -> f64 {
    16.0 * k as f64 * eta * eta * (sigma_sq / n as f64 + 3.0 * b as f64 * zeta_sq / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ACoefficients {
    #[serde(rename = "A1")]
    pub a1: f64,
    #[serde(rename = "A2")]
    pub a2: f64,
    #[serde(rename = "A3")]
    pub a3: f64,
    pub tau_eff: f64,
    pub lambdas: Vec<f64>,
}

fn own_lambdas(l1: &[f64]) -> Vec<f64> {
    let total: f64 = l1.iter().sum();
    l1.iter().map(|a| a / total).collect()
}

/// General-schedule terms. With `lambdas = None` the weights are
/// `||a_i||_1 / sum_j ||a_j||_1`.
pub fn a_coefficients_general(
    wvs: &[WeightVector],
    lambdas: Option<&[f64]>,
) -> Result<ACoefficients> {
    if wvs.is_empty() {
        return Err(Error::invalid("no weight vectors"));
    }
    let n = wvs.len() as f64;
    let l1: Vec<f64> = wvs.iter().map(WeightVector::l1).collect();
    let lam = match lambdas {
        Some(l) if l.len() != wvs.len() => {
            return Err(Error::CoefficientCount {
                coeffs: l.len(),
                vectors: wvs.len(),
            })
        }
        Some(l) => l.to_vec(),
        None => own_lambdas(&l1),
    };
    let tau_eff = l1.iter().sum::<f64>() / n;
    let mut s1 = 0.0;
    let mut a2 = 0.0;
    let mut a3 = 0.0f64;
    for ((w, a), l) in wvs.iter().zip(&l1).zip(&lam) {
        let last = w.last();
        s1 += l * l * w.l2_sq() / (a * a);
        a2 += l * (w.l2_sq() - last * last);
        a3 = a3.max(a * (a - last));
    }
    Ok(ACoefficients {
        a1: tau_eff * n * s1,
        a2,
        a3,
        tau_eff,
        lambdas: lam,
    })
}

/// Plain-SGD A-terms from the step counts alone.
pub fn a_coefficients_sgd(ks: &[usize], lambdas: Option<&[f64]>) -> Result<ACoefficients> {
    if ks.is_empty() {
        return Err(Error::invalid("no step counts"));
    }
    if ks.contains(&0) {
        return Err(Error::invalid("K must be at least 1"));
    }
    let n = ks.len() as f64;
    let kf: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let lam = match lambdas {
        Some(l) if l.len() != ks.len() => {
            return Err(Error::CoefficientCount {
                coeffs: l.len(),
                vectors: ks.len(),
            })
        }
        Some(l) => l.to_vec(),
        None => own_lambdas(&kf),
    };
    let k_bar = kf.iter().sum::<f64>() / n;
    let a1 = n * kf
        .iter()
        .zip(&lam)
        .map(|(k, l)| (k_bar / k) * l * l)
        .sum::<f64>();
    let a2 = kf.iter().zip(&lam).map(|(k, l)| l * (k - 1.0)).sum();
    let a3 = kf.iter().map(|k| k * (k - 1.0)).fold(0.0, f64::max);
    Ok(ACoefficients {
        a1,
        a2,
        a3,
        tau_eff: k_bar,
        lambdas: lam,
    })
}

/// A-terms as used inside `eps_sgd`: the inputs' own `lambdas`, general mode
/// when weight vectors are present.
pub fn a_terms(inputs: &BoundInputs) -> Result<ACoefficients> {
    match &inputs.weight_vectors {
        Some(w) => a_coefficients_general(w, Some(&inputs.lambdas)),
        None => a_coefficients_sgd(&inputs.k, Some(&inputs.lambdas)),
    }
}

/// The four-term convergence bound from explicit ingredients.
#[allow(clippy::too_many_arguments)]
pub fn eps_sgd_terms(
    f0_gap: f64,
    f0_factor: f64,
    l: f64,
    sigma_sq: f64,
    zeta_sq: f64,
    n_tasks: f64,
    k_bar: f64,
    a: &ACoefficients,
    zeta_coeff: f64,
) -> [f64; 4] {
    let root = (n_tasks * k_bar).sqrt();
    [
        4.0 * f0_gap * f0_factor / root,
        4.0 * l * sigma_sq * a.a1 / root,
        6.0 * n_tasks * l * l * sigma_sq * a.a2 / k_bar,
        zeta_coeff * n_tasks * l * l * zeta_sq * a.a3 / k_bar,
    ]
}

pub fn eps_sgd(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    Ok(eps_sgd_parts(inputs)?.iter().sum())
}

fn eps_sgd_parts(inputs: &BoundInputs) -> Result<[f64; 4]> {
    let a = a_terms(inputs)?;
    let k_bar = inputs.k_bar();
    // general-weight form carries K_bar / tau_eff on the initial-gap term
    let f0_factor = if inputs.weight_vectors.is_some() {
        k_bar / a.tau_eff
    } else {
        1.0
    };
    Ok(eps_sgd_terms(
        inputs.f0_gap,
        f0_factor,
        inputs.profile.l,
        inputs.profile.sigma_max(),
        inputs.profile.zeta_max(),
        inputs.num_tasks() as f64,
        k_bar,
        &a,
        inputs.zeta_coeff,
    ))
}

/// `sum_i (1/N - lambda_i)^2 / lambda_i^2`.
pub fn chi_square(lambdas: &[f64]) -> Result<f64> {
    if lambdas.is_empty() {
        return Err(Error::invalid("no coefficients"));
    }
    let p = 1.0 / lambdas.len() as f64;
    let mut s = 0.0;
    for (i, &l) in lambdas.iter().enumerate() {
        if l == 0.0 {
            return Err(Error::DegenerateCoefficient { index: i });
        }
        s += (p - l) * (p - l) / (l * l);
    }
    Ok(s)
}

fn weighted_zeta(inputs: &BoundInputs) -> f64 {
    inputs
        .lambdas
        .iter()
        .zip(&inputs.profile.zeta_sq)
        .map(|(l, z)| l * z)
        .sum()
}

/// `2 (chi^2 + 1) eps_sgd + 2 chi^2 sum_i lambda_i zeta_i^2`.
pub fn original_grad_bound(inputs: &BoundInputs) -> Result<f64> {
    let chi = chi_square(&inputs.lambdas)?;
    let eps = eps_sgd(inputs)?;
    Ok(2.0 * (chi + 1.0) * eps + 2.0 * chi * weighted_zeta(inputs))
}

/// `B = chi^2 sum_i lambda_i zeta_i^2 + (chi^2 + 1) eps_sgd`.
pub fn optimization_bracket(inputs: &BoundInputs) -> Result<f64> {
    let chi = chi_square(&inputs.lambdas)?;
    Ok(chi * weighted_zeta(inputs) + (chi + 1.0) * eps_sgd(inputs)?)
}

/// The minimizing trade-off parameter, or a marker for the degenerate cases.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GammaStar {
    Finite(f64),
    /// Stability term vanishes while the optimization bracket does not.
    Unbounded,
    /// Both terms vanish.
    Undefined,
}

impl GammaStar {
    pub fn value(&self) -> Option<f64> {
        match self {
            GammaStar::Finite(g) => Some(*g),
            _ => None,
        }
    }
}

impl Serialize for GammaStar {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            GammaStar::Finite(g) => s.serialize_f64(*g),
            GammaStar::Unbounded => s.serialize_str("unbounded"),
            GammaStar::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for GammaStar {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Tag(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(g) => Ok(GammaStar::Finite(g)),
            Raw::Tag(t) if t == "unbounded" => Ok(GammaStar::Unbounded),
            Raw::Tag(t) if t == "undefined" => Ok(GammaStar::Undefined),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!(
                "unknown gamma marker {t:?}"
            ))),
        }
    }
}

fn gamma_from(s_term: f64, bracket: f64) -> GammaStar {
    if s_term > 0.0 {
        GammaStar::Finite((bracket / s_term).sqrt())
    } else if bracket > 0.0 {
        GammaStar::Unbounded
    } else {
        GammaStar::Undefined
    }
}

pub fn gamma_star(inputs: &BoundInputs) -> Result<GammaStar> {
    let b = optimization_bracket(inputs)?;
    let s = 8.0 * inputs.eta_l * inputs.eta_l * stability_sum(inputs);
    Ok(gamma_from(s, b))
}

/// `8 (L + gamma) eta^2 S + (1/gamma + 2C) B`.
pub fn bound_at_gamma(inputs: &BoundInputs, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    let b = optimization_bracket(inputs)?;
    let s = stability_sum(inputs);
    let eta2 = inputs.eta_l * inputs.eta_l;
    Ok(8.0 * (inputs.profile.l + gamma) * eta2 * s + (1.0 / gamma + 2.0 * inputs.c) * b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundBreakdown {
    /// `8 (L + 1) eta^2 S`.
    pub stability_term: f64,
    /// `16 eta^2 S`, the model-stability bound itself.
    pub stability_bound: f64,
    #[serde(rename = "A1")]
    pub a1: f64,
    #[serde(rename = "A2")]
    pub a2: f64,
    #[serde(rename = "A3")]
    pub a3: f64,
    pub tau_eff: f64,
    pub eps_sgd: f64,
    /// The four summands of `eps_sgd` in order.
    pub eps_sgd_terms: [f64; 4],
    pub chi_sq: f64,
    pub weighted_zeta_sq: f64,
    pub beta_sq: f64,
    pub kappa_sq: f64,
    pub original_grad_bound: f64,
    pub gamma_star: GammaStar,
    /// `(2C + 1) B`.
    pub optimization_term: f64,
    pub total: f64,
    pub total_at_gamma_star: f64,
    pub f0_gap_estimated: bool,
}

pub fn excess_bound(inputs: &BoundInputs) -> Result<BoundBreakdown> {
    inputs.validate()?;
    let a = a_terms(inputs)?;
    let parts = eps_sgd_parts(inputs)?;
    let eps: f64 = parts.iter().sum();
    let chi = chi_square(&inputs.lambdas)?;
    let wz = weighted_zeta(inputs);
    let bracket = chi * wz + (chi + 1.0) * eps;
    let s = stability_sum(inputs);
    let eta2 = inputs.eta_l * inputs.eta_l;
    let l = inputs.profile.l;
    let c = inputs.c;
    let stability_term = 8.0 * (l + 1.0) * eta2 * s;
    let optimization_term = (2.0 * c + 1.0) * bracket;
    let (beta_sq, kappa_sq) = dissimilarity_constants(&inputs.lambdas, &inputs.profile.zeta_sq)?;
    Ok(BoundBreakdown {
        stability_term,
        stability_bound: 16.0 * eta2 * s,
        a1: a.a1,
        a2: a.a2,
        a3: a.a3,
        tau_eff: a.tau_eff,
        eps_sgd: eps,
        eps_sgd_terms: parts,
        chi_sq: chi,
        weighted_zeta_sq: wz,
        beta_sq,
        kappa_sq,
        original_grad_bound: 2.0 * (chi + 1.0) * eps + 2.0 * chi * wz,
        gamma_star: gamma_from(8.0 * eta2 * s, bracket),
        optimization_term,
        total: stability_term + optimization_term,
        total_at_gamma_star: 8.0 * l * eta2 * s
            + 2.0 * c * bracket
            + 4.0 * 2f64.sqrt() * inputs.eta_l * (s * bracket).sqrt(),
        f0_gap_estimated: inputs.f0_gap_estimated,
    })
}

/// `(beta^2, kappa^2) = (2, 2 sum_i lambda_i zeta_i^2)`.
pub fn dissimilarity_constants(lambdas: &[f64], zeta_sq: &[f64]) -> Result<(f64, f64)> {
    if lambdas.len() != zeta_sq.len() {
        return Err(Error::CoefficientCount {
            coeffs: lambdas.len(),
            vectors: zeta_sq.len(),
        });
    }
    Ok((
        2.0,
        2.0 * lambdas.iter().zip(zeta_sq).map(|(l, z)| l * z).sum::<f64>(),
    ))
}
