//! Brute-force recomputation of the bound formulas from raw arrays, written
//! without touching the library's bound code. Shared with the acceptance
//! suite through `#[path]`.
#![allow(dead_code)]

use mergelab::bounds::{BoundInputs, HeterogeneityProfile, Provenance};
use mergelab::trainer::WeightVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Oracle {
    pub stability_bound: f64,
    pub a: [f64; 3],
    pub eps_sgd: f64,
    pub chi_sq: f64,
    pub original_grad_bound: f64,
    pub gamma_star: Option<f64>,
    pub total: f64,
    pub total_at_gamma_star: f64,
}

/// Step weights per task: explicit all-ones arrays in SGD mode.
fn weights(inp: &BoundInputs) -> Vec<Vec<f64>> {
    match &inp.weight_vectors {
        Some(w) => w.iter().map(|v| v.as_slice().to_vec()).collect(),
        None => inp.k.iter().map(|&k| vec![1.0; k]).collect(),
    }
}

pub fn s_sum(inp: &BoundInputs) -> f64 {
    let mut s = 0.0;
    for i in 0..inp.lambdas.len() {
        let n = inp.n[i] as f64;
        let term = inp.profile.sigma_sq[i] / n + 3.0 * inp.b[i] as f64 * inp.profile.zeta_sq[i] / n;
        s += inp.lambdas[i] * inp.k[i] as f64 * term;
    }
    s
}

pub fn bracket(inp: &BoundInputs) -> f64 {
    let o = compute(inp);
    let mut wz = 0.0;
    for i in 0..inp.lambdas.len() {
        wz += inp.lambdas[i] * inp.profile.zeta_sq[i];
    }
    o.chi_sq * wz + (o.chi_sq + 1.0) * o.eps_sgd
}

pub fn at_gamma(inp: &BoundInputs, g: f64) -> f64 {
    let eta2 = inp.eta_l.powi(2);
    8.0 * (inp.profile.l + g) * eta2 * s_sum(inp) + (1.0 / g + 2.0 * inp.c) * bracket(inp)
}

pub fn compute(inp: &BoundInputs) -> Oracle {
    let nt = inp.lambdas.len();
    let nf = nt as f64;
    let lam = &inp.lambdas;
    let eta2 = inp.eta_l * inp.eta_l;
    let s = s_sum(inp);

    let w = weights(inp);
    let mut l1 = vec![0.0; nt];
    let mut l2 = vec![0.0; nt];
    for i in 0..nt {
        for v in &w[i] {
            l1[i] += v;
            l2[i] += v * v;
        }
    }
    let tau = l1.iter().sum::<f64>() / nf;
    let mut a1 = 0.0;
    let mut a2 = 0.0;
    let mut a3: f64 = 0.0;
    for i in 0..nt {
        let last = w[i][w[i].len() - 1];
        a1 += lam[i] * lam[i] * l2[i] / (l1[i] * l1[i]);
        a2 += lam[i] * (l2[i] - last * last);
        a3 = a3.max(l1[i] * (l1[i] - last));
    }
    a1 *= tau * nf;

    let kbar = inp.k.iter().map(|&k| k as f64).sum::<f64>() / nf;
    let sig = inp.profile.sigma_sq.iter().cloned().fold(0.0, f64::max);
    let zet = inp.profile.zeta_sq.iter().cloned().fold(0.0, f64::max);
    let l = inp.profile.l;
    let gap_factor = if inp.weight_vectors.is_some() {
        kbar / tau
    } else {
        1.0
    };
    let root = (nf * kbar).sqrt();
    let eps = 4.0 * inp.f0_gap * gap_factor / root
        + 4.0 * l * sig * a1 / root
        + 6.0 * nf * l * l * sig * a2 / kbar
        + inp.zeta_coeff * nf * l * l * zet * a3 / kbar;

    let mut chi = 0.0;
    let mut wz = 0.0;
    for i in 0..nt {
        chi += (1.0 / nf - lam[i]).powi(2) / (lam[i] * lam[i]);
        wz += lam[i] * inp.profile.zeta_sq[i];
    }
    let b = chi * wz + (chi + 1.0) * eps;
    let den = 8.0 * eta2 * s;
    let gamma_star = if den > 0.0 {
        Some((b / den).sqrt())
    } else {
        None
    };
    Oracle {
        stability_bound: 16.0 * eta2 * s,
        a: [a1, a2, a3],
        eps_sgd: eps,
        chi_sq: chi,
        original_grad_bound: 2.0 * (chi + 1.0) * eps + 2.0 * chi * wz,
        gamma_star,
        total: 8.0 * (l + 1.0) * eta2 * s + (2.0 * inp.c + 1.0) * b,
        total_at_gamma_star: 8.0 * l * eta2 * s
            + 2.0 * inp.c * b
            + 4.0 * 2f64.sqrt() * inp.eta_l * (s * b).sqrt(),
    }
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

/// A random valid input; about a third carry explicit weight vectors.
pub fn random_inputs(seed: u64) -> BoundInputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = rng.random_range(1..=6);
    let raw: Vec<f64> = (0..nt).map(|_| rng.random_range(0.05..1.0)).collect();
    let tot: f64 = raw.iter().sum();
    let n: Vec<usize> = (0..nt).map(|_| rng.random_range(20..3000)).collect();
    let b: Vec<usize> = n.iter().map(|&n| rng.random_range(1..=n / 2)).collect();
    let k: Vec<usize> = (0..nt).map(|_| rng.random_range(1..60)).collect();
    let weight_vectors = if rng.random_bool(0.35) {
        Some(
            k.iter()
                .map(|&k| {
                    WeightVector::new((0..k).map(|_| rng.random_range(0.1..2.0)).collect()).unwrap()
                })
                .collect(),
        )
    } else {
        None
    };
    BoundInputs {
        profile: HeterogeneityProfile {
            sigma_sq: (0..nt).map(|_| rng.random_range(0.0..5.0)).collect(),
            zeta_sq: (0..nt).map(|_| rng.random_range(0.0..3.0)).collect(),
            l: rng.random_range(0.1..10.0),
            provenance: Provenance::Supplied,
        },
        n,
        b,
        k,
        lambdas: raw.iter().map(|r| r / tot).collect(),
        eta_l: 10f64.powf(rng.random_range(-4.0..-1.0)),
        c: rng.random_range(0.0..2.0),
        f0_gap: rng.random_range(0.0..10.0),
        f0_gap_estimated: false,
        weight_vectors,
        zeta_coeff: if rng.random_bool(0.5) { 12.0 } else { 5.0 },
    }
}

/// 200 log-spaced points over `[1e-4, 1e4]`.
pub fn gamma_grid() -> Vec<f64> {
    (0..200)
        .map(|i| 10f64.powf(-4.0 + 8.0 * i as f64 / 199.0))
        .collect()
}
