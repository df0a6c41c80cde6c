mod common {
    pub mod bound_oracle;
}

use common::bound_oracle::{self as oracle, rel_close};
use mergelab::bounds::*;
use mergelab::model::{self, DataView, Sample};
use mergelab::probe::*;
use mergelab::tasks::{gen_task_family, FamilyManifest, TaskEnvironment};
use mergelab::trainer::WeightVector;
use mergelab::{Error, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_task() -> BoundInputs {
    BoundInputs {
        profile: HeterogeneityProfile {
            sigma_sq: vec![1.0],
            zeta_sq: vec![0.0],
            l: 1.0,
            provenance: Provenance::Supplied,
        },
        n: vec![100],
        b: vec![10],
        k: vec![10],
        lambdas: vec![1.0],
        eta_l: 0.1,
        c: 0.5,
        f0_gap: 0.0,
        f0_gap_estimated: false,
        weight_vectors: None,
        zeta_coeff: 12.0,
    }
}

fn two_tasks() -> BoundInputs {
    BoundInputs {
        profile: HeterogeneityProfile {
            sigma_sq: vec![0.8, 1.4],
            zeta_sq: vec![0.3, 0.6],
            l: 2.5,
            provenance: Provenance::Supplied,
        },
        n: vec![200, 400],
        b: vec![8, 16],
        k: vec![20, 30],
        lambdas: vec![0.35, 0.65],
        eta_l: 0.002,
        c: 0.5,
        f0_gap: 1.2,
        f0_gap_estimated: false,
        weight_vectors: None,
        zeta_coeff: 12.0,
    }
}

#[test]
fn formulas_match_the_brute_force_oracle() {
    for seed in 0..100 {
        let inp = oracle::random_inputs(seed);
        let o = oracle::compute(&inp);
        let br = excess_bound(&inp).unwrap();
        let a = a_terms(&inp).unwrap();
        assert!(
            rel_close(stability_bound(&inp).unwrap(), o.stability_bound, 1e-10),
            "seed {seed}"
        );
        for (got, want) in [a.a1, a.a2, a.a3].iter().zip(o.a) {
            assert!(
                rel_close(*got, want, 1e-10),
                "seed {seed}: A {got} vs {want}"
            );
        }
        assert!(
            rel_close(eps_sgd(&inp).unwrap(), o.eps_sgd, 1e-10),
            "seed {seed}"
        );
        assert!(rel_close(chi_square(&inp.lambdas).unwrap(), o.chi_sq, 1e-10) || o.chi_sq < 1e-300);
        assert!(rel_close(
            original_grad_bound(&inp).unwrap(),
            o.original_grad_bound,
            1e-10
        ));
        let g = gamma_star(&inp).unwrap().value().unwrap();
        assert!(rel_close(g, o.gamma_star.unwrap(), 1e-10));
        assert!(rel_close(
            bound_at_gamma(&inp, 0.7).unwrap(),
            oracle::at_gamma(&inp, 0.7),
            1e-10
        ));
        assert!(rel_close(br.total, o.total, 1e-10));
        assert!(rel_close(
            br.total_at_gamma_star,
            o.total_at_gamma_star,
            1e-10
        ));
    }
}

#[test]
fn stability_bound_hand_values() {
    assert!((stability_bound(&one_task()).unwrap() - 0.016).abs() <= 1e-15);
    let mut z = one_task();
    z.profile.sigma_sq = vec![0.0];
    assert_eq!(stability_bound(&z).unwrap(), 0.0);
    let mut d = two_tasks();
    let base = stability_bound(&d).unwrap();
    d.eta_l *= 2.0;
    assert!(rel_close(stability_bound(&d).unwrap(), 4.0 * base, 1e-14));
    assert!(rel_close(
        local_stability_bound(10, 0.1, 1.0, 0.0, 100, 10),
        stability_bound(&one_task()).unwrap(),
        1e-15
    ));
}

#[test]
fn a_terms_plain_sgd_cases() {
    for (n, k) in [(1usize, 5usize), (3, 7), (4, 1)] {
        let lam = vec![1.0 / n as f64; n];
        let a = a_coefficients_sgd(&vec![k; n], Some(&lam)).unwrap();
        assert!((a.a1 - 1.0).abs() <= 1e-12);
        assert_eq!(a.a2, (k - 1) as f64 * lam.iter().sum::<f64>());
        assert_eq!(a.a3, (k * (k - 1)) as f64);
    }
    let a = a_coefficients_sgd(&[2, 6], None).unwrap();
    assert_eq!(a.lambdas, vec![0.25, 0.75]);
    // brute force: N * sum (kbar/k) lambda^2
    let brute = 2.0 * ((4.0 / 2.0) * 0.0625 + (4.0 / 6.0) * 0.5625);
    assert!((a.a1 - brute).abs() <= 1e-15);
    assert_eq!(a.tau_eff, 4.0);
    assert!(a_coefficients_sgd(&[], None).is_err());
    assert!(a_coefficients_general(&[], None).is_err());
}

#[test]
fn general_path_with_ones_matches_sgd_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let n = rng.random_range(1..6);
        let ks: Vec<usize> = (0..n).map(|_| rng.random_range(1..200)).collect();
        let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
        let lam: Vec<f64> = raw.iter().map(|r| r / raw.iter().sum::<f64>()).collect();
        let wv: Vec<WeightVector> = ks.iter().map(|&k| WeightVector::ones(k).unwrap()).collect();
        for l in [None, Some(&lam[..])] {
            let s = a_coefficients_sgd(&ks, l).unwrap();
            let g = a_coefficients_general(&wv, l).unwrap();
            for (x, y) in [
                (s.a1, g.a1),
                (s.a2, g.a2),
                (s.a3, g.a3),
                (s.tau_eff, g.tau_eff),
            ] {
                assert!(
                    rel_close(x, y, 1e-12) || (x == 0.0 && y == 0.0),
                    "{x} vs {y}"
                );
            }
        }
    }
}

#[test]
fn eps_sgd_cases() {
    let mut z = two_tasks();
    z.profile.sigma_sq = vec![0.0; 2];
    z.profile.zeta_sq = vec![0.0; 2];
    z.f0_gap = 0.0;
    assert_eq!(eps_sgd(&z).unwrap(), 0.0);

    // A-terms held fixed, only K_bar grows
    let a = a_coefficients_sgd(&[10, 10], None).unwrap();
    let vals: Vec<f64> = [1e2, 1e3, 1e4]
        .iter()
        .map(|&kb| {
            eps_sgd_terms(1.0, 1.0, 2.0, 0.5, 0.3, 2.0, kb, &a, 12.0)
                .iter()
                .sum()
        })
        .collect();
    assert!(vals[0] > vals[1] && vals[1] > vals[2] && vals[2] > 0.0);

    let t12 = eps_sgd_terms(1.0, 1.0, 2.0, 0.5, 0.3, 2.0, 10.0, &a, 12.0);
    let t5 = eps_sgd_terms(1.0, 1.0, 2.0, 0.5, 0.3, 2.0, 10.0, &a, 5.0);
    assert!(rel_close(t5[3] / t12[3], 5.0 / 12.0, 1e-15));
    assert_eq!(&t5[..3], &t12[..3]);
    let mut bad = two_tasks();
    bad.zeta_coeff = 7.0;
    assert!(eps_sgd(&bad).is_err());
}

#[test]
fn chi_square_cases() {
    assert_eq!(chi_square(&[0.25; 4]).unwrap(), 0.0);
    assert!((chi_square(&[0.75, 0.25]).unwrap() - (1.0 / 9.0 + 1.0)).abs() <= 1e-14);
    assert!(matches!(
        chi_square(&[1.0, 0.0]),
        Err(Error::DegenerateCoefficient { index: 1 })
    ));
    let l = [0.1, 0.2, 0.3, 0.4];
    let want = chi_square(&l).unwrap();
    assert!(want > 0.0);
    for perm in [[3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]] {
        let p: Vec<f64> = perm.iter().map(|&i| l[i]).collect();
        assert!(rel_close(chi_square(&p).unwrap(), want, 1e-14));
    }
}

#[test]
fn original_grad_bound_cases() {
    let mut u = two_tasks();
    u.lambdas = vec![0.5, 0.5];
    assert!(rel_close(
        original_grad_bound(&u).unwrap(),
        2.0 * eps_sgd(&u).unwrap(),
        1e-14
    ));
    u.profile.sigma_sq = vec![0.0; 2];
    u.profile.zeta_sq = vec![0.0; 2];
    u.f0_gap = 0.0;
    assert_eq!(original_grad_bound(&u).unwrap(), 0.0);
    let g = two_tasks();
    assert!(rel_close(
        original_grad_bound(&g).unwrap(),
        oracle::compute(&g).original_grad_bound,
        1e-12
    ));
}

#[test]
fn gamma_star_markers() {
    let mut z = two_tasks();
    z.profile.sigma_sq = vec![0.0; 2];
    z.profile.zeta_sq = vec![0.0; 2];
    assert_eq!(gamma_star(&z).unwrap(), GammaStar::Unbounded);
    let br = excess_bound(&z).unwrap();
    assert_eq!(br.stability_term, 0.0);
    assert!(rel_close(
        br.total_at_gamma_star,
        2.0 * z.c * optimization_bracket(&z).unwrap(),
        1e-14
    ));
    z.f0_gap = 0.0;
    z.lambdas = vec![0.5, 0.5];
    assert_eq!(gamma_star(&z).unwrap(), GammaStar::Undefined);
    assert_eq!(excess_bound(&z).unwrap().total, 0.0);
}

#[test]
fn gamma_star_minimizes_the_grid() {
    for seed in 0..50 {
        let inp = oracle::random_inputs(1000 + seed);
        let g = gamma_star(&inp).unwrap().value().unwrap();
        let at = bound_at_gamma(&inp, g).unwrap();
        let best = oracle::gamma_grid()
            .into_iter()
            .map(|x| bound_at_gamma(&inp, x).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(at <= best * (1.0 + 1e-9), "seed {seed}");
        assert!(rel_close(
            at,
            excess_bound(&inp).unwrap().total_at_gamma_star,
            1e-10
        ));
    }
}

#[test]
fn bound_at_gamma_shape() {
    let inp = two_tasks();
    let vals: Vec<f64> = oracle::gamma_grid()
        .iter()
        .map(|&g| bound_at_gamma(&inp, g).unwrap())
        .collect();
    let m = vals
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(vals[..=m].windows(2).all(|w| w[1] <= w[0]));
    assert!(vals[m..].windows(2).all(|w| w[1] >= w[0]));
    assert!(bound_at_gamma(&inp, 1e12).unwrap() > 1e3 * vals[m]);
    assert!(bound_at_gamma(&inp, 0.0).is_err());
    assert!(bound_at_gamma(&inp, -1.0).is_err());
    let br = excess_bound(&inp).unwrap();
    assert!(br.total_at_gamma_star <= br.total);
}

#[test]
fn excess_bound_components() {
    let mut z = two_tasks();
    z.profile.sigma_sq = vec![0.0; 2];
    z.profile.zeta_sq = vec![0.0; 2];
    z.f0_gap = 0.0;
    z.lambdas = vec![0.5, 0.5];
    assert_eq!(excess_bound(&z).unwrap().total, 0.0);

    let inp = two_tasks();
    let br = excess_bound(&inp).unwrap();
    assert!(rel_close(
        br.total,
        br.stability_term + br.optimization_term,
        1e-15
    ));
    assert!(br.total >= br.stability_term && br.total >= br.optimization_term);
    assert!(rel_close(br.total, oracle::compute(&inp).total, 1e-12));
    let json = serde_json::to_value(&br).unwrap();
    for key in [
        "stability_term",
        "A1",
        "A2",
        "A3",
        "eps_sgd",
        "chi_sq",
        "gamma_star",
        "total",
        "total_at_gamma_star",
    ] {
        assert!(json.get(key).is_some(), "{key}");
    }
}

#[test]
fn amgm_form_never_exceeds_the_relaxed_total() {
    for seed in 0..100 {
        let inp = oracle::random_inputs(5000 + seed);
        let br = excess_bound(&inp).unwrap();
        assert!(
            br.total_at_gamma_star <= br.total * (1.0 + 1e-12),
            "seed {seed}"
        );
    }
}

fn permuted(inp: &BoundInputs, perm: &[usize]) -> BoundInputs {
    let pick = |v: &Vec<f64>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let picku = |v: &Vec<usize>| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
    BoundInputs {
        profile: HeterogeneityProfile {
            sigma_sq: pick(&inp.profile.sigma_sq),
            zeta_sq: pick(&inp.profile.zeta_sq),
            ..inp.profile.clone()
        },
        n: picku(&inp.n),
        b: picku(&inp.b),
        k: picku(&inp.k),
        lambdas: pick(&inp.lambdas),
        weight_vectors: inp
            .weight_vectors
            .as_ref()
            .map(|w| perm.iter().map(|&i| w[i].clone()).collect()),
        ..inp.clone()
    }
}

#[test]
fn excess_bound_is_permutation_invariant() {
    for seed in 0..40 {
        let inp = oracle::random_inputs(9000 + seed);
        let n = inp.num_tasks();
        let perm: Vec<usize> = (0..n).rev().collect();
        let a = excess_bound(&inp).unwrap();
        let b = excess_bound(&permuted(&inp, &perm)).unwrap();
        assert!(rel_close(a.total, b.total, 1e-12), "seed {seed}");
        assert!(rel_close(
            a.total_at_gamma_star,
            b.total_at_gamma_star,
            1e-12
        ));
    }
}

#[test]
fn stability_bound_monotonicity() {
    let base = two_tasks();
    let v0 = stability_bound(&base).unwrap();
    let bump = |f: &dyn Fn(&mut BoundInputs)| {
        let mut x = base.clone();
        f(&mut x);
        stability_bound(&x).unwrap()
    };
    assert!(bump(&|x| x.eta_l *= 1.1) > v0);
    for i in 0..2 {
        assert!(bump(&|x| x.k[i] += 1) > v0);
        assert!(bump(&|x| x.profile.sigma_sq[i] += 0.1) > v0);
        assert!(bump(&|x| x.b[i] += 1) > v0);
        assert!(bump(&|x| x.n[i] += 10) < v0);
    }
    for seed in 0..100 {
        let inp = oracle::random_inputs(seed);
        let br = excess_bound(&inp).unwrap();
        for v in [
            br.stability_term,
            br.eps_sgd,
            br.chi_sq,
            br.optimization_term,
            br.total,
            br.total_at_gamma_star,
        ] {
            assert!(v.is_finite() && v >= 0.0);
        }
    }
}

#[test]
fn dissimilarity_constant_cases() {
    assert_eq!(
        dissimilarity_constants(&[0.5, 0.5], &[0.0, 0.0]).unwrap(),
        (2.0, 0.0)
    );
    assert_eq!(
        dissimilarity_constants(&[0.25; 4], &[0.3; 4]).unwrap().1,
        2.0 * 0.3
    );
    let (b, k) = dissimilarity_constants(&[0.2, 0.8], &[1.5, 0.5]).unwrap();
    assert_eq!(b, 2.0);
    assert!((k - 2.0 * (0.2 * 1.5 + 0.8 * 0.5)).abs() <= 1e-15);
}

fn ls(
    task: usize,
    w: Vec<f64>,
    mean: Vec<f64>,
    noise: f64,
    n: usize,
    seed: u64,
) -> TaskEnvironment {
    TaskEnvironment::least_squares(task, w, mean, noise, n, seed).unwrap()
}

fn only_center() -> ProbeConfig {
    ProbeConfig {
        count: 0,
        ..ProbeConfig::default()
    }
}

#[test]
fn sigma_vanishes_without_noise_at_the_generator() {
    let w = vec![0.5, -1.0, 2.0];
    let env = ls(0, w.clone(), vec![0.3, 0.0, 0.0], 0.0, 500, 1);
    let s = estimate_sigma(
        &env,
        &probe_points(&ParamVector::new(w).unwrap(), &only_center()),
    )
    .unwrap();
    assert!(s <= 1e-20, "{s}");
}

#[test]
fn sigma_matches_noise_closed_form() {
    let w = vec![0.5, -1.0, 2.0, 0.0];
    let mean = vec![0.3, 0.0, -0.4, 0.0];
    let s = 0.7;
    let env = ls(0, w.clone(), mean.clone(), s, 5000, 2);
    let got = estimate_sigma(
        &env,
        &probe_points(&ParamVector::new(w).unwrap(), &only_center()),
    )
    .unwrap();
    let want = s * s * (4.0 + mean.iter().map(|m| m * m).sum::<f64>());
    assert!((got - want).abs() <= 0.1 * want, "{got} vs {want}");
}

#[test]
fn batch_variance_follows_one_over_b() {
    let env = ls(0, vec![1.0, -0.5, 0.3], vec![0.0, 0.2, 0.0], 0.5, 4000, 3);
    let x = ParamVector::new(vec![0.2, 0.1, -0.3]).unwrap();
    let full = model::full_grad(&env, &x).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut var_at = |b: usize| {
        let trials = 4000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..env.n())).collect();
            let g = model::batch_grad(&env, &x, &idx).unwrap();
            acc += g
                .as_slice()
                .iter()
                .zip(full.as_slice())
                .map(|(a, c)| (a - c).powi(2))
                .sum::<f64>();
        }
        acc / trials as f64
    };
    let (v8, v16) = (var_at(8), var_at(16));
    let ratio = v8 / v16;
    assert!((ratio - 2.0).abs() <= 0.4, "{ratio}");
}

/// Population gradient `(I + mu mu^T)(x - w)` with an explicit matrix.
fn pop_grad(w: &[f64], mu: &[f64], x: &[f64]) -> Vec<f64> {
    let p = w.len();
    let mut m = vec![vec![0.0; p]; p];
    for r in 0..p {
        for c in 0..p {
            m[r][c] = mu[r] * mu[c] + if r == c { 1.0 } else { 0.0 };
        }
    }
    (0..p)
        .map(|r| (0..p).map(|c| m[r][c] * (x[c] - w[c])).sum())
        .collect()
}

#[test]
fn zeta_matches_quadratic_closed_form() {
    let tasks = [
        (vec![1.0, 0.0, 0.5], vec![0.0, 0.5, 0.0]),
        (vec![-0.5, 1.0, 0.5], vec![0.4, 0.0, 0.0]),
    ];
    let envs: Vec<TaskEnvironment> = tasks
        .iter()
        .enumerate()
        .map(|(i, (w, m))| ls(i, w.clone(), m.clone(), 0.3, 20_000, 10 + i as u64))
        .collect();
    let probes = probe_points(
        &ParamVector::zeros(3),
        &ProbeConfig {
            count: 16,
            radius: 1.0,
            seed: 2,
        },
    );
    let views: Vec<&dyn DataView> = envs.iter().map(|e| e as &dyn DataView).collect();
    let got = estimate_zeta(&views, &probes).unwrap();
    for i in 0..2 {
        let want = probes
            .iter()
            .map(|x| {
                let g: Vec<Vec<f64>> = tasks
                    .iter()
                    .map(|(w, m)| pop_grad(w, m, x.as_slice()))
                    .collect();
                (0..3)
                    .map(|k| (g[i][k] - 0.5 * (g[0][k] + g[1][k])).powi(2))
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        assert!(
            (got[i] - want).abs() <= 0.1 * want,
            "task {i}: {} vs {want}",
            got[i]
        );
    }
    let single = estimate_zeta(&views[..1], &probes).unwrap();
    assert_eq!(single, vec![0.0]);
    assert!(estimate_zeta(&views, &[]).is_err());
}

#[test]
fn zeta_is_small_without_heterogeneity() {
    let fam = gen_task_family(&FamilyManifest::least_squares(3, 5, 2000, 0.0, 0.5, 6)).unwrap();
    let views: Vec<&dyn DataView> = fam.envs().iter().map(|e| e as &dyn DataView).collect();
    let probes = probe_points(fam.base().unwrap(), &ProbeConfig::default());
    for z in estimate_zeta(&views, &probes).unwrap() {
        assert!(z < 1e-2, "{z}");
    }
}

#[test]
fn least_squares_smoothness_closed_form_and_probes() {
    let env = ls(
        0,
        vec![1.0, 2.0, -1.0, 0.0],
        vec![0.5, 0.0, 0.0, 0.0],
        0.5,
        300,
        7,
    );
    // per-sample curvature phi phi^T has top eigenvalue ||phi||^2; power iteration as the oracle
    let oracle_l = env
        .dataset()
        .iter()
        .map(|s| {
            let mut v = vec![1.0; 4];
            let mut lam = 0.0;
            for _ in 0..50 {
                let d: f64 = s.features.iter().zip(&v).map(|(a, b)| a * b).sum();
                let u: Vec<f64> = s.features.iter().map(|f| f * d).collect();
                lam = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = u.iter().map(|x| x / lam).collect();
            }
            lam
        })
        .fold(0.0, f64::max);
    let closed = env.sample_smoothness().unwrap();
    assert!(rel_close(closed, oracle_l, 1e-9));
    let (l, prov) = estimate_l(
        &[&env],
        &probe_pairs(&ParamVector::zeros(4), &ProbeConfig::default()),
    )
    .unwrap();
    assert_eq!((l, prov), (closed, Provenance::ClosedForm));
    let probed = estimate_l_probed(
        &[&env],
        &probe_pairs(&ParamVector::zeros(4), &ProbeConfig::default()),
    )
    .unwrap();
    assert!(
        probed <= closed * (1.0 + 1e-12) && probed >= 0.5 * closed,
        "{probed} vs {closed}"
    );

    let scaled: Vec<Sample> = env
        .dataset()
        .iter()
        .map(|s| Sample {
            features: s.features.iter().map(|f| 2.0 * f).collect(),
            ..s.clone()
        })
        .collect();
    let env2 = TaskEnvironment::from_samples(0, *env.arch(), env.spec().clone(), scaled).unwrap();
    assert!(rel_close(
        env2.sample_smoothness().unwrap(),
        4.0 * closed,
        1e-12
    ));

    let same = ParamVector::zeros(4);
    assert!(estimate_l_probed(&[&env], &[(same.clone(), same)]).is_err());
}

#[test]
fn mlp_probed_smoothness_saturates() {
    let fam = gen_task_family(&FamilyManifest::mlp(1, 4, 3, 200, 0.0, 0.5, 8)).unwrap();
    let env = &fam.envs()[0];
    let base = fam.base().unwrap();
    let at = |count| {
        estimate_l_probed(
            &[env],
            &probe_pairs(
                base,
                &ProbeConfig {
                    count,
                    radius: 0.5,
                    seed: 1,
                },
            ),
        )
        .unwrap()
    };
    let (a, b) = (at(64), at(128));
    assert!(a.is_finite() && b.is_finite());
    assert!((b - a).abs() <= 0.2 * a, "{a} vs {b}");
}

#[test]
fn gradient_dissimilarity_verification() {
    let single = gen_task_family(&FamilyManifest::least_squares(1, 4, 300, 0.0, 0.5, 1)).unwrap();
    let views: Vec<&dyn DataView> = single.envs().iter().map(|e| e as &dyn DataView).collect();
    let probes = probe_points(single.base().unwrap(), &ProbeConfig::default());
    let r = verify_grad_dissimilarity(&views, &[1.0], &probes, &[0.0]).unwrap();
    assert_eq!(r.violations, 0);
    for (l, rh) in &r.per_probe {
        assert!((rh - 2.0 * l).abs() <= 1e-12 * rh.max(1.0));
    }

    let same = gen_task_family(&FamilyManifest::least_squares(3, 4, 2000, 0.0, 0.5, 2)).unwrap();
    let views: Vec<&dyn DataView> = same.envs().iter().map(|e| e as &dyn DataView).collect();
    let probes = probe_points(same.base().unwrap(), &ProbeConfig::default());
    let zeta = estimate_zeta(&views, &probes).unwrap();
    let r = verify_grad_dissimilarity(&views, &[1.0 / 3.0; 3], &probes, &zeta).unwrap();
    assert_eq!(r.violations, 0);
    for (l, rh) in &r.per_probe {
        assert!(rh - l >= 0.9 * l, "slack {} vs {l}", rh - l);
    }

    let het = gen_task_family(&FamilyManifest::least_squares(4, 4, 500, 1.0, 0.5, 3)).unwrap();
    let views: Vec<&dyn DataView> = het.envs().iter().map(|e| e as &dyn DataView).collect();
    let probes = probe_points(
        het.base().unwrap(),
        &ProbeConfig {
            count: 99,
            ..ProbeConfig::default()
        },
    );
    let zeta = estimate_zeta(&views, &probes).unwrap();
    let r = verify_grad_dissimilarity(&views, &[0.25; 4], &probes, &zeta).unwrap();
    assert_eq!(r.per_probe.len(), 100);
    assert_eq!(r.violations, 0, "max violation {}", r.max_violation);
}
