//! Euclidean projection onto the probability simplex.

/// `argmin_{w in simplex} ||w - v||` by the sort-and-threshold rule.
pub fn project(v: &[f64]) -> Vec<f64> {
    if v.is_empty() {
        return Vec::new();
    }
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, uk) in u.iter().enumerate() {
        cumsum += uk;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if uk - t > 0.0 {
            theta = t;
        }
    }
    let mut w: Vec<f64> = v.iter().map(|x| (x - theta).max(0.0)).collect();
    // remove the rounding residue so the sum is 1 to the last ulp or so
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter_mut().for_each(|x| *x /= s);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_points_and_corners() {
        assert_eq!(project(&[0.2, 0.8]), vec![0.2, 0.8]);
        assert_eq!(project(&[5.0, 0.0]), vec![1.0, 0.0]);
        let w = project(&[1.0, 1.0, 1.0]);
        for x in w {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn projection_is_on_simplex_and_optimal(v in prop::collection::vec(-3.0f64..3.0, 1..6)) {
            let w = project(&v);
            prop_assert!(w.iter().all(|x| *x >= 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            // variational inequality: <v - w, y - w> <= 0 for simplex vertices y
            for k in 0..v.len() {
                let mut s = 0.0;
                for i in 0..v.len() {
                    let y = if i == k { 1.0 } else { 0.0 };
                    s += (v[i] - w[i]) * (y - w[i]);
                }
                prop_assert!(s <= 1e-9, "{s}");
            }
        }
    }
}
