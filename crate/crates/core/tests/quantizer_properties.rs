use gradcomp::quantize::{
    multiscale_decode, multiscale_encode, multiscale_local_scales, qsgd_decode, qsgd_encode, share_scales,
};
use gradcomp::{l2_norm, GradientVector, MaxNorm, QuantRng, ScaleSet};
use proptest::prelude::*;

/// Exact `E‖Q(v) − v‖²` for stochastic rounding on grids of spacing `w/s_i`.
fn exact_mse(v: &[f64], w: f64, scales: &[f64]) -> f64 {
    v.iter()
        .zip(scales)
        .map(|(&x, &s)| {
            let r = x.abs() / w * s;
            let p = r - r.floor();
            (w / s).powi(2) * p * (1.0 - p)
        })
        .sum()
}

fn gradient() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

proptest! {
    #[test]
    fn decoded_value_is_an_adjacent_grid_point(v in gradient(), s in 1u32..=512, seed: u64) {
        let w = l2_norm(&v).unwrap();
        prop_assume!(w > 0.0);
        let norm = MaxNorm::new(w).unwrap();
        let levels = qsgd_encode(&GradientVector::new(v.clone()).unwrap(), norm, s, &QuantRng::new(seed).stream(0, 0)).unwrap();
        prop_assert!(levels.levels().iter().all(|l| l.unsigned_abs() <= s));
        let zeta: Vec<f64> = levels.levels().iter().map(|&l| f64::from(l)).collect();
        let back = qsgd_decode(&zeta, norm, s).unwrap();
        let step = w / f64::from(s);
        for (x, y) in v.iter().zip(back.iter()) {
            prop_assert!((x - y).abs() <= step * (1.0 + 1e-12));
            prop_assert!(*y == 0.0 || y.signum() == x.signum());
        }
    }

    #[test]
    fn error_is_within_the_grid_worst_case(v in gradient(), b in 0u32..8) {
        let w = l2_norm(&v).unwrap();
        prop_assume!(w > 0.0);
        let n = v.len();
        let coarse = exact_mse(&v, w, &vec![f64::from(1u32 << b); n]);
        let fine = exact_mse(&v, w, &vec![f64::from(1u32 << (b + 1)); n]);
        // Each coordinate contributes at most (w/s)²/4.
        let worst_coarse = n as f64 * (w / f64::from(1u32 << b)).powi(2) / 4.0;
        prop_assert!(fine <= worst_coarse / 4.0 * (1.0 + 1e-12));
        prop_assert!(coarse <= worst_coarse * (1.0 + 1e-12));
    }

    #[test]
    fn multiscale_error_is_at_most_the_single_scale_error(v in gradient(), b in 1u32..8, extra in 1usize..4) {
        let w = l2_norm(&v).unwrap();
        prop_assume!(w > 0.0);
        let s = 1u32 << b;
        let set = ScaleSet::new((0..=extra).map(|j| s << (2 * j)).collect()).unwrap();
        let local = multiscale_local_scales(&v, MaxNorm::new(w).unwrap(), &set).unwrap();
        let chosen: Vec<f64> = local.indices().iter().map(|&i| f64::from(set.get(i))).collect();
        let multi = exact_mse(&v, w, &chosen);
        let single = exact_mse(&v, w, &vec![f64::from(s); v.len()]);
        // Every chosen grid is a refinement of the base grid by a power of 4.
        prop_assert!(multi <= single + 1e-12 * single.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn multiscale_roundtrip_stays_on_the_shared_grid(
        workers in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 24), 1..5),
        seed: u64,
    ) {
        let w = workers.iter().map(|v| l2_norm(v).unwrap()).fold(0.0, f64::max);
        prop_assume!(w > 0.0);
        let norm = MaxNorm::new(w).unwrap();
        let set = ScaleSet::new(vec![4, 16, 64]).unwrap();
        let local: Vec<_> = workers.iter().map(|v| multiscale_local_scales(v, norm, &set).unwrap()).collect();
        let shared = share_scales(&local).unwrap();
        for (m, v) in workers.iter().enumerate() {
            let rng = QuantRng::new(seed).stream(m as u64, 0);
            let levels = multiscale_encode(&GradientVector::new(v.clone()).unwrap(), norm, &shared, &set, &rng).unwrap();
            prop_assert!(levels.levels().iter().all(|l| l.unsigned_abs() <= set.min_scale()));
            let zeta: Vec<f64> = levels.levels().iter().map(|&l| f64::from(l)).collect();
            let back = multiscale_decode(&zeta, norm, &shared, &set).unwrap();
            for (i, (x, y)) in v.iter().zip(back.iter()).enumerate() {
                let step = w / f64::from(set.get(shared.indices()[i]));
                prop_assert!((x - y).abs() <= step * (1.0 + 1e-12));
            }
        }
    }
}

#[test]
fn monte_carlo_variance_decreases_with_scale() {
    let v: Vec<f64> = (0..200).map(|i| ((i * 53 % 97) as f64 - 48.0) / 17.0).collect();
    let w = l2_norm(&v).unwrap();
    let norm = MaxNorm::new(w).unwrap();
    let g = GradientVector::new(v.clone()).unwrap();
    let draws = 4000;
    let measured = |s: u32| -> f64 {
        let rng = QuantRng::new(9);
        (0..draws)
            .map(|t| {
                let levels = qsgd_encode(&g, norm, s, &rng.stream(0, t)).unwrap();
                let zeta: Vec<f64> = levels.levels().iter().map(|&l| f64::from(l)).collect();
                let back = qsgd_decode(&zeta, norm, s).unwrap();
                v.iter().zip(back.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum::<f64>()
            / draws as f64
    };
    let mut last = f64::INFINITY;
    for s in [1, 4, 16, 64] {
        let mse = measured(s);
        let exact = exact_mse(&v, w, &vec![f64::from(s); v.len()]);
        assert!((mse - exact).abs() <= 0.05 * exact, "s={s}: {mse} vs {exact}");
        assert!(mse < last, "s={s}");
        last = mse;
    }
}
