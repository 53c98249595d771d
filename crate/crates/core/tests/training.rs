use gradcomp::collectives::CostModel;
use gradcomp::trainer::{NormSource, StepSize, Task, TaskSpec, TrainConfig, Trainer};
use gradcomp::{l2_norm, Quantizer, ScaleSet, SchemeDescriptor};

fn quadratic(dim: usize, noise_sigma: f64) -> TaskSpec {
    TaskSpec::Quadratic { dim, lambda_min: 1.0, lambda_max: 10.0, noise_sigma, data_seed: 3 }
}

fn config(task: TaskSpec, scheme: SchemeDescriptor, workers: usize, iterations: u64, eta: f64) -> TrainConfig {
    TrainConfig {
        task,
        scheme,
        workers,
        iterations,
        step_size: StepSize::Constant { eta },
        seed: 11,
        norm_source: NormSource::Subvector,
        cost: CostModel::default(),
        log_every: 1,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn final_iterate(cfg: TrainConfig) -> Vec<f64> {
    let mut t = Trainer::new(cfg).unwrap();
    while t.iteration() < t.config().iterations {
        t.step().unwrap();
    }
    t.theta().to_vec()
}

#[test]
fn fine_quantization_with_one_worker_tracks_gradient_descent() {
    let s = 1 << 15;
    let eta = 0.05;
    let cfg = config(quadratic(20, 0.0), SchemeDescriptor::QsgdMaxNorm { s }, 1, 1, eta);
    let mut trainer = Trainer::new(cfg).unwrap();
    let theta0 = trainer.theta().to_vec();
    let g: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
    trainer.step_with_gradients(std::slice::from_ref(&g)).unwrap();
    let gd: Vec<f64> = theta0.iter().zip(&g).map(|(t, gi)| t - eta * gi).collect();
    let gap = max_abs_diff(trainer.theta(), &gd);
    // Rounding moves each coordinate by at most one grid step ‖g‖/s.
    assert!(gap <= eta * l2_norm(&g).unwrap() / f64::from(s) * (1.0 + 1e-12), "gap {gap}");
    assert!(gap < 2f64.powi(-10));
}

#[test]
fn uncompressed_matches_plain_parallel_sgd() {
    let (workers, iterations, eta) = (3, 40, 0.02);
    let cfg = config(quadratic(12, 0.7), SchemeDescriptor::Uncompressed, workers, iterations, eta);
    let task: Task = cfg.task.build().unwrap();
    let mut theta = task.initial_point();
    let mut g = vec![0.0; theta.len()];
    for t in 0..iterations {
        let mut avg = vec![0.0; theta.len()];
        for m in 0..workers {
            task.stochastic_gradient(&theta, cfg.seed, m, workers, t, &mut g);
            for (a, x) in avg.iter_mut().zip(&g) {
                *a += x / workers as f64;
            }
        }
        for (th, a) in theta.iter_mut().zip(&avg) {
            *th -= eta * a;
        }
    }
    let got = final_iterate(cfg);
    // Only the summation order differs.
    assert!(max_abs_diff(&got, &theta) < 1e-12, "{}", max_abs_diff(&got, &theta));
}

#[test]
fn runs_are_bitwise_reproducible() {
    let scheme = SchemeDescriptor::GlobalRandK { k: 7, inner: Quantizer::SingleScale { s: 4 } };
    let cfg = config(quadratic(30, 1.0), scheme, 4, 60, 0.03);
    let a = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    let b = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    assert_eq!(a.final_iterate, b.final_iterate);
    assert_eq!(a.averaged_iterate, b.averaged_iterate);
    assert_eq!(a.rows, b.rows);

    let mut other = cfg;
    other.seed += 1;
    let c = Trainer::new(other).unwrap().run().unwrap();
    assert_ne!(a.final_iterate, c.final_iterate);
}

#[test]
fn one_scale_multiscale_equals_single_scale() {
    let single = config(quadratic(25, 1.0), SchemeDescriptor::QsgdMaxNorm { s: 8 }, 3, 30, 0.03);
    let mut multi = single.clone();
    multi.scheme = SchemeDescriptor::QsgdMaxNormMultiScale { scales: ScaleSet::new(vec![8]).unwrap() };
    assert_eq!(final_iterate(single), final_iterate(multi));
}

#[test]
fn keeping_every_coordinate_matches_the_dense_scheme_in_expectation() {
    // Rand-K with K = n only permutes coordinates; both runs stay within the
    // quantization noise of the exact run.
    let n = 16;
    let dense = config(quadratic(n, 0.0), SchemeDescriptor::QsgdMaxNorm { s: 1 << 12 }, 2, 50, 0.05);
    let mut sparse = dense.clone();
    sparse.scheme = SchemeDescriptor::GlobalRandK { k: n, inner: Quantizer::SingleScale { s: 1 << 12 } };
    let (a, b) = (final_iterate(dense.clone()), final_iterate(sparse));
    let mut exact = dense;
    exact.scheme = SchemeDescriptor::Uncompressed;
    let e = final_iterate(exact);
    assert!(max_abs_diff(&a, &e) < 1e-2, "{}", max_abs_diff(&a, &e));
    assert!(max_abs_diff(&b, &e) < 1e-2, "{}", max_abs_diff(&b, &e));
}

#[test]
fn gradient_descent_converges_linearly_on_the_quadratic() {
    // Exact gradients with eta = 1/L contract by (1 - mu/L) per step.
    let (mu, l) = (1.0, 10.0);
    let iterations = 100;
    let cfg = config(quadratic(20, 0.0), SchemeDescriptor::Uncompressed, 2, iterations, 1.0 / l);
    let log = Trainer::new(cfg).unwrap().run().unwrap();
    let initial = log.summary.initial_loss;
    for row in &log.rows {
        let bound = (1.0 - mu / l).powi(2 * row.iteration as i32) * initial;
        assert!(row.loss <= bound * (1.0 + 1e-9) + 1e-300, "t={} loss={} bound={bound}", row.iteration, row.loss);
    }
    assert!(log.summary.final_loss < 1e-8 * initial);
}

#[test]
fn coarser_quantization_ends_further_from_the_optimum() {
    let subopt = |scheme: SchemeDescriptor| -> f64 {
        (0..3)
            .map(|seed| {
                let mut cfg = config(quadratic(40, 0.1), scheme.clone(), 4, 400, 0.05);
                cfg.seed = seed;
                Trainer::new(cfg).unwrap().run().unwrap().summary.final_loss
            })
            .sum::<f64>()
    };
    let coarse = subopt(SchemeDescriptor::QsgdMaxNorm { s: 1 });
    let fine = subopt(SchemeDescriptor::QsgdMaxNorm { s: 256 });
    let dense = subopt(SchemeDescriptor::Uncompressed);
    assert!(coarse > fine, "{coarse} vs {fine}");
    assert!(fine < 2.0 * dense, "{fine} vs {dense}");
}

#[test]
fn ledger_charges_the_nominal_payload() {
    let scales = ScaleSet::new(vec![2, 8, 32]).unwrap();
    let cfg = config(
        quadratic(10, 1.0),
        SchemeDescriptor::GlobalRandK { k: 4, inner: Quantizer::MultiScale { scales } },
        3,
        5,
        0.01,
    );
    let log = Trainer::new(cfg).unwrap().run().unwrap();
    // Header, then 4 coordinates at 2 index bits and a 2-bit level.
    assert_eq!(log.summary.total_bits, 5 * (32 + 4 * (2 + 2)));
    assert!(log.rows[1..].iter().all(|r| r.bits == 32 + 16));
}

#[test]
fn mlp_classifier_learns() {
    let task = TaskSpec::TinyMlp {
        inputs: 8,
        hidden: 16,
        classes: 3,
        samples: 300,
        batch_size: 16,
        separation: 3.0,
        data_seed: 2,
    };
    let cfg = config(task, SchemeDescriptor::QsgdMaxNorm { s: 8 }, 4, 300, 0.3);
    let log = Trainer::new(cfg).unwrap().run().unwrap();
    assert!(log.summary.final_loss < 0.5 * log.summary.initial_loss);
    assert!(log.summary.final_accuracy.unwrap() > 0.9);
}
