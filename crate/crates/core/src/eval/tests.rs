use proptest::prelude::*;

use super::*;
use crate::potentials::{sample_interior, BrownianAnnulus, Interval};
use crate::rng::seeded;
use crate::test_models::{AnnulusExact, Constant};

fn point(x: &[f64]) -> Tensor {
    Tensor::row(x.to_vec())
}

#[test]
fn relative_l2_examples() {
    let r = [1.0, 2.0, 2.0];
    assert_eq!(relative_l2(&r, &r).unwrap(), 0.0);
    assert!((relative_l2(&[2.0, 4.0, 4.0], &r).unwrap() - 1.0).abs() < 1e-15);
    let eps = 0.3;
    assert!((relative_l2(&[1.0 + eps, 2.0, 2.0], &r).unwrap() - eps / 3.0).abs() < 1e-15);
    assert!(matches!(relative_l2(&[1.0], &[0.0]), Err(EvalError::ZeroReference)));
    assert!(matches!(relative_l2(&[1.0], &r), Err(EvalError::Length(1, 3))));
}

proptest! {
    #[test]
    fn relative_l2_is_linear_in_the_perturbation(
        r in prop::collection::vec(0.1f64..1.0, 8),
        v in prop::collection::vec(-1.0f64..1.0, 8),
        eps in 1e-6f64..1e-2,
    ) {
        let q1: Vec<f64> = r.iter().zip(&v).map(|(a, b)| a + eps * b).collect();
        let q2: Vec<f64> = r.iter().zip(&v).map(|(a, b)| a + 2.0 * eps * b).collect();
        let e1 = relative_l2(&q1, &r).unwrap();
        let e2 = relative_l2(&q2, &r).unwrap();
        prop_assert!((e2 - 2.0 * e1).abs() <= 1e-9 * e1.max(1e-12));
    }
}

#[test]
fn brownian_midpoint_is_one_half() {
    let p = Interval::new(1.0);
    let cfg = McConfig {
        n_traj: 2000,
        dt: 1e-4,
        max_steps: 1_000_000,
        threads: 0,
    };
    let e = mc_committor(&p, &point(&[0.5]), &cfg, 7).unwrap()[0];
    assert_eq!(e.hits_a + e.hits_b + e.timeouts, 2000);
    assert_eq!(e.timeouts, 0);
    assert!((e.value - 0.5).abs() <= 3.0 * e.se, "{e:?}");
}

#[test]
fn interval_interior_point_matches_linear_committor() {
    let p = Interval::new(1.0);
    let cfg = McConfig {
        n_traj: 2000,
        dt: 1e-5,
        max_steps: 10_000_000,
        threads: 0,
    };
    let e = mc_committor(&p, &point(&[0.2]), &cfg, 8).unwrap()[0];
    assert!((e.value - 0.2).abs() <= 3.0 * e.se, "{e:?}");
}

#[test]
fn point_just_inside_b_boundary_commits_to_b() {
    let p = BrownianAnnulus::new(5, 1.0, 2.0, 1.0).unwrap();
    let mut x = vec![0.0; 5];
    x[0] = 2.0 - 1e-4;
    let cfg = McConfig {
        n_traj: 200,
        dt: 1e-6,
        max_steps: 10_000_000,
        threads: 0,
    };
    let e = mc_committor(&p, &point(&x), &cfg, 9).unwrap()[0];
    assert!(e.value > 0.97, "{e:?}");
}

#[test]
fn annulus_20d_point_matches_closed_form() {
    let p = BrownianAnnulus::new(20, 1.0, 2.0, 1.0).unwrap();
    let mut x = vec![0.0; 20];
    let r = 1.05;
    for v in x.iter_mut() {
        *v = r / 20f64.sqrt();
    }
    let cfg = McConfig {
        n_traj: 1000,
        dt: 1e-6,
        max_steps: 10_000_000,
        threads: 0,
    };
    let e = mc_committor(&p, &point(&x), &cfg, 10).unwrap()[0];
    let exact = p.committor_radial(r).unwrap();
    assert!((e.value - exact).abs() <= 3.0 * e.se, "{e:?} vs {exact}");
}

#[test]
fn standard_error_scales_with_trajectory_count() {
    let p = Interval::new(1.0);
    let x = Tensor::full(&[600, 1], 0.3);
    let var = |n: usize, seed: u64| {
        let cfg = McConfig {
            n_traj: n,
            dt: 1e-3,
            max_steps: 1_000_000,
            threads: 0,
        };
        let v: Vec<f64> = mc_committor(&p, &x, &cfg, seed).unwrap().iter().map(|e| e.value).collect();
        let (_, sd) = mean_sd(&v);
        sd * sd
    };
    let ratio = var(50, 11) / var(100, 12);
    assert!((ratio - 2.0).abs() <= 0.4, "variance ratio {ratio}");
}

#[test]
fn estimates_do_not_depend_on_thread_count() {
    let p = Interval::new(1.0);
    let x = Tensor::column(vec![0.1, 0.4, 0.7]);
    let mut cfg = McConfig {
        n_traj: 50,
        dt: 1e-3,
        max_steps: 100_000,
        threads: 1,
    };
    let a = mc_committor(&p, &x, &cfg, 3).unwrap();
    cfg.threads = 3;
    let b = mc_committor(&p, &x, &cfg, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn timeouts_are_flagged() {
    let p = Interval::new(1.0);
    let cfg = McConfig {
        n_traj: 10,
        dt: 1e-6,
        max_steps: 1,
        threads: 0,
    };
    let e = mc_committor(&p, &point(&[0.5]), &cfg, 0).unwrap()[0];
    assert!(e.all_timeout());
    assert_eq!(e.timeouts, 10);
    assert!(e.value.is_nan());
}

#[test]
fn starting_in_a_set_names_the_point() {
    let p = Interval::new(1.0);
    let x = Tensor::column(vec![0.5, 0.0]);
    let err = mc_committor(&p, &x, &McConfig::default(), 0).unwrap_err();
    assert!(matches!(err, EvalError::Point { index: 1, .. }), "{err}");
}

#[test]
fn validation_curve_spans_the_closed_annulus() {
    let c = validation_curve(20, 1.0, 2.0, 5000);
    assert_eq!(c.shape(), &[5000, 20]);
    let norms: Vec<f64> = c.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    assert!((norms[0] - 1.0).abs() < 1e-12);
    assert!((norms[4999] - 2.0).abs() < 1e-12);
    assert!(norms.iter().all(|&r| (1.0 - 1e-12..=2.0 + 1e-12).contains(&r)));
    assert!(c.iter_rows().all(|r| r.iter().all(|&v| v == r[0])));
}

#[test]
fn exact_committor_has_zero_curve_error() {
    let p = BrownianAnnulus::new(20, 1.0, 2.0, 1.0).unwrap();
    let e = curve_error(&AnnulusExact::new(20, 1.0, 2.0), &p, 5000).unwrap();
    assert!(e < 1e-12, "{e}");
    let e = curve_error(&Constant::new(20, 0.5), &p, 5000).unwrap();
    assert!(e > 0.3);
}

#[test]
fn histogram_counts_every_sample() {
    let v = [-1.0, 0.0, 0.25, 0.5, 0.99, 1.0, 7.0];
    let h = Histogram::new(&v, 4, 0.0, 1.0).unwrap();
    assert_eq!(h.edges, vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    assert_eq!(h.counts, vec![2, 1, 1, 3]);
    assert_eq!(h.total(), v.len() as u64);
    let empty = norm_histogram(&Tensor::zeros(&[0, 3]), 5, 0.0, 1.0).unwrap();
    assert_eq!(empty.counts, vec![0; 5]);
    assert_eq!(empty.fraction_between(0.0, 1.0), 0.0);
    assert!(Histogram::new(&v, 0, 0.0, 1.0).is_err());
}

#[test]
fn histogram_round_trips_through_json() {
    let h = Histogram::new(&[0.1, 0.2, 0.9], 3, 0.0, 1.0).unwrap();
    let s = serde_json::to_string(&h).unwrap();
    assert_eq!(serde_json::from_str::<Histogram>(&s).unwrap(), h);
}

#[test]
fn uniform_ball_mass_sits_near_the_outer_radius() {
    let d = 20;
    let mut rng = seeded(4);
    let n = 20_000;
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let g: Vec<f64> = (0..d).map(|_| crate::potentials::gaussian(&mut rng)).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let u: f64 = rand::Rng::random(&mut rng);
        let r = u.powf(1.0 / d as f64);
        data.extend(g.iter().map(|v| v / norm * r));
    }
    let x = Tensor::new(vec![n, d], data).unwrap();
    let h = norm_histogram(&x, 10, 0.0, 1.0).unwrap();
    assert_eq!(h.total(), n as u64);
    let outer = h.fraction_between(0.9, 1.0);
    let exact = 1.0 - 0.9f64.powi(20);
    assert!((outer - exact).abs() < 0.01, "{outer} vs {exact}");
}

#[test]
fn fraction_between_uses_whole_bins() {
    let h = Histogram::new(&[1.1, 1.3, 1.5, 1.7, 1.9], 10, 1.0, 2.0).unwrap();
    assert!((h.fraction_between(1.2, 1.8) - 0.6).abs() < 1e-15);
}

#[test]
fn zero_tolerance_gives_an_empty_isosurface() {
    let p = BrownianAnnulus::new(3, 1.0, 2.0, 1.0).unwrap();
    let pool = sample_interior(&p, 500, &mut seeded(1));
    let err = extract_isosurface(&AnnulusExact::new(3, 1.0, 2.0), &pool, 0.0).unwrap_err();
    assert!(matches!(err, EvalError::EmptyIsosurface { .. }));
    assert!(err.to_string().contains("larger tolerance"));
}

#[test]
fn bisection_candidates_sit_on_the_level_set() {
    let p = BrownianAnnulus::new(3, 1.0, 2.0, 1.0).unwrap();
    let m = AnnulusExact::new(3, 1.0, 2.0);
    let c = isosurface_candidates(&m, &p, 100, 5e-5, &mut seeded(2)).unwrap();
    assert_eq!(c.rows(), 100);
    for (q, r) in m.values(&c).unwrap().iter().zip(c.iter_rows()) {
        assert!((q - 0.5).abs() <= 5e-5);
        assert!(!p.in_ab(r));
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 4.0 / 3.0).abs() < 1e-3);
    }
}

#[test]
fn exact_committor_isosurface_centres_on_one_half() {
    let p = BrownianAnnulus::new(3, 1.0, 2.0, 1.0).unwrap();
    let m = AnnulusExact::new(3, 1.0, 2.0);
    let pool = isosurface_candidates(&m, &p, 40, 5e-5, &mut seeded(3)).unwrap();
    let mc = McConfig {
        n_traj: 200,
        dt: 1e-5,
        max_steps: 10_000_000,
        threads: 0,
    };
    let rep = isosurface_histogram(&m, &p, &pool, 5e-5, 40, &mc, 10, 5).unwrap();
    assert_eq!(rep.gamma_size, 40);
    assert_eq!(rep.points, 40);
    assert_eq!(rep.flagged, 0);
    assert_eq!(rep.histogram.total(), 40);
    let se = rep.sd / (rep.points as f64).sqrt();
    assert!((rep.mean - 0.5).abs() <= 3.0 * se, "{} ± {se}", rep.mean);
}

#[test]
fn constant_net_takes_the_whole_pool() {
    let p = BrownianAnnulus::new(3, 1.0, 2.0, 1.0).unwrap();
    let pool = sample_interior(&p, 30, &mut seeded(6));
    let mc = McConfig {
        n_traj: 100,
        dt: 1e-4,
        max_steps: 10_000_000,
        threads: 0,
    };
    let rep = isosurface_histogram(&Constant::new(3, 0.5), &p, &pool, 0.0, 1000, &mc, 10, 5).unwrap();
    assert_eq!(rep.gamma_size, 30);
    // the estimates spread like the true committor over the shell
    assert!(rep.sd > 0.15, "sd {}", rep.sd);
}

#[test]
fn isosurface_keeps_the_tightest_points() {
    let p = Interval::new(1.0);
    let m = Constant::new(1, 0.5);
    let pool = Tensor::column(vec![0.3, 0.5, 0.7]);
    let mc = McConfig {
        n_traj: 20,
        dt: 1e-3,
        max_steps: 100_000,
        threads: 0,
    };
    let rep = isosurface_histogram(&m, &p, &pool, 0.1, 2, &mc, 5, 0).unwrap();
    assert_eq!(rep.gamma_size, 3);
    assert_eq!(rep.points, 2);
}
