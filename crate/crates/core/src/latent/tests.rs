use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::dastr::{uniform_stage, FlowSampler};
use crate::flow::FlowConfig;
use crate::potentials::{DoubleWell, MuellerParams, Quadratic, RuggedMueller};
use crate::rng::seeded;
use crate::sde::{simulate, Integrator};

fn plane_data(n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    // two orthonormal directions in R^10
    let a: Vec<f64> = (0..10).map(|i| if i < 5 { 0.2f64.sqrt() } else { 0.0 }).collect();
    let b: Vec<f64> = (0..10).map(|i| if i >= 5 { 0.2f64.sqrt() } else { 0.0 }).collect();
    let mut data = Vec::with_capacity(n * 10);
    for _ in 0..n {
        let (u, v): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        data.extend((0..10).map(|i| u * a[i] + v * b[i]));
    }
    Tensor::new(vec![n, 10], data).unwrap()
}

fn ae_cfg(hidden: Vec<usize>, latent_dim: usize, activation: Activation, epochs: usize) -> AeTraining {
    AeTraining {
        hidden,
        latent_dim,
        activation,
        epochs,
        batch: 100,
        lr: 1e-3,
    }
}

#[test]
fn plane_in_ten_dimensions_is_recovered() {
    let data = plane_data(2000, 1);
    let (ae, mse) = train_autoencoder(&data, &ae_cfg(vec![32], 2, Activation::Tanh, 200), &mut seeded(2)).unwrap();
    assert!(mse < 1e-3, "mse {mse}");
    assert_eq!(ae.latent_dim(), 2);
}

#[test]
fn full_width_linear_autoencoder_reaches_identity() {
    let data = plane_data(500, 3);
    let (_, mse) = train_autoencoder(&data, &ae_cfg(vec![], 10, Activation::Identity, 300), &mut seeded(4)).unwrap();
    assert!(mse < 1e-6, "mse {mse}");
}

#[test]
fn autoencoder_rejects_bad_arguments() {
    let data = plane_data(10, 0);
    assert!(train_autoencoder(&data, &ae_cfg(vec![], 11, Activation::Tanh, 1), &mut seeded(0)).is_err());
    assert!(train_autoencoder(&Tensor::zeros(&[0, 10]), &ae_cfg(vec![], 2, Activation::Tanh, 1), &mut seeded(0)).is_err());
}

#[test]
fn divergent_autoencoder_training_aborts() {
    let mut data = plane_data(10, 0);
    data.data_mut()[3] = f64::NAN;
    let err = train_autoencoder(&data, &ae_cfg(vec![4], 2, Activation::Tanh, 2), &mut seeded(0)).unwrap_err();
    assert!(matches!(err, LatentError::Diverged { epoch: 0, .. }), "{err}");
}

#[test]
fn identity_autoencoder_is_exact() {
    let ae = identity_autoencoder(3).unwrap();
    let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.5, 1e-9, 7.0, -0.25]).unwrap();
    assert_eq!(ae.decode(&ae.encode(&x).unwrap()).unwrap(), x);
}

proptest! {
    #[test]
    fn reconstruction_keeps_the_batch_shape(n in 1usize..40, seed in 0u64..100) {
        let ae = Autoencoder::new(&[10, 8, 3], &[3, 8, 10], Activation::Tanh, &mut seeded(seed)).unwrap();
        let x = plane_data(n, seed);
        let y = ae.decode(&ae.encode(&x).unwrap()).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn filtered_points_respect_the_threshold(seed in 0u64..200, thr in 0.0f64..2.0) {
        let p = Quadratic::new(2, 1.0, 1.0, 2.0);
        let ae = identity_autoencoder(2).unwrap();
        let mut rng = seeded(seed);
        let s = Tensor::new(vec![64, 2], (0..128).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        match decode_and_filter(&ae, &p, &s, thr) {
            Ok(f) => {
                for r in f.x.iter_rows() {
                    prop_assert!(p.energy(r) <= thr);
                }
                prop_assert_eq!(f.kept.len(), f.x.rows());
            }
            Err(LatentError::NothingAccepted { .. }) => {}
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}

#[test]
fn infinite_threshold_accepts_everything() {
    let p = Quadratic::new(2, 1.0, 1.0, 2.0);
    let ae = identity_autoencoder(2).unwrap();
    let s = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 1.0, -1.9, 1.9]).unwrap();
    let f = decode_and_filter(&ae, &p, &s, f64::INFINITY).unwrap();
    assert_eq!(f.acceptance, 1.0);
    assert_eq!(f.x, s);
}

#[test]
fn threshold_below_the_minimum_reports_energies() {
    let p = Quadratic::new(2, 1.0, 1.0, 2.0);
    let ae = identity_autoencoder(2).unwrap();
    let s = Tensor::new(vec![3, 2], vec![0.0, 0.0, 1.0, 1.0, -1.9, 1.9]).unwrap();
    match decode_and_filter(&ae, &p, &s, -1.0) {
        Err(LatentError::NothingAccepted { threshold, histogram }) => {
            assert_eq!(threshold, -1.0);
            assert_eq!(histogram.total(), 3);
        }
        other => panic!("{other:?}"),
    }
    let bad = Tensor::row(vec![f64::NAN, 0.0]);
    assert!(matches!(decode_and_filter(&ae, &p, &bad, 1.0), Err(LatentError::NonFinite(0))));
}

#[test]
fn acceptance_matches_the_energy_distribution() {
    // s ~ N(0, I₂) and V = ½|s|², so P(V ≤ t) = 1 - e^{-t}
    let p = Quadratic::new(2, 1.0, 1.0, 100.0);
    let ae = identity_autoencoder(2).unwrap();
    let mut rng = seeded(11);
    let n = 20_000;
    let s = Tensor::new(vec![n, 2], (0..2 * n).map(|_| crate::potentials::gaussian(&mut rng)).collect()).unwrap();
    for t in [0.3, 0.693, 1.5] {
        let f = decode_and_filter(&ae, &p, &s, t).unwrap();
        let exact = 1.0 - (-t).exp();
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((f.acceptance - exact).abs() <= 3.0 * se, "t {t}: {} vs {exact}", f.acceptance);
    }
}

fn small_net(d: usize, seed: u64) -> CommittorNet {
    CommittorNet::new(d, &[8, 8], Activation::Tanh, &mut seeded(seed)).unwrap()
}

#[test]
fn weights_are_constant_when_the_proposal_is_the_target() {
    let p = DoubleWell::new(1.0, 2.0, 1.0);
    let net = small_net(2, 1);
    let ae = identity_autoencoder(2).unwrap();
    let x = uniform_stage(&p, 50, &mut seeded(2)).unwrap().tensor();
    let target = sampling_density_unnorm(&net, &p, None, &x).unwrap();
    let lp: Vec<f64> = target.iter().map(|t| t.ln() + 3.0).collect();
    let (w, s, rejected) = latent_ce_weights(&ae, &net, &p, &x, &lp, 0.1).unwrap();
    assert_eq!(rejected, 0);
    assert_eq!(s, x);
    for v in &w {
        assert!((v - 1.0 / 50.0).abs() < 1e-12, "{v}");
    }
}

#[test]
fn weights_are_nonnegative_and_ignore_proposal_scale() {
    let p = DoubleWell::new(1.0, 2.0, 1.0);
    let net = small_net(2, 3);
    let ae = Autoencoder::new(&[2, 6, 2], &[2, 6, 2], Activation::Tanh, &mut seeded(4)).unwrap();
    let x = uniform_stage(&p, 80, &mut seeded(5)).unwrap().tensor();
    let lp: Vec<f64> = (0..80).map(|i| -1.0 - 0.01 * i as f64).collect();
    let (w1, _, _) = latent_ce_weights(&ae, &net, &p, &x, &lp, 0.1).unwrap();
    let shifted: Vec<f64> = lp.iter().map(|v| v + 7.0).collect();
    let (w2, _, _) = latent_ce_weights(&ae, &net, &p, &x, &shifted, 0.1).unwrap();
    assert!(w1.iter().all(|&v| v >= 0.0));
    assert!((w1.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (a, b) in w1.iter().zip(&w2) {
        assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
    }
}

#[test]
fn non_finite_proposal_values_are_dropped_and_counted() {
    let p = DoubleWell::new(1.0, 2.0, 1.0);
    let net = small_net(2, 3);
    let ae = identity_autoencoder(2).unwrap();
    let x = uniform_stage(&p, 40, &mut seeded(5)).unwrap().tensor();
    let mut lp = vec![0.0; 40];
    lp[7] = f64::NEG_INFINITY;
    let (w, _, rejected) = latent_ce_weights(&ae, &net, &p, &x, &lp, 0.1).unwrap();
    assert_eq!(rejected, 1);
    assert_eq!(w[7], 0.0);
    lp[8] = f64::NEG_INFINITY;
    lp[9] = f64::NEG_INFINITY;
    lp[10] = f64::NEG_INFINITY;
    lp[11] = f64::NEG_INFINITY;
    assert!(latent_ce_weights(&ae, &net, &p, &x, &lp, 0.1).is_err());
}

fn flow_config() -> FlowConfig {
    FlowConfig {
        blocks: 1,
        layers_per_block: 2,
        hidden: 16,
        scale_max: 5.0,
    }
}

fn ce(epochs: usize) -> CeConfig {
    CeConfig {
        epochs,
        batch: 100,
        lr: 1e-3,
        max_rejected: 0.1,
    }
}

#[test]
fn identity_latent_map_reproduces_the_plain_flow_sampler() {
    let p = DoubleWell::new(1.0, 2.0, 1.0);
    let net = small_net(2, 7);
    let tset = StagedTrainingSet::new(uniform_stage(&p, 300, &mut seeded(8)).unwrap()).unwrap();
    let flow = FlowModel::new(p.domain().clone(), flow_config(), &mut seeded(9)).unwrap();
    let mut plain = FlowSampler {
        flow: flow.clone(),
        opt: Adam::default(),
        training: ce(3),
        new_samples: 200,
        bias: None,
    };
    let mut latent = LatentSampler::new(identity_autoencoder(2).unwrap(), flow, ce(3), 200, f64::INFINITY, 0.5).unwrap();
    let a = plain.refine(&p, &net, &tset, &mut seeded(10)).unwrap();
    let b = latent.refine(&p, &net, &tset, &mut seeded(10)).unwrap();
    assert_eq!(a.stage, b.stage);
    assert_eq!(b.acceptance, 1.0);
    assert_eq!(a.ce_loss, b.ce_loss);
}

#[test]
fn acceptance_reflects_a_threshold_at_the_median_energy() {
    let p = Quadratic::new(2, 1.0, 1.0, 1.0);
    let net = small_net(2, 1);
    let tset = StagedTrainingSet::new(uniform_stage(&p, 100, &mut seeded(2)).unwrap()).unwrap();
    let flow = FlowModel::new(p.domain().clone(), flow_config(), &mut seeded(3)).unwrap();
    let mut e: Vec<f64> = flow
        .sample_outside(40_000, &p, &mut seeded(4))
        .unwrap()
        .iter_rows()
        .map(|r| p.energy(r))
        .collect();
    e.sort_by(f64::total_cmp);
    let median = e[e.len() / 2];
    let mut s = LatentSampler::new(identity_autoencoder(2).unwrap(), flow, ce(0), 4000, median, 0.3).unwrap();
    let rep = s.refine(&p, &net, &tset, &mut seeded(5)).unwrap();
    assert!((rep.acceptance - 0.5).abs() < 0.03, "{}", rep.acceptance);
    for r in rep.stage.tensor().iter_rows() {
        assert!(p.energy(r) <= median);
        assert!(!p.in_ab(r));
        assert!(p.domain().strictly_contains(r));
    }
    assert!(rep.stage.log_density.iter().all(|v| v.is_finite()));
}

#[test]
fn low_acceptance_aborts_with_diagnostics() {
    let p = Quadratic::new(2, 1.0, 1.0, 1.0);
    let net = small_net(2, 1);
    let tset = StagedTrainingSet::new(uniform_stage(&p, 100, &mut seeded(2)).unwrap()).unwrap();
    let flow = FlowModel::new(p.domain().clone(), flow_config(), &mut seeded(3)).unwrap();
    let mut s = LatentSampler::new(identity_autoencoder(2).unwrap(), flow, ce(0), 500, 0.01, 0.5).unwrap();
    let err = s.refine(&p, &net, &tset, &mut seeded(5)).unwrap_err();
    match err {
        DastrError::Sampler(inner) => {
            let msg = inner.to_string();
            assert!(msg.contains("energy filter kept"), "{msg}");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn modified_autoencoder_is_detected() {
    let p = DoubleWell::new(1.0, 2.0, 1.0);
    let net = small_net(2, 7);
    let tset = StagedTrainingSet::new(uniform_stage(&p, 100, &mut seeded(8)).unwrap()).unwrap();
    let flow = FlowModel::new(p.domain().clone(), flow_config(), &mut seeded(9)).unwrap();
    let mut s = LatentSampler::new(identity_autoencoder(2).unwrap(), flow, ce(1), 50, f64::INFINITY, 0.5).unwrap();
    s.ae.params_mut()[0].data_mut()[0] = 2.0;
    let err = s.refine(&p, &net, &tset, &mut seeded(10)).unwrap_err();
    assert!(err.to_string().contains("autoencoder parameters changed"), "{err}");
}

fn mueller_samples(dim: usize, n: usize, seed: u64) -> (RuggedMueller, Tensor) {
    let p = RuggedMueller::new(dim, 0.1, 0.05, MuellerParams::default()).unwrap();
    let mut x0 = vec![0.0; dim];
    x0[0] = -0.558;
    x0[1] = 1.441 - 0.15;
    let integ = Integrator::new(1e-5, 0.05).unwrap();
    let traj = simulate(&p, None, &x0, 20 * n as u64, integ, 20, &mut seeded(seed)).unwrap();
    let x = traj.outside_sets(&p);
    (p, x)
}

#[test]
fn mueller_autoencoder_beats_a_random_projection() {
    let (_, x) = mueller_samples(10, 3000, 1);
    let cfg = AeTraining {
        hidden: vec![30, 30],
        latent_dim: 2,
        activation: Activation::Tanh,
        epochs: 60,
        batch: 100,
        lr: 1e-3,
    };
    let (ae, _) = train_autoencoder(&x, &cfg, &mut seeded(2)).unwrap();
    let y = ae.decode(&ae.encode(&x).unwrap()).unwrap();
    let err_ae: f64 = x
        .iter_rows()
        .zip(y.iter_rows())
        .map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2))
        .sum();

    // orthonormal pair of random directions, reconstruction P Pᵀ x about the mean
    let mut rng = seeded(3);
    let mut u: Vec<f64> = (0..10).map(|_| crate::potentials::gaussian(&mut rng)).collect();
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    u.iter_mut().for_each(|v| *v /= nu);
    let mut w: Vec<f64> = (0..10).map(|_| crate::potentials::gaussian(&mut rng)).collect();
    let dot: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
    w.iter_mut().zip(&u).for_each(|(a, b)| *a -= dot * b);
    let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter_mut().for_each(|v| *v /= nw);
    let mean: Vec<f64> = (0..10).map(|j| x.iter_rows().map(|r| r[j]).sum::<f64>() / x.rows() as f64).collect();
    let err_rand: f64 = x
        .iter_rows()
        .map(|r| {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
            let a: f64 = c.iter().zip(&u).map(|(p, q)| p * q).sum();
            let b: f64 = c.iter().zip(&w).map(|(p, q)| p * q).sum();
            (0..2).map(|j| (c[j] - a * u[j] - b * w[j]).powi(2)).sum::<f64>()
        })
        .sum();
    assert!(err_ae < err_rand, "{err_ae} vs {err_rand}");
}
