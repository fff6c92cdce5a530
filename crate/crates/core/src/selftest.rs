//! Invariant checks that run without a config: gradient checks, flow
//! invertibility and normalization, scale invariance of flow training, the
//! 1-D hitting probability, umbrella restraint width and metadynamics bias
//! growth.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::Parameterized;
use crate::eval::{mc_committor, McConfig};
use crate::flow::{train_flow_ce, CeConfig, FlowConfig, FlowModel};
use crate::nets::{value_and_input_grad, Activation, CommittorModel, CommittorNet};
use crate::optim::Adam;
use crate::potentials::{gaussian, BoxDomain, DoubleWell, Interval, MuellerParams, RuggedMueller};
use crate::rng::seeded;
use crate::sde::{metadynamics_run, umbrella_relax, Integrator, MetadynamicsBias, MetadynamicsParams, Projection, UmbrellaParams};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn() -> Result<String, String>;

pub const CHECKS: &[(&str, CheckFn)] = &[
    ("autodiff-finite-differences", autodiff_fd),
    ("autodiff-nested-gradient", autodiff_nested),
    ("flow-invertibility", flow_invertibility),
    ("flow-log-det", flow_log_det),
    ("flow-normalization", flow_normalization),
    ("flow-target-scale", flow_target_scale),
    ("mc-committor-interval", mc_interval),
    ("umbrella-width", umbrella_width),
    ("metadynamics-bias", metadynamics_bias),
];

/// Runs the named checks, or all of them when `only` is empty.
pub fn run_checks(only: &[String]) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .filter(|(name, _)| only.is_empty() || only.iter().any(|o| o == name))
        .map(|(name, f)| {
            let t = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(d) => (false, d),
            };
            CheckResult {
                name,
                passed,
                detail,
                seconds: t.elapsed().as_secs_f64(),
            }
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

fn tiny_net(seed: u64) -> CommittorNet {
    CommittorNet::new(3, &[8, 8], Activation::Tanh, &mut seeded(seed)).expect("valid widths")
}

fn random_points(n: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Tape gradient of `loss(net)` w.r.t. all parameters against central
/// differences over every parameter entry.
fn param_fd_check(net: &CommittorNet, loss: &dyn Fn(&CommittorNet, &mut Tape, &[crate::autodiff::Var]) -> crate::autodiff::Var) -> Result<f64, String> {
    let mut tape = Tape::new();
    let params = net.bind(&mut tape);
    let l = loss(net, &mut tape, &params);
    let grads = tape.grad_values(l, &params).map_err(|e| e.to_string())?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();

    let eval = |n: &CommittorNet| {
        let mut t = Tape::new();
        let p = n.bind(&mut t);
        let l = loss(n, &mut t, &p);
        t.value(l).data()[0]
    };
    let h = 1e-5;
    let mut numeric = Vec::with_capacity(analytic.len());
    let sizes: Vec<usize> = net.params().iter().map(|p| p.numel()).collect();
    for (k, &size) in sizes.iter().enumerate() {
        for i in 0..size {
            let mut plus = net.clone();
            plus.params_mut()[k].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[k].data_mut()[i] -= h;
            numeric.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
    }
    Ok(rel_err(&analytic, &numeric))
}

fn autodiff_fd() -> Result<String, String> {
    let net = tiny_net(1);
    let x = random_points(6, 3, 2);
    let err = param_fd_check(&net, &|n, t, p| {
        let xv = t.constant(x.clone());
        let q = n.apply(t, p, xv).expect("shapes match");
        let sq = t.square(q);
        t.sum(sq)
    })?;
    verdict(err < 1e-6, format!("relative error {err:.2e} (limit 1e-6)"))
}

fn autodiff_nested() -> Result<String, String> {
    // d/dθ of Σ|∇ₓq|², which differentiates through an input gradient
    let net = tiny_net(3);
    let x = random_points(6, 3, 4);
    let err = param_fd_check(&net, &|n, t, p| {
        let (_, g) = value_and_input_grad(n, t, p, &x).expect("shapes match");
        let g2 = t.square(g);
        t.sum(g2)
    })?;
    verdict(err < 1e-6, format!("relative error {err:.2e} (limit 1e-6)"))
}

fn perturbed_flow(domain: BoxDomain, spread: f64, seed: u64) -> FlowModel {
    let mut rng = seeded(seed);
    let cfg = FlowConfig {
        blocks: 2,
        layers_per_block: 2,
        hidden: 16,
        scale_max: 5.0,
    };
    let mut flow = FlowModel::new(domain, cfg, &mut rng).expect("valid flow");
    for p in flow.params_mut() {
        for v in p.data_mut() {
            *v += spread * gaussian(&mut rng);
        }
    }
    flow
}

fn uniform_points(domain: &BoxDomain, n: usize, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let d = domain.dim();
    let mut data = vec![0.0; n * d];
    for row in data.chunks_mut(d) {
        domain.sample_uniform(&mut rng, row);
    }
    Tensor::new(vec![n, d], data).expect("shape")
}

fn box3() -> BoxDomain {
    BoxDomain::new(vec![-1.5, -0.5, -1.0], vec![1.0, 2.0, 1.0]).expect("valid box")
}

fn flow_invertibility() -> Result<String, String> {
    let flow = perturbed_flow(box3(), 0.3, 1);
    let x = uniform_points(flow.domain(), 1000, 2);
    let (z, _) = flow.forward(&x).map_err(|e| e.to_string())?;
    let back = flow.inverse(&z).map_err(|e| e.to_string())?;
    let err = back.max_abs_diff(&x);
    verdict(err < 1e-8, format!("max round-trip error {err:.2e} (limit 1e-8)"))
}

fn det3(j: &[[f64; 3]; 3]) -> f64 {
    j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
}

fn flow_log_det() -> Result<String, String> {
    let flow = perturbed_flow(box3(), 0.3, 3);
    let x = uniform_points(flow.domain(), 20, 4);
    let (_, ld) = flow.forward(&x).map_err(|e| e.to_string())?;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (r, row) in x.iter_rows().enumerate() {
        let mut jac = [[0.0; 3]; 3];
        for j in 0..3 {
            let mut plus = row.to_vec();
            let mut minus = row.to_vec();
            plus[j] += h;
            minus[j] -= h;
            let zp = flow.forward(&Tensor::from_rows(&[plus])).map_err(|e| e.to_string())?.0;
            let zm = flow.forward(&Tensor::from_rows(&[minus])).map_err(|e| e.to_string())?.0;
            for (i, jr) in jac.iter_mut().enumerate() {
                jr[j] = (zp.data()[i] - zm.data()[i]) / (2.0 * h);
            }
        }
        worst = worst.max((det3(&jac).abs().ln() - ld[r]).abs());
    }
    verdict(worst < 1e-5, format!("max |log det| error {worst:.2e} (limit 1e-5)"))
}

fn flow_normalization() -> Result<String, String> {
    let domain = BoxDomain::new(vec![-1.0, 0.0], vec![2.0, 1.0]).expect("valid box");
    let flow = perturbed_flow(domain, 0.1, 9);
    let n = 400_000;
    let x = uniform_points(flow.domain(), n, 10);
    let lp = flow.log_density(&x).map_err(|e| e.to_string())?;
    let mass = flow.domain().log_volume().exp() * lp.iter().map(|v| v.exp()).sum::<f64>() / n as f64;
    verdict((mass - 1.0).abs() < 0.01, format!("mass {mass:.4} (1 ± 0.01)"))
}

fn fit_scaled(scale: f64) -> Result<FlowModel, String> {
    let domain = BoxDomain::new(vec![-2.0, -1.0], vec![2.0, 3.0]).expect("valid box");
    let x = uniform_points(&domain, 2000, 20);
    let target: Vec<f64> = x
        .iter_rows()
        .map(|r| scale * (-0.5 * (r[0].powi(2) / 0.5 + (r[1] - r[0] * r[0]).powi(2) / 0.1)).exp())
        .collect();
    let lp = vec![-domain.log_volume(); x.rows()];
    let mut flow = FlowModel::new(
        domain,
        FlowConfig {
            blocks: 2,
            layers_per_block: 2,
            hidden: 16,
            scale_max: 5.0,
        },
        &mut seeded(23),
    )
    .map_err(|e| e.to_string())?;
    let cfg = CeConfig {
        epochs: 3,
        batch: 500,
        lr: 1e-3,
        max_rejected: 0.1,
    };
    train_flow_ce(&mut flow, &x, &target, &lp, &cfg, &mut Adam::default(), &mut seeded(24)).map_err(|e| e.to_string())?;
    Ok(flow)
}

fn flow_target_scale() -> Result<String, String> {
    let base = fit_scaled(1.0)?;
    let pow2 = fit_scaled(1024.0)?;
    let decimal = fit_scaled(1000.0)?;
    let max_diff = decimal
        .params()
        .iter()
        .zip(base.params())
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    verdict(
        pow2 == base && max_diff < 1e-10,
        format!("×1024 bit-identical: {}; ×1000 max parameter difference {max_diff:.1e}", pow2 == base),
    )
}

fn mc_interval() -> Result<String, String> {
    let p = Interval::new(1.0);
    let cfg = McConfig {
        n_traj: 4000,
        dt: 1e-4,
        max_steps: 10_000_000,
        threads: 0,
    };
    let est = mc_committor(&p, &Tensor::from_rows(&[[0.5]]), &cfg, 7).map_err(|e| e.to_string())?;
    let se = (0.25 / cfg.n_traj as f64).sqrt();
    let v = est[0].value;
    verdict((v - 0.5).abs() < 3.0 * se, format!("q(0.5) = {v:.4}, 3 SE = {:.4}", 3.0 * se))
}

fn umbrella_width() -> Result<String, String> {
    let p = RuggedMueller::new(2, 0.1, 0.05, MuellerParams::default()).map_err(|e| e.to_string())?;
    let integ = Integrator::new(1e-5, 0.1).map_err(|e| e.to_string())?;
    let k = 10_000.0;
    let target = [-0.2, 0.9];
    let params = UmbrellaParams {
        k,
        windows: 5,
        relax_steps: 2000,
        stride: 20,
        max_steps: 1_000_000,
        tolerance: None,
    };
    let run = umbrella_relax(&p, Projection::leading(2), params, &target, &[-0.558, 1.441], integ, 100, &mut seeded(11))
        .map_err(|e| e.to_string())?;
    let width = (1.0 / (integ.beta * k)).sqrt();
    let mean = run
        .samples
        .iter_rows()
        .map(|r| (r[0] - target[0]).hypot(r[1] - target[1]))
        .sum::<f64>()
        / run.samples.rows() as f64;
    verdict(mean < 3.0 * width, format!("mean distance {mean:.4}, Gaussian width {width:.4}"))
}

fn metadynamics_bias() -> Result<String, String> {
    let p = DoubleWell::new(1.0, 4.0, 2.0);
    let integ = Integrator::new(1e-3, 2.0).map_err(|e| e.to_string())?;
    let params = MetadynamicsParams {
        height: 0.2,
        width: 0.1,
        interval: 100,
        max_deposits: 300,
    };
    let run = metadynamics_run(&p, Projection::leading(1), params, &[-1.0, 0.0], 30_000, integ, 10, &mut seeded(8))
        .map_err(|e| e.to_string())?;
    let probes: Vec<f64> = (0..50).map(|i| -2.0 + 0.08 * i as f64).collect();
    let mut partial = MetadynamicsBias::new(Projection::leading(1), params.height, params.width);
    let mut prev = vec![0.0; probes.len()];
    for c in run.bias.deposits() {
        partial.deposit(c);
        for (k, s) in probes.iter().enumerate() {
            let v = partial.value_at_cv(&[*s]);
            if v < 0.0 || v < prev[k] {
                return Err(format!("bias decreased at s = {s} after {} deposits", partial.deposits().len()));
            }
            prev[k] = v;
        }
    }
    verdict(
        !run.bias.deposits().is_empty() && prev.iter().any(|&v| v > 0.0),
        format!("{} deposits, bias non-negative and non-decreasing", run.bias.deposits().len()),
    )
}

fn verdict(ok: bool, detail: String) -> Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}
