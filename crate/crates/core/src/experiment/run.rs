use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ExperimentId, InitialSection, IsoPool, IsosurfaceSection, SamplerSection};
use super::ExperimentError;
use crate::autodiff::Tensor;
use crate::checkpoint::write_atomic;
use crate::dastr::{
    dastr_run, AdaptiveSampler, BoundarySet, DastrError, FlowSampler, RunOptions, Stage, StageMetrics,
    StageTimings, StagedTrainingSet,
};
use crate::eval::{curve_error, isosurface_candidates, isosurface_candidates_in, isosurface_histogram, norm_histogram, validation_curve, with_threads};
use crate::flow::{train_flow_ce, FlowModel};
use crate::latent::{latent_box, train_autoencoder, LatentSampler};
use crate::nets::{CommittorModel, CommittorNet};
use crate::optim::Adam;
use crate::potentials::{energies, log_partition, sample_interior, BrownianAnnulus, Potential, PotentialConfig, Set};
use crate::rng::{derive, seeded, substream};
use crate::sde::{metadynamics_run, simulate, Bias, Integrator, MetadynamicsBias, MetadynamicsParams, Projection};

type Result<T> = std::result::Result<T, ExperimentError>;

pub const METRICS_HEADER: &str = "stage,loss,error,acceptance,ce_loss,samples,skipped";
const TIMING_HEADER: &str = "stage,committor_seconds,sampler_seconds";
/// Importance samples per partition-function estimate.
const LOG_Z_POINTS: usize = 100_000;

/// Caller-provided context that does not affect results.
#[derive(Default)]
pub struct RunSettings<'a> {
    /// Recorded in the manifest, e.g. a git revision.
    pub build_id: String,
    /// Receives one line per finished stage.
    pub progress: Option<&'a (dyn Fn(&str) + Sync)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub build_id: String,
    pub config: ExperimentConfig,
    /// Output file name to a short description.
    pub files: BTreeMap<String, String>,
    pub stage_checkpoints: Vec<String>,
    pub wall_clock_seconds: f64,
    pub finished_unix: u64,
}

/// Collected outputs before they are written.
#[derive(Default)]
struct Outputs {
    metrics: Vec<StageMetrics>,
    timings: Vec<StageTimings>,
    summary: BTreeMap<String, f64>,
    files: Vec<(String, String, Vec<u8>)>,
    stage_checkpoints: Vec<String>,
}

impl Outputs {
    fn file(&mut self, name: &str, what: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), what.to_string(), bytes));
    }
}

/// Runs the experiment described by `cfg` and writes its outputs. A rerun
/// with the same config resumes from the checkpoints in the output directory.
pub fn run_experiment(cfg: &ExperimentConfig, settings: &RunSettings<'_>) -> Result<RunManifest> {
    cfg.validate()?;
    let start = Instant::now();
    let out = cfg.resolved_output_dir();
    let ck = out.join("checkpoints");
    std::fs::create_dir_all(&ck).map_err(|e| ExperimentError::io(&ck, e))?;
    guard_config(cfg, &ck)?;
    let p = cfg.potential.build().map_err(|e| ExperimentError::setup("potential", e))?;
    let outputs = with_threads(cfg.threads, || match cfg.experiment {
        ExperimentId::FlowSelftest => run_flow_selftest(cfg, p.as_ref(), &ck, settings),
        _ => run_dastr(cfg, p.as_ref(), &ck, settings),
    })?;
    write_outputs(cfg, &out, outputs, settings, start)
}

/// Refuses to resume from checkpoints written under a different config.
fn guard_config(cfg: &ExperimentConfig, ck: &Path) -> Result<()> {
    let mut key = cfg.clone();
    key.output_dir = PathBuf::new();
    key.threads = 0;
    let bytes = serde_json::to_vec_pretty(&key).expect("config serializes");
    let path = ck.join("config.json");
    match std::fs::read(&path) {
        Ok(old) if old == bytes => Ok(()),
        Ok(_) => Err(ExperimentError::CheckpointMismatch { path: ck.to_path_buf() }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            write_atomic(&path, &bytes).map_err(|e| ExperimentError::io(&path, e))
        }
        Err(e) => Err(ExperimentError::io(&path, e)),
    }
}

fn run_dastr(cfg: &ExperimentConfig, p: &dyn Potential, ck: &Path, settings: &RunSettings<'_>) -> Result<Outputs> {
    let seed = cfg.seed;
    let d = &cfg.dastr;
    let mut out = Outputs::default();
    let net = CommittorNet::new(p.dim(), &cfg.net.hidden, cfg.net.activation, &mut seeded(derive(seed, "net")))
        .map_err(|e| ExperimentError::setup("net", e))?;
    let (initial, meta_bias) = initial_stage(cfg, p)?;
    let initial_x = initial.tensor();
    let boundary = BoundarySet::sample(p, d.n_a, d.n_b, &mut seeded(derive(seed, "boundary")));

    let mut sampler: Option<Box<dyn AdaptiveSampler>> = match &cfg.sampler {
        SamplerSection::None => None,
        SamplerSection::Flow(f) => {
            let flow = FlowModel::new(p.domain().clone(), f.flow, &mut seeded(derive(seed, "flow")))
                .map_err(|e| ExperimentError::setup("flow", e))?;
            let bias = match (f.biased, meta_bias) {
                (true, Some(b)) => Some(Box::new(b) as Box<dyn Bias>),
                _ => None,
            };
            Some(Box::new(FlowSampler {
                flow,
                opt: Adam::default(),
                training: f.ce(),
                new_samples: f.new_samples,
                bias,
            }))
        }
        SamplerSection::Latent(l) => {
            let x0 = &initial_x;
            let (ae, mse) = train_autoencoder(x0, &l.autoencoder, &mut seeded(derive(seed, "autoencoder")))
                .map_err(|e| ExperimentError::setup("autoencoder", e))?;
            out.summary.insert("ae_mse".into(), mse);
            let s0 = ae.encode(x0).map_err(|e| ExperimentError::setup("autoencoder", e))?;
            let domain = latent_box(&s0, l.margin)?;
            let flow = FlowModel::new(domain, l.flow, &mut seeded(derive(seed, "latent-flow")))
                .map_err(|e| ExperimentError::setup("latent flow", e))?;
            Some(Box::new(LatentSampler::new(
                ae,
                flow,
                l.ce(),
                l.new_samples,
                l.threshold,
                l.min_acceptance,
            )?))
        }
    };

    let annulus = match cfg.potential {
        PotentialConfig::BrownianAnnulus { dim, inner, outer, beta } => Some(
            BrownianAnnulus::new(dim, inner, outer, beta).map_err(|e| ExperimentError::setup("potential", e))?,
        ),
        PotentialConfig::RuggedMueller { .. } => None,
    };
    let curve_points = cfg.eval.curve_points;
    let evaluate = |net: &CommittorNet| -> crate::dastr::Result<f64> {
        let a = annulus.as_ref().expect("evaluator only set for the annulus");
        curve_error(net, a, curve_points).map_err(|e| DastrError::Eval(Box::new(e)))
    };
    let report = |m: &StageMetrics| {
        if let Some(cb) = settings.progress {
            cb(&stage_line(m));
        }
    };
    let options = RunOptions {
        evaluator: annulus.as_ref().map(|_| &evaluate as &dyn Fn(&CommittorNet) -> crate::dastr::Result<f64>),
        checkpoint_dir: Some(ck.to_path_buf()),
        on_stage: Some(&report),
        stop_after: None,
    };
    let mut dcfg = d.to_config();
    if d.normalize_gibbs {
        let lz = log_partition(p, p.beta(), None, &initial_x, LOG_Z_POINTS, &mut seeded(derive(seed, "log-partition")));
        dcfg.committor.log_normalizer = lz;
        out.summary.insert("log_partition".into(), lz);
    }
    let tset = StagedTrainingSet::new(initial)?;
    let outcome = dastr_run(
        &dcfg,
        p,
        net,
        sampler.as_mut().map(|s| s.as_mut() as &mut dyn AdaptiveSampler),
        tset,
        &boundary,
        derive(seed, "dastr"),
        options,
    )?;

    out.stage_checkpoints = (0..d.n_adaptive).map(|k| format!("checkpoints/net-stage{k}.json")).collect();
    let last = outcome.metrics.last();
    out.summary.insert("final_loss".into(), last.map_or(f64::NAN, |m| m.loss));
    let acc: Vec<f64> = outcome.metrics.iter().filter_map(|m| m.acceptance).collect();
    if let Some(a) = acc.last() {
        out.summary.insert("final_acceptance".into(), *a);
        out.summary.insert("min_acceptance".into(), acc.iter().copied().fold(f64::INFINITY, f64::min));
    }
    out.summary.insert("training_set_size".into(), outcome.tset.len() as f64);
    out.file("samples.csv", "final training set with stage index and log proposal density", samples_csv(&outcome.tset));

    if let Some(a) = &annulus {
        evaluate_annulus(cfg, a, &outcome.net, &outcome.tset, &mut out)?;
    } else {
        evaluate_mueller(cfg, p, &outcome.net, &outcome.tset, &mut out)?;
    }
    out.metrics = outcome.metrics;
    out.timings = outcome.timings;
    Ok(out)
}

fn stage_line(m: &StageMetrics) -> String {
    let mut s = format!("stage {}: loss {:.6e}", m.stage, m.loss);
    if let Some(e) = m.error {
        let _ = write!(s, ", error {e:.4}");
    }
    if let Some(a) = m.acceptance {
        let _ = write!(s, ", acceptance {a:.3}");
    }
    if let Some(c) = m.ce_loss {
        let _ = write!(s, ", ce {c:.4}");
    }
    let _ = write!(s, ", {} samples", m.samples);
    s
}

/// The first training stage, and the metadynamics bias when one was built.
fn initial_stage(cfg: &ExperimentConfig, p: &dyn Potential) -> Result<(Stage, Option<MetadynamicsBias>)> {
    let seed = derive(cfg.seed, "initial");
    let n0 = cfg.dastr.n_0;
    let setup = |e: crate::sde::SdeError| ExperimentError::setup("initial set", e);
    match &cfg.initial {
        InitialSection::Uniform => Ok((crate::dastr::uniform_stage(p, n0, &mut seeded(seed))?, None)),
        InitialSection::Sde {
            beta,
            dt,
            stride,
            burn_in,
            walkers,
        } => {
            let integ = Integrator::new(*dt, *beta).map_err(setup)?;
            let walkers = (*walkers).max(1);
            let mut rows: Vec<f64> = Vec::with_capacity(n0 * p.dim());
            for w in 0..walkers {
                let mut rng = substream(seed, w as u64);
                let need = n0 / walkers + usize::from(w < n0 % walkers);
                let mut x = start_near_a(p, &mut rng);
                if *burn_in > 0 {
                    let t = simulate(p, None, &x, *burn_in, integ, *burn_in, &mut rng).map_err(setup)?;
                    x = t.states.row_slice(t.states.rows() - 1).to_vec();
                }
                let mut got = 0;
                let mut chunks = 0;
                while got < need {
                    chunks += 1;
                    if chunks > 1000 {
                        return Err(ExperimentError::Setup {
                            what: "initial set".into(),
                            source: format!("walker {w} found {got} of {need} states outside A and B").into(),
                        });
                    }
                    if p.in_ab(&x) {
                        // the walker stopped inside a set; restart it at the edge of A
                        x = start_near_a(p, &mut rng);
                    }
                    let steps = *stride * (need - got) as u64;
                    let t = simulate(p, None, &x, steps, integ, *stride, &mut rng).map_err(setup)?;
                    for r in t.states.iter_rows().skip(1) {
                        if got < need && !p.in_ab(r) {
                            rows.extend_from_slice(r);
                            got += 1;
                        }
                    }
                    x = t.states.row_slice(t.states.rows() - 1).to_vec();
                }
            }
            let x = Tensor::new(vec![n0, p.dim()], rows).expect("initial shape");
            let lz = log_partition(p, *beta, None, &x, LOG_Z_POINTS, &mut seeded(derive(seed, "log-partition")));
            let ld = energies(p, &x).iter().map(|v| -beta * v - lz).collect();
            Ok((Stage::new(x, ld)?, None))
        }
        InitialSection::Metadynamics {
            dt,
            steps,
            stride,
            height,
            width,
            interval,
            max_deposits,
            cv,
        } => {
            let mut rng = seeded(seed);
            let integ = Integrator::new(*dt, p.beta()).map_err(setup)?;
            let x0 = start_near_a(p, &mut rng);
            let params = MetadynamicsParams {
                height: *height,
                width: *width,
                interval: *interval,
                max_deposits: *max_deposits,
            };
            let run = metadynamics_run(p, Projection::new(cv.clone()), params, &x0, *steps, integ, *stride, &mut rng)
                .map_err(setup)?;
            let have = run.samples.rows();
            if have < n0 {
                return Err(ExperimentError::Setup {
                    what: "initial set".into(),
                    source: format!("metadynamics recorded {have} states outside A and B, N_0 is {n0}").into(),
                });
            }
            let keep: Vec<usize> = (0..n0).map(|i| i * have / n0).collect();
            let x = run.samples.gather_rows(&keep);
            let beta = p.beta();
            let lz = log_partition(p, beta, Some(&run.bias), &x, LOG_Z_POINTS, &mut seeded(derive(seed, "log-partition")));
            let ld = keep
                .iter()
                .map(|&i| -beta * (run.energies[i] + run.final_bias[i]) - lz)
                .collect();
            Ok((Stage::new(x, ld)?, Some(run.bias)))
        }
    }
}

/// A point just outside `A`, found by bisection between a point of `A` and
/// a uniform interior point.
fn start_near_a(p: &dyn Potential, rng: &mut dyn rand::RngCore) -> Vec<f64> {
    let mut lo = p.sample_set(Set::A, 1, rng).row_slice(0).to_vec();
    let mut hi = sample_interior(p, 1, rng).row_slice(0).to_vec();
    let mut mid = vec![0.0; lo.len()];
    for _ in 0..60 {
        for k in 0..mid.len() {
            mid[k] = 0.5 * (lo[k] + hi[k]);
        }
        if p.in_set(Set::A, &mid) {
            lo.copy_from_slice(&mid);
        } else {
            hi.copy_from_slice(&mid);
        }
    }
    hi
}

fn evaluate_annulus(
    cfg: &ExperimentConfig,
    a: &BrownianAnnulus,
    net: &CommittorNet,
    tset: &StagedTrainingSet,
    out: &mut Outputs,
) -> Result<()> {
    let eval = |e| ExperimentError::setup("evaluation", e);
    let err = curve_error(net, a, cfg.eval.curve_points).map_err(eval)?;
    out.summary.insert("final_error".into(), err);

    let x = validation_curve(a.dim(), a.inner(), a.outer(), cfg.eval.curve_points);
    let q = net.values(&x).map_err(|e| ExperimentError::setup("evaluation", e))?;
    let q_ref = a.reference_committor_batch(&x).map_err(|e| ExperimentError::setup("evaluation", e))?;
    let mut csv = String::from("r,q,q_ref\n");
    for (i, row) in x.iter_rows().enumerate() {
        let r = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let _ = writeln!(csv, "{r},{},{}", q[i], q_ref[i]);
    }
    out.file("curve.csv", "learned and closed-form committor along the validation curve", csv.into_bytes());

    let samples = tset.samples();
    let hist = norm_histogram(&samples, cfg.eval.norm_bins, a.inner(), a.outer()).map_err(eval)?;
    let [lo, hi] = cfg.eval.norm_band;
    let frac = hist.fraction_between(lo, hi);
    let dim = a.dim() as i32;
    let uniform = (hi.powi(dim) - lo.powi(dim)) / (a.outer().powi(dim) - a.inner().powi(dim));
    out.summary.insert("band_fraction".into(), frac);
    out.summary.insert("band_fraction_uniform".into(), uniform);
    out.summary.insert("band_ratio".into(), frac / uniform);
    let norms = serde_json::json!({
        "band": [lo, hi],
        "band_fraction": frac,
        "band_fraction_uniform": uniform,
        "histogram": hist,
    });
    out.file("norms.json", "histogram of training-sample norms", pretty(&norms));
    Ok(())
}

fn evaluate_mueller(
    cfg: &ExperimentConfig,
    p: &dyn Potential,
    net: &CommittorNet,
    tset: &StagedTrainingSet,
    out: &mut Outputs,
) -> Result<()> {
    let eval = |e| ExperimentError::setup("evaluation", e);
    if cfg.eval.grid > 0 {
        out.file("grid.csv", "learned committor on an (x1, x2) grid, other coordinates 0", grid_csv(net, p, cfg.eval.grid)?);
    }
    if let Some(iso) = &cfg.eval.isosurface {
        let IsosurfaceSection {
            candidates,
            tol,
            points,
            bins,
            pool,
            mc,
        } = iso;
        let pool = match pool {
            IsoPool::Uniform => {
                isosurface_candidates(net, p, *candidates, *tol, &mut seeded(derive(cfg.seed, "eval/candidates")))
            }
            IsoPool::TrainingSet => isosurface_candidates_in(net, p, &tset.samples(), *candidates, *tol),
        }
        .map_err(eval)?;
        let mut mc = mc.clone();
        if mc.threads == 0 {
            mc.threads = cfg.threads;
        }
        let rep = isosurface_histogram(net, p, &pool, *tol, *points, &mc, *bins, derive(cfg.seed, "eval/mc"))
            .map_err(eval)?;
        out.summary.insert("iso_mean".into(), rep.mean);
        out.summary.insert("iso_sd".into(), rep.sd);
        out.summary.insert("iso_points".into(), rep.points as f64);
        out.summary.insert("iso_gamma_size".into(), rep.gamma_size as f64);
        out.summary.insert("iso_flagged".into(), rep.flagged as f64);
        out.file("isosurface.json", "trajectory estimates on the learned q = 0.5 set", pretty(&rep));
    }
    Ok(())
}

fn grid_csv(net: &CommittorNet, p: &dyn Potential, n: usize) -> Result<Vec<u8>> {
    let dom = p.domain();
    let center = dom.center();
    let d = p.dim();
    let mut rows = Vec::with_capacity(n * n * d);
    for i in 0..n {
        for j in 0..n {
            let mut x = center.clone();
            for (k, idx) in [(0, i), (1, j)] {
                let t = (idx as f64 + 0.5) / n as f64;
                x[k] = dom.lo[k] + t * (dom.hi[k] - dom.lo[k]);
            }
            for v in x.iter_mut().skip(2) {
                *v = 0.0;
            }
            rows.extend_from_slice(&x);
        }
    }
    let x = Tensor::new(vec![n * n, d], rows).expect("grid shape");
    let q = net.values(&x).map_err(|e| ExperimentError::setup("evaluation", e))?;
    let mut csv = String::from("x1,x2,q,energy,in_a,in_b\n");
    for (i, r) in x.iter_rows().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r[0],
            r[1],
            q[i],
            p.energy(r),
            u8::from(p.in_set(Set::A, r)),
            u8::from(p.in_set(Set::B, r))
        );
    }
    Ok(csv.into_bytes())
}

fn samples_csv(tset: &StagedTrainingSet) -> Vec<u8> {
    let d = tset.dim();
    let mut csv = String::from("stage,log_density");
    for k in 0..d {
        let _ = write!(csv, ",x{k}");
    }
    csv.push('\n');
    for (j, s) in tset.stages().iter().enumerate() {
        for i in 0..s.len() {
            let _ = write!(csv, "{j},{}", s.log_density[i]);
            for v in s.row(i) {
                let _ = write!(csv, ",{v}");
            }
            csv.push('\n');
        }
    }
    csv.into_bytes()
}

/// Fits the flow to `e^{-βV}` from uniform samples and reports how well it
/// is normalized and inverted.
fn run_flow_selftest(cfg: &ExperimentConfig, p: &dyn Potential, ck: &Path, settings: &RunSettings<'_>) -> Result<Outputs> {
    let SamplerSection::Flow(f) = &cfg.sampler else {
        unreachable!("validated config");
    };
    let seed = cfg.seed;
    let n0 = cfg.dastr.n_0;
    let flow_err = |e| ExperimentError::setup("flow", e);
    let mut flow = FlowModel::new(p.domain().clone(), f.flow, &mut seeded(derive(seed, "flow"))).map_err(flow_err)?;
    let x = sample_interior(p, n0, &mut seeded(derive(seed, "initial")));
    let lp = vec![p.interior_log_density(); n0];
    let beta = p.beta();
    let target: Vec<f64> = energies(p, &x).iter().map(|v| (-beta * v).exp()).collect();
    let mut opt = Adam::default();
    let mut out = Outputs::default();
    for k in 0..cfg.dastr.n_adaptive {
        let t = Instant::now();
        let rep = train_flow_ce(&mut flow, &x, &target, &lp, &f.ce(), &mut opt, &mut seeded(derive(seed, &format!("stage{k}/flow"))))
            .map_err(|e| ExperimentError::Stage {
                stage: k,
                source: DastrError::Flow(e),
            })?;
        let (_, rate) = flow
            .sample_outside_with_rate(1000, p, &mut seeded(derive(seed, &format!("stage{k}/sample"))))
            .map_err(|e| ExperimentError::Stage {
                stage: k,
                source: DastrError::Flow(e),
            })?;
        let ce = rep.losses.last().copied().unwrap_or(f64::NAN);
        let m = StageMetrics {
            stage: k,
            loss: ce,
            error: None,
            acceptance: Some(rate),
            ce_loss: Some(ce),
            samples: n0,
            skipped: rep.rejected,
        };
        if let Some(cb) = settings.progress {
            cb(&stage_line(&m));
        }
        out.metrics.push(m);
        out.timings.push(StageTimings {
            stage: k,
            committor_seconds: 0.0,
            sampler_seconds: t.elapsed().as_secs_f64(),
        });
    }
    let flow_path = ck.join("flow.json");
    flow.to_checkpoint().save(&flow_path).map_err(|e| ExperimentError::setup("checkpoint", e))?;
    out.stage_checkpoints.push("checkpoints/flow.json".into());

    // Mass of the flow density over its box, by uniform Monte Carlo.
    let dom = p.domain();
    let mut rng = seeded(derive(seed, "eval/mass"));
    let n_mass = 200_000;
    let mut u = Vec::with_capacity(n_mass * p.dim());
    let mut row = vec![0.0; p.dim()];
    for _ in 0..n_mass {
        dom.sample_uniform(&mut rng, &mut row);
        u.extend_from_slice(&row);
    }
    let u = Tensor::new(vec![n_mass, p.dim()], u).expect("mass shape");
    let ld = flow.log_density(&u).map_err(flow_err)?;
    let vol = dom.log_volume().exp();
    let w: Vec<f64> = ld.iter().map(|v| v.exp() * vol).collect();
    let (mass, sd) = crate::eval::mean_sd(&w);
    out.summary.insert("mass".into(), mass);
    out.summary.insert("mass_se".into(), sd / (n_mass as f64).sqrt());

    let z = flow.sample(1000, &mut seeded(derive(seed, "eval/roundtrip"))).map_err(flow_err)?;
    let (w, _) = flow.forward(&z).map_err(flow_err)?;
    let back = flow.inverse(&w).map_err(flow_err)?;
    let rt = z
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    out.summary.insert("roundtrip_error".into(), rt);
    out.summary.insert("final_ce".into(), out.metrics.last().map_or(f64::NAN, |m| m.loss));
    Ok(out)
}

fn pretty<T: Serialize + ?Sized>(v: &T) -> Vec<u8> {
    let mut b = serde_json::to_vec_pretty(v).expect("serializes");
    b.push(b'\n');
    b
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn metrics_csv(rows: &[StageMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            m.stage,
            m.loss,
            opt_field(m.error),
            opt_field(m.acceptance),
            opt_field(m.ce_loss),
            m.samples,
            m.skipped
        );
    }
    s
}

fn write_outputs(
    cfg: &ExperimentConfig,
    out: &Path,
    outputs: Outputs,
    settings: &RunSettings<'_>,
    start: Instant,
) -> Result<RunManifest> {
    let write = |name: &str, bytes: &[u8]| {
        let path = out.join(name);
        write_atomic(&path, bytes).map_err(|e| ExperimentError::io(&path, e))
    };
    let mut files = BTreeMap::new();
    write("metrics.csv", metrics_csv(&outputs.metrics).as_bytes())?;
    files.insert("metrics.csv".into(), "per-stage loss, error, acceptance and CE loss".into());
    let mut timing = format!("{TIMING_HEADER}\n");
    for t in &outputs.timings {
        let _ = writeln!(timing, "{},{:.3},{:.3}", t.stage, t.committor_seconds, t.sampler_seconds);
    }
    write("timing.csv", timing.as_bytes())?;
    files.insert("timing.csv".into(), "wall-clock seconds per stage".into());

    let summary: BTreeMap<&str, Option<f64>> = outputs
        .summary
        .iter()
        .map(|(k, v)| (k.as_str(), v.is_finite().then_some(*v)))
        .collect();
    let doc = serde_json::json!({
        "experiment": cfg.experiment.as_str(),
        "seed": cfg.seed,
        "stages": outputs.metrics.len(),
        "metrics": summary,
    });
    write("summary.json", &pretty(&doc))?;
    files.insert("summary.json".into(), "final scalar metrics".into());
    for (name, what, bytes) in &outputs.files {
        write(name, bytes)?;
        files.insert(name.clone(), what.clone());
    }
    files.insert("checkpoints/".into(), "per-stage state for resuming".into());
    files.insert("manifest.json".into(), "this file".into());

    let manifest = RunManifest {
        experiment: cfg.experiment,
        seed: cfg.seed,
        build_id: settings.build_id.clone(),
        config: cfg.clone(),
        files,
        stage_checkpoints: outputs.stage_checkpoints,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        finished_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
    };
    write("manifest.json", &pretty(&manifest))?;
    Ok(manifest)
}
