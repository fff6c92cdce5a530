use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ConfigError;
use crate::dastr::{CommittorTraining, DastrConfig, IsMode, RefinePolicy};
use crate::eval::McConfig;
use crate::flow::{CeConfig, FlowConfig};
use crate::latent::AeTraining;
use crate::nets::Activation;
use crate::optim::StepDecay;
use crate::potentials::PotentialConfig;

/// Environment variable that relative output directories are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "DASTR_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    Brownian20,
    RuggedMueller10,
    RuggedMuellerLatent,
    FlowSelftest,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Brownian20 => "brownian20",
            ExperimentId::RuggedMueller10 => "rugged-mueller10",
            ExperimentId::RuggedMuellerLatent => "rugged-mueller-latent",
            ExperimentId::FlowSelftest => "flow-selftest",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads for parallel sections; 0 uses the rayon default.
    #[serde(default)]
    pub threads: usize,
    pub potential: PotentialConfig,
    pub net: NetSection,
    pub dastr: DastrSection,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DastrSection {
    #[serde(rename = "N_adaptive")]
    pub n_adaptive: usize,
    #[serde(rename = "N_e")]
    pub n_e: usize,
    pub m: usize,
    #[serde(rename = "N_0")]
    pub n_0: usize,
    #[serde(rename = "N_A")]
    pub n_a: usize,
    #[serde(rename = "N_B")]
    pub n_b: usize,
    /// Boundary points per step from each of `∂A`, `∂B`.
    pub m_boundary: usize,
    pub lambda: f64,
    pub lr: f64,
    #[serde(default = "one")]
    pub lr_decay: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_decay_every: Option<usize>,
    #[serde(default)]
    pub is_mode: IsMode,
    #[serde(default = "default_max_skipped")]
    pub max_skipped: f64,
    pub policy: RefinePolicy,
    /// Weight the loss by the normalized Gibbs density, with `log Z`
    /// estimated by importance sampling around the initial training set.
    #[serde(default)]
    pub normalize_gibbs: bool,
}

fn one() -> f64 {
    1.0
}

fn default_max_skipped() -> f64 {
    0.05
}

impl DastrSection {
    pub fn to_config(&self) -> DastrConfig {
        DastrConfig {
            stages: self.n_adaptive,
            committor: CommittorTraining {
                epochs: self.n_e,
                batch: self.m,
                lr: match self.lr_decay_every {
                    Some(every) => StepDecay {
                        lr: self.lr,
                        decay: self.lr_decay,
                        every,
                    },
                    None => StepDecay::constant(self.lr),
                },
                lambda: self.lambda,
                boundary_batch: self.m_boundary,
                mode: self.is_mode,
                max_skipped: self.max_skipped,
                log_normalizer: 0.0,
            },
            policy: self.policy,
        }
    }
}

/// Where the first stage of the training set comes from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSection {
    /// Uniform on `Ω \ (A ∪ B)`.
    #[default]
    Uniform,
    /// States of overdamped Langevin dynamics at inverse temperature `beta`,
    /// started just outside `A`.
    Sde {
        beta: f64,
        dt: f64,
        stride: u64,
        #[serde(default)]
        burn_in: u64,
        #[serde(default = "one_walker")]
        walkers: usize,
    },
    /// States of a metadynamics run with hills on the coordinates `cv`.
    Metadynamics {
        dt: f64,
        steps: u64,
        stride: u64,
        height: f64,
        width: f64,
        interval: u64,
        max_deposits: usize,
        #[serde(default = "leading_two")]
        cv: Vec<usize>,
    },
}

fn one_walker() -> usize {
    1
}

fn leading_two() -> Vec<usize> {
    vec![0, 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSamplerSection {
    #[serde(rename = "N_e_prime")]
    pub n_e_prime: usize,
    pub m_prime: usize,
    pub lr: f64,
    pub new_samples: usize,
    #[serde(default = "default_max_rejected")]
    pub max_rejected: f64,
    /// Fit the flow to the density biased by the initial metadynamics hills.
    #[serde(default)]
    pub biased: bool,
    pub flow: FlowConfig,
}

fn default_max_rejected() -> f64 {
    0.1
}

impl FlowSamplerSection {
    pub fn ce(&self) -> CeConfig {
        CeConfig {
            epochs: self.n_e_prime,
            batch: self.m_prime,
            lr: self.lr,
            max_rejected: self.max_rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSamplerSection {
    #[serde(rename = "N_e_prime")]
    pub n_e_prime: usize,
    pub m_prime: usize,
    pub lr: f64,
    pub new_samples: usize,
    #[serde(default = "default_max_rejected")]
    pub max_rejected: f64,
    /// Decoded samples with a higher energy are dropped.
    pub threshold: f64,
    #[serde(default = "half")]
    pub min_acceptance: f64,
    /// Relative margin of the latent box around the encoded initial data.
    #[serde(default = "default_margin")]
    pub margin: f64,
    pub flow: FlowConfig,
    pub autoencoder: AeTraining,
}

fn half() -> f64 {
    0.5
}

fn default_margin() -> f64 {
    0.1
}

impl LatentSamplerSection {
    pub fn ce(&self) -> CeConfig {
        CeConfig {
            epochs: self.n_e_prime,
            batch: self.m_prime,
            lr: self.lr,
            max_rejected: self.max_rejected,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplerSection {
    /// The training set stays as initialized.
    #[default]
    None,
    Flow(FlowSamplerSection),
    Latent(LatentSamplerSection),
}

impl SamplerSection {
    pub fn kind(&self) -> &'static str {
        match self {
            SamplerSection::None => "none",
            SamplerSection::Flow(_) => "flow",
            SamplerSection::Latent(_) => "latent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Points on the diagonal validation curve.
    #[serde(default = "default_curve_points")]
    pub curve_points: usize,
    #[serde(default = "default_norm_bins")]
    pub norm_bins: usize,
    /// Norm interval whose share of the training set is reported.
    #[serde(default = "default_norm_band")]
    pub norm_band: [f64; 2],
    /// Resolution of the `(x₁, x₂)` committor grid written for plotting; 0 skips it.
    #[serde(default)]
    pub grid: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isosurface: Option<IsosurfaceSection>,
}

fn default_curve_points() -> usize {
    5000
}

fn default_norm_bins() -> usize {
    10
}

fn default_norm_band() -> [f64; 2] {
    [1.2, 1.8]
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            curve_points: default_curve_points(),
            norm_bins: default_norm_bins(),
            norm_band: default_norm_band(),
            grid: 0,
            isosurface: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsosurfaceSection {
    /// Candidate points located by bisection.
    pub candidates: usize,
    pub tol: f64,
    /// Points passed to the trajectory oracle.
    pub points: usize,
    #[serde(default = "default_iso_bins")]
    pub bins: usize,
    #[serde(default)]
    pub pool: IsoPool,
    pub mc: McConfig,
}

/// Where the bisection endpoints of isosurface candidates come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IsoPool {
    /// Uniform points of `Ω \ (A ∪ B)`.
    #[default]
    Uniform,
    /// The final training set.
    TrainingSet,
}

fn default_iso_bins() -> usize {
    20
}

/// Reads a config file and applies `key.path=value` overrides. The file is
/// TOML, or a run manifest (JSON) whose `config` snapshot is used.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("reading {}: {e}", path.display())))?;
    let value = if path.extension().is_some_and(|e| e == "json") {
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        let cfg = json
            .get("config")
            .ok_or_else(|| ConfigError::new("config", format!("{} holds no config snapshot", path.display())))?;
        toml::Value::try_from(cfg).map_err(|e| ConfigError::new("config", e.to_string()))?
    } else {
        let table: toml::Table = toml::from_str(&text).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
        toml::Value::Table(table)
    };
    from_value(value, overrides)
}

/// Parses TOML text and applies overrides.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let table: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("", e.to_string()))?;
    from_value(toml::Value::Table(table), overrides)
}

fn from_value(mut value: toml::Value, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::new(if path == "." { "" } else { &path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Sets `a.b.c=value` in a TOML tree. The value is read as a TOML value
/// when it parses as one (numbers, booleans, arrays, inline tables) and as
/// a bare string otherwise.
pub fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::new(spec, "override must look like key.path=value"))?;
    let key = key.trim();
    let keys: Vec<&str> = key.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::new(key, "empty key segment"));
    }
    let raw = raw.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut node = root;
    for (i, k) in keys.iter().enumerate() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| ConfigError::new(&keys[..i].join("."), "is not a table"))?;
        if i + 1 == keys.len() {
            table.insert((*k).to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry((*k).to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    unreachable!("keys is non-empty")
}

impl ExperimentConfig {
    /// Checks that go beyond the schema, naming the offending key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        use ExperimentId::*;
        let potential_id = match self.potential {
            PotentialConfig::BrownianAnnulus { .. } => "brownian-annulus",
            PotentialConfig::RuggedMueller { .. } => "rugged-mueller",
        };
        match self.experiment {
            Brownian20 if potential_id != "brownian-annulus" => {
                return Err(ConfigError::new("potential.id", "brownian20 needs the brownian-annulus potential"))
            }
            RuggedMueller10 | RuggedMuellerLatent if potential_id != "rugged-mueller" => {
                return Err(ConfigError::new("potential.id", format!("{} needs the rugged-mueller potential", self.experiment.as_str())))
            }
            RuggedMuellerLatent if !matches!(self.sampler, SamplerSection::Latent(_)) => {
                return Err(ConfigError::new("sampler.kind", "rugged-mueller-latent needs the latent sampler"))
            }
            FlowSelftest if !matches!(self.sampler, SamplerSection::Flow(_)) => {
                return Err(ConfigError::new("sampler.kind", "flow-selftest needs the flow sampler"))
            }
            _ => {}
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(ConfigError::new("output_dir", "must not be empty"));
        }
        if self.net.hidden.is_empty() || self.net.hidden.contains(&0) {
            return Err(ConfigError::new("net.hidden", "needs at least one positive width"));
        }
        let d = &self.dastr;
        for (name, v) in [
            ("dastr.N_adaptive", d.n_adaptive),
            ("dastr.N_e", d.n_e),
            ("dastr.m", d.m),
            ("dastr.N_0", d.n_0),
            ("dastr.N_A", d.n_a),
            ("dastr.N_B", d.n_b),
            ("dastr.m_boundary", d.m_boundary),
        ] {
            if v == 0 {
                return Err(ConfigError::new(name, "must be positive"));
            }
        }
        if !(d.lambda > 0.0) {
            return Err(ConfigError::new("dastr.lambda", "must be positive"));
        }
        if !(d.lr > 0.0) {
            return Err(ConfigError::new("dastr.lr", "must be positive"));
        }
        if let RefinePolicy::KeepFraction { fraction } = d.policy {
            if !(0.0..=1.0).contains(&fraction) {
                return Err(ConfigError::new("dastr.policy.fraction", "must lie in [0, 1]"));
            }
        }
        match &self.sampler {
            SamplerSection::None => {}
            SamplerSection::Flow(f) => {
                if f.n_e_prime == 0 || f.m_prime == 0 || f.new_samples == 0 {
                    return Err(ConfigError::new("sampler", "N_e_prime, m_prime and new_samples must be positive"));
                }
                if f.biased && !matches!(self.initial, InitialSection::Metadynamics { .. }) {
                    return Err(ConfigError::new("sampler.biased", "needs a metadynamics initial set"));
                }
            }
            SamplerSection::Latent(l) => {
                if l.m_prime == 0 || l.new_samples == 0 {
                    return Err(ConfigError::new("sampler", "m_prime and new_samples must be positive"));
                }
                let dim = self.potential_dim();
                if l.autoencoder.latent_dim == 0 || l.autoencoder.latent_dim > dim {
                    return Err(ConfigError::new(
                        "sampler.autoencoder.latent_dim",
                        format!("must lie in 1..={dim}"),
                    ));
                }
                if !(0.0..=1.0).contains(&l.min_acceptance) {
                    return Err(ConfigError::new("sampler.min_acceptance", "must lie in [0, 1]"));
                }
            }
        }
        if let InitialSection::Metadynamics { cv, .. } = &self.initial {
            if cv.is_empty() || cv.iter().any(|&i| i >= self.potential_dim()) {
                return Err(ConfigError::new("initial.cv", "indices must address coordinates of the potential"));
            }
        }
        if let Some(iso) = &self.eval.isosurface {
            if iso.points == 0 || iso.candidates == 0 || iso.bins == 0 || !(iso.tol > 0.0) {
                return Err(ConfigError::new("eval.isosurface", "counts and tol must be positive"));
            }
        }
        Ok(())
    }

    pub fn potential_dim(&self) -> usize {
        match self.potential {
            PotentialConfig::BrownianAnnulus { dim, .. } | PotentialConfig::RuggedMueller { dim, .. } => dim,
        }
    }

    /// `output_dir`, resolved against `DASTR_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        if self.output_dir.is_relative() {
            if let Some(root) = std::env::var_os(OUTPUT_ROOT_ENV) {
                return PathBuf::from(root).join(&self.output_dir);
            }
        }
        self.output_dir.clone()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}
