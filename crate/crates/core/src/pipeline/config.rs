//! Run configuration, read from the same TOML dialect as instance files.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{LmabError, Result};
use crate::model::{generate_random_instance, GeneratorSpec, LmabInstance, SeparationConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Pipeline {
    #[serde(rename = "algorithm1-moments")]
    Algorithm1Moments,
    #[serde(rename = "ed-mle")]
    EdMle,
    #[serde(rename = "tensor-init-em")]
    TensorInitEm,
    #[serde(rename = "ucb")]
    Ucb,
    #[serde(rename = "genie")]
    Genie,
}

impl Pipeline {
    pub const ALL: [Pipeline; 5] =
        [Pipeline::Algorithm1Moments, Pipeline::EdMle, Pipeline::TensorInitEm, Pipeline::Ucb, Pipeline::Genie];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Algorithm1Moments => "algorithm1-moments",
            Pipeline::EdMle => "ed-mle",
            Pipeline::TensorInitEm => "tensor-init-em",
            Pipeline::Ucb => "ucb",
            Pipeline::Genie => "genie",
        }
    }
}

impl FromStr for Pipeline {
    type Err = LmabError;

    fn from_str(s: &str) -> Result<Self> {
        Pipeline::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| LmabError::Config(format!("unknown pipeline {s:?}")))
    }
}

/// A tolerance that is either given or derived from the accuracy target.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Tolerance {
    Value(f64),
    Named(AutoTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AutoTag {
    #[serde(rename = "auto")]
    Auto,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Named(AutoTag::Auto)
    }
}

impl FromStr for Tolerance {
    type Err = LmabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Tolerance::Named(AutoTag::Auto));
        }
        s.parse().map(Tolerance::Value).map_err(|_| LmabError::Config(format!("expected a number or \"auto\", got {s:?}")))
    }
}

/// Lower bound on mixing weights: known, or searched over a halving schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightFloor {
    Value(f64),
    Named(GeometricTag),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeometricTag {
    #[serde(rename = "geometric")]
    Geometric,
}

impl Default for WeightFloor {
    fn default() -> Self {
        WeightFloor::Named(GeometricTag::Geometric)
    }
}

impl FromStr for WeightFloor {
    type Err = LmabError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "geometric" {
            return Ok(WeightFloor::Named(GeometricTag::Geometric));
        }
        s.parse()
            .map(WeightFloor::Value)
            .map_err(|_| LmabError::Config(format!("expected a number or \"geometric\", got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub m: usize,
    pub a: usize,
    #[serde(default = "two")]
    pub z: usize,
    pub h: usize,
    pub rank: usize,
    #[serde(default)]
    pub separation_gamma: Option<f64>,
}

fn two() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub pipeline: Option<Pipeline>,
    /// Pipelines compared by a sweep; a single run uses `pipeline`.
    #[serde(default)]
    pub pipelines: Vec<Pipeline>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub instance: Option<PathBuf>,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    /// Overrides the instance horizon.
    #[serde(default)]
    pub horizon: Option<usize>,
    #[serde(default = "default_n0")]
    pub n0: usize,
    #[serde(default = "default_n1")]
    pub n1: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub delta_sub: Tolerance,
    #[serde(default)]
    pub delta_tsr: Tolerance,
    #[serde(default)]
    pub w_min: WeightFloor,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    #[serde(default = "yes")]
    pub record_wallclock: bool,
    /// Inject the exact second moment and exact tensors instead of sampling.
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default = "default_ucb_width")]
    pub ucb_width: f64,
    #[serde(default = "default_em_max_iter")]
    pub em_max_iter: usize,
    #[serde(default = "default_em_tol")]
    pub em_tol: f64,
    #[serde(default = "default_random_inits")]
    pub random_inits: usize,
    #[serde(default = "default_fit_max_iter")]
    pub fit_max_iter: usize,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub policy_out: Option<PathBuf>,
}

fn default_n0() -> usize {
    1_000_000
}
fn default_n1() -> usize {
    10_000
}
fn default_n() -> usize {
    50_000
}
fn default_epsilon() -> f64 {
    0.1
}
fn default_eta() -> f64 {
    0.05
}
fn default_eval_episodes() -> usize {
    10_000
}
fn yes() -> bool {
    true
}
fn default_ucb_width() -> f64 {
    1.0
}
fn default_em_max_iter() -> usize {
    crate::mle::DEFAULT_MAX_ITER
}
fn default_em_tol() -> f64 {
    crate::mle::DEFAULT_TOL
}
fn default_random_inits() -> usize {
    3
}
fn default_fit_max_iter() -> usize {
    5_000
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LmabError::Config(e.to_string()))
    }

    /// Reads a config; a relative instance path resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LmabError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(inst), Some(dir)) = (&cfg.instance, path.parent()) {
            if inst.is_relative() {
                cfg.instance = Some(dir.join(inst));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LmabError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.instance, &self.generator) {
            (Some(_), Some(_)) => return Err(LmabError::Config("give either instance or generator, not both".into())),
            (None, None) => return Err(LmabError::Config("an instance file or a generator table is required".into())),
            _ => {}
        }
        if !(self.epsilon > 0.0) {
            return Err(LmabError::Config("epsilon must be positive".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(LmabError::Config("eta must lie in (0, 1)".into()));
        }
        if let Tolerance::Value(v) = self.delta_sub {
            if !(v >= 0.0) {
                return Err(LmabError::Config("delta_sub must be nonnegative".into()));
            }
        }
        if let Tolerance::Value(v) = self.delta_tsr {
            if !(v > 0.0) {
                return Err(LmabError::Config("delta_tsr must be positive".into()));
            }
        }
        if let WeightFloor::Value(v) = self.w_min {
            if !(0.0..=1.0).contains(&v) {
                return Err(LmabError::Config("w_min must lie in [0, 1]".into()));
            }
        }
        if !(self.ucb_width >= 0.0) {
            return Err(LmabError::Config("ucb_width must be nonnegative".into()));
        }
        Ok(())
    }

    /// The single pipeline of a run.
    pub fn single_pipeline(&self) -> Result<Pipeline> {
        match (self.pipeline, self.pipelines.as_slice()) {
            (Some(p), []) => Ok(p),
            (None, [p]) => Ok(*p),
            (Some(p), [q]) if p == *q => Ok(p),
            _ => Err(LmabError::Config("exactly one pipeline must be selected".into())),
        }
    }

    /// Pipelines of a sweep: the list if given, else the single pipeline.
    pub fn sweep_pipelines(&self) -> Result<Vec<Pipeline>> {
        if self.pipelines.is_empty() {
            Ok(vec![self.single_pipeline()?])
        } else {
            Ok(self.pipelines.clone())
        }
    }

    /// Ground-truth instance: loaded, or generated from the run seed.
    pub fn load_instance(&self) -> Result<LmabInstance> {
        let inst = self.source_instance()?;
        Ok(match self.horizon {
            Some(h) => inst.with_horizon(h),
            None => inst,
        })
    }

    fn source_instance(&self) -> Result<LmabInstance> {
        if let Some(path) = &self.instance {
            return LmabInstance::load(path).map_err(|e| LmabError::Config(format!("{}: {e}", path.display())));
        }
        let g = self.generator.as_ref().ok_or_else(|| LmabError::Config("no instance source".into()))?;
        let mut spec = GeneratorSpec::new(g.m, g.a, g.z, g.h, g.rank);
        spec.separation = g.separation_gamma.map(|gamma| SeparationConfig { gamma, enforced: true });
        let mut rng = rng::stream_rng(self.seed, INSTANCE_STREAM);
        generate_random_instance(&spec, &mut rng)
    }
}

pub(crate) const INSTANCE_STREAM: u64 = 1;

/// Moment tolerance from the accuracy target, with all constants set to 1.
pub fn auto_delta_tsr(epsilon: f64, z: usize, m: usize, h: usize, n: usize) -> f64 {
    let (zf, mf, hf) = (z as f64, m as f64, h as f64);
    if h + 1 >= 2 * m {
        (epsilon / (zf * hf * hf * mf.powf(3.5) * n as f64)).powi(2 * m as i32 - 1)
    } else {
        (epsilon / hf) / (zf * (2.0 * mf).sqrt()).powi(h as i32)
    }
}

/// Subspace tolerance from the accuracy target.
pub fn auto_delta_sub(epsilon: f64, z: usize, m: usize, h: usize, w_min: f64) -> f64 {
    let (zf, mf, hf) = (z as f64, m as f64, h as f64);
    if h + 1 >= 2 * m {
        epsilon / (2.0 * zf * mf * hf * hf)
    } else {
        let spread = (zf * (2.0 * mf).sqrt()).powi(h as i32);
        let inner = (w_min + epsilon / (mf * hf * hf * spread)).sqrt().min(epsilon / (hf * mf.sqrt()));
        inner / (2.0 * zf * mf.sqrt() * hf)
    }
}

/// Weight floors tried when the true floor is unknown: `1/M, 1/2M, ...`,
/// down to `M^-min(M, H)` and at most six levels.
pub fn geometric_floors(m: usize, h: usize) -> Vec<f64> {
    let last = (m as f64).powi(-(m.min(h) as i32));
    let mut out = vec![1.0 / m as f64];
    while out.len() < 6 {
        let next = out.last().expect("nonempty") / 2.0;
        if next < last {
            break;
        }
        out.push(next);
    }
    out
}
