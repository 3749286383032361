//! TOML run configuration. Unknown keys are rejected at every level.

use std::sync::Arc;

use delayfolio::delay_sde::{DelaySpec, History, McConfig, TimeGrid};
use delayfolio::fbsde_solver::LsmcConfig;
use delayfolio::market_model::{CoefficientSpec, Coefficients, ModelDims, PowerUtility};
use delayfolio::regression::BasisSpec;
use serde::{Deserialize, Deserializer};

use crate::failure::Failure;

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "DELAYFOLIO_SEED";

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub riccati: RiccatiConfig,
    #[serde(default)]
    pub pointwise: PointwiseConfig,
    #[serde(default)]
    pub lsmc: LsmcSection,
    #[serde(default)]
    pub verify: VerifyConfig,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_assets: usize,
    pub n_factors: usize,
    pub n_noise: usize,
    pub gamma: f64,
    #[serde(default = "one")]
    pub initial_wealth: f64,
    pub coefficients: CoefficientSpec,
    pub delay: DelayConfig,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    pub lambda: f64,
    /// A positive number, or `inf` (bare TOML float or the string "inf").
    #[serde(deserialize_with = "delay_value")]
    pub delta: f64,
    pub y0: Vec<f64>,
    #[serde(default = "constant_history")]
    pub history: History,
}

fn constant_history() -> History {
    History::Constant
}

fn delay_value<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(x) => Ok(x),
        Raw::Text(s) if matches!(s.trim(), "inf" | "infinity" | "+inf") => Ok(f64::INFINITY),
        Raw::Text(s) => Err(serde::de::Error::custom(format!("delta must be a number or \"inf\", got {s:?}"))),
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    pub seed: Option<u64>,
    #[serde(default)]
    pub antithetic: bool,
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "default_picard")]
    pub picard_sweeps: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

fn default_steps() -> usize {
    50
}
fn default_paths() -> usize {
    10_000
}
fn default_degree() -> usize {
    2
}
fn default_picard() -> usize {
    LsmcConfig::default().picard_sweeps
}
fn default_clip() -> f64 {
    LsmcConfig::default().clip
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: default_steps(),
            n_paths: default_paths(),
            seed: None,
            antithetic: false,
            basis_degree: default_degree(),
            picard_sweeps: default_picard(),
            clip: default_clip(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimStrategy {
    /// `π̂` of the solver that matches the coefficient family.
    #[default]
    Optimal,
    /// `(σσ*)⁻¹(μ - r1)/(1-γ)`, ignoring hedging.
    Myopic,
    Zero,
    Constant,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub strategy: SimStrategy,
    /// Used by the `constant` strategy.
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_dump")]
    pub max_paths: usize,
}

fn default_dump() -> usize {
    100
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            strategy: SimStrategy::default(),
            weights: None,
            max_paths: default_dump(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiccatiConfig {
    #[serde(default = "default_ode_steps")]
    pub steps: usize,
    /// Point at which `η` and `π̂(0)` are reported; defaults to the initial state.
    pub y: Option<f64>,
    pub v: Option<f64>,
    #[serde(default)]
    pub feynman_kac: bool,
    #[serde(default = "default_fk_steps")]
    pub fk_steps: usize,
}

fn default_ode_steps() -> usize {
    1000
}
fn default_fk_steps() -> usize {
    200
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        Self {
            steps: default_ode_steps(),
            y: None,
            v: None,
            feynman_kac: false,
            fk_steps: default_fk_steps(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointwiseConfig {
    #[serde(default = "default_rows")]
    pub rows: usize,
}

fn default_rows() -> usize {
    100
}

impl Default for PointwiseConfig {
    fn default() -> Self {
        Self { rows: default_rows() }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsmcSection {
    /// Terminal value `w . Y(T)` instead of zero; diagnostic use only.
    pub terminal_y_weights: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    /// Scale the whole strategy.
    #[default]
    Pi,
    /// Scale `q̂` before it enters the strategy.
    QHat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjointMode {
    #[default]
    Forward,
    Evaluated,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    #[serde(default = "default_perturbations")]
    pub perturbations: usize,
    pub perturbation_seed: Option<u64>,
    #[serde(default)]
    pub negative_control: ControlKind,
    #[serde(default = "default_control_scale")]
    pub control_scale: f64,
    #[serde(default)]
    pub adjoint: AdjointMode,
}

fn default_perturbations() -> usize {
    10
}
fn default_control_scale() -> f64 {
    2.0
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            perturbations: default_perturbations(),
            perturbation_seed: None,
            negative_control: ControlKind::default(),
            control_scale: default_control_scale(),
            adjoint: AdjointMode::default(),
        }
    }
}

/// Command-line overrides applied after parsing.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

/// Where the effective seed came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Flag,
    Config,
    Env,
    Default,
}

pub fn parse(text: &str) -> Result<RunConfig, Failure> {
    if text.trim().is_empty() {
        return Err(Failure::Config("config file is empty".into()));
    }
    toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))
}

/// Flag, then config, then environment, then the built-in default.
pub fn resolve_seed(cfg: &RunConfig, flag: Option<u64>, env: Option<&str>) -> Result<(u64, SeedSource), Failure> {
    if let Some(s) = flag {
        return Ok((s, SeedSource::Flag));
    }
    if let Some(s) = cfg.numerics.seed {
        return Ok((s, SeedSource::Config));
    }
    if let Some(raw) = env {
        let s = raw
            .trim()
            .parse::<u64>()
            .map_err(|_| Failure::Config(format!("{SEED_ENV} must be an unsigned integer, got {raw:?}")))?;
        return Ok((s, SeedSource::Env));
    }
    Ok((DEFAULT_SEED, SeedSource::Default))
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = o.paths {
            self.numerics.n_paths = p;
        }
        if let Some(k) = o.steps {
            self.numerics.steps = k;
        }
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let n = &self.numerics;
        if !(n.horizon > 0.0 && n.horizon.is_finite()) {
            return Err(Failure::Config("numerics.horizon must be positive".into()));
        }
        if n.steps == 0 {
            return Err(Failure::Config("numerics.steps must be at least 1".into()));
        }
        if n.n_paths < 2 {
            return Err(Failure::Config("numerics.n_paths must be at least 2".into()));
        }
        if n.antithetic && n.n_paths % 2 == 1 {
            return Err(Failure::Config("numerics.n_paths must be even with antithetic sampling".into()));
        }
        if !(n.clip > 0.0) {
            return Err(Failure::Config("numerics.clip must be positive".into()));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelConfig, Failure> {
        self.model
            .as_ref()
            .ok_or_else(|| Failure::Config("this command needs a [model] section".into()))
    }

    pub fn grid(&self) -> Result<TimeGrid, Failure> {
        Ok(TimeGrid::new(self.numerics.horizon, self.numerics.steps)?)
    }

    pub fn mc(&self, seed: u64) -> McConfig {
        McConfig::new(self.numerics.n_paths, seed).with_antithetic(self.numerics.antithetic)
    }

    pub fn lsmc_config(&self) -> LsmcConfig {
        LsmcConfig {
            basis: BasisSpec::new(self.numerics.basis_degree),
            picard_sweeps: self.numerics.picard_sweeps,
            clip: self.numerics.clip,
            terminal_y_weights: self.lsmc.terminal_y_weights.clone(),
        }
    }
}

/// Evaluated model pieces.
pub struct Model {
    pub spec: CoefficientSpec,
    pub dims: ModelDims,
    pub coeffs: Arc<dyn Coefficients>,
    pub delay: DelaySpec,
    pub utility: PowerUtility,
}

impl ModelConfig {
    pub fn build(&self) -> Result<Model, Failure> {
        let dims = ModelDims::new(self.n_assets, self.n_factors, self.n_noise)?;
        let utility = PowerUtility::new(self.gamma, self.initial_wealth)?;
        let coeffs = self.coefficients.build(dims, self.gamma)?;
        let d = &self.delay;
        if d.y0.len() != dims.n_factors {
            return Err(Failure::Config(format!(
                "delay.y0 has length {}, expected n_factors = {}",
                d.y0.len(),
                dims.n_factors
            )));
        }
        let delay = DelaySpec::new(d.lambda, d.delta, d.y0.clone(), d.history.clone())?;
        Ok(Model {
            spec: self.coefficients.clone(),
            dims,
            coeffs,
            delay,
            utility,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MERTON: &str = r#"
[model]
n_assets = 1
n_factors = 1
n_noise = 1
gamma = 0.5

[model.coefficients]
family = "constant"
r = 0.03
mu = [0.08]
sigma = [[0.2]]

[model.delay]
lambda = 1.0
delta = inf
y0 = [0.0]
"#;

    #[test]
    fn parses_and_builds() {
        let cfg = parse(MERTON).unwrap();
        cfg.validate().unwrap();
        let m = cfg.model().unwrap().build().unwrap();
        assert!(m.delay.is_infinite());
        assert_eq!(cfg.numerics.steps, 50);
    }

    #[test]
    fn delta_as_text() {
        let cfg = parse(&MERTON.replace("delta = inf", "delta = \"inf\"")).unwrap();
        assert!(cfg.model().unwrap().delay.delta.is_infinite());
        let cfg = parse(&MERTON.replace("delta = inf", "delta = 0.5")).unwrap();
        assert_eq!(cfg.model().unwrap().delay.delta, 0.5);
    }

    #[test]
    fn rejects_unknown_keys_and_empty_files() {
        assert!(matches!(parse(""), Err(Failure::Config(_))));
        assert!(matches!(parse(&MERTON.replace("gamma", "gama")), Err(Failure::Config(_))));
        assert!(matches!(
            parse(&format!("{MERTON}\n[numerics]\nstepz = 3\n")),
            Err(Failure::Config(_))
        ));
    }

    #[test]
    fn seed_precedence() {
        let mut cfg = parse(MERTON).unwrap();
        assert_eq!(resolve_seed(&cfg, None, None).unwrap(), (DEFAULT_SEED, SeedSource::Default));
        assert_eq!(resolve_seed(&cfg, None, Some("7")).unwrap(), (7, SeedSource::Env));
        cfg.numerics.seed = Some(5);
        assert_eq!(resolve_seed(&cfg, None, Some("7")).unwrap(), (5, SeedSource::Config));
        assert_eq!(resolve_seed(&cfg, Some(9), Some("7")).unwrap(), (9, SeedSource::Flag));
        cfg.numerics.seed = None;
        assert!(resolve_seed(&cfg, None, Some("x")).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = parse(MERTON).unwrap();
        cfg.apply(&Overrides {
            paths: Some(64),
            steps: Some(8),
        });
        assert_eq!((cfg.numerics.n_paths, cfg.numerics.steps), (64, 8));
    }
}
