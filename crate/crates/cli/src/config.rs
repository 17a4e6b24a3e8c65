use std::fmt;
use std::path::{Path, PathBuf};

use gdc_core::{Adaptivity, BaselineConfig, BaselineKind, ConstraintConfig, DpgConfig, FitConfig, SgdConfig};
use serde::{Deserialize, Serialize};

/// A configuration problem tied to the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config field `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub base_model: BaseModelSection,
    #[serde(default)]
    pub space: SpaceSection,
    #[serde(default)]
    pub constraints: Vec<ConstraintConfig>,
    #[serde(default)]
    pub fit: FitSection,
    #[serde(default)]
    pub trainer: TrainerSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablation: AblationSection,
    #[serde(default)]
    pub oracle: OracleSection,
    /// Run directory. Relative paths resolve against the output root.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

/// Either a corpus to fit a k-gram base on, or a saved model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelSection {
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default)]
    pub smoothing: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    #[serde(default)]
    pub lmax: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Base samples drawn once for the moment matcher.
    pub samples: usize,
    pub tolerance: f64,
    pub lambda_clamp: f64,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitConfig::<f64>::default();
        Self {
            learning_rate: d.sgd.learning_rate,
            max_steps: d.sgd.steps,
            samples: d.sgd.batch_size,
            tolerance: d.tolerance,
            lambda_clamp: d.lambda_clamp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Method {
    #[default]
    #[serde(rename = "gdc")]
    Gdc,
    #[serde(rename = "reinforce-phi")]
    ReinforcePhi,
    #[serde(rename = "reinforce-P")]
    ReinforceP,
    #[serde(rename = "kl-penalized")]
    KlPenalized,
    #[serde(rename = "rejection-mle")]
    RejectionMle,
}

impl Method {
    pub fn baseline_kind(self) -> Option<BaselineKind> {
        match self {
            Method::Gdc => None,
            Method::ReinforcePhi => Some(BaselineKind::ReinforcePhi),
            Method::ReinforceP => Some(BaselineKind::ReinforceP),
            Method::KlPenalized => Some(BaselineKind::KlPenalized),
            Method::RejectionMle => Some(BaselineKind::RejectionMle),
        }
    }

    pub fn name(self) -> &'static str {
        self.baseline_kind().map_or("gdc", |k| k.name())
    }
}

/// Trainer settings. Unset fields take the trainer's defaults; fields that
/// do not apply to the chosen method are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerSection {
    #[serde(default)]
    pub method: Method,
    pub iterations: Option<usize>,
    pub steps_per_iteration: Option<usize>,
    pub learning_rate: Option<f64>,
    pub policy_order: Option<usize>,
    pub normalize_by_pilot_z: Option<bool>,
    pub pilot_samples: Option<usize>,
    pub adaptivity: Option<Adaptivity>,
    pub batch_update: Option<bool>,
    pub beta: Option<f64>,
    pub beta_adaptive: Option<bool>,
    pub kl_target: Option<f64>,
    pub beta_rate: Option<f64>,
    pub rejection_order: Option<usize>,
    pub smoothing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub eval_every: usize,
    pub sample_size: usize,
    pub exact_oracle: bool,
    /// Policy document for `eval`; defaults to `policy.json` in the run directory.
    pub model: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { eval_every: 10, sample_size: 1000, exact_oracle: false, model: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub variants: Vec<Adaptivity>,
    pub seeds: Vec<u64>,
    /// KL(p, π) level that counts as converged.
    pub threshold: f64,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { variants: vec![Adaptivity::Kl, Adaptivity::Tvd, Adaptivity::None], seeds: vec![0, 1, 2], threshold: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Explicit natural parameters; when absent the exact projection is used.
    #[serde(default)]
    pub lambda: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let value: toml::Table = toml::from_str(text).map_err(|e| ConfigError::new("", e.message().to_string()))?;
        let config: Self = serde_path_to_error::deserialize(toml::Value::Table(value)).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { String::new() } else { path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new("", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Checks every field that can be judged without loading data.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |path: &str, msg: &str| Err(ConfigError::new(path, msg));
        let b = &self.base_model;
        match (&b.corpus, &b.model) {
            (Some(_), Some(_)) => return err("base_model", "set exactly one of `corpus` and `model`, not both"),
            (None, None) => return err("base_model", "set exactly one of `corpus` and `model`"),
            (None, Some(_)) => {
                if b.order.is_some() {
                    return err("base_model.order", "only applies when fitting from a corpus");
                }
                if b.smoothing.is_some() {
                    return err("base_model.smoothing", "only applies when fitting from a corpus");
                }
            }
            (Some(_), None) => {
                if self.space.lmax.is_none() {
                    return err("space.lmax", "required when the base model is fitted from a corpus");
                }
                if b.order == Some(0) {
                    return err("base_model.order", "must be >= 1");
                }
                if let Some(s) = b.smoothing {
                    if !(s >= 0.0) || !s.is_finite() {
                        return err("base_model.smoothing", "must be a finite value >= 0");
                    }
                }
            }
        }
        if self.space.lmax == Some(0) {
            return err("space.lmax", "must be >= 1");
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if self.constraints[..i].iter().any(|d| d.id == c.id) {
                return Err(ConfigError::new(
                    format!("constraints[{i}].id"),
                    format!("duplicate feature id {:?}", c.id),
                ));
            }
        }

        let f = &self.fit;
        if !(f.learning_rate > 0.0) || !f.learning_rate.is_finite() {
            return err("fit.learning_rate", "must be > 0");
        }
        if f.max_steps == 0 {
            return err("fit.max_steps", "must be >= 1");
        }
        if f.samples == 0 {
            return err("fit.samples", "must be >= 1");
        }
        if !(f.tolerance > 0.0) {
            return err("fit.tolerance", "must be > 0");
        }
        if !(f.lambda_clamp > 0.0) {
            return err("fit.lambda_clamp", "must be > 0");
        }

        self.validate_trainer()?;

        let e = &self.eval;
        if e.eval_every == 0 {
            return err("eval.eval_every", "must be >= 1");
        }
        if e.sample_size < 2 {
            return err("eval.sample_size", "must be >= 2");
        }
        let a = &self.ablation;
        if a.variants.is_empty() {
            return err("ablation.variants", "must list at least one variant");
        }
        if a.seeds.is_empty() {
            return err("ablation.seeds", "must list at least one seed");
        }
        if !(a.threshold > 0.0) {
            return err("ablation.threshold", "must be > 0");
        }
        Ok(())
    }

    fn validate_trainer(&self) -> Result<(), ConfigError> {
        let t = &self.trainer;
        let gdc = t.method == Method::Gdc;
        let reject = |field: &str, set: bool, applies: bool| -> Result<(), ConfigError> {
            if set && !applies {
                return Err(ConfigError::new(
                    format!("trainer.{field}"),
                    format!("does not apply to method {:?}", t.method.name()),
                ));
            }
            Ok(())
        };
        let kind = t.method.baseline_kind();
        reject("adaptivity", t.adaptivity.is_some(), gdc)?;
        reject("batch_update", t.batch_update.is_some(), gdc)?;
        let penalized = kind == Some(BaselineKind::KlPenalized);
        reject("beta", t.beta.is_some(), penalized)?;
        reject("beta_adaptive", t.beta_adaptive.is_some(), penalized)?;
        reject("kl_target", t.kl_target.is_some(), penalized)?;
        reject("beta_rate", t.beta_rate.is_some(), penalized)?;
        let rejection = kind == Some(BaselineKind::RejectionMle);
        reject("rejection_order", t.rejection_order.is_some(), rejection)?;
        reject("smoothing", t.smoothing.is_some(), rejection)?;
        reject("learning_rate", t.learning_rate.is_some(), !rejection)?;
        reject("policy_order", t.policy_order.is_some(), !rejection)?;
        let pilot = gdc || kind == Some(BaselineKind::ReinforceP);
        reject("normalize_by_pilot_z", t.normalize_by_pilot_z.is_some(), pilot)?;
        reject("pilot_samples", t.pilot_samples.is_some(), pilot)?;

        if let Some(lr) = t.learning_rate {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(ConfigError::new("trainer.learning_rate", "must be > 0"));
            }
        }
        if t.steps_per_iteration == Some(0) {
            return Err(ConfigError::new("trainer.steps_per_iteration", "must be >= 1"));
        }
        if t.pilot_samples == Some(0) {
            return Err(ConfigError::new("trainer.pilot_samples", "must be >= 1"));
        }
        if let Some(b) = t.beta {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(ConfigError::new("trainer.beta", "must be a finite value >= 0"));
            }
        }
        if t.beta_adaptive == Some(true) && t.kl_target.is_none() {
            return Err(ConfigError::new("trainer.kl_target", "required when beta_adaptive = true"));
        }
        if let Some(r) = t.beta_rate {
            if !(r > 0.0) || !r.is_finite() {
                return Err(ConfigError::new("trainer.beta_rate", "must be > 0"));
            }
        }
        if let Some(s) = t.smoothing {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(ConfigError::new("trainer.smoothing", "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    pub fn fit_config(&self) -> FitConfig<f64> {
        let f = &self.fit;
        FitConfig {
            sgd: SgdConfig {
                learning_rate: f.learning_rate,
                steps: f.max_steps,
                batch_size: f.samples,
                seed: self.seed,
            },
            tolerance: f.tolerance,
            lambda_clamp: f.lambda_clamp,
        }
    }

    pub fn dpg_config(&self, adaptivity: Option<Adaptivity>, seed: u64) -> DpgConfig<f64> {
        let t = &self.trainer;
        let d = DpgConfig::<f64>::default();
        DpgConfig {
            iterations: t.iterations.unwrap_or(d.iterations),
            steps_per_iteration: t.steps_per_iteration.unwrap_or(d.steps_per_iteration),
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            adaptivity: adaptivity.or(t.adaptivity).unwrap_or(d.adaptivity),
            batch_update: t.batch_update.unwrap_or(d.batch_update),
            eval_every: self.eval.eval_every,
            seed,
            policy_order: t.policy_order,
            normalize_by_pilot_z: t.normalize_by_pilot_z.unwrap_or(d.normalize_by_pilot_z),
            pilot_samples: t.pilot_samples.unwrap_or(d.pilot_samples),
        }
    }

    /// `None` for the gdc trainer.
    pub fn baseline_config(&self) -> Option<BaselineConfig<f64>> {
        let t = &self.trainer;
        let mut c = BaselineConfig::new(t.method.baseline_kind()?);
        if let Some(v) = t.iterations {
            c.iterations = v;
        }
        if let Some(v) = t.steps_per_iteration {
            c.steps_per_iteration = v;
        }
        if let Some(v) = t.learning_rate {
            c.learning_rate = v;
        }
        if t.beta.is_some() {
            c.beta = t.beta;
        }
        c.beta_adaptive = t.beta_adaptive.unwrap_or(false);
        c.kl_target = t.kl_target;
        if let Some(v) = t.beta_rate {
            c.beta_rate = v;
        }
        c.eval_every = self.eval.eval_every;
        c.seed = self.seed;
        c.policy_order = t.policy_order;
        if let Some(v) = t.normalize_by_pilot_z {
            c.normalize_by_pilot_z = v;
        }
        if let Some(v) = t.pilot_samples {
            c.pilot_samples = v;
        }
        c.rejection_order = t.rejection_order;
        if let Some(v) = t.smoothing {
            c.smoothing = v;
        }
        Some(c)
    }
}
