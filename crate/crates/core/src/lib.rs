//! Distributional control of autoregressive sequence models over small,
//! enumerable sequence spaces.
//!
//! Everything numeric is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the bottom of this file pin the common `f64` instantiations.

pub mod baselines;
pub mod dpg;
pub mod ebm;
pub mod error;
pub mod estimators;
pub mod exact;
pub mod features;
pub mod lm;
pub mod metrics;
pub mod real;
pub mod seqspace;

pub use baselines::{train_baseline, BaselineConfig, BaselineKind, BaselineOutcome};
pub use dpg::{train, Adaptivity, DpgConfig, IterationReport, TrainOutcome, TrainState};
pub use ebm::{build_ebm, build_pointwise, fit_lambda, Ebm, EbmMode, FitConfig, FitReport, SnisObjective};
pub use error::{Error, Result};
pub use estimators::{Estimate, LogDensity, ZMovingAverage};
pub use exact::{project, ExactDistribution, Projection};
pub use features::{
    resolve_constraints, ConstraintConfig, ConstraintSet, ConstraintSpec, Feature, FeatureKind, FeatureKindSpec,
    FeatureRange,
};
pub use lm::{Gradient, ModelDocument, SgdConfig, TabularArModel, BOS_TOKEN};
pub use metrics::{Evaluator, ExactMetrics, ExactReference, MetricsRecord, ZipfRow};
pub use real::{log_sum_exp, Real};
pub use seqspace::{
    parse_sequence, tokenize_corpus, Corpus, Sequence, SequenceSpace, TokenId, Universe, Vocabulary, EOS_TOKEN,
    MAX_UNIVERSE,
};

pub type Model = TabularArModel<f64>;
pub type Constraints = ConstraintSet<f64>;
pub type Exact = ExactDistribution<f64>;
