//! Distributional policy gradient with an adaptively refreshed proposal.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ebm::Ebm;
use crate::error::{Error, Result};
use crate::estimators::{importance_ratios, kl_p_from_logs, tvd_from_logs, LogDensity, ZMovingAverage};
use crate::lm::{Gradient, TabularArModel};
use crate::metrics::{Evaluator, MetricsRecord};
use crate::real::Real;
use crate::seqspace::{Sequence, Universe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adaptivity {
    /// Replace the proposal when the policy is closer to the target in KL.
    Kl,
    /// Same, judged by total variation.
    Tvd,
    /// Keep sampling from the initial proposal.
    None,
}

impl Adaptivity {
    pub fn name(self) -> &'static str {
        match self {
            Adaptivity::Kl => "kl",
            Adaptivity::Tvd => "tvd",
            Adaptivity::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpgConfig<F> {
    pub iterations: usize,
    /// Samples drawn from the proposal per iteration.
    pub steps_per_iteration: usize,
    pub learning_rate: F,
    pub adaptivity: Adaptivity,
    /// Accumulate the iteration's gradients and apply once; otherwise apply
    /// each sample's update immediately with step `learning_rate / K`.
    pub batch_update: bool,
    pub eval_every: usize,
    pub seed: u64,
    /// Policy context order; defaults to full history (`lmax + 1`).
    pub policy_order: Option<usize>,
    /// Divide the learning rate by a pilot estimate of Z drawn from the base,
    /// so the step size does not depend on the overall scale of `P`.
    pub normalize_by_pilot_z: bool,
    pub pilot_samples: usize,
}

impl<F: Real> Default for DpgConfig<F> {
    fn default() -> Self {
        Self {
            iterations: 200,
            steps_per_iteration: 1024,
            learning_rate: F::of(0.1),
            adaptivity: Adaptivity::Kl,
            batch_update: true,
            eval_every: 10,
            seed: 0,
            policy_order: None,
            normalize_by_pilot_z: true,
            pilot_samples: 10_000,
        }
    }
}

impl<F: Real> DpgConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_iteration == 0 {
            return Err(Error::InvalidConfig("steps_per_iteration must be >= 1".into()));
        }
        if !(self.learning_rate > F::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.normalize_by_pilot_z && self.pilot_samples == 0 {
            return Err(Error::InvalidConfig("pilot_samples must be >= 1".into()));
        }
        Ok(())
    }
}

/// Draws `n` base samples on a dedicated stream and returns the mean `P/a`.
pub fn pilot_z<F: Real>(ebm: &Ebm<F>, n: usize, seed: u64) -> Result<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let xs = ebm.base().sample(&mut rng, n);
    let r = importance_ratios(&ebm.log_densities(&xs), &ebm.base().log_densities(&xs))?;
    let z = r.iter().copied().sum::<F>() / F::of_usize(n);
    if !(z > F::zero()) {
        return Err(Error::NonpositiveZ(z.as_f64()));
    }
    Ok(z)
}

#[derive(Debug, Clone)]
pub struct TrainState<F: Real> {
    pub policy: TabularArModel<F>,
    /// Frozen snapshot; never aliases the policy.
    pub proposal: TabularArModel<F>,
    pub zma: ZMovingAverage<F>,
    pub history: Vec<MetricsRecord<F>>,
    pub proposal_updates: usize,
    pub samples_drawn: usize,
    /// Learning rate actually applied, after any pilot normalization.
    pub step_size: F,
    rng: ChaCha8Rng,
}

impl<F: Real> TrainState<F> {
    /// Policy and proposal both start at the base.
    pub fn new(base: &TabularArModel<F>, ebm: &Ebm<F>, config: &DpgConfig<F>) -> Result<Self> {
        config.validate()?;
        if base.space() != ebm.base().space() {
            return Err(Error::InvalidConfig("EBM base and initial policy live on different spaces".into()));
        }
        let order = config.policy_order.unwrap_or(base.space().lmax() + 1).max(base.order());
        let policy = base.lift(order)?.trainable_copy()?;
        let mut samples_drawn = 0;
        let step_size = if config.normalize_by_pilot_z {
            samples_drawn += config.pilot_samples;
            config.learning_rate / pilot_z(ebm, config.pilot_samples, config.seed)?
        } else {
            config.learning_rate
        };
        Ok(Self {
            proposal: base.frozen_copy(),
            policy,
            zma: ZMovingAverage::new(),
            history: Vec::new(),
            proposal_updates: 0,
            samples_drawn,
            step_size,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationReport<F> {
    pub z_hat: F,
    pub z_ma: F,
    /// Divergence estimates of the updated policy and of the proposal, when compared.
    pub policy_divergence: Option<F>,
    pub proposal_divergence: Option<F>,
    pub replaced: bool,
}

/// Weighted score-function step `θ += α Σ_k w_k ∇log π(x_k) / K`.
fn apply_weighted<F: Real>(
    policy: &mut TabularArModel<F>,
    xs: &[Sequence],
    weights: &[F],
    step: F,
    batch: bool,
) -> Result<()> {
    let k = F::of_usize(xs.len());
    if batch {
        let mut acc = Gradient::new();
        for (x, &w) in xs.iter().zip(weights) {
            if w != F::zero() {
                acc.add_scaled(&policy.grad_log_prob(x)?, w);
            }
        }
        policy.apply_update(&acc, step / k);
    } else {
        for (x, &w) in xs.iter().zip(weights) {
            if w != F::zero() {
                let g = policy.grad_log_prob(x)?;
                policy.apply_update(&g, step * w / k);
            }
        }
    }
    Ok(())
}

/// One outer iteration: sample from the proposal, update the policy, fold the
/// batch Z estimate and possibly promote the policy to proposal.
pub fn dpg_iteration<F: Real>(
    state: &mut TrainState<F>,
    ebm: &Ebm<F>,
    config: &DpgConfig<F>,
) -> Result<IterationReport<F>> {
    let xs = state.proposal.sample(&mut state.rng, config.steps_per_iteration);
    state.samples_drawn += xs.len();
    let log_p = ebm.log_densities(&xs);
    let log_q = state.proposal.log_densities(&xs);
    let weights = importance_ratios(&log_p, &log_q)?;
    apply_weighted(&mut state.policy, &xs, &weights, state.step_size, config.batch_update)?;

    let z_hat = weights.iter().copied().sum::<F>() / F::of_usize(weights.len());
    let z_ma = state.zma.fold(z_hat);
    let mut report =
        IterationReport { z_hat, z_ma, policy_divergence: None, proposal_divergence: None, replaced: false };
    if config.adaptivity == Adaptivity::None || !(z_ma > F::zero()) {
        return Ok(report);
    }
    let log_pi = state.policy.log_densities(&xs);
    let (d_pi, d_q) = match config.adaptivity {
        Adaptivity::Kl => {
            (kl_p_from_logs(&log_p, &log_pi, &log_q, z_ma)?, kl_p_from_logs(&log_p, &log_q, &log_q, z_ma)?)
        }
        _ => (tvd_from_logs(&log_p, &log_pi, &log_q, z_ma)?, tvd_from_logs(&log_p, &log_q, &log_q, z_ma)?),
    };
    report.policy_divergence = Some(d_pi.value);
    report.proposal_divergence = Some(d_q.value);
    if d_pi.value < d_q.value {
        state.proposal = state.policy.frozen_copy();
        state.proposal_updates += 1;
        report.replaced = true;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<F: Real> {
    pub policy: TabularArModel<F>,
    pub history: Vec<MetricsRecord<F>>,
    pub iterations: Vec<IterationReport<F>>,
    pub proposal_updates: usize,
    pub samples_drawn: usize,
}

/// Runs `config.iterations` iterations from `q = π = a`, snapshotting metrics
/// at iteration 0 and every `eval_every` iterations after it.
pub fn train<F: Real>(
    base: &TabularArModel<F>,
    ebm: &Ebm<F>,
    config: &DpgConfig<F>,
    evaluator: Option<&Evaluator<'_, F>>,
) -> Result<TrainOutcome<F>> {
    let mut state = TrainState::new(base, ebm, config)?;
    let mut reports = Vec::with_capacity(config.iterations);
    let snapshot = |state: &mut TrainState<F>, step: usize| -> Result<()> {
        if let Some(ev) = evaluator {
            let rec = ev.evaluate("gdc", step, state.samples_drawn, &state.policy, state.zma.value)?;
            state.history.push(rec);
        }
        Ok(())
    };
    snapshot(&mut state, 0)?;
    for it in 1..=config.iterations {
        reports.push(dpg_iteration(&mut state, ebm, config)?);
        if it % config.eval_every == 0 {
            snapshot(&mut state, it)?;
        }
    }
    Ok(TrainOutcome {
        policy: state.policy,
        history: state.history,
        iterations: reports,
        proposal_updates: state.proposal_updates,
        samples_drawn: state.samples_drawn,
    })
}

/// Exact expected update direction `Σ_x P(x) ∇log π(x)` by enumeration.
pub fn exact_expected_update<F: Real>(
    policy: &TabularArModel<F>,
    ebm: &Ebm<F>,
    universe: &Universe,
) -> Result<Gradient<F>> {
    let mut acc = Gradient::new();
    for x in universe.sequences() {
        let p = ebm.score(x);
        if p > F::zero() {
            acc.add_scaled(&policy.grad_log_prob(x)?, p);
        }
    }
    Ok(acc)
}
