//! Reward-maximizing comparison trainers and rejection sampling + MLE.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dpg::{pilot_z, TrainOutcome};
use crate::ebm::Ebm;
use crate::error::{Error, Result};
use crate::features::ConstraintSet;
use crate::lm::{Gradient, TabularArModel};
use crate::metrics::Evaluator;
use crate::real::Real;
use crate::seqspace::{Sequence, Universe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BaselineKind {
    #[serde(rename = "reinforce-phi")]
    ReinforcePhi,
    #[serde(rename = "reinforce-P")]
    ReinforceP,
    #[serde(rename = "kl-penalized")]
    KlPenalized,
    #[serde(rename = "rejection-mle")]
    RejectionMle,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::ReinforcePhi => "reinforce-phi",
            BaselineKind::ReinforceP => "reinforce-P",
            BaselineKind::KlPenalized => "kl-penalized",
            BaselineKind::RejectionMle => "rejection-mle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "F: Real")]
pub struct BaselineConfig<F> {
    pub kind: BaselineKind,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: F,
    #[serde(default = "defaults::iterations")]
    pub iterations: usize,
    #[serde(default = "defaults::steps")]
    pub steps_per_iteration: usize,
    /// KL penalty weight; required for `kl-penalized` and rejected otherwise.
    #[serde(default)]
    pub beta: Option<F>,
    #[serde(default)]
    pub beta_adaptive: bool,
    #[serde(default)]
    pub kl_target: Option<F>,
    /// Multiplicative controller step: β is scaled by `1 + beta_rate`.
    #[serde(default = "defaults::beta_rate")]
    pub beta_rate: F,
    #[serde(default = "defaults::eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub policy_order: Option<usize>,
    /// `reinforce-P` only: divide the learning rate by a pilot Z estimate.
    #[serde(default = "defaults::yes")]
    pub normalize_by_pilot_z: bool,
    #[serde(default = "defaults::pilot")]
    pub pilot_samples: usize,
    /// `rejection-mle` only: order and add-k smoothing of the refit model.
    #[serde(default)]
    pub rejection_order: Option<usize>,
    #[serde(default = "defaults::smoothing")]
    pub smoothing: F,
}

mod defaults {
    use crate::real::Real;

    pub fn learning_rate<F: Real>() -> F {
        F::of(0.1)
    }
    pub fn iterations() -> usize {
        200
    }
    pub fn steps() -> usize {
        1024
    }
    pub fn beta_rate<F: Real>() -> F {
        F::of(0.1)
    }
    pub fn eval_every() -> usize {
        10
    }
    pub fn yes() -> bool {
        true
    }
    pub fn pilot() -> usize {
        10_000
    }
    pub fn smoothing<F: Real>() -> F {
        F::of(0.1)
    }
}

impl<F: Real> BaselineConfig<F> {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            learning_rate: defaults::learning_rate(),
            iterations: defaults::iterations(),
            steps_per_iteration: defaults::steps(),
            beta: if kind == BaselineKind::KlPenalized { Some(F::of(0.1)) } else { None },
            beta_adaptive: false,
            kl_target: None,
            beta_rate: defaults::beta_rate(),
            eval_every: defaults::eval_every(),
            seed: 0,
            policy_order: None,
            normalize_by_pilot_z: true,
            pilot_samples: defaults::pilot(),
            rejection_order: None,
            smoothing: defaults::smoothing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.steps_per_iteration == 0 || self.eval_every == 0 {
            return bad("steps_per_iteration and eval_every must be >= 1");
        }
        if !(self.learning_rate > F::zero()) {
            return bad("learning_rate must be > 0");
        }
        match (self.kind, self.beta) {
            (BaselineKind::KlPenalized, None) => return bad("beta is required for kl-penalized"),
            (BaselineKind::KlPenalized, Some(b)) if !(b >= F::zero()) || !b.is_finite() => {
                return bad("beta must be >= 0")
            }
            (k, Some(_)) if k != BaselineKind::KlPenalized => return bad("beta is only valid for kl-penalized"),
            _ => {}
        }
        if self.beta_adaptive && self.kl_target.is_none() {
            return bad("beta_adaptive needs kl_target");
        }
        if !(self.beta_rate > F::zero()) {
            return bad("beta_rate must be > 0");
        }
        if self.smoothing < F::zero() {
            return bad("smoothing must be >= 0");
        }
        Ok(())
    }
}

/// Reward `φ(x)` used by the reward-maximizing baselines: the product of the
/// pointwise features, or the single constraint's feature.
pub fn phi_reward<F: Real>(constraints: &ConstraintSet<F>) -> Result<impl Fn(&Sequence) -> F + '_> {
    if !(constraints.all_pointwise() || constraints.len() == 1) {
        return Err(Error::InvalidConfig("reward baselines need pointwise constraints or a single constraint".into()));
    }
    Ok(move |x: &Sequence| constraints.evaluate_vector(x).into_iter().fold(F::one(), |acc, v| acc * v))
}

fn reinforce_on_rewards<F: Real>(
    policy: &mut TabularArModel<F>,
    samples: &[Sequence],
    rewards: &[F],
    lr: F,
) -> Result<()> {
    let mut acc = Gradient::new();
    for (x, &r) in samples.iter().zip(rewards) {
        if r != F::zero() {
            acc.add_scaled(&policy.grad_log_prob(x)?, r);
        }
    }
    policy.apply_update(&acc, lr / F::of_usize(samples.len().max(1)));
    Ok(())
}

/// `θ += α mean_k r(x_k) ∇log π(x_k)` over samples drawn from the policy.
pub fn reinforce_step<F: Real>(
    policy: &mut TabularArModel<F>,
    reward: impl Fn(&Sequence) -> F,
    samples: &[Sequence],
    learning_rate: F,
) -> Result<()> {
    let rewards: Vec<F> = samples.iter().map(reward).collect();
    reinforce_on_rewards(policy, samples, &rewards, learning_rate)
}

/// [`reinforce_step`] with reward `P(x)`.
pub fn reinforce_p_step<F: Real>(
    policy: &mut TabularArModel<F>,
    ebm: &Ebm<F>,
    samples: &[Sequence],
    learning_rate: F,
) -> Result<()> {
    reinforce_step(policy, |x| ebm.score(x), samples, learning_rate)
}

/// Proportional controller on β toward a target `KL(π, a)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaController<F> {
    pub kl_target: F,
    pub rate: F,
}

/// Policy-gradient step on `φ(x) - β log(π(x)/a(x))`. Returns the next β and
/// the batch estimate of `KL(π, a)` taken before the update.
pub fn kl_penalized_step<F: Real>(
    policy: &mut TabularArModel<F>,
    base: &TabularArModel<F>,
    reward: impl Fn(&Sequence) -> F,
    beta: F,
    samples: &[Sequence],
    learning_rate: F,
    controller: Option<BetaController<F>>,
) -> Result<(F, F)> {
    let log_ratio: Vec<F> = samples.iter().map(|x| policy.log_prob(x) - base.log_prob(x)).collect();
    if log_ratio.iter().any(|r| r.is_nan() || *r == F::infinity()) {
        return Err(Error::SupportViolation("policy has mass where the base has none".into()));
    }
    let rewards: Vec<F> = samples.iter().zip(&log_ratio).map(|(x, &lr)| reward(x) - beta * lr).collect();
    reinforce_on_rewards(policy, samples, &rewards, learning_rate)?;
    let kl = log_ratio.iter().copied().sum::<F>() / F::of_usize(samples.len().max(1));
    let next = match controller {
        Some(c) if kl > c.kl_target => beta * (F::one() + c.rate),
        Some(c) => beta / (F::one() + c.rate),
        None => beta,
    };
    Ok((next, kl))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceStats {
    pub drawn: usize,
    pub accepted: usize,
    pub rate: f64,
}

/// Samples `budget` sequences from the base, keeps those satisfying the
/// predicate and fits a fresh k-gram model on them.
pub fn rejection_mle<F: Real, R: Rng + ?Sized>(
    base: &TabularArModel<F>,
    predicate: impl Fn(&Sequence) -> bool,
    budget: usize,
    order: usize,
    smoothing: F,
    rng: &mut R,
) -> Result<(TabularArModel<F>, AcceptanceStats)> {
    let kept: Vec<Sequence> = base.sample(rng, budget).into_iter().filter(|x| predicate(x)).collect();
    if kept.is_empty() {
        return Err(Error::NoAcceptedSamples { drawn: budget });
    }
    let stats = AcceptanceStats { drawn: budget, accepted: kept.len(), rate: kept.len() as f64 / budget as f64 };
    let model = TabularArModel::mle_fit(base.space(), &kept, order, smoothing)?;
    Ok((model, stats))
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome<F: Real> {
    pub outcome: TrainOutcome<F>,
    /// β after each iteration (`kl-penalized` only).
    pub beta_trace: Vec<F>,
    pub acceptance: Option<AcceptanceStats>,
}

pub fn train_baseline<F: Real>(
    base: &TabularArModel<F>,
    ebm: &Ebm<F>,
    config: &BaselineConfig<F>,
    evaluator: Option<&Evaluator<'_, F>>,
) -> Result<BaselineOutcome<F>> {
    config.validate()?;
    let name = config.kind.name();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut samples_drawn = 0;
    let snapshot = |history: &mut Vec<_>, step: usize, drawn: usize, policy: &TabularArModel<F>| -> Result<()> {
        if let Some(ev) = evaluator {
            history.push(ev.evaluate(name, step, drawn, policy, F::zero())?);
        }
        Ok(())
    };

    if config.kind == BaselineKind::RejectionMle {
        snapshot(&mut history, 0, 0, base)?;
        let predicate = phi_reward(ebm.constraints())?;
        let budget = config.iterations * config.steps_per_iteration;
        let order = config.rejection_order.unwrap_or(base.order());
        let (policy, stats) =
            rejection_mle(base, |x| predicate(x) == F::one(), budget, order, config.smoothing, &mut rng)?;
        snapshot(&mut history, config.iterations, budget, &policy)?;
        let outcome =
            TrainOutcome { policy, history, iterations: Vec::new(), proposal_updates: 0, samples_drawn: budget };
        return Ok(BaselineOutcome { outcome, beta_trace: Vec::new(), acceptance: Some(stats) });
    }

    let order = config.policy_order.unwrap_or(base.space().lmax() + 1).max(base.order());
    let mut policy = base.lift(order)?.trainable_copy()?;
    let mut lr = config.learning_rate;
    if config.kind == BaselineKind::ReinforceP && config.normalize_by_pilot_z {
        lr = lr / pilot_z(ebm, config.pilot_samples, config.seed)?;
        samples_drawn += config.pilot_samples;
    }
    let reward = phi_reward(ebm.constraints());
    let mut beta = config.beta.unwrap_or(F::zero());
    let controller = match (config.beta_adaptive, config.kl_target) {
        (true, Some(t)) => Some(BetaController { kl_target: t, rate: config.beta_rate }),
        _ => None,
    };
    let mut beta_trace = Vec::new();
    snapshot(&mut history, 0, samples_drawn, &policy)?;
    for it in 1..=config.iterations {
        let xs = policy.sample(&mut rng, config.steps_per_iteration);
        samples_drawn += xs.len();
        match config.kind {
            BaselineKind::ReinforcePhi => reinforce_step(&mut policy, reward.as_ref().map_err(clone_err)?, &xs, lr)?,
            BaselineKind::ReinforceP => reinforce_p_step(&mut policy, ebm, &xs, lr)?,
            BaselineKind::KlPenalized => {
                let r = reward.as_ref().map_err(clone_err)?;
                (beta, _) = kl_penalized_step(&mut policy, base, r, beta, &xs, lr, controller)?;
                beta_trace.push(beta);
            }
            BaselineKind::RejectionMle => unreachable!(),
        }
        if it % config.eval_every == 0 {
            snapshot(&mut history, it, samples_drawn, &policy)?;
        }
    }
    let outcome = TrainOutcome { policy, history, iterations: Vec::new(), proposal_updates: 0, samples_drawn };
    Ok(BaselineOutcome { outcome, beta_trace, acceptance: None })
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidConfig(e.to_string())
}

/// Exact expected REINFORCE direction `Σ_x π(x) r(x) ∇log π(x)`.
pub fn exact_expected_reinforce<F: Real>(
    policy: &TabularArModel<F>,
    reward: impl Fn(&Sequence) -> F,
    universe: &Universe,
) -> Result<Gradient<F>> {
    let mut acc = Gradient::new();
    for x in universe.sequences() {
        let w = policy.prob(x) * reward(x);
        if w != F::zero() {
            acc.add_scaled(&policy.grad_log_prob(x)?, w);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ebm::build_pointwise;
    use crate::estimators::exact_kl;
    use crate::exact::ExactDistribution;
    use crate::features::{ConstraintSpec, Feature};
    use crate::seqspace::{SequenceSpace, Vocabulary};

    fn space() -> SequenceSpace {
        SequenceSpace::new(Vocabulary::new(&["a", "b", "c"]).unwrap(), 3).unwrap()
    }

    fn model(s: &SequenceSpace, order: usize, seed: u64) -> TabularArModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = TabularArModel::<f64>::uniform(s, order).unwrap().logits().len();
        TabularArModel::from_logits(s, order, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(), true).unwrap()
    }

    fn presence(s: &SequenceSpace, tok: &str) -> ConstraintSet<f64> {
        ConstraintSet::new(vec![
            ConstraintSpec::pointwise(Feature::token_presence(tok, s.vocab(), tok).unwrap()).unwrap()
        ])
        .unwrap()
    }

    fn kl_to_base(pi: &TabularArModel<f64>, a: &TabularArModel<f64>) -> f64 {
        let uni = Universe::new(pi.space()).unwrap();
        exact_kl(ExactDistribution::of_model(pi, &uni).probs(), ExactDistribution::of_model(a, &uni).probs()).unwrap()
    }

    #[test]
    fn zero_and_constant_rewards() {
        let s = space();
        let mut pi = model(&s, 4, 1);
        let before = pi.clone();
        let xs = pi.sample(&mut ChaCha8Rng::seed_from_u64(2), 50);
        reinforce_step(&mut pi, |_| 0.0, &xs, 1.0).unwrap();
        assert_eq!(pi, before);
        let uni = Universe::new(&s).unwrap();
        let g = exact_expected_reinforce(&pi, |_| 3.0, &uni).unwrap();
        assert!(g.entries.values().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_beta_is_plain_reinforce() {
        let s = space();
        let a = model(&s, 2, 3);
        let set = presence(&s, "a");
        let r = phi_reward(&set).unwrap();
        let mut x = a.lift(4).unwrap();
        let mut y = x.clone();
        let mut rng_x = ChaCha8Rng::seed_from_u64(4);
        let mut rng_y = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let xs = x.sample(&mut rng_x, 64);
            reinforce_step(&mut x, &r, &xs, 0.5).unwrap();
            let ys = y.sample(&mut rng_y, 64);
            kl_penalized_step(&mut y, &a, &r, 0.0, &ys, 0.5, None).unwrap();
        }
        assert_eq!(x.logits(), y.logits());
    }

    #[test]
    fn huge_beta_keeps_the_base() {
        let s = space();
        let a = model(&s, 2, 5);
        let ebm = build_pointwise(a.clone(), presence(&s, "a")).unwrap();
        let mut config = BaselineConfig::new(BaselineKind::KlPenalized);
        config.beta = Some(1e6);
        config.learning_rate = 1e-7;
        config.iterations = 30;
        config.steps_per_iteration = 128;
        let out = train_baseline(&a, &ebm, &config, None).unwrap();
        assert!(kl_to_base(&out.outcome.policy, &a) < 1e-3);
    }

    #[test]
    fn beta_controller_moves_toward_target() {
        let s = space();
        let a = model(&s, 2, 6);
        let r = |_: &Sequence| 0.0;
        let mut pi = a.lift(4).unwrap();
        let xs = pi.sample(&mut ChaCha8Rng::seed_from_u64(7), 64);
        let c = BetaController { kl_target: 1.0, rate: 0.1 };
        let (beta, kl) = kl_penalized_step(&mut pi, &a, r, 2.0, &xs, 0.1, Some(c)).unwrap();
        assert!(kl.abs() < 1e-12);
        assert!((beta - 2.0 / 1.1).abs() < 1e-12);
    }

    #[test]
    fn rejection_rate_matches_enumeration() {
        let s = space();
        let a = model(&s, 2, 8);
        let uni = Universe::new(&s).unwrap();
        let r0: f64 = uni.sequences().iter().filter(|x| x.contains(0)).map(|x| a.prob(x)).sum();
        let n = 20_000;
        let (_, stats) = rejection_mle(&a, |x| x.contains(0), n, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert!((stats.rate - r0).abs() < 3.0 * (r0 * (1.0 - r0) / n as f64).sqrt());
        let (all, stats) = rejection_mle(&a, |_| true, 100, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(stats.rate, 1.0);
        assert!(all.is_trainable());
        assert!(matches!(
            rejection_mle(&a, |_| false, 10, 2, 0.1, &mut ChaCha8Rng::seed_from_u64(9)),
            Err(Error::NoAcceptedSamples { drawn: 10 })
        ));
    }

    #[test]
    fn unigram_refit_cannot_express_a_pattern() {
        let s = space();
        let a = model(&s, 2, 10);
        let pattern = |x: &Sequence| x.tokens().windows(2).any(|w| w == [0, 1]);
        let (m, _) = rejection_mle(&a, pattern, 20_000, 1, 0.0, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let uni = Universe::new(&s).unwrap();
        let sat: f64 = uni.sequences().iter().filter(|x| pattern(x)).map(|x| m.prob(x)).sum();
        assert!(sat < 0.9, "{sat}");
    }

    #[test]
    fn config_validation() {
        let mut c = BaselineConfig::<f64>::new(BaselineKind::ReinforcePhi);
        assert!(c.validate().is_ok());
        c.beta = Some(1.0);
        assert!(c.validate().is_err());
        let mut k = BaselineConfig::<f64>::new(BaselineKind::KlPenalized);
        k.beta = None;
        assert!(k.validate().is_err());
        k.beta = Some(0.5);
        k.beta_adaptive = true;
        assert!(k.validate().is_err());
        let parsed: BaselineConfig<f64> = serde_json::from_str(r#"{"kind": "reinforce-P"}"#).unwrap();
        assert_eq!(parsed.kind, BaselineKind::ReinforceP);
    }

    #[test]
    fn reinforce_p_concentrates() {
        let s = space();
        let a = model(&s, 2, 12);
        let ebm = build_pointwise(a.clone(), presence(&s, "a")).unwrap();
        let mut config = BaselineConfig::new(BaselineKind::ReinforceP);
        config.iterations = 100;
        config.steps_per_iteration = 256;
        // Rewards are P/Z, i.e. target probabilities, hence the large step.
        config.learning_rate = 50.0;
        let uni = Universe::new(&s).unwrap();
        let out = train_baseline(&a, &ebm, &config, None).unwrap();
        let h0 = ExactDistribution::of_model(&a, &uni).entropy();
        let h1 = ExactDistribution::of_model(&out.outcome.policy, &uni).entropy();
        assert!(h1 < 0.5 * h0, "{h1} vs {h0}");
    }
}
