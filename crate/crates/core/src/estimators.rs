//! Importance-sampling estimators of the partition function and divergences.

use serde::{Deserialize, Serialize};

use crate::ebm::Ebm;
use crate::error::{Error, Result};
use crate::exact::ExactDistribution;
use crate::lm::TabularArModel;
use crate::real::{mean_and_se, Real};
use crate::seqspace::Sequence;

/// Anything that assigns a (possibly unnormalized) log density to a sequence.
pub trait LogDensity<F: Real> {
    fn log_density(&self, x: &Sequence) -> F;

    fn log_densities(&self, xs: &[Sequence]) -> Vec<F> {
        xs.iter().map(|x| self.log_density(x)).collect()
    }
}

impl<F: Real> LogDensity<F> for TabularArModel<F> {
    fn log_density(&self, x: &Sequence) -> F {
        self.log_prob(x)
    }
}

impl<F: Real> LogDensity<F> for Ebm<F> {
    fn log_density(&self, x: &Sequence) -> F {
        self.log_score(x)
    }
}

impl<F: Real> LogDensity<F> for ExactDistribution<F> {
    fn log_density(&self, x: &Sequence) -> F {
        self.log_prob(x)
    }
}

/// Point estimate with the standard error of the sample mean it is built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate<F> {
    pub value: F,
    pub standard_error: F,
    pub samples: usize,
}

/// Running average of per-iteration partition function estimates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ZMovingAverage<F> {
    pub value: F,
    pub updates: usize,
}

impl<F: Real> ZMovingAverage<F> {
    pub fn new() -> Self {
        Self { value: F::zero(), updates: 0 }
    }

    /// `Z ← (i Z + Ẑ) / (i + 1)`
    pub fn fold(&mut self, z_hat: F) -> F {
        let i = F::of_usize(self.updates);
        self.value = (i * self.value + z_hat) / (i + F::one());
        self.updates += 1;
        self.value
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(())
}

fn support_check<F: Real>(log_target: F, log_proposal: F) -> Result<()> {
    if log_target > F::neg_infinity() && log_proposal == F::neg_infinity() {
        return Err(Error::SupportViolation("target has mass where the proposal has none".into()));
    }
    Ok(())
}

/// Importance ratios `P(x)/q(x)` from log values.
pub fn importance_ratios<F: Real>(log_target: &[F], log_proposal: &[F]) -> Result<Vec<F>> {
    check_lengths(log_target.len(), log_proposal.len())?;
    log_target
        .iter()
        .zip(log_proposal)
        .map(|(&lp, &lq)| {
            support_check(lp, lq)?;
            Ok(if lp == F::neg_infinity() { F::zero() } else { (lp - lq).exp() })
        })
        .collect()
}

pub fn z_from_logs<F: Real>(log_target: &[F], log_proposal: &[F]) -> Result<Estimate<F>> {
    let ratios = importance_ratios(log_target, log_proposal)?;
    let (value, standard_error) = mean_and_se(&ratios);
    Ok(Estimate { value, standard_error, samples: ratios.len() })
}

/// `Ẑ = mean P(x)/q(x)` over samples drawn from `q`.
pub fn estimate_z<F: Real>(
    target: &impl LogDensity<F>,
    proposal: &impl LogDensity<F>,
    samples: &[Sequence],
) -> Result<Estimate<F>> {
    z_from_logs(&target.log_densities(samples), &proposal.log_densities(samples))
}

fn positive_z<F: Real>(z: F) -> Result<()> {
    if !(z > F::zero()) || !z.is_finite() {
        return Err(Error::NonpositiveZ(z.as_f64()));
    }
    Ok(())
}

/// `KL(p, π) ≈ -log Z + (1/Z) mean[(P/q) log(P/π)]` with samples from `q`.
pub fn kl_p_from_logs<F: Real>(log_target: &[F], log_policy: &[F], log_proposal: &[F], z: F) -> Result<Estimate<F>> {
    positive_z(z)?;
    check_lengths(log_target.len(), log_policy.len())?;
    check_lengths(log_target.len(), log_proposal.len())?;
    let mut terms = Vec::with_capacity(log_target.len());
    for ((&lp, &lpi), &lq) in log_target.iter().zip(log_policy).zip(log_proposal) {
        support_check(lp, lq)?;
        support_check(lp, lpi)?;
        terms.push(if lp == F::neg_infinity() { F::zero() } else { (lp - lq).exp() * (lp - lpi) });
    }
    let (mean, se) = mean_and_se(&terms);
    Ok(Estimate { value: -z.ln() + mean / z, standard_error: se / z, samples: terms.len() })
}

pub fn estimate_kl_p_from<F: Real>(
    target: &impl LogDensity<F>,
    policy: &impl LogDensity<F>,
    proposal: &impl LogDensity<F>,
    samples: &[Sequence],
    z: F,
) -> Result<Estimate<F>> {
    kl_p_from_logs(&target.log_densities(samples), &policy.log_densities(samples), &proposal.log_densities(samples), z)
}

/// `TVD(p, π) ≈ ½ mean |π/q - P/(Z q)|` with samples from `q`.
pub fn tvd_from_logs<F: Real>(log_target: &[F], log_policy: &[F], log_proposal: &[F], z: F) -> Result<Estimate<F>> {
    positive_z(z)?;
    check_lengths(log_target.len(), log_policy.len())?;
    check_lengths(log_target.len(), log_proposal.len())?;
    let half = F::of(0.5);
    let mut terms = Vec::with_capacity(log_target.len());
    for ((&lp, &lpi), &lq) in log_target.iter().zip(log_policy).zip(log_proposal) {
        support_check(lp, lq)?;
        support_check(lpi, lq)?;
        let r_pi = if lpi == F::neg_infinity() { F::zero() } else { (lpi - lq).exp() };
        let r_p = if lp == F::neg_infinity() { F::zero() } else { (lp - lq).exp() / z };
        terms.push(half * (r_pi - r_p).abs());
    }
    let (value, se) = mean_and_se(&terms);
    Ok(Estimate { value, standard_error: se, samples: terms.len() })
}

pub fn estimate_tvd<F: Real>(
    target: &impl LogDensity<F>,
    policy: &impl LogDensity<F>,
    proposal: &impl LogDensity<F>,
    samples: &[Sequence],
    z: F,
) -> Result<Estimate<F>> {
    tvd_from_logs(&target.log_densities(samples), &policy.log_densities(samples), &proposal.log_densities(samples), z)
}

/// `KL(π, a) ≈ mean log(π/a)` with samples from `π`.
pub fn kl_between_from_logs<F: Real>(log_policy: &[F], log_reference: &[F]) -> Result<Estimate<F>> {
    check_lengths(log_policy.len(), log_reference.len())?;
    let terms = log_policy
        .iter()
        .zip(log_reference)
        .map(|(&lp, &la)| {
            support_check(lp, la)?;
            Ok(lp - la)
        })
        .collect::<Result<Vec<F>>>()?;
    let (value, standard_error) = mean_and_se(&terms);
    Ok(Estimate { value, standard_error, samples: terms.len() })
}

pub fn estimate_kl_between_models<F: Real>(
    policy: &TabularArModel<F>,
    reference: &TabularArModel<F>,
    samples: &[Sequence],
) -> Result<Estimate<F>> {
    kl_between_from_logs(&policy.log_densities(samples), &reference.log_densities(samples))
}

/// `Σ p log(p/q)` over aligned probability vectors, with `0 log 0 = 0`.
pub fn exact_kl<F: Real>(p: &[F], q: &[F]) -> Result<F> {
    check_lengths(p.len(), q.len())?;
    let mut total = F::zero();
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > F::zero() {
            if !(qi > F::zero()) {
                return Ok(F::infinity());
            }
            total = total + pi * (pi.ln() - qi.ln());
        }
    }
    Ok(total.max(F::zero()))
}

pub fn exact_tvd<F: Real>(p: &[F], q: &[F]) -> Result<F> {
    check_lengths(p.len(), q.len())?;
    Ok(F::of(0.5) * p.iter().zip(q).map(|(&a, &b)| (a - b).abs()).sum::<F>())
}
