//! Unnormalized target `P(x)`: the base model times a constraint factor.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::ExactDistribution;
use crate::features::ConstraintSet;
use crate::lm::{SgdConfig, TabularArModel};
use crate::real::{log_sum_exp, Real};
use crate::seqspace::{Sequence, Universe};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EbmMode {
    /// `a(x) exp(λ·φ(x))`
    Exponential,
    /// `a(x) Π b_i(x)` with binary pointwise features.
    Pointwise,
}

#[derive(Debug, Clone)]
pub struct Ebm<F: Real> {
    base: TabularArModel<F>,
    constraints: ConstraintSet<F>,
    lambda: Vec<F>,
    mode: EbmMode,
    /// Added to every log score; scaling `P` by `c` adds `ln c`.
    log_scale: F,
}

impl<F: Real> Ebm<F> {
    /// Exponential-family EBM. Each coefficient is clamped to `[-clamp, clamp]`.
    pub fn exponential(
        base: TabularArModel<F>,
        constraints: ConstraintSet<F>,
        lambda: Vec<F>,
        clamp: F,
    ) -> Result<Self> {
        if lambda.len() != constraints.len() {
            return Err(Error::DimensionMismatch { expected: constraints.len(), got: lambda.len() });
        }
        if lambda.iter().any(|l| l.is_nan()) {
            return Err(Error::InvalidConfig("lambda contains NaN".into()));
        }
        let lambda = lambda.into_iter().map(|l| l.max(-clamp).min(clamp)).collect();
        Ok(Self { base, constraints, lambda, mode: EbmMode::Exponential, log_scale: F::zero() })
    }

    pub fn base(&self) -> &TabularArModel<F> {
        &self.base
    }

    pub fn constraints(&self) -> &ConstraintSet<F> {
        &self.constraints
    }

    pub fn lambda(&self) -> &[F] {
        &self.lambda
    }

    pub fn mode(&self) -> EbmMode {
        self.mode
    }

    /// Same target multiplied by a positive constant.
    pub fn scaled(&self, factor: F) -> Result<Self> {
        if !(factor > F::zero()) || !factor.is_finite() {
            return Err(Error::InvalidConfig(format!("scale factor must be positive, got {factor}")));
        }
        let mut out = self.clone();
        out.log_scale = out.log_scale + factor.ln();
        Ok(out)
    }

    pub fn log_score(&self, x: &Sequence) -> F {
        let la = self.base.log_prob(x);
        if la == F::neg_infinity() {
            return la;
        }
        let phi = self.constraints.evaluate_vector(x);
        match self.mode {
            EbmMode::Exponential => la + self.log_scale + self.lambda.iter().zip(&phi).map(|(&l, &f)| l * f).sum::<F>(),
            EbmMode::Pointwise => {
                if phi.iter().all(|&f| f == F::one()) {
                    la + self.log_scale
                } else {
                    F::neg_infinity()
                }
            }
        }
    }

    pub fn score(&self, x: &Sequence) -> F {
        self.log_score(x).exp()
    }

    /// Exact partition function and normalized distribution over `universe`.
    pub fn exact_normalize(&self, universe: &Universe) -> Result<(F, ExactDistribution<F>)> {
        let logs: Vec<F> = universe.sequences().iter().map(|x| self.log_score(x)).collect();
        let (dist, log_z) = ExactDistribution::from_log_weights(universe.space(), &logs)?;
        Ok((log_z.exp(), dist))
    }
}

/// `P(x) = a(x) Π b_i(x)` for a set made only of pointwise constraints.
pub fn build_pointwise<F: Real>(base: TabularArModel<F>, constraints: ConstraintSet<F>) -> Result<Ebm<F>> {
    if !constraints.has_pointwise() {
        return Err(Error::NoPointwiseConstraints);
    }
    if !constraints.all_pointwise() {
        return Err(Error::MixedConstraints);
    }
    let lambda = vec![F::zero(); constraints.len()];
    Ok(Ebm { base, constraints, lambda, mode: EbmMode::Pointwise, log_scale: F::zero() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig<F> {
    /// `batch_size` is the number of samples drawn once from the base;
    /// `steps` caps the number of gradient steps.
    pub sgd: SgdConfig<F>,
    /// Stop once the squared moment error falls below this.
    pub tolerance: F,
    pub lambda_clamp: F,
}

impl<F: Real> Default for FitConfig<F> {
    fn default() -> Self {
        Self {
            sgd: SgdConfig { learning_rate: F::of(0.5), steps: 10_000, batch_size: 10_000, seed: 0 },
            tolerance: F::of(0.01),
            lambda_clamp: F::of(20.0),
        }
    }
}

impl<F: Real> FitConfig<F> {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        if !(self.tolerance > F::zero()) || !(self.lambda_clamp > F::zero()) {
            return Err(Error::InvalidConfig("tolerance and lambda_clamp must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport<F> {
    pub ids: Vec<String>,
    pub targets: Vec<F>,
    pub lambda: Vec<F>,
    pub achieved_moments: Vec<F>,
    pub objective: F,
    pub steps_used: usize,
    pub converged: bool,
    pub mode: EbmMode,
}

/// Self-normalized importance-sampling moment matcher over a fixed sample.
///
/// Identical feature vectors are merged with their multiplicity, which leaves
/// every estimate unchanged.
#[derive(Debug, Clone)]
pub struct SnisObjective<F> {
    phis: Vec<Vec<F>>,
    log_counts: Vec<F>,
    targets: Vec<F>,
}

impl<F: Real> SnisObjective<F> {
    pub fn new(phis: &[Vec<F>], targets: Vec<F>) -> Result<Self> {
        if phis.is_empty() {
            return Err(Error::TooFewSamples { needed: 1, got: 0 });
        }
        let mut merged: BTreeMap<Vec<u64>, (Vec<F>, usize)> = BTreeMap::new();
        for phi in phis {
            if phi.len() != targets.len() {
                return Err(Error::DimensionMismatch { expected: targets.len(), got: phi.len() });
            }
            let key = phi.iter().map(|v| v.as_f64().to_bits()).collect();
            merged.entry(key).or_insert_with(|| (phi.clone(), 0)).1 += 1;
        }
        let (phis, log_counts) = merged.into_values().map(|(p, c)| (p, F::of_usize(c).ln())).unzip();
        Ok(Self { phis, log_counts, targets })
    }

    fn weights(&self, lambda: &[F]) -> Result<Vec<F>> {
        let lw: Vec<F> = self
            .phis
            .iter()
            .zip(&self.log_counts)
            .map(|(phi, &lc)| lc + lambda.iter().zip(phi).map(|(&l, &f)| l * f).sum::<F>())
            .collect();
        let lz = log_sum_exp(lw.iter().copied());
        if !lz.is_finite() {
            return Err(Error::DegenerateWeights(lz.as_f64()));
        }
        Ok(lw.into_iter().map(|l| (l - lz).exp()).collect())
    }

    /// SNIS estimate of `E_λ[φ]`.
    pub fn moments(&self, lambda: &[F]) -> Result<Vec<F>> {
        let w = self.weights(lambda)?;
        let mut mu = vec![F::zero(); self.targets.len()];
        for (wi, phi) in w.iter().zip(&self.phis) {
            for (m, &f) in mu.iter_mut().zip(phi) {
                *m = *m + *wi * f;
            }
        }
        Ok(mu)
    }

    /// `||μ̄ - μ̂(λ)||²`
    pub fn value(&self, lambda: &[F]) -> Result<F> {
        let mu = self.moments(lambda)?;
        Ok(mu.iter().zip(&self.targets).map(|(&m, &t)| (t - m) * (t - m)).sum())
    }

    /// Objective value, moments and analytic gradient
    /// `-2 Σ_j (μ̄_j - μ̂_j) Cov_w(φ_j, φ_k)`.
    pub fn evaluate(&self, lambda: &[F]) -> Result<(F, Vec<F>, Vec<F>)> {
        let w = self.weights(lambda)?;
        let d = self.targets.len();
        let mut mu = vec![F::zero(); d];
        for (wi, phi) in w.iter().zip(&self.phis) {
            for (m, &f) in mu.iter_mut().zip(phi) {
                *m = *m + *wi * f;
            }
        }
        let resid: Vec<F> = self.targets.iter().zip(&mu).map(|(&t, &m)| t - m).collect();
        let mut grad = vec![F::zero(); d];
        for (wi, phi) in w.iter().zip(&self.phis) {
            // Σ_j r_j (φ_j - μ_j), then times (φ_k - μ_k).
            let proj: F = resid.iter().zip(phi).zip(&mu).map(|((&r, &f), &m)| r * (f - m)).sum();
            for ((g, &f), &m) in grad.iter_mut().zip(phi).zip(&mu) {
                *g = *g - F::of(2.0) * *wi * proj * (f - m);
            }
        }
        let value = resid.iter().map(|&r| r * r).sum();
        Ok((value, mu, grad))
    }
}

/// Fits `λ` so SNIS moments under `a(x) exp(λ·φ(x))` match the targets.
///
/// Samples are drawn once from the base. Pointwise members of a hybrid set
/// keep their coefficient pinned at `+lambda_clamp`, the finite stand-in for
/// restricting the support.
pub fn fit_lambda<F: Real>(
    base: &TabularArModel<F>,
    constraints: &ConstraintSet<F>,
    config: &FitConfig<F>,
    warm_start: Option<&[F]>,
) -> Result<(FitReport<F>, Ebm<F>)> {
    config.validate()?;
    if constraints.is_empty() {
        return Err(Error::NothingToFit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.sgd.seed);
    let samples = base.sample(&mut rng, config.sgd.batch_size);
    let phis: Vec<Vec<F>> = samples.iter().map(|x| constraints.evaluate_vector(x)).collect();
    let targets = constraints.targets();
    for (i, c) in constraints.constraints().iter().enumerate() {
        let (lo, hi) = phis.iter().fold((F::infinity(), F::neg_infinity()), |(lo, hi), p| (lo.min(p[i]), hi.max(p[i])));
        let t = targets[i];
        let reachable = (lo < t && t < hi) || (lo == t && t == hi) || (c.pointwise && hi == t);
        if !reachable {
            return Err(Error::UnattainableTarget {
                id: c.feature.id.clone(),
                target: t.as_f64(),
                lo: lo.as_f64(),
                hi: hi.as_f64(),
            });
        }
    }
    let objective = SnisObjective::new(&phis, targets.clone())?;
    let clamp = config.lambda_clamp;
    let mut lambda = match warm_start {
        Some(w) if w.len() != targets.len() => {
            return Err(Error::DimensionMismatch { expected: targets.len(), got: w.len() })
        }
        Some(w) => w.iter().map(|l| l.max(-clamp).min(clamp)).collect(),
        None => vec![F::zero(); targets.len()],
    };
    let pinned: Vec<bool> = constraints.constraints().iter().map(|c| c.pointwise).collect();
    for (l, &p) in lambda.iter_mut().zip(&pinned) {
        if p {
            *l = clamp;
        }
    }
    let lr = config.sgd.learning_rate;
    let mut steps_used = 0;
    let (mut value, mut mu, mut grad) = objective.evaluate(&lambda)?;
    while value >= config.tolerance && steps_used < config.sgd.steps && pinned.iter().any(|p| !p) {
        for ((l, g), &p) in lambda.iter_mut().zip(&grad).zip(&pinned) {
            if !p {
                *l = (*l - lr * *g).max(-clamp).min(clamp);
            }
        }
        steps_used += 1;
        (value, mu, grad) = objective.evaluate(&lambda)?;
    }
    let report = FitReport {
        ids: constraints.ids().into_iter().map(String::from).collect(),
        targets,
        lambda: lambda.clone(),
        achieved_moments: mu,
        objective: value,
        steps_used,
        converged: value < config.tolerance,
        mode: EbmMode::Exponential,
    };
    let ebm = Ebm::exponential(base.clone(), constraints.clone(), lambda, clamp)?;
    Ok((report, ebm))
}

/// Builds the EBM for any constraint set: pointwise-only sets use the product
/// form, everything else goes through [`fit_lambda`].
pub fn build_ebm<F: Real>(
    base: &TabularArModel<F>,
    constraints: &ConstraintSet<F>,
    config: &FitConfig<F>,
) -> Result<(FitReport<F>, Ebm<F>)> {
    if !constraints.is_empty() && constraints.all_pointwise() {
        let ebm = build_pointwise(base.clone(), constraints.clone())?;
        let report = FitReport {
            ids: constraints.ids().into_iter().map(String::from).collect(),
            targets: constraints.targets(),
            lambda: vec![F::zero(); constraints.len()],
            achieved_moments: constraints.targets(),
            objective: F::zero(),
            steps_used: 0,
            converged: true,
            mode: EbmMode::Pointwise,
        };
        return Ok((report, ebm));
    }
    fit_lambda(base, constraints, config, None)
}
