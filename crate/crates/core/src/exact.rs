//! Exact distributions over an enumerated universe, used as ground truth.

use rand::Rng;

use crate::error::{Error, Result};
use crate::features::ConstraintSet;
use crate::lm::TabularArModel;
use crate::real::{log_sum_exp, Real};
use crate::seqspace::{Sequence, SequenceSpace, Universe};

/// Normalized distribution indexed by shortlex rank.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution<F> {
    space: SequenceSpace,
    probs: Vec<F>,
}

impl<F: Real> ExactDistribution<F> {
    /// Normalizes nonnegative weights. Errors with [`Error::EmptySupport`] on zero mass.
    pub fn from_weights(space: &SequenceSpace, weights: Vec<F>) -> Result<Self> {
        let z: F = weights.iter().copied().sum();
        if !(z > F::zero()) || !z.is_finite() {
            return Err(Error::EmptySupport);
        }
        Ok(Self { space: space.clone(), probs: weights.into_iter().map(|w| w / z).collect() })
    }

    /// Normalizes log-weights in log space; returns the distribution and `log Z`.
    pub fn from_log_weights(space: &SequenceSpace, log_weights: &[F]) -> Result<(Self, F)> {
        let log_z = log_sum_exp(log_weights.iter().copied());
        if log_z == F::neg_infinity() || log_z.is_nan() {
            return Err(Error::EmptySupport);
        }
        let probs = log_weights.iter().map(|&l| (l - log_z).exp()).collect();
        Ok((Self { space: space.clone(), probs }, log_z))
    }

    pub fn of_model(model: &TabularArModel<F>, universe: &Universe) -> Self {
        let probs = universe.sequences().iter().map(|x| model.prob(x)).collect();
        Self { space: universe.space().clone(), probs }
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn probs(&self) -> &[F] {
        &self.probs
    }

    pub fn prob(&self, x: &Sequence) -> F {
        self.probs[self.space.rank(x)]
    }

    pub fn log_prob(&self, x: &Sequence) -> F {
        self.prob(x).ln()
    }

    pub fn expectation(&self, universe: &Universe, f: impl Fn(&Sequence) -> F) -> F {
        universe
            .sequences()
            .iter()
            .zip(&self.probs)
            .map(|(x, &p)| if p > F::zero() { p * f(x) } else { F::zero() })
            .sum()
    }

    pub fn moments(&self, universe: &Universe, constraints: &ConstraintSet<F>) -> Vec<F> {
        constraints.constraints().iter().map(|c| self.expectation(universe, |x| c.feature.evaluate(x))).collect()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> F {
        -self.probs.iter().filter(|p| **p > F::zero()).map(|&p| p * p.ln()).sum::<F>()
    }

    /// Inverse-CDF sampling over the universe.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Sequence> {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = F::zero();
        for &p in &self.probs {
            acc = acc + p;
            cdf.push(acc);
        }
        let last = self.probs.iter().rposition(|p| *p > F::zero()).unwrap_or(0);
        (0..n)
            .map(|_| {
                let u = F::of(rng.gen::<f64>()) * acc;
                let i = cdf.partition_point(|c| *c <= u).min(last);
                self.space.unrank(i)
            })
            .collect()
    }
}

/// Result of an exact information projection.
#[derive(Debug, Clone)]
pub struct Projection<F> {
    pub dist: ExactDistribution<F>,
    /// Natural parameters; `±inf` for constraints met by restricting the support.
    pub lambda: Vec<F>,
    /// Residual `max_i |E[φ_i] - target_i|`.
    pub residual: F,
}

/// Exact I-projection of `reference` onto the moment manifold:
/// `argmin_c KL(c, reference)` subject to `E_c[φ_i] = target_i`.
///
/// Targets sitting on the boundary of a feature's range over the support are
/// met by restricting the support (the `1[x ∈ X_C]` factor); the rest are
/// solved by damped Newton iterations on the convex dual.
pub fn project<F: Real>(
    reference: &ExactDistribution<F>,
    universe: &Universe,
    constraints: &ConstraintSet<F>,
) -> Result<Projection<F>> {
    let phis: Vec<Vec<F>> = universe.sequences().iter().map(|x| constraints.evaluate_vector(x)).collect();
    let targets = constraints.targets();
    let d = targets.len();
    let mut support: Vec<bool> = reference.probs.iter().map(|p| *p > F::zero()).collect();
    let mut lambda = vec![F::zero(); d];
    let mut boundary = vec![false; d];

    loop {
        let mut changed = false;
        for i in 0..d {
            if boundary[i] {
                continue;
            }
            let values = phis.iter().zip(&support).filter(|(_, s)| **s).map(|(p, _)| p[i]);
            let (lo, hi) = values.fold((F::infinity(), F::neg_infinity()), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if lo == F::infinity() {
                return Err(Error::EmptySupport);
            }
            let t = targets[i];
            if t > hi || t < lo {
                return Err(Error::UnattainableTarget {
                    id: constraints.constraints()[i].feature.id.clone(),
                    target: t.as_f64(),
                    lo: lo.as_f64(),
                    hi: hi.as_f64(),
                });
            }
            if t == hi || t == lo {
                for (s, p) in support.iter_mut().zip(&phis) {
                    *s = *s && p[i] == t;
                }
                lambda[i] = if t == hi && t != lo {
                    F::infinity()
                } else if t == lo && t != hi {
                    F::neg_infinity()
                } else {
                    F::zero()
                };
                boundary[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let active: Vec<usize> = (0..d).filter(|i| !boundary[*i]).collect();
    let base_log: Vec<F> =
        reference.probs.iter().zip(&support).map(|(&p, &s)| if s { p.ln() } else { F::neg_infinity() }).collect();
    let tilt = |lam: &[F]| -> Vec<F> {
        base_log
            .iter()
            .zip(&phis)
            .map(|(&b, phi)| {
                if b == F::neg_infinity() {
                    b
                } else {
                    b + active.iter().zip(lam).map(|(&i, &l)| l * phi[i]).sum::<F>()
                }
            })
            .collect()
    };
    // Dual objective g(λ) = log Σ r e^{λ·φ} - λ·μ̄ ; ∇g = μ(λ) - μ̄ ; ∇²g = Cov(φ).
    let dual = |lam: &[F]| -> F {
        let lw = tilt(lam);
        log_sum_exp(lw.iter().copied()) - active.iter().zip(lam).map(|(&i, &l)| l * targets[i]).sum::<F>()
    };
    let mut lam = vec![F::zero(); active.len()];
    let tol = F::of(1e-14);
    for _ in 0..200 {
        if active.is_empty() {
            break;
        }
        let lw = tilt(&lam);
        let (w, _) = ExactDistribution::from_log_weights(universe.space(), &lw)?;
        let mut mean = vec![F::zero(); active.len()];
        for (p, phi) in w.probs.iter().zip(&phis) {
            for (m, &i) in mean.iter_mut().zip(&active) {
                *m = *m + *p * phi[i];
            }
        }
        let grad: Vec<F> = mean.iter().zip(&active).map(|(&m, &i)| m - targets[i]).collect();
        if grad.iter().all(|g| g.abs() < tol) {
            break;
        }
        let n = active.len();
        let mut hess = vec![F::zero(); n * n];
        for (p, phi) in w.probs.iter().zip(&phis) {
            for a in 0..n {
                let da = phi[active[a]] - mean[a];
                for b in 0..n {
                    hess[a * n + b] = hess[a * n + b] + *p * da * (phi[active[b]] - mean[b]);
                }
            }
        }
        for a in 0..n {
            hess[a * n + a] = hess[a * n + a] + F::of(1e-15);
        }
        let step = solve_linear(&mut hess, &grad, n)
            .ok_or_else(|| Error::InvalidConfig("singular feature covariance".into()))?;
        let g0 = dual(&lam);
        let slope: F = grad.iter().zip(&step).map(|(&g, &s)| g * s).sum();
        let mut t = F::one();
        loop {
            let trial: Vec<F> = lam.iter().zip(&step).map(|(&l, &s)| l - t * s).collect();
            if dual(&trial) <= g0 - F::of(1e-4) * t * slope || t < F::of(1e-10) {
                lam = trial;
                break;
            }
            t = t * F::of(0.5);
        }
    }
    for (&i, &l) in active.iter().zip(&lam) {
        lambda[i] = l;
    }
    let (dist, _) = ExactDistribution::from_log_weights(universe.space(), &tilt(&lam))?;
    let residual =
        dist.moments(universe, constraints).iter().zip(&targets).map(|(&m, &t)| (m - t).abs()).fold(F::zero(), F::max);
    Ok(Projection { dist, lambda, residual })
}

/// Gaussian elimination with partial pivoting on a dense `n x n` system.
fn solve_linear<F: Real>(a: &mut [F], b: &[F], n: usize) -> Option<Vec<F>> {
    let mut x = b.to_vec();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())?;
        if a[piv * n + col].abs() < F::min_positive_value() {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            x.swap(piv, col);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            for k in col..n {
                a[row * n + k] = a[row * n + k] - f * a[col * n + k];
            }
            x[row] = x[row] - f * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut s = x[col];
        for k in col + 1..n {
            s = s - a[col * n + k] * x[k];
        }
        x[col] = s / a[col * n + col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ConstraintSpec, Feature};
    use crate::seqspace::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (SequenceSpace, Universe, TabularArModel<f64>) {
        let space = SequenceSpace::new(Vocabulary::new(&["a", "b", "c"]).unwrap(), 3).unwrap();
        let uni = Universe::new(&space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = TabularArModel::<f64>::uniform(&space, 2).unwrap().logits().len();
        let logits = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (space.clone(), uni, TabularArModel::from_logits(&space, 2, logits, true).unwrap())
    }

    #[test]
    fn projection_matches_targets() {
        let (space, uni, a) = setup();
        let v = space.vocab();
        let set = ConstraintSet::new(vec![
            ConstraintSpec::distributional(Feature::token_presence("a", v, "a").unwrap(), 0.7).unwrap(),
            ConstraintSpec::distributional(Feature::token_ratio("r", v, &["b"], &["b", "c"], 0.0).unwrap(), 0.3)
                .unwrap(),
        ])
        .unwrap();
        let base = ExactDistribution::of_model(&a, &uni);
        let proj = project(&base, &uni, &set).unwrap();
        assert!(proj.residual < 1e-10, "{}", proj.residual);
        assert!(proj.lambda.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn pointwise_targets_restrict_support() {
        let (space, uni, a) = setup();
        let v = space.vocab();
        let set =
            ConstraintSet::new(vec![ConstraintSpec::pointwise(Feature::token_presence("a", v, "a").unwrap()).unwrap()])
                .unwrap();
        let base = ExactDistribution::of_model(&a, &uni);
        let proj = project(&base, &uni, &set).unwrap();
        assert_eq!(proj.lambda[0], f64::INFINITY);
        let za: f64 = uni.sequences().iter().filter(|x| x.contains(0)).map(|x| a.prob(x)).sum();
        for x in uni.sequences() {
            let expected = if x.contains(0) { a.prob(x) / za } else { 0.0 };
            assert!((proj.dist.prob(x) - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_sampling_follows_probabilities() {
        let (_, uni, a) = setup();
        let d = ExactDistribution::of_model(&a, &uni);
        let draws = d.sample(&mut ChaCha8Rng::seed_from_u64(8), 40_000);
        let x = &uni.sequences()[0];
        let freq = draws.iter().filter(|y| *y == x).count() as f64 / 40_000.0;
        let p = d.prob(x);
        assert!((freq - p).abs() < 4.0 * (p * (1.0 - p) / 40_000.0).sqrt());
    }
}
