//! Evaluation: constraint expectations, divergences, diversity and Zipf tables.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ebm::Ebm;
use crate::error::{Error, Result};
use crate::estimators::{exact_kl, kl_between_from_logs, kl_p_from_logs, z_from_logs, Estimate, LogDensity};
use crate::exact::ExactDistribution;
use crate::features::ConstraintSet;
use crate::lm::TabularArModel;
use crate::real::Real;
use crate::seqspace::{Sequence, TokenId, Universe, Vocabulary};

/// Floor applied to zero clipped precisions before the geometric mean.
pub const BLEU_FLOOR: f64 = 1e-9;

pub fn expectation_phi<F: Real>(samples: &[Sequence], constraints: &ConstraintSet<F>) -> Vec<F> {
    let mut sums = vec![F::zero(); constraints.len()];
    for x in samples {
        for (s, v) in sums.iter_mut().zip(constraints.evaluate_vector(x)) {
            *s = *s + v;
        }
    }
    let n = F::of_usize(samples.len().max(1));
    sums.into_iter().map(|s| s / n).collect()
}

fn ngrams(tokens: &[TokenId], n: usize) -> impl Iterator<Item = &[TokenId]> {
    tokens.windows(n.max(1)).filter(move |_| n > 0)
}

/// Distinct n-grams over total n-grams within one sequence; `1.0` when it has none.
pub fn dist_n(x: &Sequence, n: usize) -> f64 {
    let total = x.len().saturating_sub(n.saturating_sub(1));
    if n == 0 || x.len() < n {
        return 1.0;
    }
    let distinct: std::collections::HashSet<&[TokenId]> = ngrams(x.tokens(), n).collect();
    distinct.len() as f64 / total as f64
}

/// Mean of per-sequence [`dist_n`].
pub fn corpus_dist_n(samples: &[Sequence], n: usize) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().map(|x| dist_n(x, n)).sum::<f64>() / samples.len() as f64
}

/// Distinct n-grams across the whole corpus over total n-grams in it.
pub fn pooled_dist_n(samples: &[Sequence], n: usize) -> f64 {
    let mut distinct = std::collections::HashSet::new();
    let mut total = 0usize;
    for x in samples {
        if x.len() >= n && n > 0 {
            for g in ngrams(x.tokens(), n) {
                distinct.insert(g.to_vec());
                total += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        distinct.len() as f64 / total as f64
    }
}

fn ngram_counts(x: &Sequence, n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    for g in ngrams(x.tokens(), n) {
        *counts.entry(g).or_insert(0) += 1;
    }
    counts
}

/// Largest count of an n-gram across the corpus, the number of sequences
/// holding it, and the runner-up count. Enough to recover the best count
/// among all sequences but one.
#[derive(Default, Clone, Copy)]
struct TopTwo {
    best: usize,
    holders: usize,
    second: usize,
}

impl TopTwo {
    fn push(&mut self, c: usize) {
        if c > self.best {
            self.second = self.best;
            self.best = c;
            self.holders = 1;
        } else if c == self.best {
            self.holders += 1;
        } else if c > self.second {
            self.second = c;
        }
    }

    fn max_excluding(&self, own: usize) -> usize {
        if own == self.best && self.holders == 1 {
            self.second
        } else {
            self.best
        }
    }
}

/// Mean BLEU-n of each sample against all others as references.
///
/// Uniform weights over orders `1..=n`, clipped precisions floored at
/// [`BLEU_FLOOR`], brevity penalty against the closest reference length
/// (shorter wins ties). Samples shorter than `n` are skipped as candidates but
/// still serve as references. A candidate whose clipped precisions are all
/// zero scores exactly 0. NaN when no sample is long enough.
pub fn self_bleu_n(samples: &[Sequence], n: usize) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    if n == 0 {
        return Err(Error::InvalidConfig("BLEU order must be >= 1".into()));
    }
    let counts: Vec<Vec<HashMap<&[TokenId], usize>>> =
        samples.iter().map(|x| (1..=n).map(|k| ngram_counts(x, k)).collect()).collect();
    let mut tops: Vec<HashMap<&[TokenId], TopTwo>> = vec![HashMap::new(); n];
    for per_seq in &counts {
        for (k, c) in per_seq.iter().enumerate() {
            for (g, &v) in c {
                tops[k].entry(*g).or_default().push(v);
            }
        }
    }
    let max_len = samples.iter().map(Sequence::len).max().unwrap_or(0);
    let mut length_hist = vec![0usize; max_len + 1];
    for x in samples {
        length_hist[x.len()] += 1;
    }

    let mut total = 0.0;
    let mut scored = 0usize;
    for (x, per_seq) in samples.iter().zip(&counts) {
        let c = x.len();
        if c < n {
            continue;
        }
        let mut log_sum = 0.0;
        let mut any_match = false;
        for k in 0..n {
            let cand = &per_seq[k];
            let denom: usize = cand.values().sum();
            let clipped: usize = cand.iter().map(|(g, &v)| v.min(tops[k][g].max_excluding(v))).sum();
            any_match |= clipped > 0;
            let p = clipped as f64 / denom as f64;
            log_sum += p.max(BLEU_FLOOR).ln();
        }
        let bleu = if any_match {
            let r = closest_ref_length(&length_hist, c);
            let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
            bp * (log_sum / n as f64).exp()
        } else {
            0.0
        };
        total += bleu;
        scored += 1;
    }
    Ok(if scored == 0 { f64::NAN } else { total / scored as f64 })
}

/// Closest length among the other sequences, given the corpus length
/// histogram and the candidate's own length.
fn closest_ref_length(hist: &[usize], own: usize) -> usize {
    let available = |len: usize| hist[len] > usize::from(len == own);
    (0..hist.len()).filter(|&l| available(l)).min_by_key(|&l| (l.abs_diff(own), l)).unwrap_or(own)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZipfRow {
    pub rank: usize,
    pub token: String,
    pub frequency: usize,
}

/// Body-token frequencies by descending count; ties by vocabulary index.
pub fn zipf_table(samples: &[Sequence], vocab: &Vocabulary) -> Result<Vec<ZipfRow>> {
    let mut counts = vec![0usize; vocab.len()];
    for x in samples {
        for &t in x.tokens() {
            counts[t as usize] += 1;
        }
    }
    let mut order: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] > 0).collect();
    if order.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    order.sort_by_key(|&i| (std::cmp::Reverse(counts[i]), i));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, i)| ZipfRow { rank: r + 1, token: vocab.token(i as TokenId).to_string(), frequency: counts[i] })
        .collect())
}

/// Enumeration-exact quantities attached to a snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics<F> {
    pub kl_p_pi: F,
    pub kl_pi_a: F,
    pub entropy: F,
    pub e_phi: Vec<F>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord<F> {
    pub method: String,
    pub step: usize,
    /// Total sequences drawn by the trainer so far.
    pub samples: usize,
    pub e_phi: Vec<F>,
    pub kl_p_pi: Estimate<F>,
    pub kl_pi_a: Estimate<F>,
    pub dist: [f64; 3],
    pub self_bleu: [f64; 3],
    pub z_ma: F,
    pub exact: Option<ExactMetrics<F>>,
}

impl<F: Real> MetricsRecord<F> {
    pub fn csv_header(ids: &[&str], exact: bool) -> Vec<String> {
        let mut h: Vec<String> = vec!["method".into(), "step".into(), "samples".into()];
        h.extend(ids.iter().map(|id| format!("e_phi_{id}")));
        for name in ["kl_p_pi", "kl_p_pi_se", "kl_pi_a", "kl_pi_a_se", "dist_1", "dist_2", "dist_3"] {
            h.push(name.into());
        }
        for name in ["self_bleu_3", "self_bleu_4", "self_bleu_5", "z_ma"] {
            h.push(name.into());
        }
        if exact {
            for name in ["kl_p_pi_exact", "kl_pi_a_exact", "entropy_exact"] {
                h.push(name.into());
            }
            h.extend(ids.iter().map(|id| format!("e_phi_exact_{id}")));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let f = |v: F| v.as_f64().to_string();
        let mut row = vec![self.method.clone(), self.step.to_string(), self.samples.to_string()];
        row.extend(self.e_phi.iter().map(|&v| f(v)));
        row.extend([
            f(self.kl_p_pi.value),
            f(self.kl_p_pi.standard_error),
            f(self.kl_pi_a.value),
            f(self.kl_pi_a.standard_error),
        ]);
        row.extend(self.dist.iter().chain(&self.self_bleu).map(|v| v.to_string()));
        row.push(f(self.z_ma));
        if let Some(e) = &self.exact {
            row.extend([f(e.kl_p_pi), f(e.kl_pi_a), f(e.entropy)]);
            row.extend(e.e_phi.iter().map(|&v| f(v)));
        }
        row
    }
}

/// Enumerated target used for exact snapshot columns.
#[derive(Debug, Clone)]
pub struct ExactReference<F> {
    pub universe: Universe,
    pub target: ExactDistribution<F>,
    pub base: ExactDistribution<F>,
}

impl<F: Real> ExactReference<F> {
    pub fn new(ebm: &Ebm<F>) -> Result<Self> {
        let universe = Universe::new(ebm.base().space())?;
        let (_, target) = ebm.exact_normalize(&universe)?;
        let base = ExactDistribution::of_model(ebm.base(), &universe);
        Ok(Self { universe, target, base })
    }

    pub fn measure(&self, policy: &TabularArModel<F>, constraints: &ConstraintSet<F>) -> Result<ExactMetrics<F>> {
        let pi = ExactDistribution::of_model(policy, &self.universe);
        Ok(ExactMetrics {
            kl_p_pi: exact_kl(self.target.probs(), pi.probs())?,
            kl_pi_a: exact_kl(pi.probs(), self.base.probs())?,
            entropy: pi.entropy(),
            e_phi: pi.moments(&self.universe, constraints),
        })
    }
}

/// Produces [`MetricsRecord`] snapshots of a policy. Draws from its own seeded
/// stream so evaluation never perturbs training randomness.
#[derive(Debug, Clone)]
pub struct Evaluator<'a, F: Real> {
    pub ebm: &'a Ebm<F>,
    pub sample_size: usize,
    pub seed: u64,
    pub exact: Option<ExactReference<F>>,
}

impl<'a, F: Real> Evaluator<'a, F> {
    pub fn new(ebm: &'a Ebm<F>, sample_size: usize, seed: u64, exact_oracle: bool) -> Result<Self> {
        if sample_size < 2 {
            return Err(Error::InvalidConfig("eval.sample_size must be >= 2".into()));
        }
        let exact = if exact_oracle { Some(ExactReference::new(ebm)?) } else { None };
        Ok(Self { ebm, sample_size, seed, exact })
    }

    pub fn samples(&self, policy: &TabularArModel<F>, step: usize) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64);
        policy.sample(&mut rng, self.sample_size)
    }

    /// `z` is the trainer's running partition estimate; when it is not
    /// positive one is estimated from the snapshot's own samples.
    pub fn evaluate(
        &self,
        method: &str,
        step: usize,
        samples_drawn: usize,
        policy: &TabularArModel<F>,
        z: F,
    ) -> Result<MetricsRecord<F>> {
        let xs = self.samples(policy, step);
        let constraints = self.ebm.constraints();
        let log_p = self.ebm.log_densities(&xs);
        let log_pi = policy.log_densities(&xs);
        let log_a = self.ebm.base().log_densities(&xs);
        let z_used = if z > F::zero() { z } else { z_from_logs(&log_p, &log_pi)?.value };
        let nan = Estimate { value: F::nan(), standard_error: F::nan(), samples: xs.len() };
        let kl_p_pi = if z_used > F::zero() { kl_p_from_logs(&log_p, &log_pi, &log_pi, z_used)? } else { nan };
        let kl_pi_a = kl_between_from_logs(&log_pi, &log_a)?;
        let exact = match &self.exact {
            Some(r) => Some(r.measure(policy, constraints)?),
            None => None,
        };
        Ok(MetricsRecord {
            method: method.to_string(),
            step,
            samples: samples_drawn,
            e_phi: expectation_phi(&xs, constraints),
            kl_p_pi,
            kl_pi_a,
            dist: [1, 2, 3].map(|n| corpus_dist_n(&xs, n)),
            self_bleu: [3, 4, 5].map(|n| self_bleu_n(&xs, n).unwrap_or(f64::NAN)),
            z_ma: z,
            exact,
        })
    }
}
