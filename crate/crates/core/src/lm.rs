//! Tabular order-k autoregressive models.
//!
//! One logit vector (over the full vocabulary, EOS included) per context. A
//! context is the last `k-1` body tokens; near the start of a sequence it is
//! the shorter prefix, which stands for the BOS-padded context. Contexts are
//! indexed by the shortlex rank of their token string, so an order `lmax+1`
//! model has one context per proper prefix and can represent any distribution
//! over the space.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::{log_sum_exp, Real};
use crate::seqspace::{Sequence, SequenceSpace, TokenId, Vocabulary};

/// Begin-of-sequence padding marker used in persisted context keys.
pub const BOS_TOKEN: &str = "<s>";

/// Current persisted model document version.
pub const MODEL_DOC_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularArModel<F: Real> {
    space: SequenceSpace,
    order: usize,
    /// Row-major `n_contexts x vocab_len`.
    logits: Vec<F>,
    trainable: bool,
    /// Offsets of each context length in the shortlex context index.
    offsets: Vec<usize>,
}

/// Plain SGD settings shared by the trainers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig<F> {
    pub learning_rate: F,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<F: Real> SgdConfig<F> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > F::zero()) {
            return Err(Error::InvalidConfig("learning_rate must be > 0".into()));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sparse gradient over logits: context index -> dense vector over the vocabulary.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient<F> {
    pub entries: BTreeMap<usize, Vec<F>>,
}

impl<F: Real> Gradient<F> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().all(|v| v.iter().all(|g| *g == F::zero()))
    }

    /// `self += weight * other`
    pub fn add_scaled(&mut self, other: &Gradient<F>, weight: F) {
        for (&ctx, g) in &other.entries {
            let slot = self.entries.entry(ctx).or_insert_with(|| vec![F::zero(); g.len()]);
            for (s, &v) in slot.iter_mut().zip(g) {
                *s = *s + weight * v;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.entries.values_mut() {
            for v in g.iter_mut() {
                *v = *v * factor;
            }
        }
    }

    pub fn get(&self, ctx: usize, token: TokenId) -> F {
        self.entries.get(&ctx).map_or(F::zero(), |g| g[token as usize])
    }

    /// Euclidean inner product.
    pub fn dot(&self, other: &Gradient<F>) -> F {
        self.entries
            .iter()
            .filter_map(|(ctx, g)| other.entries.get(ctx).map(|h| g.iter().zip(h).map(|(&a, &b)| a * b).sum::<F>()))
            .sum()
    }
}

impl<F: Real> TabularArModel<F> {
    /// All-zero logits: uniform next-token distributions.
    pub fn uniform(space: &SequenceSpace, order: usize) -> Result<Self> {
        let n = Self::context_count(space, order)?;
        Self::from_logits(space, order, vec![F::zero(); n * space.vocab().len()], true)
    }

    pub fn from_logits(space: &SequenceSpace, order: usize, logits: Vec<F>, trainable: bool) -> Result<Self> {
        let n = Self::context_count(space, order)?;
        let v = space.vocab().len();
        if logits.len() != n * v {
            return Err(Error::DimensionMismatch { expected: n * v, got: logits.len() });
        }
        let offsets = Self::context_offsets(space.vocab().body_len(), order);
        let model = Self { space: space.clone(), order, logits, trainable, offsets };
        model.validate_logits()?;
        Ok(model)
    }

    fn context_count(space: &SequenceSpace, order: usize) -> Result<usize> {
        if order == 0 || order > space.lmax() + 1 {
            return Err(Error::InvalidOrder { order, lmax: space.lmax() });
        }
        let b = space.vocab().body_len();
        Ok((0..order).map(|m| b.pow(m as u32)).sum())
    }

    fn context_offsets(body: usize, order: usize) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(order);
        let mut acc = 0;
        for m in 0..order {
            offsets.push(acc);
            acc += body.pow(m as u32);
        }
        offsets
    }

    fn validate_logits(&self) -> Result<()> {
        let v = self.vocab_len();
        for (ctx, row) in self.logits.chunks(v).enumerate() {
            if row.iter().any(|l| l.is_nan() || *l == F::infinity()) {
                return Err(Error::InvalidConfig(format!("context {ctx} has NaN or +inf logits")));
            }
            let has_neg_inf = row.iter().any(|l| *l == F::neg_infinity());
            if has_neg_inf && self.trainable {
                return Err(Error::NotTrainable(format!(
                    "context {ctx} uses the -inf sentinel, which only frozen models may hold"
                )));
            }
            if row.iter().all(|l| *l == F::neg_infinity()) {
                return Err(Error::InvalidConfig(format!("context {ctx} has no finite logit")));
            }
        }
        Ok(())
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn vocab(&self) -> &Vocabulary {
        self.space.vocab()
    }

    fn vocab_len(&self) -> usize {
        self.space.vocab().len()
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn n_contexts(&self) -> usize {
        self.logits.len() / self.vocab_len()
    }

    pub fn logits(&self) -> &[F] {
        &self.logits
    }

    pub fn context_logits(&self, ctx: usize) -> &[F] {
        let v = self.vocab_len();
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Context index for predicting the token that follows `history`.
    pub fn context_index(&self, history: &[TokenId]) -> usize {
        let m = history.len().min(self.order - 1);
        let tail = &history[history.len() - m..];
        let b = self.space.vocab().body_len();
        self.offsets[m] + tail.iter().fold(0usize, |acc, &t| acc * b + t as usize)
    }

    /// Token string of a context (without BOS padding).
    pub fn context_tokens(&self, ctx: usize) -> Vec<TokenId> {
        let b = self.space.vocab().body_len();
        let m = self.offsets.iter().rposition(|&o| o <= ctx).expect("offset 0 exists");
        let mut rest = ctx - self.offsets[m];
        let mut tokens = vec![0 as TokenId; m];
        for slot in tokens.iter_mut().rev() {
            *slot = (rest % b) as TokenId;
            rest /= b;
        }
        tokens
    }

    /// Log-softmax of a context's logits.
    pub fn log_softmax(&self, ctx: usize) -> Vec<F> {
        let row = self.context_logits(ctx);
        let lse = log_sum_exp(row.iter().copied());
        row.iter().map(|&l| l - lse).collect()
    }

    pub fn softmax(&self, ctx: usize) -> Vec<F> {
        self.log_softmax(ctx).into_iter().map(F::exp).collect()
    }

    /// Next-token log-probabilities after `history`, with EOS forced at `lmax`.
    pub fn next_log_probs(&self, history: &[TokenId]) -> Vec<F> {
        if history.len() >= self.space.lmax() {
            let mut forced = vec![F::neg_infinity(); self.vocab_len()];
            forced[self.space.vocab().eos() as usize] = F::zero();
            return forced;
        }
        self.log_softmax(self.context_index(history))
    }

    /// Exact log-probability of a sequence, terminal EOS step included.
    pub fn log_prob(&self, x: &Sequence) -> F {
        debug_assert!(self.space.contains(x));
        let toks = x.tokens();
        let eos = self.space.vocab().eos() as usize;
        let mut total = F::zero();
        for t in 0..toks.len() {
            let ctx = self.context_index(&toks[..t]);
            let row = self.context_logits(ctx);
            total = total + row[toks[t] as usize] - log_sum_exp(row.iter().copied());
        }
        if toks.len() < self.space.lmax() {
            let ctx = self.context_index(toks);
            let row = self.context_logits(ctx);
            total = total + row[eos] - log_sum_exp(row.iter().copied());
        }
        total
    }

    pub fn prob(&self, x: &Sequence) -> F {
        self.log_prob(x).exp()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Sequence {
        let eos = self.space.vocab().eos();
        let mut toks: Vec<TokenId> = Vec::with_capacity(self.space.lmax());
        while toks.len() < self.space.lmax() {
            let probs = self.softmax(self.context_index(&toks));
            let next = draw_categorical(&probs, rng) as TokenId;
            if next == eos {
                break;
            }
            toks.push(next);
        }
        Sequence(toks)
    }

    /// `n` i.i.d. ancestral samples.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<Sequence> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    /// Score-function gradient `∇_logits log p(x)`: one-hot minus softmax at
    /// every visited context. The forced EOS step contributes nothing.
    pub fn grad_log_prob(&self, x: &Sequence) -> Result<Gradient<F>> {
        if !self.trainable {
            return Err(Error::NotTrainable("gradient requested on a frozen model".into()));
        }
        let toks = x.tokens();
        let eos = self.space.vocab().eos();
        let mut grad = Gradient::new();
        let steps = toks.len() + usize::from(toks.len() < self.space.lmax());
        for t in 0..steps {
            let target = if t < toks.len() { toks[t] } else { eos };
            let ctx = self.context_index(&toks[..t]);
            let probs = self.softmax(ctx);
            let slot = grad.entries.entry(ctx).or_insert_with(|| vec![F::zero(); probs.len()]);
            for (i, (s, p)) in slot.iter_mut().zip(&probs).enumerate() {
                let one = if i == target as usize { F::one() } else { F::zero() };
                *s = *s + one - *p;
            }
        }
        Ok(grad)
    }

    /// `logits += learning_rate * grad`.
    pub fn apply_update(&mut self, grad: &Gradient<F>, learning_rate: F) {
        let v = self.vocab_len();
        for (&ctx, g) in &grad.entries {
            for (l, &d) in self.logits[ctx * v..(ctx + 1) * v].iter_mut().zip(g) {
                *l = *l + learning_rate * d;
            }
        }
    }

    /// Frozen deep copy, used as an importance-sampling proposal.
    pub fn frozen_copy(&self) -> Self {
        let mut m = self.clone();
        m.trainable = false;
        m
    }

    /// Trainable copy; fails if any logit is the `-inf` sentinel.
    pub fn trainable_copy(&self) -> Result<Self> {
        let mut m = self.clone();
        m.trainable = true;
        m.validate_logits()?;
        Ok(m)
    }

    /// Re-expresses the model at a higher order without changing the distribution.
    pub fn lift(&self, order: usize) -> Result<Self> {
        if order < self.order {
            return Err(Error::InvalidOrder { order, lmax: self.space.lmax() });
        }
        let n = Self::context_count(&self.space, order)?;
        let offsets = Self::context_offsets(self.space.vocab().body_len(), order);
        let mut lifted = Self {
            space: self.space.clone(),
            order,
            logits: Vec::with_capacity(n * self.vocab_len()),
            trainable: self.trainable,
            offsets,
        };
        for ctx in 0..n {
            let hist = lifted.context_tokens(ctx);
            let src = self.context_index(&hist);
            lifted.logits.extend_from_slice(self.context_logits(src));
        }
        Ok(lifted)
    }

    /// Add-`smoothing` maximum-likelihood fit on next-token events, EOS
    /// included. The forced EOS after `lmax` tokens carries no information and
    /// is not counted. Contexts never observed get uniform logits. With zero
    /// smoothing unseen events get the `-inf` sentinel and the model is frozen.
    pub fn mle_fit(space: &SequenceSpace, corpus: &[Sequence], order: usize, smoothing: F) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if smoothing < F::zero() || smoothing.is_nan() {
            return Err(Error::InvalidConfig("smoothing must be >= 0".into()));
        }
        let mut model = Self::uniform(space, order)?;
        let v = model.vocab_len();
        let eos = space.vocab().eos();
        let mut counts = vec![0usize; model.logits.len()];
        for x in corpus {
            space.check(x)?;
            let toks = x.tokens();
            for t in 0..toks.len() {
                counts[model.context_index(&toks[..t]) * v + toks[t] as usize] += 1;
            }
            if toks.len() < space.lmax() {
                counts[model.context_index(toks) * v + eos as usize] += 1;
            }
        }
        let mut any_sentinel = false;
        for ctx in 0..model.n_contexts() {
            let row = &counts[ctx * v..(ctx + 1) * v];
            if row.iter().all(|&c| c == 0) {
                continue;
            }
            for (l, &c) in model.logits[ctx * v..(ctx + 1) * v].iter_mut().zip(row) {
                let mass = F::of_usize(c) + smoothing;
                if mass == F::zero() {
                    any_sentinel = true;
                    *l = F::neg_infinity();
                } else {
                    *l = mass.ln();
                }
            }
        }
        model.trainable = !any_sentinel;
        Ok(model)
    }

    pub fn to_document(&self) -> ModelDocument {
        let vocab = self.space.vocab();
        let contexts = (0..self.n_contexts())
            .map(|ctx| {
                let toks = self.context_tokens(ctx);
                let mut key: Vec<String> = vec![BOS_TOKEN.to_string(); self.order - 1 - toks.len()];
                key.extend(toks.iter().map(|&t| vocab.token(t).to_string()));
                let logits = self.context_logits(ctx).iter().map(|l| LogitValue::from_f64(l.as_f64())).collect();
                ContextEntry { context: key, logits }
            })
            .collect();
        ModelDocument {
            version: MODEL_DOC_VERSION,
            order: self.order,
            lmax: self.space.lmax(),
            vocabulary: vocab.body_tokens().to_vec(),
            trainable: self.trainable,
            contexts,
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.version != MODEL_DOC_VERSION {
            return Err(Error::SchemaMismatch(format!(
                "model document version {} is not supported (expected {MODEL_DOC_VERSION})",
                doc.version
            )));
        }
        let vocab = Vocabulary::new(&doc.vocabulary).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let space = SequenceSpace::new(vocab, doc.lmax).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let n = Self::context_count(&space, doc.order).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        let v = space.vocab().len();
        let mut logits = vec![F::nan(); n * v];
        let mut seen = vec![false; n];
        let template = Self::uniform(&space, doc.order)?;
        for entry in &doc.contexts {
            let k = doc.order - 1;
            if entry.context.len() != k {
                return Err(Error::SchemaMismatch(format!("context {:?} should have {k} entries", entry.context)));
            }
            let pad = entry.context.iter().take_while(|t| *t == BOS_TOKEN).count();
            let hist = entry.context[pad..]
                .iter()
                .map(|t| {
                    space.vocab().id(t).ok_or_else(|| Error::SchemaMismatch(format!("unknown context token {t:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if pad > 0 && hist.len() + pad != k {
                return Err(Error::SchemaMismatch(format!("malformed context {:?}", entry.context)));
            }
            let ctx = template.context_index(&hist);
            if entry.logits.len() != v {
                return Err(Error::SchemaMismatch(format!(
                    "context {:?} has {} logits, expected {v}",
                    entry.context,
                    entry.logits.len()
                )));
            }
            for (slot, value) in logits[ctx * v..(ctx + 1) * v].iter_mut().zip(&entry.logits) {
                *slot = F::of(value.to_f64()?);
            }
            seen[ctx] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::SchemaMismatch(format!("missing context {:?}", template.context_tokens(missing))));
        }
        Self::from_logits(&space, doc.order, logits, doc.trainable)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text).map_err(|e| Error::SchemaMismatch(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// Inverse-CDF draw from a probability vector.
pub(crate) fn draw_categorical<F: Real, R: Rng + ?Sized>(probs: &[F], rng: &mut R) -> usize {
    let u = F::of(rng.gen::<f64>());
    let mut acc = F::zero();
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > F::zero() {
            last_positive = i;
        }
        acc = acc + p;
        if u < acc {
            return i;
        }
    }
    last_positive
}

/// Persisted form of a [`TabularArModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub version: u32,
    pub order: usize,
    pub lmax: usize,
    /// Body tokens; EOS is implicit and last.
    pub vocabulary: Vec<String>,
    pub trainable: bool,
    pub contexts: Vec<ContextEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextEntry {
    pub context: Vec<String>,
    pub logits: Vec<LogitValue>,
}

/// A logit is a JSON number, or the string `"-inf"` for the frozen-model sentinel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogitValue {
    Finite(f64),
    Sentinel(String),
}

impl LogitValue {
    fn from_f64(v: f64) -> Self {
        if v == f64::NEG_INFINITY {
            Self::Sentinel("-inf".into())
        } else {
            Self::Finite(v)
        }
    }

    fn to_f64(&self) -> Result<f64> {
        match self {
            Self::Finite(v) => Ok(*v),
            Self::Sentinel(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Self::Sentinel(s) => Err(Error::SchemaMismatch(format!("bad logit {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::{tokenize_corpus, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn space(body: &[&str], lmax: usize) -> SequenceSpace {
        SequenceSpace::new(Vocabulary::new(body).unwrap(), lmax).unwrap()
    }

    fn random_model(space: &SequenceSpace, order: usize, seed: u64) -> TabularArModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = TabularArModel::<f64>::uniform(space, order).unwrap().logits.len();
        let logits = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        TabularArModel::from_logits(space, order, logits, true).unwrap()
    }

    fn total_mass(m: &TabularArModel<f64>) -> f64 {
        m.space().enumerate().unwrap().map(|x| m.log_prob(&x).exp()).sum()
    }

    #[test]
    fn uniform_binary_model_halves_mass() {
        let s = space(&["a"], 1);
        let m = TabularArModel::<f64>::uniform(&s, 1).unwrap();
        assert!((m.log_prob(&Sequence::empty()) - 0.5f64.ln()).abs() < 1e-15);
        assert!((m.log_prob(&Sequence(vec![0])) - 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn eos_is_forced_at_lmax() {
        let s = space(&["a", "b"], 2);
        let m = random_model(&s, 2, 3);
        let lp = m.next_log_probs(&[0, 1]);
        assert_eq!(lp[2], 0.0);
        assert!(lp[0] == f64::NEG_INFINITY && lp[1] == f64::NEG_INFINITY);
    }

    #[test]
    fn normalization_over_various_spaces() {
        for (body, lmax, order) in [(1, 3, 1), (2, 4, 2), (3, 3, 3), (4, 5, 2), (5, 4, 5), (2, 8, 3)] {
            let names: Vec<String> = (0..body).map(|i| format!("t{i}")).collect();
            let s = SequenceSpace::new(Vocabulary::new(&names).unwrap(), lmax).unwrap();
            let m = random_model(&s, order, body as u64 * 31 + lmax as u64);
            assert!((total_mass(&m) - 1.0).abs() < 1e-9, "body {body} lmax {lmax}");
        }
    }

    #[test]
    fn mle_counts_eos_events_except_forced_ones() {
        // lmax = 1: the only EOS events are forced, so P(a) = 2/3 at position 0.
        let s = space(&["a", "b"], 1);
        let corpus = vec![Sequence(vec![0]), Sequence(vec![0]), Sequence(vec![1])];
        let m = TabularArModel::<f64>::mle_fit(&s, &corpus, 1, 0.0).unwrap();
        let p = m.softmax(0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
        assert!(!m.is_trainable());
        // lmax = 2: three EOS events join the pool of the single unigram context.
        let s2 = space(&["a", "b"], 2);
        let m2 = TabularArModel::<f64>::mle_fit(&s2, &corpus, 1, 0.0).unwrap();
        let p2 = m2.softmax(0);
        assert!((p2[0] - 2.0 / 6.0).abs() < 1e-15);
        assert!((p2[2] - 3.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn mle_chain_rule_matches_hand_product() {
        // Bigram counts by hand for corpus {[a,b],[a],[b,b]}, lmax 3:
        //   BOS -> a:2, b:1 ; a -> b:1, EOS:1 ; b -> b:1, EOS:2.
        let s = space(&["a", "b"], 3);
        let corpus = vec![Sequence(vec![0, 1]), Sequence(vec![0]), Sequence(vec![1, 1])];
        let m = TabularArModel::<f64>::mle_fit(&s, &corpus, 2, 0.0).unwrap();
        let expected = (2.0 / 3.0) * (1.0 / 2.0) * (2.0 / 3.0);
        assert!((m.prob(&Sequence(vec![0, 1])) - expected).abs() < 1e-15);
        let bbb = (1.0 / 3.0) * (1.0 / 3.0) * (1.0 / 3.0);
        assert!((m.prob(&Sequence(vec![1, 1, 1])) - bbb).abs() < 1e-15);
    }

    #[test]
    fn smoothing_gives_full_support() {
        let c = tokenize_corpus("a b\nb b a\nc", 4).unwrap();
        let m = TabularArModel::<f64>::mle_fit(&c.space, &c.sequences, 2, 1.0).unwrap();
        assert!(m.is_trainable());
        assert!(m.space().enumerate().unwrap().all(|x| m.prob(&x) > 0.0));
        assert!((total_mass(&m) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_sequence_corpus_is_the_mode() {
        let s = space(&["a", "b", "c"], 3);
        let target = Sequence(vec![2, 0]);
        let m = TabularArModel::<f64>::mle_fit(&s, std::slice::from_ref(&target), 4, 0.0).unwrap();
        let best = s.enumerate().unwrap().max_by(|x, y| m.prob(x).partial_cmp(&m.prob(y)).unwrap()).unwrap();
        assert_eq!(m.prob(&best), m.prob(&target));
        assert!((m.prob(&target) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic_and_respects_degenerate_models() {
        let s = space(&["a", "b"], 3);
        let m = random_model(&s, 2, 9);
        let a = m.sample(&mut ChaCha8Rng::seed_from_u64(5), 50);
        let b = m.sample(&mut ChaCha8Rng::seed_from_u64(5), 50);
        assert_eq!(a, b);
        let only_empty = TabularArModel::<f64>::mle_fit(&s, &[Sequence::empty()], 1, 0.0).unwrap();
        let draws = only_empty.sample(&mut ChaCha8Rng::seed_from_u64(1), 100);
        assert!(draws.iter().all(Sequence::is_empty));
    }

    #[test]
    fn uniform_binary_sampling_frequency() {
        let s = space(&["a"], 1);
        let m = TabularArModel::<f64>::uniform(&s, 1).unwrap();
        let draws = m.sample(&mut ChaCha8Rng::seed_from_u64(11), 10_000);
        let freq = draws.iter().filter(|x| x.len() == 1).count() as f64 / 10_000.0;
        // 3 sigma of Binomial(10^4, 1/2) is 0.015.
        assert!((freq - 0.5).abs() < 0.02, "{freq}");
    }

    #[test]
    fn gradient_of_uniform_binary_choice() {
        let s = space(&["a"], 1);
        let m = TabularArModel::<f64>::uniform(&s, 1).unwrap();
        let g = m.grad_log_prob(&Sequence(vec![0])).unwrap();
        assert_eq!(g.get(0, 0), 0.5);
        assert_eq!(g.get(0, 1), -0.5);
    }

    #[test]
    fn gradient_vanishes_on_saturated_context() {
        let s = space(&["a", "b"], 1);
        let m = TabularArModel::from_logits(&s, 1, vec![60.0, 0.0, 0.0], true).unwrap();
        let g = m.grad_log_prob(&Sequence(vec![0])).unwrap();
        assert!(g.entries[&0].iter().all(|v: &f64| v.abs() < 1e-20));
    }

    #[test]
    fn frozen_models_have_no_gradient() {
        let s = space(&["a"], 2);
        let m = TabularArModel::<f64>::uniform(&s, 1).unwrap().frozen_copy();
        assert!(matches!(m.grad_log_prob(&Sequence::empty()), Err(Error::NotTrainable(_))));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let s = space(&["a", "b", "c"], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for case in 0..20 {
            let m = random_model(&s, 1 + case % 3, case as u64);
            let x = m.sample_one(&mut rng);
            let g = m.grad_log_prob(&x).unwrap();
            let h = 1e-5;
            for i in 0..m.logits.len() {
                let (mut up, mut dn) = (m.clone(), m.clone());
                up.logits[i] += h;
                dn.logits[i] -= h;
                let fd = (up.log_prob(&x) - dn.log_prob(&x)) / (2.0 * h);
                let v = m.vocab_len();
                let an = g.get(i / v, (i % v) as TokenId);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "case {case} idx {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn updates_are_additive_and_monotone() {
        let s = space(&["a", "b"], 3);
        let m0 = random_model(&s, 2, 77);
        let x = Sequence(vec![1, 0]);
        let g = m0.grad_log_prob(&x).unwrap();
        let mut m = m0.clone();
        m.apply_update(&Gradient::new(), 0.3);
        assert_eq!(m, m0);
        m.apply_update(&g, 0.25);
        m.apply_update(&g, -0.25);
        assert_eq!(m.logits, m0.logits);

        let mut bump = Gradient::new();
        bump.entries.insert(0, vec![0.0, 5.0, 0.0]);
        let before = m0.softmax(0)[1];
        let mut m2 = m0.clone();
        m2.apply_update(&bump, 1.0);
        assert!(m2.softmax(0)[1] > before);
        assert!((m2.softmax(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lift_preserves_distribution() {
        let s = space(&["a", "b", "c"], 3);
        let m = random_model(&s, 2, 4);
        let lifted = m.lift(4).unwrap();
        assert_eq!(lifted.n_contexts(), 1 + 3 + 9 + 27);
        for x in s.enumerate().unwrap() {
            assert!((m.log_prob(&x) - lifted.log_prob(&x)).abs() < 1e-12);
        }
        assert!(m.lift(1).is_err());
        assert!(m.lift(5).is_err());
    }

    #[test]
    fn sentinel_only_in_frozen_models() {
        let s = space(&["a"], 1);
        let bad = TabularArModel::<f64>::from_logits(&s, 1, vec![0.0, f64::NEG_INFINITY], true);
        assert!(matches!(bad, Err(Error::NotTrainable(_))));
        let ok = TabularArModel::<f64>::from_logits(&s, 1, vec![0.0, f64::NEG_INFINITY], false).unwrap();
        assert!(ok.trainable_copy().is_err());
        assert_eq!(ok.prob(&Sequence::empty()), 0.0);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let c = tokenize_corpus("a b c\nb a\nc c c c\na", 4).unwrap();
        let m = TabularArModel::<f64>::mle_fit(&c.space, &c.sequences, 3, 0.37).unwrap();
        let back = TabularArModel::<f64>::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        for x in c.space.enumerate().unwrap() {
            assert_eq!(back.log_prob(&x).to_bits(), m.log_prob(&x).to_bits());
        }
        let frozen = TabularArModel::<f64>::mle_fit(&c.space, &c.sequences, 2, 0.0).unwrap();
        assert_eq!(TabularArModel::<f64>::from_json(&frozen.to_json().unwrap()).unwrap(), frozen);
    }

    #[test]
    fn json_schema_errors() {
        let s = space(&["a", "b"], 2);
        let m = random_model(&s, 2, 1);
        let text = m.to_json().unwrap();
        let corrupt = text.replacen("\"logits\"", "\"logitz\"", 1);
        assert!(matches!(TabularArModel::<f64>::from_json(&corrupt), Err(Error::SchemaMismatch(_))));
        let versioned = text.replacen("\"version\": 1", "\"version\": 7", 1);
        match TabularArModel::<f64>::from_json(&versioned) {
            Err(Error::SchemaMismatch(msg)) => assert!(msg.contains("version 7")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn f32_models_work_too() {
        let s = space(&["a", "b"], 3);
        let m = TabularArModel::<f32>::uniform(&s, 2).unwrap();
        let total: f32 = s.enumerate().unwrap().map(|x| m.prob(&x)).sum();
        assert!((total - 1.0).abs() < 1e-5);
        let back = TabularArModel::<f32>::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
