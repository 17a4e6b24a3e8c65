//! Feature functions and moment constraints.
//!
//! Features are rule-based and total over the universe, the empty sequence
//! included. Constraints come in two flavours: pointwise (binary feature,
//! target 1.0, every sequence must satisfy it) and distributional (a target
//! expectation strictly inside the feature's range).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::seqspace::{Sequence, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureRange {
    /// Values in {0, 1}.
    Binary,
    /// Values in [0, 1].
    Unit,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind<F> {
    TokenPresence(TokenId),
    WordlistPresence(Vec<TokenId>),
    /// Share of denominator-set tokens that are numerator-set tokens;
    /// `default` when no denominator token occurs.
    TokenRatio {
        numerator: Vec<TokenId>,
        denominator: Vec<TokenId>,
        default: F,
    },
    PrefixMatch(Vec<TokenId>),
    /// Explicit values; sequences not listed map to `default`.
    PredicateTable {
        values: HashMap<Sequence, F>,
        default: F,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature<F> {
    pub id: String,
    pub kind: FeatureKind<F>,
    pub range: FeatureRange,
}

impl<F: Real> Feature<F> {
    pub fn token_presence(id: &str, vocab: &Vocabulary, token: &str) -> Result<Self> {
        let t = vocab.id(token).ok_or_else(|| Error::UnknownToken(token.to_string()))?;
        Ok(Self { id: id.into(), kind: FeatureKind::TokenPresence(t), range: FeatureRange::Binary })
    }

    pub fn wordlist_presence(id: &str, vocab: &Vocabulary, words: &[&str]) -> Result<Self> {
        let ids = resolve_set(vocab, words.iter().copied(), id)?;
        Ok(Self { id: id.into(), kind: FeatureKind::WordlistPresence(ids), range: FeatureRange::Binary })
    }

    pub fn token_ratio(
        id: &str,
        vocab: &Vocabulary,
        numerator: &[&str],
        denominator: &[&str],
        default: F,
    ) -> Result<Self> {
        let numerator: Vec<TokenId> = numerator.iter().filter_map(|w| vocab.id(w)).collect();
        let denominator = resolve_set(vocab, denominator.iter().copied(), id)?;
        if numerator.iter().any(|t| !denominator.contains(t)) {
            return Err(Error::InvalidConstraint {
                id: id.into(),
                reason: "numerator must be a subset of the denominator".into(),
            });
        }
        if !(default >= F::zero() && default <= F::one()) {
            return Err(Error::InvalidConstraint { id: id.into(), reason: "default must lie in [0, 1]".into() });
        }
        Ok(Self {
            id: id.into(),
            kind: FeatureKind::TokenRatio { numerator, denominator, default },
            range: FeatureRange::Unit,
        })
    }

    pub fn prefix_match(id: &str, vocab: &Vocabulary, prefix: &[&str]) -> Result<Self> {
        let ids = prefix
            .iter()
            .map(|w| vocab.id(w).ok_or_else(|| Error::UnknownToken(w.to_string())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { id: id.into(), kind: FeatureKind::PrefixMatch(ids), range: FeatureRange::Binary })
    }

    pub fn predicate_table(id: &str, values: HashMap<Sequence, F>, default: F, range: FeatureRange) -> Result<Self> {
        let f = Self { id: id.into(), kind: FeatureKind::PredicateTable { values, default }, range };
        if let FeatureKind::PredicateTable { values, default } = &f.kind {
            if values.values().chain(std::iter::once(default)).any(|v| !f.in_range(*v)) {
                return Err(Error::InvalidConstraint {
                    id: id.into(),
                    reason: "table value outside declared range".into(),
                });
            }
        }
        Ok(f)
    }

    fn in_range(&self, v: F) -> bool {
        match self.range {
            FeatureRange::Binary => v == F::zero() || v == F::one(),
            FeatureRange::Unit => v >= F::zero() && v <= F::one(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.range == FeatureRange::Binary
    }

    pub fn evaluate(&self, x: &Sequence) -> F {
        let indicator = |b: bool| if b { F::one() } else { F::zero() };
        match &self.kind {
            FeatureKind::TokenPresence(t) => indicator(x.contains(*t)),
            FeatureKind::WordlistPresence(ws) => indicator(x.tokens().iter().any(|t| ws.contains(t))),
            FeatureKind::TokenRatio { numerator, denominator, default } => {
                let den = x.tokens().iter().filter(|t| denominator.contains(t)).count();
                if den == 0 {
                    *default
                } else {
                    let num = x.tokens().iter().filter(|t| numerator.contains(t)).count();
                    F::of_usize(num) / F::of_usize(den)
                }
            }
            FeatureKind::PrefixMatch(prefix) => indicator(x.tokens().starts_with(prefix)),
            FeatureKind::PredicateTable { values, default } => values.get(x).copied().unwrap_or(*default),
        }
    }
}

fn resolve_set<'a>(vocab: &Vocabulary, words: impl Iterator<Item = &'a str>, id: &str) -> Result<Vec<TokenId>> {
    let ids: Vec<TokenId> = words.filter_map(|w| vocab.id(w)).collect();
    if ids.is_empty() {
        return Err(Error::InvalidConstraint { id: id.into(), reason: "no listed word is in the vocabulary".into() });
    }
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec<F> {
    pub feature: Feature<F>,
    pub target: F,
    pub pointwise: bool,
}

impl<F: Real> ConstraintSpec<F> {
    pub fn pointwise(feature: Feature<F>) -> Result<Self> {
        Self::new(feature, F::one(), true)
    }

    pub fn distributional(feature: Feature<F>, target: F) -> Result<Self> {
        Self::new(feature, target, false)
    }

    pub fn new(feature: Feature<F>, target: F, pointwise: bool) -> Result<Self> {
        let fail = |reason: &str| Err(Error::InvalidConstraint { id: feature.id.clone(), reason: reason.into() });
        if pointwise {
            if !feature.is_binary() {
                return fail("pointwise constraints need a binary feature");
            }
            if target != F::one() {
                return fail("pointwise constraints have target 1.0");
            }
        } else if feature.is_binary() {
            if !(target > F::zero() && target < F::one()) {
                return fail("distributional targets on binary features must lie strictly between 0 and 1");
            }
        } else if !(target >= F::zero() && target <= F::one()) {
            return fail("target must lie in [0, 1]");
        }
        Ok(Self { feature, target, pointwise })
    }
}

/// Ordered constraints with unique feature ids.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConstraintSet<F> {
    constraints: Vec<ConstraintSpec<F>>,
}

impl<F: Real> ConstraintSet<F> {
    pub fn new(constraints: Vec<ConstraintSpec<F>>) -> Result<Self> {
        for (i, c) in constraints.iter().enumerate() {
            if constraints[..i].iter().any(|d| d.feature.id == c.feature.id) {
                return Err(Error::DuplicateFeatureId(c.feature.id.clone()));
            }
        }
        Ok(Self { constraints })
    }

    pub fn empty() -> Self {
        Self { constraints: Vec::new() }
    }

    pub fn constraints(&self) -> &[ConstraintSpec<F>] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.constraints.iter().map(|c| c.feature.id.as_str()).collect()
    }

    pub fn targets(&self) -> Vec<F> {
        self.constraints.iter().map(|c| c.target).collect()
    }

    pub fn has_pointwise(&self) -> bool {
        self.constraints.iter().any(|c| c.pointwise)
    }

    pub fn all_pointwise(&self) -> bool {
        !self.constraints.is_empty() && self.constraints.iter().all(|c| c.pointwise)
    }

    /// `φ(x)`, in constraint order.
    pub fn evaluate_vector(&self, x: &Sequence) -> Vec<F> {
        self.constraints.iter().map(|c| c.feature.evaluate(x)).collect()
    }

    /// `b(x)`: product of the pointwise features.
    pub fn pointwise_predicate(&self, x: &Sequence) -> Result<F> {
        if !self.has_pointwise() {
            return Err(Error::NoPointwiseConstraints);
        }
        Ok(self
            .constraints
            .iter()
            .filter(|c| c.pointwise)
            .map(|c| c.feature.evaluate(x))
            .fold(F::one(), |acc, v| acc * v))
    }

    /// The first `n` constraints, e.g. for incremental fitting.
    pub fn prefix(&self, n: usize) -> Self {
        Self { constraints: self.constraints[..n.min(self.len())].to_vec() }
    }
}

/// Serializable feature description, resolved against a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureKindSpec {
    TokenPresence {
        token: String,
    },
    WordlistPresence {
        words: Vec<String>,
    },
    TokenRatio {
        numerator: Vec<String>,
        denominator: Vec<String>,
        #[serde(default)]
        default: f64,
    },
    PrefixMatch {
        prefix: Vec<String>,
    },
    PredicateTable {
        entries: Vec<TableEntry>,
        #[serde(default)]
        default: f64,
        #[serde(default = "unit_range")]
        range: FeatureRange,
    },
}

fn unit_range() -> FeatureRange {
    FeatureRange::Unit
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableEntry {
    /// Whitespace-separated tokens; empty string is the empty sequence.
    pub sequence: String,
    pub value: f64,
}

/// Constraint entry of an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConfig {
    pub id: String,
    #[serde(flatten)]
    pub kind: FeatureKindSpec,
    pub target: f64,
    #[serde(default)]
    pub pointwise: bool,
}

impl ConstraintConfig {
    pub fn resolve<F: Real>(&self, vocab: &Vocabulary) -> Result<ConstraintSpec<F>> {
        let id = self.id.as_str();
        let feature = match &self.kind {
            FeatureKindSpec::TokenPresence { token } => Feature::token_presence(id, vocab, token)?,
            FeatureKindSpec::WordlistPresence { words } => {
                Feature::wordlist_presence(id, vocab, &words.iter().map(String::as_str).collect::<Vec<_>>())?
            }
            FeatureKindSpec::TokenRatio { numerator, denominator, default } => Feature::token_ratio(
                id,
                vocab,
                &numerator.iter().map(String::as_str).collect::<Vec<_>>(),
                &denominator.iter().map(String::as_str).collect::<Vec<_>>(),
                F::of(*default),
            )?,
            FeatureKindSpec::PrefixMatch { prefix } => {
                Feature::prefix_match(id, vocab, &prefix.iter().map(String::as_str).collect::<Vec<_>>())?
            }
            FeatureKindSpec::PredicateTable { entries, default, range } => {
                let mut values = HashMap::new();
                for e in entries {
                    let ids = e
                        .sequence
                        .split_whitespace()
                        .map(|t| vocab.id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
                        .collect::<Result<Vec<_>>>()?;
                    values.insert(Sequence(ids), F::of(e.value));
                }
                Feature::predicate_table(id, values, F::of(*default), *range)?
            }
        };
        ConstraintSpec::new(feature, F::of(self.target), self.pointwise)
    }
}

/// Resolves config entries into a validated [`ConstraintSet`].
pub fn resolve_constraints<F: Real>(configs: &[ConstraintConfig], vocab: &Vocabulary) -> Result<ConstraintSet<F>> {
    ConstraintSet::new(configs.iter().map(|c| c.resolve(vocab)).collect::<Result<Vec<_>>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqspace::SequenceSpace;

    fn vocab() -> Vocabulary {
        Vocabulary::new(&["she", "he", "sports", "amazing", "the"]).unwrap()
    }

    fn seq(v: &Vocabulary, words: &[&str]) -> Sequence {
        Sequence(words.iter().map(|w| v.id(w).unwrap()).collect())
    }

    #[test]
    fn presence_detects_the_word() {
        let v = vocab();
        let f = Feature::<f64>::token_presence("amazing", &v, "amazing").unwrap();
        assert_eq!(f.evaluate(&seq(&v, &["the", "amazing"])), 1.0);
        assert_eq!(f.evaluate(&seq(&v, &["the"])), 0.0);
        assert_eq!(f.evaluate(&Sequence::empty()), 0.0);
    }

    #[test]
    fn ratio_counts_pronouns() {
        let v = vocab();
        let f = Feature::<f64>::token_ratio("female", &v, &["she"], &["she", "he"], 0.0).unwrap();
        assert!((f.evaluate(&seq(&v, &["she", "he", "she"])) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f.evaluate(&Sequence::empty()), 0.0);
        let g = Feature::<f64>::token_ratio("female", &v, &["she"], &["she", "he"], 0.5).unwrap();
        assert_eq!(g.evaluate(&seq(&v, &["the"])), 0.5);
    }

    #[test]
    fn prefix_and_wordlist() {
        let v = vocab();
        let p = Feature::<f64>::prefix_match("p", &v, &["the", "he"]).unwrap();
        assert_eq!(p.evaluate(&seq(&v, &["the", "he", "she"])), 1.0);
        assert_eq!(p.evaluate(&seq(&v, &["the"])), 0.0);
        let w = Feature::<f64>::wordlist_presence("w", &v, &["sports", "nope"]).unwrap();
        assert_eq!(w.evaluate(&seq(&v, &["he", "sports"])), 1.0);
        assert!(Feature::<f64>::wordlist_presence("w", &v, &["nope"]).is_err());
        assert!(matches!(Feature::<f64>::token_presence("x", &v, "nope"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn vector_and_predicate() {
        let v = vocab();
        let sports = Feature::<f64>::token_presence("sports", &v, "sports").unwrap();
        let female = Feature::<f64>::token_presence("female", &v, "she").unwrap();
        let hybrid = ConstraintSet::new(vec![
            ConstraintSpec::pointwise(sports.clone()).unwrap(),
            ConstraintSpec::distributional(female.clone(), 0.5).unwrap(),
        ])
        .unwrap();
        assert_eq!(hybrid.evaluate_vector(&seq(&v, &["he", "sports"])), vec![1.0, 0.0]);
        assert_eq!(ConstraintSet::<f64>::empty().evaluate_vector(&seq(&v, &["he"])), Vec::<f64>::new());
        assert_eq!(hybrid.pointwise_predicate(&seq(&v, &["sports"])).unwrap(), 1.0);
        assert_eq!(hybrid.pointwise_predicate(&seq(&v, &["he"])).unwrap(), 0.0);

        let both = ConstraintSet::new(vec![
            ConstraintSpec::pointwise(sports.clone()).unwrap(),
            ConstraintSpec::pointwise(female.clone()).unwrap(),
        ])
        .unwrap();
        assert_eq!(both.evaluate_vector(&seq(&v, &["she", "sports"])), vec![1.0, 1.0]);
        assert_eq!(both.pointwise_predicate(&seq(&v, &["she", "sports"])).unwrap(), 1.0);
        assert_eq!(both.pointwise_predicate(&seq(&v, &["she"])).unwrap(), 0.0);

        let dist = ConstraintSet::new(vec![ConstraintSpec::distributional(female, 0.3).unwrap()]).unwrap();
        assert!(matches!(dist.pointwise_predicate(&Sequence::empty()), Err(Error::NoPointwiseConstraints)));
    }

    #[test]
    fn constraint_validation() {
        let v = vocab();
        let bin = Feature::<f64>::token_presence("b", &v, "he").unwrap();
        let ratio = Feature::<f64>::token_ratio("r", &v, &["she"], &["she", "he"], 0.0).unwrap();
        assert!(ConstraintSpec::new(bin.clone(), 0.9, true).is_err());
        assert!(ConstraintSpec::new(ratio.clone(), 1.0, true).is_err());
        assert!(ConstraintSpec::distributional(bin.clone(), 1.0).is_err());
        assert!(ConstraintSpec::distributional(bin.clone(), 0.0).is_err());
        assert!(ConstraintSpec::distributional(ratio, 1.0).is_ok());
        let dup = ConstraintSet::new(vec![
            ConstraintSpec::distributional(bin.clone(), 0.2).unwrap(),
            ConstraintSpec::distributional(bin, 0.4).unwrap(),
        ]);
        assert!(matches!(dup, Err(Error::DuplicateFeatureId(_))));
    }

    #[test]
    fn config_schema_resolves() {
        let v = vocab();
        let json = r#"[
            {"id": "sports", "kind": "token-presence", "token": "sports", "target": 1.0, "pointwise": true},
            {"id": "female", "kind": "token-ratio", "numerator": ["she"], "denominator": ["she", "he"], "target": 0.5},
            {"id": "tab", "kind": "predicate-table", "entries": [{"sequence": "he", "value": 1.0}], "range": "binary", "target": 0.2}
        ]"#;
        let cfgs: Vec<ConstraintConfig> = serde_json::from_str(json).unwrap();
        let set: ConstraintSet<f64> = resolve_constraints(&cfgs, &v).unwrap();
        assert_eq!(set.ids(), vec!["sports", "female", "tab"]);
        assert_eq!(set.evaluate_vector(&seq(&v, &["he"])), vec![0.0, 0.0, 1.0]);
        let bad = r#"[{"id": "x", "kind": "token-presence", "token": "he", "target": 0.5, "bogus": 1}]"#;
        assert!(serde_json::from_str::<Vec<ConstraintConfig>>(bad).is_err());
    }

    #[test]
    fn binary_features_stay_binary_and_predicate_is_conjunction() {
        let v = Vocabulary::new(&["a", "b", "c"]).unwrap();
        let space = SequenceSpace::new(v.clone(), 4).unwrap();
        let fa = Feature::<f64>::token_presence("a", &v, "a").unwrap();
        let fp = Feature::<f64>::prefix_match("p", &v, &["b"]).unwrap();
        let set = ConstraintSet::new(vec![
            ConstraintSpec::pointwise(fa.clone()).unwrap(),
            ConstraintSpec::pointwise(fp.clone()).unwrap(),
        ])
        .unwrap();
        for x in space.enumerate().unwrap() {
            let (va, vp) = (fa.evaluate(&x), fp.evaluate(&x));
            assert!(va == 0.0 || va == 1.0);
            assert!(vp == 0.0 || vp == 1.0);
            assert_eq!(fa.evaluate(&x), va);
            let all = va == 1.0 && vp == 1.0;
            assert_eq!(set.pointwise_predicate(&x).unwrap() == 1.0, all);
        }
    }
}
