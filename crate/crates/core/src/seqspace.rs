//! Finite sequence universes, corpus ingestion, and exhaustive enumeration.
//!
//! A [`SequenceSpace`] is every body-token string of length `0..=lmax` over a
//! vocabulary. Models emit body tokens and then EOS; after `lmax` body tokens
//! EOS is forced, so every model is a proper distribution over the space.
//!
//! Sequences are ordered shortlex (by length, then lexicographically by token
//! index). The shortlex rank doubles as the index used by exact distributions.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Reserved end-of-sequence token text.
pub const EOS_TOKEN: &str = "</s>";

/// Enumeration guard on the universe size.
pub const MAX_UNIVERSE: u128 = 10_000_000;

/// Ordered token strings. Body tokens occupy `0..body_len()`, EOS is last.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    eos_index: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from body tokens, appending EOS.
    pub fn new<S: AsRef<str>>(body: &[S]) -> Result<Self> {
        let mut tokens: Vec<String> = Vec::with_capacity(body.len() + 1);
        for t in body {
            let t = t.as_ref();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::InvalidVocabulary(format!("bad token {t:?}")));
            }
            if t == EOS_TOKEN {
                return Err(Error::InvalidVocabulary(format!("{EOS_TOKEN} is reserved")));
            }
            if tokens.iter().any(|x| x == t) {
                return Err(Error::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
            tokens.push(t.to_string());
        }
        let eos_index = tokens.len();
        tokens.push(EOS_TOKEN.to_string());
        Ok(Self { tokens, eos_index })
    }

    /// Total size including EOS.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn body_len(&self) -> usize {
        self.eos_index
    }

    pub fn eos(&self) -> TokenId {
        self.eos_index as TokenId
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn body_tokens(&self) -> &[String] {
        &self.tokens[..self.eos_index]
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    /// Looks up a body token. EOS is not addressable by text.
    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.body_tokens().iter().position(|t| t == token).map(|i| i as TokenId)
    }
}

/// Body tokens of a sequence, EOS excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Sequence(pub Vec<TokenId>);

impl Sequence {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, t: TokenId) -> bool {
        self.0.contains(&t)
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabulary) -> SequenceDisplay<'a> {
        SequenceDisplay { seq: self, vocab }
    }
}

impl From<Vec<TokenId>> for Sequence {
    fn from(v: Vec<TokenId>) -> Self {
        Self(v)
    }
}

pub struct SequenceDisplay<'a> {
    seq: &'a Sequence,
    vocab: &'a Vocabulary,
}

impl fmt::Display for SequenceDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &t) in self.seq.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(self.vocab.token(t))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSpace {
    vocab: Arc<Vocabulary>,
    lmax: usize,
}

impl SequenceSpace {
    pub fn new(vocab: Vocabulary, lmax: usize) -> Result<Self> {
        if lmax == 0 {
            return Err(Error::InvalidConfig("lmax must be positive".into()));
        }
        Ok(Self { vocab: Arc::new(vocab), lmax })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    /// `Σ_{ℓ=0..lmax} b^ℓ` with `b` the number of body tokens; saturates at `u128::MAX`.
    pub fn universe_size(&self) -> u128 {
        let b = self.vocab.body_len() as u128;
        let mut total: u128 = 0;
        let mut term: u128 = 1;
        for _ in 0..=self.lmax {
            total = total.saturating_add(term);
            term = term.saturating_mul(b);
        }
        total
    }

    pub fn check_enumerable(&self) -> Result<usize> {
        let size = self.universe_size();
        if size > MAX_UNIVERSE {
            return Err(Error::UniverseTooLarge { size, limit: MAX_UNIVERSE });
        }
        Ok(size as usize)
    }

    pub fn contains(&self, x: &Sequence) -> bool {
        x.len() <= self.lmax && x.0.iter().all(|&t| (t as usize) < self.vocab.body_len())
    }

    pub fn check(&self, x: &Sequence) -> Result<()> {
        if self.contains(x) {
            Ok(())
        } else {
            Err(Error::OutOfSpace(format!("{:?}", x.0)))
        }
    }

    /// Shortlex rank of `x`, i.e. its position in [`SequenceSpace::enumerate`].
    pub fn rank(&self, x: &Sequence) -> usize {
        let b = self.vocab.body_len();
        let mut offset = 0usize;
        let mut width = 1usize;
        for _ in 0..x.len() {
            offset += width;
            width *= b;
        }
        let digits = x.0.iter().fold(0usize, |acc, &t| acc * b + t as usize);
        offset + digits
    }

    /// Inverse of [`SequenceSpace::rank`].
    pub fn unrank(&self, mut rank: usize) -> Sequence {
        let b = self.vocab.body_len();
        let mut len = 0usize;
        let mut width = 1usize;
        while rank >= width {
            rank -= width;
            width *= b;
            len += 1;
        }
        let mut tokens = vec![0 as TokenId; len];
        for slot in tokens.iter_mut().rev() {
            *slot = (rank % b) as TokenId;
            rank /= b;
        }
        Sequence(tokens)
    }

    /// Every sequence of the space exactly once, in shortlex order.
    pub fn enumerate(&self) -> Result<Enumerate> {
        let size = self.check_enumerable()?;
        Ok(Enumerate { body: self.vocab.body_len(), lmax: self.lmax, current: Some(Vec::new()), remaining: size })
    }
}

/// Shortlex enumeration stream.
#[derive(Debug, Clone)]
pub struct Enumerate {
    body: usize,
    lmax: usize,
    current: Option<Vec<TokenId>>,
    remaining: usize,
}

impl Iterator for Enumerate {
    type Item = Sequence;

    fn next(&mut self) -> Option<Sequence> {
        let cur = self.current.take()?;
        self.remaining -= 1;
        let out = Sequence(cur.clone());
        let mut next = cur;
        // Odometer increment; overflow moves to the next length.
        let mut i = next.len();
        loop {
            if i == 0 {
                if next.len() < self.lmax && self.body > 0 {
                    self.current = Some(vec![0; next.len() + 1]);
                }
                break;
            }
            i -= 1;
            if (next[i] as usize) + 1 < self.body {
                next[i] += 1;
                self.current = Some(next);
                break;
            }
            next[i] = 0;
        }
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Enumerate {}

/// Materialized universe, indexable by shortlex rank.
#[derive(Debug, Clone)]
pub struct Universe {
    space: SequenceSpace,
    sequences: Vec<Sequence>,
}

impl Universe {
    pub fn new(space: &SequenceSpace) -> Result<Self> {
        let sequences: Vec<Sequence> = space.enumerate()?.collect();
        Ok(Self { space: space.clone(), sequences })
    }

    pub fn space(&self) -> &SequenceSpace {
        &self.space
    }

    pub fn sequences(&self) -> &[Sequence] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn index_of(&self, x: &Sequence) -> usize {
        self.space.rank(x)
    }
}

/// Sequences parsed from a whitespace-tokenized corpus.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub space: SequenceSpace,
    pub sequences: Vec<Sequence>,
    /// Lines longer than `lmax` that were cut to `lmax` tokens.
    pub truncated: usize,
}

/// One sequence per non-blank line. The vocabulary lists tokens in order of
/// first appearance, followed by EOS.
pub fn tokenize_corpus(text: &str, lmax: usize) -> Result<Corpus> {
    let lines: Vec<Vec<&str>> =
        text.lines().map(|l| l.split_whitespace().collect::<Vec<_>>()).filter(|toks| !toks.is_empty()).collect();
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut body: Vec<&str> = Vec::new();
    for line in &lines {
        for &t in line {
            if !body.contains(&t) {
                body.push(t);
            }
        }
    }
    let vocab = Vocabulary::new(&body)?;
    let space = SequenceSpace::new(vocab, lmax)?;
    let mut truncated = 0;
    let sequences = lines
        .iter()
        .map(|line| {
            if line.len() > lmax {
                truncated += 1;
            }
            let ids = line.iter().take(lmax).map(|t| space.vocab().id(t).expect("token was registered")).collect();
            Sequence(ids)
        })
        .collect();
    Ok(Corpus { space, sequences, truncated })
}

/// Parses a whitespace-separated token string against an existing vocabulary.
pub fn parse_sequence(space: &SequenceSpace, text: &str) -> Result<Sequence> {
    let ids = text
        .split_whitespace()
        .map(|t| space.vocab().id(t).ok_or_else(|| Error::UnknownToken(t.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let x = Sequence(ids);
    space.check(&x)?;
    Ok(x)
}
