//! Shared vocabulary of domain types. No algorithms live here.
//!
//! Languages are abstract indices with generated names (`L00`, `L01`, ...);
//! index 0 conventionally plays the pivot role. The vocabulary reserves its
//! last token id as the end-of-sequence marker, and carries the hard global
//! cap on sequence content length (`max_len`) so that full-sequence
//! enumeration stays tractable everywhere it is used as an oracle.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Token identifier within a [`VocabSpec`].
pub type TokenId = u32;

/// Index into a language registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LanguageId(pub u16);

impl LanguageId {
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Generated display name: `L00`, `L01`, ...
    pub fn name(self) -> String {
        format!("L{:02}", self.0)
    }
}

impl fmt::Display for LanguageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name())
    }
}

/// Registry of `K >= 1` synthetic languages, ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageRegistry {
    num_languages: u16,
}

impl LanguageRegistry {
    pub fn new(num_languages: u16) -> Result<Self, Error> {
        if num_languages == 0 {
            return Err(Error::config("language registry requires K >= 1"));
        }
        Ok(Self { num_languages })
    }

    pub fn len(&self) -> usize {
        self.num_languages as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn ids(&self) -> impl Iterator<Item = LanguageId> {
        (0..self.num_languages).map(LanguageId)
    }

    pub fn contains(&self, lang: LanguageId) -> bool {
        lang.0 < self.num_languages
    }
}

/// Token vocabulary plus the hard sequence-length cap.
///
/// `eos` is the reserved last token id (`size - 1`). `max_len` bounds both
/// prompt length and completion content length (tokens before the eos).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: u32,
    pub eos: TokenId,
    pub max_len: usize,
}

impl VocabSpec {
    /// Default content-length cap; keeps `V^max_len` enumerable at small `V`.
    pub const DEFAULT_MAX_LEN: usize = 8;

    pub fn new(size: u32, max_len: usize) -> Result<Self, Error> {
        if size < 2 {
            return Err(Error::config("vocab size must be at least 2"));
        }
        if max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        Ok(Self { size, eos: size - 1, max_len })
    }

    pub fn contains(&self, token: TokenId) -> bool {
        token < self.size
    }

    /// Token ids excluding eos.
    pub fn content_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.size).filter(move |&t| t != self.eos)
    }
}

/// A prompt: a token sequence tagged with its language.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub language: LanguageId,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>, language: LanguageId) -> Self {
        Self { tokens, language }
    }

    pub fn empty(language: LanguageId) -> Self {
        Self { tokens: Vec::new(), language }
    }

    /// Same tokens, different language tag.
    pub fn retagged(&self, language: LanguageId) -> Self {
        Self { tokens: self.tokens.clone(), language }
    }
}

/// A completion: a non-empty token sequence ending in eos (exactly one eos).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Completion {
    pub tokens: Vec<TokenId>,
    pub language: LanguageId,
}

impl Completion {
    pub fn new(tokens: Vec<TokenId>, language: LanguageId) -> Self {
        Self { tokens, language }
    }

    /// Tokens before the trailing eos.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((_, rest)) => rest,
            None => &[],
        }
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len().saturating_sub(1)
    }

    pub fn retagged(&self, language: LanguageId) -> Self {
        Self { tokens: self.tokens.clone(), language }
    }
}

/// Which channel produced a completion during data generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Direct,
    Translated,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::Direct => write!(f, "direct"),
            Channel::Translated => write!(f, "translated"),
        }
    }
}

/// One unit of offline training data: a prompt with a ranked completion pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub chosen: Completion,
    pub rejected: Completion,
    pub channel_chosen: Channel,
    pub channel_rejected: Channel,
    /// Absolute reward gap at labeling time.
    pub labeler_margin: f64,
}

/// Provenance of a generated dataset: the mixture recipe plus the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mixture: crate::mixtures::MixtureSpec,
    pub seed: u64,
}

/// A labeled preference dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub pairs: Vec<PreferencePair>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Pair count per language, in ascending language order.
    pub fn per_language_counts(&self) -> std::collections::BTreeMap<LanguageId, usize> {
        let mut counts = std::collections::BTreeMap::new();
        for pair in &self.pairs {
            *counts.entry(pair.prompt.language).or_insert(0) += 1;
        }
        counts
    }
}

/// A violated invariant found by [`validate_pair`]. Violations are data, not
/// failures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    TokenOutOfRange { field: &'static str, token: TokenId },
    PromptTooLong { len: usize, max: usize },
    EmptyCompletion { field: &'static str },
    UnterminatedCompletion { field: &'static str },
    InteriorEos { field: &'static str },
    CompletionTooLong { field: &'static str, len: usize, max: usize },
    IdenticalCompletions,
    LanguageMismatch { field: &'static str },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::TokenOutOfRange { field, token } => {
                write!(f, "{field}: token {token} out of vocab range")
            }
            Violation::PromptTooLong { len, max } => {
                write!(f, "prompt length {len} exceeds max {max}")
            }
            Violation::EmptyCompletion { field } => write!(f, "{field}: empty completion"),
            Violation::UnterminatedCompletion { field } => {
                write!(f, "{field}: unterminated completion")
            }
            Violation::InteriorEos { field } => {
                write!(f, "{field}: eos appears before the final position")
            }
            Violation::CompletionTooLong { field, len, max } => {
                write!(f, "{field}: content length {len} exceeds max {max}")
            }
            Violation::IdenticalCompletions => write!(f, "identical completions"),
            Violation::LanguageMismatch { field } => {
                write!(f, "{field}: language differs from prompt language")
            }
        }
    }
}

fn validate_completion(
    c: &Completion,
    vocab: &VocabSpec,
    field: &'static str,
    out: &mut Vec<Violation>,
) {
    for &t in &c.tokens {
        if !vocab.contains(t) {
            out.push(Violation::TokenOutOfRange { field, token: t });
            break;
        }
    }
    match c.tokens.last() {
        None => out.push(Violation::EmptyCompletion { field }),
        Some(&last) if last != vocab.eos => out.push(Violation::UnterminatedCompletion { field }),
        _ => {}
    }
    if c.content().contains(&vocab.eos) {
        out.push(Violation::InteriorEos { field });
    }
    if c.content_len() > vocab.max_len {
        out.push(Violation::CompletionTooLong { field, len: c.content_len(), max: vocab.max_len });
    }
}

/// Check every [`PreferencePair`] invariant, returning all violations.
pub fn validate_pair(pair: &PreferencePair, vocab: &VocabSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    for &t in &pair.prompt.tokens {
        if !vocab.contains(t) {
            out.push(Violation::TokenOutOfRange { field: "prompt", token: t });
            break;
        }
    }
    if pair.prompt.tokens.len() > vocab.max_len {
        out.push(Violation::PromptTooLong { len: pair.prompt.tokens.len(), max: vocab.max_len });
    }
    validate_completion(&pair.chosen, vocab, "chosen", &mut out);
    validate_completion(&pair.rejected, vocab, "rejected", &mut out);
    if pair.chosen.tokens == pair.rejected.tokens {
        out.push(Violation::IdenticalCompletions);
    }
    if pair.chosen.language != pair.prompt.language {
        out.push(Violation::LanguageMismatch { field: "chosen" });
    }
    if pair.rejected.language != pair.prompt.language {
        out.push(Violation::LanguageMismatch { field: "rejected" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixtures::{BudgetMode, MixtureSpec};

    fn vocab() -> VocabSpec {
        VocabSpec::new(8, 8).unwrap()
    }

    fn lang(i: u16) -> LanguageId {
        LanguageId(i)
    }

    fn pair() -> PreferencePair {
        let v = vocab();
        PreferencePair {
            prompt: Prompt::new(vec![0, 1], lang(0)),
            chosen: Completion::new(vec![2, 3, v.eos], lang(0)),
            rejected: Completion::new(vec![4, v.eos], lang(0)),
            channel_chosen: Channel::Direct,
            channel_rejected: Channel::Translated,
            labeler_margin: 0.25,
        }
    }

    #[test]
    fn well_formed_pair_is_ok() {
        assert!(validate_pair(&pair(), &vocab()).is_empty());
    }

    #[test]
    fn identical_completions_is_violation() {
        let mut p = pair();
        p.rejected = p.chosen.clone();
        let vs = validate_pair(&p, &vocab());
        assert!(vs.contains(&Violation::IdenticalCompletions));
    }

    #[test]
    fn truncated_completion_is_unterminated() {
        // Construct by truncating a valid completion just before its eos.
        let mut p = pair();
        p.chosen.tokens.pop();
        let vs = validate_pair(&p, &vocab());
        assert!(vs
            .iter()
            .any(|v| matches!(v, Violation::UnterminatedCompletion { field: "chosen" })));
    }

    #[test]
    fn interior_eos_detected() {
        let v = vocab();
        let mut p = pair();
        p.chosen.tokens = vec![v.eos, 1, v.eos];
        let vs = validate_pair(&p, &v);
        assert!(vs.iter().any(|x| matches!(x, Violation::InteriorEos { .. })));
    }

    #[test]
    fn language_mismatch_detected() {
        let mut p = pair();
        p.rejected.language = lang(1);
        let vs = validate_pair(&p, &vocab());
        assert!(vs.iter().any(|x| matches!(x, Violation::LanguageMismatch { field: "rejected" })));
    }

    #[test]
    fn vocab_reserves_last_token_as_eos() {
        let v = VocabSpec::new(64, 8).unwrap();
        assert_eq!(v.eos, 63);
        assert!(VocabSpec::new(1, 8).is_err());
        assert_eq!(v.content_tokens().count(), 63);
    }

    #[test]
    fn registry_rejects_empty() {
        assert!(LanguageRegistry::new(0).is_err());
        let r = LanguageRegistry::new(3).unwrap();
        assert_eq!(r.ids().count(), 3);
        assert_eq!(lang(4).name(), "L04");
    }

    #[test]
    fn dataset_counts_group_by_language() {
        let spec = MixtureSpec::new("t", vec![lang(0)], BudgetMode::PerLanguage(2)).unwrap();
        let ds = Dataset {
            pairs: vec![pair(), pair()],
            provenance: Provenance { mixture: spec, seed: 1 },
        };
        assert_eq!(ds.per_language_counts()[&lang(0)], 2);
    }
}
