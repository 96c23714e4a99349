//! Programmable reward functions, Bradley-Terry preference probabilities,
//! deterministic pair labeling, and KL-shaped rewards for online training.
//!
//! The same reward scores completions during data labeling and during online
//! optimization. A reward is a [`RewardSpec`] (the weights) bound to the
//! per-language token sets of an environment, forming a [`RewardModel`].

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::scalar::{sigmoid, Scalar};
use crate::types::{Completion, LanguageId, Prompt, TokenId};

/// Quadratic penalty toward a target content length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthPenalty {
    pub target: usize,
    pub weight: f64,
}

/// Per-occurrence bonus for one designated token. Off by default; enables the
/// reward-overoptimization demo.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExploitBonus {
    pub token: TokenId,
    pub bonus: f64,
}

/// Weights of the programmable reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    /// Weight on the fraction of content tokens in the language's preferred set.
    pub in_language_weight: f64,
    /// Penalty weight on the fraction of content tokens in the marker set.
    pub marker_penalty: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length_penalty: Option<LengthPenalty>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploit: Option<ExploitBonus>,
}

impl Default for RewardSpec {
    fn default() -> Self {
        // A marker costs twice a preferred token's gain.
        Self { in_language_weight: 1.0, marker_penalty: 2.0, length_penalty: None, exploit: None }
    }
}

/// One language's scoring sets: in-language tokens and translationese markers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSets {
    pub preferred: BTreeSet<TokenId>,
    pub markers: BTreeSet<TokenId>,
}

/// A reward spec bound to per-language token sets, indexed by language id.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    pub spec: RewardSpec,
    sets: Vec<TokenSets>,
}

impl RewardModel {
    pub fn new(spec: RewardSpec, sets: Vec<TokenSets>) -> Self {
        Self { spec, sets }
    }

    pub fn num_languages(&self) -> usize {
        self.sets.len()
    }

    pub fn sets(&self, lang: LanguageId) -> &TokenSets {
        &self.sets[lang.index()]
    }

    /// Same token sets under a different spec.
    pub fn with_spec(&self, spec: RewardSpec) -> Self {
        Self { spec, sets: self.sets.clone() }
    }

    /// Deterministic scalar reward of a completion for a prompt.
    ///
    /// Fractions are over content tokens (eos excluded); an eos-only
    /// completion scores zero on both fractions so degenerate policies stay
    /// visibly unrewarded.
    pub fn score(&self, prompt: &Prompt, y: &Completion) -> f64 {
        let sets = self.sets(prompt.language);
        let content = y.content();
        let n = content.len();
        let (mut preferred, mut markers, mut exploit_hits) = (0usize, 0usize, 0usize);
        for &t in content {
            if sets.preferred.contains(&t) {
                preferred += 1;
            }
            if sets.markers.contains(&t) {
                markers += 1;
            }
            if let Some(e) = &self.spec.exploit {
                if t == e.token {
                    exploit_hits += 1;
                }
            }
        }
        let (pref_frac, marker_frac) = if n == 0 {
            (0.0, 0.0)
        } else {
            (preferred as f64 / n as f64, markers as f64 / n as f64)
        };
        let mut score =
            self.spec.in_language_weight * pref_frac - self.spec.marker_penalty * marker_frac;
        if let Some(lp) = &self.spec.length_penalty {
            let d = n as f64 - lp.target as f64;
            score -= lp.weight * d * d;
        }
        if let Some(e) = &self.spec.exploit {
            score += e.bonus * exploit_hits as f64;
        }
        score
    }
}

/// Bradley-Terry probability that the first item is preferred: `sigma(r1 - r2)`.
pub fn bt_prob<S: Scalar>(r1: S, r2: S) -> S {
    sigmoid(r1 - r2)
}

/// Outcome of comparing two completions under a reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    FirstWins,
    SecondWins,
    Tie,
}

impl Label {
    pub fn flipped(self) -> Self {
        match self {
            Label::FirstWins => Label::SecondWins,
            Label::SecondWins => Label::FirstWins,
            Label::Tie => Label::Tie,
        }
    }
}

/// Label a pair of completions: a tie when the score gap is inside
/// `tie_epsilon`, otherwise the higher score wins.
pub fn label(
    reward: &RewardModel,
    prompt: &Prompt,
    y1: &Completion,
    y2: &Completion,
    tie_epsilon: f64,
) -> Label {
    label_scores(reward.score(prompt, y1), reward.score(prompt, y2), tie_epsilon)
}

/// [`label`] on precomputed scores.
pub fn label_scores(s1: f64, s2: f64, tie_epsilon: f64) -> Label {
    if (s1 - s2).abs() < tie_epsilon {
        Label::Tie
    } else if s1 > s2 {
        Label::FirstWins
    } else {
        Label::SecondWins
    }
}

/// KL-shaped per-sample reward: `R - beta * (logp - logp_ref)`.
pub fn shaped_reward<S: Scalar>(r: S, logp: S, logp_ref: S, beta: S) -> S {
    r - beta * (logp - logp_ref)
}
