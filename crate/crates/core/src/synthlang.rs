//! Synthetic multilingual environment and preference-data pipeline.
//!
//! Each language owns a preferred-token set (partially shared with a global
//! universal set, the substrate for cross-lingual transfer) and a disjoint
//! marker-token set standing in for translationese artifacts. Completions
//! come from two channels: `direct` samples a language's own ground-truth
//! generator; `translated` samples the pivot generator, retags, and injects
//! marker tokens at a configurable per-token rate. Ranking both channels with
//! a reward yields preference pairs, and the marker rate can be calibrated by
//! bisection until the translated channel is rejected at a target fraction.

use std::collections::BTreeSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, SamplingConfig};
use crate::reward::{RewardModel, RewardSpec, TokenSets};
use crate::scalar::Scalar;
use crate::seed::{self, stream};
use crate::types::{Channel, Completion, LanguageId, PreferencePair, Prompt, TokenId, VocabSpec};

/// Logit advantage of a language's preferred tokens in its generator.
pub const PREFERRED_LOGIT: f64 = 4.0;
/// Logit handicap of a language's marker tokens in its generator.
pub const MARKER_LOGIT: f64 = -2.0;
/// Per-step stop probability the generator's eos logit is tuned to.
pub const EOS_STOP_PROB: f64 = 0.22;

/// Probe size per bisection step of [`Environment::calibrate_marker_rate`].
pub const CALIBRATION_PROBE_PAIRS: usize = 5_000;
/// Calibration stops when the achieved fraction is within this of the target.
pub const CALIBRATION_TOLERANCE: f64 = 0.01;
const CALIBRATION_MAX_ITERS: usize = 20;

/// One synthetic language: its token sets and ground-truth generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageProfile<S> {
    pub lang: LanguageId,
    pub sets: TokenSets,
    pub generator: PolicyParams<S>,
}

/// The translated channel: pivot-language generations with marker injection.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TranslationChannel {
    /// Per-token probability of substituting a marker token.
    pub marker_rate: f64,
    pub pivot: LanguageId,
}

impl Default for TranslationChannel {
    fn default() -> Self {
        Self { marker_rate: 0.3, pivot: LanguageId(0) }
    }
}

impl TranslationChannel {
    pub fn new(marker_rate: f64, pivot: LanguageId) -> Result<Self> {
        if !(0.0..=1.0).contains(&marker_rate) {
            return Err(Error::config("marker_rate must lie in [0, 1]"));
        }
        Ok(Self { marker_rate, pivot })
    }
}

/// Generation-time configuration for prompts and pairs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DataGenConfig {
    pub prompt_len: usize,
    pub completion_len: usize,
    pub seed: u64,
    pub tie_epsilon: f64,
}

impl DataGenConfig {
    pub fn new(prompt_len: usize, completion_len: usize, seed: u64, tie_epsilon: f64) -> Self {
        Self { prompt_len, completion_len, seed, tie_epsilon }
    }
}

/// The multilingual environment: vocabulary, universal token set, and one
/// profile per language. Pivot is language 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment<S> {
    pub vocab: VocabSpec,
    pub universal_fraction: f64,
    pub seed: u64,
    pub universal: BTreeSet<TokenId>,
    pub profiles: Vec<LanguageProfile<S>>,
}

/// Sizing of per-language token sets, derived from the vocabulary.
pub fn profile_sizes(vocab: &VocabSpec, universal_fraction: f64) -> (usize, usize, usize) {
    let n_pref = ((vocab.size as usize) / 8).max(4);
    let n_mark = (n_pref / 2).max(2);
    let n_universal = ((universal_fraction * n_pref as f64).round() as usize).min(n_pref);
    (n_pref, n_mark, n_universal)
}

/// Build a deterministic environment of `num_languages` profiles.
pub fn make_environment<S: Scalar>(
    num_languages: u16,
    vocab: VocabSpec,
    universal_fraction: f64,
    env_seed: u64,
) -> Result<Environment<S>> {
    if num_languages == 0 {
        return Err(Error::config("environment requires at least one language"));
    }
    if !(0.0..=1.0).contains(&universal_fraction) {
        return Err(Error::config("universal_fraction must lie in [0, 1]"));
    }
    let (n_pref, n_mark, n_universal) = profile_sizes(&vocab, universal_fraction);
    let n_specific = n_pref - n_universal;
    let pool_size = vocab.size as usize - 1; // eos excluded
    if pool_size < n_universal + n_specific + n_mark {
        return Err(Error::config(format!(
            "vocab too small: need {} non-eos tokens per language, have {}",
            n_universal + n_specific + n_mark,
            pool_size
        )));
    }

    let mut pool: Vec<TokenId> = vocab.content_tokens().collect();
    shuffle(&mut pool, &mut seed::rng(env_seed, &[stream::ENV]));
    let universal: BTreeSet<TokenId> = pool[..n_universal].iter().copied().collect();
    let rest: Vec<TokenId> = pool[n_universal..].to_vec();

    let mut profiles: Vec<LanguageProfile<S>> = Vec::with_capacity(num_languages as usize);
    for l in 0..num_languages {
        let lang = LanguageId(l);
        let mut salt = 0u64;
        let sets = loop {
            let mut candidates = rest.clone();
            shuffle(&mut candidates, &mut seed::rng(env_seed, &[stream::ENV, l as u64, salt]));
            let mut preferred: BTreeSet<TokenId> = universal.clone();
            preferred.extend(candidates[..n_specific].iter().copied());
            let markers: BTreeSet<TokenId> =
                candidates[n_specific..n_specific + n_mark].iter().copied().collect();
            let sets = TokenSets { preferred, markers };
            let distinct = profiles
                .iter()
                .all(|p: &LanguageProfile<S>| p.sets.preferred != sets.preferred && p.sets.markers != sets.markers);
            if distinct {
                break sets;
            }
            salt += 1;
            if salt > 64 {
                return Err(Error::config(
                    "vocab too small to draw pairwise-distinct language token sets",
                ));
            }
        };
        let generator = build_generator(&vocab, num_languages, lang, &sets);
        profiles.push(LanguageProfile { lang, sets, generator });
    }

    Ok(Environment { vocab, universal_fraction, seed: env_seed, universal, profiles })
}

/// Fisher-Yates with an explicit rng, for deterministic registry draws.
fn shuffle<T>(xs: &mut [T], rng: &mut impl Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Ground-truth generator for one language: preferred tokens get a logit
/// advantage, markers a handicap, and the eos logit is tuned so the per-step
/// stop probability is [`EOS_STOP_PROB`]. Previous-token rows stay zero, so
/// the generator's conditionals are position-independent.
pub fn build_generator<S: Scalar>(
    vocab: &VocabSpec,
    num_languages: u16,
    lang: LanguageId,
    sets: &TokenSets,
) -> PolicyParams<S> {
    let mut params = PolicyParams::<S>::zeros(*vocab, num_languages);
    let row = params.lang_row(lang);
    let mut mass = 0.0f64;
    for t in vocab.content_tokens() {
        let logit = if sets.preferred.contains(&t) {
            PREFERRED_LOGIT
        } else if sets.markers.contains(&t) {
            MARKER_LOGIT
        } else {
            0.0
        };
        mass += logit.exp();
        params.weights_mut().set(row, t as usize, S::from_f64_lossy(logit));
    }
    let eos_logit = (EOS_STOP_PROB / (1.0 - EOS_STOP_PROB) * mass).ln();
    params.weights_mut().set(row, vocab.eos as usize, S::from_f64_lossy(eos_logit));
    params
}

/// Outcome of marker-rate calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOutcome {
    pub marker_rate: f64,
    pub achieved: f64,
    /// True when the target was unreachable in [0, 1] and the nearest
    /// endpoint was returned instead.
    pub at_endpoint: bool,
}

impl<S: Scalar> Environment<S> {
    pub fn num_languages(&self) -> u16 {
        self.profiles.len() as u16
    }

    pub fn pivot(&self) -> LanguageId {
        LanguageId(0)
    }

    pub fn profile(&self, lang: LanguageId) -> &LanguageProfile<S> {
        &self.profiles[lang.index()]
    }

    pub fn languages(&self) -> impl Iterator<Item = LanguageId> + '_ {
        (0..self.profiles.len() as u16).map(LanguageId)
    }

    /// Bind a reward spec to this environment's token sets.
    pub fn reward_model(&self, spec: RewardSpec) -> RewardModel {
        RewardModel::new(spec, self.profiles.iter().map(|p| p.sets.clone()).collect())
    }

    fn check_cfg(&self, cfg: &DataGenConfig) {
        assert!(cfg.prompt_len <= self.vocab.max_len, "prompt_len exceeds global max_len");
        assert!(cfg.completion_len <= self.vocab.max_len, "completion_len exceeds global max_len");
    }

    /// One pivot-distributed prompt token, restricted to non-eos tokens.
    fn content_token(&self, rng: &mut impl Rng) -> TokenId {
        let pivot = self.profile(self.pivot());
        let logits = pivot
            .generator
            .logits(crate::policy::Prev::Bos, self.pivot())
            .expect("pivot language exists");
        let eos = self.vocab.eos as usize;
        let mut probs: Vec<f64> = logits.iter().map(|l| l.as_f64().exp()).collect();
        probs[eos] = 0.0;
        let total: f64 = probs.iter().sum();
        let u: f64 = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        for (v, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc && v != eos {
                return v as TokenId;
            }
        }
        // Rounding fallback: last non-eos token.
        (self.vocab.size - 2) as TokenId
    }

    /// Prompt `index` of the shared pivot stream, retagged to `lang`.
    ///
    /// Token content depends only on `(cfg.seed, index)`; languages share the
    /// underlying sequences by construction.
    pub fn gen_prompt(&self, lang: LanguageId, index: u64, cfg: &DataGenConfig) -> Prompt {
        self.check_cfg(cfg);
        let mut rng = seed::rng(cfg.seed, &[stream::PROMPT, index]);
        let tokens = (0..cfg.prompt_len).map(|_| self.content_token(&mut rng)).collect();
        Prompt::new(tokens, lang)
    }

    /// `n` prompts for one language.
    pub fn gen_prompts(&self, lang: LanguageId, n: usize, cfg: &DataGenConfig) -> Vec<Prompt> {
        (0..n as u64).map(|i| self.gen_prompt(lang, i, cfg)).collect()
    }

    /// Direct channel: sample the prompt language's own generator at
    /// temperature 1. No markers are injected.
    pub fn gen_direct(
        &self,
        prompt: &Prompt,
        cfg: &DataGenConfig,
        rng: &mut impl Rng,
    ) -> Completion {
        self.check_cfg(cfg);
        let profile = self.profile(prompt.language);
        let sampling = SamplingConfig { temperature: 1.0, max_len: cfg.completion_len, seed: 0 };
        profile.generator.sample(prompt, &sampling, rng)
    }

    /// Translated channel: sample the pivot generator, retag to the prompt's
    /// language, then independently replace each content token with a
    /// uniformly random marker token of the target language with probability
    /// `channel.marker_rate`.
    pub fn gen_translated(
        &self,
        channel: &TranslationChannel,
        prompt: &Prompt,
        cfg: &DataGenConfig,
        rng: &mut impl Rng,
    ) -> Completion {
        self.check_cfg(cfg);
        let pivot_profile = self.profile(channel.pivot);
        let pivot_prompt = prompt.retagged(channel.pivot);
        let sampling = SamplingConfig { temperature: 1.0, max_len: cfg.completion_len, seed: 0 };
        let drawn = pivot_profile.generator.sample(&pivot_prompt, &sampling, rng);
        let mut completion = drawn.retagged(prompt.language);
        let markers: Vec<TokenId> =
            self.profile(prompt.language).sets.markers.iter().copied().collect();
        let content_len = completion.content_len();
        for i in 0..content_len {
            let u: f64 = rng.gen();
            if u < channel.marker_rate {
                let pick = rng.gen_range(0..markers.len());
                completion.tokens[i] = markers[pick];
            }
        }
        completion
    }

    /// Draw one direct and one translated completion, rank them with the
    /// reward, and record channel provenance plus the labeling margin. Ties
    /// inside `cfg.tie_epsilon` go to the direct channel.
    ///
    /// Identical draws trigger up to 8 redraws of the translated channel,
    /// then a deterministic one-token perturbation.
    pub fn build_pair(
        &self,
        channel: &TranslationChannel,
        reward: &RewardModel,
        prompt: &Prompt,
        cfg: &DataGenConfig,
        rng: &mut impl Rng,
    ) -> PreferencePair {
        let direct = self.gen_direct(prompt, cfg, rng);
        let mut translated = self.gen_translated(channel, prompt, cfg, rng);
        let mut redraws = 0;
        while translated.tokens == direct.tokens && redraws < 8 {
            translated = self.gen_translated(channel, prompt, cfg, rng);
            redraws += 1;
        }
        if translated.tokens == direct.tokens {
            translated = self.perturb_one_token(&translated, prompt.language);
        }
        let score_direct = reward.score(prompt, &direct);
        let score_translated = reward.score(prompt, &translated);
        let gap = score_direct - score_translated;
        let direct_wins = gap.abs() < cfg.tie_epsilon || gap > 0.0;
        let (chosen, rejected, channel_chosen, channel_rejected) = if direct_wins {
            (direct, translated, Channel::Direct, Channel::Translated)
        } else {
            (translated, direct, Channel::Translated, Channel::Direct)
        };
        PreferencePair {
            prompt: prompt.clone(),
            chosen,
            rejected,
            channel_chosen,
            channel_rejected,
            labeler_margin: gap.abs(),
        }
    }

    /// Deterministic tie-breaker for identical draws: swap the first content
    /// token for the language's smallest other marker, or append one marker
    /// to an eos-only completion.
    fn perturb_one_token(&self, completion: &Completion, lang: LanguageId) -> Completion {
        let markers = &self.profile(lang).sets.markers;
        let mut tokens = completion.tokens.clone();
        if tokens.len() == 1 {
            let m = *markers.iter().next().expect("markers are non-empty");
            tokens.insert(0, m);
        } else {
            let current = tokens[0];
            let m = markers
                .iter()
                .copied()
                .find(|&m| m != current)
                .expect("at least two marker tokens");
            tokens[0] = m;
        }
        Completion::new(tokens, lang)
    }

    /// Translated-channel rejection fraction over `n` seeded pairs spread
    /// round-robin across all languages.
    pub fn measure_rejected_fraction(
        &self,
        channel: &TranslationChannel,
        reward: &RewardModel,
        cfg: &DataGenConfig,
        n: usize,
    ) -> f64 {
        let k = self.profiles.len() as u64;
        let mut rejected = 0usize;
        for i in 0..n as u64 {
            let lang = LanguageId((i % k) as u16);
            let prompt = self.gen_prompt(lang, i, cfg);
            let mut rng = seed::rng(cfg.seed, &[stream::CALIBRATE, i]);
            let pair = self.build_pair(channel, reward, &prompt, cfg, &mut rng);
            if pair.channel_rejected == Channel::Translated {
                rejected += 1;
            }
        }
        rejected as f64 / n as f64
    }

    /// Bisect the marker rate until the translated channel is rejected at
    /// `target` (within [`CALIBRATION_TOLERANCE`]), probing
    /// [`CALIBRATION_PROBE_PAIRS`] pairs per step with common random numbers.
    ///
    /// An unreachable target returns the nearest endpoint, flagged.
    pub fn calibrate_marker_rate(
        &self,
        reward: &RewardModel,
        target: f64,
        cfg: &DataGenConfig,
    ) -> Result<CalibrationOutcome> {
        if !(0.0 < target && target < 1.0) {
            return Err(Error::config("calibration target must lie in (0, 1)"));
        }
        let pivot = self.pivot();
        let probe = |rate: f64| {
            let channel = TranslationChannel { marker_rate: rate, pivot };
            self.measure_rejected_fraction(&channel, reward, cfg, CALIBRATION_PROBE_PAIRS)
        };
        let m0 = probe(0.0);
        if m0 >= target {
            return Ok(CalibrationOutcome {
                marker_rate: 0.0,
                achieved: m0,
                at_endpoint: (m0 - target).abs() > CALIBRATION_TOLERANCE,
            });
        }
        let m1 = probe(1.0);
        if m1 <= target {
            // Rejection is (statistically) nondecreasing in the marker rate,
            // so a target above the rate-1 fraction is unreachable. Return
            // whichever endpoint sits closer.
            let (rate, achieved) =
                if (m0 - target).abs() <= (m1 - target).abs() { (0.0, m0) } else { (1.0, m1) };
            return Ok(CalibrationOutcome {
                marker_rate: rate,
                achieved,
                at_endpoint: (achieved - target).abs() > CALIBRATION_TOLERANCE,
            });
        }
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let (mut rate, mut achieved) = (0.5 * (lo + hi), f64::NAN);
        for _ in 0..CALIBRATION_MAX_ITERS {
            rate = 0.5 * (lo + hi);
            achieved = probe(rate);
            if (achieved - target).abs() <= CALIBRATION_TOLERANCE {
                return Ok(CalibrationOutcome { marker_rate: rate, achieved, at_endpoint: false });
            }
            if achieved < target {
                lo = rate;
            } else {
                hi = rate;
            }
        }
        Ok(CalibrationOutcome { marker_rate: rate, achieved, at_endpoint: false })
    }
}
