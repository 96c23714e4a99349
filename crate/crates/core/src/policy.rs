//! Log-linear first-order Markov autoregressive policy.
//!
//! The policy conditions each next-token distribution on three one-hot
//! features: the previous token (a begin-of-sequence pseudo-token reuses the
//! eos slot, which is unambiguous because eos never occurs mid-sequence), the
//! language tag, and a constant bias. With `F = V + K + 1` feature rows the
//! weights form an `F x V` matrix and every conditional is an exact softmax
//! over `V` tokens.
//!
//! Sequence semantics: a completion is produced by up to `max_len` free draws
//! from the conditional; if eos has not been drawn after `max_len` content
//! tokens it is appended with probability one. `log_prob` scores exactly that
//! process (the forced tail contributes no factor), so `exp(log_prob)` equals
//! the completion's probability mass under full enumeration and the
//! score-function expectation identity holds to machine precision.
//!
//! Temperature applies to logits at sampling time only; scoring and gradients
//! always use temperature 1.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{log_sum_exp, Scalar};
use crate::types::{Completion, LanguageId, Prompt, TokenId, VocabSpec};

/// Hard state-count guard for the enumeration oracle.
pub const ENUMERATION_GUARD: u128 = 1_000_000;

/// Sampling temperatures below this are treated as greedy argmax decoding.
pub const GREEDY_TEMPERATURE: f64 = 1e-6;

/// Conditioning token for the next-step distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Prev {
    /// Begin of sequence; shares the eos feature slot.
    Bos,
    Token(TokenId),
}

impl Prev {
    /// The conditioning context at the start of a completion: the last prompt
    /// token, or BOS for an empty prompt.
    pub fn from_prompt(prompt: &Prompt) -> Self {
        match prompt.tokens.last() {
            Some(&t) => Prev::Token(t),
            None => Prev::Bos,
        }
    }
}

/// Dense `F x V` matrix used for both weights and gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMat<S> {
    data: Vec<S>,
    rows: usize,
    cols: usize,
}

impl<S: Scalar> WeightMat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { data: vec![S::zero(); rows * cols], rows, cols }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: S) {
        self.data[row * self.cols + col] = value;
    }

    #[inline]
    pub fn add_at(&mut self, row: usize, col: usize, value: S) {
        self.data[row * self.cols + col] = self.data[row * self.cols + col] + value;
    }

    pub fn row(&self, row: usize) -> &[S] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// `self += scale * other`, entry by entry in index order.
    pub fn add_scaled(&mut self, other: &WeightMat<S>, scale: S) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + scale * b;
        }
    }

    pub fn scale(&mut self, factor: S) {
        for a in self.data.iter_mut() {
            *a = *a * factor;
        }
    }

    pub fn norm_l2(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc + x * x).sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &x| acc.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Trainable weights of the log-linear policy, with its vocabulary and
/// language count. A frozen value of the same type serves as the reference
/// policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<S> {
    weights: WeightMat<S>,
    vocab: VocabSpec,
    num_languages: u16,
}

/// Temperature sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(temperature: f64, max_len: usize, seed: u64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::config("sampling temperature must be positive"));
        }
        if max_len == 0 {
            return Err(Error::config("sampling max_len must be at least 1"));
        }
        Ok(Self { temperature, max_len, seed })
    }
}

impl<S: Scalar> PolicyParams<S> {
    pub fn zeros(vocab: VocabSpec, num_languages: u16) -> Self {
        let rows = vocab.size as usize + num_languages as usize + 1;
        Self { weights: WeightMat::zeros(rows, vocab.size as usize), vocab, num_languages }
    }

    /// Uniform random weights in `[-scale, scale]`, for tests and probes.
    pub fn random(vocab: VocabSpec, num_languages: u16, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(vocab, num_languages);
        for w in p.weights.as_mut_slice().iter_mut() {
            *w = S::from_f64_lossy((rng.gen::<f64>() * 2.0 - 1.0) * scale);
        }
        p
    }

    pub fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    pub fn num_languages(&self) -> u16 {
        self.num_languages
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.size as usize
    }

    /// Feature dimension `F = V + K + 1`.
    pub fn feature_dim(&self) -> usize {
        self.vocab.size as usize + self.num_languages as usize + 1
    }

    pub fn weights(&self) -> &WeightMat<S> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut WeightMat<S> {
        &mut self.weights
    }

    /// Rebuild from raw parts (checkpoint loading).
    pub fn from_weights(weights: WeightMat<S>, vocab: VocabSpec, num_languages: u16) -> Result<Self> {
        let rows = vocab.size as usize + num_languages as usize + 1;
        if weights.rows() != rows || weights.cols() != vocab.size as usize {
            return Err(Error::config(format!(
                "weight shape {}x{} inconsistent with V={} K={}",
                weights.rows(),
                weights.cols(),
                vocab.size,
                num_languages
            )));
        }
        Ok(Self { weights, vocab, num_languages })
    }

    #[inline]
    pub fn prev_row(&self, prev: Prev) -> usize {
        match prev {
            Prev::Bos => self.vocab.eos as usize,
            Prev::Token(t) => t as usize,
        }
    }

    #[inline]
    pub fn lang_row(&self, lang: LanguageId) -> usize {
        self.vocab.size as usize + lang.index()
    }

    #[inline]
    pub fn bias_row(&self) -> usize {
        self.vocab.size as usize + self.num_languages as usize
    }

    fn check_lang(&self, lang: LanguageId) -> Result<()> {
        if lang.0 >= self.num_languages {
            return Err(Error::LanguageOutOfRange { lang: lang.0, num_languages: self.num_languages });
        }
        Ok(())
    }

    /// Same vocabulary and language count; required of policy/reference pairs.
    pub fn same_shape(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.num_languages == other.num_languages
    }

    fn logits_into(&self, prev: Prev, lang: LanguageId, out: &mut [S]) {
        let rp = self.weights.row(self.prev_row(prev));
        let rl = self.weights.row(self.lang_row(lang));
        let rb = self.weights.row(self.bias_row());
        for v in 0..out.len() {
            out[v] = rp[v] + rl[v] + rb[v];
        }
    }

    /// Next-token logits for a conditioning context.
    pub fn logits(&self, prev: Prev, lang: LanguageId) -> Result<Vec<S>> {
        self.check_lang(lang)?;
        let mut out = vec![S::zero(); self.vocab_size()];
        self.logits_into(prev, lang, &mut out);
        Ok(out)
    }

    fn log_softmax_into(&self, prev: Prev, lang: LanguageId, out: &mut [S]) {
        self.logits_into(prev, lang, out);
        let lse = log_sum_exp(out);
        for x in out.iter_mut() {
            *x = *x - lse;
        }
    }

    /// Exact log-probability of a completion given a prompt.
    ///
    /// The final eos contributes a factor only when the content is shorter
    /// than `vocab.max_len`; at full length the eos is forced and carries
    /// probability one.
    pub fn log_prob(&self, prompt: &Prompt, completion: &Completion) -> S {
        debug_assert!(completion.content_len() <= self.vocab.max_len);
        let lang = prompt.language;
        self.check_lang(lang).expect("prompt language within registry");
        let mut prev = Prev::from_prompt(prompt);
        let mut buf = vec![S::zero(); self.vocab_size()];
        let mut total = S::zero();
        for (i, &tok) in completion.tokens.iter().enumerate() {
            let is_final_eos = i + 1 == completion.tokens.len();
            if is_final_eos && completion.content_len() == self.vocab.max_len {
                break; // forced eos, probability one
            }
            self.log_softmax_into(prev, lang, &mut buf);
            total = total + buf[tok as usize];
            prev = Prev::Token(tok);
        }
        total
    }

    /// Exact gradient of [`Self::log_prob`] with respect to every weight.
    ///
    /// At entry `[f, v]` the gradient is `sum_t (1[y_t = v] - p_t(v)) *
    /// phi_t[f]`, where each step activates the previous-token, language, and
    /// bias rows.
    pub fn grad_log_prob(&self, prompt: &Prompt, completion: &Completion) -> WeightMat<S> {
        let lang = prompt.language;
        self.check_lang(lang).expect("prompt language within registry");
        let v_size = self.vocab_size();
        let mut grad = WeightMat::zeros(self.feature_dim(), v_size);
        let mut prev = Prev::from_prompt(prompt);
        let mut buf = vec![S::zero(); v_size];
        for (i, &tok) in completion.tokens.iter().enumerate() {
            let is_final_eos = i + 1 == completion.tokens.len();
            if is_final_eos && completion.content_len() == self.vocab.max_len {
                break;
            }
            self.log_softmax_into(prev, lang, &mut buf);
            let rows = [self.prev_row(prev), self.lang_row(lang), self.bias_row()];
            for v in 0..v_size {
                let p = buf[v].exp();
                let indicator = if v == tok as usize { S::one() } else { S::zero() };
                let delta = indicator - p;
                for &f in &rows {
                    grad.add_at(f, v, delta);
                }
            }
            prev = Prev::Token(tok);
        }
        grad
    }

    /// Draw one completion autoregressively at the configured temperature.
    ///
    /// Greedy argmax when the temperature is below [`GREEDY_TEMPERATURE`];
    /// eos is forced after `cfg.max_len` content tokens.
    pub fn sample(&self, prompt: &Prompt, cfg: &SamplingConfig, rng: &mut impl Rng) -> Completion {
        let lang = prompt.language;
        self.check_lang(lang).expect("prompt language within registry");
        let v_size = self.vocab_size();
        let eos = self.vocab.eos;
        let greedy = cfg.temperature < GREEDY_TEMPERATURE;
        let inv_t = S::from_f64_lossy(1.0 / cfg.temperature.max(GREEDY_TEMPERATURE));
        let mut prev = Prev::from_prompt(prompt);
        let mut tokens = Vec::with_capacity(cfg.max_len + 1);
        let mut buf = vec![S::zero(); v_size];
        for _ in 0..cfg.max_len {
            self.logits_into(prev, lang, &mut buf);
            let tok = if greedy {
                let mut best = 0usize;
                for v in 1..v_size {
                    if buf[v] > buf[best] {
                        best = v;
                    }
                }
                best as TokenId
            } else {
                for x in buf.iter_mut() {
                    *x = *x * inv_t;
                }
                let lse = log_sum_exp(&buf);
                let u: f64 = rng.gen();
                let mut acc = 0.0f64;
                let mut pick = v_size - 1;
                for v in 0..v_size {
                    acc += (buf[v] - lse).exp().as_f64();
                    if u < acc {
                        pick = v;
                        break;
                    }
                }
                pick as TokenId
            };
            tokens.push(tok);
            if tok == eos {
                return Completion::new(tokens, lang);
            }
            prev = Prev::Token(tok);
        }
        tokens.push(eos); // forced
        Completion::new(tokens, lang)
    }

    /// Exact KL divergence between one conditional of `self` and of `ref`.
    pub fn conditional_kl(&self, reference: &Self, prev: Prev, lang: LanguageId) -> S {
        assert!(self.same_shape(reference), "policy and reference must share V and K");
        self.check_lang(lang).expect("language within registry");
        let v_size = self.vocab_size();
        let mut lp = vec![S::zero(); v_size];
        let mut lq = vec![S::zero(); v_size];
        self.log_softmax_into(prev, lang, &mut lp);
        reference.log_softmax_into(prev, lang, &mut lq);
        let mut kl = S::zero();
        for v in 0..v_size {
            kl = kl + lp[v].exp() * (lp[v] - lq[v]);
        }
        kl.max(S::zero())
    }

    /// Exhaustively enumerate every completion of content length up to
    /// `max_len` with its exact probability. Probabilities sum to one.
    ///
    /// Refuses when `V^max_len` exceeds [`ENUMERATION_GUARD`].
    pub fn enumerate_completions(
        &self,
        prompt: &Prompt,
        max_len: usize,
    ) -> Result<Vec<(Completion, S)>> {
        let lang = prompt.language;
        self.check_lang(lang)?;
        let v = self.vocab.size as u128;
        let states = v
            .checked_pow(max_len as u32)
            .ok_or(Error::EnumerationGuard { states: u128::MAX, limit: ENUMERATION_GUARD })?;
        if states > ENUMERATION_GUARD {
            return Err(Error::EnumerationGuard { states, limit: ENUMERATION_GUARD });
        }
        let mut out = Vec::new();
        let mut prefix: Vec<TokenId> = Vec::with_capacity(max_len + 1);
        // Depth-first walk over drawn prefixes; probability is the running
        // product of conditional masses. Each node owns its conditional
        // vector since children recompute theirs.
        fn walk<S: Scalar>(
            policy: &PolicyParams<S>,
            lang: LanguageId,
            prev: Prev,
            depth: usize,
            max_len: usize,
            prob: S,
            prefix: &mut Vec<TokenId>,
            out: &mut Vec<(Completion, S)>,
        ) {
            let mut buf = vec![S::zero(); policy.vocab_size()];
            policy.log_softmax_into(prev, lang, &mut buf);
            let eos = policy.vocab.eos;
            for tok in 0..policy.vocab_size() as TokenId {
                let p = prob * buf[tok as usize].exp();
                if tok == eos {
                    let mut tokens = prefix.clone();
                    tokens.push(eos);
                    out.push((Completion::new(tokens, lang), p));
                } else if depth + 1 == max_len {
                    // Forced eos tail: no further factor.
                    let mut tokens = prefix.clone();
                    tokens.push(tok);
                    tokens.push(eos);
                    out.push((Completion::new(tokens, lang), p));
                } else {
                    prefix.push(tok);
                    walk(policy, lang, Prev::Token(tok), depth + 1, max_len, p, prefix, out);
                    prefix.pop();
                }
            }
        }
        walk(self, lang, Prev::from_prompt(prompt), 0, max_len, S::one(), &mut prefix, &mut out);
        Ok(out)
    }
}
