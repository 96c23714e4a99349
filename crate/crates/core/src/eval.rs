//! Pairwise win-rate evaluation: a deterministic simulated judge with tie
//! support and presentation-order randomization, win/tie/loss aggregation
//! with the win-minus-loss delta, and inter-judge agreement.

use std::collections::BTreeMap;

use rand::Rng;

use crate::policy::{PolicyParams, SamplingConfig};
use crate::reward::{label_scores, Label, RewardModel};
use crate::scalar::Scalar;
use crate::seed::{self, stream};
use crate::types::{Completion, LanguageId, Prompt};

/// The simulated judge: a reward model (the clean one, by default) plus a tie
/// threshold and the seed governing presentation order.
#[derive(Debug, Clone)]
pub struct JudgeSpec {
    pub reward: RewardModel,
    pub tie_epsilon: f64,
    pub position_seed: u64,
}

/// Judge verdict in the caller's A/B identities.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    AWins,
    BWins,
    Tie,
}

/// Which completion was displayed first; recorded so the randomized
/// presentation is auditable even though scoring is order-invariant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Presentation {
    pub a_shown_first: bool,
}

/// Judge one pair of completions. The verdict is computed on reward scores
/// and mapped back to A/B identities, so it cannot depend on the drawn
/// presentation order; the record proves which order was shown.
pub fn judge_pair(
    judge: &JudgeSpec,
    prompt: &Prompt,
    completion_a: &Completion,
    completion_b: &Completion,
    presentation_seed: u64,
) -> (Verdict, Presentation) {
    let mut rng = seed::rng(judge.position_seed, &[stream::PRESENTATION, presentation_seed]);
    let a_shown_first: bool = rng.gen();
    let score_a = judge.reward.score(prompt, completion_a);
    let score_b = judge.reward.score(prompt, completion_b);
    let verdict = match label_scores(score_a, score_b, judge.tie_epsilon) {
        Label::FirstWins => Verdict::AWins,
        Label::SecondWins => Verdict::BWins,
        Label::Tie => Verdict::Tie,
    };
    (verdict, Presentation { a_shown_first })
}

/// Raw win/tie/loss counts (from policy A's perspective).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WinRateRow {
    pub win: usize,
    pub tie: usize,
    pub loss: usize,
}

impl WinRateRow {
    pub fn total(&self) -> usize {
        self.win + self.tie + self.loss
    }

    pub fn win_pct(&self) -> f64 {
        100.0 * self.win as f64 / self.total() as f64
    }

    pub fn tie_pct(&self) -> f64 {
        100.0 * self.tie as f64 / self.total() as f64
    }

    pub fn loss_pct(&self) -> f64 {
        100.0 * self.loss as f64 / self.total() as f64
    }

    /// Win% minus Loss%, from unrounded percentages.
    pub fn delta_wl(&self) -> f64 {
        self.win_pct() - self.loss_pct()
    }

    fn add(&mut self, verdict: Verdict) {
        match verdict {
            Verdict::AWins => self.win += 1,
            Verdict::Tie => self.tie += 1,
            Verdict::BWins => self.loss += 1,
        }
    }

    fn merge(&mut self, other: &WinRateRow) {
        self.win += other.win;
        self.tie += other.tie;
        self.loss += other.loss;
    }
}

/// Round to one decimal place, as the report tables print.
pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Per-language and aggregate win/tie/loss between two policies.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WinRateReport {
    pub per_language: BTreeMap<LanguageId, WinRateRow>,
}

impl WinRateReport {
    pub fn aggregate(&self) -> WinRateRow {
        self.subset(self.per_language.keys().copied())
    }

    /// Aggregate over a subset of languages (e.g. the unseen split).
    pub fn subset(&self, langs: impl IntoIterator<Item = LanguageId>) -> WinRateRow {
        let mut row = WinRateRow::default();
        for lang in langs {
            if let Some(r) = self.per_language.get(&lang) {
                row.merge(r);
            }
        }
        row
    }
}

/// Head-to-head win rate of `policy_a` against `policy_b`.
///
/// For each prompt, one completion is sampled from each policy; the two draws
/// use identically seeded per-prompt streams, so identical policies produce
/// identical completions (and an all-tie report).
pub fn win_rate<S: Scalar>(
    policy_a: &PolicyParams<S>,
    policy_b: &PolicyParams<S>,
    prompts: &BTreeMap<LanguageId, Vec<Prompt>>,
    judge: &JudgeSpec,
    sampling: &SamplingConfig,
) -> WinRateReport {
    assert!(
        prompts.values().any(|p| !p.is_empty()),
        "win_rate requires at least one prompt"
    );
    let mut report = WinRateReport::default();
    for (&lang, lang_prompts) in prompts {
        let row = report.per_language.entry(lang).or_default();
        for (i, prompt) in lang_prompts.iter().enumerate() {
            let parts = [stream::EVAL_COMPLETION, lang.0 as u64, i as u64];
            let ya = policy_a.sample(prompt, sampling, &mut seed::rng(sampling.seed, &parts));
            let yb = policy_b.sample(prompt, sampling, &mut seed::rng(sampling.seed, &parts));
            let presentation_seed = seed::derive(lang.0 as u64, &[i as u64]);
            let (verdict, _) = judge_pair(judge, prompt, &ya, &yb, presentation_seed);
            row.add(verdict);
        }
    }
    report
}

/// Inter-judge agreement over fixed (prompt, completion, completion) triples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgreementReport {
    /// Fraction of identical verdicts; ties agree only when both say tie.
    pub rate: f64,
    pub judge1_tie_rate: f64,
    pub judge2_tie_rate: f64,
    pub pairs: usize,
}

pub fn agreement(
    judge1: &JudgeSpec,
    judge2: &JudgeSpec,
    pairs: &[(Prompt, Completion, Completion)],
) -> AgreementReport {
    assert!(!pairs.is_empty(), "agreement requires at least one pair");
    let mut same = 0usize;
    let mut ties = (0usize, 0usize);
    for (i, (prompt, y1, y2)) in pairs.iter().enumerate() {
        let (v1, _) = judge_pair(judge1, prompt, y1, y2, i as u64);
        let (v2, _) = judge_pair(judge2, prompt, y1, y2, i as u64);
        if v1 == v2 {
            same += 1;
        }
        if v1 == Verdict::Tie {
            ties.0 += 1;
        }
        if v2 == Verdict::Tie {
            ties.1 += 1;
        }
    }
    let n = pairs.len() as f64;
    AgreementReport {
        rate: same as f64 / n,
        judge1_tie_rate: ties.0 as f64 / n,
        judge2_tie_rate: ties.1 as f64 / n,
        pairs: pairs.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::{RewardSpec, TokenSets};
    use crate::synthlang::make_environment;
    use crate::types::VocabSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lang(i: u16) -> LanguageId {
        LanguageId(i)
    }

    /// V = 16, eos = 15; preferred {0..5}, markers {8, 9}.
    fn judge(tie_epsilon: f64) -> JudgeSpec {
        let sets = TokenSets {
            preferred: (0..6).collect(),
            markers: [8, 9].into_iter().collect(),
        };
        JudgeSpec {
            reward: RewardModel::new(RewardSpec::default(), vec![sets]),
            tie_epsilon,
            position_seed: 99,
        }
    }

    #[test]
    fn verdict_is_presentation_invariant() {
        let j = judge(0.05);
        let prompt = Prompt::empty(lang(0));
        let hi = Completion::new(vec![0, 1, 2, 3, 4, 5, 0, 1, 8, 7, 15], lang(0)); // 0.6
        let lo = Completion::new(vec![0, 1, 2, 7, 7, 7, 7, 7, 7, 7, 15], lang(0)); // 0.3
        let mut seen_orders = (false, false);
        for s in 0..32u64 {
            let (v, p) = judge_pair(&j, &prompt, &hi, &lo, s);
            assert_eq!(v, Verdict::AWins);
            if p.a_shown_first {
                seen_orders.0 = true;
            } else {
                seen_orders.1 = true;
            }
        }
        assert!(seen_orders.0 && seen_orders.1, "both presentation orders occur");
    }

    #[test]
    fn identical_completions_tie() {
        let j = judge(0.05);
        let prompt = Prompt::empty(lang(0));
        let y = Completion::new(vec![0, 3, 15], lang(0));
        let (v, _) = judge_pair(&j, &prompt, &y, &y.clone(), 7);
        assert_eq!(v, Verdict::Tie);
    }

    #[test]
    fn row_percentages_and_delta() {
        let row = WinRateRow { win: 2, tie: 1, loss: 1 };
        assert_eq!(row.win_pct(), 50.0);
        assert_eq!(row.tie_pct(), 25.0);
        assert_eq!(row.loss_pct(), 25.0);
        assert_eq!(round1(row.delta_wl()), 25.0);
    }

    #[test]
    fn delta_arithmetic_reproduces_reported_rows() {
        assert_eq!(round1(54.4 - 35.8), 18.6);
        assert_eq!(round1(46.4 - 38.9), 7.5);
        assert_eq!(round1(43.3 - 40.6), 2.7);
    }

    fn env_policies() -> (
        crate::synthlang::Environment<f64>,
        PolicyParams<f64>,
        PolicyParams<f64>,
    ) {
        let env = make_environment::<f64>(3, VocabSpec::new(16, 4).unwrap(), 0.5, 11).unwrap();
        let uniform = PolicyParams::<f64>::zeros(env.vocab, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let other = PolicyParams::<f64>::random(env.vocab, 3, 0.8, &mut rng);
        (env, uniform, other)
    }

    fn eval_prompts(
        env: &crate::synthlang::Environment<f64>,
        n: usize,
    ) -> BTreeMap<LanguageId, Vec<Prompt>> {
        let cfg = crate::synthlang::DataGenConfig::new(3, 4, 5, 1e-6);
        env.languages().map(|l| (l, env.gen_prompts(l, n, &cfg))).collect()
    }

    #[test]
    fn identical_policies_tie_everywhere() {
        let (env, uniform, _) = env_policies();
        let judge = JudgeSpec {
            reward: env.reward_model(RewardSpec::default()),
            tie_epsilon: 1e-9,
            position_seed: 1,
        };
        let sampling = SamplingConfig::new(0.75, 4, 42).unwrap();
        let prompts = eval_prompts(&env, 20);
        let report = win_rate(&uniform, &uniform.clone(), &prompts, &judge, &sampling);
        let agg = report.aggregate();
        assert_eq!(agg.tie, agg.total());
        assert_eq!(agg.total(), 60);
    }

    #[test]
    fn reports_are_antisymmetric_and_partition() {
        let (env, uniform, other) = env_policies();
        let judge = JudgeSpec {
            reward: env.reward_model(RewardSpec::default()),
            tie_epsilon: 1e-9,
            position_seed: 1,
        };
        let sampling = SamplingConfig::new(0.75, 4, 42).unwrap();
        let prompts = eval_prompts(&env, 25);
        let ab = win_rate(&other, &uniform, &prompts, &judge, &sampling);
        let ba = win_rate(&uniform, &other, &prompts, &judge, &sampling);
        for (lang, row) in &ab.per_language {
            let rev = &ba.per_language[lang];
            assert_eq!(row.win, rev.loss);
            assert_eq!(row.loss, rev.win);
            assert_eq!(row.tie, rev.tie);
            assert_eq!(row.total(), 25);
        }
        let (a, b) = (ab.aggregate(), ba.aggregate());
        assert!((a.delta_wl() + b.delta_wl()).abs() < 1e-12);
    }

    #[test]
    fn subset_aggregation_matches_manual_merge() {
        let mut report = WinRateReport::default();
        report.per_language.insert(lang(0), WinRateRow { win: 3, tie: 1, loss: 0 });
        report.per_language.insert(lang(1), WinRateRow { win: 0, tie: 2, loss: 2 });
        report.per_language.insert(lang(2), WinRateRow { win: 1, tie: 1, loss: 2 });
        let sub = report.subset([lang(1), lang(2)]);
        assert_eq!(sub, WinRateRow { win: 1, tie: 3, loss: 4 });
        assert_eq!(report.aggregate().total(), 12);
    }

    #[test]
    fn identical_judges_agree_perfectly() {
        let j = judge(0.05);
        let prompt = Prompt::empty(lang(0));
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        use rand::Rng;
        let pairs: Vec<(Prompt, Completion, Completion)> = (0..50)
            .map(|_| {
                let mk = |rng: &mut ChaCha8Rng| {
                    let len = rng.gen_range(1..5usize);
                    let mut t: Vec<u32> = (0..len).map(|_| rng.gen_range(0..15)).collect();
                    t.push(15);
                    Completion::new(t, lang(0))
                };
                (prompt.clone(), mk(&mut rng), mk(&mut rng))
            })
            .collect();
        let report = agreement(&j, &j.clone(), &pairs);
        assert_eq!(report.rate, 1.0);
        assert_eq!(report.judge1_tie_rate, report.judge2_tie_rate);
    }

    #[test]
    fn sign_flipped_judges_disagree_on_every_decided_pair() {
        let j1 = judge(0.01);
        let mut j2 = judge(0.01);
        j2.reward = j2.reward.with_spec(RewardSpec {
            in_language_weight: -1.0,
            marker_penalty: -2.0,
            length_penalty: None,
            exploit: None,
        });
        let prompt = Prompt::empty(lang(0));
        // Score gaps exceed both epsilons, so no verdict is a tie.
        let pairs: Vec<(Prompt, Completion, Completion)> = (0..20)
            .map(|i| {
                let good = Completion::new(vec![0, 1, 2, 15], lang(0));
                let bad = Completion::new(vec![8, 9, (i % 3) + 10, 15], lang(0));
                (prompt.clone(), good, bad)
            })
            .collect();
        let report = agreement(&j1, &j2, &pairs);
        assert_eq!(report.rate, 0.0);
    }

    #[test]
    fn inflating_tie_epsilon_cuts_agreement_to_the_decided_fraction() {
        let j1 = judge(1e-9);
        let j2 = judge(0.5); // everything with |gap| < 0.5 becomes a tie
        let prompt = Prompt::empty(lang(0));
        // Gaps: 1.0 (decided by both) for even i, 0.25 (decided only by j1)
        // for odd i.
        let pairs: Vec<(Prompt, Completion, Completion)> = (0..40)
            .map(|i| {
                let strong = Completion::new(vec![0, 1, 2, 3, 15], lang(0)); // 1.0
                let weak = if i % 2 == 0 {
                    Completion::new(vec![7, 7, 7, 7, 15], lang(0)) // 0.0: gap 1.0
                } else {
                    Completion::new(vec![0, 7, 7, 7, 15], lang(0)) // 0.25: gap 0.75
                };
                let weaker = if i % 2 == 0 {
                    weak
                } else {
                    Completion::new(vec![0, 0, 0, 7, 15], lang(0)) // 0.75: gap 0.25 vs strong
                };
                (prompt.clone(), strong, weaker)
            })
            .collect();
        // Direct count: pairs whose gap exceeds the larger epsilon.
        let decided_by_both = pairs
            .iter()
            .filter(|(p, a, b)| {
                (j1.reward.score(p, a) - j1.reward.score(p, b)).abs() >= 0.5
            })
            .count();
        let report = agreement(&j1, &j2, &pairs);
        assert_eq!(report.rate, decided_by_both as f64 / pairs.len() as f64);
        assert_eq!(report.judge1_tie_rate, 0.0);
        assert!(report.judge2_tie_rate > 0.0);
    }
}
