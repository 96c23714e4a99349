//! Declarative preference-data mixtures: which languages participate and how
//! the example budget is split among them.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::RewardModel;
use crate::scalar::Scalar;
use crate::seed::{self, stream};
use crate::synthlang::{DataGenConfig, Environment, TranslationChannel};
use crate::types::{Dataset, LanguageId, Provenance};

/// Budget mode: one fixed total split evenly, or a fixed count per language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    FixedTotal(usize),
    PerLanguage(usize),
}

/// A mixture recipe: ordered language list plus a budget mode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub name: String,
    pub languages: Vec<LanguageId>,
    pub mode: BudgetMode,
}

impl MixtureSpec {
    pub fn new(name: impl Into<String>, languages: Vec<LanguageId>, mode: BudgetMode) -> Result<Self> {
        if languages.is_empty() {
            return Err(Error::config("mixture requires at least one language"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &languages {
            if !seen.insert(*l) {
                return Err(Error::config(format!("duplicate language {l} in mixture")));
            }
        }
        let total = match mode {
            BudgetMode::FixedTotal(t) => t,
            BudgetMode::PerLanguage(c) => c,
        };
        if total == 0 {
            return Err(Error::config("mixture budget must be positive"));
        }
        Ok(Self { name: name.into(), languages, mode })
    }

    pub fn total(&self) -> usize {
        match self.mode {
            BudgetMode::FixedTotal(t) => t,
            BudgetMode::PerLanguage(c) => c * self.languages.len(),
        }
    }
}

/// Per-language example allocation.
///
/// `FixedTotal` gives every language the floor share and hands the remainder
/// out as `+1` to the earliest-listed languages, so the sum is exact.
pub fn allocate(spec: &MixtureSpec) -> BTreeMap<LanguageId, usize> {
    let mut out = BTreeMap::new();
    match spec.mode {
        BudgetMode::FixedTotal(total) => {
            let n = spec.languages.len();
            let base = total / n;
            let remainder = total % n;
            for (i, &lang) in spec.languages.iter().enumerate() {
                out.insert(lang, base + usize::from(i < remainder));
            }
        }
        BudgetMode::PerLanguage(count) => {
            for &lang in &spec.languages {
                out.insert(lang, count);
            }
        }
    }
    out
}

/// Split a language list into (seen, unseen) with respect to a mixture,
/// preserving the order of `all_languages`.
pub fn split_seen_unseen(
    all_languages: &[LanguageId],
    spec: &MixtureSpec,
) -> (Vec<LanguageId>, Vec<LanguageId>) {
    let member: std::collections::BTreeSet<_> = spec.languages.iter().copied().collect();
    let mut seen = Vec::new();
    let mut unseen = Vec::new();
    for &l in all_languages {
        if member.contains(&l) {
            seen.push(l);
        } else {
            unseen.push(l);
        }
    }
    (seen, unseen)
}

/// Generate the full labeled dataset for a mixture: `allocate(spec)[lang]`
/// pairs per language, each with a deterministic per-(language, index) seed.
pub fn build_dataset<S: Scalar>(
    spec: &MixtureSpec,
    env: &Environment<S>,
    channel: &TranslationChannel,
    reward: &RewardModel,
    cfg: &DataGenConfig,
) -> Result<Dataset> {
    for &lang in &spec.languages {
        if lang.0 >= env.num_languages() {
            return Err(Error::config(format!(
                "mixture language {lang} not present in the environment (K={})",
                env.num_languages()
            )));
        }
    }
    let allocation = allocate(spec);
    let mut pairs = Vec::with_capacity(spec.total());
    for (&lang, &count) in &allocation {
        for i in 0..count as u64 {
            let prompt = env.gen_prompt(lang, i, cfg);
            let mut rng = seed::rng(cfg.seed, &[stream::PAIR, lang.0 as u64, i]);
            pairs.push(env.build_pair(channel, reward, &prompt, cfg, &mut rng));
        }
    }
    Ok(Dataset { pairs, provenance: Provenance { mixture: spec.clone(), seed: cfg.seed } })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardSpec;
    use crate::synthlang::make_environment;
    use crate::types::VocabSpec;
    use proptest::prelude::*;

    fn langs(n: u16) -> Vec<LanguageId> {
        (0..n).map(LanguageId).collect()
    }

    #[test]
    fn single_language_takes_the_whole_budget() {
        let spec = MixtureSpec::new("en-1", langs(1), BudgetMode::FixedTotal(50_000)).unwrap();
        let a = allocate(&spec);
        assert_eq!(a[&LanguageId(0)], 50_000);
    }

    #[test]
    fn fixed_total_over_23_languages_splits_50k_exactly() {
        // 50000 = 23 * 2173 + 21: first 21 languages get 2174, last 2 get 2173.
        let spec = MixtureSpec::new("ml-23", langs(23), BudgetMode::FixedTotal(50_000)).unwrap();
        let a = allocate(&spec);
        for i in 0..21u16 {
            assert_eq!(a[&LanguageId(i)], 2174, "lang {i}");
        }
        assert_eq!(a[&LanguageId(21)], 2173);
        assert_eq!(a[&LanguageId(22)], 2173);
        assert_eq!(a.values().sum::<usize>(), 50_000);
    }

    #[test]
    fn per_language_budget_multiplies_out() {
        let spec = MixtureSpec::new("ml-23*", langs(23), BudgetMode::PerLanguage(10_000)).unwrap();
        let a = allocate(&spec);
        assert!(a.values().all(|&c| c == 10_000));
        assert_eq!(a.values().sum::<usize>(), 230_000);
        assert_eq!(spec.total(), 230_000);
    }

    #[test]
    fn desk_scale_ml5_divides_evenly() {
        let spec = MixtureSpec::new("ml-5", langs(5), BudgetMode::FixedTotal(500)).unwrap();
        let a = allocate(&spec);
        assert!(a.values().all(|&c| c == 100));
    }

    #[test]
    fn mixture_validation() {
        assert!(MixtureSpec::new("x", vec![], BudgetMode::FixedTotal(10)).is_err());
        assert!(MixtureSpec::new(
            "x",
            vec![LanguageId(0), LanguageId(0)],
            BudgetMode::FixedTotal(10)
        )
        .is_err());
        assert!(MixtureSpec::new("x", langs(2), BudgetMode::FixedTotal(0)).is_err());
    }

    #[test]
    fn seen_unseen_partition_matches_mixture_sizes() {
        let all = langs(23);
        let en1 = MixtureSpec::new("en-1", langs(1), BudgetMode::FixedTotal(10)).unwrap();
        let (seen, unseen) = split_seen_unseen(&all, &en1);
        assert_eq!((seen.len(), unseen.len()), (1, 22));
        let ml5 = MixtureSpec::new("ml-5", langs(5), BudgetMode::FixedTotal(10)).unwrap();
        let (seen, unseen) = split_seen_unseen(&all, &ml5);
        assert_eq!((seen.len(), unseen.len()), (5, 18));
        let full = MixtureSpec::new("all", langs(23), BudgetMode::FixedTotal(10)).unwrap();
        let (_, unseen) = split_seen_unseen(&all, &full);
        assert!(unseen.is_empty());
    }

    #[test]
    fn build_dataset_honors_allocation_and_determinism() {
        let env = make_environment::<f64>(3, VocabSpec::new(64, 8).unwrap(), 0.5, 11).unwrap();
        let reward = env.reward_model(RewardSpec::default());
        let channel = TranslationChannel::default();
        let cfg = DataGenConfig::new(4, 8, 22, 1e-6);
        let spec = MixtureSpec::new("t", langs(3), BudgetMode::FixedTotal(50)).unwrap();
        let a = build_dataset(&spec, &env, &channel, &reward, &cfg).unwrap();
        let counts = a.per_language_counts();
        let alloc = allocate(&spec);
        assert_eq!(counts.len(), alloc.len());
        for (lang, count) in &alloc {
            assert_eq!(counts[lang], *count);
        }
        let b = build_dataset(&spec, &env, &channel, &reward, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unknown_language_is_a_config_error() {
        let env = make_environment::<f64>(2, VocabSpec::new(64, 8).unwrap(), 0.5, 11).unwrap();
        let reward = env.reward_model(RewardSpec::default());
        let spec = MixtureSpec::new("t", langs(3), BudgetMode::FixedTotal(9)).unwrap();
        let cfg = DataGenConfig::new(4, 8, 22, 1e-6);
        assert!(build_dataset(&spec, &env, &TranslationChannel::default(), &reward, &cfg).is_err());
    }

    proptest! {
        #[test]
        fn allocation_conserves_and_stays_balanced(
            total in 1usize..100_000,
            k in 1u16..40,
        ) {
            let spec = MixtureSpec::new("p", langs(k), BudgetMode::FixedTotal(total)).unwrap();
            let a = allocate(&spec);
            prop_assert_eq!(a.values().sum::<usize>(), total);
            let max = a.values().max().unwrap();
            let min = a.values().min().unwrap();
            prop_assert!(max - min <= 1);
        }

        #[test]
        fn adding_a_language_never_raises_existing_counts(
            total in 1usize..50_000,
            k in 1u16..30,
        ) {
            let before = allocate(
                &MixtureSpec::new("p", langs(k), BudgetMode::FixedTotal(total)).unwrap(),
            );
            let after = allocate(
                &MixtureSpec::new("p", langs(k + 1), BudgetMode::FixedTotal(total)).unwrap(),
            );
            for (lang, count) in &before {
                prop_assert!(after[lang] <= *count);
            }
        }

        #[test]
        fn seen_unseen_is_a_partition(k in 1u16..23, m in 1u16..23) {
            let m = m.min(k);
            let all = langs(k);
            let spec = MixtureSpec::new("p", langs(m), BudgetMode::PerLanguage(1)).unwrap();
            let (seen, unseen) = split_seen_unseen(&all, &spec);
            prop_assert_eq!(seen.len() + unseen.len(), all.len());
            let mut merged = seen.clone();
            merged.extend(unseen.iter().copied());
            merged.sort();
            prop_assert_eq!(merged, all);
        }
    }
}
