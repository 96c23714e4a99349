//! File formats: the JSONL pair schema, policy checkpoints, training-history
//! CSVs, the environment manifest, and win-rate report rendering.
//!
//! Writers are byte-deterministic. The JSONL schema fixes field order and
//! renders floats with 9 significant digits; checkpoints use the shortest
//! round-tripping decimal form, so write/read/write is the identity.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpo::DpoHistory;
use crate::error::{Error, Result};
use crate::eval::{round1, WinRateReport, WinRateRow};
use crate::policy::{PolicyParams, WeightMat};
use crate::reward::TokenSets;
use crate::rloo::RlooHistory;
use crate::scalar::Scalar;
use crate::synthlang::{Environment, LanguageProfile};
use crate::types::{Channel, Completion, LanguageId, PreferencePair, Prompt, TokenId, VocabSpec};

// ---------------------------------------------------------------------------
// JSONL preference pairs
// ---------------------------------------------------------------------------

/// 9-significant-digit float rendering used by the JSONL schema.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        "0.0".to_string()
    } else {
        format!("{:.8e}", x)
    }
}

fn ints(tokens: &[TokenId]) -> String {
    let mut s = String::from("[");
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        let _ = write!(s, "{t}");
    }
    s.push(']');
    s
}

/// One pair as a single JSONL line (no trailing newline). Field order is
/// fixed: lang, prompt, chosen, rejected, ch_chosen, ch_rejected, margin.
pub fn encode_pair(pair: &PreferencePair) -> String {
    format!(
        "{{\"lang\":{},\"prompt\":{},\"chosen\":{},\"rejected\":{},\"ch_chosen\":\"{}\",\"ch_rejected\":\"{}\",\"margin\":{}}}",
        pair.prompt.language.0,
        ints(&pair.prompt.tokens),
        ints(&pair.chosen.tokens),
        ints(&pair.rejected.tokens),
        pair.channel_chosen,
        pair.channel_rejected,
        format_sig9(pair.labeler_margin),
    )
}

#[derive(Deserialize)]
struct PairRecord {
    lang: u16,
    prompt: Vec<TokenId>,
    chosen: Vec<TokenId>,
    rejected: Vec<TokenId>,
    ch_chosen: Channel,
    ch_rejected: Channel,
    margin: f64,
}

/// Parse one JSONL line into a pair.
pub fn decode_pair(line: &str) -> Result<PreferencePair> {
    let rec: PairRecord =
        serde_json::from_str(line).map_err(|e| Error::parse(format!("pair line: {e}")))?;
    let lang = LanguageId(rec.lang);
    Ok(PreferencePair {
        prompt: Prompt::new(rec.prompt, lang),
        chosen: Completion::new(rec.chosen, lang),
        rejected: Completion::new(rec.rejected, lang),
        channel_chosen: rec.ch_chosen,
        channel_rejected: rec.ch_rejected,
        labeler_margin: rec.margin,
    })
}

pub fn encode_pairs(pairs: &[PreferencePair]) -> String {
    let mut out = String::new();
    for pair in pairs {
        out.push_str(&encode_pair(pair));
        out.push('\n');
    }
    out
}

pub fn decode_pairs(text: &str) -> Result<Vec<PreferencePair>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(decode_pair).collect()
}

pub fn write_pairs_jsonl(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    fs::write(path, encode_pairs(pairs))?;
    Ok(())
}

pub fn read_pairs_jsonl(path: &Path) -> Result<Vec<PreferencePair>> {
    decode_pairs(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Policy checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &str = "preflab-policy v1";

/// Textual checkpoint: a header naming the shape, then `F` rows of `V`
/// weights in shortest round-tripping decimal form.
pub fn encode_checkpoint<S: Scalar>(params: &PolicyParams<S>) -> Result<String> {
    if !params.weights().is_finite() {
        return Err(Error::config("refusing to write non-finite policy weights"));
    }
    let vocab = params.vocab();
    let mut out = String::new();
    let _ = writeln!(out, "{CHECKPOINT_MAGIC}");
    let _ = writeln!(
        out,
        "V {} K {} F {} L {}",
        vocab.size,
        params.num_languages(),
        params.feature_dim(),
        vocab.max_len
    );
    for f in 0..params.feature_dim() {
        let row = params.weights().row(f);
        for (i, w) in row.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{w}");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_checkpoint<S: Scalar>(text: &str) -> Result<PolicyParams<S>> {
    let mut lines = text.lines();
    let magic = lines.next().ok_or_else(|| Error::parse("empty checkpoint"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::parse(format!("bad checkpoint magic: {magic:?}")));
    }
    let header = lines.next().ok_or_else(|| Error::parse("missing checkpoint header"))?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 8 || fields[0] != "V" || fields[2] != "K" || fields[4] != "F" || fields[6] != "L"
    {
        return Err(Error::parse(format!("bad checkpoint header: {header:?}")));
    }
    let v: u32 = fields[1].parse().map_err(|_| Error::parse("bad V"))?;
    let k: u16 = fields[3].parse().map_err(|_| Error::parse("bad K"))?;
    let f_dim: usize = fields[5].parse().map_err(|_| Error::parse("bad F"))?;
    let max_len: usize = fields[7].parse().map_err(|_| Error::parse("bad L"))?;
    let vocab = VocabSpec::new(v, max_len)?;
    if f_dim != v as usize + k as usize + 1 {
        return Err(Error::parse(format!("F={f_dim} inconsistent with V={v} K={k}")));
    }
    let mut weights = WeightMat::<S>::zeros(f_dim, v as usize);
    for f in 0..f_dim {
        let line = lines.next().ok_or_else(|| Error::parse(format!("missing weight row {f}")))?;
        let mut count = 0usize;
        for (i, tok) in line.split_whitespace().enumerate() {
            if i >= v as usize {
                return Err(Error::parse(format!("row {f} has too many entries")));
            }
            let w: S = tok.parse().map_err(|e| Error::parse(format!("row {f}: {e}")))?;
            weights.set(f, i, w);
            count += 1;
        }
        if count != v as usize {
            return Err(Error::parse(format!("row {f} has {count} entries, expected {v}")));
        }
    }
    PolicyParams::from_weights(weights, vocab, k)
}

pub fn write_checkpoint<S: Scalar>(path: &Path, params: &PolicyParams<S>) -> Result<()> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<PolicyParams<S>> {
    decode_checkpoint(&fs::read_to_string(path)?)
}

/// Check a loaded checkpoint against the shape the caller expects.
pub fn expect_shape<S: Scalar>(params: &PolicyParams<S>, v: u32, k: u16) -> Result<()> {
    if params.vocab().size != v || params.num_languages() != k {
        return Err(Error::ShapeMismatch {
            expected_v: v,
            expected_k: k,
            actual_v: params.vocab().size,
            actual_k: params.num_languages(),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training history CSVs
// ---------------------------------------------------------------------------

pub fn dpo_history_csv(history: &DpoHistory) -> String {
    let mut out = String::from("epoch,step,mean_loss,mean_margin,grad_norm\n");
    for s in &history.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.epoch, s.step, s.mean_loss, s.mean_margin, s.grad_norm
        );
    }
    out
}

pub fn rloo_history_csv(history: &RlooHistory) -> String {
    let mut out =
        String::from("step,lang,mean_reward_raw,mean_reward_shaped,mean_cond_kl,grad_norm,exploit_freq\n");
    for s in &history.steps {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.step,
            s.lang.0,
            s.mean_reward_raw,
            s.mean_reward_shaped,
            s.mean_cond_kl,
            s.grad_norm,
            s.exploit_freq
        );
    }
    out
}

// ---------------------------------------------------------------------------
// Win-rate reports
// ---------------------------------------------------------------------------

fn report_csv_row(out: &mut String, name: &str, row: &WinRateRow) {
    let _ = writeln!(
        out,
        "{},{},{},{},{},{:.1},{:.1},{:.1},{:.1}",
        name,
        row.total(),
        row.win,
        row.tie,
        row.loss,
        row.win_pct(),
        row.tie_pct(),
        row.loss_pct(),
        round1(row.delta_wl()),
    );
}

pub fn report_csv(report: &WinRateReport) -> String {
    let mut out = String::from("lang,prompts,win,tie,loss,win_pct,tie_pct,loss_pct,delta_wl\n");
    for (lang, row) in &report.per_language {
        report_csv_row(&mut out, &lang.name(), row);
    }
    report_csv_row(&mut out, "aggregate", &report.aggregate());
    out
}

fn table_row(out: &mut String, name: &str, row: &WinRateRow) {
    let _ = writeln!(
        out,
        "{:<10} {:>7.1} {:>7.1} {:>7.1}",
        name,
        row.win_pct(),
        row.loss_pct(),
        round1(row.delta_wl()),
    );
}

/// Aligned text table in the Win% / Loss% / ΔW-L% column layout.
pub fn report_table(title: &str, report: &WinRateReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<10} {:>7} {:>7} {:>7}", "", "Win%", "Loss%", "ΔW-L%");
    for (lang, row) in &report.per_language {
        table_row(&mut out, &lang.name(), row);
    }
    table_row(&mut out, "Average", &report.aggregate());
    out
}

// ---------------------------------------------------------------------------
// Environment manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageManifest {
    pub id: u16,
    pub name: String,
    pub preferred: Vec<TokenId>,
    pub markers: Vec<TokenId>,
    pub generator_checkpoint: String,
}

/// JSON manifest describing a generated environment; generator weights live
/// in the referenced checkpoint files next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvManifest {
    pub vocab_size: u32,
    pub eos: TokenId,
    pub max_len: usize,
    pub num_languages: u16,
    pub universal_fraction: f64,
    pub seed: u64,
    pub marker_rate: f64,
    pub pivot: u16,
    pub universal: Vec<TokenId>,
    pub languages: Vec<LanguageManifest>,
}

/// Write the manifest plus one generator checkpoint per language into `dir`.
pub fn write_environment<S: Scalar>(
    dir: &Path,
    env: &Environment<S>,
    marker_rate: f64,
) -> Result<EnvManifest> {
    fs::create_dir_all(dir)?;
    let mut languages = Vec::with_capacity(env.profiles.len());
    for profile in &env.profiles {
        let ckpt_name = format!("generator_{}.ckpt", profile.lang.name());
        write_checkpoint(&dir.join(&ckpt_name), &profile.generator)?;
        languages.push(LanguageManifest {
            id: profile.lang.0,
            name: profile.lang.name(),
            preferred: profile.sets.preferred.iter().copied().collect(),
            markers: profile.sets.markers.iter().copied().collect(),
            generator_checkpoint: ckpt_name,
        });
    }
    let manifest = EnvManifest {
        vocab_size: env.vocab.size,
        eos: env.vocab.eos,
        max_len: env.vocab.max_len,
        num_languages: env.profiles.len() as u16,
        universal_fraction: env.universal_fraction,
        seed: env.seed,
        marker_rate,
        pivot: 0,
        universal: env.universal.iter().copied().collect(),
        languages,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::parse(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// Rebuild an environment from a manifest directory.
pub fn read_environment<S: Scalar>(dir: &Path) -> Result<(Environment<S>, EnvManifest)> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: EnvManifest =
        serde_json::from_str(&text).map_err(|e| Error::parse(format!("manifest decode: {e}")))?;
    let vocab = VocabSpec::new(manifest.vocab_size, manifest.max_len)?;
    if vocab.eos != manifest.eos {
        return Err(Error::parse("manifest eos does not match the reserved last token"));
    }
    let mut profiles = Vec::with_capacity(manifest.languages.len());
    for lm in &manifest.languages {
        let generator = read_checkpoint::<S>(&dir.join(&lm.generator_checkpoint))?;
        expect_shape(&generator, manifest.vocab_size, manifest.num_languages)?;
        profiles.push(LanguageProfile {
            lang: LanguageId(lm.id),
            sets: TokenSets {
                preferred: lm.preferred.iter().copied().collect(),
                markers: lm.markers.iter().copied().collect(),
            },
            generator,
        });
    }
    let env = Environment {
        vocab,
        universal_fraction: manifest.universal_fraction,
        seed: manifest.seed,
        universal: manifest.universal.iter().copied().collect(),
        profiles,
    };
    Ok((env, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward::RewardSpec;
    use crate::synthlang::{make_environment, DataGenConfig, TranslationChannel};
    use crate::types::{Channel, LanguageId};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_pair() -> PreferencePair {
        PreferencePair {
            prompt: Prompt::new(vec![3, 1, 4], LanguageId(2)),
            chosen: Completion::new(vec![0, 5, 7], LanguageId(2)),
            rejected: Completion::new(vec![6, 7], LanguageId(2)),
            channel_chosen: Channel::Direct,
            channel_rejected: Channel::Translated,
            labeler_margin: 0.4375,
        }
    }

    #[test]
    fn pair_line_has_fixed_field_order() {
        let line = encode_pair(&sample_pair());
        assert_eq!(
            line,
            "{\"lang\":2,\"prompt\":[3,1,4],\"chosen\":[0,5,7],\"rejected\":[6,7],\
             \"ch_chosen\":\"direct\",\"ch_rejected\":\"translated\",\"margin\":4.37500000e-1}"
        );
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0.0");
        assert_eq!(format_sig9(1.0), "1.00000000e0");
        assert_eq!(format_sig9(-0.123456789), "-1.23456789e-1");
        assert_eq!(format_sig9(1234.5), "1.23450000e3");
    }

    #[test]
    fn encode_decode_is_identity_on_encoded_lines() {
        let line = encode_pair(&sample_pair());
        let decoded = decode_pair(&line).unwrap();
        assert_eq!(encode_pair(&decoded), line);
    }

    proptest! {
        #[test]
        fn jsonl_roundtrip_bytes(
            lang in 0u16..23,
            prompt in proptest::collection::vec(0u32..63, 0..6),
            chosen_content in proptest::collection::vec(0u32..63, 0..6),
            rejected_content in proptest::collection::vec(0u32..63, 0..6),
            margin in 0.0f64..10.0,
        ) {
            let l = LanguageId(lang);
            let mut chosen = chosen_content.clone();
            chosen.push(63);
            let mut rejected = rejected_content.clone();
            rejected.push(63);
            let pair = PreferencePair {
                prompt: Prompt::new(prompt, l),
                chosen: Completion::new(chosen, l),
                rejected: Completion::new(rejected, l),
                channel_chosen: Channel::Translated,
                channel_rejected: Channel::Direct,
                labeler_margin: margin,
            };
            let line = encode_pair(&pair);
            let decoded = decode_pair(&line).unwrap();
            prop_assert_eq!(encode_pair(&decoded), line);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let p = PolicyParams::<f64>::random(VocabSpec::new(6, 5).unwrap(), 3, 2.0, &mut rng);
        let text = encode_checkpoint(&p).unwrap();
        let q = decode_checkpoint::<f64>(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(encode_checkpoint(&q).unwrap(), text);
    }

    #[test]
    fn checkpoint_shape_mismatch_names_both_shapes() {
        let p = PolicyParams::<f64>::zeros(VocabSpec::new(6, 5).unwrap(), 3);
        let err = expect_shape(&p, 8, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("V=8") && msg.contains("K=2"), "{msg}");
        assert!(msg.contains("V=6") && msg.contains("K=3"), "{msg}");
    }

    #[test]
    fn checkpoint_rejects_corrupt_input() {
        assert!(decode_checkpoint::<f64>("nonsense").is_err());
        let p = PolicyParams::<f64>::zeros(VocabSpec::new(4, 3).unwrap(), 1);
        let text = encode_checkpoint(&p).unwrap();
        let truncated: String =
            text.lines().take(3).collect::<Vec<_>>().join("\n");
        assert!(decode_checkpoint::<f64>(&truncated).is_err());
    }

    #[test]
    fn environment_roundtrips_through_manifest() {
        let dir = std::env::temp_dir().join(format!("preflab-io-test-{}", std::process::id()));
        let env = make_environment::<f64>(3, VocabSpec::new(32, 6).unwrap(), 0.5, 17).unwrap();
        let manifest = write_environment(&dir, &env, 0.33).unwrap();
        assert_eq!(manifest.marker_rate, 0.33);
        let (loaded, manifest2) = read_environment::<f64>(&dir).unwrap();
        assert_eq!(env, loaded);
        assert_eq!(manifest, manifest2);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn dataset_file_roundtrip_preserves_bytes() {
        let env = make_environment::<f64>(2, VocabSpec::new(32, 6).unwrap(), 0.5, 17).unwrap();
        let reward = env.reward_model(RewardSpec::default());
        let cfg = DataGenConfig::new(3, 6, 9, 1e-6);
        let channel = TranslationChannel::default();
        let pairs: Vec<PreferencePair> = (0..100u64)
            .map(|i| {
                let lang = LanguageId((i % 2) as u16);
                let prompt = env.gen_prompt(lang, i, &cfg);
                let mut rng = crate::seed::rng(cfg.seed, &[crate::seed::stream::PAIR, i]);
                env.build_pair(&channel, &reward, &prompt, &cfg, &mut rng)
            })
            .collect();
        let text = encode_pairs(&pairs);
        let decoded = decode_pairs(&text).unwrap();
        assert_eq!(encode_pairs(&decoded), text);
        assert_eq!(decoded.len(), 100);
    }

    #[test]
    fn csv_headers_match_the_declared_columns() {
        let dpo = dpo_history_csv(&DpoHistory::default());
        assert!(dpo.starts_with("epoch,step,mean_loss,mean_margin,grad_norm\n"));
        let rloo = rloo_history_csv(&RlooHistory::default());
        assert!(rloo.starts_with(
            "step,lang,mean_reward_raw,mean_reward_shaped,mean_cond_kl,grad_norm,exploit_freq\n"
        ));
    }

    #[test]
    fn report_rows_inherit_delta_from_their_own_columns() {
        let mut report = WinRateReport::default();
        report.per_language.insert(LanguageId(0), WinRateRow { win: 2, tie: 1, loss: 1 });
        report.per_language.insert(LanguageId(1), WinRateRow { win: 1, tie: 0, loss: 3 });
        let csv = report_csv(&report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "L00,4,2,1,1,50.0,25.0,25.0,25.0");
        assert_eq!(lines[2], "L01,4,1,0,3,25.0,0.0,75.0,-50.0");
        assert_eq!(lines[3], "aggregate,8,3,1,4,37.5,12.5,50.0,-12.5");
        let table = report_table("demo", &report);
        assert!(table.contains("Win%"));
        assert!(table.contains("Average"));
    }
}
