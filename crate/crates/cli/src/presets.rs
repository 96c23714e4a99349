//! End-to-end experiment presets. Each runs the full pipeline with fixed
//! seeds, writes data, checkpoints, and reports under the output directory,
//! and emits a summary table plus one verdict line per trend check.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use preflab_core::eval::{agreement, round1, win_rate, WinRateRow};
use preflab_core::reward::{ExploitBonus, RewardSpec};
use preflab_core::rloo::sampled_token_frequency;
use preflab_core::synthlang::DataGenConfig;
use preflab_core::types::{Completion, LanguageId, Prompt};

use crate::commands::{
    build_environment, cmd_eval, cmd_gen_data, cmd_train, data_gen_config, eval_prompts,
    eval_sampling, judge_spec, resolve_channel,
};
use crate::config::{ExperimentConfig, TrainerKind};
use crate::CliError;

/// Master seed used when `--seed` is not given.
pub const DEFAULT_EXPERIMENT_SEED: u64 = 1717;

#[derive(Debug, Clone)]
pub struct PresetOutcome {
    pub name: String,
    pub verdicts: Vec<(String, bool)>,
    pub metrics: BTreeMap<String, f64>,
    pub summary_path: PathBuf,
}

impl PresetOutcome {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|(_, ok)| *ok)
    }
}

pub fn cmd_experiment(
    preset: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<PresetOutcome, CliError> {
    let master = seed.unwrap_or(DEFAULT_EXPERIMENT_SEED);
    match preset {
        "transfer" => transfer(out, master),
        "mixtures" => mixtures(out, master),
        "dpo-vs-rloo" => dpo_vs_rloo(out, master),
        "overopt" => overopt(out, master),
        other => Err(CliError::config(format!(
            "unknown experiment preset {other:?}; expected one of transfer, mixtures, dpo-vs-rloo, overopt"
        ))),
    }
}

fn stage<T>(name: &str, f: impl FnOnce() -> Result<T, CliError>) -> Result<T, CliError> {
    println!("== stage: {name}");
    f().map_err(|e| e.with_stage(name))
}

fn base_config(master: u64) -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.override_seed(master);
    config
}

fn write_summary(
    out: &Path,
    name: &str,
    table: &str,
    verdicts: &[(String, bool)],
    metrics: &BTreeMap<String, f64>,
) -> Result<PathBuf, CliError> {
    let mut text = String::new();
    let _ = writeln!(text, "experiment preset: {name}");
    let _ = writeln!(text);
    text.push_str(table);
    let _ = writeln!(text);
    for (label, ok) in verdicts {
        let _ = writeln!(text, "verdict: {label}: {}", if *ok { "pass" } else { "FAIL" });
    }
    let _ = writeln!(text);
    for (key, value) in metrics {
        let _ = writeln!(text, "metric: {key} = {value:.4}");
    }
    let path = out.join("summary.txt");
    fs::create_dir_all(out)?;
    fs::write(&path, &text)?;
    print!("{text}");
    Ok(path)
}

fn table_line(out: &mut String, name: &str, row: &WinRateRow) {
    let _ = writeln!(
        out,
        "{:<16} {:>7.1} {:>7.1} {:>7.1}",
        name,
        row.win_pct(),
        row.loss_pct(),
        round1(row.delta_wl())
    );
}

fn table_header(out: &mut String, title: &str) {
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "{:<16} {:>7} {:>7} {:>7}", "", "Win%", "Loss%", "ΔW-L%");
}

/// One gen-data/train/eval pass for a mixture; returns (seen, unseen, all)
/// rows of best-checkpoint vs reference.
fn run_mixture(
    out: &Path,
    config: &ExperimentConfig,
) -> Result<(Option<(WinRateRow, WinRateRow)>, WinRateRow), CliError> {
    let preset_name = config.mixture.preset.clone().unwrap_or_else(|| "custom".into());
    stage(&format!("gen-data {preset_name}"), || cmd_gen_data(config, out).map(|_| ()))?;
    let train = stage(&format!("train {preset_name}"), || cmd_train(config, out))?;
    let best = train.checkpoint_dir.join(format!("{}.ckpt", train.best));
    let reference = train.checkpoint_dir.join("epoch_000.ckpt");
    let eval = stage(&format!("eval {preset_name}"), || {
        cmd_eval(config, out, &best, &reference)
    })?;
    Ok((eval.splits, eval.report.aggregate()))
}

fn transfer_train_config(master: u64, preset: &str) -> ExperimentConfig {
    let mut config = base_config(master);
    config.mixture.preset = Some(preset.to_string());
    config.mixture.total = 2000;
    config.trainer.kind = TrainerKind::Rloo;
    config.trainer.rloo.learning_rate = 0.1;
    config.trainer.rloo.epochs = 4;
    config
}

/// EN-1 vs ML-5 cross-lingual transfer on unseen languages.
fn transfer(out: &Path, master: u64) -> Result<PresetOutcome, CliError> {
    let en1 = transfer_train_config(master, "en-1");
    let ml5 = transfer_train_config(master, "ml-5");
    let (en1_splits, en1_all) = run_mixture(&out.join("en-1"), &en1)?;
    let (ml5_splits, ml5_all) = run_mixture(&out.join("ml-5"), &ml5)?;
    let (en1_seen, en1_unseen) =
        en1_splits.ok_or_else(|| CliError::runtime("en-1 produced no unseen split"))?;
    let (ml5_seen, ml5_unseen) =
        ml5_splits.ok_or_else(|| CliError::runtime("ml-5 produced no unseen split"))?;

    let mut table = String::new();
    table_header(&mut table, "win-rate vs untrained reference (RLOO, best checkpoint)");
    table_line(&mut table, "en-1  seen", &en1_seen);
    table_line(&mut table, "en-1  unseen", &en1_unseen);
    table_line(&mut table, "en-1  all", &en1_all);
    table_line(&mut table, "ml-5  seen", &ml5_seen);
    table_line(&mut table, "ml-5  unseen", &ml5_unseen);
    table_line(&mut table, "ml-5  all", &ml5_all);

    let d_en1 = en1_unseen.delta_wl();
    let d_ml5 = ml5_unseen.delta_wl();
    let verdicts = vec![
        (format!("en-1 unseen ΔW-L ({:.1}) > 0", round1(d_en1)), d_en1 > 0.0),
        (
            format!("ml-5 unseen ΔW-L ({:.1}) > en-1 unseen ΔW-L ({:.1})", round1(d_ml5), round1(d_en1)),
            d_ml5 > d_en1,
        ),
    ];
    let mut metrics = BTreeMap::new();
    metrics.insert("en1_unseen_delta".to_string(), d_en1);
    metrics.insert("ml5_unseen_delta".to_string(), d_ml5);
    metrics.insert("en1_seen_delta".to_string(), en1_seen.delta_wl());
    metrics.insert("ml5_seen_delta".to_string(), ml5_seen.delta_wl());
    let summary_path = write_summary(out, "transfer", &table, &verdicts, &metrics)?;
    Ok(PresetOutcome { name: "transfer".into(), verdicts, metrics, summary_path })
}

/// EN-1 vs ML-5 vs ML-ALL under one fixed data budget.
fn mixtures(out: &Path, master: u64) -> Result<PresetOutcome, CliError> {
    let names = ["en-1", "ml-5", "ml-all-fixed"];
    let mut table = String::new();
    table_header(&mut table, "win-rate vs untrained reference per training mixture (RLOO)");
    let mut metrics = BTreeMap::new();
    let mut completed = 0usize;
    for name in names {
        let mut config = base_config(master);
        config.mixture.preset = Some(name.to_string());
        config.mixture.total = 500;
        config.trainer.kind = TrainerKind::Rloo;
        config.trainer.rloo.learning_rate = 0.05;
        config.trainer.rloo.epochs = 4;
        let (_, all) = run_mixture(&out.join(name), &config)?;
        table_line(&mut table, name, &all);
        metrics.insert(format!("{name}_delta"), all.delta_wl());
        completed += 1;
    }
    let verdicts = vec![(
        format!("all {} mixture runs completed with one report row each", names.len()),
        completed == names.len(),
    )];
    let summary_path = write_summary(out, "mixtures", &table, &verdicts, &metrics)?;
    Ok(PresetOutcome { name: "mixtures".into(), verdicts, metrics, summary_path })
}

/// Offline vs online training on the same mixture, judged head-to-head.
fn dpo_vs_rloo(out: &Path, master: u64) -> Result<PresetOutcome, CliError> {
    let mut dpo_config = base_config(master);
    dpo_config.mixture.preset = Some("ml-5".to_string());
    dpo_config.mixture.total = 500;
    dpo_config.trainer.kind = TrainerKind::Dpo;
    dpo_config.trainer.dpo.learning_rate = 0.1;
    dpo_config.trainer.dpo.epochs = 20;
    dpo_config.trainer.dpo.batch_size = 16;

    let mut rloo_config = base_config(master);
    rloo_config.mixture.preset = Some("ml-5".to_string());
    rloo_config.mixture.total = 2000;
    rloo_config.trainer.kind = TrainerKind::Rloo;
    rloo_config.trainer.rloo.learning_rate = 0.1;
    rloo_config.trainer.rloo.epochs = 4;

    let dpo_dir = out.join("dpo");
    let rloo_dir = out.join("rloo");
    stage("gen-data dpo", || cmd_gen_data(&dpo_config, &dpo_dir).map(|_| ()))?;
    let dpo_train = stage("train dpo", || cmd_train(&dpo_config, &dpo_dir))?;
    let rloo_train = stage("train rloo", || cmd_train(&rloo_config, &rloo_dir))?;

    let dpo_best = dpo_train.checkpoint_dir.join(format!("{}.ckpt", dpo_train.best));
    let rloo_best = rloo_train.checkpoint_dir.join(format!("{}.ckpt", rloo_train.best));
    let reference = rloo_train.checkpoint_dir.join("epoch_000.ckpt");
    let head = stage("eval rloo vs dpo", || {
        cmd_eval(&rloo_config, &rloo_dir, &rloo_best, &dpo_best)
    })?;
    let rloo_vs_ref = stage("eval rloo vs reference", || {
        cmd_eval(&rloo_config, &rloo_dir, &rloo_best, &reference)
    })?;
    let dpo_vs_ref = stage("eval dpo vs reference", || {
        cmd_eval(&rloo_config, &rloo_dir, &dpo_best, &reference)
    })?;

    let head_all = head.report.aggregate();
    let mut table = String::new();
    table_header(&mut table, "ml-5 mixture, aggregate over all languages");
    table_line(&mut table, "rloo vs dpo", &head_all);
    table_line(&mut table, "rloo vs ref", &rloo_vs_ref.report.aggregate());
    table_line(&mut table, "dpo  vs ref", &dpo_vs_ref.report.aggregate());

    let delta = head_all.delta_wl();
    let verdicts = vec![(
        format!("online (RLOO) beats offline (DPO) head-to-head: ΔW-L ({:.1}) > 0", round1(delta)),
        delta > 0.0,
    )];
    let mut metrics = BTreeMap::new();
    metrics.insert("rloo_vs_dpo_delta".to_string(), delta);
    metrics.insert("rloo_vs_ref_delta".to_string(), rloo_vs_ref.report.aggregate().delta_wl());
    metrics.insert("dpo_vs_ref_delta".to_string(), dpo_vs_ref.report.aggregate().delta_wl());
    let summary_path = write_summary(out, "dpo-vs-rloo", &table, &verdicts, &metrics)?;
    Ok(PresetOutcome { name: "dpo-vs-rloo".into(), verdicts, metrics, summary_path })
}

/// Exploitable-reward demo: a per-occurrence bonus on one marker token is
/// hacked at beta = 0 and contained at beta = 0.5.
fn overopt(out: &Path, master: u64) -> Result<PresetOutcome, CliError> {
    // The exploit token is the training language's first marker; resolve it
    // from the environment before assembling the run configs.
    let probe_env = build_environment(&base_config(master))?;
    let exploit_token = *probe_env.profiles[0]
        .sets
        .markers
        .iter()
        .next()
        .expect("profiles carry at least two markers");

    let make_config = |beta: f64| {
        let mut config = base_config(master);
        config.reward.exploit = Some(ExploitBonus { token: exploit_token, bonus: 0.75 });
        config.mixture.preset = None;
        config.mixture.languages = Some(vec![0]);
        config.mixture.total = 2000;
        config.trainer.kind = TrainerKind::Rloo;
        config.trainer.rloo.learning_rate = 0.05;
        config.trainer.rloo.beta = beta;
        config.trainer.rloo.epochs = 2;
        config
    };

    let mut freqs = BTreeMap::new();
    let mut peak_freqs = BTreeMap::new();
    let mut clean_deltas = BTreeMap::new();
    for beta in [0.0f64, 0.5] {
        let config = make_config(beta);
        let dir = out.join(format!("beta-{beta}"));
        stage(&format!("gen-data beta={beta}"), || cmd_gen_data(&config, &dir).map(|_| ()))?;
        let train = stage(&format!("train beta={beta}"), || cmd_train(&config, &dir))?;
        let last = train
            .snapshots
            .iter()
            .rev()
            .find(|(name, _)| name != "epoch_000")
            .map(|(name, _)| name.clone())
            .unwrap_or_else(|| "epoch_000".into());
        let final_ckpt = train.checkpoint_dir.join(format!("{last}.ckpt"));
        let reference = train.checkpoint_dir.join("epoch_000.ckpt");
        let eval = stage(&format!("eval beta={beta}"), || {
            cmd_eval(&config, &dir, &final_ckpt, &reference)
        })?;
        clean_deltas.insert(format!("{beta}"), eval.report.aggregate().delta_wl());

        // Exploit-token frequency of the final policy on fresh prompts.
        let policy = preflab_core::io::read_checkpoint::<f64>(&final_ckpt)?;
        let (env, _) = preflab_core::io::read_environment::<f64>(&dir.join("env"))?;
        let gen = DataGenConfig { seed: config.evaluation.seed, ..data_gen_config(&config) };
        let freq = sampled_token_frequency(
            &policy,
            &env,
            LanguageId(0),
            exploit_token,
            500,
            &gen,
            config.evaluation.temperature,
            config.evaluation.seed,
        );
        freqs.insert(format!("{beta}"), freq);
        peak_freqs.insert(format!("{beta}"), history_peak_exploit_freq(&dir.join("history.csv"))?);
    }

    // Judge-level diagnosis: how often the exploited reward agrees with the
    // clean one on direct-vs-translated pairs.
    let config = make_config(0.0);
    let env = build_environment(&config)?;
    let clean_judge = judge_spec(&config, &env);
    let exploited_judge = preflab_core::eval::JudgeSpec {
        reward: env.reward_model(RewardSpec {
            exploit: Some(ExploitBonus { token: exploit_token, bonus: 0.75 }),
            ..config.reward.to_spec()
        }),
        tie_epsilon: config.evaluation.tie_epsilon,
        position_seed: config.evaluation.position_seed,
    };
    let reward = env.reward_model(config.reward.to_spec());
    let (channel, _) = resolve_channel(&config, &env, &reward)?;
    let gen = DataGenConfig { seed: config.evaluation.seed, ..data_gen_config(&config) };
    let pairs: Vec<(Prompt, Completion, Completion)> = (0..1000u64)
        .map(|i| {
            let prompt = env.gen_prompt(LanguageId(0), i, &gen);
            let mut rng = preflab_core::seed::rng(config.evaluation.seed, &[0x0eaf, i]);
            let direct = env.gen_direct(&prompt, &gen, &mut rng);
            let translated = env.gen_translated(&channel, &prompt, &gen, &mut rng);
            (prompt, direct, translated)
        })
        .collect();
    let agree = agreement(&exploited_judge, &clean_judge, &pairs);

    let mut table = String::new();
    let _ = writeln!(table, "exploit token {exploit_token} (a marker), bonus 0.75 per occurrence");
    let _ = writeln!(table, "{:<10} {:>14} {:>14} {:>16}", "beta", "exploit freq", "peak in run", "clean ΔW-L vs ref");
    for beta in ["0", "0.5"] {
        let _ = writeln!(
            table,
            "{:<10} {:>14.4} {:>14.4} {:>16.1}",
            beta,
            freqs[beta],
            peak_freqs[beta],
            round1(clean_deltas[beta])
        );
    }
    let _ = writeln!(
        table,
        "exploited-vs-clean judge agreement on direct/translated pairs: {:.4}",
        agree.rate
    );

    let verdicts = vec![
        (format!("beta=0 exploit-token frequency ({:.3}) > 0.5", freqs["0"]), freqs["0"] > 0.5),
        (
            format!("beta=0.5 exploit-token frequency ({:.3}) < 0.1", freqs["0.5"]),
            freqs["0.5"] < 0.1,
        ),
        (
            format!("beta=0 frequency curve crosses 0.5 ({:.3}); beta=0.5 stays under ({:.3})",
                peak_freqs["0"], peak_freqs["0.5"]),
            peak_freqs["0"] > 0.5 && peak_freqs["0.5"] < 0.5,
        ),
        (
            format!(
                "clean-judge quality degrades under hacking: ΔW-L {:.1} (beta=0) < {:.1} (beta=0.5)",
                round1(clean_deltas["0"]),
                round1(clean_deltas["0.5"])
            ),
            clean_deltas["0"] < clean_deltas["0.5"],
        ),
    ];
    let mut metrics = BTreeMap::new();
    metrics.insert("exploit_freq_beta0".to_string(), freqs["0"]);
    metrics.insert("exploit_freq_beta05".to_string(), freqs["0.5"]);
    metrics.insert("judge_agreement".to_string(), agree.rate);
    metrics.insert("clean_delta_beta0".to_string(), clean_deltas["0"]);
    metrics.insert("clean_delta_beta05".to_string(), clean_deltas["0.5"]);
    let summary_path = write_summary(out, "overopt", &table, &verdicts, &metrics)?;
    Ok(PresetOutcome { name: "overopt".into(), verdicts, metrics, summary_path })
}

/// Largest exploit_freq value in an online-training history CSV.
fn history_peak_exploit_freq(path: &Path) -> Result<f64, CliError> {
    let text = fs::read_to_string(path)?;
    let mut peak = 0.0f64;
    for line in text.lines().skip(1) {
        let freq: f64 = line
            .rsplit(',')
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| CliError::runtime(format!("malformed history row: {line}")))?;
        peak = peak.max(freq);
    }
    Ok(peak)
}
