//! Command implementations: data generation, training, evaluation, report
//! rendering. Every command is a pure function of its config and seeds; all
//! artifacts land under the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use preflab_core::dpo::train_dpo;
use preflab_core::eval::{round1, win_rate, JudgeSpec, WinRateReport, WinRateRow};
use preflab_core::io;
use preflab_core::mixtures::{build_dataset, split_seen_unseen, MixtureSpec};
use preflab_core::policy::SamplingConfig;
use preflab_core::reward::{RewardModel, RewardSpec};
use preflab_core::rloo::{train_rloo, PromptMixture};
use preflab_core::synthlang::{
    make_environment, CalibrationOutcome, DataGenConfig, TranslationChannel,
};
use preflab_core::types::{Channel, Dataset, LanguageId, Prompt, Provenance};
use preflab_core::{Environment64, Policy64};

use crate::config::{ExperimentConfig, TrainerKind};
use crate::CliError;

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
    Ok(ExperimentConfig::parse(&text)?)
}

pub fn data_gen_config(config: &ExperimentConfig) -> DataGenConfig {
    DataGenConfig {
        prompt_len: config.data.prompt_len,
        completion_len: config.data.completion_len,
        seed: config.data.seed,
        tie_epsilon: config.data.tie_epsilon,
    }
}

pub fn build_environment(config: &ExperimentConfig) -> Result<Environment64, CliError> {
    let env = config.environment.clone();
    let vocab = preflab_core::types::VocabSpec::new(env.vocab_size, env.max_len)
        .map_err(CliError::from_core_config)?;
    make_environment::<f64>(env.num_languages, vocab, env.universal_fraction, env.seed)
        .map_err(CliError::from_core_config)
}

/// The judge always scores with the clean reward: any exploit bonus in the
/// training reward is stripped.
pub fn judge_spec(config: &ExperimentConfig, env: &Environment64) -> JudgeSpec {
    let clean = RewardSpec { exploit: None, ..config.reward.to_spec() };
    JudgeSpec {
        reward: env.reward_model(clean),
        tie_epsilon: config.evaluation.tie_epsilon,
        position_seed: config.evaluation.position_seed,
    }
}

pub fn eval_sampling(config: &ExperimentConfig) -> SamplingConfig {
    SamplingConfig {
        temperature: config.evaluation.temperature,
        max_len: config.environment.max_len,
        seed: config.evaluation.seed,
    }
}

/// Held-out evaluation prompts: same pivot-stream generator as training data
/// but seeded from the evaluation stage.
pub fn eval_prompts(
    config: &ExperimentConfig,
    env: &Environment64,
) -> BTreeMap<LanguageId, Vec<Prompt>> {
    let gen = DataGenConfig {
        prompt_len: config.data.prompt_len,
        completion_len: config.data.completion_len,
        seed: config.evaluation.seed,
        tie_epsilon: config.data.tie_epsilon,
    };
    env.languages()
        .map(|l| (l, env.gen_prompts(l, config.evaluation.prompts_per_language, &gen)))
        .collect()
}

/// Resolve the translated channel: a fixed marker rate, or bisection to the
/// configured rejection target.
pub fn resolve_channel(
    config: &ExperimentConfig,
    env: &Environment64,
    reward: &RewardModel,
) -> Result<(TranslationChannel, Option<CalibrationOutcome>), CliError> {
    let gen = data_gen_config(config);
    match (config.data.marker_rate, config.data.calibrate_to) {
        (Some(rate), _) => Ok((
            TranslationChannel::new(rate, env.pivot()).map_err(CliError::from_core_config)?,
            None,
        )),
        (None, Some(target)) => {
            let outcome =
                env.calibrate_marker_rate(reward, target, &gen).map_err(CliError::from_core_config)?;
            Ok((
                TranslationChannel { marker_rate: outcome.marker_rate, pivot: env.pivot() },
                Some(outcome),
            ))
        }
        (None, None) => Err(CliError::config("config field `data`: no marker rate source")),
    }
}

fn echo_config(config: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.emit())?;
    Ok(())
}

pub struct GenDataStats {
    pub per_language: BTreeMap<LanguageId, usize>,
    pub translated_rejected_fraction: f64,
    pub marker_rate: f64,
    pub calibration: Option<CalibrationOutcome>,
    pub dataset_path: PathBuf,
}

/// Generate the labeled dataset and environment manifest for a config.
pub fn cmd_gen_data(config: &ExperimentConfig, out: &Path) -> Result<GenDataStats, CliError> {
    config.validate()?;
    echo_config(config, out)?;
    let env = build_environment(config)?;
    let reward = env.reward_model(config.reward.to_spec());
    let (channel, calibration) = resolve_channel(config, &env, &reward)?;
    let spec = config.mixture.resolve(config.environment.num_languages)?;
    let gen = data_gen_config(config);
    let dataset =
        build_dataset(&spec, &env, &channel, &reward, &gen).map_err(CliError::from_core_config)?;
    io::write_environment(&out.join("env"), &env, channel.marker_rate)?;
    let dataset_path = out.join("dataset.jsonl");
    io::write_pairs_jsonl(&dataset_path, &dataset.pairs)?;
    let rejected = dataset
        .pairs
        .iter()
        .filter(|p| p.channel_rejected == Channel::Translated)
        .count();
    let stats = GenDataStats {
        per_language: dataset.per_language_counts(),
        translated_rejected_fraction: rejected as f64 / dataset.len() as f64,
        marker_rate: channel.marker_rate,
        calibration,
        dataset_path,
    };
    if let Some(c) = &stats.calibration {
        println!(
            "calibrated marker rate {:.6} (achieved {:.4}{})",
            c.marker_rate,
            c.achieved,
            if c.at_endpoint { ", endpoint: target unreachable" } else { "" }
        );
    }
    for (lang, count) in &stats.per_language {
        println!("{lang}: {count} pairs");
    }
    println!(
        "translated channel rejected in {:.4} of {} pairs",
        stats.translated_rejected_fraction,
        dataset.len()
    );
    Ok(stats)
}

fn load_or_build_environment(
    config: &ExperimentConfig,
    out: &Path,
) -> Result<(Environment64, f64), CliError> {
    let env_dir = out.join("env");
    if env_dir.join("manifest.json").exists() {
        let (env, manifest) = io::read_environment::<f64>(&env_dir)?;
        Ok((env, manifest.marker_rate))
    } else {
        let env = build_environment(config)?;
        let reward = env.reward_model(config.reward.to_spec());
        let (channel, _) = resolve_channel(config, &env, &reward)?;
        io::write_environment(&env_dir, &env, channel.marker_rate)?;
        Ok((env, channel.marker_rate))
    }
}

pub struct TrainStats {
    pub snapshots: Vec<(String, WinRateRow)>,
    pub best: String,
    pub best_row: WinRateRow,
    pub checkpoint_dir: PathBuf,
}

/// Train per the config's trainer, snapshot per epoch, and pick the best
/// checkpoint by held-out judged win-rate against the reference policy.
pub fn cmd_train(config: &ExperimentConfig, out: &Path) -> Result<TrainStats, CliError> {
    config.validate()?;
    echo_config(config, out)?;
    let (env, _) = load_or_build_environment(config, out)?;
    let vocab = env.vocab;
    let k = env.num_languages();
    let reference = Policy64::zeros(vocab, k);
    let init = reference.clone();
    let spec = config.mixture.resolve(config.environment.num_languages)?;

    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut snapshots: Vec<(String, Policy64)> =
        vec![("epoch_000".to_string(), init.clone())];

    match config.trainer.kind {
        TrainerKind::Dpo => {
            let dataset_path = out.join("dataset.jsonl");
            if !dataset_path.exists() {
                return Err(CliError::runtime(format!(
                    "dataset not found at {}; run gen-data first",
                    dataset_path.display()
                )));
            }
            let pairs = io::read_pairs_jsonl(&dataset_path)?;
            let dataset = Dataset {
                pairs,
                provenance: Provenance { mixture: spec.clone(), seed: config.data.seed },
            };
            let outcome = train_dpo(&init, &reference, &dataset, &config.trainer.dpo)
                .map_err(CliError::from_core_runtime)?;
            fs::write(out.join("history.csv"), io::dpo_history_csv(&outcome.history))?;
            collect_snapshots(&mut snapshots, outcome.epoch_snapshots, config);
        }
        TrainerKind::Rloo => {
            let reward = env.reward_model(config.reward.to_spec());
            let mixture = PromptMixture::from_spec(&env, &spec, data_gen_config(config))
                .map_err(CliError::from_core_config)?;
            let outcome = train_rloo(&init, &reference, &mixture, &reward, &config.trainer.rloo)
                .map_err(CliError::from_core_runtime)?;
            fs::write(out.join("history.csv"), io::rloo_history_csv(&outcome.history))?;
            collect_snapshots(&mut snapshots, outcome.epoch_snapshots, config);
        }
    }

    for (name, params) in &snapshots {
        io::write_checkpoint(&ckpt_dir.join(format!("{name}.ckpt")), params)?;
    }

    // Held-out selection: judge each snapshot against the reference.
    let judge = judge_spec(config, &env);
    let prompts = eval_prompts(config, &env);
    let sampling = eval_sampling(config);
    let mut rows = Vec::new();
    let mut best_idx = 0usize;
    for (i, (name, params)) in snapshots.iter().enumerate() {
        let report = win_rate(params, &reference, &prompts, &judge, &sampling);
        let agg = report.aggregate();
        if agg.win_pct() > rows.get(best_idx).map(|(_, r): &(String, WinRateRow)| r.win_pct()).unwrap_or(f64::NEG_INFINITY)
        {
            best_idx = i;
        }
        rows.push((name.clone(), agg));
    }
    let (best, best_row) = rows[best_idx].clone();

    let mut summary = String::new();
    let _ = writeln!(summary, "held-out win-rate vs reference ({} prompts/language)", config.evaluation.prompts_per_language);
    let _ = writeln!(summary, "{:<12} {:>7} {:>7} {:>7}", "checkpoint", "Win%", "Loss%", "ΔW-L%");
    for (name, row) in &rows {
        let _ = writeln!(
            summary,
            "{:<12} {:>7.1} {:>7.1} {:>7.1}",
            name,
            row.win_pct(),
            row.loss_pct(),
            round1(row.delta_wl())
        );
    }
    let _ = writeln!(summary, "best checkpoint: {best}.ckpt (win {:.1}%)", best_row.win_pct());
    fs::write(out.join("train_summary.txt"), &summary)?;
    print!("{summary}");

    Ok(TrainStats { snapshots: rows, best, best_row, checkpoint_dir: ckpt_dir })
}

fn collect_snapshots(
    snapshots: &mut Vec<(String, Policy64)>,
    epoch_snapshots: Vec<Policy64>,
    config: &ExperimentConfig,
) {
    let cadence = config.output.checkpoint_every_epochs;
    let last = epoch_snapshots.len();
    for (i, params) in epoch_snapshots.into_iter().enumerate() {
        let epoch = i + 1;
        if epoch % cadence == 0 || epoch == last {
            snapshots.push((format!("epoch_{epoch:03}"), params));
        }
    }
}

pub struct EvalStats {
    pub report: WinRateReport,
    pub report_csv: PathBuf,
    pub splits: Option<(WinRateRow, WinRateRow)>,
}

/// Judge checkpoint A against checkpoint B over every environment language,
/// with a seen/unseen split for the config's training mixture.
pub fn cmd_eval(
    config: &ExperimentConfig,
    out: &Path,
    checkpoint_a: &Path,
    checkpoint_b: &Path,
) -> Result<EvalStats, CliError> {
    config.validate()?;
    let (env, _) = load_or_build_environment(config, out)?;
    let policy_a = io::read_checkpoint::<f64>(checkpoint_a)?;
    io::expect_shape(&policy_a, env.vocab.size, env.num_languages())?;
    let policy_b = io::read_checkpoint::<f64>(checkpoint_b)?;
    io::expect_shape(&policy_b, env.vocab.size, env.num_languages())?;

    let judge = judge_spec(config, &env);
    let prompts = eval_prompts(config, &env);
    let sampling = eval_sampling(config);
    let report = win_rate(&policy_a, &policy_b, &prompts, &judge, &sampling);

    let reports_dir = out.join("reports");
    fs::create_dir_all(&reports_dir)?;
    let stem = |p: &Path| {
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "ckpt".into())
    };
    let base = format!("eval_{}_vs_{}", stem(checkpoint_a), stem(checkpoint_b));
    let report_csv = reports_dir.join(format!("{base}.csv"));
    fs::write(&report_csv, io::report_csv(&report))?;
    let table = io::report_table(&base, &report);
    fs::write(reports_dir.join(format!("{base}.txt")), &table)?;
    print!("{table}");

    // Seen/unseen split for the configured training mixture.
    let spec = config.mixture.resolve(config.environment.num_languages)?;
    let all: Vec<LanguageId> = env.languages().collect();
    let (seen, unseen) = split_seen_unseen(&all, &spec);
    let splits = if unseen.is_empty() {
        None
    } else {
        let seen_row = report.subset(seen.iter().copied());
        let unseen_row = report.subset(unseen.iter().copied());
        let mut text = String::new();
        let _ = writeln!(text, "{base} split by mixture {}", spec.name);
        let _ = writeln!(text, "{:<10} {:>7} {:>7} {:>7}", "", "Win%", "Loss%", "ΔW-L%");
        for (name, row) in [("seen", &seen_row), ("unseen", &unseen_row)] {
            let _ = writeln!(
                text,
                "{:<10} {:>7.1} {:>7.1} {:>7.1}",
                name,
                row.win_pct(),
                row.loss_pct(),
                round1(row.delta_wl())
            );
        }
        fs::write(reports_dir.join(format!("{base}_splits.txt")), &text)?;
        print!("{text}");
        Some((seen_row, unseen_row))
    };

    Ok(EvalStats { report, report_csv, splits })
}

/// Re-render a report CSV as the aligned text table, verifying row
/// arithmetic along the way.
pub fn cmd_report(report_csv: &Path, out: Option<&Path>) -> Result<String, CliError> {
    let text = fs::read_to_string(report_csv)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| CliError::runtime("empty report csv"))?;
    if header != "lang,prompts,win,tie,loss,win_pct,tie_pct,loss_pct,delta_wl" {
        return Err(CliError::runtime(format!("unrecognized report header: {header}")));
    }
    let mut table = String::new();
    let _ = writeln!(table, "{}", report_csv.display());
    let _ = writeln!(table, "{:<10} {:>7} {:>7} {:>7}", "", "Win%", "Loss%", "ΔW-L%");
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 9 {
            return Err(CliError::runtime(format!("malformed report row: {line}")));
        }
        let name = fields[0];
        let parse = |i: usize| -> Result<usize, CliError> {
            fields[i]
                .parse()
                .map_err(|_| CliError::runtime(format!("bad count in report row: {line}")))
        };
        let row = WinRateRow { win: parse(2)?, tie: parse(3)?, loss: parse(4)? };
        if row.total() != parse(1)? {
            return Err(CliError::runtime(format!("win+tie+loss != prompts in row: {line}")));
        }
        let printed_delta: f64 = fields[8]
            .parse()
            .map_err(|_| CliError::runtime(format!("bad delta in report row: {line}")))?;
        if (round1(row.delta_wl()) - printed_delta).abs() > 0.05 {
            return Err(CliError::runtime(format!(
                "delta {} inconsistent with win/loss columns in row: {line}",
                printed_delta
            )));
        }
        table_row_into(&mut table, name, &row);
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        let name = report_csv.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        fs::write(dir.join(format!("{name}.txt")), &table)?;
    }
    print!("{table}");
    Ok(table)
}

fn table_row_into(out: &mut String, name: &str, row: &WinRateRow) {
    let _ = writeln!(
        out,
        "{:<10} {:>7.1} {:>7.1} {:>7.1}",
        name,
        row.win_pct(),
        row.loss_pct(),
        round1(row.delta_wl())
    );
}

/// Build a dataset in memory for presets that need one.
pub fn build_dataset_for(
    config: &ExperimentConfig,
    env: &Environment64,
    spec: &MixtureSpec,
) -> Result<(Dataset, TranslationChannel), CliError> {
    let reward = env.reward_model(config.reward.to_spec());
    let (channel, _) = resolve_channel(config, env, &reward)?;
    let dataset = build_dataset(spec, env, &channel, &reward, &data_gen_config(config))
        .map_err(CliError::from_core_config)?;
    Ok((dataset, channel))
}
