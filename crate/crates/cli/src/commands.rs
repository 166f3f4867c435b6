//! One-shot commands: datagen, train, eval, bench.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use nilm_bench::{LoadProfile, ReportFormat, RequestTemplate};
use nilm_core::datagen::{self, ScenarioConfig};
use nilm_core::preprocess::FEATURES;
use nilm_core::WindowBatch;
use nilm_gbdt::{FeatureSchema, GbdtModel, GbdtTrainParams};
use nilm_seq2point::{Architecture, S2PModel, S2PTrainConfig};

use crate::data::{build_supervised, chronological_split, evaluate, load_clean, Supervised};
use crate::manifest::RunManifest;
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Gbdt,
    S2p,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ArchPreset {
    /// Small transformer for quick runs and demos.
    Tiny,
    /// Full-size architecture.
    Default,
}

impl ArchPreset {
    pub fn architecture(self) -> Architecture {
        match self {
            ArchPreset::Default => Architecture::default(),
            ArchPreset::Tiny => Architecture {
                conv_channels: 4,
                kernel: 3,
                d_model: 8,
                heads: 2,
                head_dim: 4,
                ffn_hidden: 16,
                attn_depth: 1,
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    /// Scenario config JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_datagen(args: &DatagenArgs, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", args.config.display())))?;
    let cfg: ScenarioConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("bad scenario config: {e}")))?;
    RunManifest::new("datagen", out_dir, seed).with_config(&args.config).write()?;

    let mut samples = datagen::generate_scenario(&cfg)
        .map_err(|e| CliError::Usage(format!("invalid scenario: {e}")))?;
    let dirty = datagen::inject_dirty(&mut samples, cfg.dirty_fraction, cfg.seed)
        .map_err(|e| CliError::Usage(format!("invalid dirty fraction: {e}")))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).context("creating output dir")?;
    }
    datagen::write_csv(&samples, &args.out).context("writing dataset")?;
    println!(
        "wrote {} rows ({} corrupted) to {}",
        samples.len(),
        dirty.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    /// Labeled measurement CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV for the held-out split (default: <out-dir>/train-metrics.csv).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, default_value_t = 31)]
    pub window_len: usize,
    #[arg(long, default_value_t = 0.5)]
    pub cutoff: f64,
    /// Tree count (gbdt).
    #[arg(long, default_value_t = 30)]
    pub trees: usize,
    #[arg(long, default_value_t = 3)]
    pub max_depth: usize,
    /// Training epochs (s2p).
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    /// Model-specific default when omitted.
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long, value_enum, default_value_t = ArchPreset::Default)]
    pub arch: ArchPreset,
}

/// Batched forward pass so one graph never holds the whole test set.
pub fn s2p_probs(model: &S2PModel, windows: &[WindowBatch]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(64) {
        out.extend(model.forward(chunk)?);
    }
    Ok(out)
}

pub fn cmd_train(args: &TrainArgs, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    RunManifest::new("train", out_dir, seed).with_config(&args.data).write()?;
    let (clean, dropped) = load_clean(&args.data)?;
    if clean.is_empty() {
        return Err(CliError::Usage("dataset is empty after cleaning".into()));
    }
    log::info!("loaded {} clean rows ({dropped} dropped)", clean.len());
    let (train_rows, test_rows) = chronological_split(&clean);
    let train_set = build_supervised(train_rows, args.window_len)?;
    let test_set = build_supervised(test_rows, args.window_len)
        .map(Some)
        .unwrap_or(None);

    let probs_and_truth: (Vec<Vec<f64>>, &Supervised) = match args.model {
        ModelKind::Gbdt => {
            let schema = FeatureSchema { window_len: args.window_len, feature_dim: FEATURES };
            let features: Vec<Vec<f64>> = train_set
                .windows
                .iter()
                .map(nilm_gbdt::features::window_features)
                .collect();
            let targets: Vec<(String, Vec<bool>)> = train_set
                .target_ids
                .iter()
                .enumerate()
                .map(|(j, id)| {
                    (id.clone(), train_set.labels.iter().map(|row| row[j]).collect())
                })
                .collect();
            let params = GbdtTrainParams {
                n_trees: args.trees,
                max_depth: args.max_depth,
                learning_rate: args.learning_rate.unwrap_or(0.3),
                ..Default::default()
            };
            let model = nilm_gbdt::train(schema, &features, &targets, &params)
                .context("gbdt training")?;
            nilm_gbdt::io::save(&model, &args.out).context("saving model")?;
            let eval_set = test_set.as_ref().unwrap_or(&train_set);
            let probs: Vec<Vec<f64>> = eval_set
                .windows
                .iter()
                .map(|w| model.predict_proba(w))
                .collect::<Result<_, _>>()
                .context("held-out prediction")?;
            (probs, test_set.as_ref().unwrap_or(&train_set))
        }
        ModelKind::S2p => {
            let mut model = S2PModel::new(
                args.window_len,
                FEATURES,
                train_set.target_ids.clone(),
                args.arch.architecture(),
                seed,
            )?;
            set_norm_from(&mut model, &train_set.windows);
            let labels: Vec<Vec<f64>> = train_set
                .labels
                .iter()
                .map(|row| row.iter().map(|&b| f64::from(u8::from(b))).collect())
                .collect();
            let cfg = S2PTrainConfig {
                epochs: args.epochs,
                batch_size: args.batch_size,
                learning_rate: args.learning_rate.unwrap_or(1e-3),
                seed,
                ..Default::default()
            };
            let history = nilm_seq2point::train(&mut model, &train_set.windows, &labels, &cfg)
                .context("s2p training")?;
            if let (Some(first), Some(last)) = (history.first(), history.last()) {
                log::info!("loss {first:.4} -> {last:.4} over {} epochs", history.len());
            }
            nilm_seq2point::io::save(&model, &args.out).context("saving model")?;
            let eval_set = test_set.as_ref().unwrap_or(&train_set);
            (s2p_probs(&model, &eval_set.windows)?, test_set.as_ref().unwrap_or(&train_set))
        }
    };

    let (probs, eval_set) = probs_and_truth;
    let report = evaluate(&eval_set.target_ids, &probs, &eval_set.labels, args.cutoff)?;
    let metrics_path = args
        .metrics
        .clone()
        .unwrap_or_else(|| out_dir.join("train-metrics.csv"));
    fs::write(&metrics_path, report.to_csv()).context("writing metrics")?;
    println!(
        "model written to {}, held-out average f1 {:.4}",
        args.out.display(),
        report.average.f1
    );
    print!("{}", report.to_csv());
    Ok(())
}

/// Feature-wise mean/std over the training windows, for input scaling.
fn set_norm_from(model: &mut S2PModel, windows: &[WindowBatch]) {
    let f = model.feature_dim;
    let mut sum = vec![0.0; f];
    let mut sq = vec![0.0; f];
    let mut n = 0usize;
    for w in windows {
        for t in 0..w.window_len {
            for j in 0..f {
                let v = w.at(t, j);
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        n += w.window_len;
    }
    if n == 0 {
        return;
    }
    for j in 0..f {
        let mean = sum[j] / n as f64;
        model.norm_mean[j] = mean;
        model.norm_std[j] = (sq[j] / n as f64 - mean * mean).max(0.0).sqrt();
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub model_path: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics CSV (default: <out-dir>/eval-metrics.csv).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub cutoff: f64,
}

pub fn cmd_eval(args: &EvalArgs, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    RunManifest::new("eval", out_dir, seed)
        .with_config(&args.data)
        .with_model_file(&args.model_path)
        .write()?;
    let (clean, _) = load_clean(&args.data)?;
    if clean.is_empty() {
        return Err(CliError::Usage("dataset is empty after cleaning".into()));
    }

    let (probs, set) = match args.model {
        ModelKind::Gbdt => {
            let model: GbdtModel =
                nilm_gbdt::io::load(&args.model_path).context("loading model")?;
            let set = check_schema(&clean, model.schema.window_len, &target_ids_of(&model))?;
            let probs: Vec<Vec<f64>> = set
                .windows
                .iter()
                .map(|w| model.predict_proba(w))
                .collect::<Result<_, _>>()
                .context("prediction")?;
            (probs, set)
        }
        ModelKind::S2p => {
            let model = nilm_seq2point::io::load(&args.model_path).context("loading model")?;
            let set = check_schema(&clean, model.window_len, &model.targets)?;
            (s2p_probs(&model, &set.windows)?, set)
        }
    };

    let report = evaluate(&set.target_ids, &probs, &set.labels, args.cutoff)?;
    let out = args.out.clone().unwrap_or_else(|| out_dir.join("eval-metrics.csv"));
    fs::write(&out, report.to_csv()).context("writing metrics")?;
    print!("{}", report.to_csv());
    Ok(())
}

fn target_ids_of(model: &GbdtModel) -> Vec<String> {
    model.targets.iter().map(|t| t.target_id.clone()).collect()
}

/// Windows the dataset with the model's own schema and rejects a
/// model/dataset target mismatch before any inference runs.
fn check_schema(
    samples: &[nilm_core::PowerSample],
    window_len: usize,
    model_targets: &[String],
) -> Result<Supervised> {
    let mut set = build_supervised(samples, window_len)?;
    if set.target_ids != model_targets {
        // reorder the truth columns when only the ordering differs
        let perm: Option<Vec<usize>> = model_targets
            .iter()
            .map(|id| set.target_ids.iter().position(|d| d == id))
            .collect();
        match perm {
            Some(perm) if perm.len() == set.target_ids.len() => {
                set.labels = set
                    .labels
                    .iter()
                    .map(|row| perm.iter().map(|&j| row[j]).collect())
                    .collect();
                set.target_ids = model_targets.to_vec();
            }
            _ => bail!(
                "model targets {model_targets:?} do not match dataset targets {:?}",
                set.target_ids
            ),
        }
    }
    Ok(set)
}

#[derive(Debug, Subcommand)]
pub enum BenchCmd {
    /// Run the concurrency sweep against a live endpoint.
    Run {
        /// LoadProfile JSON; defaults apply when omitted.
        #[arg(long)]
        profile: Option<PathBuf>,
        #[arg(long)]
        target: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Raise concurrency until the error rate exceeds 1%.
    Saturate {
        #[arg(long)]
        target: String,
        #[arg(long, default_value_t = 50)]
        start: usize,
        #[arg(long, default_value_t = 50)]
        step: usize,
        #[arg(long, default_value_t = 600)]
        max: usize,
        /// Optional request template JSON (method/path/body).
        #[arg(long)]
        template: Option<PathBuf>,
    },
}

pub fn cmd_bench(cmd: &BenchCmd, out_dir: &Path, seed: u64) -> Result<(), CliError> {
    match cmd {
        BenchCmd::Run { profile, target, out, format } => {
            let fmt: ReportFormat = format
                .parse()
                .map_err(|e: nilm_bench::BenchError| CliError::Usage(e.to_string()))?;
            let profile: LoadProfile = match profile {
                None => LoadProfile::default(),
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| {
                        CliError::Usage(format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("bad profile: {e}")))?
                }
            };
            profile.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let mut manifest = RunManifest::new("bench", out_dir, seed);
            if let Some(path) = profile_path(cmd) {
                manifest = manifest.with_config(path);
            }
            manifest.write()?;
            let report = nilm_bench::run_load(&profile, target).context("load run")?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).context("creating output dir")?;
            }
            fs::write(out, nilm_bench::emit_report(&report, fmt)).context("writing report")?;
            println!("report written to {}", out.display());
            Ok(())
        }
        BenchCmd::Saturate { target, start, step, max, template } => {
            let template: RequestTemplate = match template {
                None => RequestTemplate::default(),
                Some(path) => {
                    let text = fs::read_to_string(path).map_err(|e| {
                        CliError::Usage(format!("cannot read {}: {e}", path.display()))
                    })?;
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("bad template: {e}")))?
                }
            };
            RunManifest::new("bench-saturate", out_dir, seed).write()?;
            let report = nilm_bench::saturate(target, &template, *start, *step, *max)
                .context("saturation sweep")?;
            for row in &report.rows {
                println!(
                    "concurrency {}: {}/{} errors ({:.2}%)",
                    row.concurrency,
                    row.errors,
                    row.requests,
                    row.error_rate * 100.0
                );
            }
            match (report.threshold, report.first_failing) {
                (Some(t), Some(f)) => println!("threshold {t} (fails at {f})"),
                (Some(t), None) => println!("threshold {t} (no failure up to max)"),
                (None, Some(f)) => println!("fails already at {f}"),
                (None, None) => println!("no levels tested"),
            }
            let path = out_dir.join("saturate.json");
            fs::write(&path, serde_json::to_string_pretty(&report).expect("serializes"))
                .context("writing saturation report")?;
            Ok(())
        }
    }
}

fn profile_path(cmd: &BenchCmd) -> Option<&PathBuf> {
    match cmd {
        BenchCmd::Run { profile, .. } => profile.as_ref(),
        BenchCmd::Saturate { template, .. } => template.as_ref(),
    }
}
