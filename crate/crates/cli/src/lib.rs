//! `pvdalab`: generate synthetic domain pairs, train, calibrate class
//! weights offline, run ablations and draw plots.

pub mod config;
pub mod error;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use pvda_core::calibration::{self, CalibrationDiagnostics, CalibrationMode, ClassWeight};
use pvda_core::data;
use pvda_core::nn;
use pvda_core::trainer::{self, AblationTable, TrainReport, Variant};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "pvdalab", version, about = "Partial domain adaptation lab")]
pub struct Cli {
    /// TOML run configuration; the built-in reference task when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for both the data generator and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write source.bin and target.bin.
    Generate,
    /// Train and write report.json, gamma.csv and checkpoint.bin.
    Train {
        /// Overrides `train.variant`.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Compute a class weight from prediction and feature CSV files.
    Calibrate {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Combined)]
        mode: ModeArg,
    },
    /// Run the configured variants over the configured seeds.
    Ablate {
        /// Overrides `ablation.k_sweep_max`.
        #[arg(long)]
        k_sweep_max: Option<usize>,
    },
    /// Draw SVG charts from a train report or an ablation table.
    Plot {
        #[arg(long)]
        report: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Uncalibrated,
    Combined,
    EntropyOnly,
    ClusterOnly,
}

impl From<ModeArg> for CalibrationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Uncalibrated => CalibrationMode::Uncalibrated,
            ModeArg::Combined => CalibrationMode::Combined,
            ModeArg::EntropyOnly => CalibrationMode::EntropyOnly,
            ModeArg::ClusterOnly => CalibrationMode::ClusterOnly,
        }
    }
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub schema_version: u32,
    pub config: RunConfig,
    pub report: TrainReport,
}

/// Contents of `ablation.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub schema_version: u32,
    pub config: RunConfig,
    pub table: AblationTable,
}

/// Contents of `gamma.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrateOutput {
    pub schema_version: u32,
    pub config: RunConfig,
    pub predictions: PathBuf,
    pub features: PathBuf,
    pub class_weight: ClassWeight,
    pub diagnostics: CalibrationDiagnostics,
}

/// Resolves the configuration from global flags. Precedence, lowest first:
/// config file, `--set`, `--seed` / `--out-dir`, then command flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("data.seed={seed}"));
        overrides.push(format!("train.seed={seed}"));
    }
    if let Some(dir) = &cli.out_dir {
        overrides.push(format!("output.out_dir={}", toml::Value::String(dir.display().to_string())));
    }
    if let Command::Train { variant: Some(v) } = &cli.command {
        let v: Variant = v.parse().map_err(|e: String| CliError::validation("variant".to_string(), e))?;
        overrides.push(format!("train.variant=\"{}\"", v.name()));
    }
    if let Command::Ablate { k_sweep_max: Some(k) } = &cli.command {
        overrides.push(format!("ablation.k_sweep_max={k}"));
    }
    RunConfig::load(cli.config.as_deref(), &overrides)
}

/// Runs one command and returns the paths it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    if let Command::Plot { report } = &cli.command {
        let out_dir = cli.out_dir.clone().unwrap_or_else(|| report.parent().map(Path::to_path_buf).unwrap_or_default());
        return cmd_plot(report, &out_dir);
    }
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Generate => cmd_generate(&cfg),
        Command::Train { .. } => cmd_train(&cfg),
        Command::Calibrate { predictions, features, mode } => {
            cmd_calibrate(&cfg, predictions, features, (*mode).into()).map(|p| vec![p])
        }
        Command::Ablate { .. } => cmd_ablate(&cfg).map(|p| vec![p]),
        Command::Plot { .. } => unreachable!(),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let (source, target) = data::generate_domain_pair(&cfg.data)?;
    create_dir(&cfg.output.out_dir)?;
    let paths = [cfg.output.out_dir.join("source.bin"), cfg.output.out_dir.join("target.bin")];
    write_file(&paths[0], &data::encode_dataset(&source)?)?;
    write_file(&paths[1], &data::encode_dataset(&target)?)?;
    Ok(paths.to_vec())
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<PathBuf>, CliError> {
    let load = |p: PathBuf| data::load_dataset(&p).map_err(|e| CliError::from(e).at(&p));
    let source = load(cfg.output.source_path())?;
    let target = load(cfg.output.target_path())?;
    let (report, params) = trainer::train(&cfg.train, &source, &target)?;
    let dir = &cfg.output.out_dir;
    create_dir(dir)?;
    let report_path = dir.join("report.json");
    let csv_path = dir.join("gamma.csv");
    let ckpt_path = dir.join("checkpoint.bin");

    let mut csv = Vec::new();
    calibration::write_gamma_csv(&mut csv, &report.class_weights(), &report.is_target_mask())?;
    write_file(&csv_path, &csv)?;
    nn::save_checkpoint(&ckpt_path, &params).map_err(|e| CliError::from(e).at(&ckpt_path))?;
    write_json(&report_path, &TrainOutput { schema_version: config::SCHEMA_VERSION, config: cfg.clone(), report })?;
    Ok(vec![report_path, csv_path, ckpt_path])
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let a = &cfg.ablation;
    let table = trainer::run_ablation_suite(&cfg.train, &cfg.data, &a.variants, &a.seeds, a.k_sweep_max)?;
    create_dir(&cfg.output.out_dir)?;
    let path = cfg.output.out_dir.join("ablation.json");
    write_json(&path, &AblationOutput { schema_version: config::SCHEMA_VERSION, config: cfg.clone(), table })?;
    Ok(path)
}

/// Reads a numeric CSV whose header names every column `<prefix><index>`.
pub fn read_matrix_csv(path: &Path, prefix: &str) -> Result<Vec<Vec<f64>>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::from(e).at(path))?;
    let headers = reader.headers().map_err(|e| CliError::from(e).at(path))?.clone();
    for (i, h) in headers.iter().enumerate() {
        if h.trim() != format!("{prefix}{i}") {
            return Err(CliError::validation(
                None,
                format!("{}: column {i} is named {h:?}, expected \"{prefix}{i}\"", path.display()),
            ));
        }
    }
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::from(e).at(path))?;
        let row = record
            .iter()
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::validation(None, format!("{}: row {}: {e}", path.display(), line + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Writes rows under a `<prefix><index>` header with 17 significant digits.
pub fn write_matrix_csv(path: &Path, prefix: &str, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let width = rows.first().map_or(0, Vec::len);
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::from(e).at(path))?;
    w.write_record((0..width).map(|i| format!("{prefix}{i}")))?;
    for row in rows {
        w.write_record(row.iter().map(|v| format!("{v:.16e}")))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn cmd_calibrate(cfg: &RunConfig, predictions: &Path, features: &Path, mode: CalibrationMode) -> Result<PathBuf, CliError> {
    let preds = read_matrix_csv(predictions, "p")?;
    let feats = read_matrix_csv(features, "f")?;
    if preds.len() != feats.len() {
        return Err(CliError::validation(
            None,
            format!("{} prediction rows but {} feature rows", preds.len(), feats.len()),
        ));
    }
    let (class_weight, diagnostics) =
        calibration::calibrated_class_weight(&preds, &feats, &cfg.train.calibration, cfg.train.seed, mode)?;
    create_dir(&cfg.output.out_dir)?;
    let path = cfg.output.out_dir.join("gamma.json");
    write_json(
        &path,
        &CalibrateOutput {
            schema_version: config::SCHEMA_VERSION,
            config: cfg.clone(),
            predictions: predictions.to_path_buf(),
            features: features.to_path_buf(),
            class_weight,
            diagnostics,
        },
    )?;
    Ok(path)
}

/// Draws `gamma.svg` and `accuracy.svg` for a train report, or
/// `k_sweep.svg` and `variants.svg` for an ablation table.
pub fn cmd_plot(report: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(report).map_err(|e| CliError::io(report, e))?;
    let value: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::validation(None, format!("{}: not JSON: {e}", report.display())))?;
    let schema = |e: serde_json::Error| CliError::validation(None, format!("{}: schema mismatch: {e}", report.display()));
    create_dir(out_dir)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, svg: String| -> Result<(), CliError> {
        let path = out_dir.join(name);
        write_file(&path, svg.as_bytes())?;
        written.push(path);
        Ok(())
    };
    if value.get("report").is_some() {
        let out: TrainOutput = serde_json::from_value(value).map_err(schema)?;
        let r = &out.report;
        match r.snapshots.last() {
            Some(last) => emit(
                "gamma.svg",
                plot::bar_chart(
                    &format!("Class weight of each class (step {})", last.step),
                    "class (* = present in target)",
                    "normalized class weight",
                    &last.normalized,
                    &r.is_target_mask(),
                    None,
                ),
            )?,
            None => emit("gamma.svg", plot::placeholder("Class weight of each class", "no snapshots"))?,
        }
        if r.epoch_accuracy.is_empty() {
            emit("accuracy.svg", plot::placeholder("Target accuracy", "no epochs"))?;
        } else {
            let xs: Vec<f64> = (1..=r.epoch_accuracy.len()).map(|e| e as f64).collect();
            emit("accuracy.svg", plot::line_chart("Target accuracy", "epoch", "accuracy", &xs, &r.epoch_accuracy))?;
        }
    } else if value.get("table").is_some() {
        let out: AblationOutput = serde_json::from_value(value).map_err(schema)?;
        let t = &out.table;
        if t.k_sweep.is_empty() {
            emit("k_sweep.svg", plot::placeholder("Accuracy vs K", "no K sweep"))?;
        } else {
            let xs: Vec<f64> = t.k_sweep.iter().map(|r| r.k as f64).collect();
            let ys: Vec<f64> = t.k_sweep.iter().map(|r| r.mean_accuracy).collect();
            emit("k_sweep.svg", plot::line_chart("Accuracy vs K", "K", "mean target accuracy", &xs, &ys))?;
        }
        let ys: Vec<f64> = t.rows.iter().map(|r| r.mean_accuracy).collect();
        let flags: Vec<bool> = t.rows.iter().map(|r| r.variant == Variant::Mcan).collect();
        let names: Vec<String> = t.rows.iter().map(|r| r.variant.to_string()).collect();
        emit(
            "variants.svg",
            plot::bar_chart("Mean target accuracy per variant", "variant", "accuracy", &ys, &flags, Some(&names)),
        )?;
    } else {
        return Err(CliError::validation(
            None,
            format!("{}: schema mismatch: expected a train report or an ablation table", report.display()),
        ));
    }
    Ok(written)
}
