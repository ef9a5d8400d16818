//! Training loop, evaluation and ablation runs.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{self, CalibrationConfig, CalibrationError, CalibrationMode, ClassWeight, ClusterSummary};
use crate::data::{self, DataError, Dataset, DomainPairSpec};
use crate::model::{self, ArchConfig, ClipPlan, ManParams, ModelError, ModelShape};
use crate::nn::{NnError, Parameters, Sgd};
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid value for {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("datasets do not fit together: {0}")]
    DatasetMismatch(String),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
}

/// Training variants compared in ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Calibrated class weight with both entropy and cluster terms.
    #[serde(rename = "MCAN")]
    Mcan,
    /// Uncalibrated class weight.
    #[serde(rename = "MAN")]
    Man,
    /// Class weight fixed at all-ones.
    #[serde(rename = "no_class_weight")]
    NoClassWeight,
    /// Calibrated, with the adversarial trade-off forced to zero.
    #[serde(rename = "no_adversarial")]
    NoAdversarial,
    /// Calibrated, first modality only.
    #[serde(rename = "single_modality")]
    SingleModality,
    /// Entropy term plus a constant unit cluster term.
    #[serde(rename = "entropy_only")]
    EntropyOnly,
    /// Cluster term only.
    #[serde(rename = "cluster_only")]
    ClusterOnly,
    /// Uncalibrated class weight, first modality only.
    #[serde(rename = "PADA_baseline")]
    PadaBaseline,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Mcan,
        Variant::Man,
        Variant::NoClassWeight,
        Variant::NoAdversarial,
        Variant::SingleModality,
        Variant::EntropyOnly,
        Variant::ClusterOnly,
        Variant::PadaBaseline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mcan => "MCAN",
            Variant::Man => "MAN",
            Variant::NoClassWeight => "no_class_weight",
            Variant::NoAdversarial => "no_adversarial",
            Variant::SingleModality => "single_modality",
            Variant::EntropyOnly => "entropy_only",
            Variant::ClusterOnly => "cluster_only",
            Variant::PadaBaseline => "PADA_baseline",
        }
    }

    /// `None` keeps the class weight at all-ones.
    pub fn calibration_mode(self) -> Option<CalibrationMode> {
        match self {
            Variant::Mcan | Variant::NoAdversarial | Variant::SingleModality => Some(CalibrationMode::Combined),
            Variant::Man | Variant::PadaBaseline => Some(CalibrationMode::Uncalibrated),
            Variant::EntropyOnly => Some(CalibrationMode::EntropyOnly),
            Variant::ClusterOnly => Some(CalibrationMode::ClusterOnly),
            Variant::NoClassWeight => None,
        }
    }

    pub fn single_modality(self) -> bool {
        matches!(self, Variant::SingleModality | Variant::PadaBaseline)
    }

    pub fn effective_alpha(self, alpha: f64) -> f64 {
        if self == Variant::NoAdversarial {
            0.0
        } else {
            alpha
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant {s:?}; expected one of {}", names.join(", "))
        })
    }
}

fn default_batch() -> usize {
    24
}
fn default_lr() -> f64 {
    0.001
}
fn default_momentum() -> f64 {
    0.9
}
fn default_alpha() -> f64 {
    1.0
}
fn default_variant() -> Variant {
    Variant::Mcan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Class-weight refresh interval in mini-batches; one epoch when unset.
    #[serde(default)]
    pub refresh_interval: Option<usize>,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: default_batch(),
            lr: default_lr(),
            momentum: default_momentum(),
            alpha: default_alpha(),
            refresh_interval: None,
            calibration: CalibrationConfig::default(),
            variant: Variant::Mcan,
            seed: 0,
            model: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |field, reason: String| Err(TrainError::InvalidConfig { field, reason });
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.refresh_interval == Some(0) {
            return bad("refresh_interval", "must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be finite and > 0, got {}", self.lr));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha", format!("must be finite and >= 0, got {}", self.alpha));
        }
        self.calibration.validate()?;
        self.model.validate().map_err(|(field, reason)| TrainError::InvalidConfig { field, reason })?;
        Ok(())
    }
}

/// Class weight at one refresh plus how far it sits from the true target
/// label distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSnapshot {
    pub step: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    /// Mass of `raw / sum(raw)` on classes absent from the target.
    pub outlier_mass: Option<f64>,
    pub l1_distance: Option<f64>,
    pub cluster: Option<ClusterSummary>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub count: usize,
    pub l2_norm: f64,
    /// Hash of the parameter bit patterns, hex encoded.
    pub digest: String,
}

impl ParameterSummary {
    pub fn of<P: Parameters>(params: &P) -> Self {
        let flat = params.flatten();
        let digest = flat.iter().fold(0xC0FFEEu64, |h, v| rng::mix64(h ^ v.to_bits()));
        Self {
            count: flat.len(),
            l2_norm: flat.iter().map(|v| v * v).sum::<f64>().sqrt(),
            digest: format!("{digest:016x}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub num_source_classes: usize,
    /// Classes that occur in the target labels; empty when they are unknown.
    pub target_classes: Vec<usize>,
    pub modalities: usize,
    pub steps_per_epoch: usize,
    pub refresh_interval: usize,
    pub total_steps: usize,
    /// Target accuracy after each epoch (empty without target labels).
    pub epoch_accuracy: Vec<f64>,
    /// Mean objective over each epoch's steps.
    pub epoch_loss: Vec<f64>,
    pub snapshots: Vec<GammaSnapshot>,
    /// `outlier_mass` of every snapshot, in order.
    pub outlier_mass_trajectory: Vec<f64>,
    pub final_accuracy: Option<f64>,
    pub confusion: Option<Vec<Vec<usize>>>,
    pub final_parameters: ParameterSummary,
    /// Not serialized, so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl TrainReport {
    pub fn class_weights(&self) -> Vec<ClassWeight> {
        self.snapshots
            .iter()
            .map(|s| ClassWeight { raw: s.raw.clone(), normalized: s.normalized.clone(), step: s.step })
            .collect()
    }

    pub fn is_target_mask(&self) -> Vec<bool> {
        (0..self.num_source_classes).map(|c| self.target_classes.contains(&c)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(params: &ManParams, target: &Dataset, plan: &ClipPlan) -> Result<Evaluation, TrainError> {
    let labels = target.labels()?;
    let outputs = model::forward_dataset(params, target, plan)?;
    Ok(evaluation_from(&outputs, labels, params.shape.num_classes))
}

fn evaluation_from(outputs: &[model::SampleOutput], labels: &[usize], classes: usize) -> Evaluation {
    let predictions: Vec<usize> = outputs.iter().map(|o| argmax(&o.probs)).collect();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0;
    for (&p, &y) in predictions.iter().zip(labels) {
        confusion[y][p] += 1;
        correct += usize::from(p == y);
    }
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    Evaluation { accuracy, confusion, predictions }
}

/// Outlier mass and L1 distance of the distribution form of `raw` against
/// the true label distribution. Classes with zero true mass are outliers.
pub fn gamma_quality(raw: &[f64], true_distribution: &[f64]) -> Result<(f64, f64), TrainError> {
    if raw.len() != true_distribution.len() {
        return Err(TrainError::DatasetMismatch(format!(
            "class weight has {} entries, label distribution {}",
            raw.len(),
            true_distribution.len()
        )));
    }
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) {
        return Err(CalibrationError::AllZero.into());
    }
    let mut outlier = 0.0;
    let mut l1 = 0.0;
    for (&g, &p) in raw.iter().zip(true_distribution) {
        let q = g / total;
        if p == 0.0 {
            outlier += q;
        }
        l1 += (q - p).abs();
    }
    Ok((outlier, l1))
}

struct Prepared {
    source: Dataset,
    target: Dataset,
    shape: ModelShape,
    true_distribution: Option<Vec<f64>>,
}

fn prepare(config: &TrainConfig, source: &Dataset, target: &Dataset) -> Result<Prepared, TrainError> {
    config.validate()?;
    source.check_consistent()?;
    target.check_consistent()?;
    if source.is_empty() || target.is_empty() {
        return Err(DataError::Empty.into());
    }
    let labels = source.labels()?;
    if labels.len() != source.len() {
        return Err(TrainError::DatasetMismatch("source label count differs from sample count".into()));
    }
    let (frames, modalities, dim) = source.shape().expect("non-empty");
    if target.shape() != Some((frames, modalities, dim)) {
        return Err(TrainError::DatasetMismatch(format!(
            "source clips are {:?}, target clips are {:?}",
            (frames, modalities, dim),
            target.shape()
        )));
    }
    if source.num_source_classes != target.num_source_classes {
        return Err(TrainError::DatasetMismatch(format!(
            "source declares {} classes, target {}",
            source.num_source_classes, target.num_source_classes
        )));
    }
    let classes = source.num_source_classes;
    if config.variant.calibration_mode().is_some_and(|m| matches!(m, CalibrationMode::Combined | CalibrationMode::ClusterOnly))
        && config.calibration.k > target.len()
    {
        return Err(TrainError::InvalidConfig {
            field: "k",
            reason: format!("{} clusters for {} target samples", config.calibration.k, target.len()),
        });
    }
    let true_distribution = match &target.labels {
        Some(_) => Some(data::true_label_distribution(target, classes)?),
        None => None,
    };
    let keep = if config.variant.single_modality() { 1 } else { modalities };
    let (source, target) = if keep == modalities {
        (source.clone(), target.clone())
    } else {
        (source.truncate_modalities(keep), target.truncate_modalities(keep))
    };
    Ok(Prepared {
        source,
        target,
        shape: ModelShape { frames, modalities: keep, input_dim: dim, num_classes: classes },
        true_distribution,
    })
}

/// Clip plan used for every forward pass outside the optimizer steps.
pub fn evaluation_plan(config: &TrainConfig, frames: usize) -> Result<ClipPlan, ModelError> {
    ClipPlan::from_seed(frames, config.model.max_clips_per_scale, rng::derive(config.seed, 0xE7A1))
}

/// Trains and returns the report together with the final parameters.
pub fn train(config: &TrainConfig, source: &Dataset, target: &Dataset) -> Result<(TrainReport, ManParams), TrainError> {
    let started = Instant::now();
    let Prepared { source, target, shape, true_distribution } = prepare(config, source, target)?;
    let variant = config.variant;
    let classes = shape.num_classes;
    let mut params = ManParams::new(&config.model, shape, variant.effective_alpha(config.alpha), config.seed)?;
    let mut sgd = Sgd::new(config.lr, config.momentum);

    let labels = source.labels()?.to_vec();
    let n_s = source.len();
    let n_t = target.len();
    let batch_s = config.batch_size.min(n_s);
    let batch_t = config.batch_size.min(n_t);
    let steps_per_epoch = (n_s / batch_s).max(1);
    let refresh_interval = config.refresh_interval.unwrap_or(steps_per_epoch);
    let total_steps = config.epochs * steps_per_epoch;
    let eval_plan = evaluation_plan(config, shape.frames)?;
    let mut shuffle_rng = rng::stream(config.seed, streams::SHUFFLE);
    let mut clip_rng = rng::stream(config.seed, streams::CLIPS);
    let cluster_seed = rng::derive(config.seed, streams::CLUSTERING);

    let snapshot = |weight: &ClassWeight, cluster: Option<ClusterSummary>, converged: bool| -> Result<GammaSnapshot, TrainError> {
        let (outlier_mass, l1_distance) = match &true_distribution {
            Some(p) => {
                let (o, l) = gamma_quality(&weight.raw, p)?;
                (Some(o), Some(l))
            }
            None => (None, None),
        };
        Ok(GammaSnapshot {
            step: weight.step,
            raw: weight.raw.clone(),
            normalized: weight.normalized.clone(),
            outlier_mass,
            l1_distance,
            cluster,
            converged,
        })
    };

    let mut gamma = ClassWeight::uniform(classes, 0);
    let mut snapshots = vec![snapshot(&gamma, None, true)?];
    let mut epoch_accuracy = Vec::with_capacity(config.epochs);
    let mut epoch_loss = Vec::with_capacity(config.epochs);
    let mut step = 0;
    let target_labels = target.labels.clone();

    for epoch in 0..config.epochs {
        let mut source_order: Vec<usize> = (0..n_s).collect();
        let mut target_order: Vec<usize> = (0..n_t).collect();
        source_order.shuffle(&mut shuffle_rng);
        target_order.shuffle(&mut shuffle_rng);
        let plan = ClipPlan::draw(shape.frames, config.model.max_clips_per_scale, &mut clip_rng)?;
        let mut loss_sum = 0.0;

        for b in 0..steps_per_epoch {
            let src_idx = &source_order[b * batch_s..(b + 1) * batch_s];
            let src: Vec<_> = src_idx.iter().map(|&i| &source.samples[i]).collect();
            let lbl: Vec<usize> = src_idx.iter().map(|&i| labels[i]).collect();
            let tgt: Vec<_> = (0..batch_t).map(|k| &target.samples[target_order[(b * batch_t + k) % n_t]]).collect();
            let out = model::man_loss(&params, &src, &lbl, &tgt, &gamma.normalized, &plan)?;
            if !out.objective.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, value: out.objective });
            }
            sgd.step(&mut params, &out.grads)?;
            loss_sum += out.objective;
            step += 1;

            if step % refresh_interval == 0 {
                let (weight, cluster, converged) = match variant.calibration_mode() {
                    None => (ClassWeight::uniform(classes, step), None, true),
                    Some(mode) => {
                        let outputs = model::forward_dataset(&params, &target, &eval_plan)?;
                        let probs: Vec<Vec<f64>> = outputs.iter().map(|o| o.probs.clone()).collect();
                        let fused: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.fused).collect();
                        let (mut w, diag) = calibration::calibrated_class_weight(
                            &probs,
                            &fused,
                            &config.calibration,
                            rng::derive(cluster_seed, step as u64),
                            mode,
                        )?;
                        w.step = step;
                        (w, diag.cluster, diag.converged)
                    }
                };
                gamma = weight;
                snapshots.push(snapshot(&gamma, cluster, converged)?);
            }
        }
        epoch_loss.push(loss_sum / steps_per_epoch as f64);
        if let Some(labels) = &target_labels {
            let outputs = model::forward_dataset(&params, &target, &eval_plan)?;
            epoch_accuracy.push(evaluation_from(&outputs, labels, classes).accuracy);
        }
    }

    let (final_accuracy, confusion) = match &target_labels {
        Some(labels) => {
            let outputs = model::forward_dataset(&params, &target, &eval_plan)?;
            let e = evaluation_from(&outputs, labels, classes);
            (Some(e.accuracy), Some(e.confusion))
        }
        None => (None, None),
    };
    let target_classes = true_distribution
        .as_ref()
        .map(|p| p.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(c, _)| c).collect())
        .unwrap_or_default();
    let outlier_mass_trajectory = snapshots.iter().filter_map(|s| s.outlier_mass).collect();
    let report = TrainReport {
        config: config.clone(),
        num_source_classes: classes,
        target_classes,
        modalities: shape.modalities,
        steps_per_epoch,
        refresh_interval,
        total_steps,
        epoch_accuracy,
        epoch_loss,
        snapshots,
        outlier_mass_trajectory,
        final_accuracy,
        confusion,
        final_parameters: ParameterSummary::of(&params),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((report, params))
}

/// One (variant, seed[, K]) training run inside an ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub k: usize,
    pub accuracy: f64,
    pub outlier_mass: f64,
    pub l1_distance: f64,
    /// False when any refresh hit the k-means iteration cap.
    pub clustering_converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub k: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_outlier_mass: f64,
    pub std_outlier_mass: f64,
    pub mean_l1_distance: f64,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub base: TrainConfig,
    pub data: DomainPairSpec,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    /// MCAN rows for K = 1..=K_max when a sweep was requested.
    pub k_sweep: Vec<AblationRow>,
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn aggregate(variant: Variant, k: usize, cells: Vec<AblationCell>) -> AblationRow {
    let acc: Vec<f64> = cells.iter().map(|c| c.accuracy).collect();
    let out: Vec<f64> = cells.iter().map(|c| c.outlier_mass).collect();
    let l1: Vec<f64> = cells.iter().map(|c| c.l1_distance).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let (mean_outlier_mass, std_outlier_mass) = mean_std(&out);
    AblationRow {
        variant,
        k,
        mean_accuracy,
        std_accuracy,
        mean_outlier_mass,
        std_outlier_mass,
        mean_l1_distance: mean_std(&l1).0,
        cells,
    }
}

/// Trains every variant on every seed. Each seed also seeds the generated
/// domain pair, so variants are compared on identical data. With
/// `k_sweep_max = Some(K)` the MCAN variant is additionally run for every
/// K in `1..=K`. Cells run in parallel; results come back in input order.
pub fn run_ablation_suite(
    base: &TrainConfig,
    data_spec: &DomainPairSpec,
    variants: &[Variant],
    seeds: &[u64],
    k_sweep_max: Option<usize>,
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::InvalidConfig { field: "seeds", reason: "at least one seed is required".into() });
    }
    base.validate()?;
    let datasets: Vec<(Dataset, Dataset)> = seeds
        .par_iter()
        .map(|&seed| data::generate_domain_pair(&DomainPairSpec { seed, ..data_spec.clone() }))
        .collect::<Result<_, _>>()?;

    let mut jobs: Vec<(Variant, usize, usize)> = Vec::new();
    for &v in variants {
        for s in 0..seeds.len() {
            jobs.push((v, base.calibration.k, s));
        }
    }
    let sweep: Vec<usize> = k_sweep_max.map(|k| (1..=k).collect()).unwrap_or_default();
    for &k in &sweep {
        for s in 0..seeds.len() {
            jobs.push((Variant::Mcan, k, s));
        }
    }

    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(variant, k, s)| {
            let mut config = base.clone();
            config.variant = variant;
            config.seed = seeds[s];
            config.calibration.k = k;
            let (source, target) = &datasets[s];
            let (report, _) = train(&config, source, target)?;
            let last = report.snapshots.last().expect("initial snapshot always present");
            Ok(AblationCell {
                variant,
                seed: seeds[s],
                k,
                accuracy: report.final_accuracy.unwrap_or(f64::NAN),
                outlier_mass: last.outlier_mass.unwrap_or(f64::NAN),
                l1_distance: last.l1_distance.unwrap_or(f64::NAN),
                clustering_converged: report.snapshots.iter().all(|s| s.converged),
            })
        })
        .collect::<Result<_, TrainError>>()?;

    let per = seeds.len();
    let mut chunks = cells.chunks(per);
    let rows = variants.iter().map(|&v| aggregate(v, base.calibration.k, chunks.next().unwrap().to_vec())).collect();
    let k_sweep = sweep.iter().map(|&k| aggregate(Variant::Mcan, k, chunks.next().unwrap().to_vec())).collect();
    Ok(AblationTable { base: base.clone(), data: data_spec.clone(), seeds: seeds.to_vec(), rows, k_sweep })
}
