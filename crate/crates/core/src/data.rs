//! Synthetic source/target domain pairs and the `PVDALAB1` dataset format.
//!
//! Each class owns one prototype trajectory per modality: `N` frames of
//! `d`-dimensional vectors drawn from a standard normal. Source samples are
//! prototype plus isotropic Gaussian noise. Target samples reuse the
//! prototypes of the first `|Ct|` classes, translated by `shift_magnitude`
//! along a seeded unit direction per (class, modality), with the noise
//! variance of modality `m` (0-based) scaled by `1 + shift_anisotropy * m`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, streams};

pub const DATASET_MAGIC: &[u8; 8] = b"PVDALAB1";

const FLAG_LABELS: u32 = 0b01;
const FLAG_TARGET: u32 = 0b10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid domain pair spec: {field}: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("dataset is empty")]
    Empty,
    #[error("dataset has no labels")]
    MissingLabels,
    #[error("bad magic bytes: expected PVDALAB1")]
    BadMagic,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truncated payload: need {expected} bytes, file has {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn default_modalities() -> usize {
    2
}

/// Generative description of a source/target pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainPairSpec {
    pub num_source_classes: usize,
    pub num_target_classes: usize,
    pub frames_per_sample: usize,
    #[serde(default = "default_modalities")]
    pub modalities: usize,
    pub feature_dim: usize,
    pub samples_per_source_class: usize,
    pub target_class_counts: Vec<usize>,
    pub shift_magnitude: f64,
    pub shift_anisotropy: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DomainPairSpec {
    /// Balanced target with `per_target_class` samples in each target class.
    pub fn balanced(
        num_source_classes: usize,
        num_target_classes: usize,
        samples_per_source_class: usize,
        per_target_class: usize,
    ) -> Self {
        Self {
            num_source_classes,
            num_target_classes,
            frames_per_sample: 4,
            modalities: 2,
            feature_dim: 8,
            samples_per_source_class,
            target_class_counts: vec![per_target_class; num_target_classes],
            shift_magnitude: 0.0,
            shift_anisotropy: 0.0,
            noise_sigma: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let positive = |field: &'static str, v: usize| {
            if v == 0 {
                Err(DataError::InvalidSpec { field, reason: "must be at least 1".into() })
            } else {
                Ok(())
            }
        };
        positive("num_source_classes", self.num_source_classes)?;
        positive("num_target_classes", self.num_target_classes)?;
        positive("frames_per_sample", self.frames_per_sample)?;
        positive("modalities", self.modalities)?;
        positive("feature_dim", self.feature_dim)?;
        positive("samples_per_source_class", self.samples_per_source_class)?;
        if self.num_target_classes >= self.num_source_classes {
            return Err(DataError::InvalidSpec {
                field: "num_target_classes",
                reason: format!(
                    "target label space must be a strict subset: {} >= {}",
                    self.num_target_classes, self.num_source_classes
                ),
            });
        }
        if self.target_class_counts.len() != self.num_target_classes {
            return Err(DataError::InvalidSpec {
                field: "target_class_counts",
                reason: format!(
                    "expected {} entries, got {}",
                    self.num_target_classes,
                    self.target_class_counts.len()
                ),
            });
        }
        if self.target_class_counts.iter().any(|&c| c == 0) {
            return Err(DataError::InvalidSpec {
                field: "target_class_counts",
                reason: "every count must be at least 1".into(),
            });
        }
        let nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(DataError::InvalidSpec { field, reason: format!("must be finite and >= 0, got {v}") })
            }
        };
        nonneg("shift_magnitude", self.shift_magnitude)?;
        nonneg("shift_anisotropy", self.shift_anisotropy)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma > 0.0) {
            return Err(DataError::InvalidSpec {
                field: "noise_sigma",
                reason: format!("must be finite and > 0, got {}", self.noise_sigma),
            });
        }
        Ok(())
    }

    fn frame_len(&self) -> usize {
        self.frames_per_sample * self.feature_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

/// One sample: `frames x modalities x dim` values, frame-major,
/// modality-major, dim-minor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    frames: usize,
    modalities: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureClip {
    pub fn new(frames: usize, modalities: usize, dim: usize, values: Vec<f32>) -> Result<Self, DataError> {
        if values.len() != frames * modalities * dim {
            return Err(DataError::ShapeMismatch(format!(
                "clip of shape {frames}x{modalities}x{dim} needs {} values, got {}",
                frames * modalities * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::ShapeMismatch("clip contains non-finite values".into()));
        }
        Ok(Self { frames, modalities, dim, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.frames, self.modalities, self.dim)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Frame `j` of modality `m` as a `dim`-vector.
    pub fn frame(&self, j: usize, m: usize) -> &[f32] {
        let start = (j * self.modalities + m) * self.dim;
        &self.values[start..start + self.dim]
    }

    /// Keeps only the first `keep` modalities.
    pub fn truncate_modalities(&self, keep: usize) -> FeatureClip {
        let keep = keep.min(self.modalities);
        let mut values = Vec::with_capacity(self.frames * keep * self.dim);
        for j in 0..self.frames {
            for m in 0..keep {
                values.extend_from_slice(self.frame(j, m));
            }
        }
        FeatureClip { frames: self.frames, modalities: keep, dim: self.dim, values }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<FeatureClip>,
    /// Class labels. Present for source; for target they are held out and
    /// only used for evaluation.
    pub labels: Option<Vec<usize>>,
    pub domain: DomainTag,
    pub num_source_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shared `(frames, modalities, dim)` shape, `None` for an empty set.
    pub fn shape(&self) -> Option<(usize, usize, usize)> {
        self.samples.first().map(FeatureClip::shape)
    }

    pub fn labels(&self) -> Result<&[usize], DataError> {
        self.labels.as_deref().ok_or(DataError::MissingLabels)
    }

    pub fn truncate_modalities(&self, keep: usize) -> Dataset {
        Dataset {
            samples: self.samples.iter().map(|c| c.truncate_modalities(keep)).collect(),
            labels: self.labels.clone(),
            domain: self.domain,
            num_source_classes: self.num_source_classes,
        }
    }

    pub fn check_consistent(&self) -> Result<(), DataError> {
        if let Some(shape) = self.shape() {
            if let Some(i) = self.samples.iter().position(|c| c.shape() != shape) {
                return Err(DataError::ShapeMismatch(format!(
                    "sample {i} has shape {:?}, expected {shape:?}",
                    self.samples[i].shape()
                )));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.len() {
                return Err(DataError::ShapeMismatch(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    self.samples.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= self.num_source_classes) {
                return Err(DataError::ShapeMismatch(format!(
                    "label {bad} outside {} source classes",
                    self.num_source_classes
                )));
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Materializes the source and target datasets described by `spec`.
pub fn generate_domain_pair(spec: &DomainPairSpec) -> Result<(Dataset, Dataset), DataError> {
    spec.validate()?;
    let n_cs = spec.num_source_classes;
    let n_ct = spec.num_target_classes;
    let modalities = spec.modalities;
    let frame_len = spec.frame_len();

    let mut proto_rng = rng::stream(spec.seed, streams::PROTOTYPES);
    // prototypes[c][m] holds N*d values, frame-major.
    let prototypes: Vec<Vec<Vec<f64>>> = (0..n_cs)
        .map(|_| (0..modalities).map(|_| normal_vec(&mut proto_rng, frame_len)).collect())
        .collect();

    let mut shift_rng = rng::stream(spec.seed, streams::SHIFT);
    let target_prototypes: Vec<Vec<Vec<f64>>> = prototypes[..n_ct]
        .iter()
        .map(|per_modality| {
            per_modality
                .iter()
                .map(|proto| {
                    let dir = normal_vec(&mut shift_rng, frame_len);
                    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                    proto
                        .iter()
                        .zip(&dir)
                        .map(|(p, u)| p + spec.shift_magnitude * u / norm)
                        .collect()
                })
                .collect()
        })
        .collect();

    let source_sigma = vec![spec.noise_sigma; modalities];
    let target_sigma: Vec<f64> = (0..modalities)
        .map(|m| spec.noise_sigma * (1.0 + spec.shift_anisotropy * m as f64).sqrt())
        .collect();

    let mut source_rng = rng::stream(spec.seed, streams::SOURCE_NOISE);
    let mut source = Vec::with_capacity(n_cs * spec.samples_per_source_class);
    let mut source_labels = Vec::with_capacity(source.capacity());
    for (c, protos) in prototypes.iter().enumerate() {
        for _ in 0..spec.samples_per_source_class {
            source.push(draw_clip(spec, protos, &source_sigma, &mut source_rng)?);
            source_labels.push(c);
        }
    }

    let mut target_rng = rng::stream(spec.seed, streams::TARGET_NOISE);
    let mut target = Vec::new();
    let mut target_labels = Vec::new();
    for (c, (protos, &count)) in target_prototypes.iter().zip(&spec.target_class_counts).enumerate() {
        for _ in 0..count {
            target.push(draw_clip(spec, protos, &target_sigma, &mut target_rng)?);
            target_labels.push(c);
        }
    }

    Ok((
        Dataset {
            samples: source,
            labels: Some(source_labels),
            domain: DomainTag::Source,
            num_source_classes: n_cs,
        },
        Dataset {
            samples: target,
            labels: Some(target_labels),
            domain: DomainTag::Target,
            num_source_classes: n_cs,
        },
    ))
}

fn draw_clip(
    spec: &DomainPairSpec,
    protos: &[Vec<f64>],
    sigma: &[f64],
    rng: &mut impl Rng,
) -> Result<FeatureClip, DataError> {
    let (n, m_count, d) = (spec.frames_per_sample, spec.modalities, spec.feature_dim);
    let mut values = Vec::with_capacity(n * m_count * d);
    for j in 0..n {
        for m in 0..m_count {
            for k in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                values.push((protos[m][j * d + k] + sigma[m] * z) as f32);
            }
        }
    }
    FeatureClip::new(n, m_count, d, values)
}

/// Mean Euclidean distance between each target class prototype and its
/// shifted counterpart, averaged over target classes and modalities.
pub fn mean_prototype_shift(spec: &DomainPairSpec) -> Result<f64, DataError> {
    // Regenerate prototypes at zero noise; only their displacement matters.
    let mut zero = spec.clone();
    zero.noise_sigma = f64::MIN_POSITIVE;
    zero.samples_per_source_class = 1;
    zero.target_class_counts = vec![1; spec.num_target_classes];
    let (source, target) = generate_domain_pair(&zero)?;
    let mut total = 0.0;
    for (t, clip) in target.samples.iter().enumerate() {
        let s = &source.samples[t];
        let dist: f64 = clip
            .values()
            .iter()
            .zip(s.values())
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum::<f64>();
        // distance summed over modalities, averaged per modality
        total += dist.sqrt() / (spec.modalities as f64).sqrt();
    }
    Ok(total / spec.num_target_classes as f64)
}

/// Empirical class frequencies of the held-out target labels over all
/// source classes.
pub fn true_label_distribution(target: &Dataset, num_source_classes: usize) -> Result<Vec<f64>, DataError> {
    let labels = target.labels()?;
    if labels.is_empty() {
        return Err(DataError::Empty);
    }
    let mut counts = vec![0usize; num_source_classes];
    for &l in labels {
        if l >= num_source_classes {
            return Err(DataError::ShapeMismatch(format!("label {l} outside {num_source_classes} classes")));
        }
        counts[l] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<(), DataError> {
    let bytes = encode_dataset(dataset)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes)
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>, DataError> {
    dataset.check_consistent()?;
    let (n, m, d) = dataset.shape().unwrap_or((0, 0, 0));
    let mut flag = 0u32;
    if dataset.labels.is_some() {
        flag |= FLAG_LABELS;
    }
    if dataset.domain == DomainTag::Target {
        flag |= FLAG_TARGET;
    }
    let header = [
        to_u32(dataset.len(), "num_samples")?,
        to_u32(n, "frames")?,
        to_u32(m, "modalities")?,
        to_u32(d, "dim")?,
        to_u32(dataset.num_source_classes, "num_source_classes")?,
        flag,
    ];
    let mut out = Vec::with_capacity(8 + 24 + dataset.len() * (4 + 4 * n * m * d));
    out.extend_from_slice(DATASET_MAGIC);
    for field in header {
        out.extend_from_slice(&field.to_le_bytes());
    }
    if let Some(labels) = &dataset.labels {
        for &l in labels {
            out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
        }
    }
    for clip in &dataset.samples {
        for v in clip.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn to_u32(v: usize, what: &str) -> Result<u32, DataError> {
    u32::try_from(v).map_err(|_| DataError::MalformedHeader(format!("{what} = {v} exceeds u32")))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    const HEADER_LEN: usize = 8 + 6 * 4;
    if bytes.len() < 8 || &bytes[..8] != DATASET_MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::MalformedHeader(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let field = |i: usize| {
        let at = 8 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
    };
    let (count, n, m, d, classes, flag) = (field(0), field(1), field(2), field(3), field(4), field(5) as u32);
    if flag & !(FLAG_LABELS | FLAG_TARGET) != 0 {
        return Err(DataError::MalformedHeader(format!("unknown flag bits {flag:#x}")));
    }
    if classes == 0 {
        return Err(DataError::MalformedHeader("num_source_classes is zero".into()));
    }
    if count > 0 && (n == 0 || m == 0 || d == 0) {
        return Err(DataError::MalformedHeader(format!("degenerate sample shape {n}x{m}x{d}")));
    }
    let has_labels = flag & FLAG_LABELS != 0;
    let per_sample = n
        .checked_mul(m)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| DataError::MalformedHeader("sample shape overflows".into()))?;
    let label_bytes = if has_labels { count.checked_mul(4) } else { Some(0) };
    let expected = label_bytes
        .and_then(|lb| count.checked_mul(per_sample).and_then(|v| v.checked_mul(4)).map(|fb| (lb, fb)))
        .and_then(|(lb, fb)| HEADER_LEN.checked_add(lb)?.checked_add(fb))
        .ok_or_else(|| DataError::MalformedHeader("declared payload size overflows".into()))?;
    if bytes.len() < expected {
        return Err(DataError::Truncated { expected, actual: bytes.len() });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes(bytes.len() - expected));
    }

    let mut at = HEADER_LEN;
    let labels = if has_labels {
        let mut labels = Vec::with_capacity(count);
        for _ in 0..count {
            let l = u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize;
            if l >= classes {
                return Err(DataError::ShapeMismatch(format!("label {l} outside {classes} source classes")));
            }
            labels.push(l);
            at += 4;
        }
        Some(labels)
    } else {
        None
    };
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let values = bytes[at..at + 4 * per_sample]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        at += 4 * per_sample;
        samples.push(FeatureClip::new(n, m, d, values)?);
    }
    let domain = if flag & FLAG_TARGET != 0 { DomainTag::Target } else { DomainTag::Source };
    Ok(Dataset { samples, labels, domain, num_source_classes: classes })
}
