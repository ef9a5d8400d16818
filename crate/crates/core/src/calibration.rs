//! Class weights over the source label space.
//!
//! The plain weight is the mean softmax prediction over target samples,
//! divided by its own mean. Calibration reweights each prediction before
//! aggregation by a certainty term `beta * omega(1 - H)` and a
//! cluster-distance term that depends on where the sample's fused feature
//! sits inside its k-means cluster.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::{self, ClusterError, ClusterModel};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("no predictions given")]
    Empty,
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("class weight is all zero")]
    AllZero,
    #[error("invalid value for {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("prediction {index} is not a finite nonnegative vector")]
    BadPrediction { index: usize },
    #[error(transparent)]
    Cluster(#[from] ClusterError),
}

/// Class weight at one refresh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeight {
    /// `gamma'`, the weighted mean of the softmax predictions.
    pub raw: Vec<f64>,
    /// `gamma = gamma' / mean(gamma')`.
    pub normalized: Vec<f64>,
    /// Training step at which this weight was computed.
    pub step: usize,
}

impl ClassWeight {
    /// All-ones weight with a uniform raw vector.
    pub fn uniform(classes: usize, step: usize) -> Self {
        Self { raw: vec![1.0 / classes as f64; classes], normalized: vec![1.0; classes], step }
    }

    /// `raw` rescaled to sum to one.
    pub fn distribution(&self) -> Vec<f64> {
        let total: f64 = self.raw.iter().sum();
        self.raw.iter().map(|v| v / total).collect()
    }
}

fn default_beta() -> f64 {
    0.5
}
fn default_a() -> f64 {
    5.0
}
fn default_b() -> f64 {
    1.0
}
fn default_k() -> usize {
    5
}
fn default_true() -> bool {
    true
}
fn default_max_iters() -> usize {
    clustering::DEFAULT_MAX_ITERS
}
fn default_tol() -> f64 {
    clustering::DEFAULT_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Cluster weight at or below `mu - sigma`.
    #[serde(default = "default_a")]
    pub a: f64,
    /// Cluster weight at or above `mu + sigma`.
    #[serde(default = "default_b")]
    pub b: f64,
    /// Number of k-means clusters.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Divide entropy by `ln |Cs|` so that `1 - H` lies in `[0, 1]`.
    #[serde(default = "default_true")]
    pub entropy_normalized: bool,
    /// `omega(x) = max(x, omega_floor)`.
    #[serde(default)]
    pub omega_floor: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// L2-normalize features before clustering.
    #[serde(default)]
    pub normalize_features: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            beta: default_beta(),
            a: default_a(),
            b: default_b(),
            k: default_k(),
            entropy_normalized: true,
            omega_floor: 0.0,
            max_iters: default_max_iters(),
            tol: default_tol(),
            normalize_features: false,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |field, reason: String| Err(CalibrationError::InvalidConfig { field, reason });
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", format!("must be a finite nonnegative number, got {}", self.beta));
        }
        if !self.a.is_finite() || !self.b.is_finite() {
            return bad("a", format!("a and b must be finite, got a={} b={}", self.a, self.b));
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if !(self.omega_floor >= 0.0 && self.omega_floor.is_finite()) {
            return bad("omega_floor", format!("must be a finite nonnegative number, got {}", self.omega_floor));
        }
        if self.max_iters == 0 {
            return bad("max_iters", "must be at least 1".into());
        }
        if !(self.tol >= 0.0) {
            return bad("tol", format!("must be nonnegative, got {}", self.tol));
        }
        Ok(())
    }
}

/// Which per-sample weight enters the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMode {
    /// Unit weight per sample.
    Uncalibrated,
    /// `beta * omega(1 - H) + H_cls`.
    Combined,
    /// `beta * omega(1 - H) + 1`.
    EntropyOnly,
    /// `H_cls`.
    ClusterOnly,
}

fn check_predictions(predictions: &[Vec<f64>]) -> Result<usize, CalibrationError> {
    let first = predictions.first().ok_or(CalibrationError::Empty)?;
    let classes = first.len();
    if classes == 0 {
        return Err(CalibrationError::LengthMismatch { what: "prediction", expected: 1, got: 0 });
    }
    for (index, p) in predictions.iter().enumerate() {
        if p.len() != classes {
            return Err(CalibrationError::LengthMismatch { what: "prediction", expected: classes, got: p.len() });
        }
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(CalibrationError::BadPrediction { index });
        }
    }
    Ok(classes)
}

fn weighted_sum(predictions: &[Vec<f64>], weights: Option<&[f64]>) -> Vec<f64> {
    let mut acc = vec![0.0; predictions[0].len()];
    for (i, p) in predictions.iter().enumerate() {
        match weights {
            None => acc.iter_mut().zip(p).for_each(|(a, v)| *a += v),
            Some(w) => acc.iter_mut().zip(p).for_each(|(a, v)| *a += v * w[i]),
        }
    }
    acc
}

/// Elementwise mean of the predictions.
pub fn raw_class_weight(predictions: &[Vec<f64>]) -> Result<Vec<f64>, CalibrationError> {
    check_predictions(predictions)?;
    let n = predictions.len() as f64;
    Ok(weighted_sum(predictions, None).into_iter().map(|v| v / n).collect())
}

/// Divides by the mean so the result averages to one.
pub fn normalize_gamma(raw: &[f64]) -> Result<Vec<f64>, CalibrationError> {
    if raw.is_empty() {
        return Err(CalibrationError::Empty);
    }
    if let Some(index) = raw.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(CalibrationError::BadPrediction { index });
    }
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean <= 0.0 {
        return Err(CalibrationError::AllZero);
    }
    Ok(raw.iter().map(|v| v / mean).collect())
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// `omega(1 - H)`, with `H` divided by `ln |Cs|` when normalization is on.
pub fn entropy_weight(p: &[f64], cfg: &CalibrationConfig) -> f64 {
    let h = entropy(p);
    let h = if cfg.entropy_normalized {
        if p.len() > 1 {
            h / (p.len() as f64).ln()
        } else {
            0.0
        }
    } else {
        h
    };
    (1.0 - h).max(cfg.omega_floor)
}

/// Piecewise-linear weight of squared centroid distance `tau` within a
/// cluster of mean `mu` and standard deviation `sigma`.
pub fn cluster_weight(tau: f64, mu: f64, sigma: f64, a: f64, b: f64) -> f64 {
    if sigma <= 0.0 {
        return (a + b) / 2.0;
    }
    let lo = mu - sigma;
    let hi = mu + sigma;
    if tau <= lo {
        a
    } else if tau >= hi {
        b
    } else {
        let w = (a + b) / 2.0 + (tau - mu) * (b - a) / (2.0 * sigma);
        w.clamp(a.min(b), a.max(b))
    }
}

/// Summary of the clustering behind one calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub k: usize,
    pub sizes: Vec<usize>,
    pub inertia: f64,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseed_events: usize,
}

impl From<&ClusterModel> for ClusterSummary {
    fn from(m: &ClusterModel) -> Self {
        Self {
            k: m.k(),
            sizes: m.cluster_sizes(),
            inertia: m.inertia,
            mu: m.per_cluster_mu.clone(),
            sigma: m.per_cluster_sigma.clone(),
            iterations: m.iterations,
            converged: m.converged,
            reseed_events: m.reseed_events.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationDiagnostics {
    pub mode: CalibrationMode,
    /// Weight multiplying each prediction in the aggregation.
    pub sample_weights: Vec<f64>,
    pub entropy_weights: Vec<f64>,
    /// Cluster-distance weight per sample; empty when no clustering ran.
    pub cluster_weights: Vec<f64>,
    pub cluster: Option<ClusterSummary>,
    /// False only when k-means hit its iteration cap.
    pub converged: bool,
}

fn l2_normalized(features: &[Vec<f64>]) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| {
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                f.iter().map(|v| v / norm).collect()
            } else {
                f.clone()
            }
        })
        .collect()
}

fn cluster_weights(
    features: &[Vec<f64>],
    cfg: &CalibrationConfig,
    seed: u64,
) -> Result<(Vec<f64>, ClusterModel), CalibrationError> {
    if cfg.k > features.len() {
        return Err(ClusterError::TooManyClusters { k: cfg.k, n: features.len() }.into());
    }
    let owned;
    let feats = if cfg.normalize_features {
        owned = l2_normalized(features);
        &owned
    } else {
        features
    };
    let model = clustering::kmeans_fit(feats, cfg.k, seed, cfg.max_iters, cfg.tol)?;
    let tau = clustering::assigned_distances(&model, feats);
    let weights = tau
        .iter()
        .zip(&model.assignments)
        .map(|(&t, &c)| cluster_weight(t, model.per_cluster_mu[c], model.per_cluster_sigma[c], cfg.a, cfg.b))
        .collect();
    Ok((weights, model))
}

/// Calibrated class weight. `features` are the fused target features
/// aligned with `predictions`; `seed` drives the k-means seeding.
///
/// The normalized weight is computed from the aggregate with sample weights
/// divided by their maximum. When every sample carries the same weight this
/// makes the result bit-identical to the uncalibrated one.
pub fn calibrated_class_weight(
    predictions: &[Vec<f64>],
    features: &[Vec<f64>],
    cfg: &CalibrationConfig,
    seed: u64,
    mode: CalibrationMode,
) -> Result<(ClassWeight, CalibrationDiagnostics), CalibrationError> {
    cfg.validate()?;
    check_predictions(predictions)?;
    let n = predictions.len();
    let entropy_weights: Vec<f64> = predictions.iter().map(|p| entropy_weight(p, cfg)).collect();

    let (cluster_w, cluster) = match mode {
        CalibrationMode::Combined | CalibrationMode::ClusterOnly => {
            if features.len() != n {
                return Err(CalibrationError::LengthMismatch { what: "features", expected: n, got: features.len() });
            }
            let (w, model) = cluster_weights(features, cfg, seed)?;
            (w, Some(model))
        }
        _ => (Vec::new(), None),
    };

    let sample_weights: Vec<f64> = match mode {
        CalibrationMode::Uncalibrated => vec![1.0; n],
        CalibrationMode::Combined => entropy_weights.iter().zip(&cluster_w).map(|(e, c)| cfg.beta * e + c).collect(),
        CalibrationMode::EntropyOnly => entropy_weights.iter().map(|e| cfg.beta * e + 1.0).collect(),
        CalibrationMode::ClusterOnly => entropy_weights.iter().zip(&cluster_w).map(|(e, c)| 0.0 * e + c).collect(),
    };
    if let Some(index) = sample_weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(CalibrationError::InvalidConfig {
            field: "a",
            reason: format!("sample {index} received weight {}; weights must be nonnegative", sample_weights[index]),
        });
    }
    let scale = sample_weights.iter().copied().fold(0.0, f64::max);
    if scale <= 0.0 {
        return Err(CalibrationError::AllZero);
    }
    let unit: Vec<f64> = sample_weights.iter().map(|w| w / scale).collect();
    let mean_form: Vec<f64> = weighted_sum(predictions, Some(&unit)).into_iter().map(|v| v / n as f64).collect();
    let normalized = normalize_gamma(&mean_form)?;
    let raw = mean_form.iter().map(|v| v * scale).collect();

    let diagnostics = CalibrationDiagnostics {
        mode,
        sample_weights,
        entropy_weights,
        cluster_weights: cluster_w,
        converged: cluster.as_ref().is_none_or(|m| m.converged),
        cluster: cluster.as_ref().map(ClusterSummary::from),
    };
    Ok((ClassWeight { raw, normalized, step: 0 }, diagnostics))
}

/// Writes one row per (snapshot, class): `step, class_index, raw_mass,
/// normalized_weight, is_target_class`.
pub fn write_gamma_csv<W: Write>(out: W, snapshots: &[ClassWeight], is_target: &[bool]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "class_index", "raw_mass", "normalized_weight", "is_target_class"])?;
    for snap in snapshots {
        for (c, (raw, norm)) in snap.raw.iter().zip(&snap.normalized).enumerate() {
            w.serialize((snap.step, c, raw, norm, is_target.get(c).copied().unwrap_or(false)))?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CalibrationConfig {
        CalibrationConfig::default()
    }

    #[test]
    fn raw_weight_examples() {
        assert_eq!(raw_class_weight(&[vec![0.7, 0.3], vec![0.5, 0.5]]).unwrap(), vec![0.6, 0.4]);
        assert_eq!(raw_class_weight(&[vec![0.2, 0.8]]).unwrap(), vec![0.2, 0.8]);
        let u = vec![0.25; 4];
        assert_eq!(raw_class_weight(&[u.clone(), u.clone(), u.clone()]).unwrap(), u);
        assert_eq!(raw_class_weight(&[]), Err(CalibrationError::Empty));
        assert!(matches!(
            raw_class_weight(&[vec![0.5, 0.5], vec![1.0]]),
            Err(CalibrationError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let g = normalize_gamma(&[0.6, 0.4]).unwrap();
        assert!((g[0] - 1.2).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert_eq!(normalize_gamma(&[0.1; 5]).unwrap(), vec![1.0; 5]);
        assert_eq!(normalize_gamma(&[2.0, 0.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(normalize_gamma(&[0.0, 0.0]), Err(CalibrationError::AllZero));
    }

    #[test]
    fn entropy_weight_examples() {
        assert!(entropy_weight(&[0.5, 0.5], &cfg()).abs() < 1e-12);
        assert_eq!(entropy_weight(&[0.0, 1.0, 0.0], &cfg()), 1.0);
        // H(0.9, 0.1) / ln 2 = 0.4689955935892812
        assert!((entropy_weight(&[0.9, 0.1], &cfg()) - 0.531_004_406_410_718_8).abs() < 1e-12);
        assert_eq!(entropy_weight(&[1.0], &cfg()), 1.0);
        let mut raw = cfg();
        raw.entropy_normalized = false;
        assert_eq!(entropy_weight(&[0.25; 4], &raw), 0.0);
        raw.omega_floor = 0.1;
        assert_eq!(entropy_weight(&[0.25; 4], &raw), 0.1);
    }

    #[test]
    fn cluster_weight_examples() {
        let (mu, sigma) = (4.0, 1.0);
        assert_eq!(cluster_weight(mu - sigma, mu, sigma, 5.0, 1.0), 5.0);
        assert_eq!(cluster_weight(mu, mu, sigma, 5.0, 1.0), 3.0);
        assert_eq!(cluster_weight(mu + sigma, mu, sigma, 5.0, 1.0), 1.0);
        assert_eq!(cluster_weight(mu + 2.0 * sigma, mu, sigma, 5.0, 1.0), 1.0);
        assert_eq!(cluster_weight(0.0, mu, sigma, 5.0, 1.0), 5.0);
        assert_eq!(cluster_weight(3.5, mu, sigma, 1.0, 5.0), 2.0);
        assert_eq!(cluster_weight(7.0, 7.0, 0.0, 5.0, 1.0), 3.0);
        assert_eq!(cluster_weight(0.0, 7.0, 0.0, 5.0, 1.0), 3.0);
    }

    fn two_blobs() -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let features = vec![
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![0.0, 0.1],
            vec![1.0, 1.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
            vec![10.0, 10.1],
            vec![11.0, 11.0],
        ];
        let predictions = vec![
            vec![0.8, 0.1, 0.1],
            vec![0.7, 0.2, 0.1],
            vec![0.6, 0.2, 0.2],
            vec![0.2, 0.2, 0.6],
            vec![0.1, 0.8, 0.1],
            vec![0.2, 0.7, 0.1],
            vec![0.1, 0.6, 0.3],
            vec![0.1, 0.1, 0.8],
        ];
        (features, predictions)
    }

    #[test]
    fn unit_weights_reduce_to_plain_mean() {
        let (f, p) = two_blobs();
        let plain = normalize_gamma(&raw_class_weight(&p).unwrap()).unwrap();
        for c in [1.0, 0.3, 2.0, 7.25] {
            let cfg = CalibrationConfig { beta: 0.0, a: c, b: c, k: 2, ..cfg() };
            let (w, d) = calibrated_class_weight(&p, &f, &cfg, 5, CalibrationMode::Combined).unwrap();
            assert_eq!(w.normalized, plain);
            assert!(d.sample_weights.iter().all(|&s| s == c));
        }
        let (w, _) = calibrated_class_weight(&p, &f, &cfg(), 5, CalibrationMode::Uncalibrated).unwrap();
        assert_eq!(w.normalized, plain);
        assert_eq!(w.raw, raw_class_weight(&p).unwrap());
    }

    #[test]
    fn one_hot_predictions() {
        let (f, _) = two_blobs();
        let p = vec![vec![1.0, 0.0, 0.0, 0.0]; f.len()];
        let cfg = CalibrationConfig { k: 2, ..cfg() };
        let (w, _) = calibrated_class_weight(&p, &f, &cfg, 1, CalibrationMode::Combined).unwrap();
        assert_eq!(w.normalized, vec![4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn mode_relations() {
        let (f, p) = two_blobs();
        let base = CalibrationConfig { k: 2, beta: 2.0, ..cfg() };
        let (entropy_only, _) = calibrated_class_weight(&p, &f, &base, 3, CalibrationMode::EntropyOnly).unwrap();
        let flat = CalibrationConfig { a: 1.0, b: 1.0, ..base.clone() };
        let (combined_flat, _) = calibrated_class_weight(&p, &f, &flat, 3, CalibrationMode::Combined).unwrap();
        for (x, y) in entropy_only.normalized.iter().zip(&combined_flat.normalized) {
            assert!((x - y).abs() < 1e-12);
        }
        let (cluster_only, _) = calibrated_class_weight(&p, &f, &base, 3, CalibrationMode::ClusterOnly).unwrap();
        let no_beta = CalibrationConfig { beta: 0.0, ..base };
        let (combined_nb, _) = calibrated_class_weight(&p, &f, &no_beta, 3, CalibrationMode::Combined).unwrap();
        assert_eq!(cluster_only, combined_nb);
    }

    #[test]
    fn errors() {
        let (f, p) = two_blobs();
        let big = CalibrationConfig { k: 9, ..cfg() };
        assert_eq!(
            calibrated_class_weight(&p, &f, &big, 0, CalibrationMode::Combined).unwrap_err(),
            CalibrationError::Cluster(ClusterError::TooManyClusters { k: 9, n: 8 })
        );
        assert!(matches!(
            calibrated_class_weight(&p, &f[..3], &cfg(), 0, CalibrationMode::Combined),
            Err(CalibrationError::LengthMismatch { what: "features", .. })
        ));
        assert_eq!(calibrated_class_weight(&[], &[], &cfg(), 0, CalibrationMode::Combined), Err(CalibrationError::Empty));
        let neg = CalibrationConfig { beta: -1.0, ..cfg() };
        assert!(matches!(neg.validate(), Err(CalibrationError::InvalidConfig { field: "beta", .. })));
    }

    #[test]
    fn single_row_single_cluster() {
        let p = vec![vec![0.1, 0.3, 0.6]];
        let f = vec![vec![1.0, 2.0]];
        let cfg = CalibrationConfig { k: 1, ..cfg() };
        let (w, d) = calibrated_class_weight(&p, &f, &cfg, 0, CalibrationMode::Combined).unwrap();
        let expect = normalize_gamma(&p[0]).unwrap();
        for (x, y) in w.normalized.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(d.converged);
    }

    #[test]
    fn csv_rows() {
        let snaps = vec![ClassWeight::uniform(2, 0), ClassWeight { raw: vec![0.75, 0.25], normalized: vec![1.5, 0.5], step: 4 }];
        let mut buf = Vec::new();
        write_gamma_csv(&mut buf, &snaps, &[true, false]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,class_index,raw_mass,normalized_weight,is_target_class");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[3], "4,0,0.75,1.5,true");
    }
}
