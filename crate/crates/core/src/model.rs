//! Multi-modal adversarial network.
//!
//! Per sample:
//!
//! 1. every frame `v[j][m]` goes through the modality extractor `G_f[m]`;
//! 2. for each modality and each scale `r` in `2..=N`, up to
//!    `max_clips_per_scale` temporally ordered `r`-frame clips are
//!    concatenated and passed through the relation MLP `g_r`; all clip
//!    outputs, scales and modalities are summed into the fused feature;
//! 3. the classifier `G_y` maps the fused feature to class logits;
//! 4. the discriminator `G_d[m]` sees the frame-mean of modality `m`'s
//!    extracted features through a gradient reversal layer.
//!
//! [`man_loss`] evaluates the class-weighted adversarial objective and its
//! gradients in one pass.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, FeatureClip};
use crate::nn::{self, grl_backward, prefixed, softmax, softmax_cross_entropy, Mlp, MlpTape, NnError, Parameters, TensorView};
use crate::rng::{self, streams};

/// Domain labels used by the discriminators.
pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("temporal relation fusion needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("class weight has {got} entries, expected {expected}")]
    GammaLength { expected: usize, got: usize },
    #[error("class weight entry {index} is negative or non-finite: {value}")]
    NegativeGamma { index: usize, value: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Nn(#[from] NnError),
}

fn default_max_clips() -> usize {
    5
}

/// Layer widths and fusion options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Output width of each modality extractor.
    pub feature_dim: usize,
    #[serde(default)]
    pub extractor_hidden: Vec<usize>,
    #[serde(default)]
    pub relation_hidden: Vec<usize>,
    /// Output width of every relation MLP, i.e. the fused feature width.
    pub fused_dim: usize,
    #[serde(default)]
    pub classifier_hidden: Vec<usize>,
    #[serde(default)]
    pub discriminator_hidden: Vec<usize>,
    /// Cap on clips per scale: `L = min(C(N, r), max_clips_per_scale)`.
    #[serde(default = "default_max_clips")]
    pub max_clips_per_scale: usize,
    /// One relation MLP per (modality, scale) instead of one per scale.
    #[serde(default)]
    pub per_modality_relations: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            extractor_hidden: vec![32],
            relation_hidden: vec![32],
            fused_dim: 32,
            classifier_hidden: vec![],
            discriminator_hidden: vec![16],
            max_clips_per_scale: 5,
            per_modality_relations: false,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.feature_dim == 0 {
            return Err(("feature_dim", "must be at least 1".into()));
        }
        if self.fused_dim == 0 {
            return Err(("fused_dim", "must be at least 1".into()));
        }
        if self.max_clips_per_scale == 0 {
            return Err(("max_clips_per_scale", "must be at least 1".into()));
        }
        for (field, widths) in [
            ("extractor_hidden", &self.extractor_hidden),
            ("relation_hidden", &self.relation_hidden),
            ("classifier_hidden", &self.classifier_hidden),
            ("discriminator_hidden", &self.discriminator_hidden),
        ] {
            if widths.contains(&0) {
                return Err((field, "hidden widths must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// Input geometry the network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub frames: usize,
    pub modalities: usize,
    pub input_dim: usize,
    pub num_classes: usize,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManParams {
    pub shape: ModelShape,
    pub max_clips_per_scale: usize,
    pub per_modality_relations: bool,
    /// Extractor `G_f[m]` per modality.
    pub extractors: Vec<Mlp>,
    /// Relation MLP `g_r`; index `r - 2`, or `m * (N - 1) + r - 2` when
    /// relations are per modality.
    pub relations: Vec<Mlp>,
    pub classifier: Mlp,
    /// Discriminator `G_d[m]` per modality, two-way output.
    pub discriminators: Vec<Mlp>,
    /// Adversarial trade-off.
    pub alpha: f64,
}

impl ManParams {
    pub fn new(arch: &ArchConfig, shape: ModelShape, alpha: f64, seed: u64) -> Result<Self, ModelError> {
        arch.validate().map_err(|(f, r)| ModelError::ShapeMismatch(format!("{f}: {r}")))?;
        if shape.frames < 2 {
            return Err(ModelError::TooFewFrames(shape.frames));
        }
        if shape.modalities == 0 || shape.input_dim == 0 || shape.num_classes == 0 {
            return Err(ModelError::ShapeMismatch(format!("degenerate model shape {shape:?}")));
        }
        let mut r = rng::stream(seed, streams::INIT);
        let extractors = (0..shape.modalities)
            .map(|_| Mlp::glorot(&widths(shape.input_dim, &arch.extractor_hidden, arch.feature_dim), &mut r))
            .collect();
        let relation_sets = if arch.per_modality_relations { shape.modalities } else { 1 };
        let relations = (0..relation_sets)
            .flat_map(|_| 2..=shape.frames)
            .map(|scale| {
                Mlp::glorot(&widths(scale * arch.feature_dim, &arch.relation_hidden, arch.fused_dim), &mut r)
            })
            .collect();
        let classifier = Mlp::glorot(&widths(arch.fused_dim, &arch.classifier_hidden, shape.num_classes), &mut r);
        let discriminators = (0..shape.modalities)
            .map(|_| Mlp::glorot(&widths(arch.feature_dim, &arch.discriminator_hidden, 2), &mut r))
            .collect();
        Ok(Self {
            shape,
            max_clips_per_scale: arch.max_clips_per_scale,
            per_modality_relations: arch.per_modality_relations,
            extractors,
            relations,
            classifier,
            discriminators,
            alpha,
        })
    }

    /// Same architecture, all parameters zero. Used as a gradient container.
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            max_clips_per_scale: self.max_clips_per_scale,
            per_modality_relations: self.per_modality_relations,
            extractors: self.extractors.iter().map(Mlp::zeros_like).collect(),
            relations: self.relations.iter().map(Mlp::zeros_like).collect(),
            classifier: self.classifier.zeros_like(),
            discriminators: self.discriminators.iter().map(Mlp::zeros_like).collect(),
            alpha: self.alpha,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.extractors[0].out_dim()
    }

    pub fn fused_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    /// Flat index of the first discriminator parameter. Discriminators are
    /// stored last, so `offset..num_parameters()` covers all of them.
    pub fn discriminator_offset(&self) -> usize {
        self.num_parameters() - self.discriminators.iter().map(|d| d.num_parameters()).sum::<usize>()
    }

    fn relation(&self, modality: usize, scale: usize) -> usize {
        let per_set = self.shape.frames - 1;
        let set = if self.per_modality_relations { modality } else { 0 };
        set * per_set + scale - 2
    }

    fn check_clip(&self, clip: &FeatureClip) -> Result<(), ModelError> {
        let expected = (self.shape.frames, self.shape.modalities, self.shape.input_dim);
        if clip.shape() != expected {
            return Err(ModelError::ShapeMismatch(format!(
                "clip shape {:?} does not match model {expected:?}",
                clip.shape()
            )));
        }
        Ok(())
    }
}

impl Parameters for ManParams {
    fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = Vec::new();
        for (m, e) in self.extractors.iter().enumerate() {
            out.extend(prefixed(&format!("extractor.{m}"), e.tensors()));
        }
        for (i, g) in self.relations.iter().enumerate() {
            out.extend(prefixed(&format!("relation.{i}"), g.tensors()));
        }
        out.extend(prefixed("classifier", self.classifier.tensors()));
        for (m, d) in self.discriminators.iter().enumerate() {
            out.extend(prefixed(&format!("discriminator.{m}"), d.tensors()));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for e in &mut self.extractors {
            out.extend(e.tensors_mut());
        }
        for g in &mut self.relations {
            out.extend(g.tensors_mut());
        }
        out.extend(self.classifier.tensors_mut());
        for d in &mut self.discriminators {
            out.extend(d.tensors_mut());
        }
        out
    }
}

/// Number of `r`-subsets of `n`, saturating.
pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Frame index sets for every scale, shared by all modalities.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipPlan {
    pub frames: usize,
    /// `scales[r - 2]` lists the clips of scale `r`, each a sorted list of
    /// distinct frame indices.
    pub scales: Vec<Vec<Vec<usize>>>,
}

impl ClipPlan {
    pub fn draw(frames: usize, max_clips: usize, rng: &mut impl Rng) -> Result<Self, ModelError> {
        if frames < 2 {
            return Err(ModelError::TooFewFrames(frames));
        }
        let scales = (2..=frames)
            .map(|r| {
                let total = binomial(frames, r);
                let count = (max_clips as u128).min(total) as usize;
                if total <= max_clips as u128 {
                    all_combinations(frames, r)
                } else {
                    let mut clips: Vec<Vec<usize>> = Vec::with_capacity(count);
                    while clips.len() < count {
                        let mut clip = index::sample(rng, frames, r).into_vec();
                        clip.sort_unstable();
                        if !clips.contains(&clip) {
                            clips.push(clip);
                        }
                    }
                    clips
                }
            })
            .collect();
        Ok(Self { frames, scales })
    }

    pub fn from_seed(frames: usize, max_clips: usize, seed: u64) -> Result<Self, ModelError> {
        Self::draw(frames, max_clips, &mut rng::stream(seed, streams::CLIPS))
    }

    pub fn clips(&self, scale: usize) -> &[Vec<usize>] {
        &self.scales[scale - 2]
    }
}

fn all_combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..r).collect();
    loop {
        out.push(idx.clone());
        let mut i = r;
        while i > 0 && idx[i - 1] == n - r + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for k in i..r {
            idx[k] = idx[k - 1] + 1;
        }
    }
}

/// Per-frame, per-modality extracted features, indexed `[frame][modality]`.
pub type FrameGrid = Vec<Vec<Vec<f64>>>;

fn frame_input(clip: &FeatureClip, j: usize, m: usize) -> Vec<f64> {
    clip.frame(j, m).iter().map(|&v| v as f64).collect()
}

pub fn extract_frame_features(params: &ManParams, clip: &FeatureClip) -> Result<FrameGrid, ModelError> {
    params.check_clip(clip)?;
    (0..clip.frames())
        .map(|j| {
            (0..clip.modalities())
                .map(|m| Ok(params.extractors[m].forward(&frame_input(clip, j, m))?))
                .collect()
        })
        .collect()
}

fn concat_clip(grid: &FrameGrid, clip: &[usize], m: usize) -> Vec<f64> {
    clip.iter().flat_map(|&j| grid[j][m].iter().copied()).collect()
}

/// Fused multi-scale multi-modal feature under a given clip plan.
pub fn trn_fuse_with_plan(params: &ManParams, grid: &FrameGrid, plan: &ClipPlan) -> Result<Vec<f64>, ModelError> {
    let frames = grid.len();
    if frames < 2 {
        return Err(ModelError::TooFewFrames(frames));
    }
    if plan.frames != frames || frames != params.shape.frames {
        return Err(ModelError::ShapeMismatch(format!(
            "grid has {frames} frames, plan {}, model {}",
            plan.frames, params.shape.frames
        )));
    }
    let mut fused = vec![0.0; params.fused_dim()];
    for m in 0..grid[0].len() {
        for r in 2..=frames {
            let g = &params.relations[params.relation(m, r)];
            for clip in plan.clips(r) {
                let out = g.forward(&concat_clip(grid, clip, m))?;
                fused.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(fused)
}

/// Fused feature with a clip plan drawn from `seed`.
pub fn trn_fuse(params: &ManParams, grid: &FrameGrid, seed: u64) -> Result<Vec<f64>, ModelError> {
    let plan = ClipPlan::from_seed(grid.len(), params.max_clips_per_scale, seed)?;
    trn_fuse_with_plan(params, grid, &plan)
}

pub fn classify(params: &ManParams, fused: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(params.classifier.forward(fused)?)
}

pub fn discriminate(params: &ManParams, modality: usize, pooled: &[f64]) -> Result<Vec<f64>, ModelError> {
    let d = params
        .discriminators
        .get(modality)
        .ok_or_else(|| ModelError::ShapeMismatch(format!("no discriminator for modality {modality}")))?;
    Ok(d.forward(pooled)?)
}

/// Frame-mean of each modality's extracted features.
pub fn pool_modalities(grid: &FrameGrid) -> Vec<Vec<f64>> {
    let frames = grid.len() as f64;
    (0..grid[0].len())
        .map(|m| {
            let mut acc = vec![0.0; grid[0][m].len()];
            for row in grid {
                acc.iter_mut().zip(&row[m]).for_each(|(a, b)| *a += b);
            }
            acc.iter_mut().for_each(|a| *a /= frames);
            acc
        })
        .collect()
}

/// Forward-only outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub fused: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn forward(params: &ManParams, clip: &FeatureClip, plan: &ClipPlan) -> Result<SampleOutput, ModelError> {
    let grid = extract_frame_features(params, clip)?;
    let fused = trn_fuse_with_plan(params, &grid, plan)?;
    let logits = classify(params, &fused)?;
    let probs = softmax(&logits);
    Ok(SampleOutput { fused, logits, probs })
}

/// Forward pass over a whole dataset. Samples are processed in parallel and
/// returned in dataset order.
pub fn forward_dataset(params: &ManParams, data: &Dataset, plan: &ClipPlan) -> Result<Vec<SampleOutput>, ModelError> {
    data.samples.par_iter().map(|clip| forward(params, clip, plan)).collect()
}

/// Objective value, its parts, and gradients from [`man_loss`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    /// Value of the weighted adversarial objective (the quantity the feature
    /// extractor and classifier descend and the discriminators ascend).
    pub objective: f64,
    /// `(1/n_s) sum gamma[y_i] L_y`.
    pub classification: f64,
    /// `(1/n_s) sum gamma[y_i] sum_m L_d` over source samples.
    pub domain_source: f64,
    /// `(1/n_t) sum sum_m L_d` over target samples.
    pub domain_target: f64,
    /// Gradients. Extractor, relation and classifier entries are
    /// `d objective / d theta`. Discriminator entries are the gradient of
    /// the discriminators' own loss `alpha * (domain_source + domain_target)`,
    /// i.e. `-d objective / d theta_d`, so one descent step on every
    /// parameter plays the min-max game.
    pub grads: ManParams,
    /// Smallest distance of any hidden ReLU pre-activation to zero.
    pub min_relu_margin: f64,
}

struct SampleTape {
    extractor: Vec<Vec<MlpTape>>,
    relation: Vec<MlpTape>,
    pooled: Vec<Vec<f64>>,
    fused: Vec<f64>,
}

fn forward_taped(params: &ManParams, clip: &FeatureClip, plan: &ClipPlan, with_relations: bool) -> Result<SampleTape, ModelError> {
    params.check_clip(clip)?;
    let (frames, modalities) = (params.shape.frames, params.shape.modalities);
    let mut grid: FrameGrid = Vec::with_capacity(frames);
    let mut extractor = Vec::with_capacity(frames);
    for j in 0..frames {
        let mut row = Vec::with_capacity(modalities);
        let mut tapes = Vec::with_capacity(modalities);
        for m in 0..modalities {
            let (f, t) = params.extractors[m].forward_taped(&frame_input(clip, j, m))?;
            row.push(f);
            tapes.push(t);
        }
        grid.push(row);
        extractor.push(tapes);
    }
    let mut relation = Vec::new();
    let mut fused = vec![0.0; params.fused_dim()];
    if with_relations {
        for m in 0..modalities {
            for r in 2..=frames {
                let g = &params.relations[params.relation(m, r)];
                for clip_idx in plan.clips(r) {
                    let (out, t) = g.forward_taped(&concat_clip(&grid, clip_idx, m))?;
                    fused.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
                    relation.push(t);
                }
            }
        }
    }
    let pooled = pool_modalities(&grid);
    Ok(SampleTape { extractor, relation, pooled, fused })
}

struct Accumulator<'a> {
    params: &'a ManParams,
    plan: &'a ClipPlan,
    grads: ManParams,
    margin: f64,
}

impl Accumulator<'_> {
    fn note(&mut self, tape: &MlpTape) {
        self.margin = self.margin.min(tape.relu_margin());
    }

    /// Discriminator terms for one sample. `weight` multiplies the
    /// per-modality domain loss in the discriminators' descent objective.
    /// Returns the summed domain loss and per-modality feature gradients
    /// after reversal.
    fn domain_terms(&mut self, pooled: &[Vec<f64>], domain: usize, weight: f64) -> Result<(f64, Vec<Vec<f64>>), ModelError> {
        let mut total = 0.0;
        let mut dpooled = Vec::with_capacity(pooled.len());
        for (m, p) in pooled.iter().enumerate() {
            let (logits, tape) = self.params.discriminators[m].forward_taped(p)?;
            self.note(&tape);
            let (loss, dlogits, _) = softmax_cross_entropy(&logits, domain)?;
            total += loss;
            let upstream: Vec<f64> = dlogits.iter().map(|g| weight * g).collect();
            let dp = self.params.discriminators[m].backward(tape, &upstream, &mut self.grads.discriminators[m])?;
            dpooled.push(grl_backward(&dp, 1.0));
        }
        Ok((total, dpooled))
    }

    /// Backpropagates fused-feature and pooled-feature gradients down to the
    /// extractors.
    fn backprop_features(&mut self, tape: SampleTape, dfused: Option<&[f64]>, dpooled: &[Vec<f64>]) -> Result<(), ModelError> {
        let (frames, modalities) = (self.params.shape.frames, self.params.shape.modalities);
        let fdim = self.params.feature_dim();
        let mut dgrid: FrameGrid = vec![vec![vec![0.0; fdim]; modalities]; frames];
        if let Some(dfused) = dfused {
            let mut tapes = tape.relation.into_iter();
            for m in 0..modalities {
                for r in 2..=frames {
                    let gi = self.params.relation(m, r);
                    for clip_idx in self.plan.clips(r) {
                        let t = tapes.next().expect("one tape per relation clip");
                        self.note(&t);
                        let dconcat = self.params.relations[gi].backward(t, dfused, &mut self.grads.relations[gi])?;
                        for (slot, &j) in clip_idx.iter().enumerate() {
                            dgrid[j][m]
                                .iter_mut()
                                .zip(&dconcat[slot * fdim..(slot + 1) * fdim])
                                .for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
        }
        for (m, dp) in dpooled.iter().enumerate() {
            for row in dgrid.iter_mut() {
                row[m].iter_mut().zip(dp).for_each(|(a, b)| *a += b / frames as f64);
            }
        }
        for (j, tapes) in tape.extractor.into_iter().enumerate() {
            for (m, t) in tapes.into_iter().enumerate() {
                self.note(&t);
                self.params.extractors[m].backward(t, &dgrid[j][m], &mut self.grads.extractors[m])?;
            }
        }
        Ok(())
    }
}

/// Class-weighted adversarial objective over one source and one target
/// batch:
///
/// `(1/n_s) sum_i gamma[y_i] (L_y - alpha sum_m L_d) - (alpha/n_t) sum_i sum_m L_d`
///
/// `gamma` is indexed by class. See [`LossOutput::grads`] for the sign
/// convention of the returned gradients.
pub fn man_loss(
    params: &ManParams,
    source: &[&FeatureClip],
    labels: &[usize],
    target: &[&FeatureClip],
    gamma: &[f64],
    plan: &ClipPlan,
) -> Result<LossOutput, ModelError> {
    let classes = params.shape.num_classes;
    if gamma.len() != classes {
        return Err(ModelError::GammaLength { expected: classes, got: gamma.len() });
    }
    if let Some((index, &value)) = gamma.iter().enumerate().find(|(_, g)| !(g.is_finite() && **g >= 0.0)) {
        return Err(ModelError::NegativeGamma { index, value });
    }
    if source.is_empty() || target.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    if source.len() != labels.len() {
        return Err(ModelError::ShapeMismatch(format!("{} source clips, {} labels", source.len(), labels.len())));
    }
    let alpha = params.alpha;
    let n_s = source.len() as f64;
    let n_t = target.len() as f64;
    let mut acc = Accumulator { params, plan, grads: params.zeros_like(), margin: f64::INFINITY };
    let (mut classification, mut domain_source, mut domain_target) = (0.0, 0.0, 0.0);

    for (clip, &label) in source.iter().zip(labels) {
        if label >= classes {
            return Err(NnError::LabelOutOfRange { label, classes }.into());
        }
        let w = gamma[label] / n_s;
        let tape = forward_taped(params, clip, plan, true)?;
        let (logits, ctape) = params.classifier.forward_taped(&tape.fused)?;
        acc.note(&ctape);
        let (loss_y, dlogits, _) = softmax_cross_entropy(&logits, label)?;
        classification += w * loss_y;
        let upstream: Vec<f64> = dlogits.iter().map(|g| w * g).collect();
        let dfused = params.classifier.backward(ctape, &upstream, &mut acc.grads.classifier)?;
        let (loss_d, dpooled) = acc.domain_terms(&tape.pooled, SOURCE_DOMAIN, alpha * w)?;
        domain_source += w * loss_d;
        acc.backprop_features(tape, Some(&dfused), &dpooled)?;
    }

    for clip in target {
        let w = 1.0 / n_t;
        let tape = forward_taped(params, clip, plan, false)?;
        let (loss_d, dpooled) = acc.domain_terms(&tape.pooled, TARGET_DOMAIN, alpha * w)?;
        domain_target += w * loss_d;
        acc.backprop_features(tape, None, &dpooled)?;
    }

    Ok(LossOutput {
        objective: classification - alpha * domain_source - alpha * domain_target,
        classification,
        domain_source,
        domain_target,
        grads: acc.grads,
        min_relu_margin: acc.margin,
    })
}

/// Forward-only single-modality objective
/// `(1/n_s) sum gamma (L_y - alpha L_d) - (alpha/n_t) sum L_d`, evaluated
/// with explicit softmax probabilities. Requires a one-modality model.
pub fn single_modality_objective(
    params: &ManParams,
    source: &[&FeatureClip],
    labels: &[usize],
    target: &[&FeatureClip],
    gamma: &[f64],
    plan: &ClipPlan,
) -> Result<f64, ModelError> {
    if params.shape.modalities != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "single-modality objective needs 1 modality, model has {}",
            params.shape.modalities
        )));
    }
    let alpha = params.alpha;
    let mut source_term = 0.0;
    for (clip, &y) in source.iter().zip(labels) {
        let grid = extract_frame_features(params, clip)?;
        let feature = trn_fuse_with_plan(params, &grid, plan)?;
        let pooled = &pool_modalities(&grid)[0];
        let l_y = nn::cross_entropy(&softmax(&classify(params, &feature)?), y)?;
        let l_d = nn::cross_entropy(&softmax(&discriminate(params, 0, pooled)?), SOURCE_DOMAIN)?;
        source_term += gamma[y] * (l_y - alpha * l_d);
    }
    let mut target_term = 0.0;
    for clip in target {
        let grid = extract_frame_features(params, clip)?;
        let pooled = &pool_modalities(&grid)[0];
        target_term += nn::cross_entropy(&softmax(&discriminate(params, 0, pooled)?), TARGET_DOMAIN)?;
    }
    Ok(source_term / source.len() as f64 - alpha / target.len() as f64 * target_term)
}

/// A complete loss evaluation point: parameters, one source and one target
/// batch, class weight and clip plan.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub params: ManParams,
    pub source: Vec<FeatureClip>,
    pub labels: Vec<usize>,
    pub target: Vec<FeatureClip>,
    pub gamma: Vec<f64>,
    pub plan: ClipPlan,
}

impl LossInstance {
    /// Random instance with standard-normal inputs, a random positive class
    /// weight and a random trade-off in `[0.5, 1.5]`.
    pub fn random(arch: &ArchConfig, shape: ModelShape, batch: usize, seed: u64) -> Result<Self, ModelError> {
        use rand_distr::StandardNormal;
        let mut r = rng::stream(seed, 0x6C055);
        let alpha = r.random_range(0.5..1.5);
        let params = ManParams::new(arch, shape, alpha, seed)?;
        let len = shape.frames * shape.modalities * shape.input_dim;
        let clip = |r: &mut rand_chacha::ChaCha8Rng| {
            let values = (0..len).map(|_| r.sample::<f64, _>(StandardNormal) as f32).collect();
            FeatureClip::new(shape.frames, shape.modalities, shape.input_dim, values)
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))
        };
        let source = (0..batch).map(|_| clip(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let target = (0..batch).map(|_| clip(&mut r)).collect::<Result<Vec<_>, _>>()?;
        let labels = (0..batch).map(|_| r.random_range(0..shape.num_classes)).collect();
        let gamma = (0..shape.num_classes).map(|_| r.random_range(0.2..2.0)).collect();
        let plan = ClipPlan::draw(shape.frames, arch.max_clips_per_scale, &mut r)?;
        Ok(Self { params, source, labels, target, gamma, plan })
    }

    pub fn loss(&self, params: &ManParams) -> Result<LossOutput, ModelError> {
        let source: Vec<&FeatureClip> = self.source.iter().collect();
        let target: Vec<&FeatureClip> = self.target.iter().collect();
        man_loss(params, &source, &self.labels, &target, &self.gamma, &self.plan)
    }

    /// Central-difference check of every parameter gradient against the
    /// objective. Discriminator gradients are compared with the negated
    /// numeric derivative. Returns the report and the smallest ReLU margin.
    pub fn gradient_check(&self, tolerance: f64) -> Result<(nn::GradCheckReport, f64), ModelError> {
        let out = self.loss(&self.params)?;
        let mut analytic = out.grads.flatten();
        let offset = self.params.discriminator_offset();
        analytic[offset..].iter_mut().for_each(|g| *g = -*g);
        let x = self.params.flatten();
        let f = |flat: &[f64]| {
            let mut p = self.params.clone();
            p.assign_flat(flat).expect("same parameter count");
            self.loss(&p).map(|o| o.objective).unwrap_or(f64::NAN)
        };
        Ok((nn::grad_check(f, &x, &analytic, tolerance), out.min_relu_margin))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Dense;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            feature_dim: 3,
            extractor_hidden: vec![4],
            relation_hidden: vec![4],
            fused_dim: 4,
            classifier_hidden: vec![],
            discriminator_hidden: vec![3],
            max_clips_per_scale: 5,
            per_modality_relations: false,
        }
    }

    fn clip(frames: usize, modalities: usize, dim: usize, seed: u64) -> FeatureClip {
        let mut r = rng::stream(seed, 99);
        let values = (0..frames * modalities * dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
        FeatureClip::new(frames, modalities, dim, values).unwrap()
    }

    #[test]
    fn binomial_values() {
        assert_eq!(binomial(4, 2), 6);
        assert_eq!(binomial(5, 0), 1);
        assert_eq!(binomial(3, 4), 0);
        assert_eq!(binomial(10, 3), 120);
    }

    #[test]
    fn clip_counts_follow_cap() {
        let plan = ClipPlan::from_seed(4, 5, 1).unwrap();
        assert_eq!(plan.clips(2).len(), 5);
        assert_eq!(plan.clips(3).len(), 4);
        assert_eq!(plan.clips(4).len(), 1);
        for r in 2..=4 {
            for c in plan.clips(r) {
                assert_eq!(c.len(), r);
                assert!(c.windows(2).all(|w| w[0] < w[1]));
            }
            let mut uniq = plan.clips(r).to_vec();
            uniq.dedup();
            assert_eq!(uniq.len(), plan.clips(r).len());
        }
        let two = ClipPlan::from_seed(2, 5, 9).unwrap();
        assert_eq!(two.scales, vec![vec![vec![0, 1]]]);
        assert_eq!(ClipPlan::from_seed(6, 5, 3).unwrap(), ClipPlan::from_seed(6, 5, 3).unwrap());
        assert!(matches!(ClipPlan::from_seed(1, 5, 3), Err(ModelError::TooFewFrames(1))));
    }

    #[test]
    fn identity_extractor_returns_frames() {
        let shape = ModelShape { frames: 3, modalities: 2, input_dim: 2, num_classes: 3 };
        let mut arch = tiny_arch();
        arch.extractor_hidden.clear();
        arch.feature_dim = 2;
        let mut params = ManParams::new(&arch, shape, 1.0, 0).unwrap();
        for e in &mut params.extractors {
            e.layers = vec![Dense::identity(2)];
        }
        let c = clip(3, 2, 2, 4);
        let grid = extract_frame_features(&params, &c).unwrap();
        for j in 0..3 {
            for m in 0..2 {
                let expect: Vec<f64> = c.frame(j, m).iter().map(|&v| v as f64).collect();
                assert_eq!(grid[j][m], expect);
            }
        }
        assert_eq!(grid, extract_frame_features(&params, &c).unwrap());
    }

    #[test]
    fn extractor_rejects_wrong_shape() {
        let shape = ModelShape { frames: 2, modalities: 1, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 0).unwrap();
        assert!(matches!(extract_frame_features(&params, &clip(2, 1, 4, 0)), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn two_frame_fusion_is_single_relation() {
        let shape = ModelShape { frames: 2, modalities: 1, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 5).unwrap();
        let c = clip(2, 1, 3, 1);
        let grid = extract_frame_features(&params, &c).unwrap();
        let fused = trn_fuse(&params, &grid, 77).unwrap();
        let concat: Vec<f64> = grid[0][0].iter().chain(&grid[1][0]).copied().collect();
        assert_eq!(fused, params.relations[0].forward(&concat).unwrap());
    }

    #[test]
    fn zero_relations_give_zero_feature() {
        let shape = ModelShape { frames: 4, modalities: 2, input_dim: 3, num_classes: 3 };
        let mut params = ManParams::new(&tiny_arch(), shape, 1.0, 5).unwrap();
        for g in &mut params.relations {
            g.fill_zero();
        }
        let grid = extract_frame_features(&params, &clip(4, 2, 3, 2)).unwrap();
        assert!(trn_fuse(&params, &grid, 1).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fusion_is_additive_over_modalities() {
        let shape = ModelShape { frames: 3, modalities: 2, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 8).unwrap();
        let plan = ClipPlan::from_seed(3, 5, 4).unwrap();
        let grid = extract_frame_features(&params, &clip(3, 2, 3, 3)).unwrap();
        let both = trn_fuse_with_plan(&params, &grid, &plan).unwrap();
        let only = |keep: usize| {
            let g: FrameGrid = grid.iter().map(|row| vec![row[keep].clone()]).collect();
            trn_fuse_with_plan(&params, &g, &plan).unwrap()
        };
        let first = only(0);
        let second = only(1);
        for i in 0..both.len() {
            assert!((both[i] - first[i] - second[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let shape = ModelShape { frames: 2, modalities: 1, input_dim: 3, num_classes: 4 };
        let mut params = ManParams::new(&tiny_arch(), shape, 1.0, 0).unwrap();
        params.classifier.fill_zero();
        let out = forward(&params, &clip(2, 1, 3, 0), &ClipPlan::from_seed(2, 5, 0).unwrap()).unwrap();
        assert_eq!(out.probs, vec![0.25; 4]);
        assert!(out.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn symmetric_discriminator_gives_equal_logits() {
        let shape = ModelShape { frames: 2, modalities: 2, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 0).unwrap();
        let pooled = vec![0.3, -0.2, 0.9];
        let a = discriminate(&params, 1, &pooled).unwrap();
        let b = discriminate(&params, 1, &pooled.clone()).unwrap();
        assert_eq!(a, b);
        assert!(discriminate(&params, 2, &pooled).is_err());
    }

    #[test]
    fn gamma_validation() {
        let shape = ModelShape { frames: 2, modalities: 1, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 0).unwrap();
        let plan = ClipPlan::from_seed(2, 5, 0).unwrap();
        let c = clip(2, 1, 3, 0);
        let err = man_loss(&params, &[&c], &[0], &[&c], &[1.0, 1.0], &plan).unwrap_err();
        assert!(matches!(err, ModelError::GammaLength { expected: 3, got: 2 }));
        let err = man_loss(&params, &[&c], &[0], &[&c], &[1.0, -0.5, 1.0], &plan).unwrap_err();
        assert!(matches!(err, ModelError::NegativeGamma { index: 1, .. }));
        assert!(matches!(man_loss(&params, &[], &[], &[&c], &[1.0; 3], &plan), Err(ModelError::EmptyBatch)));
    }

    #[test]
    fn without_adversary_loss_is_mean_cross_entropy() {
        let shape = ModelShape { frames: 3, modalities: 1, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 0.0, 2).unwrap();
        let plan = ClipPlan::from_seed(3, 5, 2).unwrap();
        let clips: Vec<FeatureClip> = (0..4).map(|i| clip(3, 1, 3, i)).collect();
        let refs: Vec<&FeatureClip> = clips.iter().collect();
        let labels = [0, 1, 2, 1];
        let out = man_loss(&params, &refs, &labels, &refs[..2], &[1.0; 3], &plan).unwrap();
        let mean_ce = clips
            .iter()
            .zip(&labels)
            .map(|(c, &y)| nn::cross_entropy(&forward(&params, c, &plan).unwrap().probs, y).unwrap())
            .sum::<f64>()
            / 4.0;
        assert!((out.objective - mean_ce).abs() < 1e-12);
        assert!(out.grads.discriminators.iter().all(|d| d.flatten().iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn zero_weight_sample_contributes_nothing() {
        let shape = ModelShape { frames: 2, modalities: 2, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 3).unwrap();
        let plan = ClipPlan::from_seed(2, 5, 0).unwrap();
        let a = clip(2, 2, 3, 1);
        let b = clip(2, 2, 3, 2);
        let t = clip(2, 2, 3, 3);
        let gamma = [1.0, 0.0, 2.0];
        let with = man_loss(&params, &[&a, &b], &[0, 1], &[&t], &gamma, &plan).unwrap();
        let without = man_loss(&params, &[&a], &[0], &[&t], &gamma, &plan).unwrap();
        // n_s differs, so compare per-sample contributions scaled back.
        let g_with: Vec<f64> = with.grads.classifier.flatten();
        let g_without: Vec<f64> = without.grads.classifier.flatten();
        for (x, y) in g_with.iter().zip(&g_without) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn doubling_weight_doubles_classifier_gradient() {
        let shape = ModelShape { frames: 2, modalities: 1, input_dim: 3, num_classes: 3 };
        let params = ManParams::new(&tiny_arch(), shape, 1.0, 4).unwrap();
        let plan = ClipPlan::from_seed(2, 5, 0).unwrap();
        let a = clip(2, 1, 3, 1);
        let t = clip(2, 1, 3, 3);
        let one = man_loss(&params, &[&a], &[2], &[&t], &[1.0, 1.0, 1.0], &plan).unwrap();
        let two = man_loss(&params, &[&a], &[2], &[&t], &[1.0, 1.0, 2.0], &plan).unwrap();
        for (x, y) in one.grads.classifier.flatten().iter().zip(&two.grads.classifier.flatten()) {
            assert!((2.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn per_modality_relations_have_own_parameters() {
        let shape = ModelShape { frames: 3, modalities: 2, input_dim: 3, num_classes: 3 };
        let mut arch = tiny_arch();
        arch.per_modality_relations = true;
        let params = ManParams::new(&arch, shape, 1.0, 0).unwrap();
        assert_eq!(params.relations.len(), 4);
        assert_eq!(params.relation(1, 3), 3);
    }
}
