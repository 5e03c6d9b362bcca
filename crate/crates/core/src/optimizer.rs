//! Two-stage transductive inference over a query sequence.
//!
//! Stage one fits one classifier per query frame by gradient descent on the
//! support cross entropy plus entropy, region-proportion KL and (after the
//! prior update) video-level consistency. Stage two picks the frame whose
//! foreground best matches the mean classifier, turns its prediction into
//! pseudo-labels and refines the classifiers on it.

use serde::{Deserialize, Serialize};

use crate::classifier::{
    binarize, imprint_weights, initial_bias, predict, BiasInit, BinaryMask, ClassifierBank, FrameClassifier,
    FrameFeatures, ProbabilityMap, SupportShot, DEFAULT_TEMPERATURE,
};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, global_prototype, label_marginal, signatures_unchecked, support_ce, GlobalTarget, Lambdas,
    LabelMarginal, LossBreakdown, Objective, ParamGrad, Signatures,
};
use crate::numerics::{self, distance_transform};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Per-frame classifiers with the consistency term and keyframe refinement.
    #[default]
    Tti,
    /// Per-frame classifiers, no consistency term, no keyframe refinement.
    Baseline,
    /// One classifier shared by every frame, no consistency term, no
    /// keyframe refinement.
    Naive,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tti" => Ok(Mode::Tti),
            "baseline" => Ok(Mode::Baseline),
            "naive" => Ok(Mode::Naive),
            other => Err(Error::invalid(format!("unknown mode {other:?} (tti, baseline, naive)"))),
        }
    }
}

/// Which classifiers stage two refines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTwoScope {
    /// Every frame's classifier is trained on the keyframe pseudo-labels.
    #[default]
    AllFrames,
    /// Only the keyframe's classifier is trained; the result replaces every
    /// frame's classifier.
    KeyframeBroadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TtiConfig {
    /// Stage-one iterations `L`.
    pub iterations: usize,
    /// Iteration `L_phi` at which the priors are refreshed and the
    /// consistency term switches on.
    pub prior_update: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub contrastive_temperature: f64,
    /// Stage-two iterations `L_k`.
    pub keyframe_iterations: usize,
    /// Negative pseudo-labels lie farther than this fraction of the image
    /// diagonal from every positive.
    pub negative_distance: f64,
    /// Keyframe pixels at or above this probability become positives.
    pub positive_threshold: f64,
    pub mode: Mode,
    pub stage_two: StageTwoScope,
    /// Differentiate the consistency term through the mean classifier too.
    pub omega_gradient: bool,
    pub bias_init: BiasInit,
    pub threshold: f64,
}

impl Default for TtiConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            prior_update: 10,
            learning_rate: 0.025,
            temperature: DEFAULT_TEMPERATURE,
            contrastive_temperature: 0.1,
            keyframe_iterations: 20,
            negative_distance: 0.25,
            positive_threshold: 0.8,
            mode: Mode::Tti,
            stage_two: StageTwoScope::AllFrames,
            omega_gradient: false,
            bias_init: BiasInit::ProbabilityMean,
            threshold: 0.5,
        }
    }
}

impl TtiConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_update > 0 && self.prior_update < self.iterations) {
            return Err(Error::invalid(format!(
                "need 0 < prior_update < iterations, got prior_update = {} and iterations = {}",
                self.prior_update, self.iterations
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.contrastive_temperature > 0.0 && self.contrastive_temperature.is_finite()) {
            return Err(Error::invalid("contrastive_temperature must be positive"));
        }
        if !(self.negative_distance > 0.0 && self.negative_distance < 1.0) {
            return Err(Error::invalid(format!(
                "negative_distance must lie in (0, 1), got {}",
                self.negative_distance
            )));
        }
        if !(self.positive_threshold >= 0.5 && self.positive_threshold < 1.0) {
            return Err(Error::invalid(format!(
                "positive_threshold must lie in [0.5, 1), got {}",
                self.positive_threshold
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1), got {}", self.threshold)));
        }
        Ok(())
    }
}

/// `(entropy, kl, global)` weights at iteration `l` (1-based) for `shots`
/// support images.
pub fn lambda_schedule(iteration: usize, shots: usize, prior_update: usize) -> Lambdas {
    let base = 1.0 / shots as f64;
    if iteration < prior_update {
        Lambdas {
            entropy: base,
            kl: base,
            global: 0.0,
        }
    } else {
        Lambdas {
            entropy: base,
            kl: base + 1.0,
            global: base,
        }
    }
}

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub stage: u8,
    pub iteration: usize,
    pub lambdas: Lambdas,
    pub ce: f64,
    pub entropy: f64,
    pub kl: f64,
    pub global: f64,
    pub total: f64,
    /// Mean classifier weights entering this iteration.
    pub omega: Vec<f64>,
}

impl IterationRecord {
    fn from_breakdown(stage: u8, iteration: usize, b: &LossBreakdown, omega: Vec<f64>) -> Self {
        Self {
            stage,
            iteration,
            lambdas: b.lambdas,
            ce: b.ce,
            entropy: b.entropy,
            kl: b.kl,
            global: b.global,
            total: b.total,
            omega,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub records: Vec<IterationRecord>,
    /// Priors in force after the refresh at `L_phi`.
    pub priors: Vec<LabelMarginal>,
    pub bank: ClassifierBank,
    pub keyframe: Option<usize>,
    /// Why stage two did not run, when it was expected to.
    pub stage_two_skipped: Option<String>,
    /// Per-frame probabilities at the end of stage one.
    pub stage_one_maps: Vec<ProbabilityMap>,
    /// Per-frame probabilities after refinement (equal to the stage-one maps
    /// when stage two did not run).
    pub final_maps: Vec<ProbabilityMap>,
}

/// Output of [`tti_stage1`].
#[derive(Debug, Clone, PartialEq)]
pub struct StageOne {
    pub bank: ClassifierBank,
    pub records: Vec<IterationRecord>,
    pub priors: Vec<LabelMarginal>,
}

fn frame_classifier(bank: &ClassifierBank, t: usize) -> &FrameClassifier {
    if bank.len() == 1 {
        &bank.frames[0]
    } else {
        &bank.frames[t]
    }
}

fn marginals(query: &[FrameFeatures], bank: &ClassifierBank) -> Result<Vec<LabelMarginal>> {
    query
        .iter()
        .enumerate()
        .map(|(t, f)| Ok(label_marginal(&predict(f, frame_classifier(bank, t))?)))
        .collect()
}

/// Probability maps of every query frame under the bank.
pub fn predict_frames(query: &[FrameFeatures], bank: &ClassifierBank) -> Result<Vec<ProbabilityMap>> {
    query
        .iter()
        .enumerate()
        .map(|(t, f)| predict(f, frame_classifier(bank, t)))
        .collect()
}

/// Imprinted weights shared by every frame with a per-frame initial bias;
/// a single classifier with the mean bias in naive mode.
pub fn initial_bank(query: &[FrameFeatures], support: &[SupportShot], cfg: &TtiConfig) -> Result<ClassifierBank> {
    let w0 = imprint_weights(support)?;
    let biases = query
        .iter()
        .map(|f| initial_bias(f, &w0, cfg.temperature, cfg.bias_init))
        .collect::<Result<Vec<_>>>()?;
    let frames = if cfg.mode == Mode::Naive {
        let b = biases.iter().sum::<f64>() / biases.len() as f64;
        vec![FrameClassifier::new(w0, b, cfg.temperature)?]
    } else {
        biases
            .into_iter()
            .map(|b| FrameClassifier::new(w0.clone(), b, cfg.temperature))
            .collect::<Result<Vec<_>>>()?
    };
    ClassifierBank::new(frames)
}

fn apply_step(bank: &mut ClassifierBank, grads: &[ParamGrad], rates: &[f64]) {
    for ((clf, g), rate) in bank.frames.iter_mut().zip(grads).zip(rates) {
        for (w, d) in clf.weights.iter_mut().zip(&g.weights) {
            *w -= rate * d;
        }
        clf.bias -= rate * g.bias;
    }
}

fn check_finite(stage: u8, iteration: usize, b: &LossBreakdown) -> Result<()> {
    if b.is_finite() {
        return Ok(());
    }
    Err(Error::NonFiniteLoss {
        stage,
        iteration,
        detail: format!(
            "ce {} entropy {} kl {} global {} total {}",
            b.ce, b.entropy, b.kl, b.global, b.total
        ),
    })
}

/// Stage one: `L` gradient-descent steps on the combined objective.
///
/// `query` and `support` must be normalized. Each classifier steps along
/// the gradient of the mean objective of the frames it serves, so with
/// per-frame classifiers and no consistency term every frame evolves exactly
/// as it would in a one-frame video.
pub fn tti_stage1(query: &[FrameFeatures], support: &[SupportShot], cfg: &TtiConfig) -> Result<StageOne> {
    cfg.validate()?;
    if query.is_empty() {
        return Err(Error::invalid("no query frames"));
    }
    let mut bank = initial_bank(query, support, cfg)?;
    let mut priors = marginals(query, &bank)?;
    let nv = query.len() as f64;
    let rates: Vec<f64> = if bank.len() == 1 {
        vec![cfg.learning_rate]
    } else {
        vec![cfg.learning_rate * nv; bank.len()]
    };
    let target = GlobalTarget::FromBank {
        through_prototype: cfg.omega_gradient,
    };
    let mut records = Vec::with_capacity(cfg.iterations);
    for l in 1..=cfg.iterations {
        if l == cfg.prior_update {
            priors = marginals(query, &bank)?;
        }
        let mut lambdas = lambda_schedule(l, support.len(), cfg.prior_update);
        if cfg.mode != Mode::Tti {
            lambdas.global = 0.0;
        }
        let obj = Objective {
            query,
            support,
            priors: &priors,
            target,
        };
        let omega = global_prototype(&bank).omega;
        let b = combined_loss(&obj, &bank, lambdas)?;
        check_finite(1, l, &b)?;
        apply_step(&mut bank, &b.grads, &rates);
        bank.iteration = l;
        records.push(IterationRecord::from_breakdown(1, l, &b, omega));
    }
    Ok(StageOne { bank, records, priors })
}

/// Index of the largest value, first on ties; `None` entries are skipped.
fn first_argmax(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// The frame whose foreground signature is most aligned with the mean
/// classifier weights; smallest index on ties.
pub fn select_keyframe(bank: &ClassifierBank, signatures: &[Signatures]) -> Result<usize> {
    let omega = global_prototype(bank).omega;
    let scores: Vec<Option<f64>> = signatures
        .iter()
        .map(|s| (!s.foreground_is_sentinel()).then(|| numerics::cosine_unchecked(&s.foreground, &omega)))
        .collect();
    first_argmax(&scores).ok_or(Error::NoKeyframe)
}

/// Positives where `sigma >= positive_threshold`; negatives farther than
/// `negative_distance * diagonal` from every positive; the rest ignored.
pub fn build_pseudo_labels(sigma: &ProbabilityMap, negative_distance: f64, positive_threshold: f64) -> Result<BinaryMask> {
    let (h, w) = (sigma.height(), sigma.width());
    let positive: Vec<bool> = sigma.values().iter().map(|&s| s >= positive_threshold).collect();
    let dist = distance_transform(&positive, h, w)?;
    let limit = negative_distance * ((h * h + w * w) as f64).sqrt();
    let ignore: Vec<bool> = positive
        .iter()
        .zip(dist.data())
        .map(|(&p, &d)| !p && d <= limit)
        .collect();
    BinaryMask::new(h, w, positive)?.with_ignore(ignore)
}

/// Stage two: `L_k` cross-entropy steps of the classifiers on the keyframe
/// features and pseudo-labels.
pub fn tti_stage2(
    bank: &ClassifierBank,
    keyframe_features: &FrameFeatures,
    keyframe: usize,
    pseudo: &BinaryMask,
    cfg: &TtiConfig,
) -> Result<(ClassifierBank, Vec<IterationRecord>)> {
    if keyframe >= bank.len() {
        return Err(Error::invalid(format!("keyframe {keyframe} outside a bank of {}", bank.len())));
    }
    let shot = [SupportShot {
        features: keyframe_features.clone(),
        mask: pseudo.clone(),
    }];
    let mut bank = bank.clone();
    let trained: Vec<usize> = match cfg.stage_two {
        StageTwoScope::AllFrames => (0..bank.len()).collect(),
        StageTwoScope::KeyframeBroadcast => vec![keyframe],
    };
    let mut records = Vec::with_capacity(cfg.keyframe_iterations);
    for k in 1..=cfg.keyframe_iterations {
        let omega = global_prototype(&bank).omega;
        let mut ce = 0.0;
        for &j in &trained {
            let lg = support_ce(&shot, &bank.frames[j])?;
            if !lg.value.is_finite() || !lg.grad.is_finite() {
                return Err(Error::NonFiniteLoss {
                    stage: 2,
                    iteration: k,
                    detail: format!("keyframe cross entropy {} for classifier {j}", lg.value),
                });
            }
            ce += lg.value / trained.len() as f64;
            let clf = &mut bank.frames[j];
            for (w, d) in clf.weights.iter_mut().zip(&lg.grad.weights) {
                *w -= cfg.learning_rate * d;
            }
            clf.bias -= cfg.learning_rate * lg.grad.bias;
        }
        records.push(IterationRecord {
            stage: 2,
            iteration: k,
            lambdas: Lambdas::ZERO,
            ce,
            entropy: 0.0,
            kl: 0.0,
            global: 0.0,
            total: ce,
            omega,
        });
    }
    if cfg.stage_two == StageTwoScope::KeyframeBroadcast {
        let refined = bank.frames[keyframe].clone();
        bank.frames.iter_mut().for_each(|f| *f = refined.clone());
    }
    Ok((bank, records))
}

/// Predictions and trace of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub masks: Vec<BinaryMask>,
    pub trace: OptimizationTrace,
}

/// Normalizes the features, runs stage one and, in TTI mode, the keyframe
/// refinement, then binarizes the final probabilities.
///
/// A missing keyframe or an empty set of positive pseudo-labels skips stage
/// two; the reason is kept in the trace.
pub fn run_episode(episode: &Episode, cfg: &TtiConfig) -> Result<EpisodeResult> {
    cfg.validate()?;
    episode.validate()?;
    let query: Vec<FrameFeatures> = episode.query.iter().map(FrameFeatures::normalized).collect();
    let support: Vec<SupportShot> = episode
        .support
        .iter()
        .map(|s| SupportShot {
            features: s.features.normalized(),
            mask: s.mask.clone(),
        })
        .collect();

    let stage_one = tti_stage1(&query, &support, cfg)?;
    let stage_one_maps = predict_frames(&query, &stage_one.bank)?;
    let mut records = stage_one.records;
    let mut bank = stage_one.bank;
    let mut keyframe = None;
    let mut stage_two_skipped = None;

    if cfg.mode == Mode::Tti {
        let signatures: Vec<Signatures> = query
            .iter()
            .zip(&stage_one_maps)
            .enumerate()
            .map(|(t, (f, m))| signatures_unchecked(f, m.values(), t, bank.iteration))
            .collect();
        match select_keyframe(&bank, &signatures) {
            Ok(key) => {
                keyframe = Some(key);
                match build_pseudo_labels(&stage_one_maps[key], cfg.negative_distance, cfg.positive_threshold) {
                    Ok(pseudo) => {
                        let (refined, stage_two) = tti_stage2(&bank, &query[key], key, &pseudo, cfg)?;
                        bank = refined;
                        records.extend(stage_two);
                    }
                    Err(Error::EmptyForeground) => {
                        stage_two_skipped = Some("no keyframe pixel reaches the positive threshold".to_string());
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::NoKeyframe) => {
                stage_two_skipped = Some("every foreground signature is degenerate".to_string());
            }
            Err(e) => return Err(e),
        }
    }

    let final_maps = predict_frames(&query, &bank)?;
    let masks = final_maps.iter().map(|m| binarize(m, cfg.threshold)).collect();
    Ok(EpisodeResult {
        masks,
        trace: OptimizationTrace {
            records,
            priors: stage_one.priors,
            bank,
            keyframe,
            stage_two_skipped,
            stage_one_maps,
            final_maps,
        },
    })
}
