//! Loss values with hand-derived gradients.
//!
//! Every frame-level term is first differentiated with respect to the
//! per-pixel foreground probabilities and then chained through the sigmoid
//! and the cosine to the classifier weights and bias ([`chain_sigma`]).

mod contrastive;
mod global;
mod terms;

use serde::{Deserialize, Serialize};

pub use contrastive::dense_contrastive_loss;
pub use global::{compute_signatures, global_loss, global_prototype, GlobalLoss, GlobalPrototype, Signatures};
pub(crate) use global::{global_terms, signatures_unchecked};
pub use terms::{
    entropy_loss, entropy_loss_params, kl_loss, kl_loss_params, label_marginal, support_ce, KlValue, LabelMarginal,
};

use crate::classifier::{pixel_cosines, ClassifierBank, FrameClassifier, FrameFeatures, ProbabilityMap, SupportShot};
use crate::error::{Error, Result};
use crate::numerics::{self, NORM_EPS};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

/// Clamped probability and whether the clamp was inactive (derivative 1).
pub(crate) fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_EPS {
        (PROB_EPS, false)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, false)
    } else {
        (p, true)
    }
}

/// Cosines and foreground probabilities of one classifier on one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResponse {
    pub cos: Vec<f64>,
    pub logit: Vec<f64>,
    pub sigma: Vec<f64>,
    height: usize,
    width: usize,
}

impl FrameResponse {
    pub fn evaluate(features: &FrameFeatures, clf: &FrameClassifier) -> Result<Self> {
        features.require_normalized()?;
        if features.channels() != clf.dim() {
            return Err(Error::invalid(format!(
                "classifier has {} weights but features have {} channels",
                clf.dim(),
                features.channels()
            )));
        }
        let cos = pixel_cosines(features, &clf.weights);
        let logit: Vec<f64> = cos.iter().map(|c| clf.temperature * (c - clf.bias)).collect();
        let sigma = logit.iter().map(|&x| numerics::sigmoid(x)).collect();
        Ok(Self {
            cos,
            logit,
            sigma,
            height: features.height(),
            width: features.width(),
        })
    }

    pub fn probability_map(&self) -> ProbabilityMap {
        ProbabilityMap::new(self.height, self.width, self.sigma.clone()).expect("response dims are valid")
    }
}

/// Gradient with respect to one classifier's weights and bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrad {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ParamGrad {
    pub fn zero(dim: usize) -> Self {
        Self {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += scale * b;
        }
        self.bias += scale * other.bias;
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// A scalar loss with its parameter gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: ParamGrad,
}

impl LossGrad {
    pub fn zero(dim: usize) -> Self {
        Self {
            value: 0.0,
            grad: ParamGrad::zero(dim),
        }
    }
}

/// Chains `dL/dsigma_p` to `(dL/dw, dL/db)` for `sigma_p = sigmoid(tau (cos_p - b))`.
pub fn chain_sigma(features: &FrameFeatures, clf: &FrameClassifier, resp: &FrameResponse, dsigma: &[f64]) -> ParamGrad {
    let tau = clf.temperature;
    let dlogit: Vec<f64> = dsigma
        .iter()
        .zip(&resp.sigma)
        .map(|(d, s)| d * tau * s * (1.0 - s))
        .collect();
    let bias = -dlogit.iter().sum::<f64>();
    let wn = numerics::norm(&clf.weights);
    if wn < NORM_EPS {
        return ParamGrad {
            weights: vec![0.0; clf.dim()],
            bias,
        };
    }
    // d cos_p / d w = (F_p - cos_p * w / |w|) / |w|
    let pooled = features.pool(&dlogit);
    let along: f64 = dlogit.iter().zip(&resp.cos).map(|(a, c)| a * c).sum();
    let weights = pooled
        .iter()
        .zip(&clf.weights)
        .map(|(u, w)| (u - along * w / wn) / wn)
        .collect();
    ParamGrad { weights, bias }
}

/// Loss weights `(entropy, kl, global)`; cross entropy always has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub entropy: f64,
    pub kl: f64,
    pub global: f64,
}

impl Lambdas {
    pub const ZERO: Lambdas = Lambdas {
        entropy: 0.0,
        kl: 0.0,
        global: 0.0,
    };
}

/// Reference prototype for the consistency term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GlobalTarget<'a> {
    /// Mean of the bank's current weights. With `through_prototype` the
    /// gradient also flows through the mean; otherwise it is a constant.
    FromBank { through_prototype: bool },
    /// A fixed vector, never differentiated.
    Fixed(&'a [f64]),
}

/// Everything besides the classifier parameters that the inference
/// objective depends on.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub query: &'a [FrameFeatures],
    pub support: &'a [SupportShot],
    /// One label-marginal prior per query frame.
    pub priors: &'a [LabelMarginal],
    pub target: GlobalTarget<'a>,
}

/// Values and gradients of the combined objective at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub entropy: f64,
    pub kl: f64,
    pub global: f64,
    pub total: f64,
    pub lambdas: Lambdas,
    /// Gradient of `total` for each classifier of the bank.
    pub grads: Vec<ParamGrad>,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.entropy, self.kl, self.global, self.total]
            .iter()
            .all(|v| v.is_finite())
            && self.grads.iter().all(ParamGrad::is_finite)
    }
}

/// `ce + l1 * entropy + l2 * kl + l3 * global`.
///
/// The bank holds either one classifier per query frame or a single
/// classifier shared by every frame. Cross entropy is the support loss of
/// each frame's classifier, entropy and KL are per-frame terms; all three
/// are averaged over frames. The consistency term is only evaluated when
/// its weight is non-zero (and is reported as 0 otherwise).
pub fn combined_loss(obj: &Objective<'_>, bank: &ClassifierBank, lambdas: Lambdas) -> Result<LossBreakdown> {
    let nv = obj.query.len();
    if nv == 0 {
        return Err(Error::invalid("objective has no query frames"));
    }
    if obj.priors.len() != nv {
        return Err(Error::invalid(format!("{} priors for {nv} query frames", obj.priors.len())));
    }
    let shared = match bank.len() {
        n if n == nv => false,
        1 => true,
        n => {
            return Err(Error::invalid(format!(
                "bank of {n} classifiers cannot serve {nv} query frames"
            )))
        }
    };
    let index = |t: usize| if shared { 0 } else { t };
    let frames_per_classifier = if shared { nv as f64 } else { 1.0 };
    let inv_nv = 1.0 / nv as f64;

    let mut grads = vec![ParamGrad::zero(bank.dim()); bank.len()];
    let mut ce = 0.0;
    for (j, clf) in bank.frames.iter().enumerate() {
        let w = frames_per_classifier * inv_nv;
        let lg = support_ce(obj.support, clf)?;
        ce += w * lg.value;
        grads[j].add_assign(&lg.grad, w);
    }

    let responses = obj
        .query
        .iter()
        .enumerate()
        .map(|(t, f)| FrameResponse::evaluate(f, &bank.frames[index(t)]))
        .collect::<Result<Vec<_>>>()?;

    let (mut entropy, mut kl) = (0.0, 0.0);
    for (t, (features, resp)) in obj.query.iter().zip(&responses).enumerate() {
        let clf = &bank.frames[index(t)];
        let h = entropy_loss_params(resp, features, clf);
        entropy += inv_nv * h.value;
        grads[index(t)].add_assign(&h.grad, lambdas.entropy * inv_nv);
        let d = kl_loss_params(resp, features, clf, obj.priors[t]);
        kl += inv_nv * d.value;
        grads[index(t)].add_assign(&d.grad, lambdas.kl * inv_nv);
    }

    let mut global = 0.0;
    if lambdas.global != 0.0 {
        let (omega, through) = match obj.target {
            GlobalTarget::FromBank { through_prototype } => (global_prototype(bank).omega, through_prototype),
            GlobalTarget::Fixed(o) => (o.to_vec(), false),
        };
        if omega.len() != bank.dim() {
            return Err(Error::invalid("prototype dimension does not match the classifiers"));
        }
        let sigmas: Vec<&[f64]> = responses.iter().map(|r| r.sigma.as_slice()).collect();
        let terms = global_terms(&omega, obj.query, &sigmas);
        global = terms.value;
        for (t, (features, resp)) in obj.query.iter().zip(&responses).enumerate() {
            let g = chain_sigma(features, &bank.frames[index(t)], resp, &terms.dsigma[t]);
            grads[index(t)].add_assign(&g, lambdas.global);
        }
        if through {
            let share = lambdas.global / bank.len() as f64;
            for g in &mut grads {
                for (a, d) in g.weights.iter_mut().zip(&terms.domega) {
                    *a += share * d;
                }
            }
        }
    }

    Ok(LossBreakdown {
        ce,
        entropy,
        kl,
        global,
        total: ce + lambdas.entropy * entropy + lambdas.kl * kl + lambdas.global * global,
        lambdas,
        grads,
    })
}
