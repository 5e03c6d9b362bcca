//! Video-level consistency: foreground/background signatures of each query
//! frame pulled towards (respectively pushed away from) the mean classifier
//! weights of the sequence.

use serde::{Deserialize, Serialize};

use super::{FrameResponse, ParamGrad};
use crate::classifier::{ClassifierBank, FrameFeatures, ProbabilityMap};
use crate::error::{Error, Result};
use crate::numerics::{self, NORM_EPS};

/// Soft masked average pools of one frame's features under its current
/// foreground and background probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signatures {
    pub foreground: Vec<f64>,
    pub background: Vec<f64>,
    pub foreground_mass: f64,
    pub background_mass: f64,
    pub frame: usize,
    pub iteration: usize,
}

impl Signatures {
    pub fn foreground_is_sentinel(&self) -> bool {
        self.foreground_mass < NORM_EPS
    }

    pub fn background_is_sentinel(&self) -> bool {
        self.background_mass < NORM_EPS
    }
}

/// Mean of the per-frame weight vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototype {
    pub omega: Vec<f64>,
    pub iteration: usize,
}

pub fn compute_signatures(features: &FrameFeatures, sigma: &ProbabilityMap) -> Result<Signatures> {
    features.require_normalized()?;
    if sigma.height() != features.height() || sigma.width() != features.width() {
        return Err(Error::invalid("probability map does not match feature map"));
    }
    Ok(signatures_unchecked(features, sigma.values(), 0, 0))
}

pub(crate) fn signatures_unchecked(features: &FrameFeatures, sigma: &[f64], frame: usize, iteration: usize) -> Signatures {
    let bg_weights: Vec<f64> = sigma.iter().map(|s| 1.0 - s).collect();
    let fg_mass: f64 = sigma.iter().sum();
    let bg_mass: f64 = bg_weights.iter().sum();
    let pool = |weights: &[f64], mass: f64| {
        if mass < NORM_EPS {
            vec![0.0; features.channels()]
        } else {
            features.pool(weights).into_iter().map(|v| v / mass).collect()
        }
    };
    Signatures {
        foreground: pool(sigma, fg_mass),
        background: pool(&bg_weights, bg_mass),
        foreground_mass: fg_mass,
        background_mass: bg_mass,
        frame,
        iteration,
    }
}

pub fn global_prototype(bank: &ClassifierBank) -> GlobalPrototype {
    let mut omega = vec![0.0; bank.dim()];
    for f in &bank.frames {
        for (o, w) in omega.iter_mut().zip(&f.weights) {
            *o += w;
        }
    }
    let n = bank.len() as f64;
    omega.iter_mut().for_each(|o| *o /= n);
    GlobalPrototype {
        omega,
        iteration: bank.iteration,
    }
}

/// Value of the consistency loss with derivatives with respect to every
/// frame's probabilities and to the prototype itself.
pub(crate) struct GlobalTerms {
    pub value: f64,
    pub dsigma: Vec<Vec<f64>>,
    pub domega: Vec<f64>,
}

/// `d cos(a, z) / d z` for non-degenerate `a`, `z`.
fn cosine_grad(a_hat: &[f64], z: &[f64], cos: f64) -> Vec<f64> {
    let zn = numerics::norm(z);
    a_hat.iter().zip(z).map(|(a, zi)| (a - cos * zi / zn) / zn).collect()
}

pub(crate) fn global_terms(omega: &[f64], frames: &[FrameFeatures], sigmas: &[&[f64]]) -> GlobalTerms {
    let n = frames.len() as f64;
    let omega_norm = numerics::norm(omega);
    let omega_live = omega_norm >= NORM_EPS;
    let omega_hat: Vec<f64> = if omega_live {
        omega.iter().map(|o| o / omega_norm).collect()
    } else {
        vec![0.0; omega.len()]
    };
    let mut value = 0.0;
    let mut domega = vec![0.0; omega.len()];
    let mut dsigma = Vec::with_capacity(frames.len());

    for (features, sigma) in frames.iter().zip(sigmas) {
        let sig = signatures_unchecked(features, sigma, 0, 0);
        let mut ds = vec![0.0; sigma.len()];

        let fg_live = omega_live && !sig.foreground_is_sentinel() && numerics::norm(&sig.foreground) >= NORM_EPS;
        if fg_live {
            let cf = numerics::cosine_unchecked(omega, &sig.foreground);
            value += 1.0 - cf;
            // d(1 - cos)/dz_fg, then dz_fg/dsigma_p = (F_p - z_fg) / mass_fg
            let gz: Vec<f64> = cosine_grad(&omega_hat, &sig.foreground, cf).iter().map(|g| -g).collect();
            let offset = numerics::dot(&gz, &sig.foreground);
            for (d, proj) in ds.iter_mut().zip(features.project(&gz)) {
                *d += (proj - offset) / sig.foreground_mass;
            }
            let zf_hat = unit(&sig.foreground);
            for ((d, z), o) in domega.iter_mut().zip(&zf_hat).zip(&omega_hat) {
                *d -= (z - cf * o) / omega_norm;
            }
        } else {
            value += 1.0;
        }

        let bg_live = omega_live && !sig.background_is_sentinel() && numerics::norm(&sig.background) >= NORM_EPS;
        if bg_live {
            let cb = numerics::cosine_unchecked(omega, &sig.background);
            if cb > 0.0 {
                value += cb;
                // dz_bg/dsigma_p = -(F_p - z_bg) / mass_bg
                let gz = cosine_grad(&omega_hat, &sig.background, cb);
                let offset = numerics::dot(&gz, &sig.background);
                for (d, proj) in ds.iter_mut().zip(features.project(&gz)) {
                    *d -= (proj - offset) / sig.background_mass;
                }
                let zb_hat = unit(&sig.background);
                for ((d, z), o) in domega.iter_mut().zip(&zb_hat).zip(&omega_hat) {
                    *d += (z - cb * o) / omega_norm;
                }
            }
        }

        ds.iter_mut().for_each(|d| *d /= n);
        dsigma.push(ds);
    }
    domega.iter_mut().for_each(|d| *d /= n);
    GlobalTerms {
        value: value / n,
        dsigma,
        domega,
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = numerics::norm(v);
    v.iter().map(|x| x / n).collect()
}

/// Global consistency loss result.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalLoss {
    pub value: f64,
    /// Gradient for each frame's classifier, treating the prototype as a
    /// constant target.
    pub per_frame: Vec<ParamGrad>,
    /// Gradient with respect to the prototype.
    pub omega: Vec<f64>,
}

/// Consistency loss of the current bank against `prototype`, with gradients
/// flowing through each frame's probabilities (the prototype is held fixed).
///
/// `signatures` must come from the bank's current predictions; they are
/// checked against a recomputation.
pub fn global_loss(
    prototype: &GlobalPrototype,
    signatures: &[Signatures],
    frames: &[FrameFeatures],
    bank: &ClassifierBank,
) -> Result<GlobalLoss> {
    if frames.is_empty() || frames.len() != bank.len() || signatures.len() != frames.len() {
        return Err(Error::invalid(format!(
            "global loss needs one classifier and one signature per frame ({} frames, {} classifiers, {} signatures)",
            frames.len(),
            bank.len(),
            signatures.len()
        )));
    }
    let responses = frames
        .iter()
        .zip(&bank.frames)
        .map(|(f, clf)| FrameResponse::evaluate(f, clf))
        .collect::<Result<Vec<_>>>()?;
    for ((resp, f), sig) in responses.iter().zip(frames).zip(signatures) {
        let fresh = signatures_unchecked(f, &resp.sigma, sig.frame, sig.iteration);
        let stale = fresh
            .foreground
            .iter()
            .chain(&fresh.background)
            .zip(sig.foreground.iter().chain(&sig.background))
            .any(|(a, b)| (a - b).abs() > 1e-9);
        if stale {
            return Err(Error::invalid(format!(
                "signatures for frame {} do not match the bank's current predictions",
                sig.frame
            )));
        }
    }
    let sigmas: Vec<&[f64]> = responses.iter().map(|r| r.sigma.as_slice()).collect();
    let terms = global_terms(&prototype.omega, frames, &sigmas);
    let per_frame = frames
        .iter()
        .zip(&bank.frames)
        .zip(&responses)
        .zip(&terms.dsigma)
        .map(|(((f, clf), resp), ds)| super::chain_sigma(f, clf, resp, ds))
        .collect();
    Ok(GlobalLoss {
        value: terms.value,
        per_frame,
        omega: terms.domega,
    })
}
