//! Frame-level terms: support cross entropy, prediction entropy and the
//! region-proportion KL divergence.

use serde::{Deserialize, Serialize};

use super::{chain_sigma, clamp_prob, FrameResponse, LossGrad};
use crate::classifier::{check_mask_matches, FrameClassifier, FrameFeatures, ProbabilityMap, SupportShot};
use crate::error::{Error, Result};
use crate::numerics::ln_sigmoid;

/// Cross entropy of `clf` on the labelled shots, averaged per shot over the
/// scored (non-ignored) pixels and then over shots.
pub fn support_ce(support: &[SupportShot], clf: &FrameClassifier) -> Result<LossGrad> {
    if support.is_empty() {
        return Err(Error::invalid("support set is empty"));
    }
    let k = support.len() as f64;
    let mut total = LossGrad::zero(clf.dim());
    for shot in support {
        shot.features.require_normalized()?;
        check_mask_matches(&shot.features, &shot.mask)?;
        let scored = shot.mask.count_scored();
        if scored == 0 {
            continue;
        }
        let resp = FrameResponse::evaluate(&shot.features, clf)?;
        let scale = 1.0 / (scored as f64 * k);
        let mut dsigma = vec![0.0; resp.sigma.len()];
        let mut value = 0.0;
        for (p, &s) in resp.sigma.iter().enumerate() {
            if shot.mask.is_ignored(p) {
                continue;
            }
            // Unclamped log-probabilities are taken from the logit.
            let x = resp.logit[p];
            if shot.mask.get(p) {
                let (c, live) = clamp_prob(s);
                value -= if live { ln_sigmoid(x) } else { c.ln() };
                if live {
                    dsigma[p] = -scale / c;
                }
            } else {
                let (c, live) = clamp_prob(1.0 - s);
                value -= if live { ln_sigmoid(-x) } else { c.ln() };
                if live {
                    dsigma[p] = scale / c;
                }
            }
        }
        total.value += value * scale;
        total.grad.add_assign(&chain_sigma(&shot.features, clf, &resp, &dsigma), 1.0);
    }
    Ok(total)
}

/// Mean binary entropy of a probability map, with its derivative with
/// respect to every probability.
pub fn entropy_loss(sigma: &ProbabilityMap) -> (f64, Vec<f64>) {
    let n = sigma.len() as f64;
    let mut value = 0.0;
    let dsigma = sigma
        .values()
        .iter()
        .map(|&s| {
            let (c, live) = clamp_prob(s);
            value -= c * c.ln() + (1.0 - c) * (1.0 - c).ln();
            if live {
                ((1.0 - c).ln() - c.ln()) / n
            } else {
                0.0
            }
        })
        .collect();
    (value / n, dsigma)
}

/// Label marginal `(background mass, foreground mass)` of one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMarginal {
    pub background: f64,
    pub foreground: f64,
}

impl LabelMarginal {
    pub fn new(background: f64, foreground: f64) -> Result<Self> {
        if background < 0.0 || foreground < 0.0 || ((background + foreground) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "label marginal ({background}, {foreground}) is not a distribution"
            )));
        }
        Ok(Self {
            background,
            foreground,
        })
    }

    pub fn from_foreground(foreground: f64) -> Self {
        Self {
            background: 1.0 - foreground,
            foreground,
        }
    }
}

pub fn label_marginal(sigma: &ProbabilityMap) -> LabelMarginal {
    LabelMarginal::from_foreground(sigma.mean())
}

/// KL divergence value and its derivative with respect to the foreground
/// mass (the background mass moving as `1 - foreground`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlValue {
    pub value: f64,
    pub d_foreground: f64,
}

/// `P . log(P / P_prior)`, with both distributions clamped away from 0 and 1
/// inside the logarithm.
pub fn kl_loss(p: LabelMarginal, prior: LabelMarginal) -> KlValue {
    let (pf, pf_live) = clamp_prob(p.foreground);
    let (pb, pb_live) = clamp_prob(p.background);
    let (qf, _) = clamp_prob(prior.foreground);
    let (qb, _) = clamp_prob(prior.background);
    let log_ratio_f = pf.ln() - qf.ln();
    let log_ratio_b = pb.ln() - qb.ln();
    let value = p.foreground * log_ratio_f + p.background * log_ratio_b;

    // d/dm of m * (ln clamp(m) - a) + (1 - m) * (ln clamp(1 - m) - c)
    let mut d = log_ratio_f - log_ratio_b;
    if pf_live {
        d += p.foreground / pf;
    }
    if pb_live {
        d -= p.background / pb;
    }
    KlValue {
        value,
        d_foreground: d,
    }
}

/// Entropy of `clf`'s predictions on one frame, chained to the parameters.
pub fn entropy_loss_params(
    resp: &FrameResponse,
    features: &FrameFeatures,
    clf: &FrameClassifier,
) -> LossGrad {
    let map = resp.probability_map();
    let (value, dsigma) = entropy_loss(&map);
    LossGrad {
        value,
        grad: chain_sigma(features, clf, resp, &dsigma),
    }
}

/// KL of `clf`'s label marginal on one frame against `prior`, chained to the
/// parameters.
pub fn kl_loss_params(
    resp: &FrameResponse,
    features: &FrameFeatures,
    clf: &FrameClassifier,
    prior: LabelMarginal,
) -> LossGrad {
    let map = resp.probability_map();
    let kl = kl_loss(label_marginal(&map), prior);
    let per_pixel = kl.d_foreground / map.len() as f64;
    let dsigma = vec![per_pixel; map.len()];
    LossGrad {
        value: kl.value,
        grad: chain_sigma(features, clf, resp, &dsigma),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::BinaryMask;
    use crate::losses::PROB_EPS;

    #[test]
    fn ce_floor_and_uniform() {
        // Two pixels: one parallel to the weights (foreground), one anti-parallel.
        let f = FrameFeatures::from_columns(1, 2, &[vec![1.0, 0.0], vec![-1.0, 0.0]])
            .unwrap()
            .normalized();
        let mask = BinaryMask::new(1, 2, vec![true, false]).unwrap();
        let shot = SupportShot { features: f.clone(), mask };
        let confident = FrameClassifier::new(vec![1.0, 0.0], 0.0, 1000.0).unwrap();
        assert!(support_ce(std::slice::from_ref(&shot), &confident).unwrap().value < 1e-6);

        // Zero-sentinel columns give cos 0, so sigma = sigmoid(0) = 0.5 everywhere.
        let zero = FrameFeatures::from_columns(1, 2, &[vec![0.0, 0.0], vec![0.0, 0.0]])
            .unwrap()
            .normalized();
        let shot = SupportShot { features: zero, mask: shot.mask };
        let clf = FrameClassifier::new(vec![1.0, 0.0], 0.0, 20.0).unwrap();
        let v = support_ce(&[shot], &clf).unwrap().value;
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn ce_all_ignored_is_zero() {
        let f = FrameFeatures::from_columns(1, 2, &[vec![1.0, 0.0], vec![0.0, 1.0]])
            .unwrap()
            .normalized();
        let mask = BinaryMask::new(1, 2, vec![false, false])
            .unwrap()
            .with_ignore(vec![true, true])
            .unwrap();
        let clf = FrameClassifier::new(vec![1.0, 0.0], 0.3, 20.0).unwrap();
        let lg = support_ce(&[SupportShot { features: f, mask }], &clf).unwrap();
        assert_eq!(lg.value, 0.0);
        assert!(lg.grad.weights.iter().all(|&g| g == 0.0));
        assert_eq!(lg.grad.bias, 0.0);
    }

    #[test]
    fn entropy_cases() {
        let (v, _) = entropy_loss(&ProbabilityMap::uniform(3, 3, 0.5).unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-9);
        let (v, _) = entropy_loss(&ProbabilityMap::uniform(3, 3, 1.0 - PROB_EPS).unwrap());
        assert!(v < 1e-5);

        let vals = vec![0.1, 0.7, 0.35, 0.92, 0.5, 0.05];
        let (v, _) = entropy_loss(&ProbabilityMap::new(2, 3, vals.clone()).unwrap());
        let mut acc = 0.0;
        for s in &vals {
            acc += -(s * f64::ln(*s) + (1.0 - s) * f64::ln(1.0 - s));
        }
        assert!((v - acc / 6.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_cases() {
        let m = label_marginal(&ProbabilityMap::uniform(2, 2, 0.25).unwrap());
        assert_eq!((m.background, m.foreground), (0.75, 0.25));
        let m = label_marginal(&ProbabilityMap::uniform(2, 2, 0.5).unwrap());
        assert_eq!((m.background, m.foreground), (0.5, 0.5));
    }

    #[test]
    fn kl_cases() {
        let p = LabelMarginal::new(0.3, 0.7).unwrap();
        assert_eq!(kl_loss(p, p).value, 0.0);

        let p = LabelMarginal::from_foreground(PROB_EPS);
        let q = LabelMarginal::new(0.5, 0.5).unwrap();
        assert!((kl_loss(p, q).value - std::f64::consts::LN_2).abs() < 1e-5);

        let p = LabelMarginal::new(0.62, 0.38).unwrap();
        let q = LabelMarginal::new(0.2, 0.8).unwrap();
        let direct = 0.62 * (0.62f64 / 0.2).ln() + 0.38 * (0.38f64 / 0.8).ln();
        let kl = kl_loss(p, q);
        assert!((kl.value - direct).abs() < 1e-12);
        let h = 1e-6;
        let up = kl_loss(LabelMarginal::from_foreground(0.38 + h), q).value;
        let down = kl_loss(LabelMarginal::from_foreground(0.38 - h), q).value;
        let fd = (up - down) / (2.0 * h);
        assert!((fd - kl.d_foreground).abs() / fd.abs() < 1e-6);
        assert!(LabelMarginal::new(0.5, 0.6).is_err());
    }
}
