//! Finite-difference verification of every analytic loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::classifier::{
    imprint_weights, pixel_cosines, BinaryMask, ClassifierBank, FrameClassifier, FrameFeatures, SupportShot,
    DEFAULT_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::losses::{
    combined_loss, dense_contrastive_loss, entropy_loss_params, global_loss, global_prototype, kl_loss_params,
    signatures_unchecked, support_ce, FrameResponse, GlobalTarget, Lambdas, LabelMarginal, Objective, ParamGrad,
};
use crate::numerics::{finite_difference_gradient, Tensor, DEFAULT_FD_STEP};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Coordinates where both the analytic and the numeric derivative are
/// below this magnitude are not compared.
pub const NEGLIGIBLE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub instances: usize,
    pub channels: usize,
    pub size: usize,
    pub frames: usize,
    pub shots: usize,
    /// Flips the sign of the analytic cross-entropy bias derivative, to
    /// confirm that the suite catches a broken gradient.
    pub inject_sign_error: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            channels: 8,
            size: 6,
            frames: 4,
            shots: 2,
            inject_sign_error: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub loss: String,
    pub max_rel_error: f64,
    /// Instance and parameter index of the largest error.
    pub worst: Option<(usize, usize)>,
    pub compared: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub rows: Vec<GradcheckRow>,
    /// Largest absolute difference between the dense contrastive loss and
    /// its loop evaluation.
    pub contrastive_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_error < GRADCHECK_TOLERANCE) && self.contrastive_error < GRADCHECK_TOLERANCE
    }

    pub fn failures(&self) -> Vec<&GradcheckRow> {
        self.rows
            .iter()
            .filter(|r| !(r.max_rel_error < GRADCHECK_TOLERANCE))
            .collect()
    }
}

struct Instance {
    query: Vec<FrameFeatures>,
    support: Vec<SupportShot>,
    priors: Vec<LabelMarginal>,
    bank: ClassifierBank,
}

fn random_frame(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Result<FrameFeatures> {
    let data = (0..c * s * s).map(|_| StandardNormal.sample(rng)).collect();
    Ok(FrameFeatures::new(Tensor::new(vec![c, s, s], data)?)?.normalized())
}

fn instance(rng: &mut ChaCha8Rng, o: &GradcheckOptions) -> Result<Instance> {
    let (c, s) = (o.channels, o.size);
    let support = (0..o.shots)
        .map(|_| {
            let features = random_frame(rng, c, s)?;
            let mut m: Vec<bool> = (0..s * s).map(|_| rng.random_bool(0.4)).collect();
            m[rng.random_range(0..s * s)] = true;
            Ok(SupportShot {
                features,
                mask: BinaryMask::new(s, s, m)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let query = (0..o.frames)
        .map(|_| random_frame(rng, c, s))
        .collect::<Result<Vec<_>>>()?;
    let w0 = imprint_weights(&support)?;
    let frames = query
        .iter()
        .map(|f| {
            let w: Vec<f64> = w0
                .iter()
                .map(|v| v + 0.3 * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            let cos = pixel_cosines(f, &w);
            let bias = cos.iter().sum::<f64>() / cos.len() as f64 + rng.random_range(-0.05..0.05);
            FrameClassifier::new(w, bias, DEFAULT_TEMPERATURE)
        })
        .collect::<Result<Vec<_>>>()?;
    let priors = (0..o.frames)
        .map(|_| LabelMarginal::from_foreground(rng.random_range(0.1..0.9)))
        .collect();
    Ok(Instance {
        query,
        support,
        priors,
        bank: ClassifierBank::new(frames)?,
    })
}

fn flatten(g: &ParamGrad) -> Vec<f64> {
    let mut v = g.weights.clone();
    v.push(g.bias);
    v
}

fn flatten_all(gs: &[ParamGrad]) -> Vec<f64> {
    gs.iter().flat_map(flatten).collect()
}

fn classifier_from(p: &[f64], tau: f64) -> FrameClassifier {
    FrameClassifier {
        weights: p[..p.len() - 1].to_vec(),
        bias: p[p.len() - 1],
        temperature: tau,
    }
}

fn bank_from(template: &ClassifierBank, p: &[f64]) -> ClassifierBank {
    let mut b = template.clone();
    b.set_params(p);
    b
}

struct Accumulator {
    row: GradcheckRow,
}

impl Accumulator {
    fn new(loss: &str) -> Self {
        Self {
            row: GradcheckRow {
                loss: loss.to_string(),
                max_rel_error: 0.0,
                worst: None,
                compared: 0,
            },
        }
    }

    fn compare(&mut self, instance: usize, analytic: &[f64], numeric: &[f64]) {
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            if a.abs() < NEGLIGIBLE && n.abs() < NEGLIGIBLE {
                continue;
            }
            self.row.compared += 1;
            let err = (a - n).abs() / a.abs().max(n.abs());
            if !(err <= self.row.max_rel_error) {
                self.row.max_rel_error = err;
                self.row.worst = Some((instance, i));
            }
        }
    }
}

/// Loop evaluation of the dense contrastive loss.
fn contrastive_by_loops(a: &FrameFeatures, b: &FrameFeatures, tau: f64) -> f64 {
    let n = a.pixel_count();
    let mut total = 0.0;
    for p in 0..n {
        let x = a.column(p);
        let sims: Vec<f64> = (0..n)
            .map(|q| x.iter().zip(b.column(q)).map(|(u, v)| u * v).sum::<f64>() / tau)
            .collect();
        let mut best = 0;
        for q in 1..n {
            if sims[q] > sims[best] {
                best = q;
            }
        }
        let denom: f64 = sims.iter().map(|s| s.exp()).sum();
        total -= (sims[best].exp() / denom).ln();
    }
    total / n as f64
}

/// Compares analytic and central finite-difference gradients of the cross
/// entropy, entropy, KL, consistency and combined losses on random
/// instances, and the dense contrastive loss against a loop evaluation.
pub fn run_gradcheck(o: &GradcheckOptions) -> Result<GradcheckReport> {
    if o.instances == 0 {
        return Err(Error::invalid("gradcheck needs at least one instance"));
    }
    if o.channels == 0 || o.size == 0 || o.frames == 0 || o.shots == 0 {
        return Err(Error::invalid("gradcheck sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed);
    let h = DEFAULT_FD_STEP;
    let tau = DEFAULT_TEMPERATURE;
    let (mut ce, mut ent, mut kl, mut glob, mut comb) = (
        Accumulator::new("ce"),
        Accumulator::new("entropy"),
        Accumulator::new("kl"),
        Accumulator::new("global"),
        Accumulator::new("combined"),
    );
    let mut contrastive_error: f64 = 0.0;

    for i in 0..o.instances {
        let inst = instance(&mut rng, o)?;
        let clf = &inst.bank.frames[0];
        let p0 = flatten(&ParamGrad {
            weights: clf.weights.clone(),
            bias: clf.bias,
        });

        let mut analytic = flatten(&support_ce(&inst.support, clf)?.grad);
        if o.inject_sign_error {
            let last = analytic.len() - 1;
            analytic[last] = -analytic[last];
        }
        let numeric = finite_difference_gradient(
            |p| support_ce(&inst.support, &classifier_from(p, tau)).map_or(f64::NAN, |l| l.value),
            &p0,
            h,
        )?;
        ce.compare(i, &analytic, &numeric);

        let f = &inst.query[0];
        let resp = FrameResponse::evaluate(f, clf)?;
        let analytic = flatten(&entropy_loss_params(&resp, f, clf).grad);
        let numeric = finite_difference_gradient(
            |p| {
                let c = classifier_from(p, tau);
                FrameResponse::evaluate(f, &c).map_or(f64::NAN, |r| entropy_loss_params(&r, f, &c).value)
            },
            &p0,
            h,
        )?;
        ent.compare(i, &analytic, &numeric);

        let prior = inst.priors[0];
        let analytic = flatten(&kl_loss_params(&resp, f, clf, prior).grad);
        let numeric = finite_difference_gradient(
            |p| {
                let c = classifier_from(p, tau);
                FrameResponse::evaluate(f, &c).map_or(f64::NAN, |r| kl_loss_params(&r, f, &c, prior).value)
            },
            &p0,
            h,
        )?;
        kl.compare(i, &analytic, &numeric);

        // Consistency term against a prototype held fixed.
        let prototype = global_prototype(&inst.bank);
        let global_at = |bank: &ClassifierBank| -> Result<crate::losses::GlobalLoss> {
            let sigs = inst
                .query
                .iter()
                .zip(&bank.frames)
                .enumerate()
                .map(|(t, (f, c))| Ok(signatures_unchecked(f, &FrameResponse::evaluate(f, c)?.sigma, t, 0)))
                .collect::<Result<Vec<_>>>()?;
            global_loss(&prototype, &sigs, &inst.query, bank)
        };
        let analytic = flatten_all(&global_at(&inst.bank)?.per_frame);
        let params = inst.bank.to_params();
        let numeric = finite_difference_gradient(
            |p| global_at(&bank_from(&inst.bank, p)).map_or(f64::NAN, |g| g.value),
            &params,
            h,
        )?;
        glob.compare(i, &analytic, &numeric);

        // Full objective with the prototype differentiated as well.
        let obj = Objective {
            query: &inst.query,
            support: &inst.support,
            priors: &inst.priors,
            target: GlobalTarget::FromBank {
                through_prototype: true,
            },
        };
        let lambdas = Lambdas {
            entropy: 0.5,
            kl: 1.5,
            global: 0.5,
        };
        let analytic = flatten_all(&combined_loss(&obj, &inst.bank, lambdas)?.grads);
        let numeric = finite_difference_gradient(
            |p| combined_loss(&obj, &bank_from(&inst.bank, p), lambdas).map_or(f64::NAN, |b| b.total),
            &params,
            h,
        )?;
        comb.compare(i, &analytic, &numeric);

        let (a, b) = (&inst.query[0], &inst.query[1 % inst.query.len()]);
        let value = dense_contrastive_loss(a, b, 0.1)?;
        contrastive_error = contrastive_error.max((value - contrastive_by_loops(a, b, 0.1)).abs());
    }

    Ok(GradcheckReport {
        rows: vec![ce.row, ent.row, kl.row, glob.row, comb.row],
        contrastive_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let r = run_gradcheck(&GradcheckOptions::default()).unwrap();
        assert_eq!(r.rows.len(), 5);
        assert!(r.passed(), "{r:#?}");
        assert!(r.rows.iter().all(|row| row.compared > 0));
    }

    #[test]
    fn sign_error_is_caught() {
        let r = run_gradcheck(&GradcheckOptions {
            inject_sign_error: true,
            instances: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed());
        assert_eq!(r.failures()[0].loss, "ce");
    }

    #[test]
    fn zero_instances_rejected() {
        assert!(run_gradcheck(&GradcheckOptions {
            instances: 0,
            ..Default::default()
        })
        .is_err());
    }
}
