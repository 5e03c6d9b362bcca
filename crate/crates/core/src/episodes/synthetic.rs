//! Synthetic episodes with a controllable foreground drift and per-frame
//! object size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Episode;
use crate::classifier::{BinaryMask, FrameFeatures, SupportShot};
use crate::error::{Error, Result};
use crate::metrics::MaskSequence;
use crate::numerics;

/// Foreground area fractions: an explicit list (one per query frame) or a
/// range each frame draws from uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AreaSpec {
    PerFrame(Vec<f64>),
    Range { min: f64, max: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub shots: usize,
    /// Foreground direction of the support images; random when absent.
    pub direction: Option<Vec<f64>>,
    /// Rotation of the query foreground direction per frame, in radians.
    pub drift: f64,
    pub area: AreaSpec,
    /// Norm of the per-pixel Gaussian noise relative to the unit signal.
    pub noise: f64,
    /// Component of every background direction along the foreground
    /// direction (0 makes them orthogonal).
    pub background_lean: f64,
    pub background_directions: usize,
    /// Object centre displacement per frame, in pixels.
    pub motion: f64,
    pub class_id: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            height: 16,
            width: 16,
            frames: 12,
            shots: 1,
            direction: None,
            drift: 0.0,
            area: AreaSpec::Range { min: 0.2, max: 0.4 },
            noise: 0.0,
            background_lean: 0.3,
            background_directions: 3,
            motion: 0.5,
            class_id: 1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 3 {
            return Err(Error::invalid("synthetic episodes need at least 3 channels"));
        }
        if self.height == 0 || self.width == 0 || self.frames == 0 || self.shots == 0 {
            return Err(Error::invalid("height, width, frames and shots must be positive"));
        }
        let fractions: Vec<f64> = match &self.area {
            AreaSpec::PerFrame(v) => {
                if v.len() != self.frames {
                    return Err(Error::invalid(format!("{} area fractions for {} frames", v.len(), self.frames)));
                }
                v.clone()
            }
            AreaSpec::Range { min, max } => {
                if min > max {
                    return Err(Error::invalid(format!("area range [{min}, {max}] is empty")));
                }
                vec![*min, *max]
            }
        };
        if fractions.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::invalid("area fractions must lie in (0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid("noise must be finite and non-negative"));
        }
        if !self.drift.is_finite() || !(self.motion >= 0.0 && self.motion.is_finite()) {
            return Err(Error::invalid("drift and motion must be finite, motion non-negative"));
        }
        if !(self.background_lean >= 0.0 && self.background_lean.is_finite()) || self.background_directions == 0 {
            return Err(Error::invalid("background lean must be non-negative with at least one direction"));
        }
        if let Some(d) = &self.direction {
            if d.len() != self.channels {
                return Err(Error::invalid(format!("direction has {} entries for {} channels", d.len(), self.channels)));
            }
            if numerics::norm(d) < numerics::NORM_EPS {
                return Err(Error::invalid("direction is zero"));
            }
        }
        // Foreground and background stay apart by more than the noise.
        let lean_cos = self.background_lean / (1.0 + self.background_lean * self.background_lean).sqrt();
        let worst = (0..self.frames)
            .map(|t| (lean_cos * (t as f64 * self.drift).cos()).clamp(-1.0, 1.0).acos())
            .fold(f64::INFINITY, f64::min);
        if worst <= self.noise {
            return Err(Error::invalid(format!(
                "noise {} is not below the smallest foreground/background angle {worst:.3}",
                self.noise
            )));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Removes from `v` its components along the (unit) `basis` vectors and
/// normalizes.
fn orthonormal(mut v: Vec<f64>, basis: &[&[f64]]) -> Vec<f64> {
    for b in basis {
        let d = numerics::dot(&v, b);
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x -= d * y);
    }
    numerics::normalize(&v).expect("finite").into_vec()
}

struct Scene {
    height: usize,
    width: usize,
    backgrounds: Vec<Vec<f64>>,
    noise: f64,
}

impl Scene {
    fn render(&self, rng: &mut ChaCha8Rng, fg: &[f64], mask: &BinaryMask) -> Result<FrameFeatures> {
        let c = fg.len();
        let sd = self.noise / (c as f64).sqrt();
        let mut columns = Vec::with_capacity(self.height * self.width);
        for p in 0..self.height * self.width {
            let base = if mask.get(p) {
                fg
            } else {
                let band = (p / self.width) * self.backgrounds.len() / self.height;
                &self.backgrounds[band]
            };
            let col: Vec<f64> = base
                .iter()
                .zip(gaussian(rng, c))
                .map(|(b, g)| b + sd * g)
                .collect();
            columns.push(numerics::normalize(&col)?.into_vec());
        }
        FrameFeatures::from_columns(self.height, self.width, &columns)
    }
}

/// Axis-aligned rectangle of about `area` pixels with the given aspect ratio
/// (height / width), centred near `(cy, cx)` and clipped into the image.
fn rectangle(height: usize, width: usize, area: f64, aspect: f64, cy: f64, cx: f64) -> BinaryMask {
    let rh = ((area * aspect).sqrt().round() as usize).clamp(1, height);
    let rw = ((area / rh as f64).round() as usize).clamp(1, width);
    let y0 = ((cy - rh as f64 / 2.0).round().max(0.0) as usize).min(height - rh);
    let x0 = ((cx - rw as f64 / 2.0).round().max(0.0) as usize).min(width - rw);
    let mut v = vec![false; height * width];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            v[y * width + x] = true;
        }
    }
    BinaryMask::new(height, width, v).expect("dims are valid")
}

fn draw_area(rng: &mut ChaCha8Rng, area: &AreaSpec) -> f64 {
    match area {
        AreaSpec::PerFrame(v) => v[rng.random_range(0..v.len())],
        AreaSpec::Range { min, max } if min == max => *min,
        AreaSpec::Range { min, max } => rng.random_range(*min..*max),
    }
}

/// Builds a synthetic episode with ground truth.
///
/// Query frame `t` shows a rectangle whose pixels point along the
/// foreground direction rotated by `t * drift` (towards a direction
/// orthogonal to every background direction); background pixels point along
/// one of a few directions leaning towards the foreground. The object moves
/// smoothly and its area follows the spec. Support images use the unrotated
/// direction with independent rectangles.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Episode> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, h, w) = (spec.channels, spec.height, spec.width);
    let d = match &spec.direction {
        Some(d) => numerics::normalize(d)?.into_vec(),
        None => orthonormal(gaussian(&mut rng, c), &[]),
    };
    let u = orthonormal(gaussian(&mut rng, c), &[&d]);
    let backgrounds: Vec<Vec<f64>> = (0..spec.background_directions)
        .map(|_| {
            let e = orthonormal(gaussian(&mut rng, c), &[&d, &u]);
            let b: Vec<f64> = e.iter().zip(&d).map(|(e, d)| e + spec.background_lean * d).collect();
            numerics::normalize(&b).expect("non-zero").into_vec()
        })
        .collect();
    let scene = Scene {
        height: h,
        width: w,
        backgrounds,
        noise: spec.noise,
    };
    let pixels = (h * w) as f64;

    let aspect = rng.random_range(0.75..1.33);
    let (mut cy, mut cx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (mut vy, mut vx) = (spec.motion * heading.sin(), spec.motion * heading.cos());
    let mut query = Vec::with_capacity(spec.frames);
    let mut gt = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let area = match &spec.area {
            AreaSpec::PerFrame(v) => v[t],
            range => draw_area(&mut rng, range),
        };
        let mask = rectangle(h, w, area * pixels, aspect, cy, cx);
        let angle = t as f64 * spec.drift;
        let fg: Vec<f64> = d
            .iter()
            .zip(&u)
            .map(|(d, u)| angle.cos() * d + angle.sin() * u)
            .collect();
        query.push(scene.render(&mut rng, &fg, &mask)?);
        gt.push(mask);
        cy += vy;
        cx += vx;
        if cy < 0.0 || cy > h as f64 {
            vy = -vy;
            cy = cy.clamp(0.0, h as f64);
        }
        if cx < 0.0 || cx > w as f64 {
            vx = -vx;
            cx = cx.clamp(0.0, w as f64);
        }
    }

    let mut support = Vec::with_capacity(spec.shots);
    for _ in 0..spec.shots {
        let area = draw_area(&mut rng, &spec.area);
        let aspect = rng.random_range(0.75..1.33);
        let (sy, sx) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        let mask = rectangle(h, w, area * pixels, aspect, sy, sx);
        let features = scene.render(&mut rng, &d, &mask)?;
        support.push(SupportShot { features, mask });
    }

    let ep = Episode {
        id: format!("synth-{}", spec.seed),
        class_id: spec.class_id,
        seed: spec.seed,
        support,
        query,
        gt: Some(MaskSequence::new(gt)?),
        origin: None,
    };
    ep.validate()?;
    Ok(ep)
}
