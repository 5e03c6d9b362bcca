//! Dense values and the elementary math the rest of the crate builds on.
//!
//! Everything here works in `f64`. Interchange files carry `f32`; the
//! tensor reader widens on ingestion and the writer narrows on export.

use crate::error::{Error, Result};

/// Norms below this are treated as zero by [`normalize`] and
/// [`cosine_similarity`].
pub const NORM_EPS: f64 = 1e-12;

/// Default step for [`finite_difference_gradient`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Row-major dense tensor of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!("tensor dims must be positive, got {dims:?}")));
        }
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match dims {:?} ({} elements)",
                data.len(),
                dims,
                expected
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite tensor entry at index {i}")));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }
}

/// A vector of Euclidean norm one, or the all-zero sentinel produced when
/// normalizing a (numerically) zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn zero(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot normalize a zero-dimensional vector"));
    }
    let n = norm(v);
    if n < NORM_EPS {
        return Ok(UnitVector::zero(v.len()));
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Cosine of the angle between `a` and `b`, clamped to `[-1, 1]`; zero when
/// either vector has (numerically) zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "cosine of vectors with different dims ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("cosine of zero-dimensional vectors"));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Logistic function. Never returns exactly zero: results that would
/// underflow are held at the smallest positive normal `f64`.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.max(f64::MIN_POSITIVE)
}

/// `ln(sigmoid(x))` without forming `sigmoid(x)`, accurate in both tails.
pub fn ln_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Exact Euclidean distance from every cell to the nearest positive cell.
///
/// Separable lower-envelope algorithm over squared distances; all
/// intermediate values are small integers, so the result is exact.
pub fn distance_transform(positive: &[bool], height: usize, width: usize) -> Result<Tensor> {
    if height == 0 || width == 0 || positive.len() != height * width {
        return Err(Error::invalid(format!(
            "mask of {} cells does not match {height}x{width}",
            positive.len()
        )));
    }
    if !positive.iter().any(|&p| p) {
        return Err(Error::EmptyForeground);
    }

    // Columns first: squared vertical distance, or None when the column is empty.
    let mut cols: Vec<Option<f64>> = vec![None; height * width];
    let mut line: Vec<Option<f64>> = vec![None; height];
    let mut out_line: Vec<Option<f64>> = vec![None; height];
    for x in 0..width {
        for y in 0..height {
            line[y] = positive[y * width + x].then_some(0.0);
        }
        lower_envelope(&line, &mut out_line);
        for y in 0..height {
            cols[y * width + x] = out_line[y];
        }
    }

    let mut squared = vec![0.0; height * width];
    let mut row_out: Vec<Option<f64>> = vec![None; width];
    for y in 0..height {
        let row = &cols[y * width..(y + 1) * width];
        lower_envelope(row, &mut row_out);
        for x in 0..width {
            // At least one positive pixel exists, so every row sees a finite parabola.
            squared[y * width + x] = row_out[x].expect("non-empty mask");
        }
    }
    Tensor::new(vec![height, width], squared.into_iter().map(f64::sqrt).collect())
}

/// One-dimensional squared distance transform: `out[q] = min_p (q-p)^2 + f[p]`
/// over the sample points where `f` is defined.
fn lower_envelope(f: &[Option<f64>], out: &mut [Option<f64>]) {
    let n = f.len();
    let mut sites: Vec<usize> = Vec::with_capacity(n);
    let mut bounds: Vec<f64> = Vec::with_capacity(n + 1);
    let value = |q: usize| f[q].expect("site has a value");

    for q in 0..n {
        if f[q].is_none() {
            continue;
        }
        let fq = value(q) + (q * q) as f64;
        loop {
            let Some(&v) = sites.last() else {
                sites.push(q);
                bounds.clear();
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (value(v) + (v * v) as f64)) / (2.0 * q as f64 - 2.0 * v as f64);
            if s <= *bounds.last().expect("bounds track sites") {
                sites.pop();
                bounds.pop();
                continue;
            }
            sites.push(q);
            bounds.push(s);
            break;
        }
    }

    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = None);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let v = sites[k];
        let d = q as f64 - v as f64;
        *o = Some(d * d + value(v));
    }
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_difference_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        probe[i] = p[i] + h;
        let up = f(&probe);
        probe[i] = p[i] - h;
        let down = f(&probe);
        probe[i] = p[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_three_four_five() {
        let u = normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(u.as_slice()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(u.as_slice()[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn normalize_zero_is_sentinel() {
        let u = normalize(&[0.0, 0.0]).unwrap();
        assert!(u.is_zero());
        assert!(normalize(&[]).is_err());
    }

    #[test]
    fn normalize_random_has_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let v: Vec<f64> = (0..8).map(|_| rng.random_range(-5.0..5.0)).collect();
            let u = normalize(&v).unwrap();
            let n: f64 = u.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cosine_cases() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[-2.0, 0.0]).unwrap(), -1.0);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        let tiny = sigmoid(-800.0);
        assert!(tiny > 0.0 && tiny <= 1e-300);
        // 1 / (1 + e^-2)
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert_abs_diff_eq!(sigmoid(2.0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(sigmoid(2.0), 0.880_797_077_977_882_3, epsilon = 1e-15);
        assert!(sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn distance_transform_small_cases() {
        let dt = distance_transform(&[true, false, false], 1, 3).unwrap();
        assert_eq!(dt.data(), &[0.0, 1.0, 2.0]);

        let mut center = vec![false; 9];
        center[4] = true;
        let dt = distance_transform(&center, 3, 3).unwrap();
        for corner in [0, 2, 6, 8] {
            assert_eq!(dt.data()[corner], 2f64.sqrt());
        }
        assert_eq!(dt.data()[1], 1.0);
    }

    #[test]
    fn distance_transform_empty_mask_errors() {
        assert!(matches!(
            distance_transform(&[false; 4], 2, 2),
            Err(Error::EmptyForeground)
        ));
    }

    #[test]
    fn fd_gradient_basics() {
        let g = finite_difference_gradient(|p| p[0] * p[0], &[3.0], DEFAULT_FD_STEP).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| 4.2, &[1.0, 2.0, 3.0], DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(finite_difference_gradient(|_| f64::NAN, &[1.0], 1e-5).is_err());
    }
}
