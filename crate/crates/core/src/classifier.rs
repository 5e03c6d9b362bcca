//! Per-frame linear classifiers over normalized feature maps.
//!
//! A classifier scores pixel `(x, y)` as
//! `sigmoid(tau * (cos(F(x, y), w) - b))`, where `F` is the normalized
//! feature column at that pixel. Weights are imprinted from the support set
//! as an average of masked average pools, and the bias starts at the mean
//! foreground probability of the query frame.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor, NORM_EPS};

/// Default sigmoid temperature.
pub const DEFAULT_TEMPERATURE: f64 = 20.0;

/// Feature map of one frame, stored channel-major as `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatures {
    channels: usize,
    height: usize,
    width: usize,
    values: Tensor,
    normalized: bool,
}

impl FrameFeatures {
    /// Wraps raw (unnormalized) features of dims `[C, H, W]`.
    pub fn new(values: Tensor) -> Result<Self> {
        let &[channels, height, width] = values.dims() else {
            return Err(Error::invalid(format!(
                "frame features must be [C, H, W], got dims {:?}",
                values.dims()
            )));
        };
        Ok(Self {
            channels,
            height,
            width,
            values,
            normalized: false,
        })
    }

    pub fn from_columns(height: usize, width: usize, columns: &[Vec<f64>]) -> Result<Self> {
        if columns.len() != height * width || columns.is_empty() {
            return Err(Error::invalid("column count does not match height * width"));
        }
        let channels = columns[0].len();
        let hw = height * width;
        let mut data = vec![0.0; channels * hw];
        for (p, col) in columns.iter().enumerate() {
            if col.len() != channels {
                return Err(Error::invalid("feature columns have inconsistent lengths"));
            }
            for (c, &v) in col.iter().enumerate() {
                data[c * hw + p] = v;
            }
        }
        Self::new(Tensor::new(vec![channels, height, width], data)?)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Feature column at flat pixel index `p = y * W + x`.
    pub fn column(&self, p: usize) -> Vec<f64> {
        let hw = self.pixel_count();
        let data = self.values.data();
        (0..self.channels).map(|c| data[c * hw + p]).collect()
    }

    /// Scales every spatial column to unit norm; zero columns stay zero.
    pub fn normalized(&self) -> Self {
        if self.normalized {
            return self.clone();
        }
        let hw = self.pixel_count();
        let data = self.values.data();
        let mut norms = vec![0.0; hw];
        for c in 0..self.channels {
            for (p, n) in norms.iter_mut().enumerate() {
                let v = data[c * hw + p];
                *n += v * v;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        let out: Vec<f64> = data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let n = norms[i % hw];
                if n < NORM_EPS {
                    0.0
                } else {
                    v / n
                }
            })
            .collect();
        Self {
            values: Tensor::new(self.values.dims().to_vec(), out).expect("same shape"),
            normalized: true,
            ..*self
        }
    }

    /// Multiplies every entry by `factor`; the result is marked raw.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let data = self.values.data().iter().map(|v| v * factor).collect();
        Self::new(Tensor::new(self.values.dims().to_vec(), data)?)
    }

    pub(crate) fn require_normalized(&self) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::invalid("features must be normalized first"))
        }
    }

    /// `out[p] = <F(p), w>` for every pixel.
    pub(crate) fn project(&self, w: &[f64]) -> Vec<f64> {
        let hw = self.pixel_count();
        let data = self.values.data();
        let mut out = vec![0.0; hw];
        for (c, &wc) in w.iter().enumerate() {
            let plane = &data[c * hw..(c + 1) * hw];
            for (o, &f) in out.iter_mut().zip(plane) {
                *o += wc * f;
            }
        }
        out
    }

    /// `sum_p weights[p] * F(p)`.
    pub(crate) fn pool(&self, weights: &[f64]) -> Vec<f64> {
        let hw = self.pixel_count();
        let data = self.values.data();
        (0..self.channels)
            .map(|c| numerics::dot(&data[c * hw..(c + 1) * hw], weights))
            .collect()
    }
}

/// Binary segmentation mask with an optional set of ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
    ignore: Option<Vec<bool>>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid(format!(
                "mask of {} cells does not match {height}x{width}",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
            ignore: None,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![false; height * width])
    }

    /// Attaches an ignore-mask. Ignored pixels must not be positive.
    pub fn with_ignore(mut self, ignore: Vec<bool>) -> Result<Self> {
        if ignore.len() != self.values.len() {
            return Err(Error::invalid("ignore-mask size does not match mask"));
        }
        if ignore.iter().zip(&self.values).any(|(&i, &v)| i && v) {
            return Err(Error::invalid("ignore-mask overlaps positive pixels"));
        }
        self.ignore = Some(ignore);
        Ok(self)
    }

    /// Reads a `[H, W]` tensor whose entries are exactly 0 or 1.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[height, width] = t.dims() else {
            return Err(Error::invalid(format!("mask tensor must be [H, W], got {:?}", t.dims())));
        };
        let mut values = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == 0.0 {
                values.push(false);
            } else if v == 1.0 {
                values.push(true);
            } else {
                return Err(Error::invalid(format!("mask entry {v} is not 0 or 1")));
            }
        }
        Self::new(height, width, values)
    }

    /// Foreground pixels of a label map are those equal to `class_id`.
    pub fn from_label_map(t: &Tensor, class_id: u32) -> Result<Self> {
        let &[height, width] = t.dims() else {
            return Err(Error::invalid(format!("label map must be [H, W], got {:?}", t.dims())));
        };
        let target = class_id as f64;
        Self::new(height, width, t.data().iter().map(|&v| v == target).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width],
            self.values.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask dims are positive")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn ignore(&self) -> Option<&[bool]> {
        self.ignore.as_deref()
    }

    pub fn get(&self, p: usize) -> bool {
        self.values[p]
    }

    pub fn is_ignored(&self, p: usize) -> bool {
        self.ignore.as_ref().is_some_and(|ig| ig[p])
    }

    pub fn count_positive(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn count_scored(&self) -> usize {
        match &self.ignore {
            Some(ig) => ig.iter().filter(|&&i| !i).count(),
            None => self.values.len(),
        }
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// Per-pixel foreground probabilities of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::invalid("probability map size does not match its dims"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("probability map has non-finite entries"));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Weights `w`, bias `b` and temperature `tau` of one frame's classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub temperature: f64,
}

impl FrameClassifier {
    pub fn new(weights: Vec<f64>, bias: f64, temperature: f64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("classifier weights are empty"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
        }
        Ok(Self {
            weights,
            bias,
            temperature,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }
}

/// Classifiers for every query frame plus the optimization iteration they
/// correspond to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    pub frames: Vec<FrameClassifier>,
    pub iteration: usize,
}

impl ClassifierBank {
    pub fn new(frames: Vec<FrameClassifier>) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::invalid("classifier bank needs at least one frame"));
        };
        let (dim, tau) = (first.dim(), first.temperature);
        if frames.iter().any(|f| f.dim() != dim || f.temperature != tau) {
            return Err(Error::invalid("bank frames must share dimension and temperature"));
        }
        Ok(Self {
            frames,
            iteration: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }

    /// Flattens `[w_0, b_0, w_1, b_1, ...]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * (self.dim() + 1));
        for f in &self.frames {
            out.extend_from_slice(&f.weights);
            out.push(f.bias);
        }
        out
    }

    /// Inverse of [`ClassifierBank::to_params`].
    pub fn set_params(&mut self, params: &[f64]) {
        let stride = self.dim() + 1;
        assert_eq!(params.len(), stride * self.len(), "parameter vector length");
        for (f, chunk) in self.frames.iter_mut().zip(params.chunks(stride)) {
            f.weights.copy_from_slice(&chunk[..stride - 1]);
            f.bias = chunk[stride - 1];
        }
    }
}

/// One labelled support image.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportShot {
    pub features: FrameFeatures,
    pub mask: BinaryMask,
}

/// How the initial bias is derived from the query frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BiasInit {
    /// Mean foreground probability with the bias held at zero.
    #[default]
    ProbabilityMean,
    /// Mean cosine to the imprinted weights, centring the logits.
    CosineMean,
}

/// Average over shots of the masked average pool of normalized support
/// features.
pub fn imprint_weights(support: &[SupportShot]) -> Result<Vec<f64>> {
    let Some(first) = support.first() else {
        return Err(Error::invalid("support set is empty"));
    };
    let channels = first.features.channels();
    let mut proto = vec![0.0; channels];
    for (k, shot) in support.iter().enumerate() {
        shot.features.require_normalized()?;
        check_mask_matches(&shot.features, &shot.mask)?;
        if shot.features.channels() != channels {
            return Err(Error::invalid("support shots have different channel counts"));
        }
        let weights: Vec<f64> = shot
            .mask
            .values()
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect();
        let mass: f64 = weights.iter().sum();
        if mass == 0.0 {
            return Err(Error::EmptySupportMask { shot: k });
        }
        for (acc, v) in proto.iter_mut().zip(shot.features.pool(&weights)) {
            *acc += v / mass;
        }
    }
    let k = support.len() as f64;
    proto.iter_mut().for_each(|v| *v /= k);
    Ok(proto)
}

pub(crate) fn check_mask_matches(features: &FrameFeatures, mask: &BinaryMask) -> Result<()> {
    if features.height() != mask.height() || features.width() != mask.width() {
        return Err(Error::invalid(format!(
            "mask {}x{} does not match features {}x{}",
            mask.height(),
            mask.width(),
            features.height(),
            features.width()
        )));
    }
    Ok(())
}

/// Cosine of every pixel column with `weights`, assuming unit (or zero)
/// columns.
pub(crate) fn pixel_cosines(features: &FrameFeatures, weights: &[f64]) -> Vec<f64> {
    let wn = numerics::norm(weights);
    if wn < NORM_EPS {
        return vec![0.0; features.pixel_count()];
    }
    features
        .project(weights)
        .into_iter()
        .map(|d| (d / wn).clamp(-1.0, 1.0))
        .collect()
}

/// Foreground probabilities with the bias held at zero.
pub fn initial_foreground(features: &FrameFeatures, weights: &[f64], temperature: f64) -> Result<ProbabilityMap> {
    predict(features, &FrameClassifier::new(weights.to_vec(), 0.0, temperature)?)
}

/// Mean of a foreground probability map.
pub fn init_bias(p0_fg: &ProbabilityMap) -> f64 {
    p0_fg.mean()
}

/// Initial bias for one query frame under the chosen rule.
pub fn initial_bias(features: &FrameFeatures, weights: &[f64], temperature: f64, rule: BiasInit) -> Result<f64> {
    match rule {
        BiasInit::ProbabilityMean => Ok(init_bias(&initial_foreground(features, weights, temperature)?)),
        BiasInit::CosineMean => {
            features.require_normalized()?;
            let cos = pixel_cosines(features, weights);
            Ok(cos.iter().sum::<f64>() / cos.len() as f64)
        }
    }
}

pub fn predict(features: &FrameFeatures, clf: &FrameClassifier) -> Result<ProbabilityMap> {
    features.require_normalized()?;
    if features.channels() != clf.dim() {
        return Err(Error::invalid(format!(
            "classifier has {} weights but features have {} channels",
            clf.dim(),
            features.channels()
        )));
    }
    let sigma = pixel_cosines(features, &clf.weights)
        .into_iter()
        .map(|c| numerics::sigmoid(clf.temperature * (c - clf.bias)))
        .collect();
    ProbabilityMap::new(features.height(), features.width(), sigma)
}

/// Foreground wherever the probability reaches `threshold`.
pub fn binarize(map: &ProbabilityMap, threshold: f64) -> BinaryMask {
    BinaryMask::new(
        map.height(),
        map.width(),
        map.values().iter().map(|&s| s >= threshold).collect(),
    )
    .expect("probability map dims are valid")
}
