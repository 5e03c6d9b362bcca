use crate::classifier::FrameFeatures;
use crate::error::{Error, Result};

/// Dense contrastive loss between two normalized feature maps.
///
/// Every position of `anchor_frame` is an anchor. Its positive is the
/// position of `other_frame` with the highest cosine similarity (first
/// index on ties, the co-located position included); all positions of
/// `other_frame` form the softmax denominator. Returns the mean over
/// anchors.
pub fn dense_contrastive_loss(anchor_frame: &FrameFeatures, other_frame: &FrameFeatures, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "contrastive temperature must be positive, got {temperature}"
        )));
    }
    anchor_frame.require_normalized()?;
    other_frame.require_normalized()?;
    if anchor_frame.channels() != other_frame.channels()
        || anchor_frame.height() != other_frame.height()
        || anchor_frame.width() != other_frame.width()
    {
        return Err(Error::invalid("contrastive frames must share C, H and W"));
    }

    let n = anchor_frame.pixel_count();
    let mut total = 0.0;
    let mut logits = vec![0.0; n];
    for p in 0..n {
        let anchor = anchor_frame.column(p);
        // Unit columns: the dot product is the cosine (zero for sentinels).
        for (l, sim) in logits.iter_mut().zip(other_frame.project(&anchor)) {
            *l = sim / temperature;
        }
        let mut best = 0;
        for (a, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = a;
            }
        }
        let max = logits[best];
        let log_sum_exp = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += log_sum_exp - logits[best];
    }
    Ok(total / n as f64)
}
