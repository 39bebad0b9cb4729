//! Pseudo-label generation from the two prototype classifiers.
//!
//! Scores from both prototype sets are turned into class probabilities with a
//! temperature softmax. The text-side probabilities are debiased by dividing
//! through a running average of themselves and re-normalizing; the result is
//! mixed with the image-side probabilities and the argmax becomes the label.
//! Each label also gets a confidence weight from how well the sample agrees
//! with both prototypes of its label.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{argmax, cosine, Mat};
use crate::prototypes::{ImagePrototypes, TextualPrototypes};

/// Running mean entries below this make the alignment division meaningless.
const MIN_RUNNING_MEAN: f64 = 1e-12;

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(t))
    }
}

/// Softmax over classes of `f · Zᵀ / tau`.
pub fn text_scores(f: &Mat, z: &TextualPrototypes, tau_logit: f64) -> Result<Mat> {
    check_temperature(tau_logit)?;
    Ok(f.matmul_t(&z.z)?.softmax_rows(tau_logit))
}

/// Softmax over classes of `f · Pᵀ / tau`.
pub fn image_scores(f: &Mat, p: &ImagePrototypes, tau_logit: f64) -> Result<Mat> {
    check_temperature(tau_logit)?;
    Ok(f.matmul_t(&p.p)?.softmax_rows(tau_logit))
}

/// Running class-marginal of the text-side predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DAState {
    pub running_mean: Vec<f64>,
    pub momentum: f64,
}

impl DAState {
    pub fn uniform(n_classes: usize, momentum: f64) -> Self {
        Self {
            running_mean: vec![1.0 / n_classes as f64; n_classes],
            momentum,
        }
    }

    /// Aligns `p_t` against the current running mean and returns the aligned
    /// rows together with the state after folding in this batch. The division
    /// always uses the pre-update mean.
    pub fn align(&self, p_t: &Mat) -> Result<(Mat, DAState)> {
        let c = self.running_mean.len();
        if p_t.cols() != c {
            return Err(Error::ShapeMismatch(format!(
                "{} score columns for {c} classes",
                p_t.cols()
            )));
        }
        if let Some((index, &value)) = self
            .running_mean
            .iter()
            .enumerate()
            .find(|(_, &v)| v.is_nan() || v < MIN_RUNNING_MEAN)
        {
            return Err(Error::DegenerateRunningMean { index, value });
        }
        let mut out = p_t.clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mut sum = 0.0;
            for (x, m) in row.iter_mut().zip(&self.running_mean) {
                *x /= m;
                sum += *x;
            }
            row.iter_mut().for_each(|x| *x /= sum);
        }

        let mut next = self.clone();
        if p_t.rows() > 0 {
            let b = p_t.rows() as f64;
            let m = self.momentum;
            for (j, mean) in next.running_mean.iter_mut().enumerate() {
                let batch_mean = p_t.iter_rows().map(|r| r[j]).sum::<f64>() / b;
                *mean = m * *mean + (1.0 - m) * batch_mean;
            }
        }
        Ok((out, next))
    }
}

/// Convex mix `β·da_pt + (1−β)·p_v` and its row argmax (ties to the lowest
/// class).
pub fn fuse_and_label(da_pt: &Mat, p_v: &Mat, beta: f64) -> Result<(Mat, Vec<usize>)> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::BetaOutOfRange(beta));
    }
    if da_pt.rows() != p_v.rows() || da_pt.cols() != p_v.cols() {
        return Err(Error::ShapeMismatch("fusion inputs differ in shape".into()));
    }
    let mut fused = da_pt.clone();
    fused.scale(beta);
    fused.add_scaled(p_v, 1.0 - beta)?;
    let labels = fused.argmax_rows();
    Ok((fused, labels))
}

/// `clamp(cos(f, Z_ŷ), 0, 1) · clamp(cos(f, P_ŷ), 0, 1)` for every row.
pub fn sample_weights(
    f: &Mat,
    labels: &[usize],
    z: &TextualPrototypes,
    p: &ImagePrototypes,
) -> Result<Vec<f64>> {
    if labels.len() != f.rows() {
        return Err(Error::LengthMismatch {
            left: f.rows(),
            right: labels.len(),
        });
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= z.n_classes() || y >= p.n_classes() {
                return Err(Error::LabelOutOfRange {
                    position: i,
                    label: y,
                    classes: z.n_classes(),
                });
            }
            let row = f.row(i);
            let wz = cosine(row, z.z.row(y)).clamp(0.0, 1.0);
            let wp = cosine(row, p.p.row(y)).clamp(0.0, 1.0);
            Ok(wz * wp)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelOutput {
    pub fused: Mat,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelingParams {
    pub beta: f64,
    pub tau_logit: f64,
    /// When false every weight is 1.
    pub weighting: bool,
}

/// Runs the whole labeling path on already-adapted weak features and
/// advances the alignment state.
pub fn label_batch(
    f: &Mat,
    z: &TextualPrototypes,
    p: &ImagePrototypes,
    da: &mut DAState,
    params: LabelingParams,
) -> Result<PseudoLabelOutput> {
    let p_t = text_scores(f, z, params.tau_logit)?;
    let p_v = image_scores(f, p, params.tau_logit)?;
    let (aligned, next) = da.align(&p_t)?;
    let (fused, labels) = fuse_and_label(&aligned, &p_v, params.beta)?;
    let weights = if params.weighting {
        sample_weights(f, &labels, z, p)?
    } else {
        vec![1.0; labels.len()]
    };
    *da = next;
    Ok(PseudoLabelOutput {
        fused,
        labels,
        weights,
    })
}

/// Labels from the nearest image prototype alone.
pub fn image_prototype_labels(f: &Mat, p: &ImagePrototypes) -> Result<Vec<usize>> {
    Ok(f.matmul_t(&p.p)?.iter_rows().map(argmax).collect())
}
