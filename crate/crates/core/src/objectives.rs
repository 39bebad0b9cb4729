//! Training losses and their analytic gradients.
//!
//! All three losses are driven by raw dot-product scores divided by a
//! temperature. Gradients are written out by hand for exactly this model:
//! a linear prototype head on top of the affine-normalize adapter.
//!
//! * self-training: weighted cross-entropy of strong-view predictions against
//!   weak-view pseudo-labels, averaged over the batch;
//! * fairness: negative mean log of the batch-averaged strong-view
//!   prediction, which is smallest (`ln C`) when that average is uniform;
//! * alignment: InfoNCE between image prototype `j` and textual prototype `j`
//!   against all textual prototypes. Image prototypes are constants here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Mat};
use crate::optim::Adapter;
use crate::prototypes::{ImagePrototypes, TextualPrototypes};

/// Probabilities are floored at this value inside every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonPositiveTemperature(t))
    }
}

fn check_batch(rows: usize, labels: &[usize], weights: &[f64], classes: usize) -> Result<()> {
    if labels.len() != rows || weights.len() != rows {
        return Err(Error::LengthMismatch {
            left: rows,
            right: labels.len().min(weights.len()),
        });
    }
    if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            position,
            label,
            classes,
        });
    }
    Ok(())
}

/// Weighted cross-entropy of `softmax(strong_f·Zᵀ/τ)` against `labels`.
/// Returns the loss and the strong-view probabilities.
pub fn self_training_loss(
    strong_f: &Mat,
    labels: &[usize],
    weights: &[f64],
    z: &TextualPrototypes,
    tau_logit: f64,
) -> Result<(f64, Mat)> {
    check_temperature(tau_logit)?;
    check_batch(strong_f.rows(), labels, weights, z.n_classes())?;
    let scores = strong_f.matmul_t(&z.z)?;
    let (loss, _) = st_value_and_score_grad(&scores, labels, weights, tau_logit);
    Ok((loss, scores.softmax_rows(tau_logit)))
}

/// `-(1/C) Σ_j log p̄_j` with `p̄` the column mean of `p_a`.
pub fn fairness_loss(p_a: &Mat) -> Result<f64> {
    if p_a.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(fairness_value(&column_mean(p_a)))
}

/// Sum over classes of `-log softmax_r(P_j·Z_r/τ)[j]`.
pub fn alignment_loss(p: &ImagePrototypes, z: &TextualPrototypes, tau_align: f64) -> Result<f64> {
    Ok(alignment_loss_and_grad(p, z, tau_align)?.0)
}

/// Alignment loss and its gradient with respect to `Z`.
pub fn alignment_loss_and_grad(
    p: &ImagePrototypes,
    z: &TextualPrototypes,
    tau_align: f64,
) -> Result<(f64, Mat)> {
    check_temperature(tau_align)?;
    if p.p.rows() != z.n_classes() {
        return Err(Error::ShapeMismatch(format!(
            "{} image prototypes vs {} textual prototypes",
            p.p.rows(),
            z.n_classes()
        )));
    }
    let scores = p.p.matmul_t(&z.z)?;
    let c = z.n_classes();
    let mut loss = 0.0;
    let mut dz = Mat::zeros(c, z.dim());
    for j in 0..c {
        let row = scores.row(j);
        loss += log_sum_exp(row, tau_align) - row[j] / tau_align;
        let mut soft = row.to_vec();
        crate::linalg::softmax_in_place(&mut soft, tau_align);
        soft[j] -= 1.0;
        let pj = p.p.row(j);
        for (r, coef) in soft.iter().enumerate() {
            let coef = coef / tau_align;
            for (g, x) in dz.row_mut(r).iter_mut().zip(pj) {
                *g += coef * x;
            }
        }
    }
    Ok((loss, dz))
}

fn column_mean(p: &Mat) -> Vec<f64> {
    let mut mean = vec![0.0; p.cols()];
    for row in p.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let b = p.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= b);
    mean
}

fn fairness_value(mean: &[f64]) -> f64 {
    let c = mean.len() as f64;
    -mean.iter().map(|&m| m.max(LOG_FLOOR).ln()).sum::<f64>() / c
}

/// Self-training loss from raw scores, plus `∂L/∂scores`.
fn st_value_and_score_grad(
    scores: &Mat,
    labels: &[usize],
    weights: &[f64],
    tau: f64,
) -> (f64, Mat) {
    let b = scores.rows();
    let mut grad = Mat::zeros(b, scores.cols());
    if b == 0 {
        return (0.0, grad);
    }
    let cap = -LOG_FLOOR.ln();
    let mut loss = 0.0;
    for i in 0..b {
        let row = scores.row(i);
        let y = labels[i];
        let nll = log_sum_exp(row, tau) - row[y] / tau;
        let w = weights[i];
        if nll < cap {
            loss += w * nll;
            let g = grad.row_mut(i);
            g.copy_from_slice(row);
            crate::linalg::softmax_in_place(g, tau);
            g[y] -= 1.0;
            let coef = w / (b as f64 * tau);
            g.iter_mut().for_each(|x| *x *= coef);
        } else {
            loss += w * cap;
        }
    }
    (loss / b as f64, grad)
}

/// Fairness loss from probabilities, plus `∂L/∂scores` through the softmax.
fn reg_value_and_score_grad(probs: &Mat, tau: f64) -> (f64, Mat) {
    let b = probs.rows();
    let c = probs.cols();
    let mean = column_mean(probs);
    let value = fairness_value(&mean);
    // ∂L/∂p̄_j, zero where the floor is active
    let dmean: Vec<f64> = mean
        .iter()
        .map(|&m| {
            if m > LOG_FLOOR {
                -1.0 / (c as f64 * m)
            } else {
                0.0
            }
        })
        .collect();
    let mut grad = Mat::zeros(b, c);
    for i in 0..b {
        let p = probs.row(i);
        let inner: f64 = p.iter().zip(&dmean).map(|(a, g)| a * g).sum();
        let g = grad.row_mut(i);
        for k in 0..c {
            g[k] = p[k] * (dmean[k] - inner) / (b as f64 * tau);
        }
    }
    (value, grad)
}

/// The three non-learnable loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub st: f64,
    pub reg: f64,
    pub align: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Self {
            st: 1.0,
            reg: 1.0,
            align: 1.0,
        }
    }
}

impl Lambdas {
    pub fn all_zero(&self) -> bool {
        self.st == 0.0 && self.reg == 0.0 && self.align == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_st: f64,
    pub l_reg: f64,
    pub l_align: f64,
    pub total: f64,
    pub lambdas: Lambdas,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dz: Mat,
    pub d_adapter_scale: Vec<f64>,
    pub d_adapter_bias: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.dz.is_finite()
            && self
                .d_adapter_scale
                .iter()
                .chain(&self.d_adapter_bias)
                .all(|x| x.is_finite())
    }
}

/// One batch worth of supervision. `strong_rows` are raw (pre-adapter)
/// embeddings; labels and weights come from the weak view.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a> {
    pub strong_rows: &'a Mat,
    pub labels: &'a [usize],
    pub weights: &'a [f64],
    pub image_protos: &'a ImagePrototypes,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub logit: f64,
    pub align: f64,
}

/// Full objective and gradients for `Z` and, when `adapter` is given, its
/// scale and bias. Without an adapter the raw rows are used as features and
/// the adapter gradients are zero.
pub fn total_loss_and_grads(
    batch: BatchInputs<'_>,
    z: &TextualPrototypes,
    adapter: Option<&Adapter>,
    lambdas: Lambdas,
    temps: Temperatures,
) -> Result<(LossBreakdown, Gradients)> {
    check_temperature(temps.logit)?;
    check_temperature(temps.align)?;
    let rows = batch.strong_rows;
    if rows.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    check_batch(rows.rows(), batch.labels, batch.weights, z.n_classes())?;
    let d = z.dim();

    let fwd = adapter.map(|a| a.forward(rows)).transpose()?;
    let feats = fwd.as_ref().map_or(rows, |f| &f.out);

    let scores = feats.matmul_t(&z.z)?;
    let probs = scores.softmax_rows(temps.logit);
    let (l_st, g_st) = st_value_and_score_grad(&scores, batch.labels, batch.weights, temps.logit);
    let (l_reg, g_reg) = reg_value_and_score_grad(&probs, temps.logit);
    let (l_align, dz_align) = alignment_loss_and_grad(batch.image_protos, z, temps.align)?;

    let mut d_scores = g_st;
    d_scores.scale(lambdas.st);
    d_scores.add_scaled(&g_reg, lambdas.reg)?;

    // scores = feats · Zᵀ
    let mut dz = Mat::zeros(z.n_classes(), d);
    let mut d_feats = Mat::zeros(rows.rows(), d);
    for i in 0..rows.rows() {
        let f = feats.row(i);
        let ds = d_scores.row(i);
        for (c, &g) in ds.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (acc, x) in dz.row_mut(c).iter_mut().zip(f) {
                *acc += g * x;
            }
            for (acc, zc) in d_feats.row_mut(i).iter_mut().zip(z.z.row(c)) {
                *acc += g * zc;
            }
        }
    }
    dz.add_scaled(&dz_align, lambdas.align)?;

    let (d_adapter_scale, d_adapter_bias) = match (adapter, &fwd) {
        (Some(a), Some(f)) => a.backward(rows, f, &d_feats),
        _ => (vec![0.0; d], vec![0.0; d]),
    };

    let total = lambdas.st * l_st + lambdas.reg * l_reg + lambdas.align * l_align;
    let breakdown = LossBreakdown {
        l_st,
        l_reg,
        l_align,
        total,
        lambdas,
    };
    let grads = Gradients {
        dz,
        d_adapter_scale,
        d_adapter_bias,
    };
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("objective"));
    }
    Ok((breakdown, grads))
}
