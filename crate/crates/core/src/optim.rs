//! Learnable parameters outside the prototypes, the decoupled-weight-decay
//! optimizer, and the cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place, Mat};

/// Per-dimension affine map on frozen embeddings, followed by L2
/// normalization: `out = normalize(scale ⊙ x + bias)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Forward output plus what the backward pass needs.
#[derive(Debug, Clone)]
pub struct AdapterForward {
    pub out: Mat,
    pre_norms: Vec<f64>,
}

const MIN_PRE_NORM: f64 = 1e-8;

impl Adapter {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn apply(&self, rows: &Mat) -> Result<Mat> {
        Ok(self.forward(rows)?.out)
    }

    pub fn forward(&self, rows: &Mat) -> Result<AdapterForward> {
        if rows.cols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "adapter of dim {} applied to {} columns",
                self.dim(),
                rows.cols()
            )));
        }
        let mut out = Mat::zeros(rows.rows(), rows.cols());
        let mut pre_norms = Vec::with_capacity(rows.rows());
        for i in 0..rows.rows() {
            let dst = out.row_mut(i);
            for (((o, x), s), b) in dst
                .iter_mut()
                .zip(rows.row(i))
                .zip(&self.scale)
                .zip(&self.bias)
            {
                *o = s * x + b;
            }
            let n = normalize_in_place(dst);
            if n.is_nan() || n < MIN_PRE_NORM {
                return Err(Error::DegenerateOutput(i));
            }
            pre_norms.push(n);
        }
        Ok(AdapterForward { out, pre_norms })
    }

    /// Pulls `d_out = ∂L/∂out` back to `(∂L/∂scale, ∂L/∂bias)`.
    pub fn backward(&self, rows: &Mat, fwd: &AdapterForward, d_out: &Mat) -> (Vec<f64>, Vec<f64>) {
        let d = self.dim();
        let mut d_scale = vec![0.0; d];
        let mut d_bias = vec![0.0; d];
        let mut d_pre = vec![0.0; d];
        for i in 0..rows.rows() {
            let a = fwd.out.row(i);
            let g = d_out.row(i);
            // Jacobian of u ↦ u/|u| is (I − a aᵀ)/|u|
            let proj = dot(a, g);
            let inv = 1.0 / fwd.pre_norms[i];
            for j in 0..d {
                d_pre[j] = (g[j] - a[j] * proj) * inv;
            }
            let x = rows.row(i);
            for j in 0..d {
                d_scale[j] += d_pre[j] * x[j];
                d_bias[j] += d_pre[j];
            }
        }
        (d_scale, d_bias)
    }

    pub fn is_finite(&self) -> bool {
        self.scale.iter().chain(&self.bias).all(|x| x.is_finite())
    }
}

/// `lr_base · ½(1 + cos(π t / T))`, no warmup.
pub fn cosine_lr(step: usize, total_steps: usize, lr_base: f64) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr_base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamWHyper,
}

impl AdamWState {
    pub fn new(len: usize, hyper: AdamWHyper) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            hyper,
        }
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer state {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient("optimizer input"));
        }
        let AdamWHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.hyper;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
        Ok(())
    }
}
