//! Helpers shared by the integration tests. Everything in `oracle` is written
//! with plain nested loops over `Vec<f64>` and never calls into the library's
//! numeric code.
#![allow(dead_code)]

pub mod checks;
pub mod oracle;

use dualproto::linalg::Mat;
use dualproto::store::TargetData;
use dualproto::synth::SynthConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut v = gaussian(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| unit(rng, d)).collect()
}

pub fn mat(rows: &[Vec<f64>]) -> Mat {
    Mat::from_rows(rows).unwrap()
}

pub fn rows_of(m: &Mat) -> Vec<Vec<f64>> {
    m.iter_rows().map(<[f64]>::to_vec).collect()
}

pub fn f32_rows(m: &[f32], d: usize) -> Vec<Vec<f64>> {
    m.chunks(d)
        .map(|r| r.iter().map(|&x| f64::from(x)).collect())
        .collect()
}

/// A random row-stochastic matrix with strictly positive entries.
pub fn stochastic_rows(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let r: Vec<f64> = (0..c).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Unlabeled target data with random unit rows everywhere.
pub fn random_target(seed: u64, n: usize, d: usize, c: usize, k: usize, v: usize) -> TargetData {
    let mut r = rng(seed);
    let mut flat = |rows: usize| -> Vec<f32> {
        unit_rows(&mut r, rows, d)
            .into_iter()
            .flatten()
            .map(|x| x as f32)
            .collect()
    };
    let weak = flat(n);
    let strong = flat(n * v);
    let prompts = flat(c * k);
    let names = (0..c).map(|j| format!("c{j}")).collect();
    TargetData::new(n, d, c, k, v, weak, strong, prompts, names).unwrap()
}

/// The reference synthetic fixture: C=10, d=64, N=2000, gap 0.8, weak-view
/// noise 0.25, seed 7.
pub fn fixture_config() -> SynthConfig {
    SynthConfig {
        classes: 10,
        dim: 64,
        samples: 2000,
        modality_gap: 0.8,
        intra_class_noise: 0.25,
        seed: 7,
        ..SynthConfig::default()
    }
}

/// Zero-shot accuracy of the reference fixture, recorded when the fixture
/// was first generated (1402 of 2000 samples).
pub const FIXTURE_ZERO_SHOT: f64 = 0.701;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vectors are (numerically) zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub const GRAD_C: usize = 6;
pub const GRAD_D: usize = 16;
pub const GRAD_B: usize = 8;
pub const FD_STEP: f64 = 1e-5;

/// A random gradient-check instance at the default temperatures.
pub fn random_problem(seed: u64) -> oracle::Problem {
    let (c, d, b) = (GRAD_C, GRAD_D, GRAD_B);
    let mut r = rng(seed);
    let rows = unit_rows(&mut r, b, d);
    let z = unit_rows(&mut r, c, d).concat();
    let scale = gaussian(&mut r, d).iter().map(|g| 1.0 + 0.2 * g).collect();
    let bias = gaussian(&mut r, d).iter().map(|g| 0.05 * g).collect();
    let p = unit_rows(&mut r, c, d);
    let labels = (0..b).map(|_| r.random_range(0..c)).collect();
    let weights = (0..b).map(|_| r.random::<f64>()).collect();
    oracle::Problem {
        rows,
        labels,
        weights,
        z,
        scale,
        bias,
        p,
        classes: c,
        dim: d,
        tau: 0.01,
        tau_align: 0.05,
    }
}

pub struct LibraryEval {
    pub total: f64,
    pub terms: [f64; 3],
    pub dz: Vec<f64>,
    pub d_scale: Vec<f64>,
    pub d_bias: Vec<f64>,
}

pub fn library_eval(pb: &oracle::Problem, lambdas: [f64; 3]) -> LibraryEval {
    use dualproto::objectives::{total_loss_and_grads, BatchInputs, Lambdas, Temperatures};
    use dualproto::optim::Adapter;
    use dualproto::prototypes::{ImagePrototypes, TextualPrototypes};

    let strong = mat(&pb.rows);
    let protos = ImagePrototypes {
        p: mat(&pb.p),
        counts: vec![1; pb.classes],
    };
    let z = TextualPrototypes {
        z: Mat::from_vec(pb.classes, pb.dim, pb.z.clone()).unwrap(),
    };
    let adapter = Adapter {
        scale: pb.scale.clone(),
        bias: pb.bias.clone(),
    };
    let (loss, g) = total_loss_and_grads(
        BatchInputs {
            strong_rows: &strong,
            labels: &pb.labels,
            weights: &pb.weights,
            image_protos: &protos,
        },
        &z,
        Some(&adapter),
        Lambdas {
            st: lambdas[0],
            reg: lambdas[1],
            align: lambdas[2],
        },
        Temperatures {
            logit: pb.tau,
            align: pb.tau_align,
        },
    )
    .unwrap();
    LibraryEval {
        total: loss.total,
        terms: [loss.l_st, loss.l_reg, loss.l_align],
        dz: g.dz.into_vec(),
        d_scale: g.d_adapter_scale,
        d_bias: g.d_adapter_bias,
    }
}

/// The objectives under test, as lambda vectors.
pub const OBJECTIVES: [(&str, [f64; 3]); 4] = [
    ("self-training", [1.0, 0.0, 0.0]),
    ("fairness", [0.0, 1.0, 0.0]),
    ("alignment", [0.0, 0.0, 1.0]),
    ("combined", [1.0, 1.0, 1.0]),
];

/// Worst blockwise relative error between analytic and numeric gradients for
/// one objective at one point: `[Z, scale, bias]`.
pub fn gradient_errors(pb: &oracle::Problem, lambdas: [f64; 3]) -> [f64; 3] {
    let lib = library_eval(pb, lambdas);
    let num_z = central_diff(&pb.z, FD_STEP, |z| {
        let mut q = pb.clone();
        q.z = z.to_vec();
        oracle::objective(&q, lambdas)
    });
    let num_s = central_diff(&pb.scale, FD_STEP, |s| {
        let mut q = pb.clone();
        q.scale = s.to_vec();
        oracle::objective(&q, lambdas)
    });
    let num_b = central_diff(&pb.bias, FD_STEP, |b| {
        let mut q = pb.clone();
        q.bias = b.to_vec();
        oracle::objective(&q, lambdas)
    });
    [
        rel_err(&lib.dz, &num_z),
        rel_err(&lib.d_scale, &num_s),
        rel_err(&lib.d_bias, &num_b),
    ]
}

/// A quick synthetic problem for trainer and CLI tests.
pub fn small_config() -> SynthConfig {
    SynthConfig {
        classes: 5,
        dim: 16,
        samples: 300,
        prompts_per_class: 3,
        strong_views: 2,
        seed: 11,
        ..SynthConfig::default()
    }
}

pub fn small_train() -> dualproto::trainer::TrainConfig {
    dualproto::trainer::TrainConfig {
        epochs: 6,
        batch_size: 32,
        ..Default::default()
    }
}
