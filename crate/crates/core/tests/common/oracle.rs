//! Loop-level reference implementations.
#![allow(clippy::needless_range_loop)]

pub const FLOOR: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

pub fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| ((s - mx) / tau).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

fn log_softmax_at(scores: &[f64], tau: f64, j: usize) -> f64 {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in scores {
        total += ((s - mx) / tau).exp();
    }
    (scores[j] - mx) / tau - total.ln()
}

/// Normalized mean of each class's prompt rows.
pub fn textual_prototypes(prompts: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    prompts
        .iter()
        .map(|set| {
            let d = set[0].len();
            let mut mean = vec![0.0; d];
            for p in set {
                for i in 0..d {
                    mean[i] += p[i] / set.len() as f64;
                }
            }
            normalized(&mean)
        })
        .collect()
}

pub fn adapt(rows: &[Vec<f64>], scale: &[f64], bias: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|x| {
            let u: Vec<f64> = (0..x.len()).map(|i| scale[i] * x[i] + bias[i]).collect();
            normalized(&u)
        })
        .collect()
}

pub fn argmax_labels(features: &[Vec<f64>], protos: &[Vec<f64>]) -> Vec<usize> {
    features
        .iter()
        .map(|f| first_argmax(&protos.iter().map(|z| dot(f, z)).collect::<Vec<_>>()))
        .collect()
}

/// Normalized class means; classes without members take `fallback[c]`.
pub fn class_means(
    features: &[Vec<f64>],
    labels: &[usize],
    fallback: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let c = fallback.len();
    let mut protos = Vec::new();
    let mut counts = Vec::new();
    for class in 0..c {
        let members: Vec<&Vec<f64>> = features
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l == class)
            .map(|(f, _)| f)
            .collect();
        counts.push(members.len());
        if members.is_empty() {
            protos.push(fallback[class].clone());
            continue;
        }
        let mut mean = vec![0.0; members[0].len()];
        for m in &members {
            for i in 0..mean.len() {
                mean[i] += m[i];
            }
        }
        protos.push(normalized(&mean));
    }
    (protos, counts)
}

/// Aligned rows for every batch and the running mean after each batch.
pub fn da_sequence(
    batches: &[Vec<Vec<f64>>],
    classes: usize,
    momentum: f64,
) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let mut mean = vec![1.0 / classes as f64; classes];
    let mut aligned_all = Vec::new();
    let mut means = Vec::new();
    for batch in batches {
        let mut aligned = Vec::new();
        for row in batch {
            let r: Vec<f64> = (0..classes).map(|j| row[j] / mean[j]).collect();
            let s: f64 = r.iter().sum();
            aligned.push(r.iter().map(|x| x / s).collect::<Vec<_>>());
        }
        for j in 0..classes {
            let mut bm = 0.0;
            for row in batch {
                bm += row[j];
            }
            bm /= batch.len() as f64;
            mean[j] = momentum * mean[j] + (1.0 - momentum) * bm;
        }
        aligned_all.push(aligned);
        means.push(mean.clone());
    }
    (aligned_all, means)
}

pub fn fuse(da: &[Vec<f64>], pv: &[Vec<f64>], beta: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut fused = Vec::new();
    let mut labels = Vec::new();
    for i in 0..da.len() {
        let row: Vec<f64> = (0..da[i].len())
            .map(|j| beta * da[i][j] + (1.0 - beta) * pv[i][j])
            .collect();
        labels.push(first_argmax(&row));
        fused.push(row);
    }
    (fused, labels)
}

pub fn weights(f: &[Vec<f64>], labels: &[usize], z: &[Vec<f64>], p: &[Vec<f64>]) -> Vec<f64> {
    let cos = |a: &[f64], b: &[f64]| dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    f.iter()
        .zip(labels)
        .map(|(row, &y)| cos(row, &z[y]).clamp(0.0, 1.0) * cos(row, &p[y]).clamp(0.0, 1.0))
        .collect()
}

pub fn confusion(pred: &[usize], truth: &[usize], c: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; c]; c];
    for t in 0..c {
        for p in 0..c {
            m[t][p] = (0..pred.len())
                .filter(|&i| truth[i] == t && pred[i] == p)
                .count() as u64;
        }
    }
    m
}

pub fn score_probs(features: &[Vec<f64>], protos: &[Vec<f64>], tau: f64) -> Vec<Vec<f64>> {
    features
        .iter()
        .map(|f| softmax(&protos.iter().map(|z| dot(f, z)).collect::<Vec<_>>(), tau))
        .collect()
}

/// Everything the objective depends on, flattened where a finite-difference
/// probe needs to perturb it.
#[derive(Clone)]
pub struct Problem {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub weights: Vec<f64>,
    pub z: Vec<f64>,
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub classes: usize,
    pub dim: usize,
    pub tau: f64,
    pub tau_align: f64,
}

impl Problem {
    pub fn z_rows(&self) -> Vec<Vec<f64>> {
        self.z.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }
}

/// `(self-training, fairness, alignment)` values.
pub fn objective_terms(pb: &Problem) -> [f64; 3] {
    let z = pb.z_rows();
    let feats = adapt(&pb.rows, &pb.scale, &pb.bias);
    let b = feats.len() as f64;
    let cap = -FLOOR.ln();

    let mut st = 0.0;
    let mut mean = vec![0.0; pb.classes];
    for (i, f) in feats.iter().enumerate() {
        let scores: Vec<f64> = z.iter().map(|zc| dot(f, zc)).collect();
        let nll = -log_softmax_at(&scores, pb.tau, pb.labels[i]);
        st += pb.weights[i] * nll.min(cap);
        let probs = softmax(&scores, pb.tau);
        for j in 0..pb.classes {
            mean[j] += probs[j] / b;
        }
    }
    st /= b;

    let mut reg = 0.0;
    for m in &mean {
        reg -= m.max(FLOOR).ln();
    }
    reg /= pb.classes as f64;

    let mut align = 0.0;
    for j in 0..pb.classes {
        let scores: Vec<f64> = z.iter().map(|zr| dot(&pb.p[j], zr)).collect();
        align -= log_softmax_at(&scores, pb.tau_align, j);
    }
    [st, reg, align]
}

pub fn objective(pb: &Problem, lambdas: [f64; 3]) -> f64 {
    let t = objective_terms(pb);
    lambdas[0] * t[0] + lambdas[1] * t[1] + lambdas[2] * t[2]
}
