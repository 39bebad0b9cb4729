//! Library-versus-oracle comparisons on randomized instances. Each returns
//! the worst absolute deviation found, or an error describing a structural
//! mismatch (different labels, counts or shapes).

use dualproto::eval::{confusion, proto_cosine_matrix};
use dualproto::linalg::Mat;
use dualproto::optim::Adapter;
use dualproto::prototypes::{
    init_image_prototypes, refresh_image_prototypes, zero_shot_labels, ImagePrototypes, MemoryBank,
    TextualPrototypes,
};
use dualproto::pseudo_label::{fuse_and_label, image_scores, sample_weights, text_scores, DAState};
use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    f32_rows, gaussian, mat, oracle, random_target, rng, rows_of, stochastic_rows, unit_rows,
};

pub type Check = Result<f64, String>;

fn worst(a: &[Vec<f64>], b: &[Vec<f64>]) -> Check {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()) {
        return Err("shape mismatch".into());
    }
    Ok(a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max))
}

fn same<T: PartialEq + std::fmt::Debug>(what: &str, a: &[T], b: &[T]) -> Result<(), String> {
    if a == b {
        Ok(())
    } else {
        Err(format!("{what} differ"))
    }
}

/// A random instance size with N ≤ 500.
fn sizes(seed: u64) -> (usize, usize, usize) {
    let mut r = rng(seed ^ 0x5eed);
    (
        r.random_range(20..=500),
        r.random_range(2..=24),
        r.random_range(2..=12),
    )
}

fn random_adapter(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> Adapter {
    Adapter {
        scale: gaussian(r, d).iter().map(|g| 1.0 + 0.3 * g).collect(),
        bias: gaussian(r, d).iter().map(|g| 0.1 * g).collect(),
    }
}

pub fn textual(seed: u64) -> Check {
    let (_, d, c) = sizes(seed);
    let k = 1 + (seed as usize % 5);
    let data = random_target(seed, c, d, c, k, 1);
    let lib = TextualPrototypes::from_prompts(&data).map_err(|e| e.to_string())?;
    let prompts = f32_rows(data.prompts_raw(), d);
    let sets: Vec<Vec<Vec<f64>>> = prompts.chunks(k).map(<[Vec<f64>]>::to_vec).collect();
    worst(&rows_of(&lib.z), &oracle::textual_prototypes(&sets))
}

pub fn image_init(seed: u64) -> Check {
    let (n, d, c) = sizes(seed);
    let data = random_target(seed, n, d, c, 3, 1);
    let mut r = rng(seed);
    let adapter = random_adapter(&mut r, d);
    let z = TextualPrototypes::from_prompts(&data).map_err(|e| e.to_string())?;
    let (protos, bank) =
        init_image_prototypes(&data.weak_matrix(), &adapter, &z).map_err(|e| e.to_string())?;

    let weak = f32_rows(data.weak_raw(), d);
    let feats = oracle::adapt(&weak, &adapter.scale, &adapter.bias);
    let z_rows = rows_of(&z.z);
    let labels = oracle::argmax_labels(&feats, &z_rows);
    let (p, counts) = oracle::class_means(&feats, &labels, &z_rows);
    same("bank labels", bank.labels(), &labels)?;
    same("class counts", &protos.counts, &counts)?;
    let dp = worst(&rows_of(&protos.p), &p)?;
    let df = worst(&rows_of(bank.features()), &feats)?;
    Ok(dp.max(df))
}

/// Fills a bank through shuffled batch writes (some slots written twice),
/// then rebuilds the prototypes from it.
pub fn image_refresh(seed: u64) -> Check {
    let (n, d, c) = sizes(seed);
    let mut r = rng(seed);
    let feats = unit_rows(&mut r, n, d);
    let skew = r.random_range(1..=c);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..skew)).collect();
    let prev_rows = unit_rows(&mut r, c, d);
    let prev = ImagePrototypes {
        p: mat(&prev_rows),
        counts: vec![0; c],
    };

    let mut bank = MemoryBank::empty(n, d, c);
    let mut order: Vec<usize> = (0..n).collect();
    // a stale pass with junk labels, then the real one
    for pass in 0..2 {
        order.shuffle(&mut r);
        for chunk in order.chunks(r.random_range(1..=n)) {
            let rows: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| feats[(i + pass + 1) % n].clone())
                .collect();
            let lab: Vec<usize> = chunk.iter().map(|&i| (labels[i] + 1 + pass) % c).collect();
            let (rows, lab) = if pass == 1 {
                (
                    chunk.iter().map(|&i| feats[i].clone()).collect(),
                    chunk.iter().map(|&i| labels[i]).collect(),
                )
            } else {
                (rows, lab)
            };
            bank.update(chunk, &mat(&rows), &lab)
                .map_err(|e| e.to_string())?;
        }
    }
    let lib = refresh_image_prototypes(&bank, &prev).map_err(|e| e.to_string())?;
    let (p, counts) = oracle::class_means(&feats, &labels, &prev_rows);
    same("class counts", &lib.counts, &counts)?;
    worst(&rows_of(&lib.p), &p)
}

pub fn da_sequence(seed: u64) -> Check {
    let (_, _, c) = sizes(seed);
    let mut r = rng(seed);
    let momentum = [0.0, 0.5, 0.9, 0.99, 1.0][seed as usize % 5];
    let batches: Vec<Vec<Vec<f64>>> = (0..r.random_range(1..=25))
        .map(|_| {
            let b = r.random_range(1..=64);
            stochastic_rows(&mut r, b, c)
        })
        .collect();
    let (want_rows, want_means) = oracle::da_sequence(&batches, c, momentum);
    let mut state = DAState::uniform(c, momentum);
    let mut dev = 0.0f64;
    for (t, batch) in batches.iter().enumerate() {
        let (aligned, next) = state.align(&mat(batch)).map_err(|e| e.to_string())?;
        dev = dev.max(worst(&rows_of(&aligned), &want_rows[t])?);
        dev = dev.max(worst(
            std::slice::from_ref(&next.running_mean),
            std::slice::from_ref(&want_means[t]),
        )?);
        state = next;
    }
    Ok(dev)
}

pub fn fusion(seed: u64) -> Check {
    let (n, _, c) = sizes(seed);
    let mut r = rng(seed);
    let da = stochastic_rows(&mut r, n, c);
    let pv = stochastic_rows(&mut r, n, c);
    let beta = r.random::<f64>();
    let (fused, labels) = fuse_and_label(&mat(&da), &mat(&pv), beta).map_err(|e| e.to_string())?;
    let (want, want_labels) = oracle::fuse(&da, &pv, beta);
    same("fused labels", &labels, &want_labels)?;
    worst(&rows_of(&fused), &want)
}

pub fn weights(seed: u64) -> Check {
    let (n, d, c) = sizes(seed);
    let mut r = rng(seed);
    let f = unit_rows(&mut r, n, d);
    let z = unit_rows(&mut r, c, d);
    let p = unit_rows(&mut r, c, d);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let lib = sample_weights(
        &mat(&f),
        &labels,
        &TextualPrototypes { z: mat(&z) },
        &ImagePrototypes {
            p: mat(&p),
            counts: vec![1; c],
        },
    )
    .map_err(|e| e.to_string())?;
    worst(&[lib], &[oracle::weights(&f, &labels, &z, &p)])
}

pub fn confusion_matrix(seed: u64) -> Check {
    let (n, _, c) = sizes(seed);
    let mut r = rng(seed);
    let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    let pred: Vec<usize> = truth
        .iter()
        .map(|&t| {
            if r.random::<f64>() < 0.6 {
                t
            } else {
                r.random_range(0..c)
            }
        })
        .collect();
    let lib = confusion(&pred, &truth, c).map_err(|e| e.to_string())?;
    same(
        "confusion counts",
        &lib.counts,
        &oracle::confusion(&pred, &truth, c),
    )?;
    Ok(0.0)
}

/// Text and image score softmaxes, zero-shot labels and the prototype cosine
/// matrix.
pub fn scores(seed: u64) -> Check {
    let (n, d, c) = sizes(seed);
    let mut r = rng(seed);
    let f = unit_rows(&mut r, n, d);
    let z = unit_rows(&mut r, c, d);
    let p = unit_rows(&mut r, c, d);
    let tau = [0.01, 0.05, 0.5, 1.0][seed as usize % 4];
    let zt = TextualPrototypes { z: mat(&z) };
    let pt = ImagePrototypes {
        p: mat(&p),
        counts: vec![1; c],
    };
    let fm: Mat = mat(&f);
    let mut dev = worst(
        &rows_of(&text_scores(&fm, &zt, tau).map_err(|e| e.to_string())?),
        &oracle::score_probs(&f, &z, tau),
    )?;
    dev = dev.max(worst(
        &rows_of(&image_scores(&fm, &pt, tau).map_err(|e| e.to_string())?),
        &oracle::score_probs(&f, &p, tau),
    )?);
    same(
        "zero-shot labels",
        &zero_shot_labels(&fm, &zt).map_err(|e| e.to_string())?,
        &oracle::argmax_labels(&f, &z),
    )?;
    let cos = proto_cosine_matrix(&pt, &zt).map_err(|e| e.to_string())?;
    let want: Vec<Vec<f64>> = p
        .iter()
        .map(|pi| {
            z.iter()
                .map(|zj| pi.iter().zip(zj).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    dev = dev.max(worst(&rows_of(&cos.matrix), &want)?);
    let diag = (0..c).map(|j| want[j][j]).sum::<f64>() / c as f64;
    Ok(dev.max((cos.diag_mean - diag).abs()))
}

pub type OracleCheck = fn(u64) -> Check;

pub const ALL: [(&str, OracleCheck); 8] = [
    ("textual prototypes", textual),
    ("image prototype init", image_init),
    ("image prototype refresh", image_refresh),
    ("distribution alignment sequence", da_sequence),
    ("fusion", fusion),
    ("sample weights", weights),
    ("confusion matrix", confusion_matrix),
    ("scores and cosine matrix", scores),
];
