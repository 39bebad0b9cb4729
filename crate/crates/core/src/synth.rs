//! Synthetic dual-modality datasets whose textual anchors are offset from the
//! visual clusters they describe.
//!
//! Geometry, per class `j` with visual anchor `μ_j`:
//!
//! * weak view: `normalize(μ_j + σ_v·η)`
//! * strong view: `normalize(weak + σ_s·η')`
//! * prompt: `normalize(μ_j + γ·(g + λ·μ_{(j+1) mod C}) + σ_t·η'')`
//!
//! `η` are isotropic Gaussians with unit per-coordinate variance, `g` is one
//! unit vector shared by every class, and `λ` (`gap_lean`) tilts each text
//! anchor toward a neighbouring class. A purely shared offset barely moves
//! the cosine argmax; the lean is what makes zero-shot labels go wrong.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place};
use crate::store::{EmbeddingDataset, TargetData};

const MAX_ANCHOR_ATTEMPTS: usize = 1000;
const MAX_ANCHOR_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub samples: usize,
    pub prompts_per_class: usize,
    pub strong_views: usize,
    pub intra_class_noise: f64,
    pub prompt_noise: f64,
    pub modality_gap: f64,
    pub gap_lean: f64,
    pub strong_view_noise: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_balance: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 64,
            samples: 2000,
            prompts_per_class: 7,
            strong_views: 4,
            intra_class_noise: 0.25,
            prompt_noise: 0.05,
            modality_gap: 0.8,
            gap_lean: 1.0,
            strong_view_noise: 0.1,
            class_balance: None,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.samples == 0 {
            return bad("samples must be positive".into());
        }
        if self.classes < 2 || self.classes > self.samples {
            return bad(format!(
                "need 2 <= classes <= samples, got classes={} samples={}",
                self.classes, self.samples
            ));
        }
        if self.dim < 2 || self.prompts_per_class == 0 || self.strong_views == 0 {
            return bad("dim >= 2, prompts_per_class >= 1 and strong_views >= 1 required".into());
        }
        for (name, v) in [
            ("intra_class_noise", self.intra_class_noise),
            ("prompt_noise", self.prompt_noise),
            ("strong_view_noise", self.strong_view_noise),
            ("modality_gap", self.modality_gap),
            ("gap_lean", self.gap_lean),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if let Some(w) = &self.class_balance {
            if w.len() != self.classes || w.iter().any(|&x| x.is_nan() || x < 0.0) {
                return bad("class_balance needs one non-negative weight per class".into());
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return bad("class_balance weights must sum to 1".into());
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let mut v = gaussian(rng, dim);
        if normalize_in_place(&mut v) > 1e-12 {
            return v;
        }
    }
}

fn max_pairwise_cosine(vs: &[Vec<f64>]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            worst = worst.max(dot(&vs[i], &vs[j]));
        }
    }
    worst
}

/// Greedy farthest-point selection from a pool of random unit vectors,
/// retried until every pair has cosine at most 0.5.
fn separated_anchors(rng: &mut ChaCha8Rng, classes: usize, dim: usize) -> Result<Vec<Vec<f64>>> {
    let pool_size = (4 * classes).max(32);
    for _ in 0..MAX_ANCHOR_ATTEMPTS {
        let pool: Vec<Vec<f64>> = (0..pool_size).map(|_| random_unit(rng, dim)).collect();
        let mut used = vec![false; pool_size];
        let mut chosen = vec![pool[0].clone()];
        used[0] = true;
        while chosen.len() < classes {
            let (best, _) = pool
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, cand)| {
                    let closest = chosen
                        .iter()
                        .map(|c| dot(c, cand))
                        .fold(f64::NEG_INFINITY, f64::max);
                    (i, closest)
                })
                .fold((usize::MAX, f64::INFINITY), |acc, x| {
                    if x.1 < acc.1 {
                        x
                    } else {
                        acc
                    }
                });
            used[best] = true;
            chosen.push(pool[best].clone());
        }
        if max_pairwise_cosine(&chosen) <= MAX_ANCHOR_COSINE {
            return Ok(chosen);
        }
    }
    Err(Error::InfeasibleSeparation { classes, dim })
}

fn push_normalized(dst: &mut Vec<f32>, mut v: Vec<f64>) {
    normalize_in_place(&mut v);
    dst.extend(v.iter().map(|&x| x as f32));
}

pub fn generate(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let (c, d, n) = (cfg.classes, cfg.dim, cfg.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let anchors = separated_anchors(&mut rng, c, d)?;
    let gap = random_unit(&mut rng, d);

    let labels: Vec<usize> = match &cfg.class_balance {
        Some(w) => {
            let dist = WeightedIndex::new(w)
                .map_err(|e| Error::InvalidConfig(format!("class_balance: {e}")))?;
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        None => (0..n).map(|_| rng.random_range(0..c)).collect(),
    };

    let mut weak = Vec::with_capacity(n * d);
    let mut strong = Vec::with_capacity(n * cfg.strong_views * d);
    for &y in &labels {
        let noise = gaussian(&mut rng, d);
        let mut w: Vec<f64> = anchors[y]
            .iter()
            .zip(&noise)
            .map(|(a, e)| a + cfg.intra_class_noise * e)
            .collect();
        normalize_in_place(&mut w);
        for _ in 0..cfg.strong_views {
            let noise = gaussian(&mut rng, d);
            let s = w
                .iter()
                .zip(&noise)
                .map(|(a, e)| a + cfg.strong_view_noise * e)
                .collect();
            push_normalized(&mut strong, s);
        }
        weak.extend(w.iter().map(|&x| x as f32));
    }

    let mut prompts = Vec::with_capacity(c * cfg.prompts_per_class * d);
    for j in 0..c {
        let neighbour = &anchors[(j + 1) % c];
        let offset: Vec<f64> = gap
            .iter()
            .zip(neighbour)
            .map(|(g, nb)| cfg.modality_gap * (g + cfg.gap_lean * nb))
            .collect();
        for _ in 0..cfg.prompts_per_class {
            let noise = gaussian(&mut rng, d);
            let v = anchors[j]
                .iter()
                .zip(&offset)
                .zip(&noise)
                .map(|((a, o), e)| a + o + cfg.prompt_noise * e)
                .collect();
            push_normalized(&mut prompts, v);
        }
    }

    let names = (0..c).map(|j| format!("class_{j:02}")).collect();
    let target = TargetData::new(
        n,
        d,
        c,
        cfg.prompts_per_class,
        cfg.strong_views,
        weak,
        strong,
        prompts,
        names,
    )?;
    EmbeddingDataset::new(target, Some(labels))
}
