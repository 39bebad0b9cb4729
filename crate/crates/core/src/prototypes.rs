//! Textual and image prototypes, and the per-sample memory bank that feeds
//! the image prototypes between epochs.

use crate::error::{Error, Result};
use crate::linalg::{normalize_in_place, Mat};
use crate::optim::Adapter;
use crate::store::TargetData;

const MIN_MEAN_NORM: f64 = 1e-8;

/// Learnable class prototypes built from prompt embeddings. Rows are unit
/// norm; this is the only artifact inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TextualPrototypes {
    pub z: Mat,
}

/// Non-parametric class means over the memory bank.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePrototypes {
    pub p: Mat,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    features: Mat,
    labels: Vec<usize>,
    filled: Vec<bool>,
    n_classes: usize,
}

impl TextualPrototypes {
    /// Mean of each class's prompt embeddings, re-normalized.
    pub fn from_prompts(data: &TargetData) -> Result<Self> {
        let classes: Vec<Mat> = (0..data.n_classes())
            .map(|c| data.class_prompts(c))
            .collect();
        Self::from_prompt_sets(&classes)
    }

    /// One `k×d` matrix per class.
    pub fn from_prompt_sets(classes: &[Mat]) -> Result<Self> {
        let d = classes.first().map_or(0, Mat::cols);
        let mut z = Mat::zeros(classes.len(), d);
        for (c, prompts) in classes.iter().enumerate() {
            if prompts.cols() != d || prompts.rows() == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "class {c} prompts are {}x{}",
                    prompts.rows(),
                    prompts.cols()
                )));
            }
            let row = z.row_mut(c);
            for p in prompts.iter_rows() {
                for (acc, x) in row.iter_mut().zip(p) {
                    *acc += x;
                }
            }
            let k = prompts.rows() as f64;
            row.iter_mut().for_each(|x| *x /= k);
            if normalize_in_place(row) < MIN_MEAN_NORM {
                return Err(Error::ZeroMeanVector { class: c });
            }
        }
        Ok(Self { z })
    }

    pub fn n_classes(&self) -> usize {
        self.z.rows()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn renormalize(&mut self) {
        self.z.normalize_rows();
    }
}

/// Zero-shot label for every row: the nearest textual prototype by dot
/// product, ties to the lowest class.
pub fn zero_shot_labels(features: &Mat, z: &TextualPrototypes) -> Result<Vec<usize>> {
    Ok(features.matmul_t(&z.z)?.argmax_rows())
}

/// Normalized per-class means of `features` grouped by `labels`. Classes with
/// no members (or a vanishing mean) take the matching row of `fallback`.
fn class_means(
    features: &Mat,
    labels: &[usize],
    n_classes: usize,
    fallback: &Mat,
) -> ImagePrototypes {
    let d = features.cols();
    let mut sums = Mat::zeros(n_classes, d);
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in features.iter_rows().zip(labels) {
        counts[l] += 1;
        for (acc, x) in sums.row_mut(l).iter_mut().zip(row) {
            *acc += x;
        }
    }
    for (c, &count) in counts.iter().enumerate() {
        let row = sums.row_mut(c);
        if count == 0 {
            row.copy_from_slice(fallback.row(c));
            continue;
        }
        row.iter_mut().for_each(|x| *x /= count as f64);
        if normalize_in_place(row) < MIN_MEAN_NORM {
            row.copy_from_slice(fallback.row(c));
        }
    }
    ImagePrototypes { p: sums, counts }
}

/// Initial image prototypes and a fully populated memory bank, both derived
/// from zero-shot labels of the adapted weak views.
pub fn init_image_prototypes(
    weak: &Mat,
    adapter: &Adapter,
    z: &TextualPrototypes,
) -> Result<(ImagePrototypes, MemoryBank)> {
    let features = adapter.apply(weak)?;
    let labels = zero_shot_labels(&features, z)?;
    let protos = class_means(&features, &labels, z.n_classes(), &z.z);
    let n = features.rows();
    let bank = MemoryBank {
        features,
        labels,
        filled: vec![true; n],
        n_classes: z.n_classes(),
    };
    Ok((protos, bank))
}

impl ImagePrototypes {
    pub fn n_classes(&self) -> usize {
        self.p.rows()
    }
}

/// Rebuilds image prototypes from the memory bank. Empty classes keep the
/// row from `prev`.
pub fn refresh_image_prototypes(
    bank: &MemoryBank,
    prev: &ImagePrototypes,
) -> Result<ImagePrototypes> {
    if let Some(slot) = bank.filled.iter().position(|f| !f) {
        return Err(Error::UnfilledSlot(slot));
    }
    if prev.p.rows() != bank.n_classes || prev.p.cols() != bank.features.cols() {
        return Err(Error::ShapeMismatch(
            "previous prototypes do not match bank".into(),
        ));
    }
    Ok(class_means(
        &bank.features,
        &bank.labels,
        bank.n_classes,
        &prev.p,
    ))
}

impl MemoryBank {
    pub fn empty(n: usize, dim: usize, n_classes: usize) -> Self {
        Self {
            features: Mat::zeros(n, dim),
            labels: vec![0; n],
            filled: vec![false; n],
            n_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.filled.iter().all(|&f| f)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn get(&self, slot: usize) -> Result<(&[f64], usize)> {
        if slot >= self.len() {
            return Err(Error::IndexOutOfRange {
                index: slot,
                len: self.len(),
            });
        }
        if !self.filled[slot] {
            return Err(Error::UnfilledSlot(slot));
        }
        Ok((self.features.row(slot), self.labels[slot]))
    }

    /// Overwrites exactly the slots in `indices`. Validates everything before
    /// writing anything.
    pub fn update(&mut self, indices: &[usize], features: &Mat, labels: &[usize]) -> Result<()> {
        if features.rows() != indices.len() || labels.len() != indices.len() {
            return Err(Error::LengthMismatch {
                left: indices.len(),
                right: features.rows().min(labels.len()),
            });
        }
        if !indices.is_empty() && features.cols() != self.features.cols() {
            return Err(Error::ShapeMismatch(
                "feature width differs from bank".into(),
            ));
        }
        if let Some(&index) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::IndexOutOfRange {
                index,
                len: self.len(),
            });
        }
        if let Some((position, &label)) = labels
            .iter()
            .enumerate()
            .find(|(_, &l)| l >= self.n_classes)
        {
            return Err(Error::LabelOutOfRange {
                position,
                label,
                classes: self.n_classes,
            });
        }
        for (k, &slot) in indices.iter().enumerate() {
            self.features.row_mut(slot).copy_from_slice(features.row(k));
            self.labels[slot] = labels[k];
            self.filled[slot] = true;
        }
        Ok(())
    }
}
