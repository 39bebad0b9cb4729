//! Frozen-embedding datasets: in-memory model, the `DPAE` binary format with
//! its JSON sidecar, and deterministic epoch batching.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "DPAE" | u32 version=1 | u32 N | u32 d | u32 C | u32 k | u32 V | u32 flags
//! f32 weak[N*d] | f32 strong[N*V*d] | f32 prompt[C*k*d]
//! [u32 labels[N]   if flags bit0]
//! C x (u32 byte_len | utf-8 class name)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{checked_len, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::{norm, Mat};

pub const DATASET_MAGIC: &[u8; 4] = b"DPAE";
pub const DATASET_VERSION: u32 = 1;
const FLAG_HAS_LABELS: u32 = 1;

/// Rows must already be within this distance of unit norm to be accepted.
pub const LOAD_NORM_TOLERANCE: f64 = 1e-3;
/// Rows further than this from unit norm are re-normalized on load.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// Everything the adaptation loop is allowed to see: embeddings and class
/// metadata, never ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    prompts_per_class: usize,
    views: usize,
    weak: Vec<f32>,
    strong: Vec<f32>,
    prompts: Vec<f32>,
    class_names: Vec<String>,
}

/// Hidden evaluation labels. Only the evaluator consumes these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth(Vec<usize>);

impl GroundTruth {
    pub fn new(labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::LabelOutOfRange {
                position,
                label,
                classes: n_classes,
            });
        }
        Ok(Self(labels))
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub target: TargetData,
    pub truth: Option<GroundTruth>,
}

impl TargetData {
    /// Builds and validates a dataset from raw arrays. Rows are checked and
    /// re-normalized exactly as on load.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_samples: usize,
        dim: usize,
        n_classes: usize,
        prompts_per_class: usize,
        views: usize,
        weak: Vec<f32>,
        strong: Vec<f32>,
        prompts: Vec<f32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        check_shape(n_samples, dim, n_classes, prompts_per_class, views)?;
        let expect = |name: &str, got: usize, dims: &[usize]| -> Result<()> {
            let want = checked_len(dims, name)?;
            if got != want {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {got} values, expected {want}"
                )));
            }
            Ok(())
        };
        expect("weak", weak.len(), &[n_samples, dim])?;
        expect("strong", strong.len(), &[n_samples, views, dim])?;
        expect(
            "prompt",
            prompts.len(),
            &[n_classes, prompts_per_class, dim],
        )?;
        if class_names.len() != n_classes {
            return Err(Error::DimensionMismatch(format!(
                "{} class names for {n_classes} classes",
                class_names.len()
            )));
        }
        let mut out = Self {
            n_samples,
            dim,
            n_classes,
            prompts_per_class,
            views,
            weak,
            strong,
            prompts,
            class_names,
        };
        renormalize_rows(&mut out.weak, dim, "weak")?;
        renormalize_rows(&mut out.strong, dim, "strong")?;
        renormalize_rows(&mut out.prompts, dim, "prompt")?;
        Ok(out)
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn prompts_per_class(&self) -> usize {
        self.prompts_per_class
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn weak_raw(&self) -> &[f32] {
        &self.weak
    }

    pub fn strong_raw(&self) -> &[f32] {
        &self.strong
    }

    pub fn prompts_raw(&self) -> &[f32] {
        &self.prompts
    }

    pub fn weak_row(&self, i: usize) -> &[f32] {
        &self.weak[i * self.dim..(i + 1) * self.dim]
    }

    pub fn strong_row(&self, i: usize, view: usize) -> &[f32] {
        let start = (i * self.views + view) * self.dim;
        &self.strong[start..start + self.dim]
    }

    /// All weak-view rows widened to `f64`.
    pub fn weak_matrix(&self) -> Mat {
        Mat::from_f32(self.n_samples, self.dim, &self.weak).expect("validated shape")
    }

    /// Prompt embeddings of one class as a `k×d` matrix.
    pub fn class_prompts(&self, class: usize) -> Mat {
        let stride = self.prompts_per_class * self.dim;
        Mat::from_f32(
            self.prompts_per_class,
            self.dim,
            &self.prompts[class * stride..(class + 1) * stride],
        )
        .expect("validated shape")
    }

    /// Strong view used for `sample` in `epoch`.
    pub fn view_for(&self, sample: usize, epoch: usize) -> usize {
        (epoch + sample) % self.views
    }
}

fn check_shape(n: usize, d: usize, c: usize, k: usize, v: usize) -> Result<()> {
    if c < 2 || n < c || d < 2 || k < 1 || v < 1 {
        return Err(Error::DimensionMismatch(format!(
            "need N >= C >= 2, d >= 2, k >= 1, V >= 1; got N={n}, C={c}, d={d}, k={k}, V={v}"
        )));
    }
    Ok(())
}

fn renormalize_rows(data: &mut [f32], dim: usize, array: &'static str) -> Result<()> {
    for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
        let wide: Vec<f64> = chunk.iter().map(|&x| f64::from(x)).collect();
        let n = norm(&wide);
        if !n.is_finite() || (n - 1.0).abs() > LOAD_NORM_TOLERANCE {
            return Err(Error::NormViolation {
                array,
                row,
                norm: n,
            });
        }
        if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
            for (dst, x) in chunk.iter_mut().zip(wide) {
                *dst = (x / n) as f32;
            }
        }
    }
    Ok(())
}

impl EmbeddingDataset {
    pub fn new(target: TargetData, labels: Option<Vec<usize>>) -> Result<Self> {
        let truth = match labels {
            Some(l) => {
                if l.len() != target.n_samples {
                    return Err(Error::DimensionMismatch(format!(
                        "{} labels for {} samples",
                        l.len(),
                        target.n_samples
                    )));
                }
                Some(GroundTruth::new(l, target.n_classes)?)
            }
            None => None,
        };
        Ok(Self { target, truth })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let t = &self.target;
        let mut w = ByteWriter::new();
        w.bytes(DATASET_MAGIC);
        w.u32(DATASET_VERSION);
        for v in [
            t.n_samples,
            t.dim,
            t.n_classes,
            t.prompts_per_class,
            t.views,
        ] {
            w.u32(v as u32);
        }
        w.u32(if self.truth.is_some() {
            FLAG_HAS_LABELS
        } else {
            0
        });
        w.f32s(&t.weak);
        w.f32s(&t.strong);
        w.f32s(&t.prompts);
        if let Some(truth) = &self.truth {
            for &l in truth.labels() {
                w.u32(l as u32);
            }
        }
        for name in &t.class_names {
            w.string(name);
        }
        w.into_inner()
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let magic = r
            .take(4, "magic")
            .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
        if magic != DATASET_MAGIC {
            return Err(Error::MalformedHeader(format!(
                "bad magic {magic:?}, expected \"DPAE\""
            )));
        }
        let version = r
            .u32("version")
            .map_err(|_| Error::MalformedHeader("missing version".into()))?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                expected: DATASET_VERSION,
                found: version,
            });
        }
        let mut header = [0usize; 6];
        for (slot, name) in header.iter_mut().zip(["N", "d", "C", "k", "V", "flags"]) {
            *slot = r
                .u32(name)
                .map_err(|_| Error::MalformedHeader(format!("missing header field {name}")))?
                as usize;
        }
        let [n, d, c, k, v, flags] = header;
        if flags as u32 & !FLAG_HAS_LABELS != 0 {
            return Err(Error::MalformedHeader(format!(
                "unknown flag bits {flags:#x}"
            )));
        }
        check_shape(n, d, c, k, v)?;
        let weak = r.f32s(checked_len(&[n, d], "weak")?, "weak")?;
        let strong = r.f32s(checked_len(&[n, v, d], "strong")?, "strong")?;
        let prompts = r.f32s(checked_len(&[c, k, d], "prompt")?, "prompt")?;
        let labels = if flags as u32 & FLAG_HAS_LABELS != 0 {
            let mut l = Vec::with_capacity(n);
            for _ in 0..n {
                l.push(r.u32("labels")? as usize);
            }
            Some(l)
        } else {
            None
        };
        let mut names = Vec::with_capacity(c);
        for _ in 0..c {
            names.push(r.string("class name")?);
        }
        if r.remaining() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes after payload",
                r.remaining()
            )));
        }
        let target = TargetData::new(n, d, c, k, v, weak, strong, prompts, names)?;
        Self::new(target, labels)
    }

    pub fn split(self) -> (TargetData, Option<GroundTruth>) {
        (self.target, self.truth)
    }
}

/// Human-readable duplicate of the header written next to every dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub version: u32,
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub prompts_per_class: usize,
    pub strong_views: usize,
    pub has_true_labels: bool,
    pub class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    EmbeddingDataset::from_bytes(&buf)
}

/// Writes the binary file and its `.meta.json` sidecar. `generator` is echoed
/// into the sidecar verbatim.
pub fn write_dataset(
    path: &Path,
    ds: &EmbeddingDataset,
    generator: Option<serde_json::Value>,
) -> Result<()> {
    fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))?;
    let t = &ds.target;
    let meta = DatasetMeta {
        format: "DPAE".into(),
        version: DATASET_VERSION,
        n_samples: t.n_samples,
        dim: t.dim,
        n_classes: t.n_classes,
        prompts_per_class: t.prompts_per_class,
        strong_views: t.views,
        has_true_labels: ds.truth.is_some(),
        class_names: t.class_names.clone(),
        generator,
    };
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub weak_rows: Mat,
    pub strong_rows: Mat,
}

/// Seeded shuffle of all samples, cut into consecutive batches. The strong
/// view of sample `i` in epoch `e` is `(e + i) mod V`.
pub fn epoch_batches(
    data: &TargetData,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let n = data.n_samples;
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidBatchSize { batch_size, n });
    }
    let order = epoch_permutation(n, seed, epoch);
    let d = data.dim;
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let mut weak = Vec::with_capacity(idx.len() * d);
            let mut strong = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                weak.extend(data.weak_row(i).iter().map(|&x| f64::from(x)));
                strong.extend(
                    data.strong_row(i, data.view_for(i, epoch))
                        .iter()
                        .map(|&x| f64::from(x)),
                );
            }
            Batch {
                indices: idx.to_vec(),
                weak_rows: Mat::from_vec(idx.len(), d, weak).expect("shape"),
                strong_rows: Mat::from_vec(idx.len(), d, strong).expect("shape"),
            }
        })
        .collect())
}

pub(crate) fn epoch_permutation(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}
