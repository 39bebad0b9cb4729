//! `DPAC` checkpoint files.
//!
//! ```text
//! "DPAC" | u32 version=1 | u32 json_len | config JSON
//! u32 epochs_done | u32 C | u32 d
//! f32 Z[C*d] | f32 scale[d] | f32 bias[d]
//! f32 P[C*d] | u32 counts[C] | f32 running_mean[C]
//! 3 x (u64 step | f32 m[len] | f32 v[len])      for Z, scale, bias
//! ```
//!
//! The trainer rounds its state to `f32` at epoch boundaries, so writing and
//! reading a checkpoint is lossless.

use std::fs;
use std::path::Path;

use crate::codec::{checked_len, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::optim::{AdamWState, Adapter};
use crate::prototypes::{ImagePrototypes, TextualPrototypes};
use crate::pseudo_label::DAState;
use crate::trainer::{TrainConfig, TrainState};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DPAC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.string(&serde_json::to_string(&self.config)?);
        w.u32(s.epochs_done as u32);
        w.u32(s.z.n_classes() as u32);
        w.u32(s.z.dim() as u32);
        w.f64s_as_f32(s.z.z.as_slice());
        w.f64s_as_f32(&s.adapter.scale);
        w.f64s_as_f32(&s.adapter.bias);
        w.f64s_as_f32(s.image_protos.p.as_slice());
        for &c in &s.image_protos.counts {
            w.u32(c as u32);
        }
        w.f64s_as_f32(&s.da.running_mean);
        for opt in [&s.opt_z, &s.opt_scale, &s.opt_bias] {
            w.u64(opt.step);
            w.f64s_as_f32(&opt.m);
            w.f64s_as_f32(&opt.v);
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(buf);
        let magic = r
            .take(4, "magic")
            .map_err(|_| Error::MalformedHeader("file shorter than magic".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::MalformedHeader(format!(
                "bad magic {magic:?}, expected \"DPAC\""
            )));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let json = r.string("config")?;
        let config: TrainConfig = serde_json::from_str(&json)
            .map_err(|e| Error::MalformedHeader(format!("config echo: {e}")))?;
        let epochs_done = r.u32("epochs")? as usize;
        let c = r.u32("C")? as usize;
        let d = r.u32("d")? as usize;
        if c < 2 || d < 2 {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint shape C={c}, d={d}"
            )));
        }
        let cd = checked_len(&[c, d], "prototypes")?;

        let z = Mat::from_vec(c, d, r.f32s_as_f64(cd, "Z")?)?;
        let scale = r.f32s_as_f64(d, "adapter scale")?;
        let bias = r.f32s_as_f64(d, "adapter bias")?;
        let p = Mat::from_vec(c, d, r.f32s_as_f64(cd, "P")?)?;
        let mut counts = Vec::with_capacity(c);
        for _ in 0..c {
            counts.push(r.u32("counts")? as usize);
        }
        let running_mean = r.f32s_as_f64(c, "running mean")?;
        let o = &config.optimizer;
        let mut opts = Vec::with_capacity(3);
        for (len, lr, what) in [
            (cd, o.lr_prototypes, "Z moments"),
            (d, o.lr_adapter, "scale moments"),
            (d, o.lr_adapter, "bias moments"),
        ] {
            let mut st = AdamWState::new(
                len,
                crate::optim::AdamWHyper {
                    lr,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    weight_decay: o.weight_decay,
                },
            );
            st.step = r.u64(what)?;
            st.m = r.f32s_as_f64(len, what)?;
            st.v = r.f32s_as_f64(len, what)?;
            opts.push(st);
        }
        if r.remaining() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{} trailing bytes in checkpoint",
                r.remaining()
            )));
        }
        let all_finite = z.is_finite()
            && p.is_finite()
            && scale
                .iter()
                .chain(&bias)
                .chain(&running_mean)
                .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::MalformedHeader(
                "non-finite values in checkpoint".into(),
            ));
        }
        let opt_bias = opts.pop().expect("three states");
        let opt_scale = opts.pop().expect("three states");
        let opt_z = opts.pop().expect("three states");
        let state = TrainState {
            epochs_done,
            z: TextualPrototypes { z },
            adapter: Adapter { scale, bias },
            image_protos: ImagePrototypes { p, counts },
            da: DAState {
                running_mean,
                momentum: config.da_momentum,
            },
            opt_z,
            opt_scale,
            opt_bias,
        };
        Ok(Self { config, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
