//! The adaptation loop.
//!
//! Per batch: adapt the weak views (no gradient), label them from both
//! prototype sets, adapt the strong views, take one optimizer step on the
//! textual prototypes and adapter, and write weak features and labels into
//! the memory bank. Per epoch: rebuild image prototypes from the bank.
//!
//! Image prototypes are frozen inside an epoch. All persistent state is
//! rounded to `f32` at every epoch boundary so that a checkpoint taken there
//! resumes bit-for-bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Mat};
use crate::objectives::{total_loss_and_grads, BatchInputs, Lambdas, Temperatures};
use crate::optim::{cosine_lr, AdamWHyper, AdamWState, Adapter};
use crate::prototypes::{
    init_image_prototypes, refresh_image_prototypes, ImagePrototypes, MemoryBank, TextualPrototypes,
};
use crate::pseudo_label::{label_batch, DAState, LabelingParams};
use crate::store::{epoch_batches, TargetData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_prototypes: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_prototypes: 5e-4,
            lr_adapter: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    fn hyper(&self, lr: f64) -> AdamWHyper {
        AdamWHyper {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    pub lambdas: Lambdas,
    pub tau_logit: f64,
    pub tau_align: f64,
    pub da_momentum: f64,
    pub optimizer: OptimConfig,
    pub adapter_enabled: bool,
    pub weighting: bool,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            beta: 0.5,
            lambdas: Lambdas::default(),
            tau_logit: 0.01,
            tau_align: 0.05,
            da_momentum: 0.99,
            optimizer: OptimConfig::default(),
            adapter_enabled: true,
            weighting: true,
            seed: 0,
            eval_every: 1,
        }
    }
}

/// Component switches for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Pseudo-labels from the (aligned) text scores alone: `beta = 1`.
    NoFusion,
    /// Every pseudo-label weighs 1.
    NoWeighting,
    /// Drop the prototype alignment term.
    NoAlign,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-fusion" => Ok(Self::NoFusion),
            "no-weighting" => Ok(Self::NoWeighting),
            "no-align" => Ok(Self::NoAlign),
            other => Err(Error::InvalidConfig(format!(
                "unknown ablation {other:?} (expected no-fusion, no-weighting or no-align)"
            ))),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::BetaOutOfRange(self.beta));
        }
        if [self.tau_logit, self.tau_align]
            .iter()
            .any(|t| t.is_nan() || *t <= 0.0)
        {
            return Err(Error::NonPositiveTemperature(
                self.tau_logit.min(self.tau_align),
            ));
        }
        if !(self.da_momentum > 0.0 && self.da_momentum <= 1.0) {
            return bad("da_momentum must lie in (0, 1]");
        }
        let l = self.lambdas;
        if [l.st, l.reg, l.align]
            .iter()
            .any(|x| !(*x >= 0.0 && x.is_finite()))
        {
            return bad("lambdas must be finite and non-negative");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1");
        }
        Ok(())
    }

    pub fn apply_ablation(&mut self, a: Ablation) {
        match a {
            Ablation::NoFusion => self.beta = 1.0,
            Ablation::NoWeighting => self.weighting = false,
            Ablation::NoAlign => self.lambdas.align = 0.0,
        }
    }

    pub fn with_ablations(mut self, ablations: &[Ablation]) -> Self {
        for &a in ablations {
            self.apply_ablation(a);
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_st: f64,
    pub l_reg: f64,
    pub l_align: f64,
    pub total: f64,
    pub pl_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub mean_diag_proto_cosine: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

/// Everything that survives an epoch boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub z: TextualPrototypes,
    pub adapter: Adapter,
    pub image_protos: ImagePrototypes,
    pub da: DAState,
    pub opt_z: AdamWState,
    pub opt_scale: AdamWState,
    pub opt_bias: AdamWState,
}

impl TrainState {
    /// Textual prototypes from prompts, identity adapter, and image
    /// prototypes from zero-shot labels.
    pub fn init(data: &TargetData, cfg: &TrainConfig) -> Result<Self> {
        let z = TextualPrototypes::from_prompts(data)?;
        let adapter = Adapter::identity(data.dim());
        let (image_protos, _) = init_image_prototypes(&data.weak_matrix(), &adapter, &z)?;
        let c = data.n_classes();
        let d = data.dim();
        let o = &cfg.optimizer;
        let mut state = Self {
            epochs_done: 0,
            z,
            adapter,
            image_protos,
            da: DAState::uniform(c, cfg.da_momentum),
            opt_z: AdamWState::new(c * d, o.hyper(o.lr_prototypes)),
            opt_scale: AdamWState::new(d, o.hyper(o.lr_adapter)),
            opt_bias: AdamWState::new(d, o.hyper(o.lr_adapter)),
        };
        state.quantize();
        Ok(state)
    }

    /// Rounds every persistent array to `f32` precision.
    pub fn quantize(&mut self) {
        fn q(v: &mut [f64]) {
            v.iter_mut().for_each(|x| *x = f64::from(*x as f32));
        }
        q(self.z.z.as_mut_slice());
        q(&mut self.adapter.scale);
        q(&mut self.adapter.bias);
        q(self.image_protos.p.as_mut_slice());
        q(&mut self.da.running_mean);
        for opt in [&mut self.opt_z, &mut self.opt_scale, &mut self.opt_bias] {
            q(&mut opt.m);
            q(&mut opt.v);
        }
    }
}

/// Read-only snapshot handed to observers at the end of each epoch.
pub struct EpochView<'a> {
    pub epoch: usize,
    pub pseudo_labels: &'a [usize],
    pub z: &'a TextualPrototypes,
    pub adapter: &'a Adapter,
    pub data: &'a TargetData,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LabelMetrics {
    pub pl_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

/// Hooks the training loop calls at epoch boundaries. The loop itself never
/// sees ground truth; label metrics come only from here.
pub trait EpochObserver {
    fn label_metrics(&mut self, _view: &EpochView<'_>) -> Result<LabelMetrics> {
        Ok(LabelMetrics::default())
    }

    /// Called after the record is final and the state has been rounded.
    fn epoch_end(&mut self, _state: &TrainState, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl EpochObserver for Silent {}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub report: TrainReport,
}

/// Labels from the textual prototypes only.
pub fn predict(z: &TextualPrototypes, adapter: &Adapter, rows: &Mat) -> Result<Vec<usize>> {
    let f = adapter.apply(rows)?;
    Ok(f.matmul_t(&z.z)?.argmax_rows())
}

pub fn train(
    data: &TargetData,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainOutcome> {
    let state = TrainState::init(data, cfg)?;
    train_from(data, cfg, state, observer, None)
}

/// Continues from `state` until `cfg.epochs` are done, or until
/// `stop_after` epochs have completed in total.
pub fn train_from(
    data: &TargetData,
    cfg: &TrainConfig,
    mut state: TrainState,
    observer: &mut dyn EpochObserver,
    stop_after: Option<usize>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.batch_size > data.n_samples() {
        return Err(Error::InvalidBatchSize {
            batch_size: cfg.batch_size,
            n: data.n_samples(),
        });
    }
    if state.z.n_classes() != data.n_classes() || state.z.dim() != data.dim() {
        return Err(Error::ShapeMismatch("state does not match dataset".into()));
    }
    let n = data.n_samples();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let end = stop_after.map_or(cfg.epochs, |s| s.min(cfg.epochs));
    let labeling = LabelingParams {
        beta: cfg.beta,
        tau_logit: cfg.tau_logit,
        weighting: cfg.weighting,
    };
    let temps = Temperatures {
        logit: cfg.tau_logit,
        align: cfg.tau_align,
    };
    let frozen = cfg.lambdas.all_zero();

    let mut report = TrainReport::default();
    let mut bank = MemoryBank::empty(n, data.dim(), data.n_classes());

    for epoch in state.epochs_done..end {
        let batches = epoch_batches(data, cfg.batch_size, cfg.seed, epoch)?;
        let mut sums = [0.0f64; 4];
        for (bi, batch) in batches.iter().enumerate() {
            let weak_f = state.adapter.apply(&batch.weak_rows)?;
            let pl = label_batch(
                &weak_f,
                &state.z,
                &state.image_protos,
                &mut state.da,
                labeling,
            )?;
            let (loss, grads) = total_loss_and_grads(
                BatchInputs {
                    strong_rows: &batch.strong_rows,
                    labels: &pl.labels,
                    weights: &pl.weights,
                    image_protos: &state.image_protos,
                },
                &state.z,
                Some(&state.adapter),
                cfg.lambdas,
                temps,
            )
            .map_err(|e| match e {
                Error::NonFiniteGradient(_) => Error::NonFiniteLoss { epoch, batch: bi },
                other => other,
            })?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi });
            }
            for (s, v) in sums
                .iter_mut()
                .zip([loss.l_st, loss.l_reg, loss.l_align, loss.total])
            {
                *s += v;
            }

            // with every lambda at zero there is no objective, so no step
            if !frozen {
                let step = epoch * batches_per_epoch + bi;
                let lr_z = cosine_lr(step, total_steps, cfg.optimizer.lr_prototypes)?;
                state
                    .opt_z
                    .step(state.z.z.as_mut_slice(), grads.dz.as_slice(), lr_z)?;
                state.z.renormalize();
                if cfg.adapter_enabled {
                    let lr_a = cosine_lr(step, total_steps, cfg.optimizer.lr_adapter)?;
                    state
                        .opt_scale
                        .step(&mut state.adapter.scale, &grads.d_adapter_scale, lr_a)?;
                    state
                        .opt_bias
                        .step(&mut state.adapter.bias, &grads.d_adapter_bias, lr_a)?;
                    if !state.adapter.is_finite() {
                        return Err(Error::NonFiniteLoss { epoch, batch: bi });
                    }
                }
            }
            bank.update(&batch.indices, &weak_f, &pl.labels)?;
        }

        state.image_protos = refresh_image_prototypes(&bank, &state.image_protos)?;
        state.epochs_done = epoch + 1;
        state.quantize();

        let c = state.z.n_classes();
        let diag = (0..c)
            .map(|j| dot(state.image_protos.p.row(j), state.z.z.row(j)))
            .sum::<f64>()
            / c as f64;
        let evaluate = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
        let metrics = if evaluate {
            observer.label_metrics(&EpochView {
                epoch: epoch + 1,
                pseudo_labels: bank.labels(),
                z: &state.z,
                adapter: &state.adapter,
                data,
            })?
        } else {
            LabelMetrics::default()
        };
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            l_st: sums[0] / nb,
            l_reg: sums[1] / nb,
            l_align: sums[2] / nb,
            total: sums[3] / nb,
            pl_accuracy: metrics.pl_accuracy,
            test_accuracy: metrics.test_accuracy,
            mean_diag_proto_cosine: diag,
        };
        observer.epoch_end(&state, &record)?;
        report.records.push(record);
    }
    Ok(TrainOutcome { state, report })
}
