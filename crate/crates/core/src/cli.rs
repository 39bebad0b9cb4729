//! The commands behind the `dualproto` binary. Each returns a summary on
//! success; the binary maps errors to exit codes via [`Error::exit_code`].

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfigFile;
use crate::error::{Error, Result};
use crate::eval::{
    confusion, proto_cosine_matrix, top1_accuracy, zero_shot_accuracy, Curves, LabelAudit,
};
use crate::store::{load_dataset, write_dataset};
use crate::synth::generate;
use crate::trainer::{
    predict, train_from, Ablation, EpochObserver, EpochRecord, EpochView, LabelMetrics,
    TrainConfig, TrainReport, TrainState,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.dpac";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CURVES_FILE: &str = "curves.json";
pub const PROTO_COSINE_FILE: &str = "proto_cosine.csv";

const PARTIAL_SUFFIX: &str = ".partial";

fn partial(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(PARTIAL_SUFFIX);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn rename(from: &Path, to: &Path) -> Result<()> {
    fs::rename(from, to).map_err(|e| Error::io(to, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub zero_shot_accuracy: f64,
}

pub fn cmd_synth(config: &Path, out: &Path, seed: Option<u64>) -> Result<SynthSummary> {
    let mut cfg = RunConfigFile::load(config)?.synth;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let ds = generate(&cfg)?;
    let truth = ds.truth.as_ref().expect("generator always stores labels");
    let zero_shot_accuracy = zero_shot_accuracy(&ds.target, truth)?;
    write_dataset(out, &ds, Some(serde_json::to_value(&cfg)?))?;
    Ok(SynthSummary { zero_shot_accuracy })
}

#[derive(Debug, Clone, Default)]
pub struct AdaptOptions {
    pub dataset: PathBuf,
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub ablations: Vec<Ablation>,
    pub resume: Option<PathBuf>,
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptSummary {
    pub report: TrainReport,
    pub zero_shot_accuracy: Option<f64>,
    pub final_accuracy: Option<f64>,
}

/// Streams metrics and a rolling checkpoint to `.partial` files while
/// training runs.
struct RunWriter<'a> {
    audit: Option<LabelAudit<'a>>,
    config: &'a TrainConfig,
    metrics: File,
    checkpoint: PathBuf,
    total_epochs: usize,
}

impl EpochObserver for RunWriter<'_> {
    fn label_metrics(&mut self, view: &EpochView<'_>) -> Result<LabelMetrics> {
        match &mut self.audit {
            Some(a) => a.label_metrics(view),
            None => Ok(LabelMetrics::default()),
        }
    }

    fn epoch_end(&mut self, state: &TrainState, record: &EpochRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.checkpoint, e))?;
        Checkpoint {
            config: self.config.clone(),
            state: state.clone(),
        }
        .save(&self.checkpoint)?;
        let acc = record
            .test_accuracy
            .map_or(String::new(), |a| format!(" test_acc={a:.4}"));
        let pl = record
            .pl_accuracy
            .map_or(String::new(), |a| format!(" pl_acc={a:.4}"));
        eprintln!(
            "epoch {}/{} loss={:.5}{pl}{acc} diag_cos={:.4}",
            record.epoch, self.total_epochs, record.total, record.mean_diag_proto_cosine
        );
        Ok(())
    }
}

fn summary_csv(report: &TrainReport) -> String {
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    let mut out = String::from(
        "epoch,l_st,l_reg,l_align,total,pl_accuracy,test_accuracy,mean_diag_proto_cosine\n",
    );
    for r in &report.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.l_st,
            r.l_reg,
            r.l_align,
            r.total,
            opt(r.pl_accuracy),
            opt(r.test_accuracy),
            r.mean_diag_proto_cosine
        ));
    }
    out
}

pub fn cmd_adapt(opts: &AdaptOptions) -> Result<AdaptSummary> {
    let mut cfg = RunConfigFile::load(&opts.config)?
        .train
        .with_ablations(&opts.ablations);
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (data, truth) = load_dataset(&opts.dataset)?.split();

    let state = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config != cfg {
                return Err(Error::InvalidConfig(
                    "checkpoint was written with a different configuration".into(),
                ));
            }
            ck.state
        }
        None => TrainState::init(&data, &cfg)?,
    };

    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let path = |name: &str| opts.out_dir.join(name);
    for name in [
        CHECKPOINT_FILE,
        METRICS_FILE,
        SUMMARY_FILE,
        CURVES_FILE,
        PROTO_COSINE_FILE,
    ] {
        let _ = fs::remove_file(path(name));
    }
    let metrics_partial = partial(&path(METRICS_FILE));
    let ckpt_partial = partial(&path(CHECKPOINT_FILE));
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(&metrics_partial)
        .map_err(|e| Error::io(&metrics_partial, e))?;

    let mut writer = RunWriter {
        audit: truth.as_ref().map(LabelAudit::new),
        config: &cfg,
        metrics,
        checkpoint: ckpt_partial.clone(),
        total_epochs: cfg.epochs,
    };
    let zero_shot = truth
        .as_ref()
        .map(|t| zero_shot_accuracy(&data, t))
        .transpose()?;
    let outcome = train_from(&data, &cfg, state.clone(), &mut writer, opts.stop_after)?;
    drop(writer);

    // a run that had nothing left to do still leaves a usable checkpoint
    if outcome.report.records.is_empty() {
        Checkpoint {
            config: cfg.clone(),
            state: outcome.state.clone(),
        }
        .save(&ckpt_partial)?;
    }
    rename(&ckpt_partial, &path(CHECKPOINT_FILE))?;
    rename(&metrics_partial, &path(METRICS_FILE))?;
    write_file(&path(SUMMARY_FILE), summary_csv(&outcome.report))?;
    let mut curves = serde_json::to_string_pretty(&Curves::from(&outcome.report))?;
    curves.push('\n');
    write_file(&path(CURVES_FILE), curves)?;
    let cos = proto_cosine_matrix(&outcome.state.image_protos, &outcome.state.z)?;
    write_file(&path(PROTO_COSINE_FILE), cos.to_csv())?;

    let final_accuracy = match &truth {
        Some(t) => {
            let pred = predict(
                &outcome.state.z,
                &outcome.state.adapter,
                &data.weak_matrix(),
            )?;
            Some(top1_accuracy(&pred, t.labels())?)
        }
        None => None,
    };
    Ok(AdaptSummary {
        report: outcome.report,
        zero_shot_accuracy: zero_shot,
        final_accuracy,
    })
}

pub fn predictions_csv(labels: &[usize]) -> String {
    let mut out = String::from("index,label\n");
    for (i, l) in labels.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<usize>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("index,label") {
        return Err(Error::MalformedHeader(
            "predictions must start with `index,label`".into(),
        ));
    }
    let mut out = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed = line.split_once(',').and_then(|(i, l)| {
            Some((
                i.trim().parse::<usize>().ok()?,
                l.trim().parse::<usize>().ok()?,
            ))
        });
        match parsed {
            Some((i, l)) if i == row => out.push(l),
            _ => {
                return Err(Error::MalformedHeader(format!(
                    "bad prediction row {}: {line:?}",
                    row + 1
                )))
            }
        }
    }
    Ok(out)
}

/// Predicts with the textual prototypes of a checkpoint. Image prototypes in
/// the checkpoint are never read.
pub fn cmd_predict(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<Vec<usize>> {
    let ck = Checkpoint::load(checkpoint)?;
    let (data, _) = load_dataset(dataset)?.split();
    if ck.state.z.dim() != data.dim() || ck.state.z.n_classes() != data.n_classes() {
        return Err(Error::DimensionMismatch(format!(
            "checkpoint is {}x{}, dataset has C={} d={}",
            ck.state.z.n_classes(),
            ck.state.z.dim(),
            data.n_classes(),
            data.dim()
        )));
    }
    let labels = predict(&ck.state.z, &ck.state.adapter, &data.weak_matrix())?;
    write_file(out, predictions_csv(&labels))?;
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub confusion_csv: PathBuf,
}

pub fn cmd_eval(predictions: &Path, dataset: &Path, out: Option<&Path>) -> Result<EvalSummary> {
    let text = fs::read_to_string(predictions).map_err(|e| Error::io(predictions, e))?;
    let pred = parse_predictions(&text)?;
    let (data, truth) = load_dataset(dataset)?.split();
    let truth = truth.ok_or(Error::MissingLabels)?;
    let accuracy = top1_accuracy(&pred, truth.labels())?;
    let cm = confusion(&pred, truth.labels(), data.n_classes())?;
    let confusion_csv = match out {
        Some(p) => p.to_path_buf(),
        None => predictions.with_extension("confusion.csv"),
    };
    write_file(&confusion_csv, cm.to_csv(data.class_names()))?;
    let mut json = serde_json::to_string_pretty(&serde_json::json!({
        "accuracy": accuracy,
        "class_names": data.class_names(),
        "confusion": cm.counts,
    }))?;
    json.push('\n');
    write_file(&confusion_csv.with_extension("json"), json)?;
    Ok(EvalSummary {
        accuracy,
        confusion_csv,
    })
}
