use std::io::Write;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{forward, init_params, loss, loss_and_grads, ModelConfig};
use crate::data::{accuracy, micro_f1, Dataset, MicroF1};
use crate::diffcore::{adam_step, AdamConfig, ParamStore};
use crate::error::{Error, Result};

/// Averages over one split for one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SplitMetrics {
    pub examples: usize,
    pub loss: f64,
    pub cse: f64,
    pub dtw: f64,
    pub f1: MicroF1,
    pub accuracy: f64,
    pub mean_realized_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    /// 1-based.
    pub epoch: usize,
    /// Measured on the fly while the epoch trains, with dropout on.
    pub train: SplitMetrics,
    pub dev: Option<SplitMetrics>,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub history: Vec<EpochReport>,
}

#[derive(Default)]
struct Accumulator {
    n: usize,
    loss: f64,
    cse: f64,
    dtw: f64,
    ratio: f64,
    preds: Vec<usize>,
    golds: Vec<usize>,
}

impl Accumulator {
    fn push(&mut self, parts: super::LossParts, ratio: f64, pred: usize, gold: usize) {
        self.n += 1;
        self.loss += parts.total;
        self.cse += parts.cse;
        self.dtw += parts.dtw;
        self.ratio += ratio;
        self.preds.push(pred);
        self.golds.push(gold);
    }

    fn finish(self, no_relation: Option<usize>) -> SplitMetrics {
        let n = self.n.max(1) as f64;
        SplitMetrics {
            examples: self.n,
            loss: self.loss / n,
            cse: self.cse / n,
            dtw: self.dtw / n,
            f1: micro_f1(&self.preds, &self.golds, no_relation),
            accuracy: accuracy(&self.preds, &self.golds),
            mean_realized_ratio: self.ratio / n,
        }
    }
}

fn check_dataset(dataset: &Dataset, config: &ModelConfig) -> Result<()> {
    if dataset.input_width != config.input_width {
        return Err(Error::config(
            "input_width",
            format!("{} split has width {}, model expects {}", dataset.split, dataset.input_width, config.input_width),
        ));
    }
    if dataset.class_count() != config.classes {
        return Err(Error::config(
            "classes",
            format!("{} split has {} relations, model has {}", dataset.split, dataset.class_count(), config.classes),
        ));
    }
    Ok(())
}

/// Evaluation-mode metrics of `params` on `dataset`.
pub fn evaluate(dataset: &Dataset, params: &ParamStore, config: &ModelConfig) -> Result<SplitMetrics> {
    check_dataset(dataset, config)?;
    let mut acc = Accumulator::default();
    for ex in &dataset.examples {
        let rec = forward(ex, params, config, None)?;
        let parts = loss(&rec, ex.label, config)?;
        acc.push(parts, rec.mean_realized_ratio(), rec.predicted(), ex.label);
    }
    Ok(acc.finish(dataset.no_relation()))
}

/// Trains from freshly initialized parameters.
pub fn train(
    train_set: &Dataset,
    dev: Option<&Dataset>,
    config: &ModelConfig,
    on_epoch: impl FnMut(&EpochReport, &ParamStore) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    let params = init_params(config)?;
    train_from(params, train_set, dev, config, on_epoch)
}

/// Mini-batch Adam over `config.epochs` epochs. `on_epoch` sees every report
/// and may stop training early by returning `Break`.
/// Parameters that drove a Gaussian or a loss out of range mean training
/// blew up, not that the input was bad.
fn diverged(e: Error, example: &str, epoch: usize) -> Error {
    match e {
        Error::Domain(_) | Error::Numeric(_) => Error::Diverged {
            example: example.into(),
            epoch,
            loss: f64::NAN,
        },
        other => other,
    }
}

pub fn train_from(
    mut params: ParamStore,
    train_set: &Dataset,
    dev: Option<&Dataset>,
    config: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ParamStore) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    check_dataset(train_set, config)?;
    if let Some(d) = dev {
        check_dataset(d, config)?;
    }
    super::check_params(&params, config)?;

    let adam = AdamConfig::with_lr(config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut acc = Accumulator::default();
        for batch in order.chunks(config.batch_size) {
            params.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &train_set.examples[i];
                let step = loss_and_grads(ex, &params, config, Some(&mut rng)).map_err(|e| diverged(e, &ex.id, epoch))?;
                if !step.loss.total.is_finite() {
                    return Err(Error::Diverged {
                        example: ex.id.clone(),
                        epoch,
                        loss: step.loss.total,
                    });
                }
                params.accumulate(&step.grads, scale);
                acc.push(step.loss, step.record.mean_realized_ratio(), step.record.predicted(), ex.label);
            }
            adam_step(&mut params, &adam);
        }
        let report = EpochReport {
            epoch,
            train: acc.finish(train_set.no_relation()),
            dev: dev
                .map(|d| evaluate(d, &params, config))
                .transpose()
                .map_err(|e| diverged(e, "dev", epoch))?,
        };
        let flow = on_epoch(&report, &params);
        history.push(report);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { params, history })
}

/// Line-delimited metrics: `epoch,split,loss,cse,dtw,f1,mean_r_real`.
pub struct MetricsLog<W: Write> {
    out: W,
}

impl<W: Write> MetricsLog<W> {
    pub const HEADER: &'static str = "epoch,split,loss,cse,dtw,f1,mean_r_real";

    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", Self::HEADER)?;
        Ok(Self { out })
    }

    pub fn line(epoch: usize, split: &str, m: &SplitMetrics) -> String {
        format!(
            "{epoch},{split},{},{},{},{},{}",
            m.loss, m.cse, m.dtw, m.f1.f1, m.mean_realized_ratio
        )
    }

    pub fn write(&mut self, report: &EpochReport) -> Result<()> {
        writeln!(self.out, "{}", Self::line(report.epoch, "train", &report.train))?;
        if let Some(dev) = &report.dev {
            writeln!(self.out, "{}", Self::line(report.epoch, "dev", dev))?;
        }
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}
