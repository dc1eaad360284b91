//! The `gdpnet` command line.
//!
//! Exit codes: 0 success, 1 gradient check above tolerance, 2 configuration,
//! input or file errors, 3 training aborted on a non-finite loss.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

pub use config::{DataSource, RunConfig, MODEL_KEYS, OTHER_KEYS, SYNTH_KEYS};

use crate::data::{generate_synthetic, load_embedding_file, save_embedding_file, selection_stats, Dataset, MicroF1};
use crate::diffcore::{GradCheckReport, ParamGrads, ParamStore};
use crate::error::{Error, Result};
use crate::model::{self, check_gradients_with, evaluate, predict, train, EpochReport, MetricsLog};

/// Largest sequence `gradcheck` accepts.
pub const GRADCHECK_MAX_TOKENS: usize = 10;
/// Largest parameter count `gradcheck` accepts; each scalar costs two
/// forward passes.
pub const GRADCHECK_MAX_SCALARS: usize = 20_000;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Analyze,
    Gradcheck,
    Synth,
}

#[derive(Debug, Parser)]
#[command(name = "gdpnet", version, about = "Latent multi-view graph module for relation extraction")]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// Flat `key = value` run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Checkpoint to write (train) or read (eval, analyze); overrides the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the model seed, or the task seed for `synth`.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Process exit status for an error.
pub fn exit_code(error: &Error) -> u8 {
    match error {
        Error::Diverged { .. } | Error::Numeric(_) => 3,
        _ => 2,
    }
}

/// Parses the command line, runs the command, returns the exit status.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = run(&cli, &mut out, &mut std::io::stderr());
    std::process::ExitCode::from(code)
}

pub fn run(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> u8 {
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<u8> {
    let mut run = RunConfig::load(&cli.config)?;
    if let Some(seed) = cli.seed {
        run.override_seed(seed, cli.command == Command::Synth);
    }
    if let Some(c) = &cli.checkpoint {
        run.checkpoint = Some(c.clone());
    }
    match cli.command {
        Command::Train => cmd_train(&mut run, out).map(|_| 0),
        Command::Eval => cmd_eval(&mut run, out).map(|_| 0),
        Command::Analyze => cmd_analyze(&mut run, out).map(|_| 0),
        Command::Gradcheck => {
            let report = cmd_gradcheck(&run, out)?;
            Ok(if report.max_rel_error < GRADCHECK_TOLERANCE { 0 } else { 1 })
        }
        Command::Synth => cmd_synth(&run, out).map(|_| 0),
    }
}

struct Splits {
    train: Option<Dataset>,
    dev: Option<Dataset>,
    test: Option<Dataset>,
}

fn load_splits(run: &RunConfig) -> Result<Splits> {
    let load = |p: &Option<PathBuf>| -> Result<Option<Dataset>> {
        p.as_deref()
            .map(|p| {
                load_embedding_file(p).map_err(|e| match e {
                    Error::Io(io) => Error::Input(format!("{}: {io}", p.display())),
                    other => other,
                })
            })
            .transpose()
    };
    match &run.data {
        DataSource::Files { train, dev, test } => Ok(Splits {
            train: load(train)?,
            dev: load(dev)?,
            test: load(test)?,
        }),
        DataSource::Synthetic => {
            let task = generate_synthetic(&run.synth)?;
            let nonempty = |d: Dataset| (!d.is_empty()).then_some(d);
            Ok(Splits {
                train: Some(task.train),
                dev: nonempty(task.dev),
                test: Some(task.test),
            })
        }
        DataSource::Unspecified => Err(Error::config(
            "train_file",
            "no data: set train_file/dev_file/test_file or `synthetic = true`",
        )),
    }
}

/// Fails unless `path`'s directory exists, so that nothing is written before
/// every output is known to be writable.
fn check_output(key: &str, path: &Path) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !dir.is_dir() {
        return Err(Error::config(key, format!("directory {} does not exist", dir.display())));
    }
    if path.is_dir() {
        return Err(Error::config(key, format!("{} is a directory", path.display())));
    }
    Ok(())
}

fn bind(run: &mut RunConfig, data: &Dataset) -> Result<()> {
    run.bind_to_data(data.input_width, data.class_count())
}

fn epoch_line(r: &EpochReport) -> String {
    let mut line = format!(
        "epoch {} train_loss={:.6} train_acc={:.4} r_real={:.4}",
        r.epoch, r.train.loss, r.train.accuracy, r.train.mean_realized_ratio
    );
    if let Some(d) = &r.dev {
        line.push_str(&format!(" dev_loss={:.6} dev_acc={:.4} dev_f1={:.4}", d.loss, d.accuracy, d.f1.f1));
    }
    line
}

/// Trains, writes the metrics log after every epoch and the checkpoint at the
/// end.
pub fn cmd_train(run: &mut RunConfig, out: &mut dyn Write) -> Result<Vec<EpochReport>> {
    let splits = load_splits(run)?;
    let train_set = splits
        .train
        .ok_or_else(|| Error::config("train_file", "training needs a train split"))?;
    bind(run, &train_set)?;
    let checkpoint = run
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "training needs a checkpoint path"))?;
    check_output("checkpoint", &checkpoint)?;
    if let Some(log) = &run.metrics_log {
        check_output("metrics_log", log)?;
    }
    if run.stop_at_dev_accuracy.is_some() && splits.dev.is_none() {
        return Err(Error::config("stop_at_dev_accuracy", "early stopping needs a dev split"));
    }
    let cfg = run.model.clone();
    // validate the dev split against the model before anything is written
    if let Some(dev) = &splits.dev {
        if dev.input_width != cfg.input_width || dev.class_count() != cfg.classes {
            return Err(Error::config("dev_file", "dev split does not match the train split's width or relations"));
        }
    }

    let mut log = run
        .metrics_log
        .as_deref()
        .map(|p| MetricsLog::new(BufWriter::new(File::create(p)?)))
        .transpose()?;
    let mut io_error = None;
    let stop = run.stop_at_dev_accuracy;
    let outcome = train(&train_set, splits.dev.as_ref(), &cfg, |report, _| {
        let written = log
            .as_mut()
            .map_or(Ok(()), |l| l.write(report))
            .and_then(|_| writeln!(out, "{}", epoch_line(report)).map_err(Error::from));
        if let Err(e) = written {
            io_error = Some(e);
            return ControlFlow::Break(());
        }
        match (stop, &report.dev) {
            (Some(target), Some(dev)) if dev.accuracy >= target => ControlFlow::Break(()),
            _ => ControlFlow::Continue(()),
        }
    })?;
    if let Some(e) = io_error {
        return Err(e);
    }
    outcome.params.save(&checkpoint)?;
    writeln!(out, "checkpoint {}", checkpoint.display())?;
    Ok(outcome.history)
}

fn load_for_eval(run: &mut RunConfig) -> Result<(Dataset, ParamStore)> {
    let splits = load_splits(run)?;
    let test = splits
        .test
        .ok_or_else(|| Error::config("test_file", "evaluation needs a test split"))?;
    if test.is_empty() {
        return Err(Error::Input(format!("test split `{}` has no examples", test.split)));
    }
    bind(run, &test)?;
    let path = run
        .checkpoint
        .clone()
        .ok_or_else(|| Error::config("checkpoint", "evaluation needs a checkpoint"))?;
    let params = ParamStore::load(&path).map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("{}: {io}", path.display())),
        other => other,
    })?;
    model::check_params(&params, &run.model)?;
    Ok((test, params))
}

/// Micro-F1 on the test split, printed as `pr=… re=… f1=…`.
pub fn cmd_eval(run: &mut RunConfig, out: &mut dyn Write) -> Result<MicroF1> {
    let (test, params) = load_for_eval(run)?;
    let m = evaluate(&test, &params, &run.model)?;
    writeln!(out, "pr={:.6} re={:.6} f1={:.6}", m.f1.precision, m.f1.recall, m.f1.f1)?;
    Ok(m.f1)
}

/// Token selection table for the test split.
pub fn cmd_analyze(run: &mut RunConfig, out: &mut dyn Write) -> Result<crate::data::SelectionStats> {
    let (test, params) = load_for_eval(run)?;
    let preds = predict(&test, &params, &run.model)?;
    let survivors: Vec<Vec<usize>> = preds.iter().map(|p| p.record.final_positions().to_vec()).collect();
    let stats = selection_stats(&survivors, &test)?;
    writeln!(out, "{stats}")?;
    Ok(stats)
}

/// Finite-difference check of the full loss on one random sequence of
/// `gradcheck_tokens` tokens.
pub fn cmd_gradcheck(run: &RunConfig, out: &mut dyn Write) -> Result<GradCheckReport> {
    gradcheck_with_backward(run, out, |_| {})
}

/// [`cmd_gradcheck`] with a hook that rewrites the reverse-mode gradients,
/// to confirm a broken backward pass is caught.
pub fn gradcheck_with_backward(
    run: &RunConfig,
    out: &mut dyn Write,
    tamper: impl Fn(&mut ParamGrads),
) -> Result<GradCheckReport> {
    let t = run.gradcheck_tokens;
    if t > GRADCHECK_MAX_TOKENS {
        return Err(Error::config(
            "gradcheck_tokens",
            format!("{t} tokens exceeds the finite-difference limit of {GRADCHECK_MAX_TOKENS}"),
        ));
    }
    let scalars = model::init_params(&run.model)?.scalar_count();
    if scalars > GRADCHECK_MAX_SCALARS {
        return Err(Error::config(
            "width",
            format!("{scalars} parameters exceeds the finite-difference limit of {GRADCHECK_MAX_SCALARS}; use `profile = tiny`"),
        ));
    }
    let report = check_gradients_with(&run.model, t, run.model.seed, tamper)?;
    let worst = report
        .worst
        .as_ref()
        .map(|(n, i)| format!("{n}[{i}]"))
        .unwrap_or_else(|| "-".into());
    writeln!(
        out,
        "max_rel_error={:.3e} checked={} worst={} analytic={:.6e} numeric={:.6e}",
        report.max_rel_error, report.checked, worst, report.worst_pair.0, report.worst_pair.1
    )?;
    writeln!(
        out,
        "{}",
        if report.max_rel_error < GRADCHECK_TOLERANCE { "ok" } else { "FAILED" }
    )?;
    Ok(report)
}

/// File names written by `synth` inside `synth_out_dir`.
pub const SYNTH_FILES: [&str; 3] = ["train.gdeb", "dev.gdeb", "test.gdeb"];

/// Generates the planted-trigger task, writes three GDEB files and prints a
/// label histogram.
pub fn cmd_synth(run: &RunConfig, out: &mut dyn Write) -> Result<[PathBuf; 3]> {
    run.synth.validate()?;
    let dir = run
        .synth_out_dir
        .clone()
        .ok_or_else(|| Error::config("synth_out_dir", "synth needs an output directory"))?;
    if dir.exists() && !dir.is_dir() {
        return Err(Error::config("synth_out_dir", format!("{} is not a directory", dir.display())));
    }
    let task = generate_synthetic(&run.synth)?;
    std::fs::create_dir_all(&dir)?;
    let paths = SYNTH_FILES.map(|f| dir.join(f));
    for (ds, path) in [&task.train, &task.dev, &task.test].into_iter().zip(&paths) {
        save_embedding_file(ds, path)?;
    }
    writeln!(out, "{:<16}{:>8}{:>8}{:>8}", "label", "train", "dev", "test")?;
    for (k, name) in task.train.relations.iter().enumerate() {
        let count = |d: &Dataset| d.examples.iter().filter(|e| e.label == k).count();
        writeln!(
            out,
            "{name:<16}{:>8}{:>8}{:>8}",
            count(&task.train),
            count(&task.dev),
            count(&task.test)
        )?;
    }
    for p in &paths {
        writeln!(out, "wrote {}", p.display())?;
    }
    Ok(paths)
}
