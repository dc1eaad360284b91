//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored and
//! values may be wrapped in double quotes. A `profile` line (anywhere in the
//! file) selects the base hyper-parameters; every other key overrides one
//! field. Unknown and repeated keys are errors. Relative paths resolve against
//! the directory holding the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Keys that map onto [`ModelConfig`] fields.
pub const MODEL_KEYS: &[&str] = &[
    "input_width",
    "width",
    "gaussian_width",
    "views",
    "sublayers",
    "pool_stages",
    "ratio",
    "gamma",
    "lambda",
    "classes",
    "dropout",
    "learning_rate",
    "batch_size",
    "epochs",
    "seed",
    "adjacency_norm",
    "regenerate_edges",
    "attention_edges",
    "self_loops",
    "per_stage_pool",
    "trainable_cls",
];

/// Keys that map onto [`SynthConfig`] fields.
pub const SYNTH_KEYS: &[&str] = &[
    "synth_vocab_size",
    "synth_relations",
    "synth_triggers_per_relation",
    "synth_min_len",
    "synth_max_len",
    "synth_no_relation_frac",
    "synth_dim",
    "synth_train",
    "synth_dev",
    "synth_test",
    "synth_seed",
];

pub const OTHER_KEYS: &[&str] = &[
    "profile",
    "synthetic",
    "train_file",
    "dev_file",
    "test_file",
    "checkpoint",
    "metrics_log",
    "synth_out_dir",
    "stop_at_dev_accuracy",
    "gradcheck_tokens",
];

/// Where examples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Files {
        train: Option<PathBuf>,
        dev: Option<PathBuf>,
        test: Option<PathBuf>,
    },
    Synthetic,
    /// Neither files nor a synthetic task; fine for `gradcheck` and `synth`.
    Unspecified,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub data: DataSource,
    pub checkpoint: Option<PathBuf>,
    pub metrics_log: Option<PathBuf>,
    pub synth_out_dir: Option<PathBuf>,
    /// Stop training once dev accuracy reaches this value.
    pub stop_at_dev_accuracy: Option<f64>,
    pub gradcheck_tokens: usize,
    /// Keys assigned in the file (after `--seed` and friends are applied).
    pub explicit: BTreeSet<String>,
}

impl RunConfig {
    /// Reads and validates `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let entries = parse_lines(text)?;
        let mut model = match entries.get("profile") {
            Some(name) => ModelConfig::profile(name)?,
            None => ModelConfig::dialogre(),
        };
        let mut synth = SynthConfig::default();
        let mut run = RunConfig {
            model: model.clone(),
            synth: synth.clone(),
            data: DataSource::Unspecified,
            checkpoint: None,
            metrics_log: None,
            synth_out_dir: None,
            stop_at_dev_accuracy: None,
            gradcheck_tokens: 8,
            explicit: entries.keys().cloned().collect(),
        };
        let path = |v: &str| -> PathBuf {
            let p = PathBuf::from(v);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        let mut synthetic = false;
        let (mut train, mut dev, mut test) = (None, None, None);
        for (key, value) in &entries {
            let v = value.as_str();
            match key.as_str() {
                "profile" => {}
                "input_width" => model.input_width = parse(key, v)?,
                "width" => model.width = parse(key, v)?,
                "gaussian_width" => model.gaussian_width = parse(key, v)?,
                "views" => model.views = parse(key, v)?,
                "sublayers" => model.sublayers = parse(key, v)?,
                "pool_stages" => model.pool_stages = parse(key, v)?,
                "ratio" => model.ratio = parse(key, v)?,
                "gamma" => model.gamma = parse(key, v)?,
                "lambda" => model.lambda = parse(key, v)?,
                "classes" => model.classes = parse(key, v)?,
                "dropout" => model.dropout = parse(key, v)?,
                "learning_rate" => model.learning_rate = parse(key, v)?,
                "batch_size" => model.batch_size = parse(key, v)?,
                "epochs" => model.epochs = parse(key, v)?,
                "seed" => model.seed = parse(key, v)?,
                "adjacency_norm" => model.adjacency_norm = v.parse()?,
                "regenerate_edges" => model.regenerate_edges = parse(key, v)?,
                "attention_edges" => model.attention_edges = parse(key, v)?,
                "self_loops" => model.self_loops = parse(key, v)?,
                "per_stage_pool" => model.per_stage_pool = parse(key, v)?,
                "trainable_cls" => model.trainable_cls = parse(key, v)?,
                "synth_vocab_size" => synth.vocab_size = parse(key, v)?,
                "synth_relations" => synth.relations = parse(key, v)?,
                "synth_triggers_per_relation" => synth.triggers_per_relation = parse(key, v)?,
                "synth_min_len" => synth.min_len = parse(key, v)?,
                "synth_max_len" => synth.max_len = parse(key, v)?,
                "synth_no_relation_frac" => synth.no_relation_frac = parse(key, v)?,
                "synth_dim" => synth.dim = parse(key, v)?,
                "synth_train" => synth.train = parse(key, v)?,
                "synth_dev" => synth.dev = parse(key, v)?,
                "synth_test" => synth.test = parse(key, v)?,
                "synth_seed" => synth.seed = parse(key, v)?,
                "synthetic" => synthetic = parse(key, v)?,
                "train_file" => train = Some(path(v)),
                "dev_file" => dev = Some(path(v)),
                "test_file" => test = Some(path(v)),
                "checkpoint" => run.checkpoint = Some(path(v)),
                "metrics_log" => run.metrics_log = Some(path(v)),
                "synth_out_dir" => run.synth_out_dir = Some(path(v)),
                "stop_at_dev_accuracy" => run.stop_at_dev_accuracy = Some(parse(key, v)?),
                "gradcheck_tokens" => run.gradcheck_tokens = parse(key, v)?,
                other => unreachable!("key `{other}` passed the allow-list"),
            }
        }
        let has_files = train.is_some() || dev.is_some() || test.is_some();
        run.data = match (synthetic, has_files) {
            (true, true) => {
                return Err(Error::config(
                    "synthetic",
                    "give either embedding files or `synthetic = true`, not both",
                ))
            }
            (true, false) => DataSource::Synthetic,
            (false, true) => DataSource::Files { train, dev, test },
            (false, false) => DataSource::Unspecified,
        };
        if synthetic && !run.explicit.contains("trainable_cls") {
            // no encoder produced a CLS row, so h0 is learned
            model.trainable_cls = true;
        }
        run.model = model;
        run.synth = synth;
        run.validate()?;
        Ok(run)
    }

    /// Checks everything that does not depend on the data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data == DataSource::Synthetic {
            self.synth.validate().map_err(|e| Error::config("synth", e.to_string()))?;
        }
        if let Some(a) = self.stop_at_dev_accuracy {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::config("stop_at_dev_accuracy", format!("{a} outside (0, 1]")));
            }
        }
        if self.gradcheck_tokens == 0 {
            return Err(Error::config("gradcheck_tokens", "must be positive"));
        }
        Ok(())
    }

    /// Applies `--seed`: the model seed for training commands, the task seed
    /// for `synth`.
    pub fn override_seed(&mut self, seed: u64, synth: bool) {
        if synth {
            self.synth.seed = seed;
            self.explicit.insert("synth_seed".into());
        } else {
            self.model.seed = seed;
            self.explicit.insert("seed".into());
        }
    }

    /// Takes `input_width` and `classes` from the data unless the file sets
    /// them, in which case they must agree.
    pub fn bind_to_data(&mut self, input_width: usize, classes: usize) -> Result<()> {
        for (key, found, slot) in [
            ("input_width", input_width, &mut self.model.input_width),
            ("classes", classes, &mut self.model.classes),
        ] {
            if self.explicit.contains(key) {
                if *slot != found {
                    return Err(Error::config(key, format!("config says {}, data has {found}", *slot)));
                }
            } else {
                *slot = found;
            }
        }
        self.model.validate()
    }
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, String>> {
    let mut entries = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}", n + 1), format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        let value = value
            .strip_prefix('"')
            .and_then(|v| v.strip_suffix('"'))
            .unwrap_or(value);
        if ![MODEL_KEYS, SYNTH_KEYS, OTHER_KEYS].iter().any(|ks| ks.contains(&key)) {
            return Err(Error::config(key, "unknown key"));
        }
        if entries.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::config(key, "assigned twice"));
        }
    }
    Ok(entries)
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}
