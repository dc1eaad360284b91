//! Planted-trigger relation task.
//!
//! Vocabulary layout: id 0 is the subject marker, id 1 the object marker, ids
//! `2 .. 2 + K*c` are triggers (relation `k` owns `c` consecutive ids), and the
//! rest are noise. Every token id, plus CLS and SEP, gets a fixed embedding
//! drawn once from a standard normal (stored as `f32` so files round-trip
//! exactly). A positive example with label `k` holds one subject marker, one
//! object marker and exactly one trigger of relation `k` among noise tokens;
//! a `no_relation` example holds no trigger at all.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, EntitySpans, Span, TokenSequence, NO_RELATION};
use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub relations: usize,
    pub triggers_per_relation: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub no_relation_frac: f64,
    pub dim: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 200,
            relations: 4,
            triggers_per_relation: 3,
            min_len: 10,
            max_len: 24,
            no_relation_frac: 0.2,
            dim: 32,
            train: 2000,
            dev: 400,
            test: 400,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(Error::Argument(m));
        if self.relations == 0 || self.triggers_per_relation == 0 {
            return arg("need at least one relation and one trigger per relation".into());
        }
        if self.vocab_size <= self.relations * self.triggers_per_relation + 2 {
            return arg(format!(
                "vocabulary of {} leaves no noise tokens after {} triggers and 2 markers",
                self.vocab_size,
                self.relations * self.triggers_per_relation
            ));
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return arg(format!("length range [{}, {}] must satisfy 3 <= min <= max", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.no_relation_frac) {
            return arg(format!("no-relation fraction {} outside [0, 1]", self.no_relation_frac));
        }
        if self.dim == 0 {
            return arg("embedding width must be positive".into());
        }
        Ok(())
    }

    fn trigger_ids(&self, relation: usize) -> std::ops::Range<usize> {
        let start = 2 + (relation - 1) * self.triggers_per_relation;
        start..start + self.triggers_per_relation
    }

    fn first_noise_id(&self) -> usize {
        2 + self.relations * self.triggers_per_relation
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    /// `(vocab_size + 2) x dim`; the last two rows are CLS and SEP.
    pub embedding_table: DenseArray,
}

pub fn relation_names(relations: usize) -> Vec<String> {
    std::iter::once(NO_RELATION.to_string())
        .chain((1..=relations).map(|k| format!("rel_{k}")))
        .collect()
}

fn surface(id: usize) -> String {
    match id {
        0 => "[subj]".into(),
        1 => "[obj]".into(),
        _ => format!("w{id}"),
    }
}

/// Generates train, dev and test splits. Pure in `(config, config.seed)`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rows = config.vocab_size + 2;
    let table_values: Vec<f64> = (0..rows * config.dim)
        .map(|_| {
            let v: f32 = rng.sample(StandardNormal);
            v as f64
        })
        .collect();
    let table = DenseArray::matrix(rows, config.dim, table_values)?;
    let names = relation_names(config.relations);
    let mut split = |name: &str, count: usize| -> Result<Dataset> {
        let examples = (0..count)
            .map(|i| make_example(config, &table, &mut rng, format!("{name}-{i}")))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(names.clone(), examples, name, config.dim)
    };
    let train = split("train", config.train)?;
    let dev = split("dev", config.dev)?;
    let test = split("test", config.test)?;
    Ok(SyntheticTask {
        train,
        dev,
        test,
        embedding_table: table,
    })
}

fn make_example(config: &SynthConfig, table: &DenseArray, rng: &mut ChaCha8Rng, id: String) -> Result<TokenSequence> {
    let t = rng.random_range(config.min_len..=config.max_len);
    let label = if rng.random::<f64>() < config.no_relation_frac {
        0
    } else {
        rng.random_range(1..=config.relations)
    };
    let noise = config.first_noise_id()..config.vocab_size;
    let mut tokens: Vec<usize> = (0..t).map(|_| rng.random_range(noise.clone())).collect();
    let mut slots: Vec<usize> = (0..t).collect();
    slots.shuffle(rng);
    let (subj, obj) = (slots[0], slots[1]);
    tokens[subj] = 0;
    tokens[obj] = 1;
    let mut trigger_mask = vec![false; t];
    if label > 0 {
        let trig = slots[2];
        tokens[trig] = rng.random_range(config.trigger_ids(label));
        trigger_mask[trig] = true;
    }
    let cls = config.vocab_size;
    let sep = config.vocab_size + 1;
    let mut values = Vec::with_capacity((t + 2) * config.dim);
    for &tok in std::iter::once(&cls).chain(&tokens).chain(std::iter::once(&sep)) {
        values.extend_from_slice(table.row(tok));
    }
    Ok(TokenSequence {
        id,
        label,
        embeddings: DenseArray::matrix(t + 2, config.dim, values)?,
        token_strings: Some(tokens.iter().map(|&t| surface(t)).collect()),
        spans: Some(EntitySpans {
            subject: Span { start: subj + 1, end: subj + 2 },
            object: Span { start: obj + 1, end: obj + 2 },
        }),
        trigger_mask: Some(trigger_mask),
    })
}
