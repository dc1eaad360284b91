//! Examples, datasets, file ingestion, the synthetic trigger task, metrics
//! and the token-selection analyzer.

pub mod analysis;
pub mod gdeb;
pub mod metrics;
pub mod synth;

use std::collections::HashSet;

use crate::diffcore::DenseArray;
use crate::error::{Error, Result};

pub use analysis::{selection_stats, SelectionRate, SelectionStats};
pub use gdeb::{load_embedding_file, read_dataset, save_embedding_file, write_dataset};
pub use metrics::{accuracy, micro_f1, MicroF1};
pub use synth::{generate_synthetic, SynthConfig, SyntheticTask};

/// Name of the catch-all relation excluded from micro-F1.
pub const NO_RELATION: &str = "no_relation";

/// Half-open token range `[start, end)` in 1-based token positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// True when the span is non-empty and inside tokens `1..=tokens`.
    pub fn within(&self, tokens: usize) -> bool {
        self.start >= 1 && self.start < self.end && self.end <= tokens + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntitySpans {
    pub subject: Span,
    pub object: Span,
}

/// One example. `embeddings` has `T + 2` rows: CLS, the `T` tokens, SEP.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub id: String,
    pub label: usize,
    pub embeddings: DenseArray,
    pub token_strings: Option<Vec<String>>,
    pub spans: Option<EntitySpans>,
    pub trigger_mask: Option<Vec<bool>>,
}

impl TokenSequence {
    /// `T`, the number of tokens between CLS and SEP.
    pub fn token_count(&self) -> usize {
        self.embeddings.rows().saturating_sub(2)
    }

    pub fn validate(&self, input_width: usize, classes: usize) -> Result<()> {
        let t = self.token_count();
        let bad = |msg: String| Err(Error::Input(format!("example `{}`: {msg}", self.id)));
        if self.embeddings.rank() != 2 || self.embeddings.cols() != input_width {
            return bad(format!(
                "embedding shape {:?} does not match width {input_width}",
                self.embeddings.shape()
            ));
        }
        if t == 0 {
            return bad("no tokens between CLS and SEP".into());
        }
        if self.label >= classes {
            return bad(format!("label {} outside {classes} relations", self.label));
        }
        if let Some(s) = &self.token_strings {
            if s.len() != t {
                return bad(format!("{} surface forms for {t} tokens", s.len()));
            }
        }
        if let Some(sp) = &self.spans {
            if !sp.subject.within(t) || !sp.object.within(t) {
                return bad(format!("span out of range for {t} tokens"));
            }
        }
        if let Some(m) = &self.trigger_mask {
            if m.len() != t {
                return bad(format!("trigger mask length {} for {t} tokens", m.len()));
            }
        }
        if !self.embeddings.all_finite() {
            return bad("non-finite embedding value".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub relations: Vec<String>,
    pub examples: Vec<TokenSequence>,
    pub split: String,
    pub input_width: usize,
}

impl Dataset {
    pub fn new(relations: Vec<String>, examples: Vec<TokenSequence>, split: &str, input_width: usize) -> Result<Self> {
        let ds = Self {
            relations,
            examples,
            split: split.to_string(),
            input_width,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for ex in &self.examples {
            ex.validate(self.input_width, self.relations.len())?;
            if !ids.insert(ex.id.as_str()) {
                return Err(Error::Input(format!("duplicate example id `{}`", ex.id)));
            }
        }
        Ok(())
    }

    /// Index of the `no_relation` class, when the vocabulary has one.
    pub fn no_relation(&self) -> Option<usize> {
        self.relations.iter().position(|r| r == NO_RELATION)
    }

    pub fn class_count(&self) -> usize {
        self.relations.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}
