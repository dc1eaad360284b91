//! How often tokens of each kind survive to the final pooled graph.
//!
//! Counts are pooled over the whole corpus: a row's percentage is
//! `selected tokens / tokens` summed across every example, not an average of
//! per-example rates.

use std::collections::HashMap;
use std::fmt;

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SelectionRate {
    pub selected: usize,
    pub total: usize,
}

impl SelectionRate {
    /// Percentage selected, or `None` for an empty denominator.
    pub fn percent(&self) -> Option<f64> {
        (self.total > 0).then(|| 100.0 * self.selected as f64 / self.total as f64)
    }

    fn add(&mut self, selected: bool) {
        self.total += 1;
        self.selected += selected as usize;
    }
}

/// One `None` per row whose source annotation is missing from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionStats {
    pub all: SelectionRate,
    pub non_repetitive: Option<SelectionRate>,
    pub repetitive: Option<SelectionRate>,
    pub trigger: Option<SelectionRate>,
}

/// `final_positions[i]` holds the original positions (`1..=T`, SEP at `T+1`)
/// that survive every pooling stage for example `i`. SEP is not a token and
/// is ignored.
pub fn selection_stats(final_positions: &[Vec<usize>], dataset: &Dataset) -> Result<SelectionStats> {
    if final_positions.len() != dataset.examples.len() {
        return Err(Error::Argument(format!(
            "{} survivor lists for {} examples",
            final_positions.len(),
            dataset.examples.len()
        )));
    }
    let has_strings = dataset.examples.iter().all(|e| e.token_strings.is_some());
    let has_triggers = dataset.examples.iter().all(|e| e.trigger_mask.is_some());
    let mut all = SelectionRate::default();
    let mut non_rep = SelectionRate::default();
    let mut rep = SelectionRate::default();
    let mut trig = SelectionRate::default();
    for (ex, positions) in dataset.examples.iter().zip(final_positions) {
        let t = ex.token_count();
        let mut kept = vec![false; t];
        for &p in positions {
            if (1..=t).contains(&p) {
                kept[p - 1] = true;
            }
        }
        kept.iter().for_each(|&k| all.add(k));
        if has_strings {
            let lowered: Vec<String> = ex.token_strings.as_ref().unwrap().iter().map(|s| s.to_lowercase()).collect();
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for s in &lowered {
                *counts.entry(s).or_default() += 1;
            }
            for (s, &k) in lowered.iter().zip(&kept) {
                if counts[s.as_str()] >= 2 {
                    rep.add(k);
                } else {
                    non_rep.add(k);
                }
            }
        }
        if has_triggers {
            for (&is_trig, &k) in ex.trigger_mask.as_ref().unwrap().iter().zip(&kept) {
                if is_trig {
                    trig.add(k);
                }
            }
        }
    }
    Ok(SelectionStats {
        all,
        non_repetitive: has_strings.then_some(non_rep),
        repetitive: has_strings.then_some(rep),
        trigger: has_triggers.then_some(trig),
    })
}

impl fmt::Display for SelectionStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# tokens kept in the final pooled graph, counts pooled over the corpus")?;
        let rows = [
            ("all", Some(self.all)),
            ("non-repetitive", self.non_repetitive),
            ("repetitive", self.repetitive),
            ("trigger", self.trigger),
        ];
        for (i, (name, rate)) in rows.iter().enumerate() {
            let cell = match rate.and_then(|r| r.percent()) {
                Some(p) => format!("{p:.1}"),
                None => "n/a".into(),
            };
            if i + 1 < rows.len() {
                writeln!(f, "{name:<16}{cell}")?;
            } else {
                write!(f, "{name:<16}{cell}")?;
            }
        }
        Ok(())
    }
}
