//! Sequence accuracy, patch accuracy and per-CWE breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("{what}: {left} predictions for {right} gold entries")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
}

fn check_len(what: &'static str, left: usize, right: usize) -> Result<(), EvalError> {
    if left == right {
        Ok(())
    } else {
        Err(EvalError::LengthMismatch { what, left, right })
    }
}

fn any_equal<S: AsRef<str>, T: AsRef<str>>(options: &[Vec<S>], gold: &[T]) -> bool {
    options.iter().any(|o| {
        o.len() == gold.len() && o.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref())
    })
}

fn mean(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64
    }
}

/// Per sample, whether any hypothesis equals the gold sequence.
pub fn sequence_hits<S: AsRef<str>, T: AsRef<str>>(
    beams: &[Vec<Vec<S>>],
    golds: &[Vec<T>],
) -> Result<Vec<bool>, EvalError> {
    check_len("sequence accuracy", beams.len(), golds.len())?;
    Ok(beams.iter().zip(golds).map(|(b, g)| any_equal(b, g)).collect())
}

/// Fraction of samples whose beam contains the gold sequence. An empty
/// dataset scores 0.
pub fn sequence_accuracy<S: AsRef<str>, T: AsRef<str>>(
    beams: &[Vec<Vec<S>>],
    golds: &[Vec<T>],
) -> Result<f64, EvalError> {
    Ok(mean(&sequence_hits(beams, golds)?))
}

/// Per sample, whether any candidate function equals the gold fix.
pub fn patch_hits<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<Vec<S>>],
    fixed: &[Vec<T>],
) -> Result<Vec<bool>, EvalError> {
    check_len("patch accuracy", candidates.len(), fixed.len())?;
    Ok(candidates
        .iter()
        .zip(fixed)
        .map(|(c, f)| any_equal(c, f))
        .collect())
}

pub fn patch_accuracy<S: AsRef<str>, T: AsRef<str>>(
    candidates: &[Vec<Vec<S>>],
    fixed: &[Vec<T>],
) -> Result<f64, EvalError> {
    Ok(mean(&patch_hits(candidates, fixed)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CweRow {
    pub hits: usize,
    pub total: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_sequence_accuracy: f64,
    pub hits: usize,
    pub total: usize,
    pub per_cwe: BTreeMap<String, CweRow>,
    pub patch_accuracy: Option<f64>,
    pub beam_width: usize,
    pub split: String,
}

/// Groups sequence hits by CWE tag.
pub fn per_cwe_report<S: AsRef<str>>(
    hits: &[bool],
    cwes: &[S],
    patch: Option<&[bool]>,
    beam_width: usize,
    split: &str,
) -> Result<EvalReport, EvalError> {
    check_len("per-CWE report", hits.len(), cwes.len())?;
    if let Some(p) = patch {
        check_len("patch hits", p.len(), hits.len())?;
    }
    let mut per_cwe: BTreeMap<String, CweRow> = BTreeMap::new();
    for (hit, cwe) in hits.iter().zip(cwes) {
        let row = per_cwe.entry(cwe.as_ref().to_string()).or_insert(CweRow {
            hits: 0,
            total: 0,
            fraction: 0.0,
        });
        row.total += 1;
        row.hits += usize::from(*hit);
    }
    for row in per_cwe.values_mut() {
        row.fraction = row.hits as f64 / row.total as f64;
    }
    Ok(EvalReport {
        overall_sequence_accuracy: mean(hits),
        hits: hits.iter().filter(|h| **h).count(),
        total: hits.len(),
        per_cwe,
        patch_accuracy: patch.map(mean),
        beam_width,
        split: split.to_string(),
    })
}

impl EvalReport {
    /// The `k` most common CWE tags, by total descending then by tag.
    pub fn top(&self, k: usize) -> Vec<(&str, &CweRow)> {
        let mut rows: Vec<(&str, &CweRow)> =
            self.per_cwe.iter().map(|(c, r)| (c.as_str(), r)).collect();
        rows.sort_by(|a, b| b.1.total.cmp(&a.1.total).then_with(|| a.0.cmp(b.0)));
        rows.truncate(k);
        rows
    }

    pub fn to_table(&self, k: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split {} beam {}", self.split, self.beam_width);
        let _ = writeln!(s, "{:<12} {:>8} {:>10}", "CWE", "count", "accuracy");
        for (cwe, row) in self.top(k) {
            let _ = writeln!(
                s,
                "{:<12} {:>8} {:>9.2}%",
                cwe,
                row.total,
                100.0 * row.fraction
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>8} {:>9.2}%  ({}/{})",
            "overall",
            self.total,
            100.0 * self.overall_sequence_accuracy,
            self.hits,
            self.total
        );
        if let Some(p) = self.patch_accuracy {
            let _ = writeln!(s, "patch accuracy {:.2}%", 100.0 * p);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cwe,hits,total,fraction\n");
        for (cwe, row) in self.top(usize::MAX) {
            let _ = writeln!(s, "{cwe},{},{},{}", row.hits, row.total, row.fraction);
        }
        s
    }
}
