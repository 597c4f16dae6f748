//! Function pairs to model samples.
//!
//! The model input is a CWE tag followed by the buggy function's tokens,
//! with the suspicious line wrapped in `<StartLoc>` / `<EndLoc>`. The target
//! is the serialized token context diff from the buggy to the fixed function.

pub mod noise;
pub mod vocab;

use std::collections::{BTreeSet, HashMap};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use noise::{make_noise, sample_infill_length, NoiseConfig, NoiseError};
pub use vocab::{build_vocab, Vocabulary, VocabError, RESERVED};

use crate::ctok::TokenStream;
use crate::diffcodec::{self, extract_diff, hunks, serialize_diff};
use crate::mining::FunctionPair;

pub const START_LOC: &str = "<StartLoc>";
pub const END_LOC: &str = "<EndLoc>";
pub const GENERIC_CWE: &str = "CWE-000";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizationMode {
    #[default]
    FirstLine,
    None,
    AllLines,
    SingleBlock,
}

impl std::str::FromStr for LocalizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "first_line" => Ok(Self::FirstLine),
            "none" => Ok(Self::None),
            "all_lines" => Ok(Self::AllLines),
            "single_block" => Ok(Self::SingleBlock),
            other => Err(format!("unknown localization mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("line {0} has no tokens in the function")]
    Localization(u32),
    #[error("function pair has no change")]
    NoChange,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cve: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub cwe: String,
    pub input: Vec<String>,
    pub target: Vec<String>,
    /// The fixed function, kept for end-to-end patch scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed: Option<Vec<String>>,
    #[serde(default)]
    pub meta: SampleMeta,
}

impl Sample {
    /// The buggy function: the input without its CWE tag and markers.
    pub fn function_lexemes(&self) -> Vec<String> {
        self.input
            .iter()
            .skip(1)
            .filter(|t| *t != START_LOC && *t != END_LOC)
            .cloned()
            .collect()
    }
}

/// Source lines touched by the minimal edit script, ascending. A pure
/// insertion counts against the line of the token it is inserted before,
/// or the last line when it appends at the end.
pub fn changed_lines(before: &TokenStream, after: &[String]) -> Vec<u32> {
    let toks = &before.tokens;
    let mut lines = BTreeSet::new();
    for h in hunks(&before.lexemes(), after, 0) {
        if h.src_end > h.src_start {
            lines.extend(toks[h.src_start..h.src_end].iter().map(|t| t.line));
        } else if let Some(t) = toks.get(h.src_start).or(toks.last()) {
            lines.insert(t.line);
        }
    }
    lines.into_iter().collect()
}

/// Model input for a function: CWE tag, then the tokens with the lines in
/// `marked` wrapped according to `mode`.
pub fn build_input(
    function: &TokenStream,
    marked: &[u32],
    cwe: &str,
    mode: LocalizationMode,
) -> Result<Vec<String>, EncodingError> {
    let toks = &function.tokens;
    let span_of = |line: u32| -> Result<(usize, usize), EncodingError> {
        let first = toks
            .iter()
            .position(|t| t.line == line)
            .ok_or(EncodingError::Localization(line))?;
        let last = toks.iter().rposition(|t| t.line == line).unwrap();
        Ok((first, last))
    };
    // (first token, last token) of every wrapped region, in order
    let regions: Vec<(usize, usize)> = match mode {
        LocalizationMode::None => Vec::new(),
        _ if marked.is_empty() => Vec::new(),
        LocalizationMode::FirstLine => {
            vec![span_of(*marked.iter().min().unwrap())?]
        }
        LocalizationMode::AllLines => {
            let set: BTreeSet<u32> = marked.iter().copied().collect();
            set.into_iter().map(span_of).collect::<Result<_, _>>()?
        }
        LocalizationMode::SingleBlock => {
            let (lo, _) = span_of(*marked.iter().min().unwrap())?;
            let (_, hi) = span_of(*marked.iter().max().unwrap())?;
            vec![(lo, hi)]
        }
    };
    let mut out = Vec::with_capacity(toks.len() + 1 + 2 * regions.len());
    out.push(cwe.to_string());
    let mut regions = regions.into_iter().peekable();
    let mut open_until = None;
    for (i, t) in toks.iter().enumerate() {
        if open_until.is_none() {
            if let Some(&(lo, hi)) = regions.peek() {
                if lo == i {
                    out.push(START_LOC.to_string());
                    open_until = Some(hi);
                    regions.next();
                }
            }
        }
        out.push(t.text.clone());
        if open_until == Some(i) {
            out.push(END_LOC.to_string());
            open_until = None;
        }
    }
    Ok(out)
}

/// `CWE-xxx` when the id is kept, otherwise the generic tag. Accepts
/// `CWE-119` or a bare `119`.
pub fn assign_cwe_token(cwe_id: Option<&str>, kept: &BTreeSet<String>) -> String {
    match cwe_id.map(normalize_cwe) {
        Some(tok) if kept.contains(&tok) => tok,
        _ => GENERIC_CWE.to_string(),
    }
}

pub fn normalize_cwe(id: &str) -> String {
    let id = id.trim();
    if id.to_ascii_uppercase().starts_with("CWE-") {
        format!("CWE-{}", &id[4..])
    } else {
        format!("CWE-{id}")
    }
}

/// Smallest set of most frequent CWE ids (ties by id) covering at least
/// `coverage` of the labeled samples. Unlabeled and generic ids are not
/// counted.
pub fn build_cwe_kept_set<'a>(
    cwe_ids: impl IntoIterator<Item = Option<&'a str>>,
    coverage: f64,
) -> BTreeSet<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for id in cwe_ids.into_iter().flatten() {
        let tok = normalize_cwe(id);
        if tok != GENERIC_CWE {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut kept = BTreeSet::new();
    let mut covered = 0usize;
    for (id, count) in ranked {
        if covered as f64 >= coverage * total as f64 - 1e-9 {
            break;
        }
        covered += count;
        kept.insert(id);
    }
    kept
}

/// Encode one pair with its first changed line localized per `mode`.
pub fn encode_pair(
    pair: &FunctionPair,
    context_size: usize,
    mode: LocalizationMode,
    cwe: &str,
) -> Result<Sample, EncodingError> {
    let after = pair.after.lexemes();
    let lines = changed_lines(&pair.before, &after);
    if lines.is_empty() {
        return Err(EncodingError::NoChange);
    }
    let input = build_input(&pair.before, &lines, cwe, mode)?;
    let diff = extract_diff(&pair.before.lexemes(), &after, context_size);
    let meta = pair.meta.clone().unwrap_or_default();
    Ok(Sample {
        cwe: cwe.to_string(),
        input,
        target: serialize_diff(&diff),
        fixed: Some(after),
        meta: SampleMeta {
            cve: meta.cve_id,
            cwe: meta.cwe_id,
            date: meta.date,
            split: None,
        },
    })
}

/// Denoising sample: the noised function as input (generic tag, no
/// localization) and the diff back to the original as target.
pub fn denoising_sample(
    original: &[String],
    config: &NoiseConfig,
    seed: u64,
    context_size: usize,
) -> Result<Sample, NoiseError> {
    let (noised, original) = make_noise(original, config, seed)?;
    let diff = diffcodec::extract_diff(&noised, &original, context_size);
    let mut input = Vec::with_capacity(noised.len() + 1);
    input.push(GENERIC_CWE.to_string());
    input.extend(noised);
    Ok(Sample {
        cwe: GENERIC_CWE.to_string(),
        input,
        target: serialize_diff(&diff),
        fixed: Some(original),
        meta: SampleMeta::default(),
    })
}
