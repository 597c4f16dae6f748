//! Beam search over diff tokens and expansion of hypotheses into patches.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::ctok::TokenStream;
use crate::diffcodec::{enumerate_applications, parse_diff};
use crate::encoding::vocab::EOS;
use crate::encoding::{build_input, EncodingError, LocalizationMode};
use crate::micronet::{Memory, Model, ModelError};

pub const DEFAULT_BEAM_WIDTH: usize = 50;
pub const DEFAULT_MAX_LEN: usize = 100;

/// Anything that can score the next output lexeme after a batch of prefixes.
pub trait NextTokenScorer {
    /// For each prefix, the candidate next lexemes with their probabilities.
    /// Entries with zero probability may be omitted.
    fn next(&self, prefixes: &[Vec<String>]) -> Result<Vec<Vec<(String, f64)>>, ModelError>;
}

/// Scores continuations of one source sequence with a trained model.
pub struct ModelScorer<'m> {
    model: &'m Model,
    memory: Memory,
}

impl<'m> ModelScorer<'m> {
    pub fn new<S: AsRef<str>>(model: &'m Model, source: &[S]) -> Result<Self, ModelError> {
        let memory = model.encode(&[source])?;
        Ok(Self { model, memory })
    }
}

impl NextTokenScorer for ModelScorer<'_> {
    fn next(&self, prefixes: &[Vec<String>]) -> Result<Vec<Vec<(String, f64)>>, ModelError> {
        let vocab = &self.model.vocab;
        let ids: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| {
                std::iter::once(vocab.bos())
                    .chain(p.iter().map(|t| vocab.id(t)))
                    .collect()
            })
            .collect();
        let rows = vec![0; prefixes.len()];
        let src = &self.memory.src_lexemes[0];
        Ok(self
            .model
            .next_distributions(&self.memory, &rows, &ids)?
            .into_iter()
            .map(|d| d.by_lexeme(vocab, src))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output lexemes without the end-of-sequence token.
    pub tokens: Vec<String>,
    pub log_prob: f64,
    /// False when decoding hit the length limit before `</s>`.
    #[serde(default = "yes")]
    pub finished: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchCandidate {
    pub function: Vec<String>,
    pub hypothesis_rank: usize,
    pub interpretation_rank: usize,
    pub score: f64,
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Standard beam search by cumulative log probability, without length
/// normalization. Every step keeps the `width` best expansions of the live
/// hypotheses; those ending in `</s>` are set aside as finished. Search
/// stops once `width` finished hypotheses beat every live one, or after
/// `max_len` tokens, in which case the live hypotheses are returned as
/// unfinished. Ties are broken by parent rank, then by the scorer's
/// candidate order. The result is sorted by non-increasing log probability
/// and holds at most `width` entries.
pub fn neural_beam<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    width: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>, ModelError> {
    assert!(width >= 1, "beam width must be positive");
    let mut live: Vec<(Vec<String>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<String>> = live.iter().map(|(t, _)| t.clone()).collect();
        let dists = scorer.next(&prefixes)?;
        // (score, parent, candidate index)
        let mut expansions: Vec<(f64, usize, usize)> = Vec::new();
        for (h, dist) in dists.iter().enumerate() {
            for (c, (_, p)) in dist.iter().enumerate() {
                if *p > 0.0 {
                    expansions.push((live[h].1 + p.ln(), h, c));
                }
            }
        }
        expansions.sort_by(|a, b| by_score_desc(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        expansions.truncate(width);
        let mut next_live = Vec::with_capacity(width);
        for (score, h, c) in expansions {
            let lexeme = &dists[h][c].0;
            if lexeme == EOS {
                finished.push(Hypothesis {
                    tokens: live[h].0.clone(),
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut t = live[h].0.clone();
                t.push(lexeme.clone());
                next_live.push((t, score));
            }
        }
        live = next_live;
        finished.sort_by(|a, b| by_score_desc(a.log_prob, b.log_prob));
        finished.truncate(width);
        if finished.len() >= width {
            let worst_kept = finished[width - 1].log_prob;
            if live.iter().all(|(_, s)| *s <= worst_kept) {
                live.clear();
                break;
            }
        }
    }
    finished.extend(live.into_iter().map(|(tokens, log_prob)| Hypothesis {
        tokens,
        log_prob,
        finished: false,
    }));
    finished.sort_by(|a, b| by_score_desc(a.log_prob, b.log_prob));
    finished.truncate(width);
    Ok(finished)
}

/// Expands ranked diff hypotheses into patched functions: hypothesis-major,
/// interpretation-minor, dropping malformed diffs, identity patches and
/// duplicates (the best-ranked copy stays), capped at `width`.
pub fn expand_candidates<S: AsRef<str>>(
    function: &[S],
    hypotheses: &[Hypothesis],
    context_size: usize,
    width: usize,
) -> Vec<PatchCandidate> {
    let original: Vec<&str> = function.iter().map(AsRef::as_ref).collect();
    let mut seen: HashSet<Vec<String>> = HashSet::new();
    let mut out = Vec::new();
    'hyps: for (rank, h) in hypotheses.iter().enumerate() {
        if !h.finished {
            continue;
        }
        let Ok(diff) = parse_diff(&h.tokens, context_size) else {
            continue;
        };
        let Ok(patched) = enumerate_applications(function, &diff, width) else {
            continue;
        };
        for (i, f) in patched.into_iter().enumerate() {
            if out.len() == width {
                break 'hyps;
            }
            if f.iter().map(String::as_str).eq(original.iter().copied()) {
                continue;
            }
            if seen.insert(f.clone()) {
                out.push(PatchCandidate {
                    function: f,
                    hypothesis_rank: rank,
                    interpretation_rank: i,
                    score: h.log_prob,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repair {
    pub hypotheses: Vec<Hypothesis>,
    pub candidates: Vec<PatchCandidate>,
}

/// Neural beam over an already encoded input, then candidate expansion
/// against `function` (the same tokens without tag and markers).
pub fn vrepair_beam_encoded<S: AsRef<str>, T: AsRef<str>>(
    model: &Model,
    input: &[S],
    function: &[T],
    width: usize,
    max_len: usize,
    context_size: usize,
) -> Result<Repair, ModelError> {
    let scorer = ModelScorer::new(model, input)?;
    let hypotheses = neural_beam(&scorer, width, max_len)?;
    let candidates = expand_candidates(function, &hypotheses, context_size, width);
    Ok(Repair {
        hypotheses,
        candidates,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum RepairError {
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Full repair of one function given its suspicious line and CWE tag.
pub fn vrepair_beam(
    model: &Model,
    function: &TokenStream,
    vuln_line: u32,
    cwe: &str,
    width: usize,
    context_size: usize,
) -> Result<Repair, RepairError> {
    let input = build_input(function, &[vuln_line], cwe, LocalizationMode::FirstLine)?;
    Ok(vrepair_beam_encoded(
        model,
        &input,
        &function.lexemes(),
        width,
        DEFAULT_MAX_LEN,
        context_size,
    )?)
}

/// Greedy decoding of many sources at once; equivalent to width-1 beam
/// search per source but batched across sources.
pub fn greedy_batch<S: AsRef<str>>(
    model: &Model,
    sources: &[&[S]],
    max_len: usize,
) -> Result<Vec<Vec<String>>, ModelError> {
    let mut outputs: Vec<Vec<String>> = vec![Vec::new(); sources.len()];
    if sources.is_empty() {
        return Ok(outputs);
    }
    let memory = model.encode(sources)?;
    let vocab = &model.vocab;
    let mut prefixes: Vec<Vec<usize>> = vec![vec![vocab.bos()]; sources.len()];
    let mut active: Vec<usize> = (0..sources.len()).collect();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let batch: Vec<Vec<usize>> = active.iter().map(|&i| prefixes[i].clone()).collect();
        let dists = model.next_distributions(&memory, &active, &batch)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, d) in active.iter().zip(dists) {
            let ranked = d.by_lexeme(vocab, &memory.src_lexemes[i]);
            // first maximum, matching the beam's tie-break
            let mut best = 0;
            for (c, (_, p)) in ranked.iter().enumerate() {
                if *p > ranked[best].1 {
                    best = c;
                }
            }
            let lexeme = ranked[best].0.clone();
            if lexeme == EOS {
                continue;
            }
            prefixes[i].push(vocab.id(&lexeme));
            outputs[i].push(lexeme);
            still.push(i);
        }
        active = still;
    }
    Ok(outputs)
}
