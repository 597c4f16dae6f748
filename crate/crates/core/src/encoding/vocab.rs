use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::diffcodec::{BOF, EOF, MOD_END, MOD_START};

use super::{END_LOC, GENERIC_CWE, START_LOC};

pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const MASK: &str = "<MASK>";

/// Always present, in this order, at ids 0.. . Kept CWE tags follow.
pub const RESERVED: &[&str] = &[
    UNK, PAD, BOS, EOS, MOD_START, MOD_END, START_LOC, END_LOC, BOF, EOF, MASK, GENERIC_CWE,
];

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vocabulary is missing reserved token {0}")]
    MissingReserved(String),
    #[error("duplicate vocabulary entry {0:?}")]
    Duplicate(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        for r in RESERVED {
            if !index.contains_key(*r) {
                return Err(VocabError::MissingReserved(r.to_string()));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn get(&self, lexeme: &str) -> Option<usize> {
        self.index.get(lexeme).copied()
    }

    /// Id of `lexeme`, or of `<unk>` when it is out of vocabulary.
    pub fn id(&self, lexeme: &str) -> usize {
        self.get(lexeme).unwrap_or(self.unk())
    }

    pub fn lexeme(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn unk(&self) -> usize {
        self.index[UNK]
    }

    pub fn pad(&self) -> usize {
        self.index[PAD]
    }

    pub fn bos(&self) -> usize {
        self.index[BOS]
    }

    pub fn eos(&self) -> usize {
        self.index[EOS]
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VocabError> {
        let path = path.as_ref();
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VocabError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tokens(text.lines().map(String::from).collect())
    }
}

/// Reserved tokens and kept CWE tags, then the most frequent corpus lexemes
/// (ties by lexeme) until the vocabulary holds `size_budget` entries.
pub fn build_vocab<'a, I, S>(corpus: I, size_budget: usize, cwe_tokens: &[String]) -> Vocabulary
where
    I: IntoIterator<Item = &'a [S]>,
    S: AsRef<str> + 'a,
{
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut cwes: Vec<&String> = cwe_tokens.iter().filter(|c| !RESERVED.contains(&c.as_str())).collect();
    cwes.sort();
    cwes.dedup();
    tokens.extend(cwes.into_iter().cloned());
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for seq in corpus {
        for t in seq {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let taken: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !taken.contains(*t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let room = size_budget.saturating_sub(tokens.len());
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
    Vocabulary::from_tokens(tokens).expect("reserved tokens are unique and present")
}
