//! Source-domain corpus construction from commit records.
//!
//! Commits whose message looks like a bug fix contribute every `.c` function
//! whose body changed between the two file versions. Functions are located
//! without a parser: a file-scope identifier followed by a parenthesized
//! parameter list and an opening brace starts a definition, which ends at the
//! matching closing brace. Prototypes never reach the brace and are skipped.

use std::collections::HashSet;

use chrono::NaiveDate;
use log::warn;
use serde::{Deserialize, Serialize};

use crate::ctok::{self, Token, TokenKind, TokenStream};
use crate::diffcodec::{extract_diff, serialize_diff, DEFAULT_CONTEXT_SIZE};
use crate::encoding::{self, LocalizationMode};

pub const DEFAULT_FIX_WORDS: &[&str] = &["fix", "solve", "repair"];
pub const DEFAULT_BUG_WORDS: &[&str] = &["bug", "issue", "problem", "error", "fault", "vulnerability"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileChange {
    pub path: String,
    pub before: String,
    pub after: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cve_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub message: String,
    pub files: Vec<FileChange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<PairMeta>,
}

/// A function before and after a fix, matched by signature.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "PairRecord", try_from = "PairRecord")]
pub struct FunctionPair {
    pub signature: Vec<String>,
    pub before: TokenStream,
    pub after: TokenStream,
    pub meta: Option<PairMeta>,
}

/// On-disk form: lexeme arrays plus the line of every lexeme.
#[derive(Serialize, Deserialize)]
struct PairRecord {
    signature: Vec<String>,
    before: Vec<String>,
    before_lines: Vec<u32>,
    after: Vec<String>,
    after_lines: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta: Option<PairMeta>,
}

impl From<FunctionPair> for PairRecord {
    fn from(p: FunctionPair) -> Self {
        let lines = |s: &TokenStream| s.tokens.iter().map(|t| t.line).collect();
        PairRecord {
            before_lines: lines(&p.before),
            after_lines: lines(&p.after),
            before: p.before.lexemes(),
            after: p.after.lexemes(),
            signature: p.signature,
            meta: p.meta,
        }
    }
}

impl TryFrom<PairRecord> for FunctionPair {
    type Error = String;

    fn try_from(r: PairRecord) -> Result<Self, String> {
        Ok(FunctionPair {
            signature: r.signature,
            before: stream_from_parts(r.before, r.before_lines)?,
            after: stream_from_parts(r.after, r.after_lines)?,
            meta: r.meta,
        })
    }
}

/// Rebuild a stream from lexemes and lines. Kinds are re-derived from the
/// lexeme shape since only the text matters downstream.
pub fn stream_from_parts(lexemes: Vec<String>, lines: Vec<u32>) -> Result<TokenStream, String> {
    if lexemes.len() != lines.len() {
        return Err(format!(
            "{} lexemes but {} line numbers",
            lexemes.len(),
            lines.len()
        ));
    }
    let tokens = lexemes
        .into_iter()
        .zip(lines)
        .map(|(text, line)| {
            let kind = guess_kind(&text);
            Token { text, kind, line }
        })
        .collect();
    Ok(TokenStream::new(tokens))
}

fn guess_kind(text: &str) -> TokenKind {
    let first = text.chars().next().unwrap_or(' ');
    if ctok::is_keyword(text) {
        TokenKind::Keyword
    } else if text.ends_with('"') {
        TokenKind::StringLiteral
    } else if text.ends_with('\'') && text.len() > 1 {
        TokenKind::CharLiteral
    } else if first.is_ascii_digit() || (first == '.' && text.len() > 1) {
        TokenKind::Number
    } else if first == '_' || first.is_alphabetic() {
        TokenKind::Identifier
    } else {
        TokenKind::Punctuator
    }
}

/// Keyword heuristic for bug-fix commit messages: one word from each list
/// must occur as a whole word, ignoring case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageFilter {
    pub fix_words: Vec<String>,
    pub bug_words: Vec<String>,
}

impl Default for MessageFilter {
    fn default() -> Self {
        Self {
            fix_words: DEFAULT_FIX_WORDS.iter().map(|s| s.to_string()).collect(),
            bug_words: DEFAULT_BUG_WORDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MessageFilter {
    pub fn matches(&self, message: &str) -> bool {
        let words: HashSet<String> = message
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let any = |list: &[String]| list.iter().any(|k| words.contains(&k.to_lowercase()));
        any(&self.fix_words) && any(&self.bug_words)
    }
}

pub fn is_bugfix_message(message: &str) -> bool {
    MessageFilter::default().matches(message)
}

/// A located function definition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionDef {
    pub signature: Vec<String>,
    pub tokens: TokenStream,
}

fn matching_close(tokens: &[Token], open_at: usize, open: &str, close: &str) -> Option<usize> {
    let mut depth = 0usize;
    for (i, t) in tokens.iter().enumerate().skip(open_at) {
        if t.text == open {
            depth += 1;
        } else if t.text == close {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

/// Full function definitions of a translation unit, in source order.
pub fn find_functions(stream: &TokenStream) -> Vec<FunctionDef> {
    let toks = &stream.tokens;
    let mut out = Vec::new();
    let mut decl_start = 0;
    let mut depth = 0usize;
    let mut i = 0;
    while i < toks.len() {
        let t = &toks[i];
        if t.kind == TokenKind::Preprocessor {
            if depth == 0 {
                decl_start = i + 1;
            }
            i += 1;
            continue;
        }
        match t.text.as_str() {
            "{" => depth += 1,
            "}" => {
                depth = depth.saturating_sub(1);
                if depth == 0 {
                    decl_start = i + 1;
                }
            }
            ";" if depth == 0 => decl_start = i + 1,
            "(" if depth == 0
                && i > decl_start
                && toks[i - 1].kind == TokenKind::Identifier =>
            {
                if let Some(close) = matching_close(toks, i, "(", ")") {
                    let header = &toks[decl_start..=close];
                    let plain = header
                        .iter()
                        .all(|t| !matches!(t.text.as_str(), "=" | ";" | "{" | "}"));
                    if plain && toks.get(close + 1).is_some_and(|t| t.text == "{") {
                        if let Some(end) = matching_close(toks, close + 1, "{", "}") {
                            out.push(FunctionDef {
                                signature: header.iter().map(|t| t.text.clone()).collect(),
                                tokens: stream.slice(decl_start..end + 1),
                            });
                            i = end + 1;
                            decl_start = i;
                            continue;
                        }
                    }
                    i = close + 1;
                    continue;
                }
            }
            _ => {}
        }
        i += 1;
    }
    out
}

/// Changed functions between two versions of one file, matched by
/// signature. Functions present in only one version are ignored.
pub fn extract_function_pairs(
    before_text: &str,
    after_text: &str,
) -> Result<Vec<FunctionPair>, ctok::LexError> {
    let before = find_functions(&ctok::tokenize(before_text)?);
    let mut after: Vec<Option<FunctionDef>> = find_functions(&ctok::tokenize(after_text)?)
        .into_iter()
        .map(Some)
        .collect();
    let mut pairs = Vec::new();
    for b in before {
        let slot = after
            .iter_mut()
            .find(|a| a.as_ref().is_some_and(|a| a.signature == b.signature));
        let Some(a) = slot.and_then(Option::take) else {
            continue;
        };
        if !b.tokens.lexemes_eq(&a.tokens) {
            pairs.push(FunctionPair {
                signature: b.signature,
                before: b.tokens,
                after: a.tokens,
                meta: None,
            });
        }
    }
    Ok(pairs)
}

/// Keeps the first pair of every (function, diff) combination, with the
/// diff taken at the default context size.
pub fn dedup(pairs: Vec<FunctionPair>) -> Vec<FunctionPair> {
    let mut seen = HashSet::new();
    pairs
        .into_iter()
        .filter(|p| {
            let before = p.before.lexemes();
            let diff = serialize_diff(&extract_diff(&before, &p.after.lexemes(), DEFAULT_CONTEXT_SIZE));
            seen.insert((before, diff))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthLimits {
    pub max_input: usize,
    pub max_output: usize,
}

impl Default for LengthLimits {
    fn default() -> Self {
        Self {
            max_input: 1000,
            max_output: 100,
        }
    }
}

/// Drops pairs whose encoded input (CWE tag and localization markers
/// included) or serialized diff is longer than the limits.
pub fn filter_lengths(
    pairs: Vec<FunctionPair>,
    limits: LengthLimits,
    context_size: usize,
    mode: LocalizationMode,
) -> Vec<FunctionPair> {
    pairs
        .into_iter()
        .filter(|p| {
            let Ok(sample) = encoding::encode_pair(p, context_size, mode, "CWE-000") else {
                return false;
            };
            sample.input.len() <= limits.max_input && sample.target.len() <= limits.max_output
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub messages: MessageFilter,
    /// When false every commit is kept, as for curated vulnerability corpora.
    pub filter_messages: bool,
    pub limits: LengthLimits,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            messages: MessageFilter::default(),
            filter_messages: true,
            limits: LengthLimits::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MiningStats {
    pub commits: usize,
    pub bugfix_commits: usize,
    pub c_commits: usize,
    pub skipped_files: usize,
    pub function_pairs: usize,
    pub after_dedup: usize,
    pub after_length_filter: usize,
}

pub fn mine(
    commits: &[CommitRecord],
    config: &MiningConfig,
    context_size: usize,
    mode: LocalizationMode,
) -> (Vec<FunctionPair>, MiningStats) {
    let mut stats = MiningStats {
        commits: commits.len(),
        ..Default::default()
    };
    let mut pairs = Vec::new();
    for commit in commits {
        if config.filter_messages && !config.messages.matches(&commit.message) {
            continue;
        }
        stats.bugfix_commits += 1;
        let c_files: Vec<_> = commit.files.iter().filter(|f| f.path.ends_with(".c")).collect();
        if c_files.is_empty() {
            continue;
        }
        stats.c_commits += 1;
        for file in c_files {
            match extract_function_pairs(&file.before, &file.after) {
                Ok(found) => pairs.extend(found.into_iter().map(|mut p| {
                    p.meta = commit.meta.clone();
                    p
                })),
                Err(e) => {
                    warn!("skipping {}: {e}", file.path);
                    stats.skipped_files += 1;
                }
            }
        }
    }
    stats.function_pairs = pairs.len();
    let pairs = dedup(pairs);
    stats.after_dedup = pairs.len();
    let pairs = filter_lengths(pairs, config.limits, context_size, mode);
    stats.after_length_filter = pairs.len();
    (pairs, stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "#include <stdio.h>\n\
        static int helper(int x);\n\
        int add(int a, int b) {\n  return a + b;\n}\n\
        /* comment */\n\
        int sub(int a, int b)\n{\n  int r = a - b;\n  return r;\n}\n\
        struct s { int f; };\n";

    #[test]
    fn message_rule() {
        assert!(is_bugfix_message("Fix null deref bug in parser"));
        assert!(!is_bugfix_message("Add new feature"));
        assert!(!is_bugfix_message("prefix bugs"));
        assert!(is_bugfix_message("REPAIR: memory ERROR"));
        assert!(!is_bugfix_message("fixed the bug"));
    }

    #[test]
    fn finds_definitions_not_prototypes() {
        let defs = find_functions(&ctok::tokenize(FILE).unwrap());
        let sigs: Vec<String> = defs.iter().map(|d| d.signature.join(" ")).collect();
        assert_eq!(sigs, ["int add ( int a , int b )", "int sub ( int a , int b )"]);
        assert_eq!(defs[0].tokens.tokens.last().unwrap().text, "}");
        assert_eq!(defs[1].tokens.tokens[0].line, 7);
    }

    #[test]
    fn identical_files_have_no_pairs() {
        assert!(extract_function_pairs(FILE, FILE).unwrap().is_empty());
    }

    #[test]
    fn one_edited_function_is_one_pair() {
        let after = FILE.replace("return a + b;", "return a + b + 0;");
        let pairs = extract_function_pairs(FILE, &after).unwrap();
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].signature.join(" "), "int add ( int a , int b )");
    }

    #[test]
    fn renamed_function_is_ignored() {
        let after = FILE.replace("int add(int a, int b) {\n  return a + b;", "int plus(int a, int b) {\n  return b + a;");
        assert!(extract_function_pairs(FILE, &after).unwrap().is_empty());
    }

    #[test]
    fn comment_only_change_is_not_a_pair() {
        let after = FILE.replace("return r;", "return r; // done");
        assert!(extract_function_pairs(FILE, &after).unwrap().is_empty());
    }

    #[test]
    fn dedup_keeps_distinct_fixes() {
        let after1 = FILE.replace("return a + b;", "return a + b + 0;");
        let after2 = FILE.replace("return a + b;", "return b + a;");
        let p1 = extract_function_pairs(FILE, &after1).unwrap();
        let p2 = extract_function_pairs(FILE, &after2).unwrap();
        let all = [p1.clone(), p1.clone(), p2].concat();
        let kept = dedup(all);
        assert_eq!(kept.len(), 2);
        assert_eq!(dedup(kept.clone()), kept);
    }

    #[test]
    fn pair_record_round_trip() {
        let after = FILE.replace("return a + b;", "return a + b + 0;");
        let mut pair = extract_function_pairs(FILE, &after).unwrap().remove(0);
        pair.meta = Some(PairMeta {
            cwe_id: Some("CWE-119".into()),
            cve_id: Some("CVE-2017-0001".into()),
            date: NaiveDate::from_ymd_opt(2017, 3, 1),
        });
        let json = serde_json::to_string(&pair).unwrap();
        let back: FunctionPair = serde_json::from_str(&json).unwrap();
        assert!(back.before.lexemes_eq(&pair.before));
        assert_eq!(back.meta, pair.meta);
        assert_eq!(
            back.after.tokens.iter().map(|t| t.line).collect::<Vec<_>>(),
            pair.after.tokens.iter().map(|t| t.line).collect::<Vec<_>>()
        );
    }

    #[test]
    fn unlexable_file_is_skipped_and_counted() {
        let commits = vec![CommitRecord {
            message: "fix bug".into(),
            files: vec![FileChange {
                path: "a.c".into(),
                before: "int f() { return \"x; }".into(),
                after: "int f() { return 0; }".into(),
            }],
            meta: None,
        }];
        let (pairs, stats) = mine(&commits, &MiningConfig::default(), 3, LocalizationMode::FirstLine);
        assert!(pairs.is_empty());
        assert_eq!(stats.skipped_files, 1);
    }
}
