mod common;

use proptest::prelude::*;
use regex::Regex;
use vrepair::ctok::tokenize;
use vrepair::encoding::LocalizationMode;
use vrepair::mining::{
    dedup, extract_function_pairs, filter_lengths, is_bugfix_message, mine, CommitRecord, FileChange, FunctionPair,
    LengthLimits, MiningConfig,
};

fn oracle(message: &str) -> bool {
    let fix = Regex::new(r"(?i)\b(fix|solve|repair)\b").unwrap();
    let bug = Regex::new(r"(?i)\b(bug|issue|problem|error|fault|vulnerability)\b").unwrap();
    fix.is_match(message) && bug.is_match(message)
}

#[test]
fn curated_messages_all_agree() {
    for (message, label) in common::MESSAGES {
        assert_eq!(is_bugfix_message(message), label, "{message:?}");
        assert_eq!(oracle(message), label, "{message:?}");
    }
}

const WORDS: &[&str] = &[
    "fix", "Fix", "FIXED", "fixes", "solve", "repair", "bug", "Bugs", "issue", "problem", "error", "fault",
    "vulnerability", "the", "crash", "prefix", "debug", "errors", "_fix",
];
const SEPARATORS: &[&str] = &[" ", ", ", ": ", "-", "\n", "(", ") ", "/", "."];

proptest! {
    #[test]
    fn rule_matches_regex_oracle(
        words in prop::collection::vec(prop::sample::select(WORDS), 0..8),
        seps in prop::collection::vec(prop::sample::select(SEPARATORS), 8),
    ) {
        let message: String = words.iter().zip(&seps).map(|(w, s)| format!("{w}{s}")).collect();
        prop_assert_eq!(is_bugfix_message(&message), oracle(&message));
    }

    #[test]
    fn dedup_is_idempotent(picks in prop::collection::vec(0usize..6, 0..20)) {
        let pool = pool();
        let pairs: Vec<FunctionPair> = picks.iter().map(|&i| pool[i].clone()).collect();
        let once = dedup(pairs.clone());
        prop_assert_eq!(dedup(once.clone()), once.clone());
        // order of first occurrence is kept
        let mut expected: Vec<usize> = Vec::new();
        for &i in &picks {
            if !expected.contains(&(i % 3)) {
                expected.push(i % 3);
            }
        }
        prop_assert_eq!(once.len(), expected.len());
    }
}

/// Six pairs over three distinct (function, fix) combinations: `i` and
/// `i + 3` differ only in their line layout.
fn pool() -> Vec<FunctionPair> {
    let fixes = [
        ("int f(int a) { return a; }", "int f(int a) { return a + 1; }"),
        ("int f(int a) { return a; }", "int f(int a) { return 0; }"),
        ("int g(int *p) { return *p; }", "int g(int *p) { if (!p) return 0; return *p; }"),
    ];
    let make = |b: &str, a: &str| FunctionPair {
        signature: vec![],
        before: tokenize(b).unwrap(),
        after: tokenize(a).unwrap(),
        meta: None,
    };
    let mut out: Vec<FunctionPair> = fixes.iter().map(|(b, a)| make(b, a)).collect();
    out.extend(fixes.iter().map(|(b, a)| make(&b.replace(' ', "\n"), a)));
    out
}

const BEFORE: &str = r#"
#include <string.h>
static int helper(int);
int keep(int a) { return a; }
/* changed */
int grow(char *dst, const char *src, int n)
{
    strcpy(dst, src);
    return n;
}
void gone(void) { }
struct point { int x, y; };
int moved(int a) { return a * 2; }
"#;

const AFTER: &str = r#"
#include <string.h>
static int helper(int);
int moved(int a) { return a * 3; }
int keep(int a) { return a; }
int grow(char *dst, const char *src, int n)
{
    strncpy(dst, src, n);
    return n;
}
void added(void) { }
struct point { int x, y; };
"#;

#[test]
fn changed_functions_are_paired_by_signature() {
    let pairs = extract_function_pairs(BEFORE, AFTER).unwrap();
    let names: Vec<&str> = pairs.iter().map(|p| p.signature[p.signature.len() - 1].as_str()).collect();
    assert_eq!(pairs.len(), 2, "{names:?}");
    for p in &pairs {
        assert_eq!(p.before.tokens.last().unwrap().text, "}");
        assert_ne!(p.before.lexemes(), p.after.lexemes());
        assert!(p.before.lexemes().starts_with(&p.signature));
        assert!(p.after.lexemes().starts_with(&p.signature));
    }
    assert!(pairs[0].signature.contains(&"grow".to_string()));
    assert!(pairs[1].signature.contains(&"moved".to_string()));
    // lines are those of the original file
    assert_eq!(pairs[0].before.tokens[0].line, 6);
}

#[test]
fn length_filter_counts_tag_and_markers() {
    let pair = pool().remove(0);
    // input: tag + 11 tokens + 2 markers = 14
    let keep = LengthLimits {
        max_input: 14,
        max_output: 100,
    };
    let drop = LengthLimits {
        max_input: 13,
        max_output: 100,
    };
    assert_eq!(filter_lengths(vec![pair.clone()], keep, 3, LocalizationMode::FirstLine).len(), 1);
    assert_eq!(filter_lengths(vec![pair.clone()], drop, 3, LocalizationMode::FirstLine).len(), 0);
    assert_eq!(filter_lengths(vec![pair], drop, 3, LocalizationMode::None).len(), 1);
}

#[test]
fn mine_counts_every_stage() {
    let commit = |message: &str, path: &str| CommitRecord {
        message: message.into(),
        files: vec![FileChange {
            path: path.into(),
            before: BEFORE.into(),
            after: AFTER.into(),
        }],
        meta: None,
    };
    let commits = vec![
        commit("Fix overflow bug", "a.c"),
        commit("Fix overflow bug again", "b.c"),
        commit("fix header error", "a.h"),
        commit("docs", "a.c"),
    ];
    let (pairs, stats) = mine(&commits, &MiningConfig::default(), 3, LocalizationMode::FirstLine);
    assert_eq!(stats.commits, 4);
    assert_eq!(stats.bugfix_commits, 3);
    assert_eq!(stats.c_commits, 2);
    assert_eq!(stats.function_pairs, 4);
    assert_eq!(stats.after_dedup, 2);
    assert_eq!(stats.after_length_filter, 2);
    assert_eq!(pairs.len(), 2);
}
