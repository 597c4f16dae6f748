//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vrepair::diffcodec::{TokenContextDiff, BOF, EOF};

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

const PUNCT: &[&str] = &[";", "(", ")", "=", "{", "}"];

fn random_token(rng: &mut ChaCha8Rng, alphabet: usize) -> String {
    if alphabet > 0 {
        format!("t{}", rng.gen_range(0..alphabet))
    } else if rng.gen_bool(0.3) {
        PUNCT.choose(rng).unwrap().to_string()
    } else {
        format!("v{}", rng.gen_range(0..500))
    }
}

/// A random function and a copy with 1 to 4 token edits. A nonzero
/// `alphabet` draws every token from that many symbols so that contexts
/// repeat; zero mixes a few punctuation tokens with many identifiers.
pub fn edit_pair(seed: u64, min_len: usize, max_len: usize, alphabet: usize) -> (Vec<String>, Vec<String>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.gen_range(min_len..=max_len);
    let src: Vec<String> = (0..len).map(|_| random_token(&mut rng, alphabet)).collect();
    let mut tgt = src.clone();
    for _ in 0..rng.gen_range(1..=4) {
        let at = rng.gen_range(0..=tgt.len());
        match rng.gen_range(0..3) {
            0 => {
                let k = rng.gen_range(1..=3);
                let new: Vec<String> = (0..k).map(|_| random_token(&mut rng, alphabet)).collect();
                tgt.splice(at..at, new);
            }
            1 if at < tgt.len() && tgt.len() > 1 => {
                let k = rng.gen_range(1..=3).min(tgt.len() - at);
                tgt.drain(at..at + k);
            }
            _ if at < tgt.len() => {
                let k = rng.gen_range(1..=3).min(tgt.len() - at);
                let new: Vec<String> = (0..rng.gen_range(1..=3)).map(|_| random_token(&mut rng, alphabet)).collect();
                tgt.splice(at..at + k, new);
            }
            _ => tgt.push(random_token(&mut rng, alphabet)),
        }
    }
    (src, tgt)
}

/// Every patched function, by trying each start position and end position
/// of each change in turn. Change `k+1` may start no earlier than where
/// change `k` resumes copying.
pub fn brute_force_applications(src: &[String], diff: &TokenContextDiff) -> BTreeSet<Vec<String>> {
    let n = diff.context_size;
    let mut pad: Vec<&str> = vec![BOF; n];
    pad.extend(src.iter().map(String::as_str));
    pad.extend(std::iter::repeat_n(EOF, n));
    let mut out = BTreeSet::new();
    go(&pad, n, diff, 0, 0, Vec::new(), &mut out);
    out
}

fn occurs(pad: &[&str], at: usize, ctx: &[String]) -> bool {
    at + ctx.len() <= pad.len() && ctx.iter().zip(&pad[at..]).all(|(c, t)| c == t)
}

fn real(pad: &[&str], n: usize, lo: usize, hi: usize) -> Vec<String> {
    (lo..hi)
        .filter(|&i| i >= n && i < pad.len() - n)
        .map(|i| pad[i].to_string())
        .collect()
}

fn go(
    pad: &[&str],
    n: usize,
    diff: &TokenContextDiff,
    k: usize,
    cursor: usize,
    built: Vec<String>,
    out: &mut BTreeSet<Vec<String>>,
) {
    if k == diff.ops.len() {
        let mut f = built;
        f.extend(real(pad, n, cursor, pad.len()));
        out.insert(f);
        return;
    }
    let op = &diff.ops[k];
    for p in cursor..pad.len() {
        if !occurs(pad, p, &op.start_ctx) {
            continue;
        }
        let change_at = p + n;
        let mut head = built.clone();
        head.extend(real(pad, n, cursor, change_at));
        head.extend(op.insertion.iter().cloned());
        match &op.end_ctx {
            None => go(pad, n, diff, k + 1, change_at, head, out),
            Some(end) => {
                for q in change_at..pad.len() {
                    if occurs(pad, q, end) {
                        go(pad, n, diff, k + 1, q, head.clone(), out);
                    }
                }
            }
        }
    }
}

/// A bounds-check fix: `&& index >= 0` is added after `index < len` and the
/// error value `-1` becomes `0`. `{ return` and `; }` each occur twice.
pub fn bounds_check_pair() -> (Vec<String>, Vec<String>) {
    let before = "int getValueAtIndex ( int * arrax , int index , int len ) { \
                  if ( index < len ) { return arrax [ index ] ; } \
                  else { return - 1 ; } }";
    let after = "int getValueAtIndex ( int * arrax , int index , int len ) { \
                 if ( index < len && index >= 0 ) { return arrax [ index ] ; } \
                 else { return 0 ; } }";
    (toks(before), toks(after))
}

/// Whether every context of `diff` occurs exactly once in the padded `src`.
pub fn contexts_unique(src: &[String], diff: &TokenContextDiff) -> bool {
    let n = diff.context_size;
    let mut pad: Vec<&str> = vec![BOF; n];
    pad.extend(src.iter().map(String::as_str));
    pad.extend(std::iter::repeat_n(EOF, n));
    let count = |ctx: &[String]| (0..pad.len()).filter(|&p| occurs(&pad, p, ctx)).count();
    diff.ops
        .iter()
        .all(|op| count(&op.start_ctx) == 1 && op.end_ctx.as_deref().is_none_or(|e| count(e) == 1))
}

/// Commit messages with their hand-assigned bug-fix label.
pub const MESSAGES: [(&str, bool); 30] = [
    ("Fix null deref bug in parser", true),
    ("Add new feature", false),
    ("fix: buffer overflow vulnerability in decoder", true),
    ("Solve issue #123", true),
    ("REPAIR broken ERROR handling", true),
    ("Fixes the bug in lexer", false),
    ("fixed the bug", false),
    ("Fix typo in README", false),
    ("Bug report template", false),
    ("prefix bugs", false),
    ("Repair fault in scheduler", true),
    ("fix problem with locking", true),
    ("Refactor error handling", false),
    ("Fix memory leak (issue 42)", true),
    ("hotfix: crash on startup error", false),
    ("FIX ISSUE", true),
    ("solve: race condition problem", true),
    ("Fix_bug in macro", false),
    ("[fix] off-by-one error", true),
    ("repairs the error path", false),
    ("Fix: vulnerability CVE-2020-1234", true),
    ("Merge branch 'fix' of github", false),
    ("bugfix for issue", false),
    ("Fix error-prone code", true),
    ("Update docs; fix links", false),
    ("Solve the faulty issue", true),
    ("This commit will fix the Problem.", true),
    ("fix\nbug", true),
    ("fix, solve and repair", false),
    ("error: fix", true),
];

use vrepair::encoding::{Sample, SampleMeta};
use vrepair::micronet::{Model, ModelConfig, ModelError};
use vrepair::synth::{corpus_vocab, generate_samples, Domain};
use vrepair::training::{train_loop, TrainConfig, TrainOutcome, Validator};

/// Replays a fixed metric trace, one value per evaluation.
pub struct Scripted {
    pub trace: Vec<f64>,
    pub calls: usize,
}

impl Validator for Scripted {
    fn evaluate(&mut self, _model: &Model) -> Result<f64, ModelError> {
        let v = self.trace[self.calls.min(self.trace.len() - 1)];
        self.calls += 1;
        Ok(v)
    }
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 16,
        dropout: 0.1,
        label_smoothing: 0.1,
        max_positions: 256,
    }
}

pub fn tiny_samples(count: usize, seed: u64) -> Vec<Sample> {
    generate_samples(Domain::Target, count, seed, 3)
}

/// Runs the training loop with a scripted validator evaluating after every
/// step. Also returns the models after 1, 2, ... steps of an identical run
/// without early stopping.
pub fn scripted_run(trace: &[f64]) -> (TrainOutcome, Vec<Model>, usize) {
    let samples = tiny_samples(16, 1);
    let vocab = corpus_vocab(&[&samples], 60);
    let model = Model::new(tiny_model_config(), vocab, 4).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        eval_interval: 1,
        max_steps: 10,
        base_lr: 1e-2,
        ..TrainConfig::default()
    };
    let mut v = Scripted {
        trace: trace.to_vec(),
        calls: 0,
    };
    let outcome = train_loop(model.clone(), &samples, &mut v, &config, config.base_lr).unwrap();
    let snapshots = (1..=trace.len())
        .map(|k| {
            let c = TrainConfig {
                max_steps: k,
                eval_interval: 1000,
                ..config.clone()
            };
            let mut never = Scripted { trace: vec![0.0], calls: 0 };
            train_loop(model.clone(), &samples, &mut never, &c, c.base_lr).unwrap().best
        })
        .collect();
    (outcome, snapshots, v.calls)
}

/// `count` samples with distinct single-token inputs, dated one day apart
/// from 2010-01-01.
pub fn dated_samples(count: usize) -> Vec<Sample> {
    let start = chrono::NaiveDate::from_ymd_opt(2010, 1, 1).unwrap();
    (0..count)
        .map(|i| Sample {
            cwe: "CWE-000".into(),
            input: vec!["CWE-000".into(), format!("x{i}")],
            target: vec!["y".into()],
            fixed: None,
            meta: SampleMeta {
                date: Some(start + chrono::Days::new(i as u64)),
                ..SampleMeta::default()
            },
        })
        .collect()
}
