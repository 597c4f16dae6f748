//! Synthetic C-like bug-fix corpora for desk-scale experiments.
//!
//! Functions are assembled from statement templates with random
//! identifiers, so most names are rare and must be copied from the input.
//! One statement is buggy and rewritten by a rule. Source rules are generic
//! fixes; target rules are CWE-tagged variants of the same edits written
//! with different surface tokens (`while` loops, `kmalloc`, `kfree`, ...).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctok::tokenize;
use crate::encoding::{build_vocab, denoising_sample, encode_pair, LocalizationMode, NoiseConfig, Sample, Vocabulary, GENERIC_CWE};
use crate::mining::{FunctionPair, PairMeta};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    LoopBound,
    NullCheck,
    DanglingPointer,
    NegativeIndex,
    BoundedCopy,
    OverflowCheck,
    Uninitialized,
    LengthCheck,
}

const RULES: [Rule; 8] = [
    Rule::LoopBound,
    Rule::NullCheck,
    Rule::DanglingPointer,
    Rule::NegativeIndex,
    Rule::BoundedCopy,
    Rule::OverflowCheck,
    Rule::Uninitialized,
    Rule::LengthCheck,
];

impl Rule {
    fn cwe(self, domain: Domain) -> &'static str {
        match (domain, self) {
            (Domain::Source, _) => GENERIC_CWE,
            (Domain::Target, Rule::LoopBound) => "CWE-193",
            (Domain::Target, Rule::NullCheck) => "CWE-476",
            (Domain::Target, Rule::DanglingPointer) => "CWE-416",
            (Domain::Target, Rule::NegativeIndex) => "CWE-125",
            (Domain::Target, Rule::BoundedCopy) => "CWE-120",
            (Domain::Target, Rule::OverflowCheck) => "CWE-190",
            (Domain::Target, Rule::Uninitialized) => "CWE-457",
            (Domain::Target, Rule::LengthCheck) => "CWE-787",
        }
    }
}

const SOURCE_KERNEL_RATE: f64 = 0.15;

const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: &[&str] = &["a", "e", "i", "o", "u"];

/// Random identifiers of two or three syllables, distinct within a function.
struct Namer<'r> {
    rng: &'r mut ChaCha8Rng,
    used: BTreeSet<String>,
}

impl Namer<'_> {
    fn fresh(&mut self) -> String {
        loop {
            let n = self.rng.gen_range(2..=3);
            let mut s = String::new();
            for _ in 0..n {
                s.push_str(ONSETS.choose(self.rng).unwrap());
                s.push_str(NUCLEI.choose(self.rng).unwrap());
            }
            if !crate::ctok::is_keyword(&s) && self.used.insert(s.clone()) {
                return s;
            }
        }
    }
}

/// The identifiers one function works with.
struct Names {
    func: String,
    arr: String,
    len: String,
    idx: String,
    obj: String,
    field: String,
    i: String,
    acc: String,
    tmp: String,
    ptr: String,
    buf: String,
    callees: [String; 2],
}

impl Names {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut n = Namer {
            rng,
            used: BTreeSet::new(),
        };
        Self {
            func: n.fresh(),
            arr: n.fresh(),
            len: n.fresh(),
            idx: n.fresh(),
            obj: n.fresh(),
            field: n.fresh(),
            i: n.fresh(),
            acc: n.fresh(),
            tmp: n.fresh(),
            ptr: n.fresh(),
            buf: n.fresh(),
            callees: [n.fresh(), n.fresh()],
        }
    }
}

fn filler(rng: &mut ChaCha8Rng, n: &Names) -> String {
    let k = rng.gen_range(1..10);
    let call = n.callees.choose(rng).unwrap();
    let (a, t, i, arr, len) = (&n.acc, &n.tmp, &n.i, &n.arr, &n.len);
    let (obj, field) = (&n.obj, &n.field);
    match rng.gen_range(0..12) {
        0 => format!("{a} = {t} + {k};"),
        1 => format!("{call}({a});"),
        2 => format!("if ({t} > {k}) {a} = {k};"),
        3 => format!("for ({i} = 0; {i} < {len}; {i}++) {arr}[{i}] = {k};"),
        4 => format!("{t} = {arr}[{k}];"),
        5 => format!("{a} = {t} * {len} - {k};"),
        6 => format!("{a} += {k};"),
        7 => format!("{call}({a}, {t});"),
        8 => format!("if ({a} == {t}) {{ {call}({a}); }}"),
        9 => format!("{t} = {obj}->{field};"),
        10 => format!("{obj}->{field} = {a};"),
        _ => format!("while ({t} > 0) {t}--;"),
    }
}

/// Buggy and fixed lines for one rule occurrence; the two differ in one
/// region only.
fn site(rule: Rule, kernel: bool, n: &Names, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<String>) {
    let (i, len, arr, acc, ptr, idx, buf, tmp) = (&n.i, &n.len, &n.arr, &n.acc, &n.ptr, &n.idx, &n.buf, &n.tmp);
    let field = &n.field;
    let k = rng.gen_range(1..10);
    let src = !kernel;
    let one = |b: String, a: String| (vec![b], vec![a]);
    match rule {
        Rule::LoopBound => {
            let body = [format!("{arr}[{i}] = {acc};"), format!("{acc} += {arr}[{i}];"), format!("{arr}[{i}] = {k};")]
                .choose(rng)
                .unwrap()
                .clone();
            if src {
                one(
                    format!("for ({i} = 0; {i} <= {len}; {i}++) {body}"),
                    format!("for ({i} = 0; {i} < {len}; {i}++) {body}"),
                )
            } else {
                let b = vec![format!("{i} = 0;"), format!("while ({i} <= {len}) {{ {body} {i}++; }}")];
                let a = vec![b[0].clone(), format!("while ({i} < {len}) {{ {body} {i}++; }}")];
                (b, a)
            }
        }
        Rule::NullCheck => {
            let size = [len.clone(), format!("{len} * {k}"), format!("sizeof(int) * {len}")].choose(rng).unwrap().clone();
            let (alloc, check) = if src {
                (format!("{ptr} = malloc({size});"), format!("if ({ptr} == NULL) return -1;"))
            } else {
                (format!("{ptr} = kmalloc({size}, GFP_KERNEL);"), format!("if (!{ptr}) return -ENOMEM;"))
            };
            let usage = [format!("{ptr}[0] = {acc};"), format!("memset({ptr}, 0, {len});")].choose(rng).unwrap().clone();
            (vec![alloc.clone(), usage.clone()], vec![alloc, check, usage])
        }
        Rule::DanglingPointer => {
            let free = if src { format!("free({ptr});") } else { format!("kfree({ptr});") };
            (vec![free.clone()], vec![free, format!("{ptr} = NULL;")])
        }
        Rule::NegativeIndex => {
            let then = if src { format!("{acc} = {arr}[{idx}];") } else { format!("return {arr}[{idx}];") };
            one(
                format!("if ({idx} < {len}) {then}"),
                if src {
                    format!("if ({idx} >= 0 && {idx} < {len}) {then}")
                } else {
                    format!("if ({idx} < {len} && {idx} >= 0) {then}")
                },
            )
        }
        Rule::BoundedCopy => {
            if src {
                one(format!("strcpy({buf}, {ptr});"), format!("strncpy({buf}, {ptr}, sizeof({buf}));"))
            } else {
                one(
                    format!("sprintf({buf}, \"%s\", {ptr});"),
                    format!("snprintf({buf}, sizeof({buf}), \"%s\", {ptr});"),
                )
            }
        }
        Rule::OverflowCheck => {
            if src {
                let stmt = format!("{acc} = {tmp} * {len};");
                (
                    vec![stmt.clone()],
                    vec![format!("if ({len} != 0 && {tmp} > INT_MAX / {len}) return -1;"), stmt],
                )
            } else {
                let stmt = format!("{acc} = {tmp} + {len};");
                (vec![stmt.clone()], vec![format!("if ({tmp} > INT_MAX - {len}) return -EINVAL;"), stmt])
            }
        }
        Rule::Uninitialized => {
            if src {
                one(format!("int {field};"), format!("int {field} = 0;"))
            } else {
                one(format!("char *{field};"), format!("char *{field} = NULL;"))
            }
        }
        Rule::LengthCheck => {
            if src {
                let stmt = format!("memcpy({buf}, {ptr}, {len});");
                (vec![stmt.clone()], vec![format!("if ({len} > sizeof({buf})) return -1;"), stmt])
            } else {
                let stmt = format!("copy_from_user({buf}, {ptr}, {len});");
                (
                    vec![stmt.clone()],
                    vec![format!("if ({len} > sizeof({buf})) return -EFAULT;"), stmt],
                )
            }
        }
    }
}

fn render(n: &Names, body: &[String], rng: &mut ChaCha8Rng) -> String {
    let ret = ["int", "long", "static int", "unsigned int"].choose(rng).unwrap();
    let mut s = format!(
        "{ret} {}(int *{}, int {}, int {}, struct {} *{}) {{\n    int {}, {}, {};\n    char *{};\n    char {}[{}];\n",
        n.func,
        n.arr,
        n.len,
        n.idx,
        n.field,
        n.obj,
        n.i,
        n.acc,
        n.tmp,
        n.ptr,
        n.buf,
        rng.gen_range(8..64),
    );
    for line in body {
        s.push_str("    ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str(&format!("    return {};\n}}\n", n.acc));
    s
}

/// One buggy/fixed function pair drawn from `domain`.
pub fn generate_pair(rng: &mut ChaCha8Rng, domain: Domain) -> FunctionPair {
    let names = Names::new(rng);
    let rule = *RULES.choose(rng).unwrap();
    // the target family uses kernel idioms for half its rules; the generic
    // source corpus only occasionally does
    let kernel = match domain {
        Domain::Source => rng.gen_bool(SOURCE_KERNEL_RATE),
        Domain::Target => !matches!(
            rule,
            Rule::DanglingPointer | Rule::NegativeIndex | Rule::OverflowCheck | Rule::Uninitialized
        ),
    };
    let (bad, good) = site(rule, kernel, &names, rng);
    let pre: Vec<String> = (0..rng.gen_range(0..=3)).map(|_| filler(rng, &names)).collect();
    let post: Vec<String> = (0..rng.gen_range(0..=2)).map(|_| filler(rng, &names)).collect();
    let body = |mid: &[String]| -> Vec<String> { pre.iter().chain(mid).chain(post.iter()).cloned().collect() };
    // both versions share everything outside the rule site
    let mut header_rng = rng.clone();
    let before = tokenize(&render(&names, &body(&bad), &mut header_rng)).expect("generated code lexes");
    let after = tokenize(&render(&names, &body(&good), rng)).expect("generated code lexes");
    FunctionPair {
        signature: before.tokens[..2].iter().map(|t| t.text.clone()).collect(),
        before,
        after,
        meta: Some(PairMeta {
            cwe_id: Some(rule.cwe(domain).to_string()),
            cve_id: None,
            date: None,
        }),
    }
}

/// `count` encoded samples of `domain`, deterministic in `seed`.
pub fn generate_samples(domain: Domain, count: usize, seed: u64, context_size: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let pair = generate_pair(&mut rng, domain);
            let cwe = pair.meta.as_ref().and_then(|m| m.cwe_id.clone()).unwrap();
            encode_pair(&pair, context_size, LocalizationMode::FirstLine, &cwe)
                .expect("generated pairs always change a line")
        })
        .collect()
}

/// Denoising samples built from the fixed functions of `samples`.
pub fn denoising_corpus(samples: &[Sample], noise: &NoiseConfig, seed: u64, context_size: usize) -> Vec<Sample> {
    samples
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let original = s.fixed.clone()?;
            denoising_sample(&original, noise, seed.wrapping_add(i as u64), context_size).ok()
        })
        .filter(|s| !s.target.is_empty())
        .collect()
}

/// Vocabulary over the inputs and targets of every given corpus.
pub fn corpus_vocab(corpora: &[&[Sample]], budget: usize) -> Vocabulary {
    let mut seqs: Vec<&[String]> = Vec::new();
    let mut cwes = BTreeSet::new();
    for corpus in corpora {
        for s in corpus.iter() {
            seqs.push(&s.input);
            seqs.push(&s.target);
            cwes.insert(s.cwe.clone());
        }
    }
    let cwes: Vec<String> = cwes.into_iter().collect();
    build_vocab(seqs, budget, &cwes)
}
