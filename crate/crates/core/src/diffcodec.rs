//! Token context diffs.
//!
//! A diff is an ordered list of changes. Each change is located by the
//! `n` tokens that precede it (the start context) and, when it removes
//! tokens, by the `n` retained tokens that follow the removed span (the end
//! context). Serialized, a change is
//!
//! ```text
//! <ModStart> start_ctx.. insertion.. [<ModEnd> end_ctx..]
//! ```
//!
//! and a diff is the concatenation of its changes. Contexts that would run
//! off either end of the function are padded with `<BOF>` / `<EOF>`.
//!
//! Applying a diff is ambiguous whenever a context occurs more than once;
//! [`enumerate_applications`] lists every distinct patched function.

use std::collections::HashSet;

use thiserror::Error;

pub const MOD_START: &str = "<ModStart>";
pub const MOD_END: &str = "<ModEnd>";
pub const BOF: &str = "<BOF>";
pub const EOF: &str = "<EOF>";

pub const DEFAULT_CONTEXT_SIZE: usize = 3;
pub const DEFAULT_INTERPRETATION_CAP: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChangeKind {
    Add,
    Delete,
    Replace,
}

/// One change of a diff. The kind is implied by the fields: no end context
/// is an add, an empty insertion is a delete, anything else a replace.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChangeOp {
    pub start_ctx: Vec<String>,
    pub end_ctx: Option<Vec<String>>,
    pub insertion: Vec<String>,
}

impl ChangeOp {
    pub fn kind(&self) -> ChangeKind {
        match (&self.end_ctx, self.insertion.is_empty()) {
            (None, _) => ChangeKind::Add,
            (Some(_), true) => ChangeKind::Delete,
            (Some(_), false) => ChangeKind::Replace,
        }
    }

    fn is_well_formed(&self, n: usize) -> bool {
        self.start_ctx.len() == n
            && match &self.end_ctx {
                None => !self.insertion.is_empty(),
                Some(end) => end.len() == n,
            }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenContextDiff {
    pub context_size: usize,
    pub ops: Vec<ChangeOp>,
}

impl TokenContextDiff {
    pub fn empty(context_size: usize) -> Self {
        Self {
            context_size,
            ops: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn is_well_formed(&self) -> bool {
        self.context_size > 0 && self.ops.iter().all(|op| op.is_well_formed(self.context_size))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed diff: {0}")]
    MalformedDiff(String),
    #[error("diff has no interpretation in the source function")]
    NoInterpretation,
}

pub fn serialize_diff(diff: &TokenContextDiff) -> Vec<String> {
    let mut out = Vec::new();
    for op in &diff.ops {
        out.push(MOD_START.to_string());
        out.extend(op.start_ctx.iter().cloned());
        out.extend(op.insertion.iter().cloned());
        if let Some(end) = &op.end_ctx {
            out.push(MOD_END.to_string());
            out.extend(end.iter().cloned());
        }
    }
    out
}

pub fn parse_diff<S: AsRef<str>>(
    tokens: &[S],
    context_size: usize,
) -> Result<TokenContextDiff, CodecError> {
    let malformed = |msg: String| Err(CodecError::MalformedDiff(msg));
    if context_size == 0 {
        return malformed("context size must be positive".into());
    }
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    if tokens.is_empty() {
        return Ok(TokenContextDiff::empty(context_size));
    }
    if tokens[0] != MOD_START {
        return malformed(format!("expected {MOD_START}, found {:?}", tokens[0]));
    }
    let mut ops = Vec::new();
    // segments between consecutive <ModStart> markers, leading one is empty
    for segment in tokens.split(|t| *t == MOD_START).skip(1) {
        if segment.len() < context_size
            || segment[..context_size].contains(&MOD_END)
        {
            return malformed("start context shorter than the context size".into());
        }
        let start_ctx: Vec<String> = segment[..context_size].iter().map(|t| t.to_string()).collect();
        let rest = &segment[context_size..];
        let op = match rest.iter().position(|t| *t == MOD_END) {
            None => {
                if rest.is_empty() {
                    return malformed("change without insertion or end context".into());
                }
                ChangeOp {
                    start_ctx,
                    end_ctx: None,
                    insertion: rest.iter().map(|t| t.to_string()).collect(),
                }
            }
            Some(at) => {
                let end = &rest[at + 1..];
                if end.contains(&MOD_END) {
                    return malformed(format!("stray {MOD_END}"));
                }
                if end.len() != context_size {
                    return malformed(format!(
                        "end context has {} tokens, expected {context_size}",
                        end.len()
                    ));
                }
                ChangeOp {
                    start_ctx,
                    end_ctx: Some(end.iter().map(|t| t.to_string()).collect()),
                    insertion: rest[..at].iter().map(|t| t.to_string()).collect(),
                }
            }
        };
        ops.push(op);
    }
    Ok(TokenContextDiff { context_size, ops })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Edit {
    Equal,
    Delete,
    Insert,
}

/// Minimal edit script via longest common subsequence. Common prefix and
/// suffix are stripped before the quadratic table is built.
fn lcs_script<S: AsRef<str>, T: AsRef<str>>(src: &[S], tgt: &[T]) -> Vec<Edit> {
    let eq = |i: usize, j: usize| src[i].as_ref() == tgt[j].as_ref();
    let mut prefix = 0;
    while prefix < src.len() && prefix < tgt.len() && eq(prefix, prefix) {
        prefix += 1;
    }
    let mut suffix = 0;
    while suffix < src.len() - prefix
        && suffix < tgt.len() - prefix
        && eq(src.len() - 1 - suffix, tgt.len() - 1 - suffix)
    {
        suffix += 1;
    }
    let a = &src[prefix..src.len() - suffix];
    let b = &tgt[prefix..tgt.len() - suffix];
    let (n, m) = (a.len(), b.len());
    // table[i][j] = LCS length of a[i..] and b[j..]
    let width = m + 1;
    let mut table = vec![0u32; (n + 1) * width];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i * width + j] = if a[i].as_ref() == b[j].as_ref() {
                table[(i + 1) * width + j + 1] + 1
            } else {
                table[(i + 1) * width + j].max(table[i * width + j + 1])
            };
        }
    }
    let mut script = vec![Edit::Equal; prefix];
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i].as_ref() == b[j].as_ref() {
            script.push(Edit::Equal);
            i += 1;
            j += 1;
        } else if j == m || (i < n && table[(i + 1) * width + j] >= table[i * width + j + 1]) {
            script.push(Edit::Delete);
            i += 1;
        } else {
            script.push(Edit::Insert);
            j += 1;
        }
    }
    script.extend(std::iter::repeat_n(Edit::Equal, suffix));
    script
}

/// A changed region: `src[src_range]` is replaced by `tgt[tgt_range]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub src_start: usize,
    pub src_end: usize,
    pub tgt_start: usize,
    pub tgt_end: usize,
}

/// Changed regions of a minimal edit script, with regions closer than
/// `min_gap` unchanged tokens merged.
pub fn hunks<S: AsRef<str>, T: AsRef<str>>(src: &[S], tgt: &[T], min_gap: usize) -> Vec<Hunk> {
    let mut out: Vec<Hunk> = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut open: Option<Hunk> = None;
    for edit in lcs_script(src, tgt) {
        match edit {
            Edit::Equal => {
                if let Some(h) = open.take() {
                    out.push(h);
                }
                i += 1;
                j += 1;
                continue;
            }
            Edit::Delete | Edit::Insert => {
                let h = open.get_or_insert(Hunk {
                    src_start: i,
                    src_end: i,
                    tgt_start: j,
                    tgt_end: j,
                });
                if edit == Edit::Delete {
                    i += 1;
                    h.src_end = i;
                } else {
                    j += 1;
                    h.tgt_end = j;
                }
            }
        }
    }
    out.extend(open);
    let mut merged: Vec<Hunk> = Vec::with_capacity(out.len());
    for h in out {
        match merged.last_mut() {
            Some(prev) if h.src_start - prev.src_end < min_gap => {
                prev.src_end = h.src_end;
                prev.tgt_end = h.tgt_end;
            }
            _ => merged.push(h),
        }
    }
    merged
}

fn padded<S: AsRef<str>>(src: &[S], n: usize) -> Vec<&str> {
    let mut v = Vec::with_capacity(src.len() + 2 * n);
    v.extend(std::iter::repeat_n(BOF, n));
    v.extend(src.iter().map(AsRef::as_ref));
    v.extend(std::iter::repeat_n(EOF, n));
    v
}

pub fn extract_diff<S: AsRef<str>, T: AsRef<str>>(
    src: &[S],
    tgt: &[T],
    context_size: usize,
) -> TokenContextDiff {
    assert!(context_size > 0, "context size must be positive");
    let n = context_size;
    let pad = padded(src, n);
    let owned = |range: std::ops::Range<usize>| pad[range].iter().map(|t| t.to_string()).collect();
    let ops = hunks(src, tgt, n)
        .into_iter()
        .map(|h| {
            // padded index of real index k is k + n
            let start_ctx = owned(h.src_start..h.src_start + n);
            let insertion = tgt[h.tgt_start..h.tgt_end]
                .iter()
                .map(|t| t.as_ref().to_string())
                .collect();
            let end_ctx = (h.src_end > h.src_start).then(|| owned(h.src_end + n..h.src_end + 2 * n));
            ChangeOp {
                start_ctx,
                end_ctx,
                insertion,
            }
        })
        .collect();
    TokenContextDiff {
        context_size,
        ops,
    }
}

/// Positions (in the padded stream) where `ctx` occurs.
fn match_positions(pad: &[&str], ctx: &[String]) -> Vec<usize> {
    if ctx.len() > pad.len() {
        return Vec::new();
    }
    (0..=pad.len() - ctx.len())
        .filter(|&p| ctx.iter().zip(&pad[p..]).all(|(c, t)| c == t))
        .collect()
}

struct Applier<'a> {
    pad: Vec<&'a str>,
    n: usize,
    diff: &'a TokenContextDiff,
    starts: Vec<Vec<usize>>,
    ends: Vec<Vec<usize>>,
}

impl<'a> Applier<'a> {
    fn new<S: AsRef<str>>(src: &'a [S], diff: &'a TokenContextDiff) -> Self {
        let n = diff.context_size;
        let pad = padded(src, n);
        let starts = diff
            .ops
            .iter()
            .map(|op| match_positions(&pad, &op.start_ctx))
            .collect();
        let ends = diff
            .ops
            .iter()
            .map(|op| {
                op.end_ctx
                    .as_ref()
                    .map(|e| match_positions(&pad, e))
                    .unwrap_or_default()
            })
            .collect();
        Self {
            pad,
            n,
            diff,
            starts,
            ends,
        }
    }

    /// Copy padded range `lo..hi` into `out`, skipping the sentinel padding.
    fn copy(&self, out: &mut Vec<String>, lo: usize, hi: usize) {
        let real_lo = lo.max(self.n);
        let real_hi = hi.min(self.pad.len() - self.n);
        if real_lo < real_hi {
            out.extend(self.pad[real_lo..real_hi].iter().map(|t| t.to_string()));
        }
    }

    fn build(&self, cuts: &[(usize, usize)]) -> Vec<String> {
        let mut out = Vec::new();
        let mut cursor = 0;
        for (op, &(change_at, resume_at)) in self.diff.ops.iter().zip(cuts) {
            self.copy(&mut out, cursor, change_at);
            out.extend(op.insertion.iter().cloned());
            cursor = resume_at;
        }
        self.copy(&mut out, cursor, self.pad.len());
        out
    }

    /// Depth-first over match tuples in lexicographic order. `cuts[k]` is
    /// (start of removed span, resume position) for change k. Returns false
    /// once `cap` distinct results are collected.
    fn visit(
        &self,
        k: usize,
        cursor: usize,
        cuts: &mut Vec<(usize, usize)>,
        seen: &mut HashSet<Vec<String>>,
        out: &mut Vec<Vec<String>>,
        cap: usize,
    ) -> bool {
        if k == self.diff.ops.len() {
            let result = self.build(cuts);
            if seen.insert(result.clone()) {
                out.push(result);
            }
            return out.len() < cap;
        }
        let n = self.n;
        let from = self.starts[k].partition_point(|&p| p < cursor);
        for &p in &self.starts[k][from..] {
            let change_at = p + n;
            match &self.diff.ops[k].end_ctx {
                None => {
                    cuts.push((change_at, change_at));
                    let go_on = self.visit(k + 1, change_at, cuts, seen, out, cap);
                    cuts.pop();
                    if !go_on {
                        return false;
                    }
                }
                Some(_) => {
                    let from_end = self.ends[k].partition_point(|&q| q < change_at);
                    for &q in &self.ends[k][from_end..] {
                        cuts.push((change_at, q));
                        let go_on = self.visit(k + 1, q, cuts, seen, out, cap);
                        cuts.pop();
                        if !go_on {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Every distinct function obtainable by applying `diff` to `src`, in
/// leftmost-first order of context match positions, at most `cap` of them.
///
/// Change `k+1` must start at or after the point where change `k` stops
/// consuming source tokens: the end of its start context for an add, the
/// start of its end context otherwise.
pub fn enumerate_applications<S: AsRef<str>>(
    src: &[S],
    diff: &TokenContextDiff,
    cap: usize,
) -> Result<Vec<Vec<String>>, CodecError> {
    if !diff.is_well_formed() {
        return Err(CodecError::MalformedDiff(
            "contexts do not match the context size".into(),
        ));
    }
    let applier = Applier::new(src, diff);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    if cap > 0 {
        applier.visit(0, 0, &mut Vec::new(), &mut seen, &mut out, cap);
    }
    if out.is_empty() {
        return Err(CodecError::NoInterpretation);
    }
    Ok(out)
}

pub fn count_interpretations<S: AsRef<str>>(src: &[S], diff: &TokenContextDiff) -> usize {
    enumerate_applications(src, diff, usize::MAX).map_or(0, |v| v.len())
}
