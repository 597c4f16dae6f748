use crate::encoding::vocab::{Vocabulary, BOS, EOS};

use super::tape::{CopyTargets, Mat};

/// Padded source and target sequences of a training step.
///
/// The decoder reads `<s> y_1 .. y_m` and predicts `y_1 .. y_m </s>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[size * src_len]`, padded with the pad id.
    pub src_ids: Vec<usize>,
    pub src_lexemes: Vec<Vec<String>>,
    pub src_lens: Vec<usize>,
    /// `[size * tgt_len]` decoder inputs, padded with the pad id.
    pub dec_ids: Vec<usize>,
    /// Gold outputs per sample, ending in `</s>`.
    pub gold: Vec<Vec<String>>,
}

impl Batch {
    pub fn new<S: AsRef<str>, T: AsRef<str>>(pairs: &[(&[S], &[T])], vocab: &Vocabulary) -> Self {
        let size = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(1);
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        let pad = vocab.pad();
        let mut src_ids = vec![pad; size * src_len];
        let mut dec_ids = vec![pad; size * tgt_len];
        let mut src_lexemes = Vec::with_capacity(size);
        let mut src_lens = Vec::with_capacity(size);
        let mut gold = Vec::with_capacity(size);
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            for (j, lx) in src.iter().enumerate() {
                src_ids[b * src_len + j] = vocab.id(lx.as_ref());
            }
            src_lexemes.push(src.iter().map(|s| s.as_ref().to_string()).collect());
            src_lens.push(src.len());
            dec_ids[b * tgt_len] = vocab.id(BOS);
            for (t, lx) in tgt.iter().enumerate() {
                dec_ids[b * tgt_len + t + 1] = vocab.id(lx.as_ref());
            }
            let mut g: Vec<String> = tgt.iter().map(|s| s.as_ref().to_string()).collect();
            g.push(EOS.to_string());
            gold.push(g);
        }
        Self {
            size,
            src_len,
            tgt_len,
            src_ids,
            src_lexemes,
            src_lens,
            dec_ids,
            gold,
        }
    }

    /// True exactly on real (non-padding) source tokens.
    pub fn src_mask(&self, b: usize, j: usize) -> bool {
        j < self.src_lens[b]
    }

    /// True exactly on real decoder positions.
    pub fn tgt_mask(&self, b: usize, t: usize) -> bool {
        t < self.gold[b].len()
    }

    pub fn real_target_tokens(&self) -> usize {
        self.gold.iter().map(Vec::len).sum()
    }

    /// Soft targets for every decoder row.
    ///
    /// A fraction `1 - eps` of the mass goes to the gold lexeme, split
    /// equally between its vocabulary entry and the source positions that
    /// hold it (uniformly among those). If only one side can produce the
    /// lexeme it takes all of it; if neither can, `<unk>` does. The rest is
    /// spread uniformly over every non-pad vocabulary entry and every real
    /// source position. Rows are weighted so the loss is a mean over real
    /// target tokens.
    pub fn copy_targets(&self, vocab: &Vocabulary, eps: f64) -> CopyTargets {
        let rows = self.size * self.tgt_len;
        let vsize = vocab.len();
        let pad = vocab.pad();
        let mut qv = Mat::zeros((rows, vsize));
        let mut qc = Mat::zeros((rows, self.src_len));
        let mut weights = vec![0.0; rows];
        let w = 1.0 / self.real_target_tokens().max(1) as f64;
        for b in 0..self.size {
            let src = &self.src_lexemes[b];
            let support = (vsize - 1 + src.len()) as f64;
            for (t, lexeme) in self.gold[b].iter().enumerate() {
                let r = b * self.tgt_len + t;
                weights[r] = w;
                if eps > 0.0 {
                    let share = eps / support;
                    for v in 0..vsize {
                        if v != pad {
                            qv[[r, v]] = share;
                        }
                    }
                    for j in 0..src.len() {
                        qc[[r, j]] = share;
                    }
                }
                let gold_mass = 1.0 - eps;
                let in_vocab = vocab.get(lexeme).filter(|&v| v != pad);
                let hits: Vec<usize> = (0..src.len()).filter(|&j| &src[j] == lexeme).collect();
                let vocab_mass = match (in_vocab.is_some(), hits.is_empty()) {
                    (true, false) => gold_mass / 2.0,
                    (true, true) => gold_mass,
                    (false, false) => 0.0,
                    (false, true) => {
                        qv[[r, vocab.unk()]] += gold_mass;
                        continue;
                    }
                };
                if let Some(v) = in_vocab {
                    qv[[r, v]] += vocab_mass;
                }
                let per_hit = (gold_mass - vocab_mass) / hits.len().max(1) as f64;
                for j in hits {
                    qc[[r, j]] += per_hit;
                }
            }
        }
        CopyTargets {
            vocab: qv,
            copy: qc,
            weights,
            pad_id: pad,
        }
    }
}
