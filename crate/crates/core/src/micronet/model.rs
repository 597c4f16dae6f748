use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::encoding::vocab::Vocabulary;

use super::batch::Batch;
use super::tape::{sigmoid, AttnLayout, Graph, Mat, NodeId};
use super::{ModelConfig, ModelError};

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Xavier,
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    init: Init,
}

#[derive(Default)]
struct Registry {
    specs: Vec<Spec>,
}

impl Registry {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> usize {
        self.specs.push(Spec {
            name: name.into(),
            rows,
            cols,
            init,
        });
        self.specs.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.add(format!("{prefix}.gain"), 1, d, Init::Ones),
            bias: self.add(format!("{prefix}.bias"), 1, d, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            wq: self.add(format!("{prefix}.wq"), d, d, Init::Xavier),
            wk: self.add(format!("{prefix}.wk"), d, d, Init::Xavier),
            wv: self.add(format!("{prefix}.wv"), d, d, Init::Xavier),
            wo: self.add(format!("{prefix}.wo"), d, d, Init::Xavier),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, ff: usize) -> Ffn {
        Ffn {
            w1: self.add(format!("{prefix}.w1"), d, ff, Init::Xavier),
            b1: self.add(format!("{prefix}.b1"), 1, ff, Init::Zeros),
            w2: self.add(format!("{prefix}.w2"), ff, d, Init::Xavier),
            b2: self.add(format!("{prefix}.b2"), 1, d, Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    embed: usize,
    pos_enc: usize,
    pos_dec: usize,
    enc: Vec<EncLayer>,
    enc_ln: Norm,
    dec: Vec<DecLayer>,
    dec_ln: Norm,
    out_w: usize,
    out_b: usize,
    gate_h: usize,
    gate_c: usize,
    gate_b: usize,
}

fn layout(cfg: &ModelConfig, vocab: usize) -> (Layout, Vec<Spec>) {
    let d = cfg.model_dim;
    let ff = cfg.ff_dim;
    let emb_std = 1.0 / (d as f64).sqrt();
    let mut r = Registry::default();
    let embed = r.add("embed", vocab, d, Init::Normal(emb_std));
    let pos_enc = r.add("pos_enc", cfg.max_positions, d, Init::Normal(emb_std));
    let pos_dec = r.add("pos_dec", cfg.max_positions, d, Init::Normal(emb_std));
    let enc = (0..cfg.num_layers)
        .map(|l| EncLayer {
            ln_attn: r.norm(&format!("enc{l}.ln_attn"), d),
            attn: r.attn(&format!("enc{l}.attn"), d),
            ln_ffn: r.norm(&format!("enc{l}.ln_ffn"), d),
            ffn: r.ffn(&format!("enc{l}.ffn"), d, ff),
        })
        .collect();
    let enc_ln = r.norm("enc.ln", d);
    let dec = (0..cfg.num_layers)
        .map(|l| DecLayer {
            ln_self: r.norm(&format!("dec{l}.ln_self"), d),
            self_attn: r.attn(&format!("dec{l}.self"), d),
            ln_cross: r.norm(&format!("dec{l}.ln_cross"), d),
            cross: r.attn(&format!("dec{l}.cross"), d),
            ln_ffn: r.norm(&format!("dec{l}.ln_ffn"), d),
            ffn: r.ffn(&format!("dec{l}.ffn"), d, ff),
        })
        .collect();
    let dec_ln = r.norm("dec.ln", d);
    let out_w = r.add("out.w", d, vocab, Init::Xavier);
    let out_b = r.add("out.b", 1, vocab, Init::Zeros);
    let gate_h = r.add("gate.w_dec", d, 1, Init::Xavier);
    let gate_c = r.add("gate.w_ctx", d, 1, Init::Xavier);
    let gate_b = r.add("gate.b", 1, 1, Init::Zeros);
    let l = Layout {
        embed,
        pos_enc,
        pos_dec,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out_w,
        out_b,
        gate_h,
        gate_c,
        gate_b,
    };
    (l, r.specs)
}

/// Weights of the encoder-decoder plus the optimizer step count.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    names: Vec<String>,
    params: Vec<Mat>,
    layout: Layout,
}

/// Encoder output for a set of source sequences.
#[derive(Debug, Clone)]
pub struct Memory {
    /// `[sources * src_len, d]`.
    pub hidden: Mat,
    pub src_len: usize,
    pub src_lens: Vec<usize>,
    pub src_lexemes: Vec<Vec<String>>,
}

/// Next-token distribution split into its generate and copy parts.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDistribution {
    /// `g * softmax(logits)`, one entry per vocabulary id.
    pub generate: Vec<f64>,
    /// `(1 - g) * attention`, one entry per real source position.
    pub copy: Vec<f64>,
    pub gate: f64,
}

impl StepDistribution {
    /// Probability per output lexeme: vocabulary entries first in id order,
    /// then source lexemes missing from the vocabulary in position order.
    pub fn by_lexeme(&self, vocab: &Vocabulary, src: &[String]) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = vocab
            .tokens()
            .iter()
            .cloned()
            .zip(self.generate.iter().copied())
            .collect();
        let mut extra: HashMap<&str, usize> = HashMap::new();
        for (j, &p) in self.copy.iter().enumerate() {
            let lx = src[j].as_str();
            if let Some(v) = vocab.get(lx) {
                out[v].1 += p;
            } else if let Some(&k) = extra.get(lx) {
                out[k].1 += p;
            } else {
                extra.insert(lx, out.len());
                out.push((lx.to_string(), p));
            }
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.generate.iter().sum::<f64>() + self.copy.iter().sum::<f64>()
    }
}

struct Outputs {
    logits: NodeId,
    gate: NodeId,
    copy: NodeId,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = layout(&config, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let shape = (spec.rows, spec.cols);
            let m = match spec.init {
                Init::Zeros => Mat::zeros(shape),
                Init::Ones => Mat::ones(shape),
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    Mat::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
                Init::Xavier => {
                    let a = (6.0 / (spec.rows + spec.cols) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a);
                    Mat::from_shape_simple_fn(shape, || dist.sample(&mut rng))
                }
            };
            names.push(spec.name);
            params.push(m);
        }
        Ok(Self {
            config,
            vocab,
            step: 0,
            names,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_tensors(
        config: ModelConfig,
        vocab: Vocabulary,
        step: u64,
        tensors: Vec<(String, Mat)>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (layout, specs) = layout(&config, vocab.len());
        if specs.len() != tensors.len() {
            return Err(ModelError::Shape(format!(
                "expected {} tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for (spec, (name, m)) in specs.into_iter().zip(tensors) {
            if spec.name != name || m.dim() != (spec.rows, spec.cols) {
                return Err(ModelError::Shape(format!(
                    "tensor {name} {:?} does not match {} {:?}",
                    m.dim(),
                    spec.name,
                    (spec.rows, spec.cols)
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite);
            }
            names.push(name);
            params.push(m);
        }
        Ok(Self {
            config,
            vocab,
            step,
            names,
            params,
            layout,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Mat] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Mat] {
        &mut self.params
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Overrides the copy gate bias, e.g. with `±inf` to pin the gate.
    pub fn set_gate_bias(&mut self, value: f64) {
        self.params[self.layout.gate_b][[0, 0]] = value;
    }

    pub fn zero_grads(&self) -> Vec<Mat> {
        self.params.iter().map(|p| Mat::zeros(p.raw_dim())).collect()
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len > self.config.max_positions {
            Err(ModelError::TooLong {
                len,
                max: self.config.max_positions,
            })
        } else {
            Ok(())
        }
    }

    fn p<'a>(&'a self, g: &mut Graph<'a>, idx: usize) -> NodeId {
        g.param(idx, &self.params[idx])
    }

    fn norm<'a>(&'a self, g: &mut Graph<'a>, x: NodeId, n: Norm) -> NodeId {
        let gain = self.p(g, n.gain);
        let bias = self.p(g, n.bias);
        g.layer_norm(x, gain, bias)
    }

    /// Multi-head attention; also returns the per-head weights.
    fn mha<'a>(
        &'a self,
        g: &mut Graph<'a>,
        xq: NodeId,
        xkv: NodeId,
        a: Attn,
        layout: Rc<AttnLayout>,
    ) -> (NodeId, NodeId) {
        let wq = self.p(g, a.wq);
        let wk = self.p(g, a.wk);
        let wv = self.p(g, a.wv);
        let wo = self.p(g, a.wo);
        let q = g.matmul(xq, wq);
        let k = g.matmul(xkv, wk);
        let v = g.matmul(xkv, wv);
        let probs = g.attn_probs(q, k, layout.clone());
        let o = g.attn_apply(probs, v, layout);
        (g.matmul(o, wo), probs)
    }

    fn ffn<'a>(&'a self, g: &mut Graph<'a>, x: NodeId, f: Ffn) -> NodeId {
        let w1 = self.p(g, f.w1);
        let b1 = self.p(g, f.b1);
        let w2 = self.p(g, f.w2);
        let b2 = self.p(g, f.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    fn embed<'a>(&'a self, g: &mut Graph<'a>, ids: &[usize], len: usize, pos_table: usize) -> NodeId {
        let table = self.p(g, self.layout.embed);
        let tok = g.gather(table, ids.to_vec());
        let pos_t = self.p(g, pos_table);
        let positions = (0..ids.len()).map(|r| r % len).collect();
        let pos = g.gather(pos_t, positions);
        let x = g.add(tok, pos);
        g.dropout(x)
    }

    fn encode_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        ids: &[usize],
        src_len: usize,
        src_lens: &[usize],
    ) -> NodeId {
        let layout = Rc::new(AttnLayout {
            batch: src_lens.len(),
            q_len: src_len,
            k_len: src_len,
            heads: self.config.num_heads,
            q_lens: src_lens.to_vec(),
            key_lens: src_lens.to_vec(),
            causal: false,
        });
        let mut x = self.embed(g, ids, src_len, self.layout.pos_enc);
        for l in &self.layout.enc {
            let h = self.norm(g, x, l.ln_attn);
            let (a, _) = self.mha(g, h, h, l.attn, layout.clone());
            let a = g.dropout(a);
            x = g.add(x, a);
            let h = self.norm(g, x, l.ln_ffn);
            let f = self.ffn(g, h, l.ffn);
            let f = g.dropout(f);
            x = g.add(x, f);
        }
        self.norm(g, x, self.layout.enc_ln)
    }

    fn decode_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        memory: NodeId,
        src_len: usize,
        src_lens: &[usize],
        dec_ids: &[usize],
        tgt_len: usize,
        tgt_lens: &[usize],
    ) -> Outputs {
        let batch = src_lens.len();
        let heads = self.config.num_heads;
        let self_layout = Rc::new(AttnLayout {
            batch,
            q_len: tgt_len,
            k_len: tgt_len,
            heads,
            q_lens: tgt_lens.to_vec(),
            key_lens: tgt_lens.to_vec(),
            causal: true,
        });
        let cross_layout = Rc::new(AttnLayout {
            batch,
            q_len: tgt_len,
            k_len: src_len,
            heads,
            q_lens: tgt_lens.to_vec(),
            key_lens: src_lens.to_vec(),
            causal: false,
        });
        let mut x = self.embed(g, dec_ids, tgt_len, self.layout.pos_dec);
        let mut last_cross = None;
        for l in &self.layout.dec {
            let h = self.norm(g, x, l.ln_self);
            let (a, _) = self.mha(g, h, h, l.self_attn, self_layout.clone());
            let a = g.dropout(a);
            x = g.add(x, a);
            let h = self.norm(g, x, l.ln_cross);
            let (c, probs) = self.mha(g, h, memory, l.cross, cross_layout.clone());
            last_cross = Some(probs);
            let c = g.dropout(c);
            x = g.add(x, c);
            let h = self.norm(g, x, l.ln_ffn);
            let f = self.ffn(g, h, l.ffn);
            let f = g.dropout(f);
            x = g.add(x, f);
        }
        let d = self.norm(g, x, self.layout.dec_ln);
        let copy = g.head_mean(
            last_cross.expect("at least one decoder layer"),
            cross_layout.clone(),
        );
        let ctx_layout = Rc::new(AttnLayout {
            heads: 1,
            ..(*cross_layout).clone()
        });
        let ctx = g.attn_apply(copy, memory, ctx_layout);
        let out_w = self.p(g, self.layout.out_w);
        let out_b = self.p(g, self.layout.out_b);
        let logits = g.matmul(d, out_w);
        let logits = g.add_row(logits, out_b);
        let gh = self.p(g, self.layout.gate_h);
        let gc = self.p(g, self.layout.gate_c);
        let gb = self.p(g, self.layout.gate_b);
        let u1 = g.matmul(d, gh);
        let u2 = g.matmul(ctx, gc);
        let u = g.add(u1, u2);
        let gate = g.add_row(u, gb);
        Outputs { logits, gate, copy }
    }

    fn loss_graph<'a>(&'a self, g: &mut Graph<'a>, batch: &Batch) -> Result<NodeId, ModelError> {
        if batch.size == 0 || batch.real_target_tokens() == 0 {
            return Err(ModelError::EmptyBatch);
        }
        self.check_len(batch.src_len)?;
        self.check_len(batch.tgt_len)?;
        let memory = self.encode_graph(g, &batch.src_ids, batch.src_len, &batch.src_lens);
        let out = self.decode_graph(
            g,
            memory,
            batch.src_len,
            &batch.src_lens,
            &batch.dec_ids,
            batch.tgt_len,
            &batch.gold.iter().map(Vec::len).collect::<Vec<_>>(),
        );
        let targets = Rc::new(batch.copy_targets(&self.vocab, self.config.label_smoothing));
        Ok(g.copy_loss(out.logits, out.gate, out.copy, targets))
    }

    /// Label-smoothed token-mean loss without dropout.
    pub fn loss(&self, batch: &Batch) -> Result<f64, ModelError> {
        let mut g = Graph::new();
        let node = self.loss_graph(&mut g, batch)?;
        let v = g.value(node)[[0, 0]];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ModelError::NonFinite)
        }
    }

    /// Loss and its gradient for every parameter. Dropout is active when
    /// `dropout_seed` is given and the configured rate is positive.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Mat>), ModelError> {
        let mut g = match dropout_seed {
            Some(seed) => Graph::with_dropout(self.config.dropout, ChaCha8Rng::seed_from_u64(seed)),
            None => Graph::new(),
        };
        let node = self.loss_graph(&mut g, batch)?;
        let v = g.value(node)[[0, 0]];
        if !v.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let mut grads = self.zero_grads();
        g.backward(node, &mut grads);
        Ok((v, grads))
    }

    /// Runs the encoder over `sources` without dropout.
    pub fn encode<S: AsRef<str>>(&self, sources: &[&[S]]) -> Result<Memory, ModelError> {
        let src_len = sources.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        self.check_len(src_len)?;
        let pad = self.vocab.pad();
        let mut ids = vec![pad; sources.len() * src_len];
        for (b, s) in sources.iter().enumerate() {
            for (j, lx) in s.iter().enumerate() {
                ids[b * src_len + j] = self.vocab.id(lx.as_ref());
            }
        }
        let src_lens: Vec<usize> = sources.iter().map(|s| s.len()).collect();
        let mut g = Graph::new();
        let h = self.encode_graph(&mut g, &ids, src_len, &src_lens);
        Ok(Memory {
            hidden: g.value(h).clone(),
            src_len,
            src_lens,
            src_lexemes: sources
                .iter()
                .map(|s| s.iter().map(|x| x.as_ref().to_string()).collect())
                .collect(),
        })
    }

    /// Next-token distributions after each prefix. `sources[i]` selects the
    /// memory entry prefix `i` conditions on; every prefix holds the decoder
    /// inputs so far (starting with `<s>`) and all have the same length.
    pub fn next_distributions(
        &self,
        memory: &Memory,
        sources: &[usize],
        prefixes: &[Vec<usize>],
    ) -> Result<Vec<StepDistribution>, ModelError> {
        assert_eq!(sources.len(), prefixes.len());
        if prefixes.is_empty() {
            return Ok(Vec::new());
        }
        let t = prefixes[0].len();
        if t == 0 || prefixes.iter().any(|p| p.len() != t) {
            return Err(ModelError::Shape("prefixes must share a positive length".into()));
        }
        self.check_len(t)?;
        let sl = memory.src_len;
        let d = self.config.model_dim;
        let mut hidden = Array2::zeros((sources.len() * sl, d));
        for (i, &src) in sources.iter().enumerate() {
            hidden
                .slice_mut(s![i * sl..(i + 1) * sl, ..])
                .assign(&memory.hidden.slice(s![src * sl..(src + 1) * sl, ..]));
        }
        let src_lens: Vec<usize> = sources.iter().map(|&s| memory.src_lens[s]).collect();
        let dec_ids: Vec<usize> = prefixes.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let mem = g.input(hidden);
        let out = self.decode_graph(&mut g, mem, sl, &src_lens, &dec_ids, t, &vec![t; prefixes.len()]);
        let logits = g.value(out.logits);
        let gates = g.value(out.gate);
        let copy = g.value(out.copy);
        let pad = self.vocab.pad();
        let mut result = Vec::with_capacity(prefixes.len());
        for (i, &len) in src_lens.iter().enumerate() {
            let r = i * t + t - 1;
            let gate = sigmoid(gates[[r, 0]]);
            let row = logits.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|(v, _)| *v != pad)
                .map(|(_, &z)| z)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut generate: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(v, &z)| if v == pad { 0.0 } else { (z - max).exp() })
                .collect();
            let sum: f64 = generate.iter().sum();
            for p in &mut generate {
                *p *= gate / sum;
            }
            let copy = (0..len).map(|j| (1.0 - gate) * copy[[r, j]]).collect();
            result.push(StepDistribution {
                generate,
                copy,
                gate,
            });
        }
        Ok(result)
    }

    /// Distribution of the token after `prefix` (lexemes, without `<s>`)
    /// given `source`.
    pub fn forward<S: AsRef<str>, T: AsRef<str>>(
        &self,
        source: &[S],
        prefix: &[T],
    ) -> Result<StepDistribution, ModelError> {
        let memory = self.encode(&[source])?;
        let mut ids = vec![self.vocab.bos()];
        ids.extend(prefix.iter().map(|t| self.vocab.id(t.as_ref())));
        Ok(self
            .next_distributions(&memory, &[0], &[ids])?
            .pop()
            .expect("one prefix"))
    }
}
