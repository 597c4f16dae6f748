use approx::assert_abs_diff_eq;
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrepair::encoding::vocab::{Vocabulary, RESERVED};
use vrepair::micronet::{
    attention, load_checkpoint, save_checkpoint, Batch, Model, ModelConfig, ModelError,
};

fn vocab_with(words: &[&str]) -> Vocabulary {
    let mut t: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    t.extend(words.iter().map(|s| s.to_string()));
    Vocabulary::from_tokens(t).unwrap()
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 16,
        ff_dim: 24,
        dropout: 0.0,
        label_smoothing: 0.1,
        max_positions: 32,
    }
}

fn tiny_vocab() -> Vocabulary {
    vocab_with(&["a", "b", "c", "d", "x", "y", "(", ")"])
}

fn sample_batch(vocab: &Vocabulary) -> Batch {
    let s1 = toks("CWE-000 a b ( x ) zz");
    let t1 = toks("<ModStart> a b zz c");
    let s2 = toks("CWE-000 <StartLoc> y ( qq ) <EndLoc>");
    let t2 = toks("<ModStart> y ( qq d");
    Batch::new(&[(&s1[..], &t1[..]), (&s2[..], &t2[..])], vocab)
}

// Straight-line softmax(QK^T/sqrt(d))V with no shared code.
fn dense_attention(q: &Array2<f64>, k: &Array2<f64>, v: &Array2<f64>) -> Array2<f64> {
    let d = q.ncols() as f64;
    let mut out = Array2::zeros((q.nrows(), v.ncols()));
    for i in 0..q.nrows() {
        let mut w = vec![0.0; k.nrows()];
        for j in 0..k.nrows() {
            let mut dot = 0.0;
            for c in 0..q.ncols() {
                dot += q[[i, c]] * k[[j, c]];
            }
            w[j] = (dot / d.sqrt()).exp();
        }
        let z: f64 = w.iter().sum();
        for j in 0..k.nrows() {
            for c in 0..v.ncols() {
                out[[i, c]] += w[j] / z * v[[j, c]];
            }
        }
    }
    out
}

#[test]
fn attention_single_position_returns_value() {
    let q = array![[0.3, -1.2]];
    let v = array![[4.0, 5.0, 6.0]];
    let out = attention(&q, &q, &v, None).unwrap();
    assert_abs_diff_eq!(out, v, epsilon = 1e-12);
}

#[test]
fn attention_identical_keys_split_evenly() {
    let q = array![[2.0, -7.0]];
    let k = array![[1.0, 1.0], [1.0, 1.0]];
    let v = array![[1.0, 0.0], [0.0, 1.0]];
    let out = attention(&q, &k, &v, None).unwrap();
    assert_abs_diff_eq!(out, array![[0.5, 0.5]], epsilon = 1e-12);
}

#[test]
fn attention_matches_dense_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand = |r, c| Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0));
    let (q, k, v) = (rand(3, 4), rand(5, 4), rand(5, 2));
    let out = attention(&q, &k, &v, None).unwrap();
    assert_abs_diff_eq!(out, dense_attention(&q, &k, &v), epsilon = 1e-12);
}

#[test]
fn attention_mask_excludes_keys() {
    let q = array![[1.0, 0.0]];
    let k = array![[1.0, 0.0], [5.0, 5.0]];
    let v = array![[1.0], [100.0]];
    let mask = array![[true, false]];
    let out = attention(&q, &k, &v, Some(&mask)).unwrap();
    assert_abs_diff_eq!(out, array![[1.0]], epsilon = 1e-12);
}

#[test]
fn attention_shape_mismatch_is_an_error() {
    let q = Array2::<f64>::zeros((2, 3));
    let k = Array2::<f64>::zeros((2, 4));
    assert!(matches!(attention(&q, &k, &k, None), Err(ModelError::Shape(_))));
}

#[test]
fn config_rejects_indivisible_heads() {
    let cfg = ModelConfig {
        model_dim: 10,
        num_heads: 4,
        ..ModelConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let vocab = tiny_vocab();
    let batch = sample_batch(&vocab);
    let model = Model::new(tiny_config(), vocab, 11).unwrap();
    let (_, grads) = model.loss_and_grads(&batch, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..60 {
        let p = rng.gen_range(0..model.params().len());
        let (r, c) = model.params()[p].dim();
        let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let mut plus = model.clone();
        plus.params_mut()[p][[i, j]] += h;
        let mut minus = model.clone();
        minus.params_mut()[p][[i, j]] -= h;
        let numeric = (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * h);
        let analytic = grads[p][[i, j]];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn duplicated_batch_has_the_same_loss_and_gradient() {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab.clone(), 2).unwrap();
    let s = toks("CWE-000 a b ( x )");
    let t = toks("<ModStart> a x");
    let one = Batch::new(&[(&s[..], &t[..])], &vocab);
    let two = Batch::new(&[(&s[..], &t[..]), (&s[..], &t[..])], &vocab);
    let (l1, g1) = model.loss_and_grads(&one, None).unwrap();
    let (l2, g2) = model.loss_and_grads(&two, None).unwrap();
    assert_abs_diff_eq!(l1, l2, epsilon = 1e-12);
    for (a, b) in g1.iter().zip(&g2) {
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }
}

#[test]
fn padding_leaves_the_loss_unchanged() {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab.clone(), 4).unwrap();
    let s = toks("CWE-000 a b ( x )");
    let t = toks("<ModStart> a x");
    let long_s = toks("CWE-000 a b ( x ) c c c c c c c");
    let long_t = toks("<ModStart> a x y y y y y y y");
    let alone = Batch::new(&[(&s[..], &t[..])], &vocab);
    let padded = Batch::new(&[(&s[..], &t[..]), (&long_s[..], &long_t[..])], &vocab);
    // the second sample changes the mean, so compare with its own loss
    let other = Batch::new(&[(&long_s[..], &long_t[..])], &vocab);
    let n1 = alone.real_target_tokens() as f64;
    let n2 = other.real_target_tokens() as f64;
    let expected =
        (model.loss(&alone).unwrap() * n1 + model.loss(&other).unwrap() * n2) / (n1 + n2);
    assert_abs_diff_eq!(model.loss(&padded).unwrap(), expected, epsilon = 1e-9);
}

#[test]
fn losses_are_deterministic() {
    let vocab = tiny_vocab();
    let batch = sample_batch(&vocab);
    let a = Model::new(tiny_config(), vocab.clone(), 9).unwrap();
    let b = Model::new(tiny_config(), vocab, 9).unwrap();
    assert_eq!(a.loss(&batch).unwrap(), b.loss(&batch).unwrap());
    let cfg = ModelConfig {
        dropout: 0.3,
        ..tiny_config()
    };
    let c = Model::new(cfg, tiny_vocab(), 9).unwrap();
    let l1 = c.loss_and_grads(&batch, Some(1)).unwrap().0;
    let l2 = c.loss_and_grads(&batch, Some(1)).unwrap().0;
    assert_eq!(l1, l2);
}

#[test]
fn uniform_prediction_has_closed_form_loss() {
    // Zero output projection gives a uniform generate softmax, zero cross
    // queries give uniform copy attention, and a zero gate gives g = 1/2.
    let vocab = tiny_vocab();
    let mut model = Model::new(tiny_config(), vocab.clone(), 1).unwrap();
    for name in ["out.w", "out.b", "gate.w_dec", "gate.w_ctx", "gate.b", "dec1.cross.wq"] {
        let i = model.param_index(name).unwrap();
        model.params_mut()[i].fill(0.0);
    }
    let s = toks("CWE-000 a zz a");
    let t = toks("a zz q");
    let batch = Batch::new(&[(&s[..], &t[..])], &vocab);
    let v = vocab.len() as f64;
    let n = s.len() as f64;
    let eps = 0.1;
    let log_pv = (0.5 / (v - 1.0)).ln();
    let log_pc = (0.5 / n).ln();
    let share = eps / (v - 1.0 + n);
    // every row spends `share` on each vocab entry and source position
    let smooth = -share * ((v - 1.0) * log_pv + n * log_pc);
    // gold masses: "a" split vocab/copy, "zz" copy only, "q" -> <unk>, "</s>" vocab
    let gold = -(1.0 - eps) * (0.5 * (log_pv + log_pc) + log_pc + 2.0 * log_pv) / 4.0;
    let expected = smooth + gold;
    assert_abs_diff_eq!(model.loss(&batch).unwrap(), expected, epsilon = 1e-12);
}

#[test]
fn one_hot_prediction_is_bounded_below() {
    // The smoothed target cannot be matched by any distribution better
    // than its own entropy.
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab.clone(), 8).unwrap();
    let batch = sample_batch(&vocab);
    let targets = batch.copy_targets(&vocab, 0.1);
    let mut entropy = 0.0;
    for r in 0..targets.weights.len() {
        let w = targets.weights[r];
        for q in targets.vocab.row(r).iter().chain(targets.copy.row(r).iter()) {
            if *q > 0.0 {
                entropy -= w * q * q.ln();
            }
        }
    }
    assert!(model.loss(&batch).unwrap() >= entropy);
}

#[test]
fn distributions_sum_to_one() {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab.clone(), 6).unwrap();
    let src = toks("CWE-000 a qq ( x ) qq");
    let d = model.forward(&src, &toks("a b")).unwrap();
    assert_abs_diff_eq!(d.total(), 1.0, epsilon = 1e-9);
    let lex: f64 = d.by_lexeme(&vocab, &src).iter().map(|(_, p)| p).sum();
    assert_abs_diff_eq!(lex, 1.0, epsilon = 1e-9);
    assert!(d.by_lexeme(&vocab, &src).iter().all(|(_, p)| *p >= 0.0));
}

#[test]
fn pinned_gate_selects_one_pathway() {
    let vocab = tiny_vocab();
    let src = toks("CWE-000 a qq ( x )");
    let mut model = Model::new(tiny_config(), vocab.clone(), 6).unwrap();
    model.set_gate_bias(f64::INFINITY);
    let d = model.forward(&src, &toks("a")).unwrap();
    assert_eq!(d.gate, 1.0);
    assert!(d.copy.iter().all(|&p| p == 0.0));
    assert_abs_diff_eq!(d.generate.iter().sum::<f64>(), 1.0, epsilon = 1e-12);

    model.set_gate_bias(f64::NEG_INFINITY);
    let d = model.forward(&src, &toks("a")).unwrap();
    assert_eq!(d.gate, 0.0);
    for (lexeme, p) in d.by_lexeme(&vocab, &src) {
        if p > 0.0 {
            assert!(src.contains(&lexeme), "mass on {lexeme} outside the input");
        }
    }
}

#[test]
fn later_target_tokens_do_not_leak_backwards() {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab.clone(), 12).unwrap();
    let src = toks("CWE-000 a b ( x )");
    let memory = model.encode(&[&src[..]]).unwrap();
    let bos = vocab.bos();
    let a = vec![bos, vocab.id("a"), vocab.id("b")];
    let b = vec![bos, vocab.id("a"), vocab.id("y")];
    let short = vec![bos, vocab.id("a")];
    let da = model.next_distributions(&memory, &[0], &[a[..2].to_vec()]).unwrap();
    let full_a = model.next_distributions(&memory, &[0, 0], &[a.clone(), b.clone()]).unwrap();
    let ds = model.next_distributions(&memory, &[0], &[short]).unwrap();
    assert_eq!(da, ds);
    assert_ne!(full_a[0], full_a[1]);
}

#[test]
fn overlong_input_is_rejected() {
    let vocab = tiny_vocab();
    let model = Model::new(tiny_config(), vocab, 1).unwrap();
    let src = vec!["a".to_string(); 40];
    assert!(matches!(
        model.forward(&src, &toks("a")),
        Err(ModelError::TooLong { len: 40, max: 32 })
    ));
}

#[test]
fn checkpoint_round_trip_is_bit_stable() {
    let vocab = tiny_vocab();
    let mut model = Model::new(tiny_config(), vocab, 21).unwrap();
    model.step = 77;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&model, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.step, 77);
    assert_eq!(back.config, model.config);
    assert_eq!(back.vocab, model.vocab);
    for (a, b) in model.params().iter().zip(back.params()) {
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
