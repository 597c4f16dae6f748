use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrepair::diffcodec::{extract_diff, serialize_diff};
use vrepair::encoding::vocab::{Vocabulary, EOS, RESERVED};
use vrepair::inference::{expand_candidates, greedy_batch, neural_beam, Hypothesis, ModelScorer, NextTokenScorer};
use vrepair::micronet::{Model, ModelConfig, ModelError};

const SYMBOLS: [&str; 4] = [EOS, "a", "b", "c"];

/// Next-token probabilities that depend only on the position. `</s>` has
/// probability zero except at position `len`, where it is certain, so every
/// finished output has exactly `len` tokens.
struct PositionScorer {
    table: Vec<[f64; 4]>,
}

impl PositionScorer {
    fn random(seed: u64, len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table: Vec<[f64; 4]> = (0..len)
            .map(|_| {
                let mut w: [f64; 4] = std::array::from_fn(|_| rng.gen_range(0.05..1.0));
                w[0] = 0.0;
                let z: f64 = w.iter().sum();
                w.map(|x| x / z)
            })
            .collect();
        table.push([1.0, 0.0, 0.0, 0.0]);
        Self { table }
    }
}

impl NextTokenScorer for PositionScorer {
    fn next(&self, prefixes: &[Vec<String>]) -> Result<Vec<Vec<(String, f64)>>, ModelError> {
        Ok(prefixes
            .iter()
            .map(|p| {
                SYMBOLS
                    .iter()
                    .zip(self.table[p.len()])
                    .map(|(s, q)| (s.to_string(), q))
                    .collect()
            })
            .collect())
    }
}

/// All `3^len` outputs, best first.
fn exhaustive(scorer: &PositionScorer, len: usize) -> Vec<Hypothesis> {
    let mut all: Vec<(Vec<String>, f64)> = vec![(Vec::new(), 0.0)];
    for t in 0..len {
        all = all
            .into_iter()
            .flat_map(|(prefix, score)| {
                SYMBOLS.iter().zip(scorer.table[t]).skip(1).map(move |(s, q)| {
                    let mut p = prefix.clone();
                    p.push(s.to_string());
                    (p, score + q.ln())
                })
            })
            .collect();
    }
    let mut out: Vec<Hypothesis> = all
        .into_iter()
        .map(|(tokens, log_prob)| Hypothesis {
            tokens,
            log_prob,
            finished: true,
        })
        .collect();
    out.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).unwrap());
    out
}

proptest! {
    #[test]
    fn beam_is_exact_for_fixed_length_position_scores(seed in any::<u64>(), width in 1usize..30, len in 1usize..6) {
        let scorer = PositionScorer::random(seed, len);
        let beam = neural_beam(&scorer, width, len + 1).unwrap();
        let all = exhaustive(&scorer, len);
        prop_assert_eq!(beam.len(), width.min(all.len()));
        for (b, e) in beam.iter().zip(&all) {
            prop_assert_eq!(&b.tokens, &e.tokens);
            prop_assert!(b.finished);
            prop_assert!((b.log_prob - e.log_prob).abs() < 1e-9);
        }
    }

    #[test]
    fn wider_beams_nest_for_fixed_length_position_scores(seed in any::<u64>(), len in 1usize..6) {
        let scorer = PositionScorer::random(seed, len);
        let seqs = |w| -> Vec<Vec<String>> {
            neural_beam(&scorer, w, len + 1).unwrap().into_iter().map(|h| h.tokens).collect()
        };
        let (one, ten, fifty) = (seqs(1), seqs(10), seqs(50));
        prop_assert!(one.iter().all(|s| ten.contains(s)));
        prop_assert!(ten.iter().all(|s| fifty.contains(s)));
    }
}

/// Early `</s>` makes plain beam search inexact: the one-token-shorter
/// output loses to a prefix whose completions are all worse.
#[test]
fn early_finish_can_be_pruned() {
    let scorer = PositionScorer {
        table: vec![[0.4, 0.6, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0]],
    };
    let beam = neural_beam(&scorer, 1, 3).unwrap();
    assert_eq!(beam[0].tokens, ["a", "b"]);
    assert!((beam[0].log_prob - 0.3f64.ln()).abs() < 1e-12);
    let wider = neural_beam(&scorer, 2, 3).unwrap();
    assert!(wider[0].tokens.is_empty());
}

#[test]
fn beam_output_is_sorted_and_bounded() {
    let scorer = PositionScorer::random(7, 8);
    let beam = neural_beam(&scorer, 5, 9).unwrap();
    assert_eq!(beam.len(), 5);
    assert!(beam.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    assert!(beam.iter().all(|h| h.tokens.len() == 8 && h.log_prob < 0.0));
}

#[test]
fn length_limit_leaves_unfinished_hypotheses() {
    // EOS is never likely enough to finish within two steps at width 1
    let scorer = PositionScorer {
        table: vec![[0.01, 0.97, 0.01, 0.01]; 3],
    };
    let beam = neural_beam(&scorer, 1, 2).unwrap();
    assert_eq!(beam.len(), 1);
    assert!(!beam[0].finished);
    assert_eq!(beam[0].tokens, ["a", "a"]);
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn hyp(tokens: &[String], log_prob: f64, finished: bool) -> Hypothesis {
    Hypothesis {
        tokens: tokens.to_vec(),
        log_prob,
        finished,
    }
}

#[test]
fn candidates_skip_bad_identity_and_duplicate_patches() {
    let function = toks("a = b ; a = b ; c = d ;");
    let fixed = toks("a = b ; a = b ; c = e ;");
    let good = serialize_diff(&extract_diff(&function, &fixed, 2));
    // `= b` occurs twice: two readings
    let ambiguous = toks("<ModStart> = b X <ModEnd> ; c");
    let hyps = vec![
        hyp(&toks("<ModEnd> junk"), -0.1, true),
        hyp(&good, -0.2, false),
        hyp(&good, -0.3, true),
        hyp(&good, -0.4, true),
        hyp(&ambiguous, -0.5, true),
        hyp(&[], -0.6, true),
    ];
    let cands = expand_candidates(&function, &hyps, 2, 50);
    let functions: Vec<&Vec<String>> = cands.iter().map(|c| &c.function).collect();
    assert_eq!(functions[0], &fixed);
    assert_eq!(cands[0].hypothesis_rank, 2);
    assert_eq!(cands.len(), 3);
    assert_eq!((cands[1].hypothesis_rank, cands[1].interpretation_rank), (4, 0));
    assert_eq!((cands[2].hypothesis_rank, cands[2].interpretation_rank), (4, 1));
    assert!(cands.iter().all(|c| c.function != function));
    assert_eq!(expand_candidates(&function, &hyps, 2, 2).len(), 2);
}

fn random_model(seed: u64) -> Model {
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(["a", "b", "c", "(", ")", ";"].map(String::from));
    let vocab = Vocabulary::from_tokens(tokens).unwrap();
    let config = ModelConfig {
        num_layers: 1,
        num_heads: 2,
        model_dim: 8,
        ff_dim: 16,
        dropout: 0.0,
        label_smoothing: 0.1,
        max_positions: 64,
    };
    let mut model = Model::new(config, vocab, seed).unwrap();
    // a large EOS bias keeps random decodes short
    let eos = model.vocab.eos();
    let idx = model.param_index("out.b").unwrap();
    model.params_mut()[idx][[0, eos]] = 2.0;
    model
}

#[test]
fn greedy_batch_equals_width_one_beam() {
    let model = random_model(3);
    let sources = [toks("CWE-000 a ( b ) ;"), toks("CWE-000 c c zz ;"), toks("CWE-000 ;")];
    let refs: Vec<&[String]> = sources.iter().map(Vec::as_slice).collect();
    let greedy = greedy_batch(&model, &refs, 12).unwrap();
    for (src, g) in sources.iter().zip(&greedy) {
        let scorer = ModelScorer::new(&model, src).unwrap();
        let beam = neural_beam(&scorer, 1, 12).unwrap();
        assert_eq!(&beam[0].tokens, g);
    }
}

#[test]
fn model_beams_are_sorted_and_unique() {
    let model = random_model(5);
    let src = toks("CWE-000 a ( zz ) ;");
    let scorer = ModelScorer::new(&model, &src).unwrap();
    let beam = neural_beam(&scorer, 8, 6).unwrap();
    assert_eq!(beam.len(), 8);
    assert!(beam.windows(2).all(|w| w[0].log_prob >= w[1].log_prob));
    for (i, a) in beam.iter().enumerate() {
        assert!(beam[i + 1..].iter().all(|b| b.tokens != a.tokens || b.finished != a.finished));
    }
}
