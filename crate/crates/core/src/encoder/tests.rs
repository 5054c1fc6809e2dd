use super::*;
use crate::tokenizer::{CLS, PAD, SEP};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        max_tokens: 12,
        hidden_dim: 16,
        num_layers: 2,
        num_heads: 2,
        feedforward_dim: 24,
        num_phenotypes: 3,
        dropout: 0.1,
    }
}

fn model(seed: u64) -> Model {
    Model::new(tiny_config(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn seq(body: &[u32], max: usize) -> TokenizedSequence {
    TokenizedSequence::from_pieces(&[body.to_vec()], max).unwrap()
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(99)
}

#[test]
fn output_shape_matches_max_tokens() {
    let m = model(1);
    let s = seq(&[5, 6, 7, 8, 9, 10, 11, 12, 13, 14], 12);
    assert_eq!(s.ids.len(), 12);
    let enc = m.encode_forward(&s, Pass::Eval, &mut rng()).unwrap();
    assert_eq!((enc.hidden.rows, enc.hidden.cols), (12, 16));
    assert!(!enc.is_recorded());
}

#[test]
fn rejects_bad_inputs() {
    let m = model(1);
    let mut s = seq(&[5, 6], 12);
    s.ids[1] = 30;
    assert!(matches!(
        m.encode_forward(&s, Pass::Eval, &mut rng()),
        Err(ModelError::ShapeMismatch(_))
    ));
    let long = TokenizedSequence::from_pieces(&[vec![5; 14]], 16).unwrap();
    assert!(matches!(
        m.encode_forward(&long, Pass::Eval, &mut rng()),
        Err(ModelError::ShapeMismatch(_))
    ));
}

#[test]
fn attention_rows_sum_to_one_over_real_positions() {
    let m = model(2);
    let s = seq(&[5, 6, 7, 8], 12);
    let enc = m.encode_forward(&s, Pass::Record, &mut rng()).unwrap();
    for layer in 0..2 {
        for head in 0..2 {
            let a = enc.attention(layer, head).unwrap();
            for r in 0..a.rows {
                let row = a.row(r);
                let real: f64 = (0..a.cols).filter(|&c| s.attention_mask[c] == 1).map(|c| row[c]).sum();
                assert!((real - 1.0).abs() < 1e-6);
                for c in 0..a.cols {
                    if s.attention_mask[c] == 0 {
                        assert_eq!(row[c], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn padded_tokens_do_not_influence_real_positions() {
    let m = model(3);
    let s = seq(&[5, 6, 7], 12);
    let base = m.encode_forward(&s, Pass::Eval, &mut rng()).unwrap();
    let mut perturbed = s.clone();
    for (id, &mask) in perturbed.ids.iter_mut().zip(&s.attention_mask) {
        if mask == 0 {
            *id = 17;
        }
    }
    let out = m.encode_forward(&perturbed, Pass::Eval, &mut rng()).unwrap();
    let n = s.real_len();
    let max_delta = (0..n)
        .flat_map(|r| base.hidden.row(r).iter().zip(out.hidden.row(r)).map(|(a, b)| (a - b).abs()))
        .fold(0.0f64, f64::max);
    assert!(max_delta < 1e-9, "delta {max_delta}");

    // trimming the padding is equivalent as well
    let trimmed = m.encode_forward(&s.trimmed(), Pass::Eval, &mut rng()).unwrap();
    for r in 0..n {
        for (a, b) in base.hidden.row(r).iter().zip(trimmed.hidden.row(r)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn eval_is_deterministic_and_dropout_only_in_train() {
    let m = model(4);
    let s = seq(&[5, 6, 7, 8, 9], 12);
    let a = m.encode_forward(&s, Pass::Eval, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = m.encode_forward(&s, Pass::Eval, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(a.hidden, b.hidden);
    let t1 = m.encode_forward(&s, Pass::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let t2 = m.encode_forward(&s, Pass::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(t1.hidden, t2.hidden);
    assert_ne!(t1.hidden, a.hidden);
}

#[test]
fn classify_examples() {
    let mut m = model(5);
    m.params.dec_w = Mat::zeros(16, 3);
    let hidden = Mat::from_vec(2, 16, (0..32).map(|x| x as f64 * 0.1).collect());
    let c = m.classify(&hidden);
    assert_eq!(c.probs, vec![0.5, 0.5, 0.5]);
    m.params.dec_b.data[0] = 3f64.ln();
    let c = m.classify(&hidden);
    assert!((c.probs[0] - 0.75).abs() < 1e-15);
    assert_eq!(c.probs[1], 0.5);
}

#[test]
fn classify_matches_independent_matvec_and_uses_cls_only() {
    let m = model(6);
    let s = seq(&[5, 6, 7, 8], 12);
    let enc = m.encode_forward(&s, Pass::Eval, &mut rng()).unwrap();
    let c = m.classify(&enc.hidden);
    for j in 0..3 {
        let mut z = m.params.dec_b.data[j];
        for i in 0..16 {
            z += enc.hidden.data[i] * m.params.dec_w.data[i * 3 + j];
        }
        assert!((c.logits[j] - z).abs() < 1e-6);
    }
    let mut other = enc.hidden.clone();
    for x in other.data[16..].iter_mut() {
        *x += 5.0;
    }
    assert_eq!(m.classify(&other), c);
}

#[test]
fn mlm_predict_shape_and_softmax() {
    let m = model(7);
    let s = seq(&[5, 6, 7], 12);
    let enc = m.encode_forward(&s, Pass::Eval, &mut rng()).unwrap();
    let logits = m.mlm_predict(&enc.hidden);
    assert_eq!((logits.rows, logits.cols), (12, 30));
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let total: f64 = row.iter().map(|x| (x - max).exp() / z).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    let sub = m.mlm_logits_rows(&enc.hidden, &[2, 0]);
    assert_eq!(sub.row(0), logits.row(2));
    assert_eq!(sub.row(1), logits.row(0));
}

#[test]
fn backward_requires_recorded_graph() {
    let m = model(8);
    let s = seq(&[5, 6], 12);
    let enc = m.encode_forward(&s, Pass::Eval, &mut rng()).unwrap();
    let mut g = m.params.zeros_like();
    let d = enc.hidden.zeros_like();
    assert!(matches!(m.backward(&enc, &d, &mut g), Err(ModelError::GraphNotRecorded)));
}

#[test]
fn zero_loss_weights_give_zero_decoder_gradients() {
    let m = model(9);
    let s = seq(&[5, 6, 7], 12);
    let enc = m.encode_forward(&s, Pass::Record, &mut rng()).unwrap();
    let mut g = m.params.zeros_like();
    let mut dh = enc.hidden.zeros_like();
    m.classify_backward(&enc.hidden, &[0.0; 3], &mut g, &mut dh);
    m.backward(&enc, &dh, &mut g).unwrap();
    assert!(g.dec_w.data.iter().all(|&x| x == 0.0));
    assert!(g.dec_b.data.iter().all(|&x| x == 0.0));
}

/// Smooth test objective touching the decoder and the tied MLM head.
struct Objective {
    coeffs: Vec<f64>,
    rows: Vec<usize>,
    labels: Vec<usize>,
}

impl Objective {
    fn value(&self, m: &Model, s: &TokenizedSequence) -> f64 {
        let enc = m.encode_forward(s, Pass::Record, &mut rng()).unwrap();
        let c = m.classify(&enc.hidden);
        let mut loss: f64 = c
            .logits
            .iter()
            .zip(&self.coeffs)
            .map(|(z, a)| a * (1.0 + z.exp()).ln())
            .sum();
        let logits = m.mlm_logits_rows(&enc.hidden, &self.rows);
        for (k, &label) in self.labels.iter().enumerate() {
            let row = logits.row(k);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
        }
        loss
    }

    fn gradient(&self, m: &Model, s: &TokenizedSequence) -> ModelParameters {
        let enc = m.encode_forward(s, Pass::Record, &mut rng()).unwrap();
        let c = m.classify(&enc.hidden);
        let mut g = m.params.zeros_like();
        let mut dh = enc.hidden.zeros_like();
        let dz: Vec<f64> = c.logits.iter().zip(&self.coeffs).map(|(z, a)| a * sigmoid(*z)).collect();
        m.classify_backward(&enc.hidden, &dz, &mut g, &mut dh);
        let mut dl = m.mlm_logits_rows(&enc.hidden, &self.rows);
        for (k, &label) in self.labels.iter().enumerate() {
            let row = dl.row_mut(k);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for x in row.iter_mut() {
                *x = (*x - max).exp() / z;
            }
            row[label] -= 1.0;
        }
        m.mlm_backward(&enc.hidden, &self.rows, &dl, &mut g, &mut dh);
        m.backward(&enc, &dh, &mut g).unwrap();
        g
    }
}

fn finite_difference(obj: &Objective, m: &Model, s: &TokenizedSequence, tensor: usize, idx: usize) -> f64 {
    let eps = 1e-4;
    let mut plus = m.clone();
    plus.params.named_mut()[tensor].1.data[idx] += eps;
    let mut minus = m.clone();
    minus.params.named_mut()[tensor].1.data[idx] -= eps;
    (obj.value(&plus, s) - obj.value(&minus, s)) / (2.0 * eps)
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn gradients_match_finite_differences() {
    use rand::Rng;
    let m = model(10);
    let s = seq(&[5, 9, 13, 5, 21, 7], 12);
    let obj = Objective {
        coeffs: vec![0.7, -1.3, 0.4],
        rows: vec![1, 3, 6],
        labels: vec![5, 5, 11],
    };
    let g = obj.gradient(&m, &s);
    let names: Vec<String> = g.named().into_iter().map(|(n, _)| n).collect();
    let mut pick = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..60 {
        let t = pick.random_range(0..names.len());
        let len = g.named()[t].1.len();
        let i = pick.random_range(0..len);
        let analytic = g.named()[t].1.data[i];
        let numeric = finite_difference(&obj, &m, &s, t, i);
        worst = worst.max(rel_err(analytic, numeric));
        assert!(rel_err(analytic, numeric) < 1e-4, "{}[{i}]: {analytic} vs {numeric}", names[t]);
    }
    // tied embedding rows for input tokens get both contributions
    for id in [5usize, 11, 13] {
        for c in [0usize, 7, 15] {
            let i = id * 16 + c;
            let numeric = finite_difference(&obj, &m, &s, 0, i);
            assert!(rel_err(g.tok_emb.data[i], numeric) < 1e-4, "tok_emb[{id},{c}]");
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn gradients_cover_every_parameter_shape() {
    let m = model(11);
    let g = m.params.zeros_like();
    for ((na, a), (nb, b)) in g.named().into_iter().zip(m.params.named()) {
        assert_eq!(na, nb);
        assert_eq!((a.rows, a.cols), (b.rows, b.cols));
    }
    assert_eq!(m.params.named().len(), 4 + 16 * 2 + 3);
}

#[test]
fn decay_groups() {
    assert!(ModelParameters::is_decayed("tok_emb"));
    assert!(ModelParameters::is_decayed("layer.1.wq"));
    assert!(ModelParameters::is_decayed("dec_w"));
    assert!(!ModelParameters::is_decayed("layer.0.bq"));
    assert!(!ModelParameters::is_decayed("layer.0.ln1_g"));
    assert!(!ModelParameters::is_decayed("emb_ln_b"));
    assert!(!ModelParameters::is_decayed("mlm_b"));
    assert!(!ModelParameters::is_decayed("dec_b"));
}

#[test]
fn invalid_config_rejected() {
    let mut cfg = tiny_config();
    cfg.num_heads = 3;
    assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    cfg = tiny_config();
    cfg.dropout = 1.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn specials_layout_used_by_tests() {
    let s = seq(&[5], 4);
    assert_eq!(s.ids, vec![CLS, 5, SEP, PAD]);
}

mod checkpoints {
    use super::*;

    fn ckpt() -> Checkpoint {
        Checkpoint {
            model: model(12),
            step: 417,
            rng_seed: 0xfeed,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let c = ckpt();
        save_checkpoint(&c, &a).unwrap();
        let loaded = load_checkpoint(&a, Some(&c.model.config)).unwrap();
        assert_eq!(loaded, c);
        save_checkpoint(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_or_extended_is_corrupt() {
        let bytes = ckpt().to_bytes();
        for cut in [0, 4, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::from_bytes(&bytes[..cut]),
                Err(ModelError::CorruptCheckpoint(_))
            ));
        }
        let mut extended = bytes.clone();
        extended.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extended), Err(ModelError::CorruptCheckpoint(_))));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(ModelError::CorruptCheckpoint(_))));
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(), &p).unwrap();
        let mut other = tiny_config();
        other.num_phenotypes = 4;
        assert!(matches!(load_checkpoint(&p, Some(&other)), Err(ModelError::ConfigMismatch(_))));
    }
}
