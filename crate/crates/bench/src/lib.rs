//! Fixtures shared by the benchmarks.

use ehrtext::synthgen::{generate_toy_catalog, word_bank};
use ehrtext::tokenizer::TokenizedSequence;
use ehrtext::{Model, ModelConfig, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Toy-catalog descriptions and a vocabulary built from them.
pub fn text_fixture() -> (Vec<String>, Vocabulary) {
    let toy = generate_toy_catalog(400, 0).expect("valid size");
    let descriptions = toy.catalog.descriptions();
    let vocab = Vocabulary::build(word_bank().into_iter().chain(descriptions.iter().map(String::as_str)), 2000)
        .expect("vocabulary builds");
    (descriptions, vocab)
}

/// Desk-scale model and a random unpadded sequence of `len` tokens.
pub fn model_fixture(len: usize) -> (Model, TokenizedSequence) {
    let cfg = ModelConfig {
        vocab_size: 600,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = Model::new(cfg, &mut rng).expect("valid config");
    let pieces: Vec<Vec<u32>> = (0..len - 2).map(|_| vec![rng.random_range(5..600)]).collect();
    let seq = TokenizedSequence::from_pieces(&pieces, len).expect("fits");
    (model, seq)
}

/// `n` scores with roughly 10% positives.
pub fn score_fixture(n: usize) -> (Vec<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.1))).collect();
    let scores = labels
        .iter()
        .map(|&l| (rng.random::<f64>() + 0.5 * f64::from(l)).min(1.0))
        .collect();
    (scores, labels)
}
