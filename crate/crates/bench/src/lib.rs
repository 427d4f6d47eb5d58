//! Models and inputs shared by the benchmarks: the conv 6/3 encoder
//! (512-unit CNN-a, 256-unit CNN-c) and the single-layer BiLSTM with 512
//! hidden units, both over 256-dimensional embeddings, fed random
//! sentences.

use cnmt::decoder::DecoderConfig;
use cnmt::encoders::{EncoderConfig, EncoderKind};
use cnmt::{ModelConfig, Seq2Seq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EMBED: usize = 256;
pub const HIDDEN: usize = 512;

pub fn conv_6_3() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::Conv,
            embed_dim: EMBED,
            layers_a: 6,
            layers_c: 3,
            hidden_a: HIDDEN,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig { layers: 1, hidden: HIDDEN },
        ..ModelConfig::default()
    }
}

pub fn bilstm() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            kind: EncoderKind::BiLstm,
            embed_dim: EMBED,
            lstm_hidden: HIDDEN,
            lstm_layers: 1,
            ..EncoderConfig::default()
        },
        decoder: DecoderConfig { layers: 1, hidden: HIDDEN },
        ..ModelConfig::default()
    }
}

pub fn model(config: ModelConfig, vocab: usize) -> Seq2Seq {
    Seq2Seq::new(config, vocab, vocab, 1).expect("benchmark config is valid")
}

/// `n` sentences of `len` ids drawn uniformly from the non-special ids.
pub fn sentences(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(4..vocab)).collect()).collect()
}
