//! The full encoder-decoder model and its serializable configuration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Decoder, DecoderConfig, TargetBatch};
use crate::encoders::{Encoder, EncoderConfig, SourceBatch};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::numerics::{compare_with_central_differences, Gradients, Graph, ParamId, ParamStore, Tensor};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.encoder.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Seq2Seq {
    /// Builds and initializes a model; parameters depend only on `seed`.
    pub fn new(config: ModelConfig, src_vocab: usize, tgt_vocab: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, config.encoder.clone(), src_vocab, &mut rng)?;
        let decoder = Decoder::new(&mut params, config.decoder.clone(), config.encoder.embed_dim, tgt_vocab, &mut rng)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            src_vocab,
            tgt_vocab,
        })
    }

    /// Teacher-forced summed negative log-likelihood of a batch and the
    /// number of predicted tokens, without dropout.
    pub fn batch_nll(&self, src: &SourceBatch, tgt: &TargetBatch) -> Result<(f64, usize)> {
        let mut g = Graph::inference(&self.params);
        let enc = self.encoder.encode(&mut g, src, &mut Mode::Eval)?;
        let state = self.decoder.initial_state(&mut g, src.batch);
        let (loss, _) = self.decoder.teacher_forced(&mut g, &enc, tgt, 0..tgt.predictions(), state, &mut Mode::Eval)?;
        Ok((g.value(loss).item(), tgt.token_count(0..tgt.predictions())))
    }

    /// `(total_nll, token_count)` for one pair; `tgt` is `<s> … </s>`.
    pub fn sequence_nll(&self, src: &[usize], tgt: &[usize]) -> Result<(f64, usize)> {
        self.batch_nll(&SourceBatch::single(src)?, &TargetBatch::new(&[tgt.to_vec()])?)
    }

    /// Largest relative error between the tape gradient of the
    /// teacher-forced NLL of one pair and central differences, taken over
    /// every parameter coordinate.
    pub fn gradient_check(&self, src: &[usize], tgt: &[usize], eps: f64) -> Result<f64> {
        let src = SourceBatch::single(src)?;
        let tgt = TargetBatch::new(&[tgt.to_vec()])?;
        let loss_of = |params: &ParamStore, record: bool| -> Result<(f64, Option<Gradients>)> {
            let mut g = if record { Graph::new(params) } else { Graph::inference(params) };
            let enc = self.encoder.encode(&mut g, &src, &mut Mode::Eval)?;
            let s0 = self.decoder.initial_state(&mut g, 1);
            let (loss, _) = self.decoder.teacher_forced(&mut g, &enc, &tgt, 0..tgt.predictions(), s0, &mut Mode::Eval)?;
            let value = g.value(loss).item();
            Ok((value, if record { Some(g.backward(loss)?) } else { None }))
        };
        let grads = loss_of(&self.params, true)?.1.expect("recorded");
        let mut worst = 0.0f64;
        for p in 0..self.params.len() {
            let id = ParamId(p);
            let value = self.params.value(id);
            let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(value.shape()));
            let err = compare_with_central_differences(
                |probe| {
                    let mut s = self.params.clone();
                    s.get_mut(id).value = probe.clone();
                    Ok(loss_of(&s, false)?.0)
                },
                value,
                &analytic,
                eps,
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Corpus perplexity `exp(Σ nll / Σ tokens)`, evaluated in batches.
    pub fn perplexity(&self, pairs: &[(Vec<usize>, Vec<usize>)], batch_size: usize) -> Result<f64> {
        if pairs.is_empty() {
            return Err(Error::Data("perplexity of an empty corpus".into()));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in pairs.chunks(batch_size.max(1)) {
            let src: Vec<Vec<usize>> = chunk.iter().map(|(s, _)| s.clone()).collect();
            let tgt: Vec<Vec<usize>> = chunk.iter().map(|(_, t)| t.clone()).collect();
            let (n, c) = self.batch_nll(&SourceBatch::new(&src)?, &TargetBatch::new(&tgt)?)?;
            total += n;
            count += c;
        }
        Ok((total / count as f64).exp())
    }
}
