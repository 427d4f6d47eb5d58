//! Optimizers, learning-rate annealing, truncated BPTT, gradient hygiene and
//! the epoch loop.

use std::fmt;
use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{StateSnapshot, TargetBatch};
use crate::encoders::{EncoderKind, SourceBatch};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Seq2Seq;
use crate::numerics::{Gradients, Graph, ParamRole, ParamStore, Tensor};

/// Source ids and `<s> … </s>` target ids.
pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    /// Adam for recurrent encoders, annealed SGD otherwise.
    pub fn default_for(encoder: EncoderKind) -> Self {
        if encoder.is_recurrent() {
            OptimizerKind::Adam
        } else {
            OptimizerKind::Sgd
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 0.1,
            OptimizerKind::Adam => 3.125e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Option<OptimizerKind>,
    pub lr: Option<f64>,
    pub clip_norm: f64,
    pub tbptt_chunk: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub max_src_len: usize,
    pub anneal_floor: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before an Adam run stops.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: None,
            lr: None,
            clip_norm: 25.0,
            tbptt_chunk: 25,
            batch_size: 32,
            dropout: 0.2,
            max_src_len: 175,
            anneal_floor: 1e-4,
            max_epochs: 50,
            patience: 3,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr.map_or(true, |lr| lr > 0.0) && self.clip_norm > 0.0 && self.anneal_floor > 0.0;
        if !rates_ok {
            return Err(Error::Config("learning rate, clip norm and anneal floor must be positive".into()));
        }
        if self.tbptt_chunk == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("tbptt_chunk, batch_size and max_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn optimizer_for(&self, encoder: EncoderKind) -> OptimizerKind {
        self.optimizer.unwrap_or(OptimizerKind::default_for(encoder))
    }

    pub fn lr_for(&self, encoder: EncoderKind) -> f64 {
        self.lr.unwrap_or(self.optimizer_for(encoder).default_lr())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub src: SourceBatch,
    pub tgt: TargetBatch,
}

impl Batch {
    pub fn new(pairs: &[&Pair]) -> Result<Self> {
        let src: Vec<Vec<usize>> = pairs.iter().map(|p| p.0.clone()).collect();
        let tgt: Vec<Vec<usize>> = pairs.iter().map(|p| p.1.clone()).collect();
        Ok(Self {
            src: SourceBatch::new(&src)?,
            tgt: TargetBatch::new(&tgt)?,
        })
    }
}

/// Drops pairs with sources longer than `max_src_len`, shuffles the rest
/// with `rng` and cuts them into padded batches of `batch_size`.
pub fn make_batches(pairs: &[Pair], batch_size: usize, max_src_len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
    let mut kept: Vec<&Pair> = pairs.iter().filter(|p| p.0.len() <= max_src_len).collect();
    if kept.is_empty() {
        return Err(Error::Data("no training pairs left after length filtering".into()));
    }
    kept.shuffle(rng);
    kept.chunks(batch_size.max(1)).map(Batch::new).collect()
}

/// Multiplies each convolution gradient by `1/sqrt(fan_in)`.
pub fn scale_conv_grads(store: &mut ParamStore) {
    for p in store.iter_mut() {
        if let ParamRole::Conv { fan_in } = p.role {
            p.grad.scale_in_place(1.0 / (fan_in as f64).sqrt());
        }
    }
}

/// Divides all gradients by `batch_size`, then rescales them to norm
/// `clip_norm` if their global norm exceeds it. Returns the final norm.
pub fn clip_and_normalize_grads(store: &mut ParamStore, batch_size: usize, clip_norm: f64) -> Result<f64> {
    if let Some(p) = store.iter().find(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {}", p.name)));
    }
    let inv = 1.0 / batch_size as f64;
    store.iter_mut().for_each(|p| p.grad.scale_in_place(inv));
    let norm = store.grad_norm();
    if norm > clip_norm {
        let s = clip_norm / norm;
        store.iter_mut().for_each(|p| p.grad.scale_in_place(s));
        return Ok(store.grad_norm());
    }
    Ok(norm)
}

/// SGD or Adam (β1 = 0.9, β2 = 0.999, ε = 1e-8) over a whole store.
pub struct Optimizer {
    pub kind: OptimizerKind,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { kind, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w -= lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                    for (k, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                        m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g;
                        v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g * g;
                        *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

/// Learning rate for the next epoch given every validation perplexity so
/// far. The rate stays at `base` until the first epoch that fails to beat
/// the best earlier perplexity, then drops tenfold per epoch; `stop` is set
/// once it falls below `floor`.
pub fn anneal_schedule(history: &[f64], base: f64, floor: f64) -> (f64, bool) {
    let mut best = f64::INFINITY;
    let trigger = history.iter().position(|&p| {
        let stalled = p >= best;
        best = best.min(p);
        stalled
    });
    let Some(t) = trigger else {
        return (base, false);
    };
    let drops = (history.len() - t) as i32;
    let lr = base * 10f64.powi(-drops);
    (lr, lr < floor * (1.0 - 1e-9))
}

/// Result of one truncated-BPTT chunk.
pub struct ChunkResult {
    pub nll: f64,
    pub tokens: usize,
    pub grads: Gradients,
    /// Decoder state after the chunk, detached from any graph.
    pub end: StateSnapshot,
}

/// Forward and backward over decoder steps `range`, starting from the
/// detached `start` state. The encoder is recomputed on this chunk's graph.
pub fn chunk_gradients(model: &Seq2Seq, batch: &Batch, range: Range<usize>, start: &StateSnapshot, mode: &mut Mode<'_>) -> Result<ChunkResult> {
    let mut g = Graph::new(&model.params);
    let enc = model.encoder.encode(&mut g, &batch.src, mode)?;
    let state = start.restore(&mut g);
    let (loss, end) = model.decoder.teacher_forced(&mut g, &enc, &batch.tgt, range.clone(), state, mode)?;
    Ok(ChunkResult {
        nll: g.value(loss).item(),
        tokens: batch.tgt.token_count(range),
        grads: g.backward(loss)?,
        end: end.snapshot(&g),
    })
}

/// Splits `0..steps` into consecutive chunks of at most `chunk`.
pub fn chunk_ranges(steps: usize, chunk: usize) -> Vec<Range<usize>> {
    (0..steps).step_by(chunk.max(1)).map(|s| s..(s + chunk).min(steps)).collect()
}

/// Trains on one batch with truncated BPTT. Every chunk gets its own
/// backward pass, gradient hygiene and parameter update. Returns the summed
/// nll and token count.
pub fn train_batch(model: &mut Seq2Seq, batch: &Batch, cfg: &TrainConfig, opt: &mut Optimizer, lr: f64, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let mut state = StateSnapshot::zeros(model.decoder.config.layers, batch.src.batch, model.decoder.config.hidden);
    let (mut nll, mut tokens) = (0.0, 0);
    for range in chunk_ranges(batch.tgt.predictions(), cfg.tbptt_chunk) {
        let mut mode = Mode::Train {
            dropout: cfg.dropout,
            rng: &mut *rng,
        };
        let chunk = chunk_gradients(model, batch, range, &state, &mut mode)?;
        model.params.zero_grads();
        chunk.grads.accumulate_into(&mut model.params);
        scale_conv_grads(&mut model.params);
        clip_and_normalize_grads(&mut model.params, batch.src.batch, cfg.clip_norm)?;
        opt.step(&mut model.params, lr);
        nll += chunk.nll;
        tokens += chunk.tokens;
        state = chunk.end;
    }
    Ok((nll, tokens))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_nll_per_token: f64,
    pub valid_ppl: f64,
    pub lr: f64,
    pub wall_seconds: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6}\t{:e}\t{:.3}",
            self.epoch, self.train_nll_per_token, self.valid_ppl, self.lr, self.wall_seconds
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Annealed,
    Patience,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch with the lowest validation perplexity.
    pub best_epoch: usize,
    pub stop: StopReason,
}

/// Runs epochs until the stopping rule fires, then restores the parameters
/// of the best validation epoch. `on_epoch` sees every epoch's log, the
/// model after that epoch and whether it is the best so far.
pub fn train(
    model: &mut Seq2Seq,
    train_pairs: &[Pair],
    valid_pairs: &[Pair],
    on_epoch: &mut dyn FnMut(&EpochLog, &Seq2Seq, bool) -> Result<()>,
) -> Result<TrainReport> {
    let cfg = model.config.train.clone();
    cfg.validate()?;
    let kind = cfg.optimizer_for(model.config.encoder.kind);
    let base_lr = cfg.lr_for(model.config.encoder.kind);
    let mut opt = Optimizer::new(kind, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = base_lr;
    let mut history = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let (mut nll, mut tokens) = (0.0, 0);
        for batch in make_batches(train_pairs, cfg.batch_size, cfg.max_src_len, &mut rng)? {
            let (n, t) = train_batch(model, &batch, &cfg, &mut opt, lr, &mut rng)?;
            nll += n;
            tokens += t;
        }
        let valid_ppl = model.perplexity(valid_pairs, cfg.batch_size)?;
        if !valid_ppl.is_finite() {
            return Err(Error::NonFinite(format!("validation perplexity diverged at epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            train_nll_per_token: nll / tokens.max(1) as f64,
            valid_ppl,
            lr,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        let is_best = best.as_ref().map_or(true, |b| valid_ppl < b.1);
        if is_best {
            best = Some((epoch, valid_ppl, model.params.clone()));
        }
        on_epoch(&log, model, is_best)?;
        epochs.push(log);
        history.push(valid_ppl);

        match kind {
            OptimizerKind::Sgd => {
                let (next, done) = anneal_schedule(&history, base_lr, cfg.anneal_floor);
                lr = next;
                if done {
                    stop = StopReason::Annealed;
                    break;
                }
            }
            OptimizerKind::Adam => {
                let best_epoch = best.as_ref().unwrap().0;
                if epoch - best_epoch >= cfg.patience {
                    stop = StopReason::Patience;
                    break;
                }
            }
        }
    }
    let (best_epoch, _, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainReport { epochs, best_epoch, stop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BOS, EOS, PAD};
    use crate::decoder::DecoderConfig;
    use crate::encoders::EncoderConfig;
    use crate::model::ModelConfig;
    use crate::numerics::ParamId;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_model(kind: EncoderKind, seed: u64) -> Seq2Seq {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                kind,
                embed_dim: 8,
                hidden_a: 12,
                hidden_c: 8,
                lstm_hidden: 8,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { layers: 1, hidden: 12 },
            train: TrainConfig { dropout: 0.0, ..TrainConfig::default() },
        };
        Seq2Seq::new(cfg, 20, 20, seed).unwrap()
    }

    fn copy_pairs(n: usize, seed: u64) -> Vec<Pair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.gen_range(2..6);
                let s: Vec<usize> = (0..len).map(|_| rng.gen_range(4..20)).collect();
                let t = [vec![BOS], s.clone(), vec![EOS]].concat();
                (s, t)
            })
            .collect()
    }

    #[test]
    fn batching_cases() {
        let pairs = copy_pairs(3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sizes: Vec<usize> = make_batches(&pairs, 2, 175, &mut rng).unwrap().iter().map(|b| b.src.batch).collect();
        assert_eq!(sizes, vec![2, 1]);

        let mut with_long = pairs.clone();
        with_long.push((vec![5; 176], vec![BOS, 5, EOS]));
        let batches = make_batches(&with_long, 10, 175, &mut rng).unwrap();
        assert!(batches.iter().all(|b| b.src.steps <= 175));
        assert_eq!(batches.iter().map(|b| b.src.batch).sum::<usize>(), 3);

        let order = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            make_batches(&copy_pairs(20, 2), 4, 175, &mut rng).unwrap()
        };
        assert_eq!(order(9), order(9));
        assert!(make_batches(&[(vec![5; 200], vec![BOS, EOS])], 4, 175, &mut rng).is_err());
    }

    fn store_with_grads(grads: &[(&[f64], ParamRole)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, (g, role)) in grads.iter().enumerate() {
            let id = s.add(format!("p{i}"), Tensor::zeros(&[g.len()]), *role);
            s.get_mut(id).grad = Tensor::vector(g.to_vec());
        }
        s
    }

    #[test]
    fn clipping_and_normalization() {
        let mut s = store_with_grads(&[(&[6.0, 8.0], ParamRole::Dense)]);
        assert_eq!(clip_and_normalize_grads(&mut s, 1, 25.0).unwrap(), 10.0);
        assert_eq!(s.get(ParamId(0)).grad.data(), &[6.0, 8.0]);

        let mut s = store_with_grads(&[(&[30.0, 40.0], ParamRole::Dense)]);
        let n = clip_and_normalize_grads(&mut s, 1, 25.0).unwrap();
        assert!((n - 25.0).abs() < 1e-9);

        let mut s = store_with_grads(&[(&[8.0], ParamRole::Dense)]);
        clip_and_normalize_grads(&mut s, 4, 25.0).unwrap();
        assert_eq!(s.get(ParamId(0)).grad.data(), &[2.0]);

        let mut s = store_with_grads(&[(&[f64::NAN], ParamRole::Dense)]);
        assert!(matches!(clip_and_normalize_grads(&mut s, 1, 25.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv_gradient_scaling() {
        let mut s = store_with_grads(&[
            (&[16.0], ParamRole::Conv { fan_in: 256 }),
            (&[3.0], ParamRole::Conv { fan_in: 1 }),
            (&[0.1], ParamRole::Dense),
        ]);
        scale_conv_grads(&mut s);
        assert_eq!(s.get(ParamId(0)).grad.data(), &[1.0]);
        assert_eq!(s.get(ParamId(1)).grad.data(), &[3.0]);
        assert_eq!(s.get(ParamId(2)).grad.data()[0].to_bits(), 0.1f64.to_bits());
    }

    #[test]
    fn optimizer_steps() {
        let mut s = store_with_grads(&[(&[0.5], ParamRole::Dense)]);
        s.get_mut(ParamId(0)).value = Tensor::vector(vec![1.0]);
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, &s);
        sgd.step(&mut s, 0.1);
        assert_eq!(s.value(ParamId(0)).data(), &[0.95]);

        let mut s = store_with_grads(&[(&[-3.7, 0.02, 0.0], ParamRole::Dense)]);
        let mut adam = Optimizer::new(OptimizerKind::Adam, &s);
        adam.step(&mut s, 0.01);
        let p = s.value(ParamId(0)).data();
        assert!((p[0] - 0.01).abs() < 1e-9 && (p[1] + 0.01).abs() < 1e-6);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn anneal_schedule_cases() {
        assert_eq!(anneal_schedule(&[10.0, 9.0], 0.1, 1e-4), (0.1, false));
        let (lr, stop) = anneal_schedule(&[10.0, 9.0, 9.5], 0.1, 1e-4);
        assert!((lr - 0.01).abs() < 1e-15 && !stop);
        let lrs: Vec<(f64, bool)> = (3..=6).map(|n| anneal_schedule(&[10.0, 9.0, 9.5, 8.0, 7.0, 6.0][..n], 0.1, 1e-4)).collect();
        let expected = [(0.01, false), (0.001, false), (1e-4, false), (1e-5, true)];
        for ((lr, stop), (e, s)) in lrs.iter().zip(expected) {
            assert!((lr - e).abs() < 1e-15 * e.max(1e-3) * 1e3, "{lr} vs {e}");
            assert_eq!(*stop, s);
        }
        let improving: Vec<f64> = (0..100).map(|i| 100.0 - i as f64).collect();
        assert_eq!(anneal_schedule(&improving, 0.1, 1e-4), (0.1, false));
    }

    proptest! {
        #[test]
        fn clipped_norm_is_bounded(gs in proptest::collection::vec(-1e3f64..1e3, 1..30), b in 1usize..64) {
            let mut s = store_with_grads(&[(&gs, ParamRole::Dense)]);
            let n = clip_and_normalize_grads(&mut s, b, 25.0).unwrap();
            prop_assert!(n <= 25.0 + 1e-9 && s.grad_norm() <= 25.0 + 1e-9);
        }

        #[test]
        fn anneal_is_pure(h in proptest::collection::vec(1.0f64..50.0, 0..12)) {
            prop_assert_eq!(anneal_schedule(&h, 0.1, 1e-4), anneal_schedule(&h, 0.1, 1e-4));
        }
    }

    #[test]
    fn chunking_cases() {
        assert_eq!(chunk_ranges(20, 25), vec![0..20]);
        assert_eq!(chunk_ranges(60, 25), vec![0..25, 25..50, 50..60]);
    }

    #[test]
    fn single_chunk_equals_untruncated_gradient() {
        let model = small_model(EncoderKind::Conv, 3);
        let pairs = copy_pairs(4, 4);
        let batch = Batch::new(&pairs.iter().collect::<Vec<_>>()).unwrap();
        let zero = StateSnapshot::zeros(1, 4, 12);
        let whole = chunk_gradients(&model, &batch, 0..batch.tgt.predictions(), &zero, &mut Mode::Eval).unwrap();
        let mut g = Graph::new(&model.params);
        let enc = model.encoder.encode(&mut g, &batch.src, &mut Mode::Eval).unwrap();
        let s0 = model.decoder.initial_state(&mut g, 4);
        let (loss, _) = model.decoder.teacher_forced(&mut g, &enc, &batch.tgt, 0..batch.tgt.predictions(), s0, &mut Mode::Eval).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(whole.nll.to_bits(), g.value(loss).item().to_bits());
        for p in 0..model.params.len() {
            assert_eq!(whole.grads.param(ParamId(p)).map(|t| t.data().to_vec()), grads.param(ParamId(p)).map(|t| t.data().to_vec()));
        }
    }

    #[test]
    fn no_gradient_crosses_a_chunk_boundary() {
        let model = small_model(EncoderKind::Pooling, 5);
        // Token 17 only ever appears as a decoder input in the first chunk.
        let pair: Pair = (vec![4, 5, 6, 7], vec![BOS, 17, 5, 6, 7, EOS]);
        let batch = Batch::new(&[&pair]).unwrap();
        let zero = StateSnapshot::zeros(1, 1, 12);
        let first = chunk_gradients(&model, &batch, 0..2, &zero, &mut Mode::Eval).unwrap();
        let second = chunk_gradients(&model, &batch, 2..5, &first.end, &mut Mode::Eval).unwrap();
        let table = model.decoder.embed.table;
        let row = |g: &Gradients| g.param(table).unwrap().row(17).to_vec();
        assert!(row(&second.grads).iter().all(|&v| v == 0.0));
        assert!(row(&first.grads).iter().any(|&v| v != 0.0));

        // Without truncation the later loss does reach that row.
        let mut g = Graph::new(&model.params);
        let enc = model.encoder.encode(&mut g, &batch.src, &mut Mode::Eval).unwrap();
        let s0 = model.decoder.initial_state(&mut g, 1);
        let (_, mid) = model.decoder.teacher_forced(&mut g, &enc, &batch.tgt, 0..2, s0, &mut Mode::Eval).unwrap();
        let (late, _) = model.decoder.teacher_forced(&mut g, &enc, &batch.tgt, 2..5, mid, &mut Mode::Eval).unwrap();
        let full = g.backward(late).unwrap();
        assert!(row(&full).iter().any(|&v| v != 0.0));
        assert_eq!(second.nll.to_bits(), g.value(late).item().to_bits());
    }

    #[test]
    fn padding_changes_nothing_bitwise() {
        let model = small_model(EncoderKind::Conv, 6);
        let pairs = copy_pairs(3, 7);
        let batch = Batch::new(&pairs.iter().collect::<Vec<_>>()).unwrap();
        let pad = |ids: &[usize], batch: usize, steps: usize, extra: usize| -> Vec<usize> {
            (0..batch)
                .flat_map(|b| ids[b * steps..(b + 1) * steps].iter().copied().chain(std::iter::repeat(PAD).take(extra)))
                .collect()
        };
        let padded = Batch {
            src: SourceBatch {
                ids: pad(&batch.src.ids, 3, batch.src.steps, 3),
                steps: batch.src.steps + 3,
                ..batch.src.clone()
            },
            tgt: TargetBatch {
                ids: pad(&batch.tgt.ids, 3, batch.tgt.steps, 2),
                steps: batch.tgt.steps + 2,
                ..batch.tgt.clone()
            },
        };
        let zero = StateSnapshot::zeros(1, 3, 12);
        let a = chunk_gradients(&model, &batch, 0..batch.tgt.predictions(), &zero, &mut Mode::Eval).unwrap();
        let b = chunk_gradients(&model, &padded, 0..padded.tgt.predictions(), &zero, &mut Mode::Eval).unwrap();
        assert_eq!(a.nll.to_bits(), b.nll.to_bits());
        assert_eq!(a.tokens, b.tokens);
        for p in 0..model.params.len() {
            let (x, y) = (a.grads.param(ParamId(p)), b.grads.param(ParamId(p)));
            let bits = |t: Option<&Tensor>| t.map(|t| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            assert_eq!(bits(x), bits(y), "{}", model.params.get(ParamId(p)).name);
        }
    }

    #[test]
    fn batch_gradient_is_the_sum_of_sentence_gradients() {
        for kind in [EncoderKind::Pooling, EncoderKind::Conv, EncoderKind::BiLstm, EncoderKind::UniLstm] {
            let model = small_model(kind, 3);
            let pairs = copy_pairs(4, 11);
            let batch = Batch::new(&pairs.iter().collect::<Vec<_>>()).unwrap();
            let whole = chunk_gradients(&model, &batch, 0..batch.tgt.predictions(), &StateSnapshot::zeros(1, 4, 12), &mut Mode::Eval).unwrap();
            let singles: Vec<ChunkResult> = pairs
                .iter()
                .map(|p| {
                    let b = Batch::new(&[p]).unwrap();
                    chunk_gradients(&model, &b, 0..b.tgt.predictions(), &StateSnapshot::zeros(1, 1, 12), &mut Mode::Eval).unwrap()
                })
                .collect();
            let nll: f64 = singles.iter().map(|c| c.nll).sum();
            assert!((whole.nll - nll).abs() < 1e-10, "{kind:?}");
            for p in 0..model.params.len() {
                let id = ParamId(p);
                let shape = model.params.value(id).shape();
                let mut sum = Tensor::zeros(shape);
                for c in &singles {
                    if let Some(g) = c.grads.param(id) {
                        sum.data_mut().iter_mut().zip(g.data()).for_each(|(s, v)| *s += v);
                    }
                }
                let got = whole.grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(shape));
                for (a, b) in got.data().iter().zip(sum.data()) {
                    assert!((a - b).abs() < 1e-10, "{kind:?} {}: {a} vs {b}", model.params.get(id).name);
                }
            }
        }
    }

    #[test]
    fn sgd_decreases_loss_on_a_fixed_batch() {
        let mut model = small_model(EncoderKind::Conv, 8);
        let pairs = copy_pairs(8, 9);
        let batch = Batch::new(&pairs.iter().collect::<Vec<_>>()).unwrap();
        let cfg = model.config.train.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut losses = vec![model.batch_nll(&batch.src, &batch.tgt).unwrap().0];
        for _ in 0..5 {
            train_batch(&mut model, &batch, &cfg, &mut opt, 0.01, &mut rng).unwrap();
            losses.push(model.batch_nll(&batch.src, &batch.tgt).unwrap().0);
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn pad_embedding_rows_stay_zero() {
        let mut model = small_model(EncoderKind::Conv, 10);
        model.config.train.optimizer = Some(OptimizerKind::Adam);
        model.config.train.lr = Some(0.01);
        let pairs = copy_pairs(16, 11);
        let cfg = model.config.train.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, &model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for batch in make_batches(&pairs, 5, 175, &mut rng.clone()).unwrap() {
            train_batch(&mut model, &batch, &cfg, &mut opt, 0.01, &mut rng).unwrap();
        }
        for table in [model.encoder.words.table, model.decoder.embed.table] {
            assert!(model.params.value(table).row(PAD).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn memorizes_one_sentence_and_is_deterministic() {
        let run = || {
            let mut model = small_model(EncoderKind::Conv, 12);
            model.config.train.optimizer = Some(OptimizerKind::Adam);
            model.config.train.lr = Some(0.05);
            model.config.train.max_epochs = 150;
            model.config.train.patience = 150;
            let pair: Pair = (vec![4, 9, 13, 6], vec![BOS, 4, 9, 13, 6, EOS]);
            let mut logs = Vec::new();
            let report = train(&mut model, &[pair.clone()], &[pair.clone()], &mut |log, _, _| {
                logs.push(log.clone());
                Ok(())
            })
            .unwrap();
            (report, logs, model.perplexity(&[pair], 1).unwrap())
        };
        let (report, logs, ppl) = run();
        assert!(logs.last().unwrap().train_nll_per_token < 0.05, "{:?}", logs.last());
        assert!(ppl < 1.05, "{ppl}");
        let argmin = logs.iter().min_by(|a, b| a.valid_ppl.total_cmp(&b.valid_ppl)).unwrap().epoch;
        assert_eq!(report.best_epoch, argmin);
        let (_, again, _) = run();
        assert_eq!(logs[0].train_nll_per_token.to_bits(), again[0].train_nll_per_token.to_bits());
        assert_eq!(logs[0].to_string().split('\t').count(), 5);
    }
}
