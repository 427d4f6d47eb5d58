//! Decoding: beam search, greedy search, unknown-word replacement and
//! per-sentence output vocabulary selection.
//!
//! Search runs against the [`StepModel`] trait so it can be exercised on
//! small tabulated models as well as on a trained [`Seq2Seq`].

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{LexicalDictionary, Vocabulary, BOS, EOS, PAD, UNK};
use crate::decoder::StateSnapshot;
use crate::encoders::{EncoderOutput, SourceBatch};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::Seq2Seq;
use crate::numerics::{Graph, Tensor};

/// Default generation cap for a source of `m` tokens.
pub fn default_max_len(m: usize) -> usize {
    2 * m + 10
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    /// Added to the score of every generated token except `</s>`.
    pub word_penalty: f64,
    /// `None` means [`default_max_len`] of the source.
    pub max_len: Option<usize>,
    /// Rank finished hypotheses by score per generated token (EOS included).
    pub length_normalize: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam: 5,
            word_penalty: 0.0,
            max_len: None,
            length_normalize: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        if self.word_penalty.is_nan() {
            return Err(Error::Config("word penalty is NaN".into()));
        }
        Ok(())
    }

    fn cap(&self, m: usize) -> usize {
        self.max_len.unwrap_or_else(|| default_max_len(m))
    }
}

/// A (possibly partial) output sequence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Hypothesis {
    /// Generated ids; ends with `</s>` iff `finished`.
    pub tokens: Vec<usize>,
    /// Sum of token log-probabilities.
    pub logprob: f64,
    /// One attention row per generated token.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

impl Hypothesis {
    fn push(&mut self, token: usize, logprob: f64, attention: Vec<f64>) {
        self.tokens.push(token);
        self.logprob += logprob;
        self.attention.push(attention);
        self.finished = token == EOS;
    }

    fn last_or_bos(&self) -> usize {
        self.tokens.last().copied().unwrap_or(BOS)
    }

    /// Generated tokens without the closing `</s>`.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn running_score(&self, word_penalty: f64) -> f64 {
        let words = self.tokens.iter().filter(|&&t| t != EOS).count();
        self.logprob + word_penalty * words as f64
    }

    /// Ranking key among completed hypotheses.
    pub fn final_score(&self, cfg: &SearchConfig) -> f64 {
        let raw = self.running_score(cfg.word_penalty);
        if cfg.length_normalize {
            raw / self.tokens.len().max(1) as f64
        } else {
            raw
        }
    }
}

/// Result of advancing one decoder state by one token.
#[derive(Clone, Debug)]
pub struct Advance<S> {
    /// Log-probabilities aligned with [`StepModel::scored_tokens`].
    pub log_probs: Vec<f64>,
    /// Weights over the source positions.
    pub attention: Vec<f64>,
    pub state: S,
}

/// Anything that scores next tokens given a decoder state.
pub trait StepModel {
    type State: Clone;

    fn source_len(&self) -> usize;

    /// Ascending token ids that `advance` scores; `None` means every id,
    /// with position equal to id.
    fn scored_tokens(&self) -> Option<&[usize]>;

    fn initial_state(&mut self) -> Result<Self::State>;

    /// Feeds `prev[i]` to `states[i]` for every `i`.
    fn advance(&mut self, states: &[&Self::State], prev: &[usize]) -> Result<Vec<Advance<Self::State>>>;
}

fn token_at(ids: Option<&[usize]>, pos: usize) -> usize {
    ids.map_or(pos, |ids| ids[pos])
}

fn generatable(token: usize, log_prob: f64) -> bool {
    token != PAD && token != BOS && log_prob > f64::NEG_INFINITY
}

/// Argmax token, ties to the lowest id.
fn best_token(ids: Option<&[usize]>, log_probs: &[f64]) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (pos, &lp) in log_probs.iter().enumerate() {
        let token = token_at(ids, pos);
        if generatable(token, lp) && best.map_or(true, |(_, b)| lp > b) {
            best = Some((token, lp));
        }
    }
    best
}

/// Takes the argmax token each step until `</s>` or `max_len` tokens.
pub fn greedy_decode<M: StepModel>(model: &mut M, max_len: Option<usize>) -> Result<Hypothesis> {
    let cap = max_len.unwrap_or_else(|| default_max_len(model.source_len()));
    let mut hyp = Hypothesis::default();
    let mut state = model.initial_state()?;
    while hyp.tokens.len() < cap && !hyp.finished {
        let adv = model.advance(&[&state], &[hyp.last_or_bos()])?.pop().expect("one state in, one out");
        let (token, lp) = best_token(model.scored_tokens(), &adv.log_probs)
            .ok_or_else(|| Error::Config("no token can be generated".into()))?;
        hyp.push(token, lp, adv.attention);
        state = adv.state;
    }
    Ok(hyp)
}

/// Beam search; returns every completed hypothesis, best first. Hypotheses
/// still open at the length cap are returned unfinished.
pub fn beam_search<M: StepModel>(model: &mut M, cfg: &SearchConfig) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let cap = cfg.cap(model.source_len());
    let mut active = vec![(Hypothesis::default(), model.initial_state()?)];
    let mut pool: Vec<Hypothesis> = Vec::new();
    let mut steps = 0;
    while !active.is_empty() && steps < cap {
        steps += 1;
        let prev: Vec<usize> = active.iter().map(|(h, _)| h.last_or_bos()).collect();
        let states: Vec<&M::State> = active.iter().map(|(_, s)| s).collect();
        let mut advances = model.advance(&states, &prev)?;
        let ids = model.scored_tokens();

        // (running score, parent, token, token log-prob)
        let mut expansions: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (parent, ((hyp, _), adv)) in active.iter().zip(&advances).enumerate() {
            let base = hyp.running_score(cfg.word_penalty);
            for (pos, &lp) in adv.log_probs.iter().enumerate() {
                let token = token_at(ids, pos);
                if generatable(token, lp) {
                    let penalty = if token == EOS { 0.0 } else { cfg.word_penalty };
                    expansions.push((base + lp + penalty, parent, token, lp));
                }
            }
        }
        let order = |a: &(f64, usize, usize, f64), b: &(f64, usize, usize, f64)| {
            b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2))
        };
        if expansions.len() > cfg.beam {
            expansions.select_nth_unstable_by(cfg.beam - 1, order);
            expansions.truncate(cfg.beam);
        }
        expansions.sort_by(order);

        let mut next = Vec::with_capacity(expansions.len());
        for &(_, parent, token, lp) in &expansions {
            let mut hyp = active[parent].0.clone();
            hyp.push(token, lp, advances[parent].attention.clone());
            if hyp.finished {
                pool.push(hyp);
            } else {
                next.push((hyp, advances[parent].state.clone()));
            }
        }
        advances.clear();
        active = next;

        // Scores only fall when the penalty is non-positive, so an open
        // hypothesis with running score r <= 0 can end no higher than r
        // (raw) or r / cap (normalized).
        if cfg.word_penalty <= 0.0 && !pool.is_empty() && !active.is_empty() {
            let best = pool.iter().map(|h| h.final_score(cfg)).fold(f64::NEG_INFINITY, f64::max);
            let bound = active
                .iter()
                .map(|(h, _)| {
                    let r = h.running_score(cfg.word_penalty);
                    if cfg.length_normalize {
                        r / cap as f64
                    } else {
                        r
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max);
            if bound <= best {
                active.clear();
            }
        }
    }
    pool.extend(active.into_iter().map(|(h, _)| h));
    pool.sort_by(|a, b| b.final_score(cfg).total_cmp(&a.final_score(cfg)).then_with(|| a.tokens.cmp(&b.tokens)));
    Ok(pool)
}

/// Adapts a [`Seq2Seq`] to [`StepModel`] for one source sentence. The
/// encoder runs once; each step's nodes are discarded afterwards.
pub struct Translator<'m> {
    model: &'m Seq2Seq,
    graph: Graph<'m>,
    enc: EncoderOutput,
    mark: usize,
    candidates: Option<Vec<usize>>,
}

impl<'m> Translator<'m> {
    /// `candidates` restricts the output softmax to those ids.
    pub fn new(model: &'m Seq2Seq, src: &[usize], candidates: Option<Vec<usize>>) -> Result<Self> {
        let candidates = candidates.map(|mut c| {
            c.sort_unstable();
            c.dedup();
            c
        });
        if let Some(&id) = candidates.as_ref().and_then(|c| c.last()) {
            if id >= model.tgt_vocab {
                return Err(Error::TokenOutOfRange {
                    position: 0,
                    id,
                    vocab: model.tgt_vocab,
                });
            }
        }
        let mut graph = Graph::inference(&model.params);
        let enc = model.encoder.encode(&mut graph, &SourceBatch::single(src)?, &mut Mode::Eval)?;
        let mark = graph.len();
        Ok(Self {
            model,
            graph,
            enc,
            mark,
            candidates,
        })
    }

    /// Multiply-adds spent in the output projection per state and step.
    pub fn output_layer_macs(&self) -> usize {
        let rows = self.candidates.as_ref().map_or(self.model.tgt_vocab, Vec::len);
        rows * self.model.config.encoder.embed_dim
    }
}

impl StepModel for Translator<'_> {
    type State = StateSnapshot;

    fn source_len(&self) -> usize {
        self.enc.steps
    }

    fn scored_tokens(&self) -> Option<&[usize]> {
        self.candidates.as_deref()
    }

    fn initial_state(&mut self) -> Result<StateSnapshot> {
        let cfg = &self.model.decoder.config;
        Ok(StateSnapshot::zeros(cfg.layers, 1, cfg.hidden))
    }

    fn advance(&mut self, states: &[&StateSnapshot], prev: &[usize]) -> Result<Vec<Advance<StateSnapshot>>> {
        let stacked = StateSnapshot::stack(states);
        let state = stacked.restore(&mut self.graph);
        let step = self.model.decoder.step(
            &mut self.graph,
            &state,
            prev,
            &self.enc,
            &mut Mode::Eval,
            self.candidates.as_deref(),
        );
        let out = step.map(|step| {
            let log_probs = self.graph.value(step.logits).log_softmax_rows();
            let attention = self.graph.value(step.attention).clone();
            (log_probs, attention, step.state.snapshot(&self.graph))
        });
        self.graph.truncate(self.mark);
        let (log_probs, attention, next) = out?;
        Ok((0..prev.len())
            .map(|i| Advance {
                log_probs: log_probs.row(i).to_vec(),
                attention: attention.row(i).to_vec(),
                state: next.select_rows(&[i]),
            })
            .collect())
    }
}

/// Best hypothesis for one source sentence.
pub fn translate(model: &Seq2Seq, src: &[usize], cfg: &SearchConfig, candidates: Option<Vec<usize>>) -> Result<Hypothesis> {
    let mut step_model = Translator::new(model, src, candidates)?;
    Ok(beam_search(&mut step_model, cfg)?.swap_remove(0))
}

/// Greedy decoding of a padded batch in lock step. Attention rows span the
/// padded source width.
pub fn greedy_decode_batch(model: &Seq2Seq, sources: &[Vec<usize>], max_len: Option<usize>) -> Result<Vec<Hypothesis>> {
    let src = SourceBatch::new(sources)?;
    let mut g = Graph::inference(&model.params);
    let enc = model.encoder.encode(&mut g, &src, &mut Mode::Eval)?;
    let mark = g.len();
    let caps: Vec<usize> = src.lengths.iter().map(|&m| max_len.unwrap_or_else(|| default_max_len(m))).collect();
    let cfg = &model.decoder.config;
    let mut snapshot = StateSnapshot::zeros(cfg.layers, src.batch, cfg.hidden);
    let mut hyps = vec![Hypothesis::default(); src.batch];
    let open = |h: &Hypothesis, cap: usize| !h.finished && h.tokens.len() < cap;
    while hyps.iter().zip(&caps).any(|(h, &c)| open(h, c)) {
        let prev: Vec<usize> = hyps.iter().map(Hypothesis::last_or_bos).collect();
        let state = snapshot.restore(&mut g);
        let step = model.decoder.step(&mut g, &state, &prev, &enc, &mut Mode::Eval, None)?;
        let log_probs = g.value(step.logits).log_softmax_rows();
        let attention = g.value(step.attention).clone();
        snapshot = step.state.snapshot(&g);
        g.truncate(mark);
        for (i, hyp) in hyps.iter_mut().enumerate() {
            if open(hyp, caps[i]) {
                let (token, lp) = best_token(None, log_probs.row(i)).expect("full vocabulary has a generatable token");
                hyp.push(token, lp, attention.row(i).to_vec());
            }
        }
    }
    Ok(hyps)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn shifted(j: usize, offset: i64, m: usize) -> usize {
    (j as i64 + offset).clamp(0, m as i64 - 1) as usize
}

/// Turns a hypothesis into words, replacing each `<unk>` with the
/// dictionary translation of the most-attended source word (shifted by
/// `offset`), or with that source word itself.
pub fn replace_unknowns<S: AsRef<str>>(
    hyp: &Hypothesis,
    src: &[S],
    tgt_vocab: &Vocabulary,
    dict: &LexicalDictionary,
    offset: i64,
) -> Vec<String> {
    hyp.output()
        .iter()
        .enumerate()
        .map(|(i, &token)| {
            if token != UNK || src.is_empty() {
                return tgt_vocab.token(token).to_string();
            }
            let row = &hyp.attention[i];
            let j = shifted(argmax(&row[..src.len().min(row.len())]), offset, src.len());
            let word = src[j].as_ref();
            dict.lookup(word).unwrap_or(word).to_string()
        })
        .collect()
}

/// A decoded sentence with its attention, as words.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub source: Vec<String>,
    pub output: Vec<String>,
    /// One row per output word.
    pub attention: Vec<Vec<f64>>,
}

pub const OFFSETS: [i64; 5] = [0, -1, 1, -2, 2];

/// Fraction of output words equal to the dictionary translation of their
/// shifted attention argmax.
pub fn offset_hit_rate(samples: &[Alignment], dict: &LexicalDictionary, offset: i64) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        for (word, row) in s.output.iter().zip(&s.attention) {
            total += 1;
            if s.source.is_empty() {
                continue;
            }
            let j = shifted(argmax(&row[..s.source.len().min(row.len())]), offset, s.source.len());
            if dict.lookup(&s.source[j]) == Some(word.as_str()) {
                hits += 1;
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Offset in −2..=2 with the highest [`offset_hit_rate`]; ties prefer 0,
/// then the smaller shift.
pub fn best_offset(samples: &[Alignment], dict: &LexicalDictionary) -> Result<i64> {
    if samples.is_empty() {
        return Err(Error::Data("offset estimation needs a nonempty dev set".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for o in OFFSETS {
        let rate = offset_hit_rate(samples, dict, o);
        if rate > best.1 {
            best = (o, rate);
        }
    }
    Ok(best.0)
}

/// Decodes `dev_sources` and picks the attention offset that best agrees
/// with `dict`.
pub fn estimate_attention_offset(
    model: &Seq2Seq,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    dev_sources: &[Vec<String>],
    dict: &LexicalDictionary,
    cfg: &SearchConfig,
) -> Result<i64> {
    let samples = dev_sources
        .iter()
        .map(|src| {
            let hyp = translate(model, &src_vocab.encode_tokens(src, false), cfg, None)?;
            Ok(Alignment {
                source: src.clone(),
                output: hyp.output().iter().map(|&t| tgt_vocab.token(t).to_string()).collect(),
                attention: hyp.attention,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    best_offset(&samples, dict)
}

/// Output ids allowed for one sentence: the specials, the `top_k_global`
/// most frequent target words and up to `per_word` dictionary translations
/// of every source word. Sorted ascending.
pub fn select_vocabulary<S: AsRef<str>>(
    src: &[S],
    dict: &LexicalDictionary,
    tgt_vocab: &Vocabulary,
    top_k_global: usize,
    per_word: usize,
) -> Vec<usize> {
    let mut ids: BTreeSet<usize> = (0..4).collect();
    ids.extend(tgt_vocab.by_frequency().filter(|&id| id >= 4).take(top_k_global));
    for word in src {
        for t in dict.candidates(word.as_ref(), per_word) {
            if tgt_vocab.contains(t) {
                ids.insert(tgt_vocab.id(t));
            }
        }
    }
    ids.into_iter().collect()
}

/// Step model whose next-token distribution is a fixed pseudo-random
/// function of the seed and the full prefix. Small enough instances can be
/// searched exhaustively.
#[derive(Clone, Debug)]
pub struct TableModel {
    pub vocab: usize,
    pub source_len: usize,
    pub seed: u64,
    /// Multiplies the random logits; larger means peakier distributions.
    pub sharpness: f64,
}

impl TableModel {
    /// Log-probabilities over all `vocab` ids after `prefix`.
    pub fn log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let mut key = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in prefix {
            key = key.wrapping_mul(0x0100_0000_01b3).wrapping_add(t as u64 + 1);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let logits: Vec<f64> = (0..self.vocab).map(|_| self.sharpness * rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![1, self.vocab], logits).unwrap().log_softmax_rows().into_data()
    }

    fn attention(&self, prefix: &[usize]) -> Vec<f64> {
        let m = self.source_len.max(1);
        let mut row = vec![0.0; m];
        row[prefix.len() % m] = 1.0;
        row
    }
}

impl StepModel for TableModel {
    type State = Vec<usize>;

    fn source_len(&self) -> usize {
        self.source_len
    }

    fn scored_tokens(&self) -> Option<&[usize]> {
        None
    }

    fn initial_state(&mut self) -> Result<Vec<usize>> {
        Ok(Vec::new())
    }

    fn advance(&mut self, states: &[&Vec<usize>], prev: &[usize]) -> Result<Vec<Advance<Vec<usize>>>> {
        Ok(states
            .iter()
            .zip(prev)
            .map(|(prefix, &p)| {
                let mut next = (*prefix).clone();
                if p != BOS {
                    next.push(p);
                }
                Advance {
                    log_probs: self.log_probs(&next),
                    attention: self.attention(&next),
                    state: next,
                }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_vocab;
    use crate::decoder::DecoderConfig;
    use crate::encoders::{EncoderConfig, EncoderKind};
    use crate::model::ModelConfig;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    fn table(seed: u64, vocab: usize) -> TableModel {
        TableModel {
            vocab,
            source_len: 3,
            seed,
            sharpness: 2.0,
        }
    }

    /// Every sequence the search may produce: ended by `</s>` within
    /// `cap` tokens, or `cap` tokens without it.
    fn enumerate(model: &TableModel, cap: usize) -> Vec<(Vec<usize>, f64)> {
        let mut out = Vec::new();
        let mut stack = vec![(Vec::new(), 0.0)];
        while let Some((prefix, lp)) = stack.pop() {
            let probs = model.log_probs(&prefix);
            for t in (0..model.vocab).filter(|&t| t != PAD && t != BOS) {
                let mut seq: Vec<usize> = prefix.clone();
                seq.push(t);
                let score = lp + probs[t];
                if t == EOS || seq.len() == cap {
                    out.push((seq, score));
                } else {
                    stack.push((seq, score));
                }
            }
        }
        out
    }

    fn exhaustive_best(model: &TableModel, cap: usize, key: impl Fn(&[usize], f64) -> f64) -> f64 {
        enumerate(model, cap).iter().map(|(s, lp)| key(s, *lp)).fold(f64::NEG_INFINITY, f64::max)
    }

    #[test]
    fn exhaustive_beam_finds_the_global_maximum() {
        for seed in 0..20 {
            let mut model = table(seed, 7);
            let cfg = SearchConfig {
                beam: 625,
                word_penalty: 0.0,
                max_len: Some(4),
                length_normalize: false,
            };
            let best = beam_search(&mut model, &cfg).unwrap();
            let oracle = exhaustive_best(&model, 4, |_, lp| lp);
            assert!((best[0].logprob - oracle).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn exhaustive_beam_maximizes_normalized_and_penalized_scores() {
        for seed in 0..10 {
            let mut model = table(seed, 7);
            let cfg = SearchConfig {
                beam: 625,
                word_penalty: -0.5,
                max_len: Some(4),
                length_normalize: true,
            };
            let best = beam_search(&mut model, &cfg).unwrap();
            let oracle = exhaustive_best(&model, 4, |s, lp| {
                let words = s.iter().filter(|&&t| t != EOS).count() as f64;
                (lp - 0.5 * words) / s.len() as f64
            });
            assert!((best[0].final_score(&cfg) - oracle).abs() < 1e-12, "seed {seed}");
        }
    }

    #[test]
    fn three_step_table_matches_enumeration_of_all_outputs() {
        let mut model = table(42, 6);
        let cfg = SearchConfig {
            beam: 64,
            word_penalty: 0.0,
            max_len: Some(3),
            length_normalize: false,
        };
        let ranked = beam_search(&mut model, &cfg).unwrap();
        let mut all = enumerate(&model, 3);
        all.sort_by(|a, b| b.1.total_cmp(&a.1));
        assert_eq!(ranked.len(), all.len());
        for (h, (seq, lp)) in ranked.iter().zip(&all) {
            assert_eq!(&h.tokens, seq);
            assert!((h.logprob - lp).abs() < 1e-12);
        }
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..100 {
            let mut model = TableModel {
                source_len: 1 + (seed as usize % 5),
                ..table(seed, 9)
            };
            let greedy = greedy_decode(&mut model, None).unwrap();
            let cfg = SearchConfig {
                beam: 1,
                ..SearchConfig::default()
            };
            let beam = beam_search(&mut model, &cfg).unwrap();
            assert_eq!(beam[0].tokens, greedy.tokens, "seed {seed}");
            assert_eq!(beam[0].logprob.to_bits(), greedy.logprob.to_bits());
        }
    }

    #[test]
    fn huge_word_penalty_stops_immediately() {
        let mut model = table(3, 9);
        let cfg = SearchConfig {
            word_penalty: -1e9,
            ..SearchConfig::default()
        };
        assert_eq!(beam_search(&mut model, &cfg).unwrap()[0].tokens, vec![EOS]);
    }

    #[test]
    fn zero_beam_is_rejected() {
        let cfg = SearchConfig {
            beam: 0,
            ..SearchConfig::default()
        };
        assert!(beam_search(&mut table(0, 5), &cfg).is_err());
    }

    #[test]
    fn generation_respects_the_cap_and_never_emits_pad_or_bos() {
        for seed in 0..30 {
            let mut model = TableModel {
                sharpness: 0.1,
                ..table(seed, 6)
            };
            let hyps = beam_search(&mut model, &SearchConfig::default()).unwrap();
            for h in &hyps {
                assert!(h.tokens.len() <= default_max_len(3));
                assert!(!h.tokens.contains(&PAD) && !h.tokens.contains(&BOS));
                assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
                assert_eq!(h.attention.len(), h.tokens.len());
            }
        }
    }

    /// Always predicts `</s>` with near certainty.
    struct EosModel;

    impl StepModel for EosModel {
        type State = ();
        fn source_len(&self) -> usize {
            2
        }
        fn scored_tokens(&self) -> Option<&[usize]> {
            None
        }
        fn initial_state(&mut self) -> Result<()> {
            Ok(())
        }
        fn advance(&mut self, states: &[&()], _prev: &[usize]) -> Result<Vec<Advance<()>>> {
            let lp = Tensor::new(vec![1, 6], vec![0.0, 0.0, 0.0, 9.0, 0.0, 0.0]).unwrap().log_softmax_rows();
            Ok(states
                .iter()
                .map(|_| Advance {
                    log_probs: lp.data().to_vec(),
                    attention: vec![0.5, 0.5],
                    state: (),
                })
                .collect())
        }
    }

    #[test]
    fn eos_model_gives_empty_translation() {
        let hyp = greedy_decode(&mut EosModel, None).unwrap();
        assert!(hyp.output().is_empty());
        assert!(hyp.finished);
    }

    #[test]
    fn wider_beams_never_score_lower_than_exhaustive_search_allows() {
        let mut violations = 0;
        for seed in 0..40 {
            let model = table(seed, 7);
            let mut last = f64::NEG_INFINITY;
            for beam in [1, 2, 3, 5, 8, 625] {
                let cfg = SearchConfig {
                    beam,
                    max_len: Some(4),
                    ..SearchConfig::default()
                };
                let score = beam_search(&mut model.clone(), &cfg).unwrap()[0].final_score(&cfg);
                if score < last - 1e-12 {
                    violations += 1;
                }
                last = last.max(score);
            }
            let cfg = SearchConfig {
                beam: 625,
                max_len: Some(4),
                ..SearchConfig::default()
            };
            let full = beam_search(&mut model.clone(), &cfg).unwrap()[0].final_score(&cfg);
            assert!((full - last).abs() < 1e-12);
        }
        assert_eq!(violations, 0);
    }

    fn tiny_model(kind: EncoderKind, seed: u64) -> Seq2Seq {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                kind,
                embed_dim: 6,
                hidden_a: 8,
                hidden_c: 6,
                lstm_hidden: 5,
                ..EncoderConfig::default()
            },
            decoder: DecoderConfig { layers: 2, hidden: 7 },
            ..ModelConfig::default()
        };
        let mut model = Seq2Seq::new(cfg, 15, 12, seed).unwrap();
        // Sharper output distributions make the decodes less uniform.
        for p in model.params.iter_mut() {
            p.value.scale_in_place(8.0);
        }
        model
    }

    fn random_sources(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<usize>> {
        (0..n)
            .map(|_| (0..rng.gen_range(1..8)).map(|_| rng.gen_range(4..15)).collect())
            .collect()
    }

    #[test]
    fn translator_beam_one_matches_greedy_for_every_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in [EncoderKind::Pooling, EncoderKind::Conv, EncoderKind::BiLstm, EncoderKind::UniLstm] {
            let model = tiny_model(kind, 3);
            for src in random_sources(&mut rng, 10) {
                let greedy = greedy_decode(&mut Translator::new(&model, &src, None).unwrap(), None).unwrap();
                let cfg = SearchConfig {
                    beam: 1,
                    ..SearchConfig::default()
                };
                assert_eq!(translate(&model, &src, &cfg, None).unwrap().tokens, greedy.tokens);
            }
        }
    }

    #[test]
    fn batched_greedy_matches_single_sentence_decoding() {
        let model = tiny_model(EncoderKind::Conv, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sources = random_sources(&mut rng, 7);
        let batch = greedy_decode_batch(&model, &sources, None).unwrap();
        let width = sources.iter().map(Vec::len).max().unwrap();
        for (src, hyp) in sources.iter().zip(&batch) {
            let single = greedy_decode(&mut Translator::new(&model, src, None).unwrap(), None).unwrap();
            assert_eq!(hyp.tokens, single.tokens);
            for (row, srow) in hyp.attention.iter().zip(&single.attention) {
                assert_eq!(row.len(), width);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row[src.len()..].iter().all(|&a| a == 0.0));
                for (a, b) in row.iter().zip(srow) {
                    assert!((a - b).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn translator_graph_does_not_grow_between_steps() {
        let model = tiny_model(EncoderKind::BiLstm, 1);
        let mut tr = Translator::new(&model, &[4, 5, 6], None).unwrap();
        let mark = tr.graph.len();
        let s0 = tr.initial_state().unwrap();
        let adv = tr.advance(&[&s0, &s0], &[BOS, 7]).unwrap();
        assert_eq!(tr.graph.len(), mark);
        assert_eq!(adv.len(), 2);
        let again = tr.advance(&[&s0], &[BOS]).unwrap();
        assert_eq!(again[0].log_probs, adv[0].log_probs);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// A candidate set holding the unrestricted greedy output leaves the
        /// greedy output unchanged: restriction only renormalizes.
        #[test]
        fn candidate_sets_covering_the_output_preserve_greedy(seed in 0u64..1000, extra in proptest::collection::vec(4usize..12, 0..4)) {
            let model = tiny_model(EncoderKind::Pooling, seed % 7);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src = random_sources(&mut rng, 1).pop().unwrap();
            let full = greedy_decode(&mut Translator::new(&model, &src, None).unwrap(), None).unwrap();
            let mut cands: Vec<usize> = (0..4).chain(full.tokens.iter().copied()).chain(extra).collect();
            cands.sort_unstable();
            let mut tr = Translator::new(&model, &src, Some(cands)).unwrap();
            let restricted = greedy_decode(&mut tr, None).unwrap();
            prop_assert_eq!(restricted.tokens, full.tokens);
        }
    }

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let sents: Vec<Vec<String>> = vec![words.iter().map(|w| w.to_string()).collect()];
        build_vocab(&sents, crate::data::VocabPolicy::MinCount(1)).unwrap()
    }

    fn one_hot(m: usize, j: usize) -> Vec<f64> {
        (0..m).map(|k| if k == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn replacement_is_identity_without_unknowns() {
        let vocab = vocab_of(&["x", "y"]);
        let hyp = Hypothesis {
            tokens: vec![vocab.id("x"), vocab.id("y"), EOS],
            logprob: -1.0,
            attention: vec![one_hot(2, 0); 3],
            finished: true,
        };
        let out = replace_unknowns(&hyp, &["a", "b"], &vocab, &LexicalDictionary::default(), 0);
        assert_eq!(out, vec!["x", "y"]);
    }

    #[test]
    fn unknowns_use_the_dictionary_or_copy_the_source_word() {
        let vocab = vocab_of(&["x"]);
        let mut dict = LexicalDictionary::default();
        dict.insert("b", "beta");
        let hyp = Hypothesis {
            tokens: vec![UNK, vocab.id("x"), UNK, EOS],
            logprob: 0.0,
            attention: vec![one_hot(3, 1), one_hot(3, 0), one_hot(3, 2), one_hot(3, 2)],
            finished: true,
        };
        let src = ["a", "b", "c"];
        assert_eq!(replace_unknowns(&hyp, &src, &vocab, &dict, 0), vec!["beta", "x", "c"]);
        // Offsets shift the attended position and clamp at the ends.
        assert_eq!(replace_unknowns(&hyp, &src, &vocab, &dict, -1), vec!["a", "x", "beta"]);
        assert_eq!(replace_unknowns(&hyp, &src, &vocab, &dict, 2), vec!["c", "x", "c"]);
    }

    fn diagonal_samples(shift: i64) -> (Vec<Alignment>, LexicalDictionary) {
        let mut dict = LexicalDictionary::default();
        let mut samples = Vec::new();
        for n in 3..8 {
            let source: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
            let output: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            for i in 0..n {
                dict.insert(format!("s{i}"), format!("t{i}"));
            }
            let attention = (0..n).map(|i| one_hot(n, shifted(i, shift, n))).collect();
            samples.push(Alignment { source, output, attention });
        }
        (samples, dict)
    }

    #[test]
    fn offset_recovers_constructed_shifts() {
        let (diag, dict) = diagonal_samples(0);
        assert_eq!(best_offset(&diag, &dict).unwrap(), 0);
        let (shifted_by_one, dict) = diagonal_samples(1);
        assert_eq!(best_offset(&shifted_by_one, &dict).unwrap(), -1);
        assert!(best_offset(&[], &dict).is_err());
    }

    #[test]
    fn offset_ties_prefer_zero() {
        let samples = vec![Alignment {
            source: vec!["a".into()],
            output: vec!["zz".into()],
            attention: vec![vec![1.0]],
        }];
        assert_eq!(best_offset(&samples, &LexicalDictionary::default()).unwrap(), 0);
    }

    #[test]
    fn vocabulary_selection_contents() {
        let sents: Vec<Vec<String>> = vec!["x x x y y z w".split(' ').map(String::from).collect()];
        let vocab = build_vocab(&sents, crate::data::VocabPolicy::MinCount(1)).unwrap();
        let empty = select_vocabulary(&["a"], &LexicalDictionary::default(), &vocab, 2, 10);
        assert_eq!(empty, vec![0, 1, 2, 3, vocab.id("x"), vocab.id("y")]);
        let mut dict = LexicalDictionary::default();
        dict.insert("a", "w");
        dict.insert("b", "oov");
        let picked = select_vocabulary(&["a", "b"], &dict, &vocab, 1, 10);
        assert_eq!(picked, vec![0, 1, 2, 3, vocab.id("x"), vocab.id("w")]);
        assert!(picked.contains(&EOS));
    }
}
