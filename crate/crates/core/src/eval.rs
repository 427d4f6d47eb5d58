//! Corpus BLEU, the encoder throughput benchmark, length-bucket scoring and
//! attention dumps.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{Sentence, Vocabulary};
use crate::encoders::{EncoderKind, SourceBatch};
use crate::error::{Error, Result};
use crate::inference::{translate, SearchConfig};
use crate::layers::Mode;
use crate::model::Seq2Seq;
use crate::numerics::Graph;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BleuReport {
    /// In `[0, 100]`.
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|p| p * 100.0);
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p[0],
            p[1],
            p[2],
            p[3],
            self.brevity_penalty,
            self.hyp_len as f64 / self.ref_len.max(1) as f64,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_default() += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 with clipped n-gram counts and no smoothing.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>]) -> Result<BleuReport> {
    bleu_with(hyps, refs, false)
}

/// BLEU; with `smooth`, orders 2–4 add one to both match and total
/// counts so short corpora do not collapse to zero.
pub fn bleu_with<S: AsRef<str>, T: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<T>], smooth: bool) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(r, n);
            for (gram, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(ref_counts.get(&gram).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        let add = if smooth && n > 0 { 1.0 } else { 0.0 };
        let denom = totals[n] as f64 + add;
        precisions[n] = if denom > 0.0 { (matches[n] as f64 + add) / denom } else { 0.0 };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        matches,
        totals,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

/// Position-wise token accuracy: matching positions over the longer of
/// hypothesis and reference, summed over the corpus.
pub fn token_accuracy<T: PartialEq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!("{} hypotheses but {} references", hyps.len(), refs.len())));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hit += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Short label such as `conv 6/3` or `bilstm-2`.
pub fn describe_encoder(model: &Seq2Seq) -> String {
    let e = &model.config.encoder;
    match e.kind {
        EncoderKind::Pooling => format!("pooling k={}", e.pool_width),
        EncoderKind::Conv => format!("conv {}/{}", e.layers_a, e.layers_c),
        EncoderKind::BiLstm => format!("bilstm-{}", e.lstm_layers),
        EncoderKind::UniLstm => format!("lstm-{}", e.lstm_layers),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub encoder: String,
    pub words: usize,
    /// Median wall time of one pass over the corpus.
    pub seconds: f64,
    pub words_per_second: f64,
    /// Always 1: the matrix kernels never spawn threads.
    pub threads: usize,
    /// Every timed pass, in order.
    pub runs: Vec<f64>,
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} words in {:.4}s = {:.1} words/s (threads={}, runs={})",
            self.encoder,
            self.words,
            self.seconds,
            self.words_per_second,
            self.threads,
            self.runs.len()
        )
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Times `pass` once untimed and then `repetitions` times; reports the
/// median pass.
fn time_passes(repetitions: usize, mut pass: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    if repetitions == 0 {
        return Err(Error::Config("benchmark needs at least one repetition".into()));
    }
    pass()?;
    (0..repetitions)
        .map(|_| {
            let start = Instant::now();
            pass()?;
            Ok(start.elapsed().as_secs_f64())
        })
        .collect()
}

fn report(model: &Seq2Seq, words: usize, runs: Vec<f64>) -> BenchReport {
    let seconds = median(&runs);
    BenchReport {
        encoder: describe_encoder(model),
        words,
        seconds,
        words_per_second: words as f64 / seconds,
        threads: 1,
        runs,
    }
}

/// Encoder forward throughput, one sentence at a time on one thread.
pub fn bench_encoder(model: &Seq2Seq, sentences: &[Vec<usize>], repetitions: usize) -> Result<BenchReport> {
    let batches = sentences.iter().map(|s| SourceBatch::single(s)).collect::<Result<Vec<_>>>()?;
    let runs = time_passes(repetitions, || {
        for src in &batches {
            let mut g = Graph::inference(&model.params);
            model.encoder.encode(&mut g, src, &mut Mode::Eval)?;
        }
        Ok(())
    })?;
    Ok(report(model, sentences.iter().map(Vec::len).sum(), runs))
}

/// Full translation throughput; `candidates[i]`, if given, restricts the
/// output vocabulary of sentence `i`.
pub fn bench_translate(
    model: &Seq2Seq,
    sentences: &[Vec<usize>],
    cfg: &SearchConfig,
    candidates: Option<&[Vec<usize>]>,
    repetitions: usize,
) -> Result<BenchReport> {
    let runs = time_passes(repetitions, || {
        for (i, src) in sentences.iter().enumerate() {
            translate(model, src, cfg, candidates.map(|c| c[i].clone()))?;
        }
        Ok(())
    })?;
    let mut r = report(model, sentences.iter().map(Vec::len).sum(), runs);
    r.encoder = format!("{} (full decode)", r.encoder);
    Ok(r)
}

/// Index ranges into the length-sorted corpus: `n` buckets of equal size,
/// the remainder going to the last.
pub fn bucket_ranges(len: usize, n: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n == 0 || len < n {
        return Err(Error::Data(format!("cannot split {len} sentences into {n} buckets")));
    }
    let size = len / n;
    Ok((0..n).map(|b| b * size..if b + 1 == n { len } else { (b + 1) * size }).collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct Bucket {
    pub min_src_len: usize,
    pub max_src_len: usize,
    pub sentences: usize,
    pub bleu: BleuReport,
}

/// Sorts pairs by source length (stable), splits them into `n_buckets`
/// buckets and scores each bucket's translations.
pub fn bucket_eval(
    pairs: &[(Sentence, Sentence)],
    n_buckets: usize,
    mut translate: impl FnMut(&Sentence) -> Result<Sentence>,
) -> Result<Vec<Bucket>> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| pairs[i].0.len());
    bucket_ranges(pairs.len(), n_buckets)?
        .into_iter()
        .map(|range| {
            let idx = &order[range];
            let hyps = idx.iter().map(|&i| translate(&pairs[i].0)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<Sentence> = idx.iter().map(|&i| pairs[i].1.clone()).collect();
            Ok(Bucket {
                min_src_len: pairs[idx[0]].0.len(),
                max_src_len: pairs[*idx.last().unwrap()].0.len(),
                sentences: idx.len(),
                bleu: bleu(&hyps, &refs)?,
            })
        })
        .collect()
}

/// Attention of one decoded sentence: `scores[i][j]` is the weight of
/// source token `j` when generating output token `i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub source: Vec<String>,
    /// Generated tokens including the closing `</s>`.
    pub output: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl AttentionDump {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("dump serializes");
        fs::write(path, text + "\n")?;
        Ok(())
    }
}

pub fn dump_attention(
    model: &Seq2Seq,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    source: &[String],
    cfg: &SearchConfig,
) -> Result<AttentionDump> {
    let hyp = translate(model, &src_vocab.encode_tokens(source, false), cfg, None)?;
    Ok(AttentionDump {
        source: source.to_vec(),
        output: hyp.tokens.iter().map(|&t| tgt_vocab.token(t).to_string()).collect(),
        scores: hyp.attention,
    })
}
