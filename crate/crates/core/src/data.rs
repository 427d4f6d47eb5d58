//! Vocabularies, parallel corpora, the co-occurrence lexical dictionary and
//! synthetic toy tasks.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Which corpus types receive an id.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabPolicy {
    MinCount(u64),
    TopK(usize),
}

/// Token/id bijection. Ids 0..4 are the special symbols; the rest are
/// ordered by descending frequency, ties alphabetical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl From<VocabRepr> for Vocabulary {
    fn from(r: VocabRepr) -> Self {
        Self::from_parts(r.tokens, r.counts)
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.tokens,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, counts, index }
    }

    /// Builds a vocabulary from `(token, count)` pairs, already ranked.
    fn from_ranked(ranked: impl IntoIterator<Item = (String, u64)>) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0; SPECIALS.len()];
        for (t, c) in ranked {
            tokens.push(t);
            counts.push(c);
        }
        Self::from_parts(tokens, counts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn count(&self, id: usize) -> u64 {
        self.counts[id]
    }

    /// Non-special ids, most frequent first.
    pub fn by_frequency(&self) -> impl Iterator<Item = usize> + '_ {
        SPECIALS.len()..self.len()
    }

    pub fn encode_tokens<S: AsRef<str>>(&self, tokens: &[S], add_marks: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_marks {
            ids.push(BOS);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        if add_marks {
            ids.push(EOS);
        }
        ids
    }

    /// Whitespace-tokenizes and encodes; `<s>`/`</s>` wrap the ids when
    /// `add_marks` is set.
    pub fn encode_line(&self, text: &str, add_marks: bool) -> Result<Vec<usize>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::Data("cannot encode an empty line".into()));
        }
        Ok(self.encode_tokens(&tokens, add_marks))
    }

    /// Maps ids back to tokens, dropping `<pad>`, `<s>` and `</s>`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    /// `token<TAB>count` per line, specials omitted.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for id in self.by_frequency() {
            out.push_str(&format!("{}\t{}\n", self.tokens[id], self.counts[id]));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut ranked = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, count) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected token<TAB>count", path.display(), n + 1)))?;
            let count = count
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("{}:{}: bad count {count:?}", path.display(), n + 1)))?;
            ranked.push((tok.to_string(), count));
        }
        Ok(Self::from_ranked(ranked))
    }
}

/// Counts every type of `sentences` and keeps those admitted by `policy`.
pub fn build_vocab<S: AsRef<str>>(sentences: &[Vec<S>], policy: VocabPolicy) -> Result<Vocabulary> {
    if sentences.is_empty() {
        return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for s in sentences {
        for t in s {
            *counts.entry(t.as_ref()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(&str, u64)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(t))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let keep = match policy {
        VocabPolicy::MinCount(min) => ranked.iter().take_while(|(_, c)| *c >= min).count(),
        VocabPolicy::TopK(k) => k.min(ranked.len()),
    };
    Ok(Vocabulary::from_ranked(
        ranked[..keep].iter().map(|&(t, c)| (t.to_string(), c)),
    ))
}

pub type Sentence = Vec<String>;

/// Line-aligned source/target sentence pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    pub pairs: Vec<(Sentence, Sentence)>,
}

fn tokenize(line: &str) -> Sentence {
    line.split_whitespace().map(str::to_string).collect()
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<(Sentence, Sentence)>) -> Result<Self> {
        if let Some(i) = pairs.iter().position(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Data(format!("pair {i} has an empty side")));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn sources(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Sentence> {
        self.pairs.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn lowercased(&self) -> Self {
        let low = |s: &Sentence| s.iter().map(|t| t.to_lowercase()).collect();
        Self {
            pairs: self.pairs.iter().map(|(s, t)| (low(s), low(t))).collect(),
        }
    }

    pub fn read(src: &Path, tgt: &Path) -> Result<Self> {
        let (s, t) = (read_lines(src)?, read_lines(tgt)?);
        if s.len() != t.len() {
            return Err(Error::Data(format!(
                "{} has {} lines but {} has {}",
                src.display(),
                s.len(),
                tgt.display(),
                t.len()
            )));
        }
        Self::new(s.into_iter().zip(t).collect())
    }

    pub fn write(&self, src: &Path, tgt: &Path) -> Result<()> {
        write_lines(src, self.pairs.iter().map(|(s, _)| s))?;
        write_lines(tgt, self.pairs.iter().map(|(_, t)| t))
    }
}

/// One whitespace-tokenized sentence per line.
/// Source ids and `<s> … </s>`-wrapped target ids for every pair.
pub fn encode_corpus(corpus: &ParallelCorpus, src: &Vocabulary, tgt: &Vocabulary) -> Vec<(Vec<usize>, Vec<usize>)> {
    corpus
        .pairs
        .iter()
        .map(|(s, t)| (src.encode_tokens(s, false), tgt.encode_tokens(t, true)))
        .collect()
}

pub fn read_lines(path: &Path) -> Result<Vec<Sentence>> {
    Ok(fs::read_to_string(path)?.lines().map(tokenize).collect())
}

pub fn write_lines<'a>(path: &Path, lines: impl IntoIterator<Item = &'a Sentence>) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(&l.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Drops pairs whose source is longer than `max_src`; returns the kept
/// corpus and the number dropped.
pub fn length_filter(corpus: &ParallelCorpus, max_src: usize) -> (ParallelCorpus, usize) {
    let pairs: Vec<_> = corpus
        .pairs
        .iter()
        .filter(|(s, _)| s.len() <= max_src)
        .cloned()
        .collect();
    let dropped = corpus.len() - pairs.len();
    (ParallelCorpus { pairs }, dropped)
}

/// Source word → ranked target candidates with their co-occurrence votes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LexicalDictionary {
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl LexicalDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Best translation of `src`.
    pub fn lookup(&self, src: &str) -> Option<&str> {
        self.entries.get(src).map(|c| c[0].0.as_str())
    }

    /// Up to `n` best translations of `src`.
    pub fn candidates(&self, src: &str, n: usize) -> impl Iterator<Item = &str> {
        self.entries
            .get(src)
            .into_iter()
            .flat_map(move |c| c.iter().take(n).map(|(t, _)| t.as_str()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(s, c)| (s.as_str(), c[0].0.as_str()))
    }

    pub fn insert(&mut self, src: impl Into<String>, tgt: impl Into<String>) {
        self.entries.insert(src.into(), vec![(tgt.into(), 1.0)]);
    }

    /// `source<TAB>target` per line (best translation only).
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (s, t) in self.iter() {
            out.push_str(&format!("{s}\t{t}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut dict = Self::default();
        for (n, line) in fs::read_to_string(path)?.lines().enumerate() {
            let (s, t) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("{}:{}: expected source<TAB>target", path.display(), n + 1)))?;
            dict.insert(s, t);
        }
        Ok(dict)
    }
}

/// Position-weighted co-occurrence dictionary. Within each pair, source
/// token `i` of `m` sits at relative position `(i + 0.5) / m` and votes for
/// every target token at `r'` with weight `exp(-|r - r'|)`. Candidates are
/// ranked by total vote, then target frequency, then alphabetically.
pub fn build_dictionary(corpus: &ParallelCorpus) -> LexicalDictionary {
    let mut tgt_freq: HashMap<&str, u64> = HashMap::new();
    for (_, t) in &corpus.pairs {
        for w in t {
            *tgt_freq.entry(w).or_default() += 1;
        }
    }
    let mut votes: HashMap<&str, HashMap<&str, f64>> = HashMap::new();
    for (src, tgt) in &corpus.pairs {
        let (m, n) = (src.len() as f64, tgt.len() as f64);
        for (i, s) in src.iter().enumerate() {
            let r = (i as f64 + 0.5) / m;
            let row = votes.entry(s).or_default();
            for (j, t) in tgt.iter().enumerate() {
                let r2 = (j as f64 + 0.5) / n;
                *row.entry(t).or_default() += (-(r - r2).abs()).exp();
            }
        }
    }
    let entries = votes
        .into_iter()
        .map(|(s, row)| {
            let mut ranked: Vec<(&str, f64)> = row.into_iter().collect();
            ranked.sort_by(|a, b| {
                b.1.total_cmp(&a.1)
                    .then(tgt_freq[b.0].cmp(&tgt_freq[a.0]))
                    .then(a.0.cmp(b.0))
            });
            let ranked = ranked.into_iter().map(|(t, v)| (t.to_string(), v)).collect();
            (s.to_string(), ranked)
        })
        .collect();
    LexicalDictionary { entries }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyKind {
    Copy,
    Reverse,
    Lexicon,
}

#[derive(Clone, Debug)]
pub struct ToySpec {
    pub kind: ToyKind,
    pub n_pairs: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Zipf exponent for token frequencies; uniform when `None`.
    pub zipf: Option<f64>,
    pub seed: u64,
}

pub struct ToyTask {
    pub corpus: ParallelCorpus,
    /// Ground-truth source→target word map for the lexicon task.
    pub lexicon: Option<BTreeMap<String, String>>,
}

pub fn source_word(i: usize) -> String {
    format!("s{i}")
}

pub fn target_word(i: usize) -> String {
    format!("t{i}")
}

/// Generates a synthetic parallel corpus. Copy and reverse use the source
/// word forms on both sides; the lexicon task maps each source word through
/// a seeded bijection onto distinct target words.
pub fn gen_toy_task(spec: &ToySpec) -> Result<ToyTask> {
    if spec.vocab_size < 10 {
        return Err(Error::Config(format!("toy vocab_size {} is below 10", spec.vocab_size)));
    }
    if spec.min_len < 1 || spec.min_len > spec.max_len || spec.max_len > 50 {
        return Err(Error::Config(format!(
            "toy length range {}..={} must lie within 1..=50",
            spec.min_len, spec.max_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let v = spec.vocab_size;
    let weights: Vec<f64> = match spec.zipf {
        Some(s) => (1..=v).map(|r| (r as f64).powf(-s)).collect(),
        None => vec![1.0; v],
    };
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(e.to_string()))?;
    let mut perm: Vec<usize> = (0..v).collect();
    perm.shuffle(&mut rng);

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    for _ in 0..spec.n_pairs {
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let ids: Vec<usize> = (0..len).map(|_| dist.sample(&mut rng)).collect();
        let src: Sentence = ids.iter().map(|&i| source_word(i)).collect();
        let tgt: Sentence = match spec.kind {
            ToyKind::Copy => src.clone(),
            ToyKind::Reverse => src.iter().rev().cloned().collect(),
            ToyKind::Lexicon => ids.iter().map(|&i| target_word(perm[i])).collect(),
        };
        pairs.push((src, tgt));
    }
    let lexicon = (spec.kind == ToyKind::Lexicon)
        .then(|| (0..v).map(|i| (source_word(i), target_word(perm[i]))).collect());
    Ok(ToyTask {
        corpus: ParallelCorpus { pairs },
        lexicon,
    })
}
