use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cnmt::checkpoint::Checkpoint;
use cnmt::data::{
    build_dictionary, build_vocab, encode_corpus, gen_toy_task, length_filter, read_lines, LexicalDictionary,
    ParallelCorpus, Sentence, ToyKind, ToySpec, VocabPolicy,
};
use cnmt::eval::{bench_encoder, bench_translate, bleu_with, bucket_eval, dump_attention};
use cnmt::inference::{estimate_attention_offset, replace_unknowns, select_vocabulary, translate, SearchConfig};
use cnmt::training::train;
use cnmt::{Error, ModelConfig, Seq2Seq};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_BAD_CHECKPOINT: u8 = 4;

#[derive(Parser)]
#[command(name = "cnmt", version, about = "Train, decode and evaluate encoder-decoder translation models")]
struct Cli {
    /// Seed for data generation, initialization, shuffling and dropout.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate toy corpora, vocabularies or lexical dictionaries.
    #[command(subcommand)]
    MakeData(MakeData),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Translate a file of whitespace-tokenized sentences.
    Translate(TranslateArgs),
    /// BLEU of hypotheses against references, or model perplexity.
    Score(ScoreArgs),
    /// Single-thread words/second of the encoder or of full decoding.
    Bench(BenchArgs),
    /// BLEU per source-length bucket.
    BucketEval(BucketArgs),
    /// Write the attention matrix of one translated sentence as JSON.
    DumpAttention(DumpArgs),
}

#[derive(Subcommand)]
enum MakeData {
    /// Synthetic copy, reverse or lexicon corpus.
    Toy(ToyArgs),
    /// Frequency-ranked vocabulary of a tokenized file.
    Vocab(VocabArgs),
    /// Best co-occurrence translation of every source word.
    Dict(DictArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKindArg {
    Copy,
    Reverse,
    Lexicon,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, value_enum)]
    kind: ToyKindArg,
    #[arg(long, default_value_t = 5000)]
    pairs: usize,
    #[arg(long, default_value_t = 50)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 12)]
    max_len: usize,
    /// Zipf exponent of token frequencies (uniform if absent).
    #[arg(long)]
    zipf: Option<f64>,
    /// Writes PREFIX.src and PREFIX.tgt, plus PREFIX.lexicon for the lexicon task.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VocabArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 1, conflicts_with = "top_k")]
    min_count: u64,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DictArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    tgt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train_src: PathBuf,
    #[arg(long)]
    train_tgt: PathBuf,
    #[arg(long)]
    valid_src: PathBuf,
    #[arg(long)]
    valid_tgt: PathBuf,
    /// TOML file with `[encoder]`, `[decoder]` and `[train]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep source words seen at least this often.
    #[arg(long, default_value_t = 1)]
    src_min_count: u64,
    /// Keep target words seen at least this often.
    #[arg(long, default_value_t = 1)]
    tgt_min_count: u64,
    /// Keep only the most frequent target words (overrides --tgt-min-count).
    #[arg(long)]
    tgt_top_k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum OffsetArg {
    Auto,
    Fixed(i64),
}

impl FromStr for OffsetArg {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "auto" {
            return Ok(OffsetArg::Auto);
        }
        match s.parse::<i64>() {
            Ok(v) if (-2..=2).contains(&v) => Ok(OffsetArg::Fixed(v)),
            _ => Err(format!("expected `auto` or an integer in -2..=2, got {s:?}")),
        }
    }
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    /// Added to the score of every generated word.
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    word_penalty: f64,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    length_normalize: bool,
    /// Generation cap; defaults to twice the source length plus 10.
    #[arg(long)]
    max_len: Option<usize>,
}

impl SearchArgs {
    fn config(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            word_penalty: self.word_penalty,
            max_len: self.max_len,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Args)]
struct TranslateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    /// Restrict each sentence's output vocabulary using this dictionary.
    #[arg(long, value_name = "DICT")]
    vocab_select: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    select_top: usize,
    #[arg(long, default_value_t = 10)]
    select_per_word: usize,
    /// Replace generated <unk> through this dictionary.
    #[arg(long, value_name = "DICT")]
    unk_replace: Option<PathBuf>,
    /// Attention offset for <unk> replacement: `auto` or -2..=2.
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    offset: OffsetArg,
    /// Sources used to estimate `--offset auto` (defaults to the input).
    #[arg(long)]
    offset_dev: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Hypotheses to score with BLEU.
    #[arg(long, required_unless_present = "model", conflicts_with = "model")]
    hyp: Option<PathBuf>,
    /// Add-one smoothing of the 2- to 4-gram precisions.
    #[arg(long)]
    smooth: bool,
    /// Score perplexity of this model on `--src`/`--ref` instead.
    #[arg(long, requires = "src")]
    model: Option<PathBuf>,
    #[arg(long)]
    src: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained model; otherwise a freshly initialized model from `--config`.
    #[arg(long, conflicts_with = "config")]
    model: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Vocabulary size of a freshly initialized model.
    #[arg(long, default_value_t = 10000)]
    vocab: usize,
    /// Tokenized sentences to time; otherwise random sentences.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    sentences: usize,
    #[arg(long, default_value_t = 50)]
    length: usize,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    /// Time complete beam-search translation instead of the encoder alone.
    #[arg(long)]
    full_decode: bool,
    #[command(flatten)]
    search: SearchArgs,
    /// Use dictionary-based vocabulary selection during full decoding.
    #[arg(long, value_name = "DICT", requires = "full_decode")]
    vocab_select: Option<PathBuf>,
}

#[derive(Args)]
struct BucketArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    src: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, default_value_t = 15)]
    buckets: usize,
    #[command(flatten)]
    search: SearchArgs,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    model: PathBuf,
    /// Whitespace-tokenized source sentence.
    #[arg(long)]
    sentence: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io(e) if e.kind() == io::ErrorKind::NotFound => EXIT_MISSING_FILE,
        Error::Checkpoint(_) => EXIT_BAD_CHECKPOINT,
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Attaches the path to I/O errors so the diagnostic names the file.
fn with_path<T>(path: &Path, r: cnmt::Result<T>) -> cnmt::Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn lines(path: &Path) -> cnmt::Result<Vec<Sentence>> {
    with_path(path, read_lines(path))
}

fn load_model(path: &Path) -> cnmt::Result<Checkpoint> {
    with_path(path, Checkpoint::load(path))
}

fn load_dict(path: &Path) -> cnmt::Result<LexicalDictionary> {
    with_path(path, LexicalDictionary::read(path))
}

fn load_config(path: Option<&Path>) -> cnmt::Result<ModelConfig> {
    match path {
        Some(p) => ModelConfig::from_toml(&with_path(p, fs::read_to_string(p).map_err(Error::from))?),
        None => Ok(ModelConfig::default()),
    }
}

fn corpus(src: &Path, tgt: &Path) -> cnmt::Result<ParallelCorpus> {
    let (s, t) = (lines(src)?, lines(tgt)?);
    if s.len() != t.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            s.len(),
            tgt.display(),
            t.len()
        )));
    }
    ParallelCorpus::new(s.into_iter().zip(t).collect())
}

fn emit(output: Option<&Path>, text: &str) -> cnmt::Result<()> {
    match output {
        Some(p) => with_path(p, fs::write(p, text).map_err(Error::from)),
        None => {
            io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn make_data(cmd: MakeData, seed: u64) -> cnmt::Result<()> {
    match cmd {
        MakeData::Toy(a) => {
            let kind = match a.kind {
                ToyKindArg::Copy => ToyKind::Copy,
                ToyKindArg::Reverse => ToyKind::Reverse,
                ToyKindArg::Lexicon => ToyKind::Lexicon,
            };
            let task = gen_toy_task(&ToySpec {
                kind,
                n_pairs: a.pairs,
                vocab_size: a.vocab,
                min_len: a.min_len,
                max_len: a.max_len,
                zipf: a.zipf,
                seed,
            })?;
            let path = |ext: &str| PathBuf::from(format!("{}.{ext}", a.out.display()));
            task.corpus.write(&path("src"), &path("tgt"))?;
            if let Some(lex) = task.lexicon {
                let mut dict = LexicalDictionary::default();
                lex.into_iter().for_each(|(s, t)| dict.insert(s, t));
                dict.write(&path("lexicon"))?;
            }
            eprintln!("wrote {} pairs to {}.{{src,tgt}}", a.pairs, a.out.display());
        }
        MakeData::Vocab(a) => {
            let policy = a.top_k.map_or(VocabPolicy::MinCount(a.min_count), VocabPolicy::TopK);
            let vocab = build_vocab(&lines(&a.input)?, policy)?;
            vocab.write(&a.out)?;
            eprintln!("{} types plus specials", vocab.len() - 4);
        }
        MakeData::Dict(a) => {
            let dict = build_dictionary(&corpus(&a.src, &a.tgt)?);
            dict.write(&a.out)?;
            eprintln!("{} dictionary entries", dict.len());
        }
    }
    Ok(())
}

fn run_train(a: TrainArgs, seed: u64) -> cnmt::Result<()> {
    let mut config = load_config(a.config.as_deref())?;
    config.train.seed = seed;
    let (train_c, dropped) = length_filter(&corpus(&a.train_src, &a.train_tgt)?, config.train.max_src_len);
    if dropped > 0 {
        eprintln!("dropped {dropped} training pairs with sources over {} words", config.train.max_src_len);
    }
    let valid_c = corpus(&a.valid_src, &a.valid_tgt)?;
    let src_vocab = build_vocab(&train_c.sources(), VocabPolicy::MinCount(a.src_min_count))?;
    let tgt_policy = a.tgt_top_k.map_or(VocabPolicy::MinCount(a.tgt_min_count), VocabPolicy::TopK);
    let tgt_vocab = build_vocab(&train_c.targets(), tgt_policy)?;
    let train_pairs = encode_corpus(&train_c, &src_vocab, &tgt_vocab);
    let valid_pairs = encode_corpus(&valid_c, &src_vocab, &tgt_vocab);
    let mut model = Seq2Seq::new(config, src_vocab.len(), tgt_vocab.len(), seed)?;
    println!("epoch\ttrain_nll\tvalid_ppl\tlr\tseconds");
    let report = train(&mut model, &train_pairs, &valid_pairs, &mut |log, _, _| {
        println!("{log}");
        Ok(())
    })?;
    eprintln!("stopped ({:?}); keeping epoch {}", report.stop, report.best_epoch);
    let ck = Checkpoint::new(model, src_vocab, tgt_vocab)?;
    with_path(&a.out, ck.save(&a.out))
}

fn run_translate(a: TranslateArgs) -> cnmt::Result<()> {
    let ck = load_model(&a.model)?;
    let cfg = a.search.config();
    cfg.validate()?;
    let sources = lines(&a.input)?;
    let select = a.vocab_select.as_deref().map(load_dict).transpose()?;
    let unk_dict = a.unk_replace.as_deref().map(load_dict).transpose()?;
    let offset = match (a.offset, &unk_dict) {
        (OffsetArg::Fixed(o), _) => o,
        (OffsetArg::Auto, Some(dict)) => {
            let dev = match &a.offset_dev {
                Some(p) => lines(p)?,
                None => sources.clone(),
            };
            let o = estimate_attention_offset(&ck.model, &ck.src_vocab, &ck.tgt_vocab, &dev, dict, &cfg)?;
            eprintln!("estimated attention offset {o}");
            o
        }
        (OffsetArg::Auto, None) => return Err(Error::Config("--offset auto needs --unk-replace".into())),
    };
    let mut out = String::new();
    for src in &sources {
        let candidates = select
            .as_ref()
            .map(|d| select_vocabulary(src, d, &ck.tgt_vocab, a.select_top, a.select_per_word));
        let hyp = translate(&ck.model, &ck.src_vocab.encode_tokens(src, false), &cfg, candidates)?;
        let words = match &unk_dict {
            Some(dict) => replace_unknowns(&hyp, src, &ck.tgt_vocab, dict, offset),
            None => ck.tgt_vocab.decode(hyp.output()),
        };
        out.push_str(&words.join(" "));
        out.push('\n');
    }
    emit(a.output.as_deref(), &out)
}

fn run_score(a: ScoreArgs) -> cnmt::Result<()> {
    if let Some(model_path) = &a.model {
        let ck = load_model(model_path)?;
        let c = corpus(a.src.as_ref().expect("clap enforces --src"), &a.reference)?;
        let ppl = ck.model.perplexity(&encode_corpus(&c, &ck.src_vocab, &ck.tgt_vocab), a.batch_size)?;
        println!("PPL = {ppl:.4}");
        return Ok(());
    }
    let hyps = lines(a.hyp.as_ref().expect("clap enforces --hyp"))?;
    let refs = lines(&a.reference)?;
    println!("{}", bleu_with(&hyps, &refs, a.smooth)?);
    Ok(())
}

fn random_sentences(n: usize, len: usize, vocab: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..len).map(|_| rng.gen_range(4..vocab)).collect()).collect()
}

fn run_bench(a: BenchArgs, seed: u64) -> cnmt::Result<()> {
    let (model, vocabs) = match &a.model {
        Some(p) => {
            let ck = load_model(p)?;
            (ck.model, Some((ck.src_vocab, ck.tgt_vocab)))
        }
        None => {
            let v = a.vocab.max(5);
            (Seq2Seq::new(load_config(a.config.as_deref())?, v, v, seed)?, None)
        }
    };
    let tokens: Option<Vec<Sentence>> = a.input.as_deref().map(lines).transpose()?;
    let sentences = match (&tokens, &vocabs) {
        (Some(t), Some((src, _))) => t.iter().map(|s| src.encode_tokens(s, false)).collect(),
        (Some(_), None) => return Err(Error::Config("--input needs a trained --model".into())),
        (None, _) => random_sentences(a.sentences, a.length, model.src_vocab, seed),
    };
    let report = if a.full_decode {
        let cfg = a.search.config();
        cfg.validate()?;
        let candidates = match (&a.vocab_select, &tokens, &vocabs) {
            (Some(p), Some(t), Some((_, tgt))) => {
                let dict = load_dict(p)?;
                Some(t.iter().map(|s| select_vocabulary(s, &dict, tgt, 500, 10)).collect::<Vec<_>>())
            }
            (Some(_), _, _) => return Err(Error::Config("--vocab-select needs --model and --input".into())),
            _ => None,
        };
        bench_translate(&model, &sentences, &cfg, candidates.as_deref(), a.repetitions)?
    } else {
        bench_encoder(&model, &sentences, a.repetitions)?
    };
    println!("{report}");
    Ok(())
}

fn run_buckets(a: BucketArgs) -> cnmt::Result<()> {
    let ck = load_model(&a.model)?;
    let cfg = a.search.config();
    cfg.validate()?;
    let pairs = corpus(&a.src, &a.reference)?.pairs;
    let buckets = bucket_eval(&pairs, a.buckets, |src| {
        let hyp = translate(&ck.model, &ck.src_vocab.encode_tokens(src, false), &cfg, None)?;
        Ok(ck.tgt_vocab.decode(hyp.output()))
    })?;
    println!("min_len\tmax_len\tsentences\tbleu");
    for b in buckets {
        println!("{}\t{}\t{}\t{:.2}", b.min_src_len, b.max_src_len, b.sentences, b.bleu.bleu);
    }
    Ok(())
}

fn run_dump(a: DumpArgs) -> cnmt::Result<()> {
    let ck = load_model(&a.model)?;
    let cfg = a.search.config();
    cfg.validate()?;
    let source: Sentence = a.sentence.split_whitespace().map(String::from).collect();
    if source.is_empty() {
        return Err(Error::Config("--sentence is empty".into()));
    }
    let dump = dump_attention(&ck.model, &ck.src_vocab, &ck.tgt_vocab, &source, &cfg)?;
    with_path(&a.out, dump.write(&a.out))
}

fn run(cli: Cli) -> cnmt::Result<()> {
    match cli.command {
        Command::MakeData(cmd) => make_data(cmd, cli.seed),
        Command::Train(a) => run_train(a, cli.seed),
        Command::Translate(a) => run_translate(a),
        Command::Score(a) => run_score(a),
        Command::Bench(a) => run_bench(a, cli.seed),
        Command::BucketEval(a) => run_buckets(a),
        Command::DumpAttention(a) => run_dump(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
