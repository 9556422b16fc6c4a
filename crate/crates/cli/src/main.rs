mod config;

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seq2set::assignment::recommend_scheme;
use seq2set::data::{
    encode_corpus, gen_synthetic, parse_corpus, synthetic_embeddings, write_embeddings, LabelSpace,
    Sample, SynthConfig, Vocab,
};
use seq2set::metrics::{evaluate, MacroAverage};
use seq2set::nnmodel::{load_checkpoint, save_checkpoint, ModelConfig, Seq2Set};
use seq2set::pipeline::{embedding_tables, Dataset};
use seq2set::train::{predict_all, split_validation, TrainConfig, Trainer};
use seq2set::verify::{run_suite, Suite, VerifyOptions};
use seq2set::{Error, ModelF32};

use config::{resolve, Format, RunConfig, SchemeChoice};

#[derive(Parser)]
#[command(
    name = "seq2set",
    version,
    about = "Sequence-to-set multi-label text classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write per-epoch checkpoints.
    Train(Box<TrainFlags>),
    /// Score a checkpoint against a labelled corpus.
    Eval(EvalFlags),
    /// Print predicted label names for each input line.
    Predict(PredictFlags),
    /// Write a synthetic topic corpus and matching word vectors.
    Gen(GenFlags),
    /// Run the oracle suites.
    Verify(VerifyFlags),
}

#[derive(Args)]
struct TrainFlags {
    /// Training corpus: `label1,label2<TAB>text` per line.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    val_frac: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long, value_parser = ["all", "first-n", "auto"])]
    scheme: Option<String>,
    #[arg(long)]
    lambda_null: Option<String>,
    #[arg(long)]
    lambda_ot: Option<String>,
    /// Bottleneck width, or `none`.
    #[arg(long)]
    bottleneck: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    /// Comma-separated kernel sizes, or `none` to disable the convolutions.
    #[arg(long)]
    kernel_sizes: Option<String>,
    #[arg(long)]
    stride: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
    /// Decoding steps, or `auto` for the largest label set in the corpus.
    #[arg(long)]
    gen_len: Option<String>,
    /// Word vectors: `token v1 .. vd` per line.
    #[arg(long)]
    embed: Option<String>,
    /// Word dimension when no vector file is given.
    #[arg(long)]
    embed_dim: Option<String>,
    /// Label embedding width, or `auto` to average label words.
    #[arg(long)]
    label_embed_dim: Option<String>,
    /// Upper bound on the input vocabulary.
    #[arg(long)]
    vocab_size: Option<String>,
    #[arg(long)]
    dropout: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Single worker; repeated runs give bit-identical checkpoints.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    workers: Option<String>,
    /// Output directory for checkpoints and logs.
    #[arg(long)]
    out: Option<String>,
    /// Flat `key = value` file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

impl TrainFlags {
    fn layers(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("data", self.data.clone()),
            ("val_frac", self.val_frac.clone()),
            ("epochs", self.epochs.clone()),
            ("batch", self.batch.clone()),
            ("lr", self.lr.clone()),
            ("scheme", self.scheme.clone()),
            ("lambda_null", self.lambda_null.clone()),
            ("lambda_ot", self.lambda_ot.clone()),
            ("bottleneck", self.bottleneck.clone()),
            ("hidden", self.hidden.clone()),
            ("kernel_sizes", self.kernel_sizes.clone()),
            ("stride", self.stride.clone()),
            ("max_len", self.max_len.clone()),
            ("gen_len", self.gen_len.clone()),
            ("embed", self.embed.clone()),
            ("embed_dim", self.embed_dim.clone()),
            ("label_embed_dim", self.label_embed_dim.clone()),
            ("vocab_size", self.vocab_size.clone()),
            ("dropout", self.dropout.clone()),
            ("seed", self.seed.clone()),
            (
                "deterministic",
                self.deterministic.then(|| "true".to_string()),
            ),
            ("workers", self.workers.clone()),
            ("out", self.out.clone()),
            ("format", self.format.clone()),
        ]
    }
}

#[derive(Args)]
struct EvalFlags {
    /// Checkpoint file; vocab.txt, labels.txt and model.cfg are read from
    /// the same directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "both")]
    format: String,
    /// Average macro F1 over every label instead of observed ones.
    #[arg(long)]
    macro_all: bool,
    /// Print the per-label count table.
    #[arg(long)]
    per_label: bool,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct PredictFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One document per line; text after a tab is used when present.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Args)]
struct GenFlags {
    /// Output directory for corpus.txt and embeddings.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    docs: usize,
    #[arg(long, default_value_t = 5)]
    topics: usize,
    #[arg(long, default_value_t = 6)]
    labels_per_topic: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct VerifyFlags {
    /// hungarian, ot, gradient or metrics; all suites when omitted.
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_fault: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::Shape(_) => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(f) => cmd_train(&f),
        Command::Eval(f) => cmd_eval(&f),
        Command::Predict(f) => cmd_predict(&f),
        Command::Gen(f) => cmd_gen(&f),
        Command::Verify(f) => cmd_verify(&f),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, Failure> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

/// Dimension of the first vector line in an embedding file.
fn sniff_dim(path: &Path) -> Result<usize, Failure> {
    for line in open(path)?.lines() {
        let line = line?;
        let n = line.split_whitespace().count();
        if n > 1 {
            return Ok(n - 1);
        }
    }
    Err(Failure::Usage(format!(
        "{}: no embedding vectors found",
        path.display()
    )))
}

fn write_lines(path: &Path, items: &[String]) -> Result<(), Failure> {
    let mut w = BufWriter::new(
        File::create(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
    );
    for item in items {
        writeln!(w, "{item}")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>, Failure> {
    Ok(open(path)?.lines().collect::<io::Result<Vec<_>>>()?)
}

fn cmd_train(flags: &TrainFlags) -> CliResult {
    let cfg: RunConfig =
        resolve(flags.config.as_deref(), &flags.layers()).map_err(Failure::Usage)?;
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| Failure::Usage("missing --data (or `data` in the config file)".into()))?;
    let corpus = parse_corpus(open(&data)?)?;
    if corpus.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: corpus is empty",
            data.display()
        )));
    }
    let ds = Dataset::build(&corpus, cfg.vocab_size)?;

    let scheme = match cfg.scheme {
        SchemeChoice::Fixed(s) => s,
        SchemeChoice::Auto => {
            let advice = recommend_scheme(&corpus.label_sizes())?;
            log::info!(
                "scheme auto: chose {} (mean label size {:.3}, le-mean {:.3}, gt-mean {:.3})",
                advice.scheme,
                advice.mean_label_size,
                advice.le_mean,
                advice.gt_mean
            );
            advice.scheme
        }
    };

    let embed_dim = match &cfg.embed {
        Some(p) => sniff_dim(p)?,
        None => cfg.embed_dim,
    };
    let (words, labels) = match &cfg.embed {
        Some(p) => {
            let mut r = open(p)?;
            embedding_tables::<f32>(&ds, Some(&mut r), embed_dim, cfg.label_embed_dim, cfg.seed)?
        }
        None => embedding_tables::<f32>(&ds, None, embed_dim, cfg.label_embed_dim, cfg.seed)?,
    };

    let model_cfg = ModelConfig {
        vocab_size: ds.vocab.len(),
        num_labels: ds.labels.len(),
        word_dim: embed_dim,
        label_dim: labels.cols(),
        hidden: cfg.hidden,
        enc_layers: 2,
        dec_layers: 1,
        bottleneck: cfg.bottleneck,
        kernel_sizes: cfg.kernel_sizes.clone(),
        stride: cfg.stride,
        max_input_len: cfg.max_len,
        gen_len: cfg.gen_len.unwrap_or(corpus.max_labels().max(1)),
        dropout: cfg.dropout,
    };
    let mut model = Seq2Set::new(model_cfg.clone(), &words, &labels, cfg.seed)?;

    let (train_idx, val_idx) = split_validation(ds.samples.len(), cfg.val_frac, cfg.seed);
    let train = ds.subset(&train_idx);
    let val = ds.subset(&val_idx);
    if train.is_empty() {
        return Err(Failure::Usage(
            "validation split leaves no training samples".into(),
        ));
    }

    fs::create_dir_all(&cfg.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", cfg.out.display())))?;
    write_lines(&cfg.out.join("vocab.txt"), ds.vocab.tokens())?;
    write_lines(&cfg.out.join("labels.txt"), ds.labels.labels())?;
    fs::write(cfg.out.join("model.cfg"), model_cfg.to_kv())?;

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed,
        val_frac: cfg.val_frac,
        scheme,
        null_weight: cfg.lambda_null,
        ot_weight: cfg.lambda_ot,
        workers: if cfg.deterministic { 1 } else { cfg.workers },
        checkpoint_dir: Some(cfg.out.clone()),
        ..TrainConfig::default()
    };
    log::info!(
        "training on {} samples ({} held out), {} labels, {} parameters, scheme {scheme}",
        train.len(),
        val.len(),
        ds.labels.len(),
        model.param_count()
    );
    let mut trainer = Trainer::new(&model, train_cfg, train.len())?;
    let mut log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(cfg.out.join("train.log"))?;
    let mut log_err = None;
    trainer.fit(&mut model, &train, |stats, _| {
        println!("{stats}");
        if let Err(e) = writeln!(log_file, "{stats}") {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    save_checkpoint(&cfg.out.join("model.ckpt"), &model.arrays())?;

    if !val.is_empty() {
        let workers = if cfg.deterministic { 1 } else { cfg.workers };
        let report = pool(workers)?
            .install(|| seq2set::train::evaluate_model(&model, &val, MacroAverage::Observed))?;
        println!("validation:");
        print_report(&report, cfg.format);
    }
    Ok(())
}

fn print_report(report: &seq2set::metrics::MetricsReport, format: Format) {
    if matches!(format, Format::Text | Format::Both) {
        print!("{}", report.to_table());
    }
    if matches!(format, Format::Kv | Format::Both) {
        print!("{}", report.to_kv());
    }
}

struct Loaded {
    model: ModelF32,
    vocab: Vocab,
    labels: LabelSpace,
}

fn load_model(checkpoint: &Path) -> Result<Loaded, Failure> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let cfg_text = fs::read_to_string(dir.join("model.cfg"))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.join("model.cfg").display())))?;
    let cfg = ModelConfig::from_kv(&cfg_text)?;
    let vocab = Vocab::from_tokens(read_lines(&dir.join("vocab.txt"))?);
    let labels = LabelSpace::from_labels(read_lines(&dir.join("labels.txt"))?)?;
    let arrays = load_checkpoint(checkpoint)?;

    let rows = |name: &str| {
        arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.rows())
    };
    let ckpt_vocab = rows("embed.word")
        .ok_or_else(|| Failure::Runtime("checkpoint has no word embeddings".into()))?;
    let ckpt_labels = rows("embed.label")
        .map(|r| r.saturating_sub(2))
        .unwrap_or(0);
    if ckpt_vocab != vocab.len() || ckpt_vocab != cfg.vocab_size {
        return Err(Failure::Usage(format!(
            "vocabulary size mismatch: checkpoint has {ckpt_vocab}, vocab.txt has {}, model.cfg has {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    if ckpt_labels != labels.len() || ckpt_labels != cfg.num_labels {
        return Err(Failure::Usage(format!(
            "label count mismatch: checkpoint has {ckpt_labels}, labels.txt has {}, model.cfg has {}",
            labels.len(),
            cfg.num_labels
        )));
    }
    let model = Seq2Set::from_arrays(cfg, arrays)?;
    Ok(Loaded {
        model,
        vocab,
        labels,
    })
}

fn cmd_eval(flags: &EvalFlags) -> CliResult {
    let format = Format::parse(&flags.format).map_err(Failure::Usage)?;
    let loaded = load_model(&flags.checkpoint)?;
    let corpus = parse_corpus(open(&flags.data)?)?;
    if corpus.is_empty() {
        return Err(Failure::Usage(format!(
            "{}: corpus is empty",
            flags.data.display()
        )));
    }
    let unknown = corpus
        .docs
        .iter()
        .flat_map(|d| &d.labels)
        .filter(|l| loaded.labels.id(l).is_none())
        .count();
    if unknown > 0 {
        log::warn!("{unknown} gold label occurrences are outside the model's label space and count as misses");
    }
    let samples = encode_corpus(&corpus, &loaded.vocab, &loaded.labels);
    let preds = pool(flags.workers)?.install(|| predict_all(&loaded.model, &samples))?;
    // Unknown gold labels still count as false negatives.
    let v = loaded.labels.len();
    let gold: Vec<Vec<usize>> = corpus
        .docs
        .iter()
        .map(|d| {
            let mut extra = v + 1;
            d.labels
                .iter()
                .map(|l| {
                    loaded.labels.id(l).unwrap_or_else(|| {
                        extra += 1;
                        extra
                    })
                })
                .collect()
        })
        .collect();
    let average = if flags.macro_all {
        MacroAverage::All(v)
    } else {
        MacroAverage::Observed
    };
    let report = evaluate(&preds, &gold, average)?;
    print_report(&report, format);
    if flags.per_label {
        print!(
            "{}",
            report.label_table(|id| if id < v {
                loaded.labels.name(id).to_string()
            } else {
                "<unknown>".into()
            })
        );
    }
    Ok(())
}

fn cmd_predict(flags: &PredictFlags) -> CliResult {
    let loaded = load_model(&flags.checkpoint)?;
    let samples: Vec<Sample> = read_lines(&flags.input)?
        .iter()
        .map(|line| {
            let text = line.split_once('\t').map_or(line.as_str(), |(_, t)| t);
            let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
            Sample {
                tokens: loaded.vocab.encode(&tokens),
                labels: Vec::new(),
            }
        })
        .collect();
    let preds = pool(flags.workers)?.install(|| predict_all(&loaded.model, &samples))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for p in preds {
        let names: Vec<&str> = p.iter().map(|&id| loaded.labels.name(id)).collect();
        writeln!(out, "{}", names.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_gen(flags: &GenFlags) -> CliResult {
    let synth = SynthConfig {
        topics: flags.topics,
        labels_per_topic: flags.labels_per_topic,
        words_per_topic: SynthConfig::default()
            .words_per_topic
            .max(flags.labels_per_topic),
        docs: flags.docs,
        seed: flags.seed,
        ..SynthConfig::default()
    };
    let corpus = gen_synthetic(&synth)?;
    fs::create_dir_all(&flags.out)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", flags.out.display())))?;
    let corpus_path = flags.out.join("corpus.txt");
    corpus.write_to(BufWriter::new(File::create(&corpus_path)?))?;
    let embed_path = flags.out.join("embeddings.txt");
    write_embeddings(
        &synthetic_embeddings(&synth, flags.embed_dim),
        BufWriter::new(File::create(&embed_path)?),
    )?;
    println!(
        "wrote {} and {}",
        corpus_path.display(),
        embed_path.display()
    );
    Ok(())
}

fn cmd_verify(flags: &VerifyFlags) -> CliResult {
    let suites = match &flags.suite {
        Some(s) => vec![s.parse::<Suite>()?],
        None => Suite::ALL.to_vec(),
    };
    let opts = VerifyOptions {
        trials: flags.trials,
        seed: flags.seed,
        inject_fault: flags.inject_fault,
    };
    let mut failed = 0;
    for s in suites {
        let report = run_suite(s, &opts)?;
        println!("{report}");
        if !report.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} suite(s) failed")));
    }
    Ok(())
}
