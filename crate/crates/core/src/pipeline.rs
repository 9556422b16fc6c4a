//! Glue from a corpus to a trainable model, plus the small synthetic
//! experiment used for end-to-end checks.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::time::Instant;

use crate::data::{
    encode_corpus, gen_synthetic, label_embeddings, load_embeddings, random_embeddings,
    synthetic_embeddings, write_embeddings, Corpus, LabelSpace, Sample, SynthConfig, Vocab,
};
use crate::error::Result;
use crate::metrics::{MacroAverage, MetricsReport};
use crate::nnmodel::{ModelConfig, Seq2Set};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{evaluate_model, split_validation, EpochStats, TrainConfig, Trainer};

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocab,
    pub labels: LabelSpace,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn build(corpus: &Corpus, max_vocab: usize) -> Result<Dataset> {
        let vocab = Vocab::build(corpus, max_vocab)?;
        let labels = LabelSpace::build(corpus)?;
        let samples = encode_corpus(corpus, &vocab, &labels);
        Ok(Dataset {
            vocab,
            labels,
            samples,
        })
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }
}

/// Word and label tables. `words` is a reader of `token v1 .. vd` lines;
/// without one the word table is seeded random.
pub fn embedding_tables<T: Scalar>(
    ds: &Dataset,
    words: Option<&mut dyn BufRead>,
    word_dim: usize,
    label_dim: Option<usize>,
    seed: u64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let word_table = match words {
        Some(r) => load_embeddings(r, &ds.vocab, word_dim, seed)?,
        None => random_embeddings(ds.vocab.len(), word_dim, seed),
    };
    let label_table = label_embeddings(&ds.labels, &ds.vocab, &word_table, label_dim, seed);
    Ok((word_table, label_table))
}

/// Settings of the synthetic end-to-end experiment.
#[derive(Clone, Debug)]
pub struct DeskConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embed_dim: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        let embed_dim = 16;
        DeskConfig {
            synth: SynthConfig::default(),
            model: ModelConfig {
                word_dim: embed_dim,
                label_dim: embed_dim,
                hidden: 32,
                kernel_sizes: vec![3, 7],
                stride: 3,
                max_input_len: 64,
                gen_len: 18,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 200,
                batch_size: 8,
                lr: 3e-3,
                workers: 1,
                ..TrainConfig::default()
            },
            embed_dim,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DeskResult {
    pub train: MetricsReport,
    pub validation: MetricsReport,
    pub history: Vec<EpochStats>,
    pub secs: f64,
}

/// Generates the corpus, trains with the given seed and reports train and
/// validation metrics.
pub fn desk_run(config: &DeskConfig, seed: u64) -> Result<DeskResult> {
    let start = Instant::now();
    let corpus = gen_synthetic(&config.synth)?;
    let ds = Dataset::build(&corpus, usize::MAX)?;
    let table: BTreeMap<String, Vec<f64>> = synthetic_embeddings(&config.synth, config.embed_dim);
    let mut text = Vec::new();
    write_embeddings(&table, &mut text)?;
    let mut reader = BufReader::new(&text[..]);
    let (words, labels) =
        embedding_tables::<f32>(&ds, Some(&mut reader), config.embed_dim, None, seed)?;

    let (train_idx, val_idx) = split_validation(ds.samples.len(), config.train.val_frac, seed);
    let train = ds.subset(&train_idx);
    let val = ds.subset(&val_idx);

    let model_cfg = ModelConfig {
        vocab_size: ds.vocab.len(),
        num_labels: ds.labels.len(),
        ..config.model.clone()
    };
    let mut model = Seq2Set::new(model_cfg, &words, &labels, seed)?;
    let train_cfg = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let mut trainer = Trainer::new(&model, train_cfg, train.len())?;
    let history = trainer.fit(&mut model, &train, |_, _| {})?;
    let train_report = evaluate_model(&model, &train, MacroAverage::Observed)?;
    let val_report = if val.is_empty() {
        train_report.clone()
    } else {
        evaluate_model(&model, &val, MacroAverage::Observed)?
    };
    Ok(DeskResult {
        train: train_report,
        validation: val_report,
        history,
        secs: start.elapsed().as_secs_f64(),
    })
}
