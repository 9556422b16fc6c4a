//! Corpus ingestion, vocabularies, embeddings and synthetic corpora.
//!
//! Corpus lines are `label1,label2,...<TAB>word word ...`. Labels are kept as
//! strings until a [`LabelSpace`] assigns ids; tokens are split on
//! whitespace only.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const UNK: &str = "<unk>";
pub const UNK_ID: usize = 0;

/// One document with its unordered gold labels, as read from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub labels: Vec<String>,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    pub docs: Vec<Document>,
}

/// A document mapped onto vocabulary and label ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn label_sizes(&self) -> Vec<usize> {
        self.docs.iter().map(|d| d.labels.len()).collect()
    }

    pub fn max_labels(&self) -> usize {
        self.label_sizes().into_iter().max().unwrap_or(0)
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.docs {
            writeln!(out, "{}\t{}", d.labels.join(","), d.tokens.join(" "))?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("corpus is utf-8")
    }
}

/// Parses the tab-separated corpus format, one sample per non-empty line.
pub fn parse_corpus<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut docs = Vec::new();
    for (i, line) in reader.split(b'\n').enumerate() {
        let lineno = i + 1;
        let bytes = line?;
        let text = String::from_utf8(bytes).map_err(|_| Error::Parse {
            line: lineno,
            msg: "invalid UTF-8".into(),
        })?;
        let text = text.strip_suffix('\r').unwrap_or(&text);
        if text.trim().is_empty() {
            continue;
        }
        let Some((labels, words)) = text.split_once('\t') else {
            return Err(Error::Parse {
                line: lineno,
                msg: "expected `labels<TAB>text`".into(),
            });
        };
        let mut seen = BTreeSet::new();
        let labels = labels
            .split(',')
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .filter(|l| seen.insert(l.to_string()))
            .map(String::from)
            .collect();
        let tokens = words.split_whitespace().map(String::from).collect();
        docs.push(Document { labels, tokens });
    }
    Ok(Corpus { docs })
}

pub fn parse_corpus_str(text: &str) -> Result<Corpus> {
    parse_corpus(text.as_bytes())
}

/// Token vocabulary with `<unk>` at id 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Ranks tokens by frequency (descending, ties lexicographic) and keeps
    /// at most `bound` entries including `<unk>`.
    pub fn build(corpus: &Corpus, bound: usize) -> Result<Vocab> {
        if bound == 0 {
            return Err(Error::InvalidConfig(
                "vocabulary bound must be positive".into(),
            ));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidConfig(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in &corpus.docs {
            for t in &d.tokens {
                if t != UNK {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = std::iter::once(UNK.to_string())
            .chain(
                ranked
                    .into_iter()
                    .take(bound - 1)
                    .map(|(t, _)| t.to_string()),
            )
            .collect();
        Ok(Vocab::from_tokens(tokens))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { index, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

/// Label ids `0..V` in lexicographic order, with the null label at `V` and
/// the decoder start symbol at `V + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSpace {
    index: HashMap<String, usize>,
    labels: Vec<String>,
}

impl LabelSpace {
    pub fn build(corpus: &Corpus) -> Result<LabelSpace> {
        let set: BTreeSet<&str> = corpus
            .docs
            .iter()
            .flat_map(|d| d.labels.iter().map(String::as_str))
            .collect();
        LabelSpace::from_labels(set.into_iter().map(String::from).collect())
    }

    pub fn from_labels(labels: Vec<String>) -> Result<LabelSpace> {
        if labels.is_empty() {
            return Err(Error::InvalidConfig(
                "label space needs at least one label".into(),
            ));
        }
        let index = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(LabelSpace { index, labels })
    }

    /// Number of real labels `V`.
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn null_id(&self) -> usize {
        self.labels.len()
    }

    pub fn bos_id(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

/// Maps a corpus onto ids. Labels outside `labels` are dropped.
pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, labels: &LabelSpace) -> Vec<Sample> {
    corpus
        .docs
        .iter()
        .map(|d| Sample {
            tokens: vocab.encode(&d.tokens),
            labels: d.labels.iter().filter_map(|l| labels.id(l)).collect(),
        })
        .collect()
}

fn uniform_row<T: Scalar>(rng: &mut ChaCha8Rng, d: usize) -> Vec<T> {
    (0..d).map(|_| T::lit(rng.gen_range(-0.1..=0.1))).collect()
}

/// Reads `token v1 ... vd` lines. Vocabulary tokens missing from the file
/// get rows drawn uniformly from `[-0.1, 0.1]` with `seed`.
pub fn load_embeddings<R: BufRead, T: Scalar>(
    reader: R,
    vocab: &Vocab,
    d: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let mut found: Vec<Option<Vec<T>>> = vec![None; vocab.len()];
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<&str> = parts.collect();
        if values.len() != d {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("{token}: expected {d} values, found {}", values.len()),
            });
        }
        let row = values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .map(T::lit)
                    .ok_or_else(|| Error::Parse {
                        line: i + 1,
                        msg: format!("{token}: bad value `{v}`"),
                    })
            })
            .collect::<Result<Vec<T>>>()?;
        if let Some(id) = vocab.get(token) {
            found[id] = Some(row);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(vocab.len() * d);
    for row in found {
        // Draw for every row so a token's fallback does not depend on which
        // other tokens the file happened to contain.
        let fallback = uniform_row::<T>(&mut rng, d);
        data.extend(row.unwrap_or(fallback));
    }
    Tensor::from_vec(&[vocab.len(), d], data)
}

/// Seeded uniform table for runs without a pre-trained embedding file.
pub fn random_embeddings<T: Scalar>(rows: usize, d: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows)
        .flat_map(|_| uniform_row::<T>(&mut rng, d))
        .collect();
    Tensor::from_vec(&[rows, d], data).expect("shape matches")
}

/// Label embedding table with `V + 2` rows: one per label, the all-zero null
/// row, and a seeded start-symbol row.
///
/// A label's row is the mean of the word rows of its whitespace-separated
/// words found in `vocab`. Labels with no such word get seeded random rows.
/// When `dim` differs from the word dimension every label is treated as
/// opaque.
pub fn label_embeddings<T: Scalar>(
    labels: &LabelSpace,
    vocab: &Vocab,
    words: &Tensor<T>,
    dim: Option<usize>,
    seed: u64,
) -> Tensor<T> {
    let wd = words.cols();
    let d = dim.unwrap_or(wd);
    let lexical = d == wd;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6c61_6265_6c73);
    let mut data = Vec::with_capacity((labels.len() + 2) * d);
    for name in labels.labels() {
        let fallback = uniform_row::<T>(&mut rng, d);
        let ids: Vec<usize> = if lexical {
            name.split_whitespace()
                .filter_map(|w| vocab.get(w))
                .filter(|&id| id != UNK_ID)
                .collect()
        } else {
            Vec::new()
        };
        if ids.is_empty() {
            data.extend(fallback);
            continue;
        }
        let mut row = vec![T::zero(); d];
        for &id in &ids {
            for (r, &w) in row.iter_mut().zip(words.row(id)) {
                *r += w;
            }
        }
        let n = T::lit(ids.len() as f64);
        data.extend(row.into_iter().map(|x| x / n));
    }
    data.extend(std::iter::repeat_n(T::zero(), d));
    data.extend(uniform_row::<T>(&mut rng, d));
    Tensor::from_vec(&[labels.len() + 2, d], data).expect("shape matches")
}

/// Parameters of the topic-mixture corpus generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub topics: usize,
    pub labels_per_topic: usize,
    pub words_per_topic: usize,
    pub shared_words: usize,
    pub doc_len: (usize, usize),
    pub docs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 5,
            labels_per_topic: 6,
            words_per_topic: 12,
            shared_words: 10,
            doc_len: (12, 24),
            docs: 100,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("topics", self.topics),
            ("labels_per_topic", self.labels_per_topic),
            ("words_per_topic", self.words_per_topic),
            ("docs", self.docs),
            ("doc_len min", self.doc_len.0),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.doc_len.0 > self.doc_len.1 {
            return Err(Error::InvalidConfig("doc_len min exceeds max".into()));
        }
        if self.words_per_topic < self.labels_per_topic {
            return Err(Error::InvalidConfig(
                "words_per_topic must be at least labels_per_topic (labels are topic keywords)"
                    .into(),
            ));
        }
        Ok(())
    }

    fn topic_word(k: usize, j: usize) -> String {
        format!("t{k}w{j}")
    }

    /// Label `j` of topic `k` is the topic keyword `t{k}w{j}`.
    pub fn label_name(k: usize, j: usize) -> String {
        Self::topic_word(k, j)
    }
}

/// Generates a topic-mixture corpus. Each document picks 1 to 3 topics; its
/// labels are the union of those topics' labels and its words come from the
/// topics' vocabularies plus a pool of shared filler words.
pub fn gen_synthetic(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let topics: Vec<usize> = (0..config.topics).collect();
    let max_topics = config.topics.min(3);
    let mut docs = Vec::with_capacity(config.docs);
    for _ in 0..config.docs {
        let count = rng.gen_range(1..=max_topics);
        let mut chosen: Vec<usize> = topics.choose_multiple(&mut rng, count).copied().collect();
        chosen.sort_unstable();
        let labels: Vec<String> = chosen
            .iter()
            .flat_map(|&k| (0..config.labels_per_topic).map(move |j| SynthConfig::label_name(k, j)))
            .collect();
        let len = rng.gen_range(config.doc_len.0..=config.doc_len.1);
        let tokens = (0..len)
            .map(|_| {
                if config.shared_words > 0 && rng.gen_bool(0.25) {
                    format!("s{}", rng.gen_range(0..config.shared_words))
                } else {
                    let k = chosen[rng.gen_range(0..chosen.len())];
                    SynthConfig::topic_word(k, rng.gen_range(0..config.words_per_topic))
                }
            })
            .collect();
        docs.push(Document { labels, tokens });
    }
    Ok(Corpus { docs })
}

/// Embedding lines for the synthetic vocabulary: topic words scatter around
/// a per-topic direction, shared words are isotropic noise.
pub fn synthetic_embeddings(config: &SynthConfig, d: usize) -> BTreeMap<String, Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x65_6d62_6564);
    let gauss = |rng: &mut ChaCha8Rng| -> f64 {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    };
    let mut out = BTreeMap::new();
    for k in 0..config.topics {
        let centre: Vec<f64> = (0..d).map(|_| gauss(&mut rng)).collect();
        let n = centre.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for j in 0..config.words_per_topic {
            let v = centre
                .iter()
                .map(|c| c / n + 0.25 * gauss(&mut rng) / (d as f64).sqrt())
                .collect();
            out.insert(SynthConfig::topic_word(k, j), v);
        }
    }
    for s in 0..config.shared_words {
        let v = (0..d)
            .map(|_| gauss(&mut rng) / (d as f64).sqrt())
            .collect();
        out.insert(format!("s{s}"), v);
    }
    out
}

pub fn write_embeddings<W: Write>(table: &BTreeMap<String, Vec<f64>>, mut out: W) -> Result<()> {
    for (tok, v) in table {
        let vals: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(out, "{tok} {}", vals.join(" "))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labels_and_tokens() {
        let c = parse_corpus_str("a,b\tthe cat sat\n").unwrap();
        assert_eq!(c.docs[0].labels, vec!["a", "b"]);
        assert_eq!(c.docs[0].tokens.len(), 3);
    }

    #[test]
    fn collapses_duplicate_labels() {
        let c = parse_corpus_str("a,a\tx").unwrap();
        assert_eq!(c.docs[0].labels, vec!["a"]);
        assert_eq!(c.docs[0].tokens, vec!["x"]);
    }

    #[test]
    fn missing_tab_reports_line() {
        let err = parse_corpus_str("x y z").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = parse_corpus_str("a\tok\n\nb c").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn rejects_invalid_utf8() {
        let err = parse_corpus(&b"a\t\xff\xfe"[..]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn vocab_orders_by_frequency() {
        let c = parse_corpus_str("a\tthe cat the the").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        assert_eq!(v.tokens(), &[UNK, "the", "cat"]);
        assert_eq!(v.id("dog"), UNK_ID);
    }

    #[test]
    fn vocab_bound_one_keeps_only_unk() {
        let c = parse_corpus_str("a\tthe cat the").unwrap();
        let v = Vocab::build(&c, 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.id("the"), UNK_ID);
        assert!(Vocab::build(&c, 0).is_err());
    }

    #[test]
    fn vocab_ties_are_lexicographic() {
        let c = parse_corpus_str("a\tb a b a").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        assert_eq!(v.tokens(), &[UNK, "a", "b"]);
    }

    #[test]
    fn embeddings_read_and_fallback() {
        let c = parse_corpus_str("a\tcat dog").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        let e: Tensor<f64> = load_embeddings("cat 1.0 0.0\n".as_bytes(), &v, 2, 3).unwrap();
        assert_eq!(e.row(v.id("cat")), &[1.0, 0.0]);
        let again: Tensor<f64> = load_embeddings("cat 1.0 0.0\n".as_bytes(), &v, 2, 3).unwrap();
        assert_eq!(e, again);
        let dog = e.row(v.id("dog"));
        assert!(dog.iter().all(|x| x.abs() <= 0.1));
    }

    #[test]
    fn embedding_dimension_mismatch_names_token() {
        let c = parse_corpus_str("a\tcat").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        let err = load_embeddings::<_, f64>("cat 1.0\n".as_bytes(), &v, 2, 0).unwrap_err();
        assert!(err.to_string().contains("cat: expected 2 values"), "{err}");
    }

    #[test]
    fn label_rows_are_word_means() {
        let c = parse_corpus_str("big cat,cat\tbig cat").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        let words: Tensor<f64> =
            load_embeddings("big 2 0\ncat 0 2\n".as_bytes(), &v, 2, 0).unwrap();
        let ls = LabelSpace::build(&c).unwrap();
        let e = label_embeddings(&ls, &v, &words, None, 0);
        assert_eq!(e.rows(), ls.len() + 2);
        assert_eq!(e.row(ls.id("big cat").unwrap()), &[1.0, 1.0]);
        assert_eq!(e.row(ls.id("cat").unwrap()), &[0.0, 2.0]);
        assert_eq!(e.row(ls.null_id()), &[0.0, 0.0]);
    }

    #[test]
    fn opaque_labels_get_seeded_rows() {
        let c = parse_corpus_str("12345\tbig cat").unwrap();
        let v = Vocab::build(&c, 10).unwrap();
        let words: Tensor<f64> = random_embeddings(v.len(), 4, 1);
        let ls = LabelSpace::build(&c).unwrap();
        let a = label_embeddings(&ls, &v, &words, Some(3), 9);
        let b = label_embeddings(&ls, &v, &words, Some(3), 9);
        assert_eq!(a, b);
        assert_eq!(a.cols(), 3);
        assert!(a.row(0).iter().any(|&x| x != 0.0));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(
            gen_synthetic(&cfg).unwrap().to_text(),
            gen_synthetic(&cfg).unwrap().to_text()
        );
    }

    #[test]
    fn single_topic_has_fixed_labels() {
        let cfg = SynthConfig {
            topics: 1,
            docs: 20,
            ..SynthConfig::default()
        };
        let c = gen_synthetic(&cfg).unwrap();
        let expected: Vec<String> = (0..cfg.labels_per_topic)
            .map(|j| SynthConfig::label_name(0, j))
            .collect();
        assert!(c.docs.iter().all(|d| d.labels == expected));
    }

    #[test]
    fn label_set_sizes_vary() {
        let cfg = SynthConfig {
            topics: 4,
            docs: 100,
            ..SynthConfig::default()
        };
        let c = gen_synthetic(&cfg).unwrap();
        let sizes: BTreeSet<usize> = c.label_sizes().into_iter().collect();
        assert!(sizes.len() > 1, "{sizes:?}");
    }
}
