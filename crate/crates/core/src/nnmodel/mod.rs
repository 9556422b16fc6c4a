//! The sequence-to-set network.
//!
//! Encoder: stacked bidirectional GRU over word embeddings. A stack of
//! lightweight convolutions turns the word-level states `H` into shorter
//! "label-level" states `Ĥ`. At each step the decoder attends over both with
//! shared attention weights, advances a GRU fed with the embedding of its own
//! previous argmax (student forcing), and emits a distribution over the `V`
//! labels plus the null label.

mod checkpoint;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Number of real labels `V`; the output layer has `V + 1` rows.
    pub num_labels: usize,
    pub word_dim: usize,
    pub label_dim: usize,
    /// Encoder width, split evenly across the two directions. The decoder
    /// and attention use the same width.
    pub hidden: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub bottleneck: Option<usize>,
    /// Empty disables the convolution branch.
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub max_input_len: usize,
    /// Number of decoding steps `N`.
    pub gen_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 1,
            num_labels: 1,
            word_dim: 300,
            label_dim: 300,
            hidden: 512,
            enc_layers: 2,
            dec_layers: 1,
            bottleneck: None,
            kernel_sizes: vec![3, 7, 15, 30],
            stride: 3,
            max_input_len: 500,
            gen_len: 8,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.hidden == 0 || !self.hidden.is_multiple_of(2) {
            return fail("hidden size must be a positive even number");
        }
        if self.gen_len == 0 {
            return fail("generation length must be at least 1");
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("encoder and decoder need at least one layer");
        }
        if self.vocab_size == 0 || self.num_labels == 0 || self.word_dim == 0 || self.label_dim == 0
        {
            return fail("vocabulary, label space and embedding sizes must be positive");
        }
        if self.kernel_sizes.contains(&0) || self.stride == 0 {
            return fail("kernel sizes and stride must be positive");
        }
        if self.bottleneck == Some(0) {
            return fail("bottleneck size must be positive");
        }
        if self.max_input_len == 0 {
            return fail("max input length must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        Ok(())
    }

    /// Width of `[s_t; c_t; ĉ_t; e(p_{t-1})]`.
    pub fn output_input_dim(&self) -> usize {
        self.hidden + self.context_dim() + self.label_dim
    }

    fn context_dim(&self) -> usize {
        if self.kernel_sizes.is_empty() {
            self.hidden
        } else {
            2 * self.hidden
        }
    }

    /// Length of the convolution output for `l` input rows.
    pub fn conv_len(&self, l: usize) -> usize {
        if self.kernel_sizes.is_empty() {
            l
        } else {
            l.div_ceil(self.stride)
        }
    }

    pub fn to_kv(&self) -> String {
        let ks: Vec<String> = self.kernel_sizes.iter().map(|k| k.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        kv("vocab_size", self.vocab_size.to_string());
        kv("num_labels", self.num_labels.to_string());
        kv("word_dim", self.word_dim.to_string());
        kv("label_dim", self.label_dim.to_string());
        kv("hidden", self.hidden.to_string());
        kv("enc_layers", self.enc_layers.to_string());
        kv("dec_layers", self.dec_layers.to_string());
        kv(
            "bottleneck",
            self.bottleneck.map_or("none".into(), |b| b.to_string()),
        );
        kv("kernel_sizes", ks.join(","));
        kv("stride", self.stride.to_string());
        kv("max_input_len", self.max_input_len.to_string());
        kv("gen_len", self.gen_len.to_string());
        kv("dropout", self.dropout.to_string());
        s
    }

    pub fn from_kv(text: &str) -> Result<ModelConfig> {
        let mut c = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |m: String| Error::Parse {
                line: i + 1,
                msg: m,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| bad(format!("{k}: not an integer: {v}")))
            };
            match k {
                "vocab_size" => c.vocab_size = num(v)?,
                "num_labels" => c.num_labels = num(v)?,
                "word_dim" => c.word_dim = num(v)?,
                "label_dim" => c.label_dim = num(v)?,
                "hidden" => c.hidden = num(v)?,
                "enc_layers" => c.enc_layers = num(v)?,
                "dec_layers" => c.dec_layers = num(v)?,
                "bottleneck" => c.bottleneck = if v == "none" { None } else { Some(num(v)?) },
                "kernel_sizes" => {
                    c.kernel_sizes = parse_kernel_sizes(v).map_err(|e| bad(e.to_string()))?
                }
                "stride" => c.stride = num(v)?,
                "max_input_len" => c.max_input_len = num(v)?,
                "gen_len" => c.gen_len = num(v)?,
                "dropout" => {
                    c.dropout = v
                        .parse()
                        .map_err(|_| bad(format!("dropout: not a number: {v}")))?
                }
                other => return Err(bad(format!("unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Parses `3,7,15,30`; an empty string or `none` disables the convolutions.
pub fn parse_kernel_sizes(s: &str) -> Result<Vec<usize>> {
    let s = s.trim();
    if s.is_empty() || s == "none" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|k| {
            k.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("bad kernel size `{k}`")))
        })
        .collect()
}

/// Left padding of a same-length convolution; even kernels lean left.
pub fn pad_left(kernel: usize) -> usize {
    kernel / 2
}

/// Output-layer parameter count: `(V+1)·z` without a bottleneck,
/// `b·z + (V+1)·b` with one.
pub fn output_param_count(outputs: usize, z: usize, bottleneck: Option<usize>) -> usize {
    match bottleneck {
        None => outputs * z,
        Some(b) => b * z + outputs * b,
    }
}

#[derive(Clone, Copy, Debug)]
struct GruIds {
    w_ih: usize,
    w_hh: usize,
    b_ih: usize,
    b_hh: usize,
}

#[derive(Clone, Copy, Debug)]
enum OutIds {
    Full { w_p: usize },
    Bottleneck { w_in: usize, w_out: usize },
}

#[derive(Clone, Debug)]
struct Layout {
    word: usize,
    label: usize,
    enc: Vec<[GruIds; 2]>,
    w_a: usize,
    u_a: usize,
    v_a: usize,
    taps: Vec<usize>,
    w_init: usize,
    dec: Vec<GruIds>,
    out: OutIds,
}

struct LayoutBuilder {
    specs: Vec<(String, Vec<usize>)>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, dims: &[usize]) -> usize {
        self.specs.push((name, dims.to_vec()));
        self.specs.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruIds {
        GruIds {
            w_ih: self.add(format!("{prefix}.w_ih"), &[3 * hidden, input]),
            w_hh: self.add(format!("{prefix}.w_hh"), &[3 * hidden, hidden]),
            b_ih: self.add(format!("{prefix}.b_ih"), &[3 * hidden]),
            b_hh: self.add(format!("{prefix}.b_hh"), &[3 * hidden]),
        }
    }
}

fn layout(c: &ModelConfig) -> (Layout, Vec<(String, Vec<usize>)>) {
    let mut b = LayoutBuilder { specs: Vec::new() };
    let h = c.hidden;
    let dir = h / 2;
    let word = b.add("embed.word".into(), &[c.vocab_size, c.word_dim]);
    let label = b.add("embed.label".into(), &[c.num_labels + 2, c.label_dim]);
    let enc = (0..c.enc_layers)
        .map(|l| {
            let input = if l == 0 { c.word_dim } else { h };
            [
                b.gru(&format!("enc.l{l}.fwd"), input, dir),
                b.gru(&format!("enc.l{l}.bwd"), input, dir),
            ]
        })
        .collect();
    let w_a = b.add("attn.w_a".into(), &[h, h]);
    let u_a = b.add("attn.u_a".into(), &[h, h]);
    let v_a = b.add("attn.v_a".into(), &[h]);
    let taps = c
        .kernel_sizes
        .iter()
        .enumerate()
        .map(|(i, &k)| b.add(format!("lconv.l{i}.taps"), &[k]))
        .collect();
    let w_init = b.add("dec.w_init".into(), &[h, h]);
    let dec_in = c.label_dim + c.context_dim();
    let dec = (0..c.dec_layers)
        .map(|l| b.gru(&format!("dec.l{l}"), if l == 0 { dec_in } else { h }, h))
        .collect();
    let z = c.output_input_dim();
    let outputs = c.num_labels + 1;
    let out = match c.bottleneck {
        None => OutIds::Full {
            w_p: b.add("out.w_p".into(), &[outputs, z]),
        },
        Some(bn) => OutIds::Bottleneck {
            w_in: b.add("out.w_in".into(), &[bn, z]),
            w_out: b.add("out.w_out".into(), &[outputs, bn]),
        },
    };
    (
        Layout {
            word,
            label,
            enc,
            w_a,
            u_a,
            v_a,
            taps,
            w_init,
            dec,
            out,
        },
        b.specs,
    )
}

/// Name of the frozen label-embedding table used by the transport cost.
pub const OT_TABLE_NAME: &str = "ot.label_embed";

/// Network parameters plus the frozen transport embedding table.
#[derive(Clone, Debug)]
pub struct Seq2Set<T> {
    pub config: ModelConfig,
    names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    /// `(V + 2) x label_dim`; not trained.
    pub ot_table: Tensor<T>,
    layout: Layout,
}

#[derive(Debug)]
pub enum Mode<'r> {
    Eval,
    Train(&'r mut ChaCha8Rng),
}

/// Graph handles for one student-forced generation.
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Vec<Var>,
    pub argmax: Vec<usize>,
    /// Label-table row fed to the decoder at each step (start symbol first).
    pub inputs: Vec<usize>,
}

/// The `N` per-step distributions over `V + 1` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSequence<T> {
    pub probs: Vec<Vec<T>>,
    pub argmax: Vec<usize>,
}

impl<T: Scalar> Seq2Set<T> {
    /// Fresh parameters. Embedding tables are copied from `words`
    /// (`vocab_size x word_dim`) and `labels` (`(V+2) x label_dim`); the
    /// label table also becomes the frozen transport table.
    pub fn new(
        config: ModelConfig,
        words: &Tensor<T>,
        labels: &Tensor<T>,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for (name, dims) in &specs {
            let t = if name == "embed.word" {
                check_dims(name, words, dims)?;
                words.clone()
            } else if name == "embed.label" {
                check_dims(name, labels, dims)?;
                labels.clone()
            } else if name.starts_with("lconv.") {
                Tensor::zeros(dims)
            } else {
                let fan_in = if dims.len() == 2 {
                    dims[1]
                } else {
                    config.hidden / 2
                };
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                let len: usize = dims.iter().product();
                let data = (0..len)
                    .map(|_| T::lit(rng.gen_range(-bound..=bound)))
                    .collect();
                Tensor::from_vec(dims, data)?
            };
            params.push(t);
        }
        Ok(Seq2Set {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            params,
            ot_table: labels.clone(),
            layout,
        })
    }

    /// Rebuilds a model from named arrays, e.g. a loaded checkpoint.
    pub fn from_arrays(config: ModelConfig, arrays: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let mut slots: Vec<Option<Tensor<T>>> = vec![None; specs.len()];
        let mut ot_table = None;
        for (name, t) in arrays {
            if name == OT_TABLE_NAME {
                check_dims(&name, &t, &[config.num_labels + 2, config.label_dim])?;
                ot_table = Some(t);
                continue;
            }
            let Some(pos) = specs.iter().position(|(n, _)| *n == name) else {
                return Err(Error::Checkpoint(format!("unknown array `{name}`")));
            };
            check_dims(&name, &t, &specs[pos].1)?;
            slots[pos] = Some(t);
        }
        let mut params = Vec::with_capacity(specs.len());
        for (slot, (name, _)) in slots.into_iter().zip(&specs) {
            params.push(slot.ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?);
        }
        let ot_table = ot_table
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{OT_TABLE_NAME}`")))?;
        Ok(Seq2Set {
            config,
            names: specs.into_iter().map(|(n, _)| n).collect(),
            params,
            ot_table,
            layout,
        })
    }

    /// Every array in checkpoint order: parameters, then the transport table.
    pub fn arrays(&self) -> Vec<(String, &Tensor<T>)> {
        self.names
            .iter()
            .cloned()
            .zip(&self.params)
            .chain(std::iter::once((OT_TABLE_NAME.to_string(), &self.ot_table)))
            .collect()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn null_id(&self) -> usize {
        self.config.num_labels
    }

    pub fn bos_id(&self) -> usize {
        self.config.num_labels + 1
    }

    pub fn cast<U: Scalar>(&self) -> Seq2Set<U> {
        Seq2Set {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            ot_table: self.ot_table.cast(),
            layout: self.layout.clone(),
        }
    }

    fn dropout(&self, tape: &mut Tape<'_, T>, x: Var, mode: &mut Mode<'_>) -> Var {
        let p = self.config.dropout;
        let Mode::Train(rng) = mode else { return x };
        if p == 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mask(x, mask)
    }

    fn gru_step(&self, tape: &mut Tape<'_, T>, ids: GruIds, x: Var, h: Var) -> Var {
        let w_ih = tape.param(ids.w_ih);
        let w_hh = tape.param(ids.w_hh);
        let b_ih = tape.param(ids.b_ih);
        let b_hh = tape.param(ids.b_hh);
        tape.gru(x, h, w_ih, w_hh, b_ih, b_hh)
    }

    /// Word-level states `H` (`l x hidden`), each row the concatenation of
    /// the forward and backward GRU states.
    pub fn encode(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::InvalidConfig(
                "cannot encode an empty token sequence".into(),
            ));
        }
        if tokens.len() > self.config.max_input_len {
            return Err(Error::InvalidConfig(format!(
                "input of {} tokens exceeds the maximum of {}",
                tokens.len(),
                self.config.max_input_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let dir = self.config.hidden / 2;
        let mut xs: Vec<Var> = tokens
            .iter()
            .map(|&t| {
                let e = tape.param_row(self.layout.word, t);
                self.dropout(tape, e, mode)
            })
            .collect();
        let l = xs.len();
        for (layer, ids) in self.layout.enc.iter().enumerate() {
            if layer > 0 {
                xs = xs
                    .into_iter()
                    .map(|x| self.dropout(tape, x, mode))
                    .collect();
            }
            let zero = tape.vector(vec![T::zero(); dir]);
            let mut fwd = Vec::with_capacity(l);
            let mut h = zero;
            for &x in &xs {
                h = self.gru_step(tape, ids[0], x, h);
                fwd.push(h);
            }
            let mut bwd = vec![zero; l];
            let mut h = zero;
            for i in (0..l).rev() {
                h = self.gru_step(tape, ids[1], xs[i], h);
                bwd[i] = h;
            }
            xs = fwd
                .into_iter()
                .zip(bwd)
                .map(|(f, b)| tape.concat(&[f, b]))
                .collect();
        }
        let out = tape.stack_rows(&xs);
        if tape.value(out).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder states".into()));
        }
        Ok(out)
    }

    /// Label-level states `Ĥ`. `None` when the convolution branch is off.
    pub fn light_conv(&self, tape: &mut Tape<'_, T>, h: Var) -> Result<Option<Var>> {
        if tape.shape(h).0 == 0 {
            return Err(Error::Shape("light_conv needs at least one row".into()));
        }
        let n = self.config.kernel_sizes.len();
        if n == 0 {
            return Ok(None);
        }
        let mut x = h;
        for (i, (&k, &pid)) in self
            .config
            .kernel_sizes
            .iter()
            .zip(&self.layout.taps)
            .enumerate()
        {
            let raw = tape.param(pid);
            let taps = tape.softmax(raw);
            let stride = if i + 1 == n { self.config.stride } else { 1 };
            x = tape.light_conv(x, taps, stride, pad_left(k));
        }
        Ok(Some(x))
    }

    /// Additive attention of `s` over the rows of `m`; `um` is `m U_a^T`.
    /// Returns the context vector and the attention weights.
    pub fn attend(&self, tape: &mut Tape<'_, T>, s: Var, m: Var, um: Var) -> (Var, Var) {
        let w_a = tape.param(self.layout.w_a);
        let v_a = tape.param(self.layout.v_a);
        let ws = tape.matvec(w_a, s);
        let e = tape.attn_scores(ws, um, v_a);
        let alpha = tape.softmax(e);
        (tape.vecmat(alpha, m), alpha)
    }

    /// Runs the student-forced decoder for `N` steps on one document.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        tokens: &[usize],
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        let unk = [crate::data::UNK_ID];
        let tokens = match tokens.len() {
            0 => &unk[..],
            n => &tokens[..n.min(self.config.max_input_len)],
        };
        let h = self.encode(tape, tokens, mode)?;
        let hc = self.light_conv(tape, h)?;
        let u_a = tape.param(self.layout.u_a);
        let uh = tape.matmul_t(h, u_a);
        let uhc = hc.map(|m| (m, tape.matmul_t(m, u_a)));

        let l = tape.shape(h).0;
        let mean = tape.vector(vec![T::one() / T::lit(l as f64); l]);
        let hbar = tape.vecmat(mean, h);
        let w_init = tape.param(self.layout.w_init);
        let pre = tape.matvec(w_init, hbar);
        let s0 = tape.tanh(pre);
        let mut states = vec![s0; self.layout.dec.len()];

        let mut prev = self.bos_id();
        let mut fwd = Forward {
            probs: Vec::with_capacity(self.config.gen_len),
            argmax: Vec::with_capacity(self.config.gen_len),
            inputs: Vec::with_capacity(self.config.gen_len),
        };
        for t in 0..self.config.gen_len {
            fwd.inputs.push(prev);
            let (p, arg) = self.decode_step(tape, &mut states, prev, h, uh, uhc)?;
            if tape.value(p).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "output distribution at step {}",
                    t + 1
                )));
            }
            fwd.probs.push(p);
            fwd.argmax.push(arg);
            prev = arg;
        }
        Ok(fwd)
    }

    /// One decoder step: attends with the previous top state, advances the
    /// GRU stack on `[e(prev); c_t; ĉ_t]` and scores `[s_t; c_t; ĉ_t; e(prev)]`.
    /// Returns the distribution and its argmax (lowest id on ties).
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step(
        &self,
        tape: &mut Tape<'_, T>,
        states: &mut [Var],
        prev: usize,
        h: Var,
        uh: Var,
        uhc: Option<(Var, Var)>,
    ) -> Result<(Var, usize)> {
        let top = *states.last().expect("at least one decoder layer");
        let (c, _) = self.attend(tape, top, h, uh);
        let ch = uhc.map(|(m, um)| self.attend(tape, top, m, um).0);
        let e = tape.param_row(self.layout.label, prev);
        let mut parts = vec![e, c];
        parts.extend(ch);
        let mut x = tape.concat(&parts);
        for (layer, ids) in self.layout.dec.iter().enumerate() {
            let s = self.gru_step(tape, *ids, x, states[layer]);
            states[layer] = s;
            x = s;
        }
        let mut feats = vec![x, c];
        feats.extend(ch);
        feats.push(e);
        let z = tape.concat(&feats);
        let logits = match self.layout.out {
            OutIds::Full { w_p } => {
                let w = tape.param(w_p);
                tape.matvec(w, z)
            }
            OutIds::Bottleneck { w_in, w_out } => {
                let wi = tape.param(w_in);
                let hidden = tape.matvec(wi, z);
                let act = tape.tanh(hidden);
                let wo = tape.param(w_out);
                tape.matvec(wo, act)
            }
        };
        if tape.value(logits).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("output logits".into()));
        }
        let p = tape.softmax(logits);
        let arg = argmax(tape.value(p));
        Ok((p, arg))
    }

    /// Eval-mode generation of `N` distributions.
    pub fn generate(&self, tokens: &[usize]) -> Result<PredictionSequence<T>> {
        let mut tape = Tape::new(&self.params);
        let fwd = self.forward(&mut tape, tokens, &mut Mode::Eval)?;
        Ok(PredictionSequence {
            probs: fwd.probs.iter().map(|&p| tape.value(p).to_vec()).collect(),
            argmax: fwd.argmax,
        })
    }

    pub fn predict(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        Ok(predict_labels(
            &self.generate(tokens)?,
            self.config.num_labels,
        ))
    }
}

fn check_dims<T>(name: &str, t: &Tensor<T>, dims: &[usize]) -> Result<()> {
    if t.dims != dims {
        return Err(Error::Shape(format!(
            "{name}: expected dims {dims:?}, got {:?}",
            t.dims
        )));
    }
    Ok(())
}

/// Per-step argmax ids with null (and anything past it) dropped and
/// duplicates removed, keeping first occurrences.
pub fn predict_labels<T>(seq: &PredictionSequence<T>, num_labels: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for &id in &seq.argmax {
        if id < num_labels && !out.contains(&id) {
            out.push(id);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::random_embeddings;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            num_labels: 7,
            word_dim: 5,
            label_dim: 4,
            hidden: 8,
            enc_layers: 2,
            dec_layers: 1,
            bottleneck: None,
            kernel_sizes: vec![3, 4],
            stride: 2,
            max_input_len: 16,
            gen_len: 4,
            dropout: 0.2,
        }
    }

    fn tiny(config: ModelConfig) -> Seq2Set<f64> {
        let words = random_embeddings(config.vocab_size, config.word_dim, 1);
        let labels = random_embeddings(config.num_labels + 2, config.label_dim, 2);
        Seq2Set::new(config, &words, &labels, 3).unwrap()
    }

    #[test]
    fn single_token_has_one_row() {
        let m = tiny(tiny_config());
        let mut tape = Tape::new(&m.params);
        let h = m.encode(&mut tape, &[3], &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(h), (1, 8));
        assert!(m.encode(&mut tape, &[], &mut Mode::Eval).is_err());
    }

    #[test]
    fn zero_weights_give_constant_states() {
        let mut m = tiny(tiny_config());
        for (name, p) in m.names.clone().iter().zip(m.params.iter_mut()) {
            if name.starts_with("enc.") {
                p.data.iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let mut tape = Tape::new(&m.params);
        let h = m
            .encode(&mut tape, &[1, 4, 2, 9, 5], &mut Mode::Eval)
            .unwrap();
        let v = tape.value(h);
        for row in v.chunks(8).skip(1) {
            assert_eq!(row, &v[..8]);
        }
    }

    #[test]
    fn conv_output_length() {
        let mut c = tiny_config();
        c.kernel_sizes = vec![3, 7, 15, 30];
        c.stride = 3;
        let m = tiny(c);
        let mut tape = Tape::new(&m.params);
        let h = m.encode(&mut tape, &[1; 9], &mut Mode::Eval).unwrap();
        let hc = m.light_conv(&mut tape, h).unwrap().unwrap();
        assert_eq!(tape.shape(hc), (3, 8));
    }

    #[test]
    fn uniform_taps_average_the_window() {
        let c = ModelConfig {
            kernel_sizes: vec![3],
            stride: 1,
            ..tiny_config()
        };
        let m = tiny(c);
        let mut tape = Tape::new(&m.params);
        let h = m.encode(&mut tape, &[1, 2, 3, 4], &mut Mode::Eval).unwrap();
        let hc = m.light_conv(&mut tape, h).unwrap().unwrap();
        let hv = tape.value(h).to_vec();
        let out = tape.value(hc);
        for ch in 0..8 {
            let expect = (hv[8 + ch] + hv[16 + ch] + hv[24 + ch]) / 3.0;
            assert!((out[2 * 8 + ch] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one_and_singleton_is_identity() {
        let m = tiny(tiny_config());
        let mut tape = Tape::new(&m.params);
        let h = m
            .encode(&mut tape, &[1, 2, 3, 4, 5], &mut Mode::Eval)
            .unwrap();
        let u_a = tape.param(m.layout.u_a);
        let uh = tape.matmul_t(h, u_a);
        let s = tape.vector(vec![0.3; 8]);
        let (_, alpha) = m.attend(&mut tape, s, h, uh);
        let total: f64 = tape.value(alpha).iter().sum();
        assert!((total - 1.0).abs() < 1e-6);

        let one = m.encode(&mut tape, &[7], &mut Mode::Eval).unwrap();
        let uo = tape.matmul_t(one, u_a);
        let (ctx, alpha) = m.attend(&mut tape, s, one, uo);
        assert_eq!(tape.value(alpha), &[1.0]);
        assert_eq!(tape.value(ctx), tape.value(one));
    }

    #[test]
    fn zero_score_vector_gives_mean_context() {
        let mut m = tiny(tiny_config());
        let v_a = m.layout.v_a;
        m.params[v_a].data.iter_mut().for_each(|x| *x = 0.0);
        let mut tape = Tape::new(&m.params);
        let h = m.encode(&mut tape, &[1, 2, 3], &mut Mode::Eval).unwrap();
        let u_a = tape.param(m.layout.u_a);
        let uh = tape.matmul_t(h, u_a);
        let s = tape.vector(vec![0.1; 8]);
        let (ctx, _) = m.attend(&mut tape, s, h, uh);
        let hv = tape.value(h).to_vec();
        for ch in 0..8 {
            let mean = (hv[ch] + hv[8 + ch] + hv[16 + ch]) / 3.0;
            assert!((tape.value(ctx)[ch] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_is_student_forced_and_deterministic() {
        for bottleneck in [None, Some(3)] {
            let m = tiny(ModelConfig {
                bottleneck,
                ..tiny_config()
            });
            let mut tape = Tape::new(&m.params);
            let fwd = m
                .forward(&mut tape, &[1, 2, 3, 4, 5, 6], &mut Mode::Eval)
                .unwrap();
            assert_eq!(fwd.probs.len(), 4);
            assert_eq!(fwd.inputs[0], m.bos_id());
            for t in 1..4 {
                assert_eq!(fwd.inputs[t], fwd.argmax[t - 1]);
            }
            for &p in &fwd.probs {
                let v = tape.value(p);
                assert_eq!(v.len(), 8);
                assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
            assert_eq!(
                m.generate(&[1, 2, 3]).unwrap(),
                m.generate(&[1, 2, 3]).unwrap()
            );
        }
    }

    #[test]
    fn tie_in_previous_distribution_feeds_lowest_id() {
        let mut p = vec![0.0; 8];
        p[3] = 0.4;
        p[7] = 0.4;
        assert_eq!(argmax(&p), 3);
    }

    #[test]
    fn bottleneck_parameter_formula() {
        let (v, z, b) = (670_091usize, 2048, 512);
        assert_eq!(output_param_count(v + 1, z, None), (v + 1) * z);
        assert_eq!(output_param_count(v + 1, z, Some(b)), b * z + (v + 1) * b);
        let c = ModelConfig {
            bottleneck: Some(3),
            ..tiny_config()
        };
        let z = c.output_input_dim();
        let m = tiny(c);
        let out: usize = m
            .arrays()
            .iter()
            .filter(|(n, _)| n.starts_with("out."))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(out, output_param_count(8, z, Some(3)));
    }

    #[test]
    fn predict_labels_drops_null_and_duplicates() {
        let seq = |argmax: Vec<usize>| PredictionSequence::<f64> {
            probs: vec![],
            argmax,
        };
        assert_eq!(predict_labels(&seq(vec![5, 10, 5, 9]), 10), vec![5, 9]);
        assert!(predict_labels(&seq(vec![10, 10]), 10).is_empty());
        assert_eq!(predict_labels(&seq(vec![2, 3]), 10), vec![2, 3]);
    }

    #[test]
    fn config_kv_round_trip() {
        let c = ModelConfig {
            bottleneck: Some(6),
            ..tiny_config()
        };
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(ModelConfig::from_kv("bogus = 1").is_err());
    }
}
