//! Optimisation: Adam with cosine annealing, global-norm clipping and
//! mini-batch accumulation of per-sample gradients.
//!
//! Per-sample forward/backward passes may run on a worker pool. Their
//! gradients are always reduced in sample order, so results do not depend
//! on the number of workers.

use std::fmt;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::assignment::Scheme;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{record_loss, total_loss, LossBreakdown, LossConfig};
use crate::metrics::{evaluate, MacroAverage, MetricsReport};
use crate::nnmodel::{save_checkpoint, Mode, Seq2Set};
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transport::IpotParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LrDecay {
    #[default]
    PerStep,
    PerEpoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub val_frac: f64,
    pub scheme: Scheme,
    pub null_weight: f64,
    pub ot_weight: f64,
    pub decay: LrDecay,
    /// Worker threads for per-sample passes; 0 means all available cores.
    pub workers: usize,
    /// Where `epoch<i>.ckpt` files go, if anywhere.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            clip_norm: 8.0,
            seed: 1,
            val_frac: 0.1,
            scheme: Scheme::All,
            null_weight: 0.2,
            ot_weight: 8.0,
            decay: LrDecay::PerStep,
            workers: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return fail("learning rate and clip norm must be positive".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return fail(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_frac
            ));
        }
        self.loss_config::<f64>().validate()
    }

    pub fn loss_config<T: Scalar>(&self) -> LossConfig<T> {
        LossConfig {
            null_weight: T::lit(self.null_weight),
            ot_weight: T::lit(self.ot_weight),
            scheme: self.scheme,
            ipot: IpotParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(&p.dims)).collect();
        OptimizerState {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr: 0.0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(
            "parameter, gradient and moment counts differ".into(),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.dims != params[i].dims {
            return Err(Error::Shape(format!("gradient {i} has dims {:?}", g.dims)));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient {i}")));
        }
    }
    state.step += 1;
    state.lr = lr;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(lr), T::lit(ADAM_EPS));
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = b1 * m.data[k] + (T::one() - b1) * gk;
            v.data[k] = b2 * v.data[k] + (T::one() - b2) * gk * gk;
            let mhat = m.data[k] / c1;
            let vhat = v.data[k] / c2;
            p.data[k] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// `lr0 · (1 + cos(π · step / total)) / 2`.
pub fn cosine_lr(step: usize, total: usize, lr0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidConfig(
            "cosine schedule needs at least one step".into(),
        ));
    }
    if step > total {
        return Err(Error::InvalidConfig(format!(
            "step {step} beyond schedule of {total}"
        )));
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()))
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| &g.data)
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grads<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm <= max_norm {
        return norm;
    }
    let mut scale = max_norm / norm;
    loop {
        let s = T::lit(scale);
        let clipped: Vec<Tensor<T>> = grads
            .iter()
            .map(|g| Tensor {
                dims: g.dims.clone(),
                data: g.data.iter().map(|&x| x * s).collect(),
            })
            .collect();
        if global_norm(&clipped) <= max_norm {
            grads.clone_from_slice(&clipped);
            return norm;
        }
        // rounding pushed us over; shave one part in a million
        scale *= 1.0 - 1e-6;
    }
}

/// Indices `(train, validation)`: the validation part is the last
/// `round(frac · n)` entries of a seeded shuffle.
pub fn split_validation(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = ((n as f64 * frac).round() as usize).min(n);
    let train = idx[..n - val].to_vec();
    (train, idx[n - val..].to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub bipartite: f64,
    pub ot: f64,
    pub lr: f64,
    pub secs: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} loss={:.6} lb={:.6} lot={:.6} lr={:.6e} sec={:.3}",
            self.epoch, self.loss, self.bipartite, self.ot, self.lr, self.secs
        )
    }
}

fn dropout_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ sample as u64
}

/// Forward, loss and backward for one sample.
pub fn sample_gradients<T: Scalar>(
    model: &Seq2Set<T>,
    sample: &Sample,
    loss: &LossConfig<T>,
    mode: &mut Mode<'_>,
) -> Result<(Vec<Tensor<T>>, LossBreakdown<T>)> {
    let mut tape = Tape::new(&model.params);
    let fwd = model.forward(&mut tape, &sample.tokens, mode)?;
    let probs: Vec<Vec<T>> = fwd.probs.iter().map(|&p| tape.value(p).to_vec()).collect();
    let breakdown = total_loss(&sample.labels, &probs, &model.ot_table, loss)?;
    let vars = record_loss(
        &mut tape,
        &fwd.probs,
        &sample.labels,
        &breakdown,
        &model.ot_table,
        loss,
    )?;
    let grads = crate::loss::backward(&tape, &vars, model.names())?;
    Ok((grads, breakdown))
}

type SampleResult<T> = (Vec<Tensor<T>>, LossBreakdown<T>);

/// Mean objective and its gradient over a batch, reduced in sample order.
pub fn batch_gradients<T: Scalar>(
    model: &Seq2Set<T>,
    samples: &[&Sample],
    loss: &LossConfig<T>,
    seeds: Option<&[u64]>,
) -> Result<(Vec<Tensor<T>>, [f64; 3])> {
    let results: Vec<Result<SampleResult<T>>> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| match seeds {
            Some(seeds) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                sample_gradients(model, s, loss, &mut Mode::Train(&mut rng))
            }
            None => sample_gradients(model, s, loss, &mut Mode::Eval),
        })
        .collect();
    let mut total: Vec<Tensor<T>> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(&p.dims))
        .collect();
    let mut sums = [0.0; 3];
    for r in results {
        let (grads, b) = r?;
        for (acc, g) in total.iter_mut().zip(&grads) {
            for (a, &x) in acc.data.iter_mut().zip(&g.data) {
                *a += x;
            }
        }
        sums[0] += b.total.as_f64();
        sums[1] += b.bipartite.as_f64();
        sums[2] += b.ot.as_f64();
    }
    let inv = T::one() / T::lit(samples.len() as f64);
    for g in &mut total {
        g.data.iter_mut().for_each(|x| *x *= inv);
    }
    let n = samples.len() as f64;
    Ok((total, sums.map(|s| s / n)))
}

/// Owns the optimiser state and the learning-rate schedule.
#[derive(Debug)]
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub state: OptimizerState<T>,
    total_steps: usize,
    steps_per_epoch: usize,
    batch_step: usize,
    /// Largest post-clip global norm seen so far.
    pub max_clipped_norm: f64,
}

const MAX_SKIPPED_BATCHES: usize = 3;

impl<T: Scalar> Trainer<T> {
    pub fn new(model: &Seq2Set<T>, config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        if train_len == 0 {
            return Err(Error::InvalidConfig("no training samples".into()));
        }
        let steps_per_epoch = train_len.div_ceil(config.batch_size);
        Ok(Trainer {
            total_steps: steps_per_epoch * config.epochs,
            steps_per_epoch,
            state: OptimizerState::new(&model.params),
            config,
            batch_step: 0,
            max_clipped_norm: 0.0,
        })
    }

    fn current_lr(&self) -> Result<f64> {
        let step = match self.config.decay {
            LrDecay::PerStep => self.batch_step,
            LrDecay::PerEpoch => (self.batch_step / self.steps_per_epoch) * self.steps_per_epoch,
        };
        cosine_lr(step.min(self.total_steps), self.total_steps, self.config.lr)
    }

    /// One pass over `samples` in a seeded order. `epoch` is 1-based.
    pub fn train_epoch(
        &mut self,
        model: &mut Seq2Set<T>,
        samples: &[Sample],
        epoch: usize,
    ) -> Result<EpochStats> {
        let start = Instant::now();
        let loss = self.config.loss_config::<T>();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(
            self.config.seed ^ (epoch as u64).wrapping_mul(0xA24B_AED4_963E_E407),
        ));
        let (mut sums, mut counted, mut skipped, mut lr) = ([0.0; 3], 0usize, 0usize, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| dropout_seed(self.config.seed, epoch, i))
                .collect();
            lr = self.current_lr()?;
            self.batch_step += 1;
            let (mut grads, means) = match batch_gradients(model, &batch, &loss, Some(&seeds)) {
                Ok(r) => r,
                Err(e @ Error::NonFinite(_)) => {
                    skipped += 1;
                    log::warn!("epoch {epoch}: skipping batch: {e}");
                    if skipped >= MAX_SKIPPED_BATCHES {
                        return Err(e);
                    }
                    continue;
                }
                Err(e) => return Err(e),
            };
            clip_grads(&mut grads, self.config.clip_norm);
            self.max_clipped_norm = self.max_clipped_norm.max(global_norm(&grads));
            adam_step(&mut model.params, &grads, &mut self.state, lr)?;
            for k in 0..3 {
                sums[k] += means[k] * batch.len() as f64;
            }
            counted += batch.len();
        }
        let n = counted.max(1) as f64;
        Ok(EpochStats {
            epoch,
            loss: sums[0] / n,
            bipartite: sums[1] / n,
            ot: sums[2] / n,
            lr,
            secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs all epochs, writing a checkpoint after each one when configured.
    /// `on_epoch` sees every epoch's statistics.
    pub fn fit(
        &mut self,
        model: &mut Seq2Set<T>,
        samples: &[Sample],
        mut on_epoch: impl FnMut(&EpochStats, &Seq2Set<T>),
    ) -> Result<Vec<EpochStats>> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        let mut history = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let stats = pool.install(|| self.train_epoch(model, samples, epoch))?;
            log::debug!("{stats}");
            if let Some(dir) = &self.config.checkpoint_dir {
                save_checkpoint(&dir.join(format!("epoch{epoch}.ckpt")), &model.arrays())?;
            }
            on_epoch(&stats, model);
            history.push(stats);
        }
        Ok(history)
    }
}

/// Eval-mode predicted label sets.
pub fn predict_all<T: Scalar>(model: &Seq2Set<T>, samples: &[Sample]) -> Result<Vec<Vec<usize>>> {
    samples
        .par_iter()
        .map(|s| model.predict(&s.tokens))
        .collect()
}

pub fn evaluate_model<T: Scalar>(
    model: &Seq2Set<T>,
    samples: &[Sample],
    average: MacroAverage,
) -> Result<MetricsReport> {
    let pred = predict_all(model, samples)?;
    let gold: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    evaluate(&pred, &gold, average)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 10, 0.1).unwrap(), 0.1);
        assert!(cosine_lr(10, 10, 0.1).unwrap().abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.1).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 0.1).is_err());
        let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(s, 100, 1.0).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    fn t(d: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[d.len()], d.to_vec()).unwrap()
    }

    #[test]
    fn clipping() {
        let mut g = vec![t(&[0.0, 4.0])];
        assert_eq!(clip_grads(&mut g, 8.0), 4.0);
        assert_eq!(g[0].data, vec![0.0, 4.0]);
        let mut g = vec![t(&[0.0, 16.0]), t(&[0.0])];
        clip_grads(&mut g, 8.0);
        assert_eq!(g[0].data, vec![0.0, 8.0]);
        let mut g = vec![Tensor::from_vec(&[3], vec![3.3f32, -7.1, 9.9]).unwrap()];
        clip_grads(&mut g, 1.0);
        assert!(global_norm(&g) <= 1.0);
    }

    #[test]
    fn adam_zero_and_constant_gradients() {
        let mut p = vec![t(&[1.0, -2.0])];
        let mut s = OptimizerState::new(&p);
        adam_step(&mut p, &[t(&[0.0, 0.0])], &mut s, 0.1).unwrap();
        assert_eq!(p[0].data, vec![1.0, -2.0]);

        let mut p = vec![t(&[0.0])];
        let mut s = OptimizerState::new(&p);
        let mut prev = 0.0;
        for _ in 0..1000 {
            adam_step(&mut p, &[t(&[0.5])], &mut s, 0.01).unwrap();
            let step = prev - p[0].data[0];
            prev = p[0].data[0];
            assert!((step - 0.01).abs() < 1e-6);
        }
        assert!(adam_step(&mut p, &[t(&[f64::NAN])], &mut s, 0.01).is_err());
    }

    #[test]
    fn validation_split_is_seeded_partition() {
        let (a, b) = split_validation(100, 0.1, 5);
        assert_eq!((a.len(), b.len()), (90, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_validation(100, 0.1, 5), (a, b));
        assert_eq!(split_validation(7, 0.0, 1).1.len(), 0);
    }

    #[test]
    fn stats_log_line() {
        let s = EpochStats {
            epoch: 3,
            loss: 1.5,
            bipartite: 1.0,
            ot: 0.0625,
            lr: 1e-3,
            secs: 0.25,
        };
        let line = s.to_string();
        assert!(line.starts_with("epoch=3 loss=1.500000 lb=1.000000 lot=0.062500 lr="));
        assert!(line.ends_with("sec=0.250"));
    }
}
