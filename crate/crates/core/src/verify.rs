//! Independent oracles for the numerical core.
//!
//! * assignment: exhaustive search over all injections
//! * transport: exact linear program over the transport polytope
//! * gradients: central finite differences of the full objective
//! * metrics: brute-force recount of label/sample pairs

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assignment::{hungarian, Scheme};
use crate::data::{random_embeddings, Sample};
use crate::error::{Error, Result};
use crate::loss::{record_loss, total_loss, LossConfig};
use crate::metrics::{evaluate, f1, MacroAverage};
use crate::nnmodel::{Mode, ModelConfig, Seq2Set};
use crate::scalar::softmax;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transport::{ipot, IpotParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Hungarian,
    Ot,
    Gradient,
    Metrics,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Hungarian, Suite::Ot, Suite::Gradient, Suite::Metrics];

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Hungarian => 1000,
            Suite::Ot => 200,
            Suite::Gradient => 2,
            Suite::Metrics => 100,
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hungarian" => Ok(Suite::Hungarian),
            "ot" => Ok(Suite::Ot),
            "gradient" => Ok(Suite::Gradient),
            "metrics" => Ok(Suite::Metrics),
            other => Err(Error::InvalidConfig(format!(
                "unknown suite `{other}` (expected hungarian, ot, gradient or metrics)"
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Hungarian => "hungarian",
            Suite::Ot => "ot",
            Suite::Gradient => "gradient",
            Suite::Metrics => "metrics",
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    pub trials: Option<usize>,
    pub seed: u64,
    /// Corrupts every oracle comparison; lets CI check that failures surface.
    pub inject_fault: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub failures: usize,
    /// Largest observed deviation from the oracle.
    pub worst: f64,
    pub secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<9} trials={} failures={} worst={:.3e} sec={:.2}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.suite,
            self.trials,
            self.failures,
            self.worst,
            self.secs
        )
    }
}

pub fn run_suite(suite: Suite, opts: &VerifyOptions) -> Result<SuiteReport> {
    let trials = opts.trials.unwrap_or(suite.default_trials());
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let fault = if opts.inject_fault { 1.0 } else { 0.0 };
    let (mut failures, mut worst) = (0, 0.0f64);
    for t in 0..trials {
        let (dev, ok) = match suite {
            Suite::Hungarian => {
                let d = hungarian_trial(&mut rng, t)? + fault;
                (d, d == 0.0)
            }
            Suite::Ot => {
                let d = ot_trial(&mut rng)? + fault;
                (d, d <= 1e-3)
            }
            Suite::Gradient => {
                let cfg = gradient_config(t % 2 == 1);
                let errs = gradient_check(&cfg, &mut rng)?;
                let d = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max) + fault;
                (d, d < 1e-4)
            }
            Suite::Metrics => {
                let d = metrics_trial(&mut rng)? + fault;
                (d, d == 0.0)
            }
        };
        worst = worst.max(dev);
        if !ok {
            failures += 1;
        }
    }
    Ok(SuiteReport {
        suite,
        trials,
        failures,
        worst,
        secs: start.elapsed().as_secs_f64(),
    })
}

/// Minimum of `Σ_i c[i][σ(i)]` over all injections `σ`, summed in row order.
pub fn brute_force_assignment(c: &Tensor<f64>) -> f64 {
    fn go(c: &Tensor<f64>, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == c.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..c.cols() {
            if !used[j] {
                used[j] = true;
                go(c, row + 1, used, acc + c.row(row)[j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(c, 0, &mut vec![false; c.cols()], 0.0, &mut best);
    best
}

/// Absolute gap between the Hungarian cost and the exhaustive optimum.
/// Odd trials use small integer costs so that ties are common.
fn hungarian_trial(rng: &mut ChaCha8Rng, t: usize) -> Result<f64> {
    let rows = rng.gen_range(1..=6);
    let cols = rng.gen_range(rows..=8);
    let data = (0..rows * cols)
        .map(|_| {
            if t % 2 == 1 {
                rng.gen_range(0..4) as f64
            } else {
                rng.gen::<f64>()
            }
        })
        .collect();
    let c = Tensor::from_vec(&[rows, cols], data)?;
    let m = hungarian(&c)?;
    let mut seen = vec![false; cols];
    for &j in &m.row_to_col {
        if std::mem::replace(&mut seen[j], true) {
            return Ok(f64::INFINITY);
        }
    }
    let cost = m
        .row_to_col
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &j)| acc + c.row(i)[j]);
    Ok((cost - brute_force_assignment(&c)).abs())
}

/// Exact optimal transport cost by linear programming.
pub fn exact_ot(cost: &Tensor<f64>, mu: &[f64], nu: &[f64]) -> Result<f64> {
    let (n, m) = (mu.len(), nu.len());
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<_> = cost
        .data
        .iter()
        .map(|&c| lp.add_var(c, (0.0, f64::INFINITY)))
        .collect();
    for (i, &mi) in mu.iter().enumerate() {
        lp.add_constraint((0..m).map(|j| (vars[i * m + j], 1.0)), ComparisonOp::Eq, mi);
    }
    // the last column constraint is implied by the others
    for (j, &nj) in nu.iter().enumerate().take(m - 1) {
        lp.add_constraint((0..n).map(|i| (vars[i * m + j], 1.0)), ComparisonOp::Eq, nj);
    }
    let sol = lp
        .solve()
        .map_err(|e| Error::Numeric(format!("transport LP: {e}")))?;
    Ok(sol.objective())
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Gap between the IPOT distance and the LP optimum on a random instance
/// with costs in `[0, 2]`.
fn ot_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..=5);
    let m = rng.gen_range(1..=5);
    let cost = Tensor::from_vec(
        &[n, m],
        (0..n * m).map(|_| rng.gen_range(0.0..2.0)).collect(),
    )?;
    let (mu, nu) = if rng.gen_bool(0.5) {
        (vec![1.0 / n as f64; n], vec![1.0 / m as f64; m])
    } else {
        (random_simplex(rng, n), random_simplex(rng, m))
    };
    let r = ipot(&cost, &mu, &nu, &IpotParams::tight())?;
    Ok((r.distance - exact_ot(&cost, &mu, &nu)?).abs())
}

/// The tiny model used by the gradient check: 20 labels, hidden width 16,
/// 8 input tokens, 5 decoding steps.
pub fn gradient_config(bottleneck: bool) -> ModelConfig {
    ModelConfig {
        vocab_size: 30,
        num_labels: 20,
        word_dim: 8,
        label_dim: 8,
        hidden: 16,
        enc_layers: 2,
        dec_layers: 1,
        bottleneck: bottleneck.then_some(6),
        kernel_sizes: vec![3, 7, 15, 30],
        stride: 3,
        max_input_len: 8,
        gen_len: 5,
        dropout: 0.2,
    }
}

/// Random model, sample and frozen label table for `config`.
pub fn random_instance(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Seq2Set<f64>, Sample)> {
    let words = random_embeddings(config.vocab_size, config.word_dim, rng.gen());
    let mut labels: Tensor<f64> =
        random_embeddings(config.num_labels + 2, config.label_dim, rng.gen());
    labels
        .row_mut(config.num_labels)
        .iter_mut()
        .for_each(|x| *x = 0.0);
    let mut model = Seq2Set::new(config.clone(), &words, &labels, rng.gen())?;
    for (name, p) in model.names().to_vec().iter().zip(model.params.iter_mut()) {
        if name.starts_with("lconv.") {
            p.data
                .iter_mut()
                .for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
    let tokens = (0..config.max_input_len)
        .map(|_| rng.gen_range(0..config.vocab_size))
        .collect();
    let mut ids: Vec<usize> = (0..config.num_labels).collect();
    ids.shuffle(rng);
    let n = rng.gen_range(1..=config.gen_len.min(config.num_labels));
    ids.truncate(n);
    Ok((
        model,
        Sample {
            tokens,
            labels: ids,
        },
    ))
}

/// Relative error `|g - g_fd| / max(|g|, |g_fd|)` per parameter array,
/// comparing reverse-mode gradients of the objective against central
/// differences with the assignment and transport plan held fixed.
pub fn gradient_check(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(String, f64)>> {
    gradient_check_with(config, rng, 1e-4)
}

pub fn gradient_check_with(
    config: &ModelConfig,
    rng: &mut ChaCha8Rng,
    step: f64,
) -> Result<Vec<(String, f64)>> {
    let (mut model, sample) = random_instance(config, rng)?;
    let loss_cfg = LossConfig::<f64> {
        scheme: if rng.gen_bool(0.5) {
            Scheme::All
        } else {
            Scheme::FirstN
        },
        ..LossConfig::default()
    };
    let dropout_seed: u64 = rng.gen();

    let (frozen, analytic) = {
        let mut tape = Tape::new(&model.params);
        let mut drop = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fwd = model.forward(&mut tape, &sample.tokens, &mut Mode::Train(&mut drop))?;
        let probs: Vec<Vec<f64>> = fwd.probs.iter().map(|&p| tape.value(p).to_vec()).collect();
        let frozen = total_loss(&sample.labels, &probs, &model.ot_table, &loss_cfg)?;
        let vars = record_loss(
            &mut tape,
            &fwd.probs,
            &sample.labels,
            &frozen,
            &model.ot_table,
            &loss_cfg,
        )?;
        let analytic = crate::loss::backward(&tape, &vars, model.names())?;
        (frozen, analytic)
    };

    let objective = |m: &Seq2Set<f64>| -> Result<f64> {
        let mut tape = Tape::new(&m.params);
        let mut drop = ChaCha8Rng::seed_from_u64(dropout_seed);
        let fwd = m.forward(&mut tape, &sample.tokens, &mut Mode::Train(&mut drop))?;
        let v = record_loss(
            &mut tape,
            &fwd.probs,
            &sample.labels,
            &frozen,
            &m.ot_table,
            &loss_cfg,
        )?;
        Ok(tape.scalar(v.total))
    };

    let mut out = Vec::with_capacity(model.params.len());
    for (pid, name) in model.names().to_vec().into_iter().enumerate() {
        let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
        for k in 0..model.params[pid].len() {
            let orig = model.params[pid].data[k];
            model.params[pid].data[k] = orig + step;
            let up = objective(&model)?;
            model.params[pid].data[k] = orig - step;
            let down = objective(&model)?;
            model.params[pid].data[k] = orig;
            let fd = (up - down) / (2.0 * step);
            let g = analytic[pid].data[k];
            diff += (g - fd) * (g - fd);
            na += g * g;
            nf += fd * fd;
        }
        let scale = na.sqrt().max(nf.sqrt());
        let rel = if scale < 1e-10 {
            diff.sqrt()
        } else {
            diff.sqrt() / scale
        };
        out.push((name, rel));
    }
    Ok(out)
}

fn random_sets(rng: &mut ChaCha8Rng, n: usize, labels: usize) -> Vec<Vec<usize>> {
    (0..n)
        .map(|_| (0..labels).filter(|_| rng.gen_bool(0.15)).collect())
        .collect()
}

/// Largest absolute difference between `evaluate` and a pairwise recount.
fn metrics_trial(rng: &mut ChaCha8Rng) -> Result<f64> {
    let n = rng.gen_range(1..=50);
    let labels = rng.gen_range(1..=20);
    let gold = random_sets(rng, n, labels);
    let mut pred = random_sets(rng, n, labels);
    if rng.gen_bool(0.2) {
        pred = gold.clone();
    }
    let r = evaluate(&pred, &gold, MacroAverage::Observed)?;
    let expect = recount(&pred, &gold, labels);
    let got = [
        r.micro_p,
        r.micro_r,
        r.micro_f1,
        r.macro_f1,
        r.weighted_f1,
        r.example_f1,
    ];
    Ok(got
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Brute-force metrics over label ids `0..labels`, in report order.
pub fn recount(pred: &[Vec<usize>], gold: &[Vec<usize>], labels: usize) -> [f64; 6] {
    let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (mut tp, mut fp, mut fn_) = (vec![0; labels], vec![0; labels], vec![0; labels]);
    for l in 0..labels {
        for (p, g) in pred.iter().zip(gold) {
            match (p.contains(&l), g.contains(&l)) {
                (true, true) => tp[l] += 1,
                (true, false) => fp[l] += 1,
                (false, true) => fn_[l] += 1,
                _ => {}
            }
        }
    }
    let (t, p, n): (usize, usize, usize) = (tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    let (mp, mr) = (div(t, t + p), div(t, t + n));
    let (mut ma, mut observed, mut we, mut support) = (0.0, 0, 0.0, 0);
    for l in 0..labels {
        if tp[l] + fp[l] + fn_[l] == 0 {
            continue;
        }
        let f = f1(div(tp[l], tp[l] + fp[l]), div(tp[l], tp[l] + fn_[l]));
        ma += f;
        observed += 1;
        we += (tp[l] + fn_[l]) as f64 * f;
        support += tp[l] + fn_[l];
    }
    let mut eb = 0.0;
    for (p, g) in pred.iter().zip(gold) {
        eb += if p.is_empty() && g.is_empty() {
            1.0
        } else {
            let hit = p.iter().filter(|l| g.contains(l)).count();
            f1(div(hit, p.len()), div(hit, g.len()))
        };
    }
    [
        mp,
        mr,
        f1(mp, mr),
        if observed == 0 {
            0.0
        } else {
            ma / observed as f64
        },
        if support == 0 {
            0.0
        } else {
            we / support as f64
        },
        eb / pred.len() as f64,
    ]
}

/// Largest change of the bipartite and transport terms when the gold labels
/// of a random sample are shuffled.
pub fn permutation_trial(rng: &mut ChaCha8Rng, scheme: Scheme) -> Result<(f64, f64)> {
    let (v, n_slots, d) = (20, 6, 8);
    let mut table: Tensor<f64> = random_embeddings(v + 2, d, rng.gen());
    table.row_mut(v).iter_mut().for_each(|x| *x = 0.0);
    let probs: Vec<Vec<f64>> = (0..n_slots)
        .map(|_| {
            softmax(
                &(0..=v)
                    .map(|_| rng.gen_range(-3.0..3.0))
                    .collect::<Vec<f64>>(),
            )
        })
        .collect();
    let mut gold: Vec<usize> = (0..v).collect();
    gold.shuffle(rng);
    gold.truncate(rng.gen_range(1..=n_slots));
    let cfg = LossConfig {
        scheme,
        ..LossConfig::default()
    };
    let a = total_loss(&gold, &probs, &table, &cfg)?;
    gold.shuffle(rng);
    let b = total_loss(&gold, &probs, &table, &cfg)?;
    Ok(((a.bipartite - b.bipartite).abs(), (a.ot - b.ot).abs()))
}
