//! Training objective: bipartite matching loss plus the weighted semantic
//! transport term.
//!
//! The assignment and the transport plan are computed from the current
//! probabilities and then frozen, so gradients flow only through the
//! log-probabilities of matched targets and through the cosine costs.

use crate::assignment::{assign, FullAssignment, Scheme, SlotTarget};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transport::{ot_distance, IpotParams, TransportPlan, COS_EPS};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig<T> {
    /// Weight of slots assigned to the null label.
    pub null_weight: T,
    /// Weight of the transport term.
    pub ot_weight: T,
    pub scheme: Scheme,
    pub ipot: IpotParams<T>,
}

impl<T: Scalar> Default for LossConfig<T> {
    fn default() -> Self {
        LossConfig {
            null_weight: T::lit(0.2),
            ot_weight: T::lit(8.0),
            scheme: Scheme::All,
            ipot: IpotParams::default(),
        }
    }
}

impl<T: Scalar> LossConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.null_weight > T::zero() && self.null_weight <= T::one()) {
            return Err(Error::InvalidConfig(format!(
                "null-label weight must lie in (0, 1], got {}",
                self.null_weight
            )));
        }
        if !(self.ot_weight >= T::zero()) {
            return Err(Error::InvalidConfig(format!(
                "transport weight must be non-negative, got {}",
                self.ot_weight
            )));
        }
        self.ipot.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub bipartite: T,
    pub ot: T,
    pub total: T,
    pub assignment: FullAssignment,
    pub plan: Option<TransportPlan<T>>,
    /// The sample had no gold labels, so the transport term is zero.
    pub ot_skipped: bool,
}

fn target_id(t: SlotTarget, null_id: usize) -> usize {
    match t {
        SlotTarget::Label(y) => y,
        SlotTarget::Null => null_id,
    }
}

/// `-Σ_i w_i ln max(p_i(target_i), 1e-12)` with `w_i = null_weight` on null
/// slots and 1 elsewhere. The null label is the last entry of each row.
pub fn bipartite_loss<T: Scalar>(
    assignment: &FullAssignment,
    probs: &[Vec<T>],
    null_weight: T,
) -> T {
    let floor = T::lit(PROB_FLOOR);
    let mut acc = T::zero();
    for (&t, p) in assignment.targets.iter().zip(probs) {
        let null_id = p.len() - 1;
        let w = if t == SlotTarget::Null {
            null_weight
        } else {
            T::one()
        };
        let term = -w * p[target_id(t, null_id)].max(floor).ln();
        acc += term;
    }
    acc
}

/// Value-level objective for one sample. `table` holds the frozen label
/// embeddings (at least `V + 1` rows, null row included).
pub fn total_loss<T: Scalar>(
    gold: &[usize],
    probs: &[Vec<T>],
    table: &Tensor<T>,
    config: &LossConfig<T>,
) -> Result<LossBreakdown<T>> {
    config.validate()?;
    if probs.is_empty() {
        return Err(Error::Shape("no prediction slots".into()));
    }
    let outputs = probs[0].len();
    if probs.iter().any(|p| p.len() != outputs) || table.rows() < outputs {
        return Err(Error::Shape(format!(
            "predictions over {outputs} outputs do not fit a {}-row label table",
            table.rows()
        )));
    }
    if let Some(&y) = gold.iter().find(|&&y| y + 1 >= outputs) {
        return Err(Error::Shape(format!(
            "gold label {y} outside {} labels",
            outputs - 1
        )));
    }
    let assignment = if gold.is_empty() {
        FullAssignment::all_null(probs.len())
    } else {
        assign(config.scheme, gold, probs)?
    };
    let bipartite = bipartite_loss(&assignment, probs, config.null_weight);
    let ot = ot_distance(probs, gold, table, &config.ipot)?;
    let total = bipartite + config.ot_weight * ot.distance;
    Ok(LossBreakdown {
        bipartite,
        ot: ot.distance,
        total,
        assignment,
        plan: ot.plan,
        ot_skipped: ot.skipped,
    })
}

/// Handles to the recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub bipartite: Var,
    pub ot: Option<Var>,
    pub total: Var,
}

/// Records the objective on `tape` with the assignment and plan from
/// `breakdown` held fixed. `probs` are the per-slot distribution nodes.
pub fn record_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    probs: &[Var],
    gold: &[usize],
    breakdown: &LossBreakdown<T>,
    table: &Tensor<T>,
    config: &LossConfig<T>,
) -> Result<LossVars> {
    let floor = T::lit(PROB_FLOOR);
    let mut terms = Vec::with_capacity(probs.len());
    for (&t, &p) in breakdown.assignment.targets.iter().zip(probs) {
        let null_id = tape.value(p).len() - 1;
        let w = if t == SlotTarget::Null {
            config.null_weight
        } else {
            T::one()
        };
        terms.push(tape.neg_log_pick(p, target_id(t, null_id), w, floor));
    }
    let n = terms.len();
    let bipartite = tape.weighted_sum(&terms, vec![T::one(); n]);

    let ot = match &breakdown.plan {
        None => None,
        Some(plan) => {
            let outputs = tape.value(probs[0]).len();
            let d = table.cols();
            let emb = tape.constant(outputs, d, table.data[..outputs * d].to_vec());
            let eps = T::lit(COS_EPS);
            let mut costs = Vec::with_capacity(probs.len() * gold.len());
            for &p in probs {
                let u = tape.vecmat(p, emb);
                for &y in gold {
                    costs.push(tape.cos_dist(u, table.row(y).to_vec(), eps));
                }
            }
            if costs.len() != plan.gamma.len() {
                return Err(Error::Shape(
                    "transport plan does not match the cost layout".into(),
                ));
            }
            Some(tape.weighted_sum(&costs, plan.gamma.data.clone()))
        }
    };
    let total = match ot {
        Some(o) => tape.axpy(bipartite, o, config.ot_weight),
        None => bipartite,
    };
    Ok(LossVars {
        bipartite,
        ot,
        total,
    })
}

/// Gradients of the recorded objective, failing with the array name on any
/// non-finite entry.
pub fn backward<T: Scalar>(
    tape: &Tape<'_, T>,
    vars: &LossVars,
    names: &[String],
) -> Result<Vec<Tensor<T>>> {
    let grads = tape.backward(vars.total);
    Tape::check_finite(&grads, names)?;
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_hot(k: usize, n: usize) -> Vec<f64> {
        let mut v = vec![0.0; n];
        v[k] = 1.0;
        v
    }

    #[test]
    fn worked_example() {
        let a = FullAssignment {
            targets: vec![SlotTarget::Label(0), SlotTarget::Null, SlotTarget::Label(1)],
            slot_of: vec![0, 2],
        };
        let probs = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.1, 0.8],
            vec![0.5, 0.25, 0.25],
        ];
        let l = bipartite_loss(&a, &probs, 0.2);
        let expect = -(0.5f64.ln() + 0.2 * 0.8f64.ln() + 0.25f64.ln());
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 2.1241).abs() < 1e-4);
        assert!(bipartite_loss(&a, &probs, 1.0) > l);
    }

    #[test]
    fn clamps_zero_probability() {
        let a = FullAssignment {
            targets: vec![SlotTarget::Label(1)],
            slot_of: vec![0],
        };
        let l = bipartite_loss(&a, &[vec![1.0, 0.0, 0.0]], 0.2);
        assert!((l + 1e-12f64.ln()).abs() < 1e-9);
    }

    fn table() -> Tensor<f64> {
        Tensor::from_vec(
            &[5, 3],
            vec![
                1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.5,
            ],
        )
        .unwrap()
    }

    #[test]
    fn perfect_predictions_cost_nothing() {
        let probs: Vec<_> = [2, 0, 1].iter().map(|&k| one_hot(k, 4)).collect();
        let b = total_loss(&[0, 1, 2], &probs, &table(), &LossConfig::default()).unwrap();
        assert!(b.total <= 1e-5, "{}", b.total);
    }

    #[test]
    fn zero_weight_and_empty_gold() {
        let probs = vec![vec![0.2, 0.3, 0.1, 0.4], vec![0.1, 0.6, 0.2, 0.1]];
        let cfg = LossConfig {
            ot_weight: 0.0,
            ..LossConfig::default()
        };
        let b = total_loss(&[1], &probs, &table(), &cfg).unwrap();
        assert_eq!(b.total, b.bipartite);
        let b = total_loss(&[], &probs, &table(), &LossConfig::default()).unwrap();
        assert!(b.ot_skipped);
        assert_eq!(b.assignment.null_count(), 2);
        assert_eq!(b.total, b.bipartite);
    }

    #[test]
    fn rejects_bad_weights() {
        for (nw, ow) in [(0.0, 8.0), (1.5, 8.0), (0.2, -1.0)] {
            let cfg = LossConfig {
                null_weight: nw,
                ot_weight: ow,
                ..LossConfig::default()
            };
            assert!(cfg.validate().is_err());
        }
    }

    #[test]
    fn recorded_loss_matches_values() {
        let probs = vec![
            vec![0.2, 0.3, 0.1, 0.4],
            vec![0.1, 0.6, 0.2, 0.1],
            vec![0.5, 0.2, 0.2, 0.1],
        ];
        let gold = [1, 0];
        let cfg = LossConfig::default();
        let b = total_loss(&gold, &probs, &table(), &cfg).unwrap();
        let mut tape: Tape<f64> = Tape::new(&[]);
        let vars: Vec<Var> = probs.iter().map(|p| tape.vector(p.clone())).collect();
        let lv = record_loss(&mut tape, &vars, &gold, &b, &table(), &cfg).unwrap();
        assert_eq!(tape.scalar(lv.bipartite), b.bipartite);
        assert!((tape.scalar(lv.ot.unwrap()) - b.ot).abs() < 1e-12);
        assert!((tape.scalar(lv.total) - b.total).abs() < 1e-12);
    }
}
