//! Semantic optimal transport between predictions and gold labels.
//!
//! Each prediction `p_i` is embedded as the probability-weighted mean label
//! embedding `E^T p_i`; the ground cost to gold label `y_j` is the cosine
//! distance to `E[y_j]`. The transport problem is solved with the inexact
//! proximal point method (IPOT), which converges to the unregularised
//! optimum rather than an entropic approximation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::cosine_distance;
use crate::tensor::Tensor;

pub const COS_EPS: f64 = 1e-12;

/// Rows are predictions, columns are non-null gold labels.
pub type OtCostMatrix<T> = Tensor<T>;

#[derive(Clone, Debug, PartialEq)]
pub struct IpotParams<T> {
    /// Proximal step size.
    pub beta: T,
    pub outer_iters: usize,
    pub inner_iters: usize,
    /// Marginal violation required for early exit.
    pub tol: T,
    /// Largest plan change between outer steps required for early exit;
    /// the default never drops below a few ulps of the scalar type.
    pub plan_tol: T,
}

impl<T: Scalar> Default for IpotParams<T> {
    fn default() -> Self {
        IpotParams {
            beta: T::lit(0.5),
            outer_iters: 50,
            inner_iters: 1,
            tol: T::lit(1e-4),
            plan_tol: T::lit(1e-9).max(T::epsilon() * T::lit(16.0)),
        }
    }
}

impl<T: Scalar> IpotParams<T> {
    /// Enough outer steps to land within about 1e-4 of the exact optimum on
    /// small dense problems; the defaults trade that for speed in training.
    pub fn tight() -> Self {
        IpotParams {
            outer_iters: 2000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > T::zero()) || self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidConfig(
                "IPOT needs beta > 0 and at least one outer and inner iteration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan<T> {
    /// `rows x cols`, row-major.
    pub gamma: Tensor<T>,
    pub mu: Vec<T>,
    pub nu: Vec<T>,
}

impl<T: Scalar> TransportPlan<T> {
    /// Largest absolute deviation of the plan's marginals from `mu`, `nu`.
    pub fn marginal_violation(&self) -> T {
        marginal_violation(&self.gamma.data, &self.mu, &self.nu)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IpotResult<T> {
    pub plan: TransportPlan<T>,
    pub distance: T,
    pub iterations: usize,
    /// `<C, Gamma>` after each outer iteration.
    pub history: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OtResult<T> {
    pub distance: T,
    pub cost: Option<OtCostMatrix<T>>,
    pub plan: Option<TransportPlan<T>>,
    /// Set when the sample has no gold labels and the term was skipped.
    pub skipped: bool,
}

fn marginal_violation<T: Scalar>(gamma: &[T], mu: &[T], nu: &[T]) -> T {
    let m = nu.len();
    let mut worst = T::zero();
    for (i, &mi) in mu.iter().enumerate() {
        let s: T = gamma[i * m..(i + 1) * m].iter().copied().sum();
        worst = worst.max((s - mi).abs());
    }
    for (j, &nj) in nu.iter().enumerate() {
        let s: T = (0..mu.len()).map(|i| gamma[i * m + j]).sum();
        worst = worst.max((s - nj).abs());
    }
    worst
}

/// `E^T p`, using the first `p.len()` rows of `table`.
pub fn expected_embedding<T: Scalar>(p: &[T], table: &Tensor<T>) -> Vec<T> {
    let d = table.cols();
    let mut out = vec![T::zero(); d];
    for (k, &pk) in p.iter().enumerate() {
        for (o, &e) in out.iter_mut().zip(table.row(k)) {
            *o += pk * e;
        }
    }
    out
}

/// Cosine-distance ground cost between each prediction and each gold label.
pub fn cosine_cost<T: Scalar>(
    probs: &[Vec<T>],
    gold: &[usize],
    table: &Tensor<T>,
) -> Result<OtCostMatrix<T>> {
    if gold.is_empty() {
        return Err(Error::InvalidConfig(
            "cosine cost needs at least one gold label".into(),
        ));
    }
    let eps = T::lit(COS_EPS);
    for &y in gold {
        if table.row(y).iter().all(|&x| x == T::zero()) {
            return Err(Error::Numeric(format!(
                "label {y} has an all-zero embedding"
            )));
        }
    }
    let mut data = Vec::with_capacity(probs.len() * gold.len());
    for p in probs {
        let u = expected_embedding(p, table);
        for &y in gold {
            data.push(cosine_distance(&u, table.row(y), eps));
        }
    }
    Tensor::from_vec(&[probs.len(), gold.len()], data)
}

/// Inexact proximal point iterations for `min <C, Gamma>` over plans with
/// marginals `mu` and `nu`.
pub fn ipot<T: Scalar>(
    cost: &OtCostMatrix<T>,
    mu: &[T],
    nu: &[T],
    params: &IpotParams<T>,
) -> Result<IpotResult<T>> {
    params.validate()?;
    let (n, m) = (mu.len(), nu.len());
    if cost.dims != [n, m] {
        return Err(Error::Shape(format!(
            "cost is {:?}, marginals are {n}x{m}",
            cost.dims
        )));
    }
    if mu.iter().chain(nu).any(|&x| !(x > T::zero())) {
        return Err(Error::InvalidConfig(
            "marginals must be strictly positive".into(),
        ));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("transport cost matrix".into()));
    }
    let kernel: Vec<T> = cost
        .data
        .iter()
        .map(|&c| (-c / params.beta).exp())
        .collect();
    let mut gamma: Vec<T> = (0..n * m).map(|k| mu[k / m] * nu[k % m]).collect();
    let mut b = vec![T::one() / T::lit(m as f64); m];
    let mut a = vec![T::one(); n];
    let mut q = vec![T::zero(); n * m];
    let mut history = Vec::with_capacity(params.outer_iters);
    let mut iterations = 0;
    for t in 0..params.outer_iters {
        iterations = t + 1;
        for k in 0..n * m {
            q[k] = kernel[k] * gamma[k];
        }
        for _ in 0..params.inner_iters {
            for i in 0..n {
                let qb: T = (0..m).map(|j| q[i * m + j] * b[j]).sum();
                a[i] = mu[i] / qb;
            }
            for j in 0..m {
                let qa: T = (0..n).map(|i| q[i * m + j] * a[i]).sum();
                b[j] = nu[j] / qa;
            }
        }
        let mut delta = T::zero();
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                let k = i * m + j;
                let g = ai * q[k] * bj;
                delta = delta.max((g - gamma[k]).abs());
                gamma[k] = g;
            }
        }
        if gamma.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!(
                "IPOT plan at iteration {iterations}"
            )));
        }
        history.push(frobenius(&cost.data, &gamma));
        if delta < params.plan_tol && marginal_violation(&gamma, mu, nu) < params.tol {
            break;
        }
    }
    let distance = frobenius(&cost.data, &gamma);
    Ok(IpotResult {
        plan: TransportPlan {
            gamma: Tensor::from_vec(&[n, m], gamma)?,
            mu: mu.to_vec(),
            nu: nu.to_vec(),
        },
        distance,
        iterations,
        history,
    })
}

fn frobenius<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Semantic OT distance with uniform weight over all `N` predictions and
/// over the `m` gold labels. Returns zero and sets `skipped` when `m = 0`.
pub fn ot_distance<T: Scalar>(
    probs: &[Vec<T>],
    gold: &[usize],
    table: &Tensor<T>,
    params: &IpotParams<T>,
) -> Result<OtResult<T>> {
    if gold.is_empty() {
        return Ok(OtResult {
            distance: T::zero(),
            cost: None,
            plan: None,
            skipped: true,
        });
    }
    let cost = cosine_cost(probs, gold, table)?;
    let mu = vec![T::one() / T::lit(probs.len() as f64); probs.len()];
    let nu = vec![T::one() / T::lit(gold.len() as f64); gold.len()];
    let res = ipot(&cost, &mu, &nu, params)?;
    Ok(OtResult {
        distance: res.distance,
        cost: Some(cost),
        plan: Some(res.plan),
        skipped: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, d.to_vec()).unwrap()
    }

    #[test]
    fn zero_cost_gives_zero_distance() {
        let c = t(&[2, 3], &[0.0; 6]);
        let r = ipot(&c, &[0.4, 0.6], &[0.2, 0.3, 0.5], &IpotParams::default()).unwrap();
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn identity_transport_for_off_diagonal_cost() {
        let c = t(&[3, 3], &[0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let u = [1.0 / 3.0; 3];
        let r = ipot(&c, &u, &u, &IpotParams::default()).unwrap();
        assert!(r.distance < 1e-3, "{}", r.distance);
        for i in 0..3 {
            assert!((r.plan.gamma.row(i)[i] - 1.0 / 3.0).abs() < 1e-3);
        }
    }

    #[test]
    fn single_source_plan_is_forced() {
        let c = t(&[1, 2], &[0.2, 0.4]);
        let r = ipot(&c, &[1.0], &[0.3, 0.7], &IpotParams::default()).unwrap();
        assert!((r.plan.gamma.data[0] - 0.3).abs() < 1e-9);
        assert!((r.plan.gamma.data[1] - 0.7).abs() < 1e-9);
        assert!((r.distance - 0.34).abs() < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_marginals() {
        let c = t(&[1, 2], &[0.2, 0.4]);
        assert!(ipot(&c, &[1.0], &[0.0, 1.0], &IpotParams::default()).is_err());
    }

    #[test]
    fn cosine_cost_extremes() {
        let table = t(&[4, 2], &[1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0]);
        let probs = vec![
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
        ];
        let c = cosine_cost(&probs, &[0], &table).unwrap();
        assert!(c.data[0].abs() < 1e-11);
        assert!((c.data[1] - 1.0).abs() < 1e-11);
        assert!((c.data[2] - 2.0).abs() < 1e-11);
        assert!(cosine_cost(&probs, &[3], &table).is_err());
    }

    #[test]
    fn null_concentrated_prediction_stays_finite() {
        let table = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let c = cosine_cost(&[vec![0.0, 0.0, 1.0]], &[0], &table).unwrap();
        assert!((c.data[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gold_is_skipped() {
        let table = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let r = ot_distance(&[vec![1.0, 0.0]], &[], &table, &IpotParams::default()).unwrap();
        assert!(r.skipped);
        assert_eq!(r.distance, 0.0);
    }

    #[test]
    fn one_hot_bijection_is_free() {
        let table = t(
            &[4, 3],
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        );
        let probs = vec![
            vec![0.0, 0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
        ];
        let r = ot_distance(&probs, &[0, 1, 2], &table, &IpotParams::default()).unwrap();
        assert!(r.distance <= 1e-6, "{}", r.distance);
    }
}
