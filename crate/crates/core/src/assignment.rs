//! Optimal matching of gold labels to prediction slots.
//!
//! The cost of pairing gold label `y_j` with slot `i` is `-p_i(y_j)`. Gold
//! labels are matched with the Hungarian method either against every slot
//! or only against the first `n` slots; whatever slots remain get the null
//! target.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Rows are gold labels, columns are candidate slots.
pub type MatchCostMatrix<T> = Tensor<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    /// Match against all `N` generated distributions.
    All,
    /// Match against the first `n` generated distributions only.
    FirstN,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Scheme::All),
            "first-n" | "first_n" => Ok(Scheme::FirstN),
            other => Err(Error::InvalidConfig(format!(
                "unknown scheme `{other}` (expected all or first-n)"
            ))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::All => "all",
            Scheme::FirstN => "first-n",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotTarget {
    Label(usize),
    Null,
}

/// Slot-to-target mapping covering every prediction slot exactly once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FullAssignment {
    pub targets: Vec<SlotTarget>,
    /// `slot_of[j]` is the slot that gold label `j` (in input order) landed in.
    pub slot_of: Vec<usize>,
}

impl FullAssignment {
    pub fn all_null(slots: usize) -> Self {
        FullAssignment {
            targets: vec![SlotTarget::Null; slots],
            slot_of: Vec::new(),
        }
    }

    pub fn null_count(&self) -> usize {
        self.targets
            .iter()
            .filter(|t| **t == SlotTarget::Null)
            .count()
    }

    /// Sum of `-p_i(target_i)` over label slots.
    pub fn matched_cost<T: Scalar>(&self, probs: &[Vec<T>]) -> T {
        self.targets
            .iter()
            .zip(probs)
            .filter_map(|(t, p)| match t {
                SlotTarget::Label(y) => Some(-p[*y]),
                SlotTarget::Null => None,
            })
            .fold(T::zero(), |a, b| a + b)
    }
}

/// Row-to-column injection of minimum total cost.
#[derive(Clone, Debug, PartialEq)]
pub struct Matching<T> {
    pub row_to_col: Vec<usize>,
    pub cost: T,
}

pub fn match_cost<T: Scalar>(
    gold: &[usize],
    probs: &[Vec<T>],
    slots: Range<usize>,
) -> Result<MatchCostMatrix<T>> {
    if slots.is_empty() {
        return Err(Error::InvalidConfig("empty slot range".into()));
    }
    if slots.end > probs.len() {
        return Err(Error::Shape(format!(
            "slot range {slots:?} exceeds {} predictions",
            probs.len()
        )));
    }
    let cols = slots.len();
    let mut data = Vec::with_capacity(gold.len() * cols);
    for &y in gold {
        for p in &probs[slots.clone()] {
            data.push(-p[y]);
        }
    }
    Tensor::from_vec(&[gold.len(), cols], data)
}

/// Potential-based Hungarian method for `rows <= cols`. Returns the
/// assignment and the row and column duals, which satisfy
/// `u_i + v_j <= c_ij` with `v_j <= 0`.
fn solve_dual<T: Scalar>(cost: &[T], rows: usize, cols: usize) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let inf = T::infinity();
    let a = |i: usize, j: usize| cost[(i - 1) * cols + (j - 1)];
    let mut u = vec![T::zero(); rows + 1];
    let mut v = vec![T::zero(); cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

fn submatrix<T: Scalar>(c: &Tensor<T>, rows: Range<usize>, cols: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for r in rows {
        let row = c.row(r);
        out.extend(cols.iter().map(|&j| row[j]));
    }
    out
}

fn assignment_cost<T: Scalar>(c: &Tensor<T>, row_to_col: &[usize]) -> T {
    row_to_col
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (r, &col)| acc + c.row(r)[col])
}

/// Minimum-cost injection of rows into columns.
///
/// Among optimal injections the one whose column vector is lexicographically
/// smallest is returned. Alternatives are only explored along edges that are
/// tight under the optimal duals, so tie-free inputs cost a single solve.
pub fn hungarian<T: Scalar>(c: &MatchCostMatrix<T>) -> Result<Matching<T>> {
    let (rows, cols) = if c.dims.len() == 2 {
        (c.dims[0], c.dims[1])
    } else {
        (1, c.cols())
    };
    if rows > cols {
        return Err(Error::Shape(format!(
            "hungarian needs rows <= cols, got {rows}x{cols}"
        )));
    }
    if !c.is_finite() {
        return Err(Error::NonFinite("match cost matrix".into()));
    }
    if rows == 0 {
        return Ok(Matching {
            row_to_col: Vec::new(),
            cost: T::zero(),
        });
    }
    let (mut assign, u, v) = solve_dual(&c.data, rows, cols);
    let opt = assignment_cost(c, &assign);
    let scale = c.data.iter().fold(T::one(), |m, &x| m.max(x.abs()));
    let tol = T::epsilon() * T::lit(64.0 * (rows + 1) as f64) * scale;

    let mut used = vec![false; cols];
    let mut fixed_cost = T::zero();
    for r in 0..rows {
        let current = assign[r];
        for cand in 0..current {
            if used[cand] || c.row(r)[cand] - u[r] - v[cand] > tol {
                continue;
            }
            let free: Vec<usize> = (0..cols).filter(|&j| !used[j] && j != cand).collect();
            let sub = submatrix(c, r + 1..rows, &free);
            let (sub_assign, _, _) = solve_dual(&sub, rows - r - 1, free.len());
            let sub_cost = sub_assign
                .iter()
                .enumerate()
                .fold(T::zero(), |acc, (i, &j)| acc + sub[i * free.len() + j]);
            if fixed_cost + c.row(r)[cand] + sub_cost <= opt + tol {
                assign[r] = cand;
                for (i, &j) in sub_assign.iter().enumerate() {
                    assign[r + 1 + i] = free[j];
                }
                break;
            }
        }
        used[assign[r]] = true;
        fixed_cost += c.row(r)[assign[r]];
    }
    let cost = assignment_cost(c, &assign);
    Ok(Matching {
        row_to_col: assign,
        cost,
    })
}

fn truncate_gold(gold: &[usize], slots: usize) -> &[usize] {
    if gold.len() > slots {
        log::warn!(
            "{} gold labels exceed {} prediction slots; keeping the first {}",
            gold.len(),
            slots,
            slots
        );
        &gold[..slots]
    } else {
        gold
    }
}

fn fill(slots: usize, gold: &[usize], matching: &Matching<impl Scalar>) -> FullAssignment {
    let mut targets = vec![SlotTarget::Null; slots];
    for (j, &slot) in matching.row_to_col.iter().enumerate() {
        targets[slot] = SlotTarget::Label(gold[j]);
    }
    FullAssignment {
        targets,
        slot_of: matching.row_to_col.clone(),
    }
}

/// Matches gold labels against all `N` slots; unmatched slots get null.
pub fn assign_all<T: Scalar>(gold: &[usize], probs: &[Vec<T>]) -> Result<FullAssignment> {
    let slots = probs.len();
    let gold = truncate_gold(gold, slots);
    if gold.is_empty() {
        return Ok(FullAssignment::all_null(slots));
    }
    let c = match_cost(gold, probs, 0..slots)?;
    let m = hungarian(&c)?;
    Ok(fill(slots, gold, &m))
}

/// Matches gold labels against the first `n` slots; slots `n..N` get null.
pub fn assign_first_n<T: Scalar>(gold: &[usize], probs: &[Vec<T>]) -> Result<FullAssignment> {
    let slots = probs.len();
    let gold = truncate_gold(gold, slots);
    if gold.is_empty() {
        return Ok(FullAssignment::all_null(slots));
    }
    let c = match_cost(gold, probs, 0..gold.len())?;
    let m = hungarian(&c)?;
    Ok(fill(slots, gold, &m))
}

pub fn assign<T: Scalar>(
    scheme: Scheme,
    gold: &[usize],
    probs: &[Vec<T>],
) -> Result<FullAssignment> {
    match scheme {
        Scheme::All => assign_all(gold, probs),
        Scheme::FirstN => assign_first_n(gold, probs),
    }
}

/// Outcome of the label-size distribution statistic.
#[derive(Clone, Debug, PartialEq)]
pub struct SchemeAdvice {
    pub scheme: Scheme,
    pub mean_label_size: f64,
    /// Fraction of samples whose label size is at most the mean.
    pub le_mean: f64,
    /// Fraction of samples whose label size exceeds the mean.
    pub gt_mean: f64,
}

/// Suggests `first-n` when fewer than half of the samples have a label size
/// at or below the mean, `all` otherwise.
pub fn recommend_scheme(label_sizes: &[usize]) -> Result<SchemeAdvice> {
    if label_sizes.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot recommend a scheme for an empty corpus".into(),
        ));
    }
    let n = label_sizes.len() as f64;
    let mean = label_sizes.iter().sum::<usize>() as f64 / n;
    let le = label_sizes.iter().filter(|&&s| s as f64 <= mean).count() as f64 / n;
    let scheme = if le < 0.5 {
        Scheme::FirstN
    } else {
        Scheme::All
    };
    Ok(SchemeAdvice {
        scheme,
        mean_label_size: mean,
        le_mean: le,
        gt_mean: 1.0 - le,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::from_vec(&[r, c], rows.concat()).unwrap()
    }

    #[test]
    fn zero_diagonal() {
        let res = hungarian(&m(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_eq!(res.row_to_col, vec![0, 1]);
        assert_eq!(res.cost, 0.0);
    }

    #[test]
    fn three_by_three() {
        let res = hungarian(&m(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0], &[3.0, 2.0, 2.0]])).unwrap();
        assert_eq!(res.row_to_col, vec![1, 0, 2]);
        assert_eq!(res.cost, 5.0);
    }

    #[test]
    fn rectangular() {
        let res = hungarian(&m(&[&[1.0, 2.0, 0.0], &[0.0, 3.0, 1.0]])).unwrap();
        assert_eq!(res.row_to_col, vec![2, 0]);
        assert_eq!(res.cost, 0.0);
    }

    #[test]
    fn more_rows_than_cols_is_an_error() {
        assert!(hungarian(&m(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let res = hungarian(&m(&[&[1.0, 1.0, 1.0], &[1.0, 1.0, 1.0]])).unwrap();
        assert_eq!(res.row_to_col, vec![0, 1]);
        let res = hungarian(&m(&[&[0.0, 0.0, 5.0], &[5.0, 0.0, 0.0]])).unwrap();
        assert_eq!(res.row_to_col, vec![0, 1]);
    }

    #[test]
    fn match_cost_shapes() {
        let uniform = vec![vec![0.25; 4]; 3];
        let c = match_cost(&[0, 2], &uniform, 0..3).unwrap();
        assert_eq!(c.dims, vec![2, 3]);
        assert!(c.data.iter().all(|&x| x == -0.25));
        assert!(match_cost(&[0], &uniform, 1..1).is_err());
    }

    #[test]
    fn assign_all_picks_confident_slot() {
        let probs = vec![vec![0.1, 0.9], vec![0.1, 0.9], vec![0.9, 0.1]];
        let a = assign_all(&[0], &probs).unwrap();
        assert_eq!(
            a.targets,
            vec![SlotTarget::Null, SlotTarget::Null, SlotTarget::Label(0)]
        );
    }

    #[test]
    fn empty_gold_is_all_null() {
        let probs = vec![vec![0.5, 0.5]; 3];
        assert_eq!(
            assign_all(&[], &probs).unwrap(),
            FullAssignment::all_null(3)
        );
        assert_eq!(
            assign_first_n(&[], &probs).unwrap(),
            FullAssignment::all_null(3)
        );
    }

    #[test]
    fn first_n_ignores_later_slots() {
        let probs = vec![
            vec![0.3, 0.3, 0.4],
            vec![0.3, 0.3, 0.4],
            vec![0.9, 0.05, 0.05],
            vec![0.1, 0.1, 0.8],
        ];
        let a = assign_first_n(&[0, 1], &probs).unwrap();
        assert_eq!(a.targets[2], SlotTarget::Null);
        assert_eq!(a.targets[3], SlotTarget::Null);
        let a = assign_first_n(&[1], &probs).unwrap();
        assert_eq!(a.targets[0], SlotTarget::Label(1));
    }

    #[test]
    fn too_many_gold_labels_are_truncated() {
        let probs = vec![vec![0.5, 0.3, 0.2]; 2];
        let a = assign_all(&[0, 1, 2], &probs).unwrap();
        assert_eq!(a.null_count(), 0);
        assert_eq!(a.slot_of.len(), 2);
    }

    #[test]
    fn scheme_rule() {
        assert_eq!(recommend_scheme(&[4, 4, 4]).unwrap().scheme, Scheme::All);
        let a = recommend_scheme(&[1, 1, 10]).unwrap();
        assert_eq!(a.scheme, Scheme::All);
        assert!((a.le_mean - 2.0 / 3.0).abs() < 1e-12);
        let b = recommend_scheme(&[3, 5, 5, 5]).unwrap();
        assert_eq!(b.scheme, Scheme::FirstN);
        assert_eq!(b.le_mean, 0.25);
        assert!(recommend_scheme(&[]).is_err());
    }
}
