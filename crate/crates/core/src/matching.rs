//! Minimum-cost assignment of K pseudo-masks (rows) to N predictions (columns), K ≤ N.
//!
//! Both solvers break ties the same way: among all optimal assignments they
//! return the one whose column sequence (in row order) is lexicographically
//! smallest. Totals are always summed in row order, so two solvers that pick
//! the same pairs report bit-identical totals.

use std::collections::BTreeSet;

use crate::losses::{pair_cost_value, sigmoid, LossWeights, LOG_EPS};
use crate::{Error, Result};

/// Largest N accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX_N: usize = 8;

/// Row-major `K × N` costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if costs.len() != rows * cols {
            return Err(Error::Input(format!(
                "{} costs cannot fill a {rows}x{cols} matrix",
                costs.len()
            )));
        }
        if rows > cols {
            return Err(Error::Input(format!(
                "{rows} pseudo-masks cannot be matched to {cols} predictions"
            )));
        }
        if let Some(v) = costs.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite cost {v}")));
        }
        Ok(Self { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged cost rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }

    /// Sum of the chosen entries in row order.
    pub fn total(&self, cols_by_row: &[usize]) -> f64 {
        cols_by_row
            .iter()
            .enumerate()
            .fold(0.0, |acc, (r, &c)| acc + self.get(r, c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(pseudo_index, pred_index)` sorted by pseudo index, covering `0..K`.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_preds: BTreeSet<usize>,
}

impl Assignment {
    /// Validates `pairs` as an injective map from `0..K` into `0..n_preds`.
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>, n_preds: usize, total_cost: f64) -> Result<Self> {
        pairs.sort_unstable();
        let mut used = BTreeSet::new();
        for (i, &(r, c)) in pairs.iter().enumerate() {
            if r != i || c >= n_preds || !used.insert(c) {
                return Err(Error::Input(format!(
                    "pairs {pairs:?} are not an injective assignment into {n_preds} predictions"
                )));
            }
        }
        let unmatched_preds = (0..n_preds).filter(|c| !used.contains(c)).collect();
        Ok(Self {
            pairs,
            total_cost,
            unmatched_preds,
        })
    }

    fn from_cols(cols_by_row: &[usize], costs: &CostMatrix) -> Self {
        let pairs = cols_by_row.iter().copied().enumerate().collect();
        Self::from_pairs(pairs, costs.cols, costs.total(cols_by_row))
            .expect("solver produced an injective assignment")
    }
}

/// Mask-loss cost of matching one prediction (logits) to one binary pseudo-segment.
pub fn pair_cost(pred_logits: &[f64], pseudo_binary: &[f64], weights: &LossWeights) -> Result<f64> {
    pair_cost_value(pred_logits, pseudo_binary, weights)
}

/// Costs of every (pseudo-segment, prediction) pair: `targets` is `K` binary
/// rows and `logits` is `N` rows, all of one length.
pub fn cost_matrix(targets: &[Vec<f64>], logits: &[Vec<f64>], weights: &LossWeights) -> Result<CostMatrix> {
    let mut costs = Vec::with_capacity(targets.len() * logits.len());
    for t in targets {
        for l in logits {
            costs.push(pair_cost(l, t, weights)?);
        }
    }
    CostMatrix::new(targets.len(), logits.len(), costs)
}

/// Same costs as [`cost_matrix`] for segments given as a label map
/// (`labels[px] = k`), computed in `O(N·P)` by accumulating per-segment sums
/// instead of evaluating every pair from scratch.
pub fn cost_matrix_from_labels(
    labels: &[u8],
    k: usize,
    logits: &[Vec<f64>],
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let p = labels.len();
    if p == 0 || logits.iter().any(|l| l.len() != p) {
        return Err(Error::Input("logit rows and label map differ in size".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
        return Err(Error::Input(format!("label {bad} outside {k} segments")));
    }
    let (a_pos, a_neg) = match weights.focal_alpha {
        Some(a) => (a, 1.0 - a),
        None => (1.0, 1.0),
    };
    let g = weights.focal_gamma;
    let n = logits.len();
    let mut seg_size = vec![0.0f64; k];
    for &l in labels {
        seg_size[l as usize] += 1.0;
    }
    // inter[k][n] = Σ_{px∈k} p, delta[k][n] = Σ_{px∈k} (pos − neg)
    let mut inter = vec![0.0f64; k * n];
    let mut delta = vec![0.0f64; k * n];
    let mut sum_p = vec![0.0f64; n];
    let mut sum_neg = vec![0.0f64; n];
    for (j, row) in logits.iter().enumerate() {
        for (px, &x) in row.iter().enumerate() {
            let pr = sigmoid(x);
            let q = sigmoid(-x);
            let pos = a_pos * q.powf(g) * -pr.max(LOG_EPS).ln();
            let neg = a_neg * pr.powf(g) * -q.max(LOG_EPS).ln();
            let seg = labels[px] as usize;
            inter[seg * n + j] += pr;
            delta[seg * n + j] += pos - neg;
            sum_p[j] += pr;
            sum_neg[j] += neg;
        }
    }
    let s = weights.dice_smooth;
    let mut costs = Vec::with_capacity(k * n);
    for seg in 0..k {
        for j in 0..n {
            let dice = 1.0 - (2.0 * inter[seg * n + j] + s) / (sum_p[j] + seg_size[seg] + s);
            let focal = (sum_neg[j] + delta[seg * n + j]) / p as f64;
            costs.push(weights.lambda_dice * dice + weights.lambda_focal * focal);
        }
    }
    CostMatrix::new(k, n, costs)
}

fn tie_eps(opt: f64) -> f64 {
    1e-9 * (1.0 + opt.abs())
}

/// Shortest-augmenting-path solver on the sub-matrix `rows × cols`
/// (`rows.len() ≤ cols.len()`). Returns the optimal value and, per row, the
/// position in `cols` it is assigned to.
fn solve(costs: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<usize>) {
    let n = rows.len();
    let m = cols.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let c = |i: usize, j: usize| costs.get(rows[i - 1], cols[j - 1]);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = c(i0, j) - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut assign = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign
        .iter()
        .enumerate()
        .fold(0.0, |acc, (i, &j)| acc + costs.get(rows[i], cols[j]));
    (total, assign)
}

/// Optimal assignment with the lexicographic tie-break.
pub fn hungarian(costs: &CostMatrix) -> Result<Assignment> {
    let k = costs.rows;
    let all_rows: Vec<usize> = (0..k).collect();
    let all_cols: Vec<usize> = (0..costs.cols).collect();
    let (opt, _) = solve(costs, &all_rows, &all_cols);
    let bound = opt + tie_eps(opt);

    // Fix rows one at a time to the smallest column that still admits an
    // optimal completion.
    let mut chosen = Vec::with_capacity(k);
    let mut free = all_cols;
    let mut prefix = 0.0;
    for r in 0..k {
        let rest_rows = &all_rows[r + 1..];
        let mut picked = None;
        for (pos, &c) in free.iter().enumerate() {
            let mut rest_cols = free.clone();
            rest_cols.remove(pos);
            let (sub, _) = solve(costs, rest_rows, &rest_cols);
            if prefix + costs.get(r, c) + sub <= bound {
                picked = Some(pos);
                break;
            }
        }
        let pos = picked.expect("an optimal completion always exists");
        let c = free.remove(pos);
        prefix += costs.get(r, c);
        chosen.push(c);
    }
    Ok(Assignment::from_cols(&chosen, costs))
}

/// Exhaustive search over all injective assignments; test oracle for [`hungarian`].
pub fn brute_force_match(costs: &CostMatrix) -> Result<Assignment> {
    if costs.cols > BRUTE_FORCE_MAX_N {
        return Err(Error::Input(format!(
            "brute force refuses N = {} > {BRUTE_FORCE_MAX_N}",
            costs.cols
        )));
    }
    // Enumeration visits column sequences in lexicographic order.
    fn visit(costs: &CostMatrix, cur: &mut Vec<usize>, used: &mut [bool], f: &mut dyn FnMut(&[usize])) {
        if cur.len() == costs.rows {
            f(cur);
            return;
        }
        for c in 0..costs.cols {
            if !used[c] {
                used[c] = true;
                cur.push(c);
                visit(costs, cur, used, f);
                cur.pop();
                used[c] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    visit(costs, &mut Vec::new(), &mut vec![false; costs.cols], &mut |cols| {
        best = best.min(costs.total(cols));
    });
    let bound = best + tie_eps(best);
    let mut first: Option<Vec<usize>> = None;
    visit(costs, &mut Vec::new(), &mut vec![false; costs.cols], &mut |cols| {
        if first.is_none() && costs.total(cols) <= bound {
            first = Some(cols.to_vec());
        }
    });
    let cols = first.expect("at least one assignment exists");
    Ok(Assignment::from_cols(&cols, costs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_example() {
        let c = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        for a in [hungarian(&c).unwrap(), brute_force_match(&c).unwrap()] {
            assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
            assert_eq!(a.total_cost, 4.0);
            assert!(a.unmatched_preds.is_empty());
        }
    }

    #[test]
    fn all_zero_prefers_identity() {
        let c = CostMatrix::new(3, 5, vec![0.0; 15]).unwrap();
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(a.unmatched_preds, BTreeSet::from([3, 4]));
    }

    #[test]
    fn single_row_takes_first_argmin() {
        let c = CostMatrix::from_rows(&[vec![3.0, 1.0, 5.0, 1.0]]).unwrap();
        assert_eq!(hungarian(&c).unwrap().pairs, vec![(0, 1)]);
        let c = CostMatrix::from_rows(&[vec![2.0]]).unwrap();
        assert_eq!(brute_force_match(&c).unwrap().pairs, vec![(0, 0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CostMatrix::new(3, 2, vec![0.0; 6]).is_err());
        assert!(CostMatrix::new(1, 2, vec![0.0, f64::NAN]).is_err());
        assert!(brute_force_match(&CostMatrix::new(1, 9, vec![0.0; 9]).unwrap()).is_err());
        assert!(Assignment::from_pairs(vec![(0, 1), (1, 1)], 3, 0.0).is_err());
    }

    #[test]
    fn pair_cost_limits_and_closed_form() {
        let w = LossWeights::default();
        let t = [1.0, 1.0, 0.0, 0.0];
        let perfect = pair_cost(&[50.0, 50.0, -50.0, -50.0], &t, &w).unwrap();
        assert!(perfect < 1e-12);
        // logit 0: p = 1/2 everywhere.
        let dice = 1.0 - (2.0 * 1.0 + 1.0) / (2.0 + 2.0 + 1.0);
        let focal = (2.0 * 0.25 * 0.25 * 2f64.ln() + 2.0 * 0.75 * 0.25 * 2f64.ln()) / 4.0;
        let v = pair_cost(&[0.0; 4], &t, &w).unwrap();
        assert!((v - (dice + 20.0 * focal)).abs() < 1e-12);
        assert!(pair_cost(&[0.0; 3], &t, &w).is_err());
    }

    #[test]
    fn label_costs_match_pairwise_costs() {
        let w = LossWeights::default();
        let labels: Vec<u8> = (0..12).map(|i| (i * 7 % 3) as u8).collect();
        let logits: Vec<Vec<f64>> = (0..4)
            .map(|j| (0..12).map(|i| ((i * 3 + j * 5) as f64 * 0.7).sin() * 4.0).collect())
            .collect();
        let targets: Vec<Vec<f64>> = (0..3u8)
            .map(|k| labels.iter().map(|&l| if l == k { 1.0 } else { 0.0 }).collect())
            .collect();
        let fast = cost_matrix_from_labels(&labels, 3, &logits, &w).unwrap();
        let slow = cost_matrix(&targets, &logits, &w).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert!((fast.get(r, c) - slow.get(r, c)).abs() < 1e-12 * (1.0 + slow.get(r, c)));
            }
        }
    }

    fn matrix(k: usize, n: usize, vals: &[f64]) -> CostMatrix {
        CostMatrix::new(k, n, vals[..k * n].to_vec()).unwrap()
    }

    proptest! {
        #[test]
        fn agrees_with_brute_force(k in 1usize..6, extra in 0usize..3, vals in proptest::collection::vec(0u8..4, 49)) {
            let n = k + extra;
            let vals: Vec<f64> = vals.iter().map(|&v| v as f64).collect();
            let c = matrix(k, n, &vals);
            let h = hungarian(&c).unwrap();
            let b = brute_force_match(&c).unwrap();
            prop_assert_eq!(h.total_cost.to_bits(), b.total_cost.to_bits());
            prop_assert_eq!(&h.pairs, &b.pairs);
        }

        #[test]
        fn row_shift_and_scale(k in 1usize..5, extra in 0usize..3, vals in proptest::collection::vec(0.0f64..10.0, 49), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            let n = k + extra;
            let c = matrix(k, n, &vals);
            let base = hungarian(&c).unwrap();
            let mut shifted = vals[..k * n].to_vec();
            for v in &mut shifted[..n] {
                *v += shift;
            }
            let s = hungarian(&CostMatrix::new(k, n, shifted).unwrap()).unwrap();
            prop_assert_eq!(&s.pairs, &base.pairs);
            prop_assert!((s.total_cost - base.total_cost - shift).abs() < 1e-9);
            let scaled: Vec<f64> = vals[..k * n].iter().map(|v| v * scale).collect();
            let s = hungarian(&CostMatrix::new(k, n, scaled).unwrap()).unwrap();
            prop_assert_eq!(&s.pairs, &base.pairs);
        }
    }
}
