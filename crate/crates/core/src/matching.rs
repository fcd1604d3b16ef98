//! Prediction-to-ground-truth matching cost and minimum-cost assignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{giou, BBox};
use crate::heads::BoxPrediction;

/// Two assignments whose totals differ by less than this count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            class: 1.0,
            l1: 5.0,
            giou: 2.0,
            no_object: 0.1,
        }
    }
}

/// Dense `[predictions × ground truths]` cost, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim("cost_matrix", &[rows, cols], &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite matching cost".into()));
        }
        Ok(CostMatrix { rows, cols, data })
    }

    pub fn at(&self, pred: usize, gt: usize) -> f64 {
        self.data[pred * self.cols + gt]
    }
}

/// `pred_for_gt[j]` is the prediction matched to ground truth `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pred_for_gt: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Ground-truth index per prediction, `None` when unmatched.
    pub fn gt_for_pred(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for (j, &i) in self.pred_for_gt.iter().enumerate() {
            out[i] = Some(j);
        }
        out
    }
}

pub fn build_cost_matrix(preds: &[BoxPrediction], gts: &[BBox], w: &LossWeights) -> Result<CostMatrix> {
    let mut data = Vec::with_capacity(preds.len() * gts.len());
    for p in preds {
        let prob = p.moving_prob();
        for gt in gts {
            data.push(-w.class * prob + w.l1 * p.bbox.l1(gt) + w.giou * (1.0 - giou(&p.bbox, gt)));
        }
    }
    CostMatrix::new(preds.len(), gts.len(), data)
}

/// Minimum-cost assignment of `rows` (ground truths) into `cols` (predictions)
/// by successive shortest augmenting paths; `rows ≤ cols`. `cost(r, c)`.
fn solve(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // potentials u (rows), v (cols); 1-based with a virtual column 0
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        owner[0] = r;
        let mut c0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[c0] = true;
            let r0 = owner[c0];
            let mut delta = f64::INFINITY;
            let mut c1 = 0;
            for c in 1..=cols {
                if used[c] {
                    continue;
                }
                let cur = cost(r0 - 1, c - 1) - u[r0] - v[c];
                if cur < minv[c] {
                    minv[c] = cur;
                    way[c] = c0;
                }
                if minv[c] < delta {
                    delta = minv[c];
                    c1 = c;
                }
            }
            for c in 0..=cols {
                if used[c] {
                    u[owner[c]] += delta;
                    v[c] -= delta;
                } else {
                    minv[c] -= delta;
                }
            }
            c0 = c1;
            if owner[c0] == 0 {
                break;
            }
        }
        loop {
            let c1 = way[c0];
            owner[c0] = owner[c1];
            c0 = c1;
            if c0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; rows];
    for c in 1..=cols {
        if owner[c] != 0 {
            out[owner[c] - 1] = c - 1;
        }
    }
    out
}

fn total(cost: &CostMatrix, pred_for_gt: &[usize]) -> f64 {
    pred_for_gt.iter().enumerate().map(|(j, &i)| cost.at(i, j)).sum()
}

/// Minimum-cost injective map from ground truths to predictions; among
/// optimal assignments the lexicographically smallest `pred_for_gt` wins.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n_pred, n_gt) = (cost.rows, cost.cols);
    if n_gt > n_pred {
        return Err(Error::Contract(format!(
            "{n_gt} ground truths cannot be matched to {n_pred} predictions"
        )));
    }
    if n_gt == 0 {
        return Ok(Assignment {
            pred_for_gt: Vec::new(),
            cost: 0.0,
        });
    }
    let mut best = solve(n_gt, n_pred, |j, i| cost.at(i, j));
    let optimum = total(cost, &best);

    // fix ground truths in order to the smallest prediction that keeps the optimum
    let mut fixed: Vec<usize> = Vec::with_capacity(n_gt);
    for j in 0..n_gt {
        let mut chosen = best[j];
        for i in 0..best[j] {
            if fixed.contains(&i) {
                continue;
            }
            let mut trial = fixed.clone();
            trial.push(i);
            let rest = complete(cost, &trial);
            let mut cand = trial;
            cand.extend(rest);
            if total(cost, &cand) <= optimum + TIE_TOLERANCE {
                chosen = i;
                best = cand;
                break;
            }
        }
        fixed.push(chosen);
    }
    let cost_total = total(cost, &best);
    Ok(Assignment {
        pred_for_gt: best,
        cost: cost_total,
    })
}

/// Optimal predictions for ground truths `prefix.len()..` given the prefix.
fn complete(cost: &CostMatrix, prefix: &[usize]) -> Vec<usize> {
    let start = prefix.len();
    let free: Vec<usize> = (0..cost.rows).filter(|i| !prefix.contains(i)).collect();
    let rows = cost.cols - start;
    if rows == 0 {
        return Vec::new();
    }
    solve(rows, free.len(), |j, c| cost.at(free[c], start + j))
        .into_iter()
        .map(|c| free[c])
        .collect()
}
