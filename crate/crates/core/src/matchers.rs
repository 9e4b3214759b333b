//! Optimal assignment and the three matching problems: prediction ↔ ground
//! truth, adaptive student ↔ teacher matching, and the fixed-matching
//! constraint for the auxiliary group.
//!
//! Matching costs are computed from value snapshots only; assignments are
//! discrete decisions and carry no gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::box_loss;
use crate::losses::bce_soft_value;
use crate::nn::Prediction;
use crate::scenes::GroundTruth;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("cost matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
    #[error("cost matrix must have rows <= cols, got {rows}x{cols}")]
    TooManyRows { rows: usize, cols: usize },
    #[error("more ground truths ({gts}) than queries ({queries})")]
    TooManyGts { gts: usize, queries: usize },
    #[error("instability metric: mismatched ground-truth counts ({0} vs {1})")]
    GtCountMismatch(usize, usize),
    #[error("layer index {0} out of range ({1} layers)")]
    LayerOutOfRange(usize, usize),
}

/// Pairwise matching costs; rows are student predictions, columns are teacher
/// predictions or ground truths.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatchError> {
        assert_eq!(data.len(), rows * cols);
        if rows > cols {
            return Err(MatchError::TooManyRows { rows, cols });
        }
        for (k, &v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFinite(k / cols, k % cols));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// Injective row → column map with its total cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// Column assigned to each row.
    pub targets: Vec<usize>,
    pub total_cost: f64,
}

/// One assignment per decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerMatchings {
    pub per_layer: Vec<Assignment>,
}

/// Per-ground-truth assigned query index (for one decoder layer). Queries not
/// listed here implicitly predict "no object".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtAssignment {
    pub query_for_gt: Vec<usize>,
}

/// Padding constant for rectangular problems; exceeds any real cost at desk
/// scale.
const PAD_COST: f64 = 1e6;

/// Globally minimal-cost injective assignment of rows to columns.
/// Ties break toward the lexicographically smallest assignment.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchError> {
    if cost.rows == 0 {
        return Ok(Assignment { targets: vec![], total_cost: 0.0 });
    }
    let opt = padded_optimum(cost.rows, cost.cols, |r, c| cost.at(r, c));
    // Lexicographic refinement: fix each row to the smallest column that still
    // permits an optimal completion.
    let scale = 1.0 + opt.abs();
    let tol = 1e-9 * scale;
    let mut fixed_cols: Vec<usize> = Vec::with_capacity(cost.rows);
    let mut fixed_cost = 0.0;
    for row in 0..cost.rows {
        let mut chosen = None;
        for col in 0..cost.cols {
            if fixed_cols.contains(&col) {
                continue;
            }
            let remaining_cols: Vec<usize> =
                (0..cost.cols).filter(|c| !fixed_cols.contains(c) && *c != col).collect();
            let sub_rows = cost.rows - row - 1;
            let sub = if sub_rows == 0 {
                0.0
            } else {
                padded_optimum(sub_rows, remaining_cols.len(), |r, c| {
                    cost.at(row + 1 + r, remaining_cols[c])
                })
            };
            if fixed_cost + cost.at(row, col) + sub <= opt + tol {
                chosen = Some(col);
                break;
            }
        }
        let col = chosen.expect("an optimal completion always exists");
        fixed_cost += cost.at(row, col);
        fixed_cols.push(col);
    }
    let total_cost = fixed_cols.iter().enumerate().map(|(r, &c)| cost.at(r, c)).sum();
    Ok(Assignment { targets: fixed_cols, total_cost })
}

/// Optimal total cost of the rows×cols problem, padded to square with a large
/// constant; padded rows are discarded from the total.
fn padded_optimum(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> f64 {
    if rows == 0 {
        return 0.0;
    }
    let n = cols;
    let padded = |r: usize, c: usize| if r < rows { cost(r, c) } else { PAD_COST };
    let assignment = solve_square(n, padded);
    (0..rows).map(|r| cost(r, assignment[r])).sum()
}

/// Jonker-Volgenant style shortest augmenting path solver for the square
/// linear sum assignment problem. Returns the column assigned to each row.
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-indexed sentinel column 0, following the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // row assigned to each column (0 = none)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=n {
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
    let mut ans = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Hungarian matching of ground truths to queries for one decoder layer.
/// cost(gt j, query i) = −p_i[class_j] + box_loss(b_i, b_j).
pub fn gt_match(preds: &[Prediction], gts: &[GroundTruth]) -> Result<GtAssignment, MatchError> {
    if gts.len() > preds.len() {
        return Err(MatchError::TooManyGts { gts: gts.len(), queries: preds.len() });
    }
    if gts.is_empty() {
        return Ok(GtAssignment { query_for_gt: vec![] });
    }
    let mut data = Vec::with_capacity(gts.len() * preds.len());
    for gt in gts {
        for pred in preds {
            data.push(-pred.probs[gt.class_id] + box_loss(pred.bbox, gt.bbox));
        }
    }
    let cost = CostMatrix::new(gts.len(), preds.len(), data)?;
    let a = hungarian(&cost)?;
    Ok(GtAssignment { query_for_gt: a.targets })
}

/// Adaptive teacher-student matching: one Hungarian problem per decoder layer
/// with cost μ_cls·ℓ_bce(p^s, p^t) + ℓ_box(b^s, b^t).
pub fn adaptive_match(
    student_layers: &[Vec<Prediction>],
    teacher_layers: &[Vec<Prediction>],
    mu_cls: f64,
) -> Result<LayerMatchings, MatchError> {
    assert_eq!(student_layers.len(), teacher_layers.len(), "layer count mismatch");
    let mut per_layer = Vec::with_capacity(student_layers.len());
    for (students, teachers) in student_layers.iter().zip(teacher_layers) {
        if students.len() > teachers.len() {
            return Err(MatchError::TooManyRows { rows: students.len(), cols: teachers.len() });
        }
        let mut data = Vec::with_capacity(students.len() * teachers.len());
        for s in students {
            for t in teachers {
                data.push(mu_cls * bce_soft_value(&s.probs, &t.probs) + box_loss(s.bbox, t.bbox));
            }
        }
        let cost = CostMatrix::new(students.len(), teachers.len(), data)?;
        per_layer.push(hungarian(&cost)?);
    }
    Ok(LayerMatchings { per_layer })
}

/// Where the teacher's last-layer GT assignment overrides the aux group's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintMode {
    Off,
    #[default]
    LastLayer,
    AllLayers,
}

/// Replace auxiliary-group GT assignments with the teacher's last-layer
/// assignment according to `mode`.
pub fn apply_fixed_constraint(
    aux_assignments: &[GtAssignment],
    teacher_last: &GtAssignment,
    mode: ConstraintMode,
) -> Result<Vec<GtAssignment>, MatchError> {
    let mut out = aux_assignments.to_vec();
    match mode {
        ConstraintMode::Off => {}
        ConstraintMode::LastLayer => {
            let last = out.len().checked_sub(1).ok_or(MatchError::LayerOutOfRange(0, 0))?;
            out[last] = teacher_last.clone();
        }
        ConstraintMode::AllLayers => {
            for a in &mut out {
                *a = teacher_last.clone();
            }
        }
    }
    Ok(out)
}

/// Fraction of ground truths whose assigned query changed between snapshots.
pub fn instability_metric(
    current: &GtAssignment,
    previous: &GtAssignment,
) -> Result<f64, MatchError> {
    if current.query_for_gt.len() != previous.query_for_gt.len() {
        return Err(MatchError::GtCountMismatch(
            current.query_for_gt.len(),
            previous.query_for_gt.len(),
        ));
    }
    if current.query_for_gt.is_empty() {
        return Ok(0.0);
    }
    let changed = current
        .query_for_gt
        .iter()
        .zip(&previous.query_for_gt)
        .filter(|(a, b)| a != b)
        .count();
    Ok(changed as f64 / current.query_for_gt.len() as f64)
}

#[cfg(test)]
pub(crate) fn brute_force_min(rows: usize, cols: usize, cost: &dyn Fn(usize, usize) -> f64) -> f64 {
    fn rec(row: usize, rows: usize, cols: usize, used: &mut Vec<bool>, cost: &dyn Fn(usize, usize) -> f64) -> f64 {
        if row == rows {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = cost(row, c) + rec(row + 1, rows, cols, used, cost);
                used[c] = false;
                best = best.min(v);
            }
        }
        best
    }
    rec(0, rows, cols, &mut vec![false; cols], cost)
}
