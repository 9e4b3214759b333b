//! Loss terms for detection training and decoder distillation: set-based
//! detection loss, soft-target prediction distillation, self/cross-attention
//! distillation, and their combination into a per-step report.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::box_loss_pairs_weighted;
use crate::grad::{DiffArray, GradError, Tape};
use crate::matchers::{
    adaptive_match, apply_fixed_constraint, gt_match, Assignment, ConstraintMode, GtAssignment,
    LayerMatchings, MatchError,
};
use crate::nn::{DecoderOutputs, Prediction};
use crate::scenes::GroundTruth;

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum LossError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("head-count mismatch: student {student} vs teacher {teacher}")]
    HeadCountMismatch { student: usize, teacher: usize },
    #[error("teacher and student must share the token grid")]
    TokenGridMismatch { student: usize, teacher: usize },
    #[error("fixed matching needs group size equal to the teacher query count: {group} vs {teacher}")]
    FixedGroupSize { group: usize, teacher: usize },
    #[error("student has more decoder layers ({student}) than the teacher ({teacher})")]
    TooManyLayers { student: usize, teacher: usize },
    #[error("distillation losses require a teacher snapshot")]
    MissingTeacher,
    #[error("matched teacher index {index} out of range for {len} teacher queries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("group plan count {plans} does not match decoder group count {groups}")]
    PlanMismatch { plans: usize, groups: usize },
    #[error("matching count {matchings} does not match group query count {queries}")]
    MatchingSizeMismatch { matchings: usize, queries: usize },
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("probability vectors have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

/// Weights and enable flags for the training objective.
///
/// The matching-aide flags choose which query groups the decoder runs and how
/// each is matched to the teacher:
/// * `adaptive` — the student group is distilled through per-layer Hungarian
///   matching against the teacher's predictions.
/// * `fixed` — an auxiliary group is fed the teacher's query embeddings and
///   distilled with the identity correspondence; its ground-truth assignment
///   can be overridden by the teacher's last-layer assignment
///   (`constraint_mode`).
/// * `duplicate_groups` — run a second group with the same strategy instead of
///   mixing the two (requires exactly one of `adaptive`/`fixed`).
///
/// The `enable_*` flags gate individual distillation terms; `enable_aux_group`
/// is a master switch for every auxiliary group.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossConfig {
    pub mu_cls: f64,
    pub l1_weight: f64,
    pub giou_weight: f64,
    pub lambda_sa: f64,
    pub lambda_ca: f64,
    pub constraint_mode: ConstraintMode,
    pub enable_pred: bool,
    pub enable_self_attn: bool,
    pub enable_cross_attn: bool,
    pub enable_aux_group: bool,
    pub adaptive: bool,
    pub fixed: bool,
    pub duplicate_groups: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu_cls: 20.0,
            l1_weight: 5.0,
            giou_weight: 2.0,
            lambda_sa: 10_000.0,
            lambda_ca: 10_000.0,
            constraint_mode: ConstraintMode::default(),
            enable_pred: true,
            enable_self_attn: true,
            enable_cross_attn: true,
            enable_aux_group: true,
            adaptive: true,
            fixed: true,
            duplicate_groups: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("mu_cls", self.mu_cls),
            ("l1_weight", self.l1_weight),
            ("giou_weight", self.giou_weight),
            ("lambda_sa", self.lambda_sa),
            ("lambda_ca", self.lambda_ca),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(LossError::InvalidConfig(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.duplicate_groups && self.adaptive == self.fixed {
            return Err(LossError::InvalidConfig(
                "duplicate_groups requires exactly one of adaptive/fixed".into(),
            ));
        }
        Ok(())
    }
}

/// How a decoder query group is matched to the teacher for distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Per-layer Hungarian matching on prediction similarity.
    Adaptive,
    /// Identity correspondence with transplanted teacher queries.
    Fixed,
}

/// Where a group's input queries come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupSource {
    /// The student's own learned query embeddings (`queries.embed`).
    Learned,
    /// The frozen teacher's query embeddings.
    TeacherQueries,
    /// A second learned embedding table, used when a strategy is duplicated.
    ExtraLearned,
}

/// Per-group training plan. Every group always receives the ground-truth
/// detection loss; `strategy` additionally enables distillation terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupPlan {
    pub source: GroupSource,
    pub strategy: Option<Strategy>,
}

/// Derive the decoder group layout implied by a config. Index 0 is always the
/// student group kept at inference.
pub fn group_plans(cfg: &LossConfig) -> Vec<GroupPlan> {
    let mut plans = vec![GroupPlan {
        source: GroupSource::Learned,
        strategy: cfg.adaptive.then_some(Strategy::Adaptive),
    }];
    if cfg.enable_aux_group {
        if cfg.fixed {
            plans.push(GroupPlan {
                source: GroupSource::TeacherQueries,
                strategy: Some(Strategy::Fixed),
            });
        }
        if cfg.duplicate_groups && cfg.adaptive {
            plans.push(GroupPlan {
                source: GroupSource::ExtraLearned,
                strategy: Some(Strategy::Adaptive),
            });
        }
        if cfg.duplicate_groups && cfg.fixed {
            plans.push(GroupPlan {
                source: GroupSource::TeacherQueries,
                strategy: Some(Strategy::Fixed),
            });
        }
    }
    plans
}

/// Per-step loss values, one CSV row per training step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub detection: f64,
    pub l_pred: f64,
    pub l_sa: f64,
    pub l_ca: f64,
    pub aux_detection: f64,
    pub aux_l_pred: f64,
    pub aux_l_sa: f64,
    pub aux_l_ca: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str =
        "step,detection,l_pred,l_sa,l_ca,aux_detection,aux_l_pred,aux_l_sa,aux_l_ca,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{}",
            self.detection,
            self.l_pred,
            self.l_sa,
            self.l_ca,
            self.aux_detection,
            self.aux_l_pred,
            self.aux_l_sa,
            self.aux_l_ca,
            self.total
        )
    }

    pub fn accumulate(&mut self, other: &LossReport) {
        self.detection += other.detection;
        self.l_pred += other.l_pred;
        self.l_sa += other.l_sa;
        self.l_ca += other.l_ca;
        self.aux_detection += other.aux_detection;
        self.aux_l_pred += other.aux_l_pred;
        self.aux_l_sa += other.aux_l_sa;
        self.aux_l_ca += other.aux_l_ca;
        self.total += other.total;
    }

    pub fn scaled(&self, s: f64) -> LossReport {
        LossReport {
            detection: self.detection * s,
            l_pred: self.l_pred * s,
            l_sa: self.l_sa * s,
            l_ca: self.l_ca * s,
            aux_detection: self.aux_detection * s,
            aux_l_pred: self.aux_l_pred * s,
            aux_l_sa: self.aux_l_sa * s,
            aux_l_ca: self.aux_l_ca * s,
            total: self.total * s,
        }
    }
}

/// Loss component values for one query group.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GroupLosses {
    pub detection: f64,
    pub pred: f64,
    pub sa: f64,
    pub ca: f64,
}

/// Assemble the per-step report. Components are assumed to already reflect
/// the enabled flags (disabled terms are zero); `total` is their sum.
pub fn total_distill(student: &GroupLosses, aux: &GroupLosses, _cfg: &LossConfig) -> LossReport {
    let mut r = LossReport {
        detection: student.detection,
        l_pred: student.pred,
        l_sa: student.sa,
        l_ca: student.ca,
        aux_detection: aux.detection,
        aux_l_pred: aux.pred,
        aux_l_sa: aux.sa,
        aux_l_ca: aux.ca,
        total: 0.0,
    };
    r.total = r.detection
        + r.l_pred
        + r.l_sa
        + r.l_ca
        + r.aux_detection
        + r.aux_l_pred
        + r.aux_l_sa
        + r.aux_l_ca;
    r
}

/// Mean over classes of binary cross-entropy against a soft (constant)
/// target, value level: −[p_t·ln p_s + (1−p_t)·ln(1−p_s)] with clamping.
pub fn bce_soft_value(p_student: &[f64], p_teacher: &[f64]) -> f64 {
    assert_eq!(p_student.len(), p_teacher.len(), "probability vector length mismatch");
    let n = p_student.len().max(1);
    let mut sum = 0.0;
    for (&ps, &pt) in p_student.iter().zip(p_teacher) {
        let p = ps.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum -= pt * p.ln() + (1.0 - pt) * (1.0 - p).ln();
    }
    sum / n as f64
}

/// The minimum achievable [`bce_soft_value`] against target `p_teacher`: the
/// target's own entropy per class, averaged. Subtract this when testing
/// zero-loss identities on soft targets.
pub fn bce_entropy_floor(p_teacher: &[f64]) -> f64 {
    bce_soft_value(p_teacher, p_teacher)
}

/// Graph-level soft-target BCE: mean over all entries of `p_student` (an
/// `[n, k]` probability node) against constant targets. Gradients flow into
/// the student only.
pub fn bce_soft(
    t: &mut Tape,
    p_student: DiffArray,
    p_teacher: &[f64],
) -> Result<DiffArray, LossError> {
    let shape = t.shape(p_student).to_vec();
    let n: usize = shape.iter().product();
    if n != p_teacher.len() {
        return Err(LossError::LengthMismatch(n, p_teacher.len()));
    }
    let pc = t.clamp(p_student, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let lp = t.log(pc);
    let om = t.affine(pc, -1.0, 1.0);
    let lom = t.log(om);
    let tc = t.constant(&shape, p_teacher.to_vec())?;
    let oc = t.constant(&shape, p_teacher.iter().map(|v| 1.0 - v).collect())?;
    let pos = t.mul(tc, lp)?;
    let neg = t.mul(oc, lom)?;
    let s = t.add(pos, neg)?;
    let s = t.scale(s, -1.0);
    Ok(t.mean_all(s))
}

fn group_rows(
    t: &mut Tape,
    x: DiffArray,
    group: &Range<usize>,
) -> Result<DiffArray, GradError> {
    if group.start == 0 && group.end == t.shape(x)[0] {
        return Ok(x);
    }
    let idx: Vec<usize> = group.clone().collect();
    t.gather_rows(x, &idx)
}

/// Identity teacher-student correspondence for `layers` decoder layers over
/// `n` queries, used by fixed-matching groups.
pub fn identity_matchings(layers: usize, n: usize) -> LayerMatchings {
    LayerMatchings {
        per_layer: vec![Assignment { targets: (0..n).collect(), total_cost: 0.0 }; layers],
    }
}

/// Set-based detection loss for one query group: per layer, the per-query
/// class BCE against one-hot targets (all-zero rows for unmatched queries)
/// summed over queries, plus the L1+GIoU box loss on matched pairs (mean over
/// ground truths), summed over layers. Summing the per-query class terms
/// keeps the classification gradient commensurate with the box terms
/// regardless of the query count.
pub fn detection_loss(
    t: &mut Tape,
    outputs: &DecoderOutputs,
    group: &Range<usize>,
    gts: &[GroundTruth],
    assignments: &[GtAssignment],
    l1_weight: f64,
    giou_weight: f64,
) -> Result<DiffArray, LossError> {
    assert_eq!(assignments.len(), outputs.layers.len(), "one assignment per layer");
    let n = group.len();
    let mut total = t.scalar(0.0);
    for (layer, assign) in outputs.layers.iter().zip(assignments) {
        let k = t.shape(layer.probs)[1];
        let probs = group_rows(t, layer.probs, group)?;

        let mut target = vec![0.0; n * k];
        for (gt, &q) in gts.iter().zip(&assign.query_for_gt) {
            if q >= n {
                return Err(LossError::IndexOutOfRange { index: q, len: n });
            }
            target[q * k + gt.class_id] = 1.0;
        }
        // bce_soft is the mean over all n·k entries; scaling by n gives the
        // sum over queries of each query's class-mean BCE.
        let bce = bce_soft(t, probs, &target)?;
        let class_term = t.scale(bce, n as f64);
        total = t.add(total, class_term)?;

        if !gts.is_empty() {
            let boxes = group_rows(t, layer.boxes, group)?;
            let matched = t.gather_rows(boxes, &assign.query_for_gt)?;
            let gt_boxes: Vec<f64> = gts
                .iter()
                .flat_map(|g| [g.bbox.cx, g.bbox.cy, g.bbox.w, g.bbox.h])
                .collect();
            let gt_node = t.constant(&[gts.len(), 4], gt_boxes)?;
            let pairs = box_loss_pairs_weighted(t, matched, gt_node, l1_weight, giou_weight)?;
            let box_term = t.mean_all(pairs);
            total = t.add(total, box_term)?;
        }
    }
    Ok(total)
}

fn check_matching(
    matching: &Assignment,
    n: usize,
    teacher_len: usize,
) -> Result<(), LossError> {
    if matching.targets.len() != n {
        return Err(LossError::MatchingSizeMismatch { matchings: matching.targets.len(), queries: n });
    }
    if let Some(&bad) = matching.targets.iter().find(|&&i| i >= teacher_len) {
        return Err(LossError::IndexOutOfRange { index: bad, len: teacher_len });
    }
    Ok(())
}

/// Prediction distillation for one group: per layer, the per-query soft BCE
/// against the matched teacher's class probabilities (scaled by `mu_cls`)
/// plus the box loss against the matched teacher's boxes, summed over queries
/// and layers. Teacher values are constants.
pub fn pred_distill(
    t: &mut Tape,
    outputs: &DecoderOutputs,
    group: &Range<usize>,
    teacher_layers: &[Vec<Prediction>],
    matchings: &LayerMatchings,
    cfg: &LossConfig,
) -> Result<DiffArray, LossError> {
    assert_eq!(teacher_layers.len(), outputs.layers.len(), "aligned teacher layers");
    assert_eq!(matchings.per_layer.len(), outputs.layers.len(), "one matching per layer");
    let n = group.len();
    let mut total = t.scalar(0.0);
    for ((layer, teachers), matching) in
        outputs.layers.iter().zip(teacher_layers).zip(&matchings.per_layer)
    {
        check_matching(matching, n, teachers.len())?;
        let k = t.shape(layer.probs)[1];

        let mut t_probs = Vec::with_capacity(n * k);
        let mut t_boxes = Vec::with_capacity(n * 4);
        for &j in &matching.targets {
            let tp = &teachers[j];
            t_probs.extend_from_slice(&tp.probs);
            t_boxes.extend_from_slice(&[tp.bbox.cx, tp.bbox.cy, tp.bbox.w, tp.bbox.h]);
        }

        let probs = group_rows(t, layer.probs, group)?;
        let bce = bce_soft(t, probs, &t_probs)?;
        // bce is the mean over all n·k entries; the objective sums the
        // per-query class means, i.e. n times that mean.
        let class_term = t.scale(bce, cfg.mu_cls * n as f64);
        total = t.add(total, class_term)?;

        let boxes = group_rows(t, layer.boxes, group)?;
        let t_box_node = t.constant(&[n, 4], t_boxes)?;
        let pairs =
            box_loss_pairs_weighted(t, boxes, t_box_node, cfg.l1_weight, cfg.giou_weight)?;
        let box_term = t.sum_all(pairs);
        total = t.add(total, box_term)?;
    }
    Ok(total)
}

/// Entropy floor of [`pred_distill`] when the student equals the teacher:
/// the matched teacher probabilities' own BCE entropy, summed over queries
/// and layers with the `mu_cls` scale (box terms vanish at identity).
pub fn pred_distill_floor(
    teacher_layers: &[Vec<Prediction>],
    matchings: &LayerMatchings,
    mu_cls: f64,
) -> f64 {
    teacher_layers
        .iter()
        .zip(&matchings.per_layer)
        .map(|(teachers, m)| {
            m.targets.iter().map(|&j| mu_cls * bce_entropy_floor(&teachers[j].probs)).sum::<f64>()
        })
        .sum()
}

/// Self-attention distillation for one group: per layer, the MSE between the
/// group's self-attention block and the teacher's map with rows and columns
/// gathered at the matched indices, averaged over heads and map elements,
/// summed over layers and scaled by `lambda_sa`.
pub fn attn_distill_self(
    t: &mut Tape,
    outputs: &DecoderOutputs,
    group: &Range<usize>,
    teacher_maps: &[Vec<Vec<f64>>],
    teacher_queries: usize,
    matchings: &LayerMatchings,
    lambda_sa: f64,
) -> Result<DiffArray, LossError> {
    assert_eq!(teacher_maps.len(), outputs.attention.self_attn.len(), "aligned teacher maps");
    let n = group.len();
    let mut total = t.scalar(0.0);
    for (layer, (student_heads, teacher_heads)) in
        outputs.attention.self_attn.iter().zip(teacher_maps).enumerate()
    {
        if student_heads.len() != teacher_heads.len() {
            return Err(LossError::HeadCountMismatch {
                student: student_heads.len(),
                teacher: teacher_heads.len(),
            });
        }
        let matching = &matchings.per_layer[layer];
        check_matching(matching, n, teacher_queries)?;
        let mut layer_sum = t.scalar(0.0);
        for (&map, tmap) in student_heads.iter().zip(teacher_heads) {
            let rows = group_rows(t, map, group)?;
            let block = t.slice_cols(rows, group.start, group.end)?;
            let mut gathered = Vec::with_capacity(n * n);
            for &i in &matching.targets {
                for &j in &matching.targets {
                    gathered.push(tmap[i * teacher_queries + j]);
                }
            }
            let tnode = t.constant(&[n, n], gathered)?;
            let e = t.mse(block, tnode)?;
            layer_sum = t.add(layer_sum, e)?;
        }
        let layer_mean = t.scale(layer_sum, 1.0 / student_heads.len() as f64);
        total = t.add(total, layer_mean)?;
    }
    Ok(t.scale(total, lambda_sa))
}

/// Cross-attention distillation for one group: as [`attn_distill_self`] but
/// over query-to-token maps, with only teacher rows gathered; the token grid
/// must match.
pub fn attn_distill_cross(
    t: &mut Tape,
    outputs: &DecoderOutputs,
    group: &Range<usize>,
    teacher_maps: &[Vec<Vec<f64>>],
    teacher_queries: usize,
    teacher_hw: usize,
    matchings: &LayerMatchings,
    lambda_ca: f64,
) -> Result<DiffArray, LossError> {
    assert_eq!(teacher_maps.len(), outputs.attention.cross_attn.len(), "aligned teacher maps");
    let n = group.len();
    let mut total = t.scalar(0.0);
    for (layer, (student_heads, teacher_heads)) in
        outputs.attention.cross_attn.iter().zip(teacher_maps).enumerate()
    {
        if student_heads.len() != teacher_heads.len() {
            return Err(LossError::HeadCountMismatch {
                student: student_heads.len(),
                teacher: teacher_heads.len(),
            });
        }
        let matching = &matchings.per_layer[layer];
        check_matching(matching, n, teacher_queries)?;
        let mut layer_sum = t.scalar(0.0);
        for (&map, tmap) in student_heads.iter().zip(teacher_heads) {
            let hw = t.shape(map)[1];
            if hw * teacher_queries != tmap.len() {
                return Err(LossError::TokenGridMismatch {
                    student: hw,
                    teacher: tmap.len() / teacher_queries.max(1),
                });
            }
            if hw != teacher_hw {
                return Err(LossError::TokenGridMismatch { student: hw, teacher: teacher_hw });
            }
            let rows = group_rows(t, map, group)?;
            let mut gathered = Vec::with_capacity(n * hw);
            for &i in &matching.targets {
                gathered.extend_from_slice(&tmap[i * hw..(i + 1) * hw]);
            }
            let tnode = t.constant(&[n, hw], gathered)?;
            let e = t.mse(rows, tnode)?;
            layer_sum = t.add(layer_sum, e)?;
        }
        let layer_mean = t.scale(layer_sum, 1.0 / student_heads.len() as f64);
        total = t.add(total, layer_mean)?;
    }
    Ok(t.scale(total, lambda_ca))
}

/// Value snapshot of a frozen teacher forward pass: per-layer predictions,
/// attention maps, and the teacher's last-layer ground-truth assignment.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    /// `[layer][query]` predictions.
    pub layer_preds: Vec<Vec<Prediction>>,
    /// `[layer][head]` self-attention maps, each `n_queries × n_queries`.
    pub self_maps: Vec<Vec<Vec<f64>>>,
    /// `[layer][head]` cross-attention maps, each `n_queries × hw`.
    pub cross_maps: Vec<Vec<Vec<f64>>>,
    pub n_queries: usize,
    pub n_heads: usize,
    pub hw: usize,
    /// The teacher's own Hungarian ground-truth assignment at its last layer.
    pub last_gt_assignment: GtAssignment,
}

impl TeacherSnapshot {
    /// Keep only the deepest `n_layers` layers (the suffix a student with
    /// that many decoder layers aligns to). A no-op when the teacher has no
    /// more than `n_layers` layers, preserving the too-few-layers error path.
    pub fn truncated_to_last(mut self, n_layers: usize) -> Self {
        if self.layer_preds.len() > n_layers {
            let cut = self.layer_preds.len() - n_layers;
            self.layer_preds.drain(..cut);
            self.self_maps.drain(..cut);
            self.cross_maps.drain(..cut);
        }
        self
    }
}

/// Extract a [`TeacherSnapshot`] from a completed (single-group) forward pass.
pub fn snapshot_teacher(
    t: &Tape,
    outputs: &DecoderOutputs,
    gts: &[GroundTruth],
) -> Result<TeacherSnapshot, LossError> {
    let range = outputs.student_range();
    let n_queries = range.len();
    let layer_preds: Vec<Vec<Prediction>> = (0..outputs.layers.len())
        .map(|l| outputs.predictions(t, l, &range))
        .collect();
    let snap_maps = |maps: &Vec<Vec<DiffArray>>| -> Vec<Vec<Vec<f64>>> {
        maps.iter().map(|heads| heads.iter().map(|&m| t.values(m).to_vec()).collect()).collect()
    };
    let self_maps = snap_maps(&outputs.attention.self_attn);
    let cross_maps = snap_maps(&outputs.attention.cross_attn);
    let n_heads = self_maps.first().map_or(0, |h| h.len());
    let hw = cross_maps
        .first()
        .and_then(|h| h.first())
        .map_or(0, |m| m.len() / n_queries.max(1));
    let last = layer_preds.last().ok_or(LossError::MissingTeacher)?;
    let last_gt_assignment = gt_match(last, gts)?;
    Ok(TeacherSnapshot {
        layer_preds,
        self_maps,
        cross_maps,
        n_queries,
        n_heads,
        hw,
        last_gt_assignment,
    })
}

/// Matching decisions for one query group: per-layer ground-truth
/// assignments (after any fixed-matching constraint) and, for distilled
/// groups, the per-layer teacher-student correspondence.
#[derive(Debug, Clone)]
pub struct GroupMatchings {
    pub gt_assignments: Vec<GtAssignment>,
    pub distill: Option<LayerMatchings>,
}

/// All matching decisions for one scene, one entry per query group.
#[derive(Debug, Clone)]
pub struct SceneMatchings {
    pub per_group: Vec<GroupMatchings>,
}

/// Everything produced by [`scene_losses`] for one scene: the scalar loss
/// node to backpropagate, the per-term report, and the matching decisions
/// (for instability tracking).
pub struct SceneLosses {
    pub total: DiffArray,
    pub report: LossReport,
    pub matchings: SceneMatchings,
}

fn aligned_offset(teacher: &TeacherSnapshot, n_layers: usize) -> Result<usize, LossError> {
    if teacher.layer_preds.len() < n_layers {
        return Err(LossError::TooManyLayers {
            student: n_layers,
            teacher: teacher.layer_preds.len(),
        });
    }
    Ok(teacher.layer_preds.len() - n_layers)
}

/// Solve every matching problem for one scene: Hungarian ground-truth
/// assignment per group and layer (with the teacher's last-layer assignment
/// substituted on fixed groups per the constraint mode), and the per-layer
/// teacher-student correspondence for each distilled group.
pub fn compute_matchings(
    t: &Tape,
    cfg: &LossConfig,
    outputs: &DecoderOutputs,
    plans: &[GroupPlan],
    teacher: Option<&TeacherSnapshot>,
    gts: &[GroundTruth],
) -> Result<SceneMatchings, LossError> {
    cfg.validate()?;
    if plans.len() != outputs.group_ranges.len() {
        return Err(LossError::PlanMismatch {
            plans: plans.len(),
            groups: outputs.group_ranges.len(),
        });
    }
    let n_layers = outputs.layers.len();
    let mut per_group = Vec::with_capacity(plans.len());
    for (plan, group) in plans.iter().zip(&outputs.group_ranges) {
        let layer_preds: Vec<Vec<Prediction>> =
            (0..n_layers).map(|l| outputs.predictions(t, l, group)).collect();

        let mut gt_assignments: Vec<GtAssignment> = layer_preds
            .iter()
            .map(|p| gt_match(p, gts))
            .collect::<Result<_, _>>()?;
        if plan.strategy == Some(Strategy::Fixed) {
            let teacher = teacher.ok_or(LossError::MissingTeacher)?;
            gt_assignments = apply_fixed_constraint(
                &gt_assignments,
                &teacher.last_gt_assignment,
                cfg.constraint_mode,
            )?;
        }

        let distill = match plan.strategy {
            None => None,
            Some(strategy) => {
                let teacher = teacher.ok_or(LossError::MissingTeacher)?;
                let offset = aligned_offset(teacher, n_layers)?;
                Some(match strategy {
                    Strategy::Adaptive => {
                        adaptive_match(&layer_preds, &teacher.layer_preds[offset..], cfg.mu_cls)?
                    }
                    Strategy::Fixed => {
                        if group.len() != teacher.n_queries {
                            return Err(LossError::FixedGroupSize {
                                group: group.len(),
                                teacher: teacher.n_queries,
                            });
                        }
                        identity_matchings(n_layers, group.len())
                    }
                })
            }
        };
        per_group.push(GroupMatchings { gt_assignments, distill });
    }
    Ok(SceneMatchings { per_group })
}

/// Build the loss graph for one scene from precomputed matchings: detection
/// loss for every group plus the enabled distillation terms for groups with a
/// correspondence. Deeper student layers align with the teacher's deepest
/// layers when the teacher has more.
pub fn assemble_losses(
    t: &mut Tape,
    cfg: &LossConfig,
    outputs: &DecoderOutputs,
    plans: &[GroupPlan],
    teacher: Option<&TeacherSnapshot>,
    gts: &[GroundTruth],
    scene_matchings: &SceneMatchings,
) -> Result<SceneLosses, LossError> {
    if plans.len() != outputs.group_ranges.len()
        || scene_matchings.per_group.len() != plans.len()
    {
        return Err(LossError::PlanMismatch {
            plans: plans.len(),
            groups: outputs.group_ranges.len(),
        });
    }
    let n_layers = outputs.layers.len();
    let mut total = t.scalar(0.0);
    let mut student = GroupLosses::default();
    let mut aux = GroupLosses::default();

    // Average distillation terms over the distilled groups so that enabling
    // several matching strategies at once keeps the overall
    // distillation-to-detection balance of a single-strategy run instead of
    // multiplying it. Single-strategy configurations are unaffected.
    let n_distilled = plans.iter().filter(|p| p.strategy.is_some()).count().max(1);
    let distill_scale = 1.0 / n_distilled as f64;

    for (gi, ((plan, group), gm)) in
        plans.iter().zip(&outputs.group_ranges).zip(&scene_matchings.per_group).enumerate()
    {
        let det = detection_loss(
            t,
            outputs,
            group,
            gts,
            &gm.gt_assignments,
            cfg.l1_weight,
            cfg.giou_weight,
        )?;
        total = t.add(total, det)?;
        let det_v = t.scalar_value(det);
        if gi == 0 {
            student.detection = det_v;
        } else {
            aux.detection += det_v;
        }

        let (Some(_), Some(matchings)) = (plan.strategy, gm.distill.as_ref()) else { continue };
        let teacher = teacher.ok_or(LossError::MissingTeacher)?;
        let offset = aligned_offset(teacher, n_layers)?;
        let teacher_layers = &teacher.layer_preds[offset..];

        if cfg.enable_pred {
            let p = pred_distill(t, outputs, group, teacher_layers, matchings, cfg)?;
            let p = t.scale(p, distill_scale);
            total = t.add(total, p)?;
            let v = t.scalar_value(p);
            if gi == 0 {
                student.pred = v;
            } else {
                aux.pred += v;
            }
        }
        if cfg.enable_self_attn {
            let s = attn_distill_self(
                t,
                outputs,
                group,
                &teacher.self_maps[offset..],
                teacher.n_queries,
                matchings,
                cfg.lambda_sa,
            )?;
            let s = t.scale(s, distill_scale);
            total = t.add(total, s)?;
            let v = t.scalar_value(s);
            if gi == 0 {
                student.sa = v;
            } else {
                aux.sa += v;
            }
        }
        if cfg.enable_cross_attn {
            let c = attn_distill_cross(
                t,
                outputs,
                group,
                &teacher.cross_maps[offset..],
                teacher.n_queries,
                teacher.hw,
                matchings,
                cfg.lambda_ca,
            )?;
            let c = t.scale(c, distill_scale);
            total = t.add(total, c)?;
            let v = t.scalar_value(c);
            if gi == 0 {
                student.ca = v;
            } else {
                aux.ca += v;
            }
        }
    }

    let report = total_distill(&student, &aux, cfg);
    Ok(SceneLosses { total, report, matchings: scene_matchings.clone() })
}

/// [`compute_matchings`] followed by [`assemble_losses`]: the full objective
/// for one scene with fresh matching decisions.
pub fn scene_losses(
    t: &mut Tape,
    cfg: &LossConfig,
    outputs: &DecoderOutputs,
    plans: &[GroupPlan],
    teacher: Option<&TeacherSnapshot>,
    gts: &[GroundTruth],
) -> Result<SceneLosses, LossError> {
    let m = compute_matchings(t, cfg, outputs, plans, teacher, gts)?;
    assemble_losses(t, cfg, outputs, plans, teacher, gts, &m)
}
