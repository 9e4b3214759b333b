//! Training orchestration: decoupled-weight-decay Adam, the detection
//! training loop, teacher-to-student distillation, inheriting initialization,
//! the ablation runner, finite-difference gradient checking, and attention
//! map dumps.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate_model, EvalResult};
use crate::grad::{finite_diff_grad, GradError, Tape};
use crate::losses::{
    assemble_losses, compute_matchings, group_plans, scene_losses, snapshot_teacher, GroupPlan,
    GroupSource, LossConfig, LossError, LossReport, SceneMatchings, TeacherSnapshot,
};
use crate::matchers::{instability_metric, ConstraintMode, GtAssignment, MatchError};
use crate::nn::{
    init_params, model_forward, BoundParams, DecoderOutputs, ModelConfig, ModelError,
};
use crate::params::{ParamError, ParamStore, Tensor};
use crate::rng::SplitMix64;
use crate::scenes::{batch_iter, generate_scene, DatasetSpec, SceneError, SceneSample};

/// Parameter name of the second learned query table used by duplicated
/// adaptive-strategy groups.
pub const EXTRA_QUERY_PARAM: &str = "queries.extra";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("inherit: shape mismatch for {name}: student {student:?} vs teacher {teacher:?}")]
    InheritShape { name: String, student: Vec<usize>, teacher: Vec<usize> },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

/// Optimizer and schedule settings: constant step size with a single ×10
/// drop, decoupled weight decay, fixed moment coefficients.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epoch at which the step size drops ×10; default 80% of `epochs`.
    pub lr_drop_epoch: Option<usize>,
    pub batch_size: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 3e-3, weight_decay: 1e-4, epochs: 12, lr_drop_epoch: None, batch_size: 8 }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drop = self.lr_drop_epoch.unwrap_or((self.epochs * 4).div_ceil(5));
        if epoch >= drop {
            self.lr * 0.1
        } else {
            self.lr
        }
    }
}

/// A full run description: teacher/student architectures, loss flags,
/// optimizer, seeds, data, and optional file paths for the CLI.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub teacher: ModelConfig,
    pub student: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub inherit: bool,
    pub data: DatasetSpec,
    pub data_spec: Option<PathBuf>,
    pub teacher_ckpt: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data = DatasetSpec::default();
        let teacher = ModelConfig {
            // d_model 32 / ffn 64 halves the step cost of d_model 64 and
            // reaches the same desk-scale accuracy; the larger width does not
            // fit the single-core training budget.
            d_model: 32,
            n_heads: 4,
            // Zero encoder self-attention layers: tokens are projected and
            // position-encoded only. Full self-attention over the 16×16 token
            // grid more than doubles the cost of every step and is not needed
            // for the synthetic scenes to be learnable on a CPU budget.
            n_enc_layers: 0,
            n_dec_layers: 4,
            n_queries: 12,
            n_classes: data.n_classes,
            grid_h: data.grid_h,
            grid_w: data.grid_w,
            c_in: data.c_in,
            ffn_dim: 64,
        };
        let student = ModelConfig { n_dec_layers: 2, ..teacher };
        Self {
            teacher,
            student,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
            inherit: true,
            data,
            data_spec: None,
            teacher_ckpt: None,
            out_dir: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.teacher.validate()?;
        self.student.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        for (name, cfg) in [("teacher", &self.teacher), ("student", &self.student)] {
            if cfg.grid_h != self.data.grid_h
                || cfg.grid_w != self.data.grid_w
                || cfg.c_in != self.data.c_in
                || cfg.n_classes != self.data.n_classes
            {
                return Err(TrainError::InvalidConfig(format!(
                    "{name} model grid/channels/classes must match the dataset spec"
                )));
            }
        }
        let needs_equal_dims =
            self.inherit || (self.loss.fixed && self.loss.enable_aux_group);
        if needs_equal_dims
            && (self.teacher.d_model != self.student.d_model
                || self.teacher.n_heads != self.student.n_heads)
        {
            return Err(TrainError::InvalidConfig(
                "fixed matching and inheriting require equal d_model and head count".into(),
            ));
        }
        if self.data.max_objects > self.student.n_queries.min(self.teacher.n_queries) {
            return Err(TrainError::InvalidConfig(
                "max_objects must not exceed the query count of either model".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam: β = (0.9, 0.999), eps 1e-8. Moment buffers
/// follow the parameter store's insertion order.
pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    /// One update from gradients listed in the store's parameter order.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(String, Vec<f64>)],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for (i, (name, g)) in grads.iter().enumerate() {
            let tensor = store.get_mut(name).expect("gradient for unknown parameter");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let p = tensor.data[j];
                tensor.data[j] = p - lr * weight_decay * p - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Copy every teacher parameter whose name the student shares. A student with
/// fewer decoder layers keeps the teacher's first layers (names coincide);
/// a smaller query table copies the leading rows. Any other shape mismatch is
/// a hard error, and student-only parameters keep their fresh initialization.
pub fn inherit_init(student: &mut ParamStore, teacher: &ParamStore) -> Result<(), TrainError> {
    let names: Vec<String> = student.names().map(str::to_owned).collect();
    for name in names {
        let Some(tt) = teacher.get(&name) else { continue };
        let st = student.get(&name).expect("iterating student names");
        if st.shape == tt.shape {
            let data = tt.data.clone();
            student.get_mut(&name).unwrap().data = data;
        } else if name == "queries.embed"
            && st.shape.len() == 2
            && tt.shape.len() == 2
            && st.shape[1] == tt.shape[1]
            && st.shape[0] <= tt.shape[0]
        {
            let rows = st.shape[0] * st.shape[1];
            let data = tt.data[..rows].to_vec();
            student.get_mut(&name).unwrap().data = data;
        } else {
            return Err(TrainError::InheritShape {
                name,
                student: st.shape.clone(),
                teacher: tt.shape.clone(),
            });
        }
    }
    Ok(())
}

/// Fresh student parameters for a group plan, adding the second learned
/// query table when a duplicated adaptive group is configured.
pub fn init_student_params(
    cfg: &ModelConfig,
    seed: u64,
    plans: &[GroupPlan],
) -> Result<ParamStore, TrainError> {
    let mut ps = init_params(cfg, seed)?;
    if plans.iter().any(|p| p.source == GroupSource::ExtraLearned) {
        let mut rng = SplitMix64::with_stream(seed, 0xE77A);
        ps.insert(EXTRA_QUERY_PARAM, Tensor::xavier(vec![cfg.n_queries, cfg.d_model], &mut rng))?;
    }
    Ok(ps)
}

/// Bind extra query groups for the decoder according to the plan: teacher
/// query transplants become constants, duplicated learned tables bind to the
/// student's own parameter.
fn extra_group_nodes(
    t: &mut Tape,
    plans: &[GroupPlan],
    bp: &BoundParams,
    teacher_queries: Option<&Tensor>,
) -> Result<Vec<crate::grad::DiffArray>, TrainError> {
    let mut extras = Vec::new();
    for plan in &plans[1..] {
        let node = match plan.source {
            GroupSource::Learned => {
                return Err(TrainError::InvalidConfig(
                    "only group 0 may use the primary learned queries".into(),
                ))
            }
            GroupSource::TeacherQueries => {
                let q = teacher_queries.ok_or(LossError::MissingTeacher)?;
                t.constant(&q.shape, q.data.clone()).map_err(LossError::from)?
            }
            GroupSource::ExtraLearned => bp.get(EXTRA_QUERY_PARAM)?,
        };
        extras.push(node);
    }
    Ok(extras)
}

/// Everything a training run produces, indexed per epoch / per step.
pub struct TrainOutcome {
    pub params: ParamStore,
    /// One evaluation of the validation set per epoch.
    pub metrics: Vec<EvalResult>,
    /// One report per optimizer step (batch means).
    pub loss_rows: Vec<LossReport>,
    /// Mean total loss per epoch over the training set.
    pub epoch_loss: Vec<f64>,
    /// Per-epoch fraction of ground truths whose assigned student-group query
    /// changed since the previous epoch (0 for the first epoch).
    pub adaptive_churn: Vec<f64>,
    /// Same churn for the first auxiliary group, when present.
    pub aux_churn: Vec<f64>,
    /// Steps where a fixed group's constrained last-layer assignment differed
    /// from the teacher's (expected 0 whenever the constraint is active).
    pub aux_constraint_mismatches: usize,
}

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    SplitMix64::with_stream(seed, 0x5EED_0000 + epoch as u64).next_u64()
}

struct ChurnTracker {
    previous: Vec<Option<GtAssignment>>,
    current: Vec<Option<GtAssignment>>,
    sum: f64,
    count: usize,
}

impl ChurnTracker {
    fn new(n_scenes: usize) -> Self {
        Self { previous: vec![None; n_scenes], current: vec![None; n_scenes], sum: 0.0, count: 0 }
    }

    fn record(&mut self, scene: usize, assignment: &GtAssignment) {
        if assignment.query_for_gt.is_empty() {
            return;
        }
        if let Some(prev) = &self.previous[scene] {
            if let Ok(c) = instability_metric(assignment, prev) {
                self.sum += c;
                self.count += 1;
            }
        }
        self.current[scene] = Some(assignment.clone());
    }

    fn finish_epoch(&mut self) -> f64 {
        let mean = if self.count == 0 { 0.0 } else { self.sum / self.count as f64 };
        std::mem::swap(&mut self.previous, &mut self.current);
        self.current.iter_mut().for_each(|c| *c = None);
        self.sum = 0.0;
        self.count = 0;
        mean
    }
}

/// The shared training engine. With `teacher = None` and a single plain group
/// this is ordinary detection training; with a teacher and strategies it is
/// distillation. Deterministic in all inputs.
#[allow(clippy::too_many_arguments)]
fn run_training(
    student_cfg: &ModelConfig,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
    plans: &[GroupPlan],
    teacher: Option<(&ModelConfig, &ParamStore)>,
    init: ParamStore,
    seed: u64,
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
) -> Result<TrainOutcome, TrainError> {
    let mut params = init;
    let mut opt = AdamW::new(&params);
    let needs_teacher = plans.iter().any(|p| p.strategy.is_some());
    let teacher_queries = teacher
        .map(|(_, tp)| {
            tp.get("queries.embed")
                .cloned()
                .ok_or_else(|| TrainError::InvalidConfig("teacher has no query table".into()))
        })
        .transpose()?;

    let mut metrics = Vec::with_capacity(optim.epochs);
    let mut loss_rows = Vec::new();
    let mut epoch_loss = Vec::with_capacity(optim.epochs);
    let mut student_churn = ChurnTracker::new(train_scenes.len());
    let mut aux_churn = ChurnTracker::new(train_scenes.len());
    let mut adaptive_churn = Vec::with_capacity(optim.epochs);
    let mut aux_churn_rows = Vec::with_capacity(optim.epochs);
    let mut aux_constraint_mismatches = 0usize;
    let mut step = 0usize;

    // The teacher is frozen, so its per-scene forward pass is identical on
    // every epoch: compute each snapshot once, truncated to the layer suffix
    // the student aligns with.
    let teacher_cache: Option<Vec<TeacherSnapshot>> = match (needs_teacher, teacher) {
        (true, Some((tcfg, tparams))) => Some(
            train_scenes
                .iter()
                .map(|scene| {
                    let mut tt = Tape::new();
                    let tbp = BoundParams::bind(&mut tt, tparams, false)?;
                    let tout = model_forward(&mut tt, tcfg, &tbp, &scene.features, &[])?;
                    Ok(snapshot_teacher(&tt, &tout, &scene.gts)?
                        .truncated_to_last(student_cfg.n_dec_layers))
                })
                .collect::<Result<_, TrainError>>()?,
        ),
        (true, None) => return Err(LossError::MissingTeacher.into()),
        (false, _) => None,
    };

    let indices: Vec<usize> = (0..train_scenes.len()).collect();
    for epoch in 0..optim.epochs {
        let lr = optim.lr_at(epoch);
        let mut epoch_sum = 0.0;
        let mut epoch_batches = 0usize;
        for batch in batch_iter(&indices, optim.batch_size, epoch_shuffle_seed(seed, epoch)) {
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<(String, Vec<f64>)> =
                params.iter().map(|(n, t)| (n.to_owned(), vec![0.0; t.data.len()])).collect();
            let mut batch_report = LossReport::default();

            for &scene_idx in &batch {
                let scene = &train_scenes[scene_idx];
                let snapshot = teacher_cache.as_ref().map(|c| &c[scene_idx]);

                let mut t = Tape::new();
                let bp = BoundParams::bind(&mut t, &params, true)?;
                let extras = extra_group_nodes(&mut t, plans, &bp, teacher_queries.as_ref())?;
                let out = model_forward(&mut t, student_cfg, &bp, &scene.features, &extras)?;
                let losses =
                    scene_losses(&mut t, loss_cfg, &out, plans, snapshot, &scene.gts)?;
                if !losses.report.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                batch_report.accumulate(&losses.report);

                track_matchings(
                    &losses.matchings,
                    plans,
                    snapshot,
                    loss_cfg,
                    scene_idx,
                    &mut student_churn,
                    &mut aux_churn,
                    &mut aux_constraint_mismatches,
                );

                let scaled = t.scale(losses.total, scale);
                t.backward(scaled).map_err(LossError::from)?;
                for ((_, buf), (_, g)) in acc.iter_mut().zip(bp.grads(&t, &params)?) {
                    for (b, &gv) in buf.iter_mut().zip(g) {
                        *b += gv;
                    }
                }
            }

            opt.step(&mut params, &acc, lr, optim.weight_decay);
            let mean_report = batch_report.scaled(scale);
            epoch_sum += mean_report.total;
            epoch_batches += 1;
            loss_rows.push(mean_report);
            step += 1;
        }
        epoch_loss.push(if epoch_batches == 0 { 0.0 } else { epoch_sum / epoch_batches as f64 });
        adaptive_churn.push(student_churn.finish_epoch());
        aux_churn_rows.push(aux_churn.finish_epoch());
        metrics.push(evaluate_model(&params, student_cfg, val_scenes)?);
    }

    Ok(TrainOutcome {
        params,
        metrics,
        loss_rows,
        epoch_loss,
        adaptive_churn,
        aux_churn: aux_churn_rows,
        aux_constraint_mismatches,
    })
}

#[allow(clippy::too_many_arguments)]
fn track_matchings(
    matchings: &SceneMatchings,
    plans: &[GroupPlan],
    snapshot: Option<&TeacherSnapshot>,
    loss_cfg: &LossConfig,
    scene_idx: usize,
    student_churn: &mut ChurnTracker,
    aux_churn: &mut ChurnTracker,
    constraint_mismatches: &mut usize,
) {
    if let Some(last) = matchings.per_group[0].gt_assignments.last() {
        student_churn.record(scene_idx, last);
    }
    for (plan, gm) in plans.iter().zip(&matchings.per_group).skip(1) {
        if let Some(last) = gm.gt_assignments.last() {
            aux_churn.record(scene_idx, last);
            if plan.strategy == Some(crate::losses::Strategy::Fixed)
                && loss_cfg.constraint_mode != ConstraintMode::Off
            {
                if let Some(snap) = snapshot {
                    if last != &snap.last_gt_assignment {
                        *constraint_mismatches += 1;
                    }
                }
            }
        }
        break; // only the first auxiliary group is tracked
    }
}

/// Detection-only training from Xavier (or provided) initialization.
pub fn train_detector(
    cfg: &ModelConfig,
    optim: &OptimConfig,
    loss_cfg: &LossConfig,
    seed: u64,
    init: Option<ParamStore>,
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
) -> Result<TrainOutcome, TrainError> {
    let detection_only = LossConfig {
        adaptive: false,
        fixed: false,
        duplicate_groups: false,
        ..loss_cfg.clone()
    };
    let plans = group_plans(&detection_only);
    let init = match init {
        Some(ps) => ps,
        None => init_params(cfg, seed)?,
    };
    run_training(cfg, optim, &detection_only, &plans, None, init, seed, train_scenes, val_scenes)
}

/// Train the teacher with per-layer detection supervision.
pub fn train_teacher(
    run: &RunConfig,
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    train_detector(&run.teacher, &run.optim, &run.loss, run.seed, None, train_scenes, val_scenes)
}

/// Distill a student from a frozen teacher according to the run's loss
/// config: the teacher runs forward (no gradients) on every scene, the
/// student runs with its groups, and the optimizer updates the student only.
pub fn distill_student(
    run: &RunConfig,
    teacher_params: &ParamStore,
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
) -> Result<TrainOutcome, TrainError> {
    run.validate()?;
    let plans = group_plans(&run.loss);
    let mut init = init_student_params(&run.student, run.seed, &plans)?;
    if run.inherit {
        inherit_init(&mut init, teacher_params)?;
    }
    run_training(
        &run.student,
        &run.optim,
        &run.loss,
        &plans,
        Some((&run.teacher, teacher_params)),
        init,
        run.seed,
        train_scenes,
        val_scenes,
    )
}

/// Materialize the scenes for a list of indices.
pub fn materialize_scenes(
    spec: &DatasetSpec,
    indices: &[usize],
) -> Result<Vec<SceneSample>, TrainError> {
    indices.iter().map(|&i| generate_scene(spec, i).map_err(TrainError::from)).collect()
}

/// One ablation configuration: either a matching-strategy variant distilled
/// from the shared teacher, or a decoder-depth variant trained from scratch.
#[derive(Debug, Clone)]
pub enum AblationEntry {
    Matching { label: String, loss: LossConfig },
    Depth { label: String, n_dec_layers: usize },
}

/// One output row of the ablation table.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub adaptive: bool,
    pub fixed: bool,
    pub duplicate: bool,
    pub n_dec_layers: usize,
    pub ap50: f64,
    pub map: f64,
}

pub const ABLATION_CSV_HEADER: &str = "label,adaptive,fixed,duplicate,n_dec_layers,ap50,map";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label, r.adaptive, r.fixed, r.duplicate, r.n_dec_layers, r.ap50, r.map
        ));
    }
    out
}

/// Run every entry with identical seed and budget and report final accuracy.
pub fn run_ablation(
    run: &RunConfig,
    teacher_params: &ParamStore,
    entries: &[AblationEntry],
    train_scenes: &[SceneSample],
    val_scenes: &[SceneSample],
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let row = match entry {
            AblationEntry::Matching { label, loss } => {
                let variant = RunConfig { loss: loss.clone(), ..run.clone() };
                let outcome =
                    distill_student(&variant, teacher_params, train_scenes, val_scenes)?;
                let last = outcome.metrics.last().copied().unwrap_or_default();
                AblationRow {
                    label: label.clone(),
                    adaptive: loss.adaptive,
                    fixed: loss.fixed,
                    duplicate: loss.duplicate_groups,
                    n_dec_layers: run.student.n_dec_layers,
                    ap50: last.ap50,
                    map: last.map,
                }
            }
            AblationEntry::Depth { label, n_dec_layers } => {
                let cfg = ModelConfig { n_dec_layers: *n_dec_layers, ..run.teacher };
                let outcome = train_detector(
                    &cfg,
                    &run.optim,
                    &run.loss,
                    run.seed,
                    None,
                    train_scenes,
                    val_scenes,
                )?;
                let last = outcome.metrics.last().copied().unwrap_or_default();
                AblationRow {
                    label: label.clone(),
                    adaptive: false,
                    fixed: false,
                    duplicate: false,
                    n_dec_layers: *n_dec_layers,
                    ap50: last.ap50,
                    map: last.map,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

/// The standard ablation grid: the six matching-strategy modes plus the
/// decoder-depth sweep.
pub fn standard_ablation_grid(run: &RunConfig) -> Vec<AblationEntry> {
    let mode = |label: &str, adaptive: bool, fixed: bool, duplicate: bool| {
        AblationEntry::Matching {
            label: label.to_owned(),
            loss: LossConfig {
                adaptive,
                fixed,
                duplicate_groups: duplicate,
                ..run.loss.clone()
            },
        }
    };
    let mut entries = vec![
        mode("none", false, false, false),
        mode("adaptive", true, false, false),
        mode("fixed", false, true, false),
        mode("adaptive-x2", true, false, true),
        mode("fixed-x2", false, true, true),
        mode("adaptive+fixed", true, true, false),
    ];
    for l in 1..=run.teacher.n_dec_layers {
        entries.push(AblationEntry::Depth { label: format!("depth-{l}"), n_dec_layers: l });
    }
    entries
}

/// Result of a finite-difference check of the full objective.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    /// Max relative error per parameter tensor, in store order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub worst: String,
    pub pass: bool,
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Check reverse-mode gradients of the full objective (detection plus every
/// enabled distillation term for every group) against central finite
/// differences on one scene. Matching decisions are frozen at the base point
/// so the objective is differentiable in a neighborhood. Restricted to tiny
/// models so the parameter sweep stays fast.
pub fn gradcheck_objective(
    run: &RunConfig,
    scene: &SceneSample,
) -> Result<GradcheckReport, TrainError> {
    run.validate()?;
    if run.student.n_queries > 3 || run.student.n_dec_layers > 2 {
        return Err(TrainError::InvalidConfig(
            "gradcheck requires a tiny model (at most 3 queries, 2 decoder layers)".into(),
        ));
    }
    let plans = group_plans(&run.loss);
    let needs_teacher = plans.iter().any(|p| p.strategy.is_some());

    let teacher_params = init_params(&run.teacher, run.seed.wrapping_add(1))?;
    let snapshot = if needs_teacher {
        let mut tt = Tape::new();
        let tbp = BoundParams::bind(&mut tt, &teacher_params, false)?;
        let tout = model_forward(&mut tt, &run.teacher, &tbp, &scene.features, &[])?;
        Some(snapshot_teacher(&tt, &tout, &scene.gts)?)
    } else {
        None
    };
    let teacher_queries = teacher_params.get("queries.embed").cloned();

    let mut params = init_student_params(&run.student, run.seed, &plans)?;
    // Jitter every parameter so the check runs at a generic point. At the
    // exact init (zero biases) the first decoder LayerNorm sees identical
    // near-zero rows; its curvature there exceeds what central differences
    // can resolve, even though the analytic gradient is correct.
    let mut jitter = SplitMix64::with_stream(run.seed, 0x6A17);
    for name in params.names().map(str::to_owned).collect::<Vec<_>>() {
        for v in &mut params.get_mut(&name).expect("param exists").data {
            *v += jitter.uniform(-0.05, 0.05);
        }
    }

    let forward = |t: &mut Tape,
                   store: &ParamStore,
                   trainable: bool|
     -> Result<(BoundParams, DecoderOutputs), TrainError> {
        let bp = BoundParams::bind(t, store, trainable)?;
        let extras = extra_group_nodes(t, &plans, &bp, teacher_queries.as_ref())?;
        let out = model_forward(t, &run.student, &bp, &scene.features, &extras)?;
        Ok((bp, out))
    };

    // Freeze every matching decision at the base point.
    let frozen = {
        let mut t = Tape::new();
        let (_, out) = forward(&mut t, &params, false)?;
        compute_matchings(&t, &run.loss, &out, &plans, snapshot.as_ref(), &scene.gts)?
    };

    // Analytic gradients.
    let analytic: Vec<(String, Vec<f64>)> = {
        let mut t = Tape::new();
        let (bp, out) = forward(&mut t, &params, true)?;
        let losses = assemble_losses(
            &mut t,
            &run.loss,
            &out,
            &plans,
            snapshot.as_ref(),
            &scene.gts,
            &frozen,
        )?;
        t.backward(losses.total).map_err(LossError::from)?;
        bp.grads(&t, &params)?
            .into_iter()
            .map(|(n, g)| (n, g.to_vec()))
            .collect()
    };

    // Numeric gradients with the same frozen matchings.
    let objective = |store: &ParamStore| -> f64 {
        let mut t = Tape::new();
        let (_, out) = forward(&mut t, store, false).expect("forward in gradcheck");
        let losses = assemble_losses(
            &mut t,
            &run.loss,
            &out,
            &plans,
            snapshot.as_ref(),
            &scene.gts,
            &frozen,
        )
        .expect("losses in gradcheck");
        t.scalar_value(losses.total)
    };
    let numeric = finite_diff_grad(objective, &mut params, GRADCHECK_H);

    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max_rel_err: f64 = 0.0;
    let mut worst = String::new();
    for ((name, ga), (n2, gn)) in analytic.iter().zip(&numeric) {
        assert_eq!(name, n2, "parameter order mismatch");
        let e = ga.iter().zip(gn).map(|(&a, &b)| rel_err(a, b)).fold(0.0, f64::max);
        if e > max_rel_err {
            max_rel_err = e;
            worst = name.clone();
        }
        per_param.push((name.clone(), e));
    }
    Ok(GradcheckReport { per_param, max_rel_err, worst, pass: max_rel_err < GRADCHECK_TOLERANCE })
}

/// Dump every per-layer, per-head attention map of the student group to CSV
/// files `{prefix}attn_{self|cross}_L{layer}_H{head}.csv`. Returns the paths.
pub fn dump_attention(
    store: &ParamStore,
    cfg: &ModelConfig,
    scene: &SceneSample,
    out_dir: &Path,
    prefix: &str,
) -> Result<Vec<PathBuf>, TrainError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut t = Tape::new();
    let bp = BoundParams::bind(&mut t, store, false)?;
    let out = model_forward(&mut t, cfg, &bp, &scene.features, &[])?;
    let mut paths = Vec::new();
    for (kind, maps) in
        [("self", &out.attention.self_attn), ("cross", &out.attention.cross_attn)]
    {
        for (l, heads) in maps.iter().enumerate() {
            for (h, &map) in heads.iter().enumerate() {
                let cols = t.shape(map)[1];
                let vals = t.values(map);
                let mut body = String::new();
                for row in vals.chunks(cols) {
                    let cells: Vec<String> = row.iter().map(f64::to_string).collect();
                    body.push_str(&cells.join(","));
                    body.push('\n');
                }
                let path = out_dir.join(format!("{prefix}attn_{kind}_L{l}_H{h}.csv"));
                std::fs::write(&path, body).map_err(io_err(&path))?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        let mut ps = ParamStore::new();
        ps.insert("p", Tensor::new(vec![1], vec![1.0])).unwrap();
        let mut opt = AdamW::new(&ps);
        opt.step(&mut ps, &[("p".into(), vec![0.5])], 0.1, 0.1);
        // m̂ = 0.5, v̂ = 0.25 after bias correction; decay 0.1·0.1·1.0.
        let expect = 1.0 - 0.01 - 0.1 * 0.5 / (0.25f64.sqrt() + ADAM_EPS);
        let got = ps.get("p").unwrap().data[0];
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn adamw_is_deterministic() {
        let run = || {
            let mut ps = ParamStore::new();
            ps.insert("w", Tensor::new(vec![2], vec![0.3, -0.4])).unwrap();
            let mut opt = AdamW::new(&ps);
            for i in 0..5 {
                let g = vec![0.1 * (i as f64 + 1.0), -0.2];
                opt.step(&mut ps, &[("w".into(), g)], 1e-3, 1e-4);
            }
            ps.get("w").unwrap().data.clone()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn lr_drops_by_ten_at_80_percent() {
        let o = OptimConfig { epochs: 30, lr: 1e-3, ..OptimConfig::default() };
        assert_eq!(o.lr_at(0), 1e-3);
        assert_eq!(o.lr_at(23), 1e-3);
        assert_eq!(o.lr_at(24), 1e-4);
        let explicit = OptimConfig { epochs: 10, lr_drop_epoch: Some(3), ..o };
        assert_eq!(explicit.lr_at(3), 1e-4);
    }

    #[test]
    fn inherit_full_copy_and_prefix_rules() {
        let run = RunConfig::default();
        let teacher = init_params(&run.teacher, 11).unwrap();

        // Same architecture: every parameter equal after inheriting.
        let mut same = init_params(&run.teacher, 12).unwrap();
        inherit_init(&mut same, &teacher).unwrap();
        for (name, t) in teacher.iter() {
            assert_eq!(same.get(name).unwrap().data, t.data, "{name}");
        }

        // Fewer decoder layers: the student's layer names are a prefix of the
        // teacher's, so layers 0..L_s copy from teacher layers 0..L_s.
        let mut student = init_params(&run.student, 13).unwrap();
        inherit_init(&mut student, &teacher).unwrap();
        assert_eq!(
            student.get("dec.l1.self.h0.wq").unwrap().data,
            teacher.get("dec.l1.self.h0.wq").unwrap().data
        );
        assert!(student.get("dec.l3.self.h0.wq").is_none());

        // Smaller query table copies leading rows.
        let fewer_queries = ModelConfig { n_queries: 8, ..run.student };
        let mut small = init_params(&fewer_queries, 14).unwrap();
        inherit_init(&mut small, &teacher).unwrap();
        let tq = teacher.get("queries.embed").unwrap();
        let d = run.teacher.d_model;
        assert_eq!(small.get("queries.embed").unwrap().data, tq.data[..8 * d].to_vec());

        // Hidden-size mismatch is a hard error.
        let narrow = ModelConfig { d_model: 16, n_heads: 4, ffn_dim: 32, ..run.student };
        let mut bad = init_params(&narrow, 15).unwrap();
        assert!(matches!(
            inherit_init(&mut bad, &teacher),
            Err(TrainError::InheritShape { .. })
        ));
    }

    #[test]
    fn run_config_validation_rules() {
        let ok = RunConfig::default();
        ok.validate().unwrap();

        let mut unequal = RunConfig::default();
        unequal.student.d_model = 16;
        unequal.student.ffn_dim = 32;
        assert!(unequal.validate().is_err()); // fixed matching + inherit on

        unequal.inherit = false;
        unequal.loss.fixed = false;
        unequal.validate().unwrap();

        let mut off_grid = RunConfig::default();
        off_grid.student.grid_h = 8;
        assert!(off_grid.validate().is_err());
    }

    #[test]
    fn ablation_csv_shapes() {
        assert_eq!(ablation_csv(&[]).lines().count(), 1);
        let rows = vec![AblationRow {
            label: "adaptive".into(),
            adaptive: true,
            fixed: false,
            duplicate: false,
            n_dec_layers: 2,
            ap50: 0.5,
            map: 0.25,
        }];
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("adaptive,true,false,false,2,"));
    }

    #[test]
    fn standard_grid_covers_six_modes_and_depth_sweep() {
        let run = RunConfig::default();
        let grid = standard_ablation_grid(&run);
        let matching = grid
            .iter()
            .filter(|e| matches!(e, AblationEntry::Matching { .. }))
            .count();
        let depth =
            grid.iter().filter(|e| matches!(e, AblationEntry::Depth { .. })).count();
        assert_eq!(matching, 6);
        assert_eq!(depth, run.teacher.n_dec_layers);
    }
}
