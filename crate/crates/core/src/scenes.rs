//! Deterministic synthetic detection scenes.
//!
//! A scene is a pure function of (dataset seed, index): object count, classes,
//! boxes, and noise all come from one SplitMix64 stream, so only the
//! [`DatasetSpec`] needs to be persisted. Boxes snap to grid cells and each
//! class renders a distinct intensity pattern into the cell features.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::boxes::{iou_xyxy, BoxCxCyWH};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene index {0} out of range ({1} scenes)")]
    IndexOutOfRange(usize, usize),
    #[error("dataset spec: {0}")]
    BadSpec(String),
    #[error("spec io: {0}")]
    Io(#[from] std::io::Error),
    #[error("spec parse: {0}")]
    Parse(#[from] serde_json::Error),
}

pub const PRNG_NAME: &str = "splitmix64-v1";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub n_scenes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub c_in: usize,
    pub n_classes: usize,
    pub max_objects: usize,
    /// Shape palette: object side lengths in normalized units (snapped to cells).
    pub min_size: f64,
    pub max_size: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
    /// Overlap policy: pairwise IoU cap between sampled boxes.
    pub max_overlap_iou: f64,
    pub noise_amplitude: f64,
    /// Generator name + version; fixed so that two implementations can agree.
    pub prng: String,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 2222,
            grid_h: 16,
            grid_w: 16,
            c_in: 3,
            n_classes: 5,
            max_objects: 4,
            min_size: 0.12,
            max_size: 0.45,
            min_intensity: 0.6,
            max_intensity: 1.0,
            max_overlap_iou: 0.3,
            noise_amplitude: 0.08,
            prng: PRNG_NAME.to_owned(),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), SceneError> {
        let positive = [
            ("n_scenes", self.n_scenes),
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("c_in", self.c_in),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SceneError::BadSpec(format!("{name} must be positive")));
            }
        }
        if self.prng != PRNG_NAME {
            return Err(SceneError::BadSpec(format!(
                "unsupported prng {:?} (expected {PRNG_NAME:?})",
                self.prng
            )));
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size <= 1.0) {
            return Err(SceneError::BadSpec("bad size range".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SceneError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, SceneError> {
        let spec: DatasetSpec = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BoxCxCyWH,
}

/// One synthetic scene. `features` is row-major over cells then channels:
/// index `(h * grid_w + w) * c_in + ch`, i.e. one length-`c_in` feature per
/// encoder token.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub features: Vec<f64>,
    pub gts: Vec<GroundTruth>,
    pub seed: u64,
    pub index: usize,
}

const REJECTION_ATTEMPTS: usize = 50;

/// Cell-snapped box sampled from the spec's size range.
fn sample_box(spec: &DatasetSpec, rng: &mut SplitMix64) -> BoxCxCyWH {
    let (gw, gh) = (spec.grid_w as f64, spec.grid_h as f64);
    let min_cw = ((spec.min_size * gw).round() as usize).max(1);
    let max_cw = ((spec.max_size * gw).round() as usize).max(min_cw).min(spec.grid_w);
    let min_ch = ((spec.min_size * gh).round() as usize).max(1);
    let max_ch = ((spec.max_size * gh).round() as usize).max(min_ch).min(spec.grid_h);
    let cw = min_cw + rng.next_below(max_cw - min_cw + 1);
    let ch = min_ch + rng.next_below(max_ch - min_ch + 1);
    let x0 = rng.next_below(spec.grid_w - cw + 1);
    let y0 = rng.next_below(spec.grid_h - ch + 1);
    BoxCxCyWH::new(
        (x0 as f64 + cw as f64 / 2.0) / gw,
        (y0 as f64 + ch as f64 / 2.0) / gh,
        cw as f64 / gw,
        ch as f64 / gh,
    )
}

/// Cells whose centers fall inside the (cell-snapped) box.
pub fn box_cells(spec: &DatasetSpec, bbox: BoxCxCyWH) -> Vec<(usize, usize)> {
    let [x1, y1, x2, y2] = bbox.to_xyxy();
    let mut cells = Vec::new();
    for h in 0..spec.grid_h {
        let cy = (h as f64 + 0.5) / spec.grid_h as f64;
        if cy < y1 || cy > y2 {
            continue;
        }
        for w in 0..spec.grid_w {
            let cx = (w as f64 + 0.5) / spec.grid_w as f64;
            if cx >= x1 && cx <= x2 {
                cells.push((h, w));
            }
        }
    }
    cells
}

/// Fixed per-class channel palette plus a class-dependent spatial pattern.
fn class_pattern(class_id: usize, channel: usize, h: usize, w: usize) -> f64 {
    let weight = match (class_id + channel) % 3 {
        0 => 1.0,
        1 => 0.55,
        _ => 0.25,
    };
    let modulation = match class_id % 3 {
        0 => 1.0,
        1 => {
            if (h + w) % 2 == 0 {
                1.0
            } else {
                0.6
            }
        }
        _ => {
            if w % 2 == 0 {
                1.0
            } else {
                0.7
            }
        }
    };
    weight * modulation
}

/// Generate scene `index` from the spec. Pure in (seed, index).
pub fn generate_scene(spec: &DatasetSpec, index: usize) -> Result<SceneSample, SceneError> {
    if index >= spec.n_scenes {
        return Err(SceneError::IndexOutOfRange(index, spec.n_scenes));
    }
    let mut rng = SplitMix64::with_stream(spec.seed, index as u64 + 1);
    let n_objects = if spec.max_objects == 0 { 0 } else { rng.next_below(spec.max_objects + 1) };

    let mut gts: Vec<GroundTruth> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = false;
        for _ in 0..REJECTION_ATTEMPTS {
            let candidate = sample_box(spec, &mut rng);
            let ok = gts
                .iter()
                .all(|g| iou_xyxy(g.bbox.to_xyxy(), candidate.to_xyxy()) <= spec.max_overlap_iou);
            if ok {
                gts.push(GroundTruth { class_id: rng.next_below(spec.n_classes), bbox: candidate });
                placed = true;
                break;
            }
        }
        if !placed {
            // Deterministic fallback: this object is dropped and the scene
            // simply has fewer objects.
            continue;
        }
    }

    let mut features = vec![0.0; spec.tokens() * spec.c_in];
    for gt in &gts {
        let intensity = rng.uniform(spec.min_intensity, spec.max_intensity);
        for (h, w) in box_cells(spec, gt.bbox) {
            for ch in 0..spec.c_in {
                features[(h * spec.grid_w + w) * spec.c_in + ch] +=
                    intensity * class_pattern(gt.class_id, ch, h, w);
            }
        }
    }
    for f in &mut features {
        *f += rng.uniform(-spec.noise_amplitude, spec.noise_amplitude);
    }

    Ok(SceneSample { features, gts, seed: spec.seed, index })
}

/// Deterministic 90/10 train/val split: indices ordered by a per-index hash,
/// the first 90% (rounded up) train.
pub fn split(spec: &DatasetSpec) -> (Vec<usize>, Vec<usize>) {
    assert!(spec.n_scenes >= 2, "split needs at least two scenes");
    let mut keyed: Vec<(u64, usize)> = (0..spec.n_scenes)
        .map(|i| (SplitMix64::with_stream(spec.seed ^ 0x5157_u64, i as u64).next_u64(), i))
        .collect();
    keyed.sort_unstable();
    let n_train = (spec.n_scenes * 9).div_ceil(10);
    let mut train: Vec<usize> = keyed[..n_train].iter().map(|&(_, i)| i).collect();
    let mut val: Vec<usize> = keyed[n_train..].iter().map(|&(_, i)| i).collect();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Deterministic shuffled batches; the last partial batch is kept.
pub fn batch_iter(
    indices: &[usize],
    batch_size: usize,
    epoch_seed: u64,
) -> impl Iterator<Item = Vec<usize>> {
    assert!(batch_size >= 1);
    let mut order = indices.to_vec();
    SplitMix64::with_stream(epoch_seed, 0xBA7C).shuffle(&mut order);
    let batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.into_iter()
}
