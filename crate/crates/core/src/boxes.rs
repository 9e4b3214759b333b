//! Box representations and the L1/GIoU box loss.
//!
//! Everything exists twice: as plain value-level functions (used by matching
//! costs and AP evaluation, where no gradient is needed) and as tape
//! operations over `[n, 4]` arrays (used inside loss graphs).

use serde::{Deserialize, Serialize};

use crate::grad::{DiffArray, GradError, Tape};

pub const L1_WEIGHT: f64 = 5.0;
pub const GIOU_WEIGHT: f64 = 2.0;

/// Center-size box in normalized [0, 1] coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCxCyWH {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCxCyWH {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_xyxy(self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn from_xyxy(b: [f64; 4]) -> Self {
        Self {
            cx: (b[0] + b[2]) / 2.0,
            cy: (b[1] + b[3]) / 2.0,
            w: b[2] - b[0],
            h: b[3] - b[1],
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union of corner boxes; 0 when both are degenerate.
pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU − (enclosure − union) / enclosure, in (−1, 1].
/// A zero-area enclosure (both boxes degenerate at one point) yields 0.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    let enc = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    if enc <= 0.0 {
        return 0.0;
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (enc - union) / enc
}

/// 5·‖pred−target‖₁ (center-size space) + 2·(1 − GIoU) (corner space).
pub fn box_loss(pred: BoxCxCyWH, target: BoxCxCyWH) -> f64 {
    let l1 = (pred.cx - target.cx).abs()
        + (pred.cy - target.cy).abs()
        + (pred.w - target.w).abs()
        + (pred.h - target.h).abs();
    L1_WEIGHT * l1 + GIOU_WEIGHT * (1.0 - giou_xyxy(pred.to_xyxy(), target.to_xyxy()))
}

const EPS: f64 = 1e-9;

/// Per-pair box loss over `[n, 4]` center-size arrays, returned as `[n, 1]`,
/// with the default 5/2 weights. Gradients flow into `pred` only if it is a
/// trainable node.
pub fn box_loss_pairs(
    t: &mut Tape,
    pred: DiffArray,
    target: DiffArray,
) -> Result<DiffArray, GradError> {
    box_loss_pairs_weighted(t, pred, target, L1_WEIGHT, GIOU_WEIGHT)
}

/// [`box_loss_pairs`] with explicit L1 / GIoU weights.
pub fn box_loss_pairs_weighted(
    t: &mut Tape,
    pred: DiffArray,
    target: DiffArray,
    l1_weight: f64,
    giou_weight: f64,
) -> Result<DiffArray, GradError> {
    let col = |t: &mut Tape, x: DiffArray, i: usize| t.slice_cols(x, i, i + 1);
    let (pcx, pcy, pw, ph) = (col(t, pred, 0)?, col(t, pred, 1)?, col(t, pred, 2)?, col(t, pred, 3)?);
    let (tcx, tcy, tw, th) = (
        col(t, target, 0)?,
        col(t, target, 1)?,
        col(t, target, 2)?,
        col(t, target, 3)?,
    );

    // L1 in center-size space.
    let mut l1 = {
        let d = t.sub(pcx, tcx)?;
        t.abs(d)
    };
    for (p, q) in [(pcy, tcy), (pw, tw), (ph, th)] {
        let d = t.sub(p, q)?;
        let a = t.abs(d);
        l1 = t.add(l1, a)?;
    }

    // Corner form for both boxes.
    let corners = |t: &mut Tape,
                   cx: DiffArray,
                   cy: DiffArray,
                   w: DiffArray,
                   h: DiffArray|
     -> Result<(DiffArray, DiffArray, DiffArray, DiffArray), GradError> {
        let hw = t.scale(w, 0.5);
        let hh = t.scale(h, 0.5);
        Ok((t.sub(cx, hw)?, t.sub(cy, hh)?, t.add(cx, hw)?, t.add(cy, hh)?))
    };
    let (ax1, ay1, ax2, ay2) = corners(t, pcx, pcy, pw, ph)?;
    let (bx1, by1, bx2, by2) = corners(t, tcx, tcy, tw, th)?;

    let ix2 = t.minimum(ax2, bx2)?;
    let ix1 = t.maximum(ax1, bx1)?;
    let iy2 = t.minimum(ay2, by2)?;
    let iy1 = t.maximum(ay1, by1)?;
    let iwd = t.sub(ix2, ix1)?;
    let iw = t.relu(iwd);
    let ihd = t.sub(iy2, iy1)?;
    let ih = t.relu(ihd);
    let inter = t.mul(iw, ih)?;

    let area_a = t.mul(pw, ph)?;
    let area_b = t.mul(tw, th)?;
    let sum_areas = t.add(area_a, area_b)?;
    let union = t.sub(sum_areas, inter)?;

    // Guard denominators with max(·, EPS) rather than +EPS so the loss is
    // exact (GIoU = 1, zero loss) for identical boxes of positive area.
    let n = t.shape(union)[0];
    let eps_node = t.constant(&[n, 1], vec![EPS; n])?;
    let union_eps = t.maximum(union, eps_node)?;
    let iou = t.div(inter, union_eps)?;

    let ex2 = t.maximum(ax2, bx2)?;
    let ex1 = t.minimum(ax1, bx1)?;
    let ey2 = t.maximum(ay2, by2)?;
    let ey1 = t.minimum(ay1, by1)?;
    let ew = t.sub(ex2, ex1)?;
    let eh = t.sub(ey2, ey1)?;
    let enc = t.mul(ew, eh)?;
    let enc_eps = t.maximum(enc, eps_node)?;
    let excess = t.sub(enc, union)?;
    let penalty = t.div(excess, enc_eps)?;
    let giou = t.sub(iou, penalty)?;

    // l1_weight·L1 + giou_weight·(1 − GIoU)
    let l1w = t.scale(l1, l1_weight);
    let gw = t.affine(giou, -giou_weight, giou_weight);
    t.add(l1w, gw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::finite_diff_grad;
    use crate::params::{ParamStore, Tensor};
    use crate::rng::SplitMix64;

    fn rand_box(rng: &mut SplitMix64) -> BoxCxCyWH {
        let w = rng.uniform(0.05, 0.5);
        let h = rng.uniform(0.05, 0.5);
        BoxCxCyWH::new(rng.uniform(w / 2.0, 1.0 - w / 2.0), rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h)
    }

    #[test]
    fn corner_conversion() {
        let b = BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(b.to_xyxy(), [0.0, 0.0, 1.0, 1.0]);
        let p = BoxCxCyWH::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(p.to_xyxy(), [0.5, 0.5, 0.5, 0.5]);

        let mut rng = SplitMix64::new(11);
        for _ in 0..100 {
            let b = rand_box(&mut rng);
            let rt = BoxCxCyWH::from_xyxy(b.to_xyxy());
            assert!((rt.cx - b.cx).abs() < 1e-12);
            assert!((rt.w - b.w).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_values() {
        assert_eq!(iou_xyxy([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        assert_eq!(iou_xyxy([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]), 0.0);
        let v = iou_xyxy([0.0, 0.0, 2.0, 2.0], [1.0, 1.0, 3.0, 3.0]);
        assert!((v - 1.0 / 7.0).abs() < 1e-12);
        // Degenerate vs degenerate -> 0 by convention.
        assert_eq!(iou_xyxy([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn giou_values() {
        assert_eq!(giou_xyxy([0.0, 0.0, 1.0, 1.0], [0.0, 0.0, 1.0, 1.0]), 1.0);
        let v = giou_xyxy([0.0, 0.0, 1.0, 1.0], [1.0, 1.0, 2.0, 2.0]);
        assert!((v + 0.5).abs() < 1e-12);
        let v = giou_xyxy([0.0, 0.0, 1.0, 1.0], [9.0, 0.0, 10.0, 1.0]);
        assert!((v + 0.8).abs() < 1e-12);
        assert_eq!(giou_xyxy([0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]), 0.0);
    }

    #[test]
    fn giou_properties() {
        let mut rng = SplitMix64::new(21);
        for _ in 0..500 {
            let a = rand_box(&mut rng).to_xyxy();
            let b = rand_box(&mut rng).to_xyxy();
            let g = giou_xyxy(a, b);
            let i = iou_xyxy(a, b);
            assert!(g <= i + 1e-12);
            assert!((-1.0..=1.0).contains(&g));
            // Symmetry.
            assert!((g - giou_xyxy(b, a)).abs() < 1e-12);
            // Translation invariance.
            let shift = |x: [f64; 4]| [x[0] + 0.3, x[1] - 0.2, x[2] + 0.3, x[3] - 0.2];
            assert!((g - giou_xyxy(shift(a), shift(b))).abs() < 1e-10);
        }
    }

    #[test]
    fn box_loss_values() {
        let b = BoxCxCyWH::new(0.5, 0.5, 1.0, 1.0);
        assert_eq!(box_loss(b, b), 0.0);

        // Shift cx by 0.1: L1 = 0.5; GIoU = 9/11 so the GIoU term is 4/11.
        let shifted = BoxCxCyWH::new(0.6, 0.5, 1.0, 1.0);
        let expected = 0.5 + 2.0 * (2.0 / 11.0);
        assert!((box_loss(shifted, b) - expected).abs() < 1e-12);

        let mut rng = SplitMix64::new(31);
        for _ in 0..200 {
            assert!(box_loss(rand_box(&mut rng), rand_box(&mut rng)) >= 0.0);
        }
    }

    #[test]
    fn graph_box_loss_matches_value_level() {
        let mut rng = SplitMix64::new(41);
        for _ in 0..50 {
            let p = rand_box(&mut rng);
            let q = rand_box(&mut rng);
            let mut t = Tape::new();
            let pd = t.constant(&[1, 4], vec![p.cx, p.cy, p.w, p.h]).unwrap();
            let qd = t.constant(&[1, 4], vec![q.cx, q.cy, q.w, q.h]).unwrap();
            let l = box_loss_pairs(&mut t, pd, qd).unwrap();
            assert!((t.values(l)[0] - box_loss(p, q)).abs() < 1e-7);
        }
    }

    #[test]
    fn graph_box_loss_gradcheck() {
        let mut rng = SplitMix64::new(51);
        let mut checked = 0;
        while checked < 20 {
            let p = rand_box(&mut rng);
            let q = rand_box(&mut rng);
            // Stay away from L1 kinks and min/max ties.
            if (p.cx - q.cx).abs() < 1e-3
                || (p.cy - q.cy).abs() < 1e-3
                || (p.w - q.w).abs() < 1e-3
                || (p.h - q.h).abs() < 1e-3
            {
                continue;
            }
            checked += 1;
            let mut params = ParamStore::new();
            params.insert("p", Tensor::new(vec![1, 4], vec![p.cx, p.cy, p.w, p.h])).unwrap();
            let fd = finite_diff_grad(
                |ps: &ParamStore| {
                    let mut t = Tape::new();
                    let pd = t.constant(&[1, 4], ps.get("p").unwrap().data.clone()).unwrap();
                    let qd = t.constant(&[1, 4], vec![q.cx, q.cy, q.w, q.h]).unwrap();
                    let l = box_loss_pairs(&mut t, pd, qd).unwrap();
                    t.values(l)[0]
                },
                &mut params,
                1e-6,
            );
            let mut t = Tape::new();
            let pd = t.leaf(&[1, 4], params.get("p").unwrap().data.clone()).unwrap();
            let qd = t.constant(&[1, 4], vec![q.cx, q.cy, q.w, q.h]).unwrap();
            let l = box_loss_pairs(&mut t, pd, qd).unwrap();
            let s = t.sum_all(l);
            t.backward(s).unwrap();
            for (a, e) in t.grad(pd).iter().zip(&fd[0].1) {
                let rel = (a - e).abs() / a.abs().max(e.abs()).max(1e-6);
                assert!(rel < 1e-4, "{a} vs {e}");
            }
        }
    }
}
