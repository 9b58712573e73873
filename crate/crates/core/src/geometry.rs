//! Axis-aligned 3D boxes: IoU, corners, greedy NMS and the proposal upper bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A box described by its center and full extent along each axis, in meters.
///
/// Construction rejects non-positive or non-finite sizes, so every value of this
/// type has a strictly positive volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct AxisAlignedBox {
    center: [f64; 3],
    size: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    center: [f64; 3],
    size: [f64; 3],
}

impl TryFrom<RawBox> for AxisAlignedBox {
    type Error = Error;
    fn try_from(raw: RawBox) -> Result<Self> {
        AxisAlignedBox::new(raw.center, raw.size)
    }
}

impl From<AxisAlignedBox> for RawBox {
    fn from(b: AxisAlignedBox) -> Self {
        RawBox {
            center: b.center,
            size: b.size,
        }
    }
}

impl AxisAlignedBox {
    pub fn new(center: [f64; 3], size: [f64; 3]) -> Result<Self> {
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite center {center:?}")));
        }
        if size.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidBox(format!("non-positive size {size:?}")));
        }
        Ok(Self { center, size })
    }

    /// Builds a box from `[cx, cy, cz, sx, sy, sz]`.
    pub fn from_array(v: [f64; 6]) -> Result<Self> {
        Self::new([v[0], v[1], v[2]], [v[3], v[4], v[5]])
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [cx, cy, cz] = self.center;
        let [sx, sy, sz] = self.size;
        [cx, cy, cz, sx, sy, sz]
    }

    pub fn center(&self) -> [f64; 3] {
        self.center
    }

    pub fn size(&self) -> [f64; 3] {
        self.size
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn min_corner(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] - 0.5 * self.size[i])
    }

    pub fn max_corner(&self) -> [f64; 3] {
        std::array::from_fn(|i| self.center[i] + 0.5 * self.size[i])
    }

    pub fn translated(&self, by: [f64; 3]) -> Self {
        Self {
            center: std::array::from_fn(|i| self.center[i] + by[i]),
            size: self.size,
        }
    }

    pub fn distance(&self, other: &AxisAlignedBox) -> f64 {
        (0..3)
            .map(|i| (self.center[i] - other.center[i]).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

fn overlap_1d(a_min: f64, a_max: f64, b_min: f64, b_max: f64) -> f64 {
    (a_max.min(b_max) - a_min.max(b_min)).max(0.0)
}

/// Intersection-over-union of two boxes, computed from exact per-axis overlaps.
pub fn box_iou(a: &AxisAlignedBox, b: &AxisAlignedBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (amin, amax) = (a.min_corner(), a.max_corner());
    let (bmin, bmax) = (b.min_corner(), b.max_corner());
    let mut inter = 1.0;
    for i in 0..3 {
        inter *= overlap_1d(amin[i], amax[i], bmin[i], bmax[i]);
    }
    let union = a.volume() + b.volume() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// The eight corners, ordered lexicographically over (x, y, z) with the
/// negative half-extent first: `(-,-,-), (-,-,+), (-,+,-), ... , (+,+,+)`.
pub fn box_corners(b: &AxisAlignedBox) -> [[f64; 3]; 8] {
    let (lo, hi) = (b.min_corner(), b.max_corner());
    std::array::from_fn(|k| {
        let pick = |axis: usize| {
            if (k >> (2 - axis)) & 1 == 0 {
                lo[axis]
            } else {
                hi[axis]
            }
        };
        [pick(0), pick(1), pick(2)]
    })
}

/// Center followed by the flattened corners: the 27 geometric attribute values.
pub fn geometric_attributes(b: &AxisAlignedBox) -> [f64; 27] {
    let mut out = [0.0; 27];
    out[..3].copy_from_slice(&b.center);
    for (k, corner) in box_corners(b).iter().enumerate() {
        out[3 + 3 * k..6 + 3 * k].copy_from_slice(corner);
    }
    out
}

/// Greedy non-maximum suppression. Returns kept indices in descending score
/// order; equal scores keep the lower index first.
pub fn nms(boxes: &[AxisAlignedBox], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::Shape(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "iou threshold {iou_threshold} outside (0, 1)"
        )));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));

    let mut suppressed = vec![false; boxes.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && box_iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    Ok(kept)
}

/// Best IoU any proposal reaches against the ground truth box.
pub fn grounding_upper_bound(proposals: &[AxisAlignedBox], gt: &AxisAlignedBox) -> Result<f64> {
    proposals
        .iter()
        .map(|p| box_iou(p, gt))
        .reduce(f64::max)
        .ok_or(Error::Empty("proposal list"))
}
