//! Keypoint heatmap codec.
//!
//! Ground-truth keypoints become per-joint Gaussian response maps, and
//! predicted maps are read back into sub-pixel image coordinates. The
//! Gaussian targets are unnormalized with peak 1 so a decoded confidence
//! is directly the peak height, and they are rendered at the real-valued
//! (unrounded) center: quantizing the center to the grid would bake up to
//! half a pixel of error into the labels, which is exactly what sub-pixel
//! decoding is supposed to remove.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default Gaussian width used for target rendering, in heatmap pixels.
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Floor added before taking logs in the Taylor refinement, keeping the
/// log-plane finite on exact zeros.
const LOG_FLOOR: f64 = 1e-12;

/// Visibility flag values follow the COCO convention.
pub const V_NOT_LABELED: u8 = 0;
pub const V_OCCLUDED: u8 = 1;
pub const V_VISIBLE: u8 = 2;

/// One keypoint in image-pixel coordinates.
///
/// `v` is the visibility flag: 0 not labeled, 1 labeled but occluded,
/// 2 labeled and visible. Coordinates are only meaningful when `v > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub v: u8,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, v: u8) -> Self {
        Self { x, y, v }
    }

    /// Whether the keypoint carries a usable annotation.
    pub fn labeled(&self) -> bool {
        self.v > 0
    }
}

/// One person instance: its keypoints plus the per-instance scalars the
/// evaluation metrics need. `area` is the squared target scale. `head_size`
/// is only present in datasets that annotate it, and `score` only on
/// predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseAnnotation {
    pub image_id: i64,
    pub id: i64,
    pub keypoints: Vec<Keypoint>,
    pub area: f64,
    pub head_size: Option<f64>,
    pub score: Option<f64>,
}

impl PoseAnnotation {
    pub fn num_joints(&self) -> usize {
        self.keypoints.len()
    }

    /// Count of keypoints with v > 0.
    pub fn num_labeled(&self) -> usize {
        self.keypoints.iter().filter(|k| k.labeled()).count()
    }
}

/// Geometry linking heatmap coordinates to image coordinates:
/// `image = heatmap * stride + offset`, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeatmapMeta {
    pub stride: usize,
    /// (ox, oy) in image pixels.
    pub offset: (f64, f64),
    pub sigma: f64,
}

impl Default for HeatmapMeta {
    fn default() -> Self {
        Self { stride: 4, offset: (0.0, 0.0), sigma: DEFAULT_SIGMA }
    }
}

impl HeatmapMeta {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("heatmap stride must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !self.offset.0.is_finite() || !self.offset.1.is_finite() {
            return Err(Error::Config("heatmap offset must be finite".into()));
        }
        Ok(())
    }

    /// Image coordinates to (real-valued) heatmap coordinates.
    pub fn to_heatmap(&self, x: f64, y: f64) -> (f64, f64) {
        let s = self.stride as f64;
        ((x - self.offset.0) / s, (y - self.offset.1) / s)
    }

    /// Heatmap coordinates back to image coordinates.
    pub fn to_image(&self, hx: f64, hy: f64) -> (f64, f64) {
        let s = self.stride as f64;
        (hx * s + self.offset.0, hy * s + self.offset.1)
    }
}

/// Per-joint target planes plus the mask saying which joints are labeled.
/// Planes are stored as a [K, H, W] tensor; unlabeled joints have all-zero
/// planes and `joint_mask[k] == false`.
#[derive(Debug, Clone)]
pub struct HeatmapStack {
    pub planes: Tensor,
    pub joint_mask: Vec<bool>,
}

impl HeatmapStack {
    pub fn num_joints(&self) -> usize {
        self.joint_mask.len()
    }
}

/// Sub-pixel refinement applied to the integer argmax during decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Refinement {
    /// Report the integer argmax as-is.
    None,
    /// Shift a quarter pixel per axis toward the larger neighbor. No shift
    /// at plane borders or when the neighbors tie.
    QuarterOffset,
    /// Second-order expansion of the log-plane at the peak: the offset is
    /// -H^-1 grad, clamped to half a pixel per axis. On an exact Gaussian
    /// the log-plane is a quadratic, so the step lands on the true center.
    /// Skipped at borders and whenever the Hessian is not negative
    /// definite, where the expansion has no maximum to find.
    Taylor,
}

impl std::str::FromStr for Refinement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "quarter_offset" => Ok(Self::QuarterOffset),
            "taylor" => Ok(Self::Taylor),
            other => Err(Error::Config(format!(
                "unknown refinement {other:?}; expected none, quarter_offset, or taylor"
            ))),
        }
    }
}

/// Render one instance's keypoints into Gaussian target planes of size
/// `h` x `w` (heatmap pixels). Labeled joints get a full-plane Gaussian
/// with peak at most 1 (exactly 1 only when the center lies on the grid);
/// unlabeled joints get a zero plane and a false mask entry.
pub fn encode(ann: &PoseAnnotation, meta: &HeatmapMeta, h: usize, w: usize) -> Result<HeatmapStack> {
    meta.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("target heatmaps must be non-empty, got {h}x{w}")));
    }
    let k = ann.keypoints.len();
    let mut planes = Tensor::zeros(vec![k, h, w]);
    let mut joint_mask = vec![false; k];
    let denom = 2.0 * meta.sigma * meta.sigma;
    for (j, kp) in ann.keypoints.iter().enumerate() {
        if !kp.labeled() {
            continue;
        }
        if !kp.x.is_finite() || !kp.y.is_finite() {
            return Err(Error::Data(format!(
                "keypoint {j} of annotation {} is labeled but has non-finite coordinates",
                ann.id
            )));
        }
        joint_mask[j] = true;
        let (cx, cy) = meta.to_heatmap(kp.x, kp.y);
        let plane = &mut planes.data_mut()[j * h * w..(j + 1) * h * w];
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                plane[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
            }
        }
    }
    Ok(HeatmapStack { planes, joint_mask })
}

/// Decode a [K, H, W] stack of heatmaps into per-joint keypoints and
/// confidences. The confidence is the plane maximum; joints whose plane
/// peaks at zero or below are reported with `v = 0`, matching how masked
/// joints were encoded. Coordinates are mapped to image pixels via `meta`.
pub fn decode(
    planes: &Tensor,
    meta: &HeatmapMeta,
    refinement: Refinement,
) -> Result<Vec<(Keypoint, f64)>> {
    meta.validate()?;
    let (k, h, w) = planes.dims3("heatmap stack")?;
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot decode empty {h}x{w} heatmap planes")));
    }
    if !planes.all_finite() {
        return Err(Error::Data("heatmaps contain non-finite values".into()));
    }
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let plane = &planes.data()[j * h * w..(j + 1) * h * w];
        let (mx, my, peak) = argmax2d(plane, h, w);
        let (dx, dy) = match refinement {
            Refinement::None => (0.0, 0.0),
            Refinement::QuarterOffset => quarter_offset(plane, h, w, mx, my),
            Refinement::Taylor => taylor_offset(plane, h, w, mx, my),
        };
        let (ix, iy) = meta.to_image(mx as f64 + dx, my as f64 + dy);
        let v = if peak > 0.0 { V_VISIBLE } else { V_NOT_LABELED };
        out.push((Keypoint::new(ix, iy, v), peak));
    }
    Ok(out)
}

/// Row-major first-occurrence argmax: on ties the smallest index wins,
/// which keeps decoding deterministic on degenerate planes.
fn argmax2d(plane: &[f64], h: usize, w: usize) -> (usize, usize, f64) {
    let mut best = 0usize;
    let mut best_v = plane[0];
    for (i, &v) in plane.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let _ = h;
    (best % w, best / w, best_v)
}

fn quarter_offset(plane: &[f64], h: usize, w: usize, mx: usize, my: usize) -> (f64, f64) {
    let at = |x: usize, y: usize| plane[y * w + x];
    let mut dx = 0.0;
    if mx > 0 && mx + 1 < w {
        let diff = at(mx + 1, my) - at(mx - 1, my);
        if diff > 0.0 {
            dx = 0.25;
        } else if diff < 0.0 {
            dx = -0.25;
        }
    }
    let mut dy = 0.0;
    if my > 0 && my + 1 < h {
        let diff = at(mx, my + 1) - at(mx, my - 1);
        if diff > 0.0 {
            dy = 0.25;
        } else if diff < 0.0 {
            dy = -0.25;
        }
    }
    (dx, dy)
}

fn taylor_offset(plane: &[f64], h: usize, w: usize, mx: usize, my: usize) -> (f64, f64) {
    if mx == 0 || my == 0 || mx + 1 >= w || my + 1 >= h {
        return (0.0, 0.0);
    }
    // Negative responses carry no peak mass; treat them as zero so the log
    // stays real on raw network output.
    let at = |x: usize, y: usize| (plane[y * w + x].max(0.0) + LOG_FLOOR).ln();
    let c = at(mx, my);
    let gx = (at(mx + 1, my) - at(mx - 1, my)) / 2.0;
    let gy = (at(mx, my + 1) - at(mx, my - 1)) / 2.0;
    let dxx = at(mx + 1, my) - 2.0 * c + at(mx - 1, my);
    let dyy = at(mx, my + 1) - 2.0 * c + at(mx, my - 1);
    let dxy =
        (at(mx + 1, my + 1) - at(mx - 1, my + 1) - at(mx + 1, my - 1) + at(mx - 1, my - 1)) / 4.0;
    let det = dxx * dyy - dxy * dxy;
    if !(dxx < 0.0 && det > 0.0) {
        return (0.0, 0.0);
    }
    // delta = -H^-1 grad with H = [[dxx, dxy], [dxy, dyy]].
    let dx = -(dyy * gx - dxy * gy) / det;
    let dy = -(dxx * gy - dxy * gx) / det;
    (dx.clamp(-0.5, 0.5), dy.clamp(-0.5, 0.5))
}
