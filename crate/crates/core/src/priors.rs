//! Default boxes, IoU, prior/ground-truth matching, offset coding, and NMS.
//!
//! All geometry is in normalised image coordinates and computed in `f64`.
//! Ties are broken by the lowest index everywhere so every result is
//! deterministic.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoxError {
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) has non-positive width or height")]
    Degenerate { x_min: f64, y_min: f64, x_max: f64, y_max: f64 },
    #[error("box coordinate is not finite")]
    NonFinite,
}

/// Corner-form box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// A box with positive width and height.
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, BoxError> {
        let b = BoundingBox { x_min, y_min, x_max, y_max };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), BoxError> {
        let c = [self.x_min, self.y_min, self.x_max, self.y_max];
        if c.iter().any(|v| !v.is_finite()) {
            return Err(BoxError::NonFinite);
        }
        if self.x_max <= self.x_min || self.y_max <= self.y_min {
            let BoundingBox { x_min, y_min, x_max, y_max } = *self;
            return Err(BoxError::Degenerate { x_min, y_min, x_max, y_max });
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn clamped(&self) -> Self {
        BoundingBox {
            x_min: self.x_min.clamp(0.0, 1.0),
            y_min: self.y_min.clamp(0.0, 1.0),
            x_max: self.x_max.clamp(0.0, 1.0),
            y_max: self.y_max.clamp(0.0, 1.0),
        }
    }

    /// Coordinate-wise union (smallest box containing both).
    pub fn union(&self, other: &Self) -> Self {
        BoundingBox {
            x_min: self.x_min.min(other.x_min),
            y_min: self.y_min.min(other.y_min),
            x_max: self.x_max.max(other.x_max),
            y_max: self.y_max.max(other.y_max),
        }
    }

    pub fn to_center(&self) -> CenterBox {
        let (cx, cy) = self.center();
        CenterBox { cx, cy, w: self.width(), h: self.height() }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Center-form box `(cx, cy, w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl CenterBox {
    pub fn to_corners(&self) -> BoundingBox {
        BoundingBox {
            x_min: self.cx - self.w / 2.0,
            y_min: self.cy - self.h / 2.0,
            x_max: self.cx + self.w / 2.0,
            y_max: self.cy + self.h / 2.0,
        }
    }
}

/// Intersection over union; zero for disjoint or degenerate boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Offset scaling applied to encoded centers and log-sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variances {
    pub center: f64,
    pub size: f64,
}

impl Default for Variances {
    fn default() -> Self {
        Variances { center: 0.1, size: 0.2 }
    }
}

/// Encodes `gt` relative to `prior` as `(dx, dy, dw, dh)` regression targets.
pub fn encode(gt: &BoundingBox, prior: &CenterBox, var: Variances) -> Result<[f64; 4], BoxError> {
    gt.validate()?;
    let g = gt.to_center();
    Ok([
        (g.cx - prior.cx) / (prior.w * var.center),
        (g.cy - prior.cy) / (prior.h * var.center),
        (g.w / prior.w).ln() / var.size,
        (g.h / prior.h).ln() / var.size,
    ])
}

/// Inverse of [`encode`].
pub fn decode(offsets: &[f64; 4], prior: &CenterBox, var: Variances) -> BoundingBox {
    CenterBox {
        cx: prior.cx + offsets[0] * var.center * prior.w,
        cy: prior.cy + offsets[1] * var.center * prior.h,
        w: prior.w * (offsets[2] * var.size).exp(),
        h: prior.h * (offsets[3] * var.size).exp(),
    }
    .to_corners()
}

/// Geometry of the multi-scale default box grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorLayout {
    /// Square feature-map extents, finest first.
    pub feature_sizes: Vec<usize>,
    /// Extra aspect ratios per map; each `r` adds an `r` and a `1/r` box.
    pub aspect_ratios: Vec<Vec<f64>>,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl PriorLayout {
    /// Default boxes per cell of map `k`: two unit-aspect boxes plus a pair per ratio.
    pub fn boxes_per_cell(&self, k: usize) -> usize {
        2 + 2 * self.aspect_ratios[k].len()
    }

    /// Scale of map `k` (zero based); `k == len` gives the virtual next scale.
    pub fn scale(&self, k: usize) -> f64 {
        let m = self.feature_sizes.len();
        if m <= 1 {
            return self.scale_min;
        }
        self.scale_min + (self.scale_max - self.scale_min) * k as f64 / (m - 1) as f64
    }

    pub fn prior_count(&self) -> usize {
        self.feature_sizes
            .iter()
            .enumerate()
            .map(|(k, &f)| f * f * self.boxes_per_cell(k))
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorMeta {
    pub map: usize,
    pub scale: f64,
    pub aspect: f64,
}

/// Default boxes in head-output order: map, then row-major cell, then box.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSet {
    boxes: Vec<CenterBox>,
    meta: Vec<PriorMeta>,
    pub variances: Variances,
}

impl PriorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn center(&self, i: usize) -> &CenterBox {
        &self.boxes[i]
    }

    pub fn corners(&self, i: usize) -> BoundingBox {
        self.boxes[i].to_corners()
    }

    pub fn meta(&self, i: usize) -> &PriorMeta {
        &self.meta[i]
    }

    pub fn boxes(&self) -> &[CenterBox] {
        &self.boxes
    }

    /// Builds a set from explicit center-form boxes (tests, custom grids).
    pub fn from_boxes(boxes: Vec<CenterBox>, variances: Variances) -> Self {
        let meta = boxes.iter().map(|b| PriorMeta { map: 0, scale: b.w.max(b.h), aspect: b.w / b.h }).collect();
        PriorSet { boxes, meta, variances }
    }
}

/// Tiles default boxes over every feature map and clamps them to the image.
pub fn generate_priors(layout: &PriorLayout) -> PriorSet {
    let mut boxes = Vec::with_capacity(layout.prior_count());
    let mut meta = Vec::with_capacity(layout.prior_count());
    for (k, &f) in layout.feature_sizes.iter().enumerate() {
        let s = layout.scale(k);
        let s_extra = (s * layout.scale(k + 1)).sqrt();
        let mut shapes = vec![(s, s, 1.0), (s_extra, s_extra, 1.0)];
        for &ar in &layout.aspect_ratios[k] {
            let r = ar.sqrt();
            shapes.push((s * r, s / r, ar));
            shapes.push((s / r, s * r, 1.0 / ar));
        }
        for i in 0..f {
            for j in 0..f {
                let cx = (j as f64 + 0.5) / f as f64;
                let cy = (i as f64 + 0.5) / f as f64;
                for &(w, h, aspect) in &shapes {
                    boxes.push(CenterBox { cx, cy, w: w.clamp(0.0, 1.0), h: h.clamp(0.0, 1.0) });
                    meta.push(PriorMeta { map: k, scale: s, aspect });
                }
            }
        }
    }
    PriorSet { boxes, meta, variances: Variances::default() }
}

/// A labelled target box. Class 0 is reserved for background.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub bbox: BoundingBox,
    pub class: usize,
}

/// Prior to ground-truth assignment for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Matched ground-truth index per prior, `None` for background.
    pub matched_gt: Vec<Option<usize>>,
    /// Number of matched priors.
    pub n_matched: usize,
    /// Encoded regression targets per prior (zero for background).
    pub encoded_targets: Vec<[f64; 4]>,
    /// Class per prior, 0 for background.
    pub class_targets: Vec<usize>,
}

impl MatchResult {
    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.matched_gt.iter().enumerate().filter_map(|(i, m)| m.map(|_| i))
    }
}

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.5;

/// Two-phase matching: every ground truth first claims its best prior
/// (globally greedy by IoU, regardless of threshold); then each unclaimed
/// prior whose best IoU exceeds `threshold` joins its best ground truth.
pub fn match_priors(priors: &PriorSet, gts: &[GroundTruth], threshold: f64) -> Result<MatchResult, BoxError> {
    let p = priors.len();
    let corners: Vec<BoundingBox> = (0..p).map(|i| priors.corners(i)).collect();
    let ious: Vec<Vec<f64>> = gts.iter().map(|gt| corners.iter().map(|c| iou(&gt.bbox, c)).collect()).collect();

    let mut matched_gt: Vec<Option<usize>> = vec![None; p];
    let mut gt_done = vec![false; gts.len()];
    for _ in 0..gts.len() {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..p {
            if matched_gt[i].is_some() {
                continue;
            }
            for (j, row) in ious.iter().enumerate() {
                if gt_done[j] {
                    continue;
                }
                // Strictly greater keeps the lowest prior, then lowest gt, on ties.
                if best.is_none_or(|(v, _, _)| row[i] > v) {
                    best = Some((row[i], i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        matched_gt[i] = Some(j);
        gt_done[j] = true;
    }
    if !gts.is_empty() {
        for (i, slot) in matched_gt.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            let (j, v) = ious
                .iter()
                .enumerate()
                .map(|(j, row)| (j, row[i]))
                .fold((0, f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
            if v > threshold {
                *slot = Some(j);
            }
        }
    }

    let mut encoded_targets = vec![[0.0; 4]; p];
    let mut class_targets = vec![0; p];
    let mut n_matched = 0;
    for (i, m) in matched_gt.iter().enumerate() {
        if let Some(j) = *m {
            encoded_targets[i] = encode(&gts[j].bbox, priors.center(i), priors.variances)?;
            class_targets[i] = gts[j].class;
            n_matched += 1;
        }
    }
    Ok(MatchResult { matched_gt, n_matched, encoded_targets, class_targets })
}

pub const DEFAULT_NMS_THRESHOLD: f64 = 0.45;
pub const DEFAULT_TOP_K: usize = 200;

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
pub fn nms(boxes: &[(BoundingBox, f64)], iou_threshold: f64, top_k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| boxes[b].1.total_cmp(&boxes[a].1).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        if kept.iter().all(|&k| iou(&boxes[k].0, &boxes[i].0) <= iou_threshold) {
            kept.push(i);
        }
    }
    kept
}
