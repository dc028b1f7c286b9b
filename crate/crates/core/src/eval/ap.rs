use super::{Detection, EvalError};
use crate::priors::{iou, GroundTruth};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApResult {
    pub ap: f64,
    /// One point per ranked detection.
    pub curve: Vec<PrPoint>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub ground_truths: usize,
}

/// All-point interpolated AP. `gts[i]` are the ground truths of image `i`,
/// matched against detections whose `slice_z` is `i`; a detection only hits
/// a ground truth of its own class.
pub fn average_precision(dets: &[Detection], gts: &[Vec<GroundTruth>], iou_threshold: f64) -> Result<ApResult, EvalError> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 && dets.is_empty() {
        return Err(EvalError::Undefined);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.total_cmp(&dets[a].confidence).then(dets[a].slice_z.cmp(&dets[b].slice_z)).then(a.cmp(&b))
    });
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve = Vec::with_capacity(dets.len());
    for i in order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(slice) = gts.get(d.slice_z) {
            for (j, g) in slice.iter().enumerate() {
                if taken[d.slice_z][j] || g.class != d.class {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
        }
        match best {
            Some((j, _)) => {
                taken[d.slice_z][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
        curve.push(PrPoint { recall, precision: tp as f64 / (tp + fp) as f64 });
    }
    let ap = if n_gt == 0 {
        0.0
    } else {
        // Precision envelope, then the area under the recall steps.
        let mut env: Vec<f64> = curve.iter().map(|p| p.precision).collect();
        for i in (0..env.len().saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        let mut area = 0.0;
        let mut prev = 0.0;
        for (p, e) in curve.iter().zip(&env) {
            area += (p.recall - prev) * e;
            prev = p.recall;
        }
        area
    };
    Ok(ApResult { ap, curve, true_positives: tp, false_positives: fp, ground_truths: n_gt })
}
