//! Inference (decode, threshold, per-class NMS), average precision,
//! cross-validation and throughput measurement.

mod ap;
mod cv;

pub use ap::{average_precision, ApResult, PrPoint};
pub use cv::{
    benchmark, cross_validate, train_and_validate, write_pr_csv, BenchmarkReport, CvConfig, EvalReport, FoldResult,
    AP_TRACE_FILE, PR_FILE, REPORT_FILE,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{slice_input, DataError, InputSpec, PhaseVolume};
use crate::model::{Model, ModelError};
use crate::priors::{decode, nms, BoundingBox, PriorSet, Variances, DEFAULT_NMS_THRESHOLD, DEFAULT_TOP_K};
use crate::tensor::{Tensor, TensorError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("average precision is undefined without ground truths or detections")]
    Undefined,
    #[error("invalid evaluation setting: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {msg}")]
    Format { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    /// Minimum IoU for a detection to count as a hit.
    pub iou_threshold: f64,
    /// Slices pushed through the network together.
    pub batch: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: 0.01,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
            top_k: DEFAULT_TOP_K,
            iou_threshold: 0.5,
            batch: 8,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !self.conf_threshold.is_finite() || !(0.0..=1.0).contains(&self.nms_threshold) || !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(EvalError::Config("thresholds must be finite, NMS and IoU thresholds in [0, 1]".into()));
        }
        if self.top_k == 0 || self.batch == 0 || self.threads == 0 {
            return Err(EvalError::Config("top_k, batch and threads must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    /// Slice index within the volume, or image index within an evaluation set.
    pub slice_z: usize,
    pub bbox: BoundingBox,
    pub class: usize,
    /// Softmax probability of `class`.
    pub confidence: f64,
}

/// Turns one image's `[P, 4]` offsets and `[P, K]` logits into detections.
/// Boxes are clipped to the image; ones that collapse are dropped.
pub fn postprocess(loc: &[f32], conf: &[f32], priors: &PriorSet, slice_z: usize, cfg: &EvalConfig) -> Vec<Detection> {
    let p = priors.len();
    let k = conf.len() / p;
    let var = Variances::default();
    let mut probs = vec![0.0f64; p * k];
    for i in 0..p {
        let row = &conf[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v as f64));
        let sum: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        for c in 0..k {
            probs[i * k + c] = (row[c] as f64 - m).exp() / sum;
        }
    }
    let mut out = Vec::new();
    for class in 1..k {
        let mut cands: Vec<(BoundingBox, f64)> = Vec::new();
        for i in 0..p {
            let score = probs[i * k + class];
            if score <= cfg.conf_threshold {
                continue;
            }
            let off = [loc[i * 4] as f64, loc[i * 4 + 1] as f64, loc[i * 4 + 2] as f64, loc[i * 4 + 3] as f64];
            let b = decode(&off, priors.center(i), var).clamped();
            if b.width() > 0.0 && b.height() > 0.0 {
                cands.push((b, score));
            }
        }
        for idx in nms(&cands, cfg.nms_threshold, cfg.top_k) {
            out.push(Detection { slice_z, bbox: cands[idx].0, class, confidence: cands[idx].1 });
        }
    }
    // Stable: equal confidences keep class order.
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    out.truncate(cfg.top_k);
    out
}

/// Runs the model in inference mode over `inputs` (each `[C, S, S]`),
/// labelling detections with the paired image index.
pub fn detect_inputs(model: &Model<f32>, inputs: &[(usize, Tensor<f32>)], cfg: &EvalConfig) -> Result<Vec<Detection>, EvalError> {
    cfg.validate()?;
    let priors = model.priors();
    let run = |chunk: &[(usize, Tensor<f32>)]| -> Result<Vec<Detection>, EvalError> {
        let mut dets = Vec::new();
        for group in chunk.chunks(cfg.batch) {
            let shape = group[0].1.shape();
            let mut data = Vec::with_capacity(group.len() * group[0].1.data().len());
            for (_, t) in group {
                if t.shape() != shape {
                    return Err(EvalError::Config(format!("input shapes {:?} and {:?} differ", shape, t.shape())));
                }
                data.extend_from_slice(t.data());
            }
            let batch = Tensor::new(&[group.len(), shape[0], shape[1], shape[2]], data)?;
            let (loc, conf) = model.predict(batch)?;
            let (p, k) = (priors.len(), model.config.n_classes);
            for (n, (z, _)) in group.iter().enumerate() {
                let l = &loc.data()[n * p * 4..(n + 1) * p * 4];
                let c = &conf.data()[n * p * k..(n + 1) * p * k];
                dets.extend(postprocess(l, c, &priors, *z, cfg));
            }
        }
        Ok(dets)
    };
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    if cfg.threads == 1 {
        return run(inputs);
    }
    // Contiguous chunks, joined in order, so the output does not depend on scheduling.
    let per = inputs.len().div_ceil(cfg.threads).max(cfg.batch);
    let parts: Vec<Result<Vec<Detection>, EvalError>> = std::thread::scope(|s| {
        let handles: Vec<_> = inputs.chunks(per).map(|c| s.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("detection worker panicked")).collect()
    });
    let mut out = Vec::new();
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Detections for every slice of a volume.
pub fn detect(model: &Model<f32>, pv: &PhaseVolume, spec: &InputSpec, cfg: &EvalConfig) -> Result<Vec<Detection>, EvalError> {
    if pv.phases() != model.config.phases {
        return Err(EvalError::Config(format!("volume has {} phases, model expects {}", pv.phases(), model.config.phases)));
    }
    let inputs = (0..pv.depth()).map(|z| Ok((z, slice_input(pv, z, spec)?))).collect::<Result<Vec<_>, DataError>>()?;
    detect_inputs(model, &inputs, cfg)
}

pub const DETECTIONS_HEADER: &str = "slice,x_min,y_min,x_max,y_max,class,confidence";

pub fn detections_csv(dets: &[Detection]) -> String {
    let mut s = String::from(DETECTIONS_HEADER);
    s.push('\n');
    for d in dets {
        let b = &d.bbox;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", d.slice_z, b.x_min, b.y_min, b.x_max, b.y_max, d.class, d.confidence);
    }
    s
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<(), EvalError> {
    std::fs::write(path, detections_csv(dets)).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
}

pub fn read_detections(path: &Path) -> Result<Vec<Detection>, EvalError> {
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
    let fail = |line: usize, msg: String| EvalError::Format { path: path.to_path_buf(), line, msg };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DETECTIONS_HEADER => {}
        _ => return Err(fail(1, format!("expected header `{DETECTIONS_HEADER}`"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 7 {
            return Err(fail(i + 1, format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| fail(i + 1, format!("`{s}`: {e}")));
        let int = |s: &str| s.parse::<usize>().map_err(|e| fail(i + 1, format!("`{s}`: {e}")));
        let bbox = BoundingBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?).map_err(|e| fail(i + 1, e.to_string()))?;
        out.push(Detection { slice_z: int(f[0])?, bbox, class: int(f[5])?, confidence: num(f[6])? });
    }
    Ok(out)
}
