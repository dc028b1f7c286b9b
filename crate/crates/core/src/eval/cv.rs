use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use super::{average_precision, detect, detect_inputs, Detection, EvalConfig, EvalError, PrPoint};
use crate::data::{lesion_slice_refs, make_sample, split_folds, InputSpec, LabeledVolume, PhaseVolume};
use crate::model::Model;
use crate::priors::GroundTruth;
use crate::tensor::Tensor;
use crate::train::{train, LogRow, TrainConfig, TrainError, TrainOptions, REFERENCE_ITERATIONS};

pub const REPORT_FILE: &str = "report.csv";
pub const PR_FILE: &str = "pr.csv";
pub const AP_TRACE_FILE: &str = "ap.csv";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CvConfig {
    pub folds: usize,
    /// Validate every this many iterations, and always after the last one.
    pub val_every: usize,
    /// Validations before this iteration are logged but never count as best.
    pub val_start: usize,
    pub fold_seed: u64,
    pub eval: EvalConfig,
}

impl CvConfig {
    /// Five folds, validation every 500 iterations, best AP taken from the
    /// second half of the schedule.
    pub fn for_iterations(iterations: usize, fold_seed: u64) -> Self {
        CvConfig {
            folds: 5,
            val_every: 500,
            val_start: 5000 * iterations / REFERENCE_ITERATIONS,
            fold_seed,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub best_ap: f64,
    pub best_iter: usize,
    /// PR curve of the best validation.
    pub best_curve: Vec<PrPoint>,
    /// `(iteration, AP)` of every validation.
    pub ap_trace: Vec<(usize, f64)>,
    pub log: Vec<LogRow>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    /// Folds whose training or validation failed, with the error text.
    pub failures: Vec<(usize, String)>,
    pub timing: Option<BenchmarkReport>,
}

impl EvalReport {
    pub fn mean_ap(&self) -> Option<f64> {
        (!self.folds.is_empty()).then(|| self.folds.iter().map(|f| f.best_ap).sum::<f64>() / self.folds.len() as f64)
    }

    pub fn report_csv(&self) -> String {
        let mut s = String::from("fold,best_ap,best_iter\n");
        for f in &self.folds {
            let _ = writeln!(s, "{},{},{}", f.fold, f.best_ap, f.best_iter);
        }
        s
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io { path: path.to_path_buf(), source }
}

pub fn write_pr_csv(path: &Path, curve: &[PrPoint]) -> Result<(), EvalError> {
    let mut s = String::from("recall,precision\n");
    for p in curve {
        let _ = writeln!(s, "{},{}", p.recall, p.precision);
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Windowed inputs and fused ground truths of every lesion-bearing slice
/// of `val`, indexed by position.
fn validation_set(volumes: &[LabeledVolume], val: &[usize], spec: &InputSpec) -> Result<(Vec<(usize, Tensor<f32>)>, Vec<Vec<GroundTruth>>), EvalError> {
    let refs = lesion_slice_refs(volumes, val);
    if refs.is_empty() {
        return Err(EvalError::Config("validation volumes have no lesion-bearing slices".into()));
    }
    let mut inputs = Vec::with_capacity(refs.len());
    let mut gts = Vec::with_capacity(refs.len());
    for (i, &at) in refs.iter().enumerate() {
        let s = make_sample(volumes, at, spec)?;
        inputs.push((i, s.input));
        gts.push(s.gts);
    }
    Ok((inputs, gts))
}

/// Trains on `train_idx` and tracks validation AP on `val_idx`.
pub fn train_and_validate(
    cfg: &TrainConfig,
    cv: &CvConfig,
    volumes: &[LabeledVolume],
    train_idx: &[usize],
    val_idx: &[usize],
    out_dir: Option<&Path>,
    config_text: &str,
) -> Result<FoldResult, EvalError> {
    cv.eval.validate()?;
    if cv.val_every == 0 {
        return Err(EvalError::Config("validation interval must be positive".into()));
    }
    let (inputs, gts) = validation_set(volumes, val_idx, &cfg.input_spec())?;
    let mut trace: Vec<(usize, f64)> = Vec::new();
    let mut best: Option<(f64, usize, Vec<PrPoint>)> = None;
    let mut failure: Option<EvalError> = None;
    let opts = TrainOptions { out_dir, config_text, ..Default::default() };
    let outcome = train(cfg, volumes, train_idx, opts, |state, _| {
        let it = state.iter;
        if it % cv.val_every != 0 && it != cfg.iterations {
            return Ok(());
        }
        let scored = detect_inputs(&state.model, &inputs, &cv.eval).and_then(|d| average_precision(&d, &gts, cv.eval.iou_threshold));
        match scored {
            Ok(r) => {
                trace.push((it, r.ap));
                let counts = it >= cv.val_start || it == cfg.iterations;
                if counts && best.as_ref().map_or(true, |b| r.ap > b.0) {
                    best = Some((r.ap, it, r.curve));
                }
                Ok(())
            }
            Err(e) => {
                failure = Some(e);
                Err(TrainError::Config(format!("validation failed at iteration {it}")))
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let outcome = outcome?;
    let (best_ap, best_iter, best_curve) = best.ok_or_else(|| EvalError::Config("no validation was run".into()))?;
    if let Some(dir) = out_dir {
        let mut s = String::from("iter,ap\n");
        for (it, ap) in &trace {
            let _ = writeln!(s, "{it},{ap}");
        }
        let p = dir.join(AP_TRACE_FILE);
        fs::write(&p, s).map_err(io_err(&p))?;
        write_pr_csv(&dir.join(PR_FILE), &best_curve)?;
    }
    Ok(FoldResult {
        fold: 0,
        train: train_idx.to_vec(),
        val: val_idx.to_vec(),
        best_ap,
        best_iter,
        best_curve,
        ap_trace: trace,
        log: outcome.log,
    })
}

/// K-fold cross-validation over volumes. Every fold trains from the same
/// seed; a failing fold is recorded and the remaining folds still run.
pub fn cross_validate(
    cfg: &TrainConfig,
    cv: &CvConfig,
    volumes: &[LabeledVolume],
    out_dir: Option<&Path>,
    config_text: &str,
) -> Result<EvalReport, EvalError> {
    let folds = split_folds(volumes.len(), cv.folds, cv.fold_seed)?;
    let mut report = EvalReport::default();
    for (i, fold) in folds.iter().enumerate() {
        let dir = out_dir.map(|d| d.join(format!("fold{i}")));
        match train_and_validate(cfg, cv, volumes, &fold.train, &fold.val, dir.as_deref(), config_text) {
            Ok(mut r) => {
                r.fold = i;
                report.folds.push(r);
            }
            Err(e) => report.failures.push((i, e.to_string())),
        }
    }
    if let Some(dir) = out_dir {
        let p = dir.join(REPORT_FILE);
        fs::write(&p, report.report_csv()).map_err(io_err(&p))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub slices: usize,
    pub run_seconds: Vec<f64>,
    pub median_seconds: f64,
    pub slices_per_second: f64,
    pub seconds_per_volume: f64,
    /// Every timed run produced the same detections.
    pub identical: bool,
    pub detections: Vec<Detection>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Times full-volume detection `runs` times after one untimed warm-up.
pub fn benchmark(model: &Model<f32>, pv: &PhaseVolume, spec: &InputSpec, cfg: &EvalConfig, runs: usize) -> Result<BenchmarkReport, EvalError> {
    if runs < 3 {
        return Err(EvalError::Config(format!("benchmark needs at least 3 runs, got {runs}")));
    }
    let reference = detect(model, pv, spec, cfg)?;
    let mut times = Vec::with_capacity(runs);
    let mut identical = true;
    for _ in 0..runs {
        let t = Instant::now();
        let dets = detect(model, pv, spec, cfg)?;
        times.push(t.elapsed().as_secs_f64());
        identical &= dets == reference;
    }
    let med = median(&times);
    let slices = pv.depth();
    Ok(BenchmarkReport {
        slices,
        median_seconds: med,
        slices_per_second: slices as f64 / med,
        seconds_per_volume: med,
        run_seconds: times,
        identical,
        detections: reference,
    })
}
