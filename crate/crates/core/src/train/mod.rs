//! Momentum SGD training with a stepped learning-rate schedule, CSV loss
//! logs and checkpoints.

mod checkpoint;

pub use checkpoint::{Checkpoint, Record, CONFIG_RECORD, ITER_RECORD};

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{augment, jitter_boxes, lesion_slice_refs, make_sample, AugmentConfig, DataError, InputMode, InputSpec, LabeledVolume, Sample, SliceRef};
use crate::loss::{multibox_loss, LossConfig, LossError};
use crate::model::{build_model, Model, ModelConfig, ModelError, ParamStore};
use crate::priors::{match_priors, BoxError, PriorSet, DEFAULT_MATCH_THRESHOLD};
use crate::tensor::{Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no lesion-bearing slices in the training volumes")]
    EmptyDataset,
    #[error("iteration {iter}: loss is not finite")]
    NonFiniteLoss { iter: usize },
    #[error("iteration {iter}: non-finite gradient for `{param}`")]
    NonFiniteGradient { iter: usize, param: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("checkpoint does not fit the model: {0}")]
    CheckpointContent(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Reference schedule length and drop points; other lengths scale the drops.
pub const REFERENCE_ITERATIONS: usize = 10_000;
pub const REFERENCE_DROPS: [usize; 2] = [5_000, 8_000];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_drop_iters: Vec<usize>,
    pub lr_drop_factor: f64,
    /// Box jitter bound applied to every training sample.
    pub jitter_alpha: f64,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub augment: AugmentConfig,
    pub input_mode: InputMode,
    pub match_threshold: f64,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Desk-scale defaults: 2000 iterations of batch 8 with drops at 1000 and 1600.
    pub fn desk(seed: u64) -> Self {
        let iterations = 2000;
        TrainConfig {
            iterations,
            batch_size: 8,
            lr0: 0.0005,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_drop_iters: scaled_drops(iterations),
            lr_drop_factor: 0.1,
            jitter_alpha: 0.01,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
            input_mode: InputMode::AllPhases,
            match_threshold: DEFAULT_MATCH_THRESHOLD,
            checkpoint_every: 0,
            seed,
        }
    }

    /// Sets the iteration count and rescales the drop points with it.
    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self.lr_drop_iters = scaled_drops(iterations);
        self
    }

    pub fn input_spec(&self) -> InputSpec {
        InputSpec { size: self.model.input_size, slices_per_phase: self.model.slices_per_phase, mode: self.input_mode }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.iterations == 0 {
            return err("iterations must be positive".into());
        }
        // Batch norm over 1x1 maps needs two values per channel.
        if self.batch_size < 2 {
            return err(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.lr_drop_iters.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("lr drops {:?} must be strictly increasing", self.lr_drop_iters));
        }
        if self.lr_drop_iters.last().is_some_and(|&d| d >= self.iterations) {
            return err(format!("lr drops {:?} must lie below {} iterations", self.lr_drop_iters, self.iterations));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return err("lr must be positive, momentum in [0, 1), weight decay non-negative".into());
        }
        if !(self.jitter_alpha >= 0.0 && self.jitter_alpha < 1.0) {
            return err(format!("jitter alpha {} must be in [0, 1)", self.jitter_alpha));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Reference drop points scaled to `iterations`.
pub fn scaled_drops(iterations: usize) -> Vec<usize> {
    REFERENCE_DROPS.iter().map(|&d| d * iterations / REFERENCE_ITERATIONS).collect()
}

/// `lr0 * factor^(drops at or before iter)`.
pub fn lr_at(iter: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.lr_drop_iters.iter().filter(|&&d| d <= iter).count();
    cfg.lr0 * cfg.lr_drop_factor.powi(drops as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdParams {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v = momentum * v + grad + wd * param; param -= lr * v`, with weight
/// decay only on convolution kernels. Missing gradients count as zero.
/// Nothing is updated when any gradient is non-finite.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &[Option<&Tensor<f32>>],
    velocity: &mut [Vec<f32>],
    hp: SgdParams,
) -> Result<(), String> {
    assert_eq!(grads.len(), params.len());
    assert_eq!(velocity.len(), params.len());
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            assert_eq!(g.shape(), params.get(i).value.shape(), "gradient shape of {}", params.get(i).name);
            if !g.all_finite() {
                return Err(params.get(i).name.clone());
            }
        }
    }
    let (lr, mom) = (hp.lr as f32, hp.momentum as f32);
    for (i, (p, v)) in params.iter_mut().zip(velocity.iter_mut()).enumerate() {
        let wd = if p.kind.decays() { hp.weight_decay as f32 } else { 0.0 };
        let g = grads[i].map(|g| g.data());
        for (j, (w, vel)) in p.value.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            let grad = g.map_or(0.0, |g| g[j]);
            *vel = mom * *vel + grad + wd * *w;
            *w -= lr * *vel;
        }
    }
    Ok(())
}

/// Model, optimiser velocity and the index of the next iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model<f32>,
    pub velocity: Vec<Vec<f32>>,
    pub iter: usize,
}

impl TrainState {
    /// Fresh Xavier-initialised state; parameters come from RNG stream 0 of `seed`.
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self, TrainError> {
        let model: Model<f32> = build_model(model, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let velocity = model.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        Ok(TrainState { model, velocity, iter: 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub total: f64,
    pub conf: f64,
    pub loc: f64,
}

pub const LOG_HEADER: &str = "iter,lr,loss_total,loss_conf,loss_loc";

impl LogRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.iter, self.lr, self.total, self.conf, self.loc)
    }
}

/// RNG of iteration `iter`: its own ChaCha stream, so any iteration can be
/// replayed without running the ones before it.
pub fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64 + 1);
    rng
}

/// Draws a batch with replacement, then augments and jitters each sample.
pub fn draw_batch(cfg: &TrainConfig, volumes: &[LabeledVolume], pool: &[SliceRef], iter: usize) -> Result<Vec<Sample>, TrainError> {
    if pool.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = iteration_rng(cfg.seed, iter);
    let spec = cfg.input_spec();
    (0..cfg.batch_size)
        .map(|_| {
            let at = pool[rng.gen_range(0..pool.len())];
            let s = make_sample(volumes, at, &spec)?;
            let mut s = augment(&s, &mut rng, &cfg.augment)?;
            s.gts = jitter_boxes(&s.gts, cfg.jitter_alpha, &mut rng);
            Ok(s)
        })
        .collect()
}

/// Stacks `[C, S, S]` inputs into one `[N, C, S, S]` tensor.
pub fn batch_tensor(samples: &[Sample]) -> Result<Tensor<f32>, TensorError> {
    if samples.is_empty() {
        return Err(TensorError::Shape { op: "batch", detail: "empty batch".into() });
    }
    let shape = samples[0].input.shape();
    let mut data = Vec::with_capacity(samples.len() * samples[0].input.len());
    for s in samples {
        if s.input.shape() != shape {
            return Err(TensorError::Shape { op: "batch", detail: format!("{:?} vs {:?}", s.input.shape(), shape) });
        }
        data.extend_from_slice(s.input.data());
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Tensor::new(&full, data)
}

/// One optimisation step on `batch`; advances `state.iter`.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, priors: &PriorSet, batch: &[Sample]) -> Result<LogRow, TrainError> {
    let iter = state.iter;
    let matches = batch
        .iter()
        .map(|s| match_priors(priors, &s.gts, cfg.match_threshold))
        .collect::<Result<Vec<_>, _>>()?;
    let mut g = Graph::new();
    let p = state.model.bind(&mut g, true);
    let x = g.constant(batch_tensor(batch)?);
    let out = state.model.forward(&mut g, &p, x, true)?;
    let loss = multibox_loss(&mut g, out.loc, out.conf, &matches, &cfg.loss).map_err(|e| match e {
        LossError::NonFinite(_) => TrainError::NonFiniteLoss { iter },
        e => e.into(),
    })?;
    let total = g.value(loss.total).data()[0] as f64;
    if !total.is_finite() {
        return Err(TrainError::NonFiniteLoss { iter });
    }
    g.backward(loss.total)?;
    let grads: Vec<Option<&Tensor<f32>>> = (0..state.model.params.len()).map(|i| g.grad(p.var(i))).collect();
    let lr = lr_at(iter, cfg);
    let hp = SgdParams { lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay };
    sgd_step(&mut state.model.params, &grads, &mut state.velocity, hp)
        .map_err(|param| TrainError::NonFiniteGradient { iter, param })?;
    state.model.apply_bn_stats(&out.bn_stats);
    state.iter += 1;
    Ok(LogRow { iter, lr, total, conf: loss.conf, loc: loss.loc })
}

/// Where and how a run persists its progress.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Receives `log.csv` and `checkpoint.gssd`.
    pub out_dir: Option<&'a Path>,
    /// Run configuration echoed into checkpoints.
    pub config_text: &'a str,
    /// Continue from this state instead of a fresh initialisation.
    pub resume: Option<TrainState>,
    /// Stop before this iteration instead of `iterations`.
    pub stop_at: Option<usize>,
}

pub const LOG_FILE: &str = "log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.gssd";

pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

fn open_log(dir: &Path, fresh: bool) -> Result<BufWriter<File>, TrainError> {
    let path = dir.join(LOG_FILE);
    let io = |source| TrainError::Io { path: path.clone(), source };
    let exists = path.exists();
    let file = if fresh || !exists {
        let mut f = File::create(&path).map_err(io)?;
        writeln!(f, "{LOG_HEADER}").map_err(io)?;
        f
    } else {
        OpenOptions::new().append(true).open(&path).map_err(io)?
    };
    Ok(BufWriter::new(file))
}

/// Runs the training loop over the lesion-bearing slices of `train_volumes`.
/// `on_iter` sees the state after every step and may abort the run.
pub fn train(
    cfg: &TrainConfig,
    volumes: &[LabeledVolume],
    train_volumes: &[usize],
    opts: TrainOptions<'_>,
    mut on_iter: impl FnMut(&TrainState, &LogRow) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let pool = lesion_slice_refs(volumes, train_volumes);
    if pool.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut state = match opts.resume {
        Some(s) => s,
        None => TrainState::init(&cfg.model, cfg.seed)?,
    };
    let priors = state.model.priors();
    let end = opts.stop_at.unwrap_or(cfg.iterations).min(cfg.iterations);
    let mut log_file = match opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|source| TrainError::Io { path: dir.to_path_buf(), source })?;
            Some(open_log(dir, state.iter == 0)?)
        }
        None => None,
    };
    let save = |state: &TrainState| -> Result<(), TrainError> {
        match opts.out_dir {
            Some(dir) => Checkpoint::from_state(state, opts.config_text).save(&dir.join(CHECKPOINT_FILE)),
            None => Ok(()),
        }
    };
    let mut log = Vec::new();
    while state.iter < end {
        let batch = draw_batch(cfg, volumes, &pool, state.iter)?;
        let row = train_step(&mut state, cfg, &priors, &batch)?;
        if let Some(f) = log_file.as_mut() {
            let path = opts.out_dir.map(|d| d.join(LOG_FILE)).unwrap_or_default();
            writeln!(f, "{}", row.csv()).map_err(|source| TrainError::Io { path, source })?;
        }
        log.push(row);
        if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 && state.iter < end {
            save(&state)?;
        }
        on_iter(&state, &row)?;
    }
    if let Some(mut f) = log_file {
        f.flush().map_err(|source| TrainError::Io { path: opts.out_dir.unwrap_or(Path::new(".")).join(LOG_FILE), source })?;
    }
    save(&state)?;
    Ok(TrainOutcome { state, log })
}

#[cfg(test)]
mod tests;
