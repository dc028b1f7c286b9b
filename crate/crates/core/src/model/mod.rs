//! The grouped single shot multibox detector.
//!
//! Layout: a width-scaled VGG16 backbone (every convolution followed by batch
//! norm and relu, split into one group per phase when `grouped`), four extra
//! feature layers, six tap points, per-tap 1x1 channel-selector convolutions,
//! and 3x3 localisation/classification heads.
//!
//! Head outputs are flattened scale-major, then row-major by cell, then by
//! default box, which is the order produced by [`crate::priors::generate_priors`].

mod config;
mod params;

pub use config::{default_aspect_ratios, ModelConfig, TAP_COUNT};
pub use params::{Param, ParamKind, ParamStore, RunningStats, Stage};

use rand::Rng;
use thiserror::Error;

use crate::priors::{generate_priors, PriorSet};
use crate::tensor::{
    xavier_uniform, BatchNormMode, BatchStats, ConvSpec, Float, Graph, PoolSpec, Tensor, TensorError, Var,
};
use config::{Reduction, EXTRAS, FC_WIDTH, VGG_STAGES};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match expected [N, {channels}, {size}, {size}]")]
    InputShape { got: Vec<usize>, channels: usize, size: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
    weight: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum BackboneLayer {
    /// Convolution, batch norm, relu.
    Conv(ConvLayer),
    Pool(PoolSpec),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TapBlock {
    /// Backbone layer whose output is tapped.
    pub layer: usize,
    pub channels: usize,
    pub size: usize,
    pub boxes: usize,
    fusion: Vec<(usize, usize)>,
    loc: (usize, usize),
    conf: (usize, usize),
}

/// Parameters recorded in a graph, by parameter id. Entries are `None` when
/// a staged evaluation did not need them.
pub struct BoundParams(Vec<Option<Var>>);

impl BoundParams {
    pub fn var(&self, id: usize) -> Var {
        self.0[id].unwrap_or_else(|| panic!("parameter {id} not bound in this graph"))
    }

    pub fn get(&self, id: usize) -> Option<Var> {
        self.0[id]
    }
}

pub struct ForwardOutput<T> {
    /// `[N, P, 4]` encoded box offsets.
    pub loc: Var,
    /// `[N, P, K]` class logits.
    pub conf: Var,
    /// Tapped backbone features before fusion, finest first.
    pub features: Vec<Var>,
    /// Batch statistics per running-stat slot, training mode only.
    pub bn_stats: Vec<(usize, BatchStats<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub running: Vec<RunningStats<T>>,
    backbone: Vec<BackboneLayer>,
    taps: Vec<TapBlock>,
}

struct Builder<'r, T, R: Rng + ?Sized> {
    params: ParamStore<T>,
    running: Vec<RunningStats<T>>,
    backbone: Vec<BackboneLayer>,
    rng: &'r mut R,
}

impl<T: Float, R: Rng + ?Sized> Builder<'_, T, R> {
    fn conv(&mut self, name: String, in_c: usize, out_c: usize, kernel: usize, spec: ConvSpec) -> Result<(), ModelError> {
        let stage = Stage::Backbone(self.backbone.len());
        let shape = [out_c, in_c / spec.groups, kernel, kernel];
        let w = xavier_uniform(&shape, self.rng)?;
        let weight = self.params.push(format!("backbone.{name}.weight"), w, ParamKind::Weight, stage);
        let gamma = self.params.push(format!("backbone.{name}.bn.gamma"), Tensor::full(&[out_c], T::one())?, ParamKind::BnGamma, stage);
        let beta = self.params.push(format!("backbone.{name}.bn.beta"), Tensor::zeros(&[out_c])?, ParamKind::BnBeta, stage);
        self.running.push(RunningStats::new(out_c));
        let stats = self.running.len() - 1;
        self.backbone.push(BackboneLayer::Conv(ConvLayer {
            name,
            in_channels: in_c,
            out_channels: out_c,
            kernel,
            spec,
            weight,
            gamma,
            beta,
            stats,
        }));
        Ok(())
    }

    fn head_conv(&mut self, name: String, in_c: usize, out_c: usize, kernel: usize, tap: usize) -> Result<(usize, usize), ModelError> {
        let stage = Stage::Tap(tap);
        let w = xavier_uniform(&[out_c, in_c, kernel, kernel], self.rng)?;
        let wi = self.params.push(format!("{name}.weight"), w, ParamKind::Weight, stage);
        let bi = self.params.push(format!("{name}.bias"), Tensor::zeros(&[out_c])?, ParamKind::Bias, stage);
        Ok((wi, bi))
    }
}

/// Builds a Xavier-initialised model. Parameters are drawn from `rng` in
/// layer order, so equal seeds give identical models.
pub fn build_model<T: Float, R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Model<T>, ModelError> {
    config.validate()?;
    let groups = config.groups();
    let sizes = config.tap_sizes()?;
    let mut b = Builder { params: ParamStore::new(), running: Vec::new(), backbone: Vec::new(), rng };
    let pool = PoolSpec { kernel: 2, stride: 2, ceil_mode: true };
    let same = ConvSpec::new(1, 1, groups);

    let mut in_c = config.input_channels();
    let mut tap_layers = Vec::with_capacity(TAP_COUNT);
    let mut tap_channels = Vec::with_capacity(TAP_COUNT);
    for (s, &(reference, reps)) in VGG_STAGES.iter().enumerate() {
        if s > 0 {
            b.backbone.push(BackboneLayer::Pool(pool));
        }
        let out_c = config.width(reference);
        for r in 0..reps {
            b.conv(format!("conv{}_{}", s + 1, r + 1), in_c, out_c, 3, same)?;
            in_c = out_c;
        }
        if s == 3 {
            tap_layers.push(b.backbone.len() - 1);
            tap_channels.push(in_c);
        }
    }
    let fc = config.width(FC_WIDTH);
    b.conv("fc6".into(), in_c, fc, 3, same)?;
    b.conv("fc7".into(), fc, fc, 1, ConvSpec::new(1, 0, groups))?;
    in_c = fc;
    tap_layers.push(b.backbone.len() - 1);
    tap_channels.push(in_c);

    for (i, &(squeeze, expand)) in EXTRAS.iter().enumerate() {
        let (sq, ex) = (config.width(squeeze), config.width(expand));
        b.conv(format!("conv{}_1", i + 8), in_c, sq, 1, ConvSpec::new(1, 0, groups))?;
        let spec = match ModelConfig::extra_reduction(i, sizes[i + 1]) {
            Reduction::Strided => ConvSpec::new(2, 1, groups),
            Reduction::Valid => ConvSpec::new(1, 0, groups),
        };
        b.conv(format!("conv{}_2", i + 8), sq, ex, 3, spec)?;
        in_c = ex;
        tap_layers.push(b.backbone.len() - 1);
        tap_channels.push(in_c);
    }

    let mut taps = Vec::with_capacity(TAP_COUNT);
    for t in 0..TAP_COUNT {
        let c = tap_channels[t];
        let boxes = config.boxes_per_cell[t];
        let fusion = (0..config.n_fusion_convs)
            .map(|k| b.head_conv(format!("fusion.{t}.{k}"), c, c, 1, t))
            .collect::<Result<Vec<_>, _>>()?;
        let loc = b.head_conv(format!("head.{t}.loc"), c, boxes * 4, 3, t)?;
        let conf = b.head_conv(format!("head.{t}.conf"), c, boxes * config.n_classes, 3, t)?;
        taps.push(TapBlock { layer: tap_layers[t], channels: c, size: sizes[t], boxes, fusion, loc, conf });
    }

    Ok(Model { config: config.clone(), params: b.params, running: b.running, backbone: b.backbone, taps })
}

/// Cached per-stage outputs of one forward pass, used to re-evaluate the
/// network cheaply after perturbing the parameters of a single stage.
pub struct StagedForward<T> {
    input: Tensor<T>,
    layer_out: Vec<Tensor<T>>,
    head_loc: Vec<Tensor<T>>,
    head_conf: Vec<Tensor<T>>,
}

impl<T: Float> Model<T> {
    pub fn backbone(&self) -> &[BackboneLayer] {
        &self.backbone
    }

    pub fn taps(&self) -> &[TapBlock] {
        &self.taps
    }

    /// Base name of every running-statistics slot, e.g. `backbone.conv1_1.bn`.
    pub fn running_stat_names(&self) -> Vec<String> {
        let mut names = vec![String::new(); self.running.len()];
        for layer in &self.backbone {
            if let BackboneLayer::Conv(c) = layer {
                names[c.stats] = format!("backbone.{}.bn", c.name);
            }
        }
        names
    }

    pub fn prior_count(&self) -> usize {
        self.taps.iter().map(|t| t.size * t.size * t.boxes).sum()
    }

    pub fn priors(&self) -> PriorSet {
        generate_priors(&self.config.prior_layout().expect("validated at build time"))
    }

    /// Same model in another precision.
    pub fn cast<U: Float>(&self) -> Model<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.push(p.name.clone(), p.value.cast(), p.kind, p.stage);
        }
        let running = self
            .running
            .iter()
            .map(|r| RunningStats {
                mean: r.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                var: r.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            })
            .collect();
        Model { config: self.config.clone(), params, running, backbone: self.backbone.clone(), taps: self.taps.clone() }
    }

    /// Records parameters as graph leaves, trainable or constant.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        self.bind_where(g, trainable, |_| true)
    }

    fn bind_where(&self, g: &mut Graph<T>, trainable: bool, keep: impl Fn(Stage) -> bool) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .map(|p| keep(p.stage).then(|| g.leaf(p.value.clone(), trainable)))
                .collect(),
        )
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let (c, s) = (self.config.input_channels(), self.config.input_size);
        match shape {
            [_, ch, h, w] if *ch == c && *h == s && *w == s => Ok(()),
            _ => Err(ModelError::InputShape { got: shape.to_vec(), channels: c, size: s }),
        }
    }

    fn run_layer(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        i: usize,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<(usize, BatchStats<T>)>), ModelError> {
        match &self.backbone[i] {
            BackboneLayer::Pool(spec) => Ok((g.max_pool2d(x, *spec)?, None)),
            BackboneLayer::Conv(layer) => {
                let y = g.conv2d(x, p.var(layer.weight), None, layer.spec)?;
                let eps = T::from_f64_lossy(BN_EPS);
                let stats = &self.running[layer.stats];
                let mode = if training {
                    BatchNormMode::Train
                } else {
                    BatchNormMode::Eval { mean: &stats.mean, var: &stats.var }
                };
                let (y, batch) = g.batch_norm(y, p.var(layer.gamma), p.var(layer.beta), mode, eps)?;
                Ok((g.relu(y), batch.map(|b| (layer.stats, b))))
            }
        }
    }

    /// Fusion and heads of tap `t`; returns flattened `[N, HWB, 4]` and `[N, HWB, K]`.
    fn run_tap(&self, g: &mut Graph<T>, p: &BoundParams, t: usize, feature: Var) -> Result<(Var, Var), ModelError> {
        let tap = &self.taps[t];
        let mut h = feature;
        for (k, &(w, b)) in tap.fusion.iter().enumerate() {
            if k > 0 {
                h = g.relu(h);
            }
            h = g.conv2d(h, p.var(w), Some(p.var(b)), ConvSpec::default())?;
        }
        let n = g.shape(h)[0];
        let rows = tap.size * tap.size * tap.boxes;
        let mut flat = |(w, b): (usize, usize), width: usize| -> Result<Var, ModelError> {
            let y = g.conv2d(h, p.var(w), Some(p.var(b)), ConvSpec::new(1, 1, 1))?;
            let y = g.permute(y, &[0, 2, 3, 1])?;
            Ok(g.reshape(y, &[n, rows, width])?)
        };
        let loc = flat(tap.loc, 4)?;
        let conf = flat(tap.conf, self.config.n_classes)?;
        Ok((loc, conf))
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, input: Var, training: bool) -> Result<ForwardOutput<T>, ModelError> {
        self.check_input(g.shape(input))?;
        let mut x = input;
        let mut features = Vec::with_capacity(TAP_COUNT);
        let mut bn_stats = Vec::new();
        let mut next_tap = 0;
        for i in 0..self.backbone.len() {
            let (y, stats) = self.run_layer(g, p, i, x, training)?;
            bn_stats.extend(stats);
            x = y;
            if next_tap < TAP_COUNT && self.taps[next_tap].layer == i {
                features.push(x);
                next_tap += 1;
            }
        }
        let mut locs = Vec::with_capacity(TAP_COUNT);
        let mut confs = Vec::with_capacity(TAP_COUNT);
        for (t, &f) in features.iter().enumerate() {
            let (l, c) = self.run_tap(g, p, t, f)?;
            locs.push(l);
            confs.push(c);
        }
        let loc = g.concat(&locs, 1)?;
        let conf = g.concat(&confs, 1)?;
        Ok(ForwardOutput { loc, conf, features, bn_stats })
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        for (slot, s) in stats {
            self.running[*slot].update(s, momentum);
        }
    }

    /// Inference helper: `[N, P, 4]` offsets and `[N, P, K]` logits as plain tensors.
    pub fn predict(&self, input: Tensor<T>) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.forward(&mut g, &p, x, false)?;
        Ok((g.value(out.loc).clone(), g.value(out.conf).clone()))
    }

    /// Full evaluation that caches every stage output.
    pub fn staged_forward(&self, input: &Tensor<T>, training: bool) -> Result<StagedForward<T>, ModelError> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(input.clone());
        self.check_input(input.shape())?;
        let mut cur = x;
        let mut layer_out = Vec::with_capacity(self.backbone.len());
        for i in 0..self.backbone.len() {
            cur = self.run_layer(&mut g, &p, i, cur, training)?.0;
            layer_out.push(g.value(cur).clone());
        }
        let mut head_loc = Vec::new();
        let mut head_conf = Vec::new();
        for t in 0..TAP_COUNT {
            let f = g.constant(layer_out[self.taps[t].layer].clone());
            let (l, c) = self.run_tap(&mut g, &p, t, f)?;
            head_loc.push(g.value(l).clone());
            head_conf.push(g.value(c).clone());
        }
        Ok(StagedForward { input: input.clone(), layer_out, head_loc, head_conf })
    }

    /// Re-evaluates `(loc, conf)` in `g` assuming only parameters of `changed`
    /// differ from the ones `cache` was computed with. Upstream stages are
    /// replayed from the cache as constants.
    pub fn forward_from(
        &self,
        cache: &StagedForward<T>,
        changed: Stage,
        g: &mut Graph<T>,
        training: bool,
    ) -> Result<(Var, Var), ModelError> {
        let (first_layer, affected_tap): (usize, Option<usize>) = match changed {
            Stage::Backbone(i) => (i, None),
            Stage::Tap(t) => (self.backbone.len(), Some(t)),
        };
        let needs = |s: Stage| match s {
            Stage::Backbone(i) => i >= first_layer,
            Stage::Tap(t) => affected_tap.map_or(self.taps[t].layer >= first_layer, |a| a == t),
        };
        let p = self.bind_where(g, false, needs);
        let mut features: Vec<Option<Var>> = vec![None; TAP_COUNT];
        if first_layer < self.backbone.len() {
            let mut cur = if first_layer == 0 {
                g.constant(cache.input.clone())
            } else {
                g.constant(cache.layer_out[first_layer - 1].clone())
            };
            for i in first_layer..self.backbone.len() {
                cur = self.run_layer(g, &p, i, cur, training)?.0;
                if let Some(t) = self.taps.iter().position(|tap| tap.layer == i) {
                    features[t] = Some(cur);
                }
            }
        }
        let mut locs = Vec::with_capacity(TAP_COUNT);
        let mut confs = Vec::with_capacity(TAP_COUNT);
        for t in 0..TAP_COUNT {
            let recompute = features[t].is_some() || affected_tap == Some(t);
            if recompute {
                let f = match features[t] {
                    Some(f) => f,
                    None => g.constant(cache.layer_out[self.taps[t].layer].clone()),
                };
                let (l, c) = self.run_tap(g, &p, t, f)?;
                locs.push(l);
                confs.push(c);
            } else {
                locs.push(g.constant(cache.head_loc[t].clone()));
                confs.push(g.constant(cache.head_conf[t].clone()));
            }
        }
        Ok((g.concat(&locs, 1)?, g.concat(&confs, 1)?))
    }
}
