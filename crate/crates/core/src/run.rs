//! Whole-run configuration: one `key=value` file covering training, model,
//! loss, augmentation, evaluation and cross-validation settings.

use std::collections::BTreeMap;
use std::fmt::{Display, Write as _};

use crate::config::{ConfigError, KeyValues};
use crate::data::{AugmentConfig, InputMode, PORTAL_PHASE};
use crate::eval::{CvConfig, EvalConfig};
use crate::loss::{LossConfig, OhnmRatio};
use crate::model::{default_aspect_ratios, ModelConfig};
use crate::train::{scaled_drops, TrainConfig};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "GSSD_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub cv: CvConfig,
}

/// Picks the seed with flag over environment over file precedence.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, file: Option<u64>) -> Result<u64, ConfigError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Some(v) = env {
        return v.trim().parse().map_err(|e: std::num::ParseIntError| ConfigError::Value {
            key: SEED_ENV.into(),
            value: v.into(),
            msg: e.to_string(),
        });
    }
    file.ok_or_else(|| ConfigError::Missing("seed".into()))
}

fn value_err(key: &str, value: impl Display, msg: impl Display) -> ConfigError {
    ConfigError::Value { key: key.into(), value: value.to_string(), msg: msg.to_string() }
}

impl RunConfig {
    /// Parses a run file. Unset keys take their desk-scale defaults; the
    /// seed must come from the file, `env_seed` or `flag_seed`.
    pub fn parse(text: &str, flag_seed: Option<u64>, env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let kv = KeyValues::parse(text)?;
        let seed = resolve_seed(flag_seed, env_seed, kv.get("seed")?)?;
        let mut t = TrainConfig::desk(seed);

        let m = &mut t.model;
        m.input_size = kv.get_or("model.input_size", m.input_size)?;
        m.phases = kv.get_or("model.phases", m.phases)?;
        m.slices_per_phase = kv.get_or("model.slices_per_phase", m.slices_per_phase)?;
        m.grouped = kv.get_or("model.grouped", m.grouped)?;
        m.double_base = kv.get_or("model.double_base", m.double_base)?;
        m.n_fusion_convs = kv.get_or("model.fusion_convs", m.n_fusion_convs)?;
        m.n_classes = kv.get_or("model.classes", m.n_classes)?;
        m.width_scale = kv.get_or("model.width_scale", m.width_scale)?;
        if let Some(b) = kv.get_list("model.boxes_per_cell")? {
            m.aspect_ratios = default_aspect_ratios(&b);
            m.boxes_per_cell = b;
        }
        m.scale_min = kv.get_or("model.scale_min", m.scale_min)?;
        m.scale_max = kv.get_or("model.scale_max", m.scale_max)?;
        m.allow_unfused_groups = kv.get_or("model.allow_unfused_groups", m.allow_unfused_groups)?;

        t.iterations = kv.get_or("iterations", t.iterations)?;
        t.lr_drop_iters = kv.get_list("lr_drops")?.unwrap_or_else(|| scaled_drops(t.iterations));
        t.batch_size = kv.get_or("batch_size", t.batch_size)?;
        t.lr0 = kv.get_or("lr0", t.lr0)?;
        t.momentum = kv.get_or("momentum", t.momentum)?;
        t.weight_decay = kv.get_or("weight_decay", t.weight_decay)?;
        t.lr_drop_factor = kv.get_or("lr_drop_factor", t.lr_drop_factor)?;
        t.jitter_alpha = kv.get_or("jitter_alpha", t.jitter_alpha)?;
        t.match_threshold = kv.get_or("match_threshold", t.match_threshold)?;
        t.checkpoint_every = kv.get_or("checkpoint_every", t.checkpoint_every)?;
        t.input_mode = match kv.raw("input") {
            None | Some("all") => InputMode::AllPhases,
            Some("portal") => InputMode::SinglePhase(PORTAL_PHASE),
            Some(v) => return Err(value_err("input", v, "expected `all` or `portal`")),
        };

        if let Some(v) = kv.raw("loss.ohnm_ratio") {
            t.loss.ohnm_ratio = v.parse::<OhnmRatio>().map_err(|e| value_err("loss.ohnm_ratio", v, e))?;
        }
        t.loss.localization_weight = kv.get_or("loss.loc_weight", t.loss.localization_weight)?;

        let a = &mut t.augment;
        a.mirror_prob = kv.get_or("augment.mirror_prob", a.mirror_prob)?;
        a.scale_prob = kv.get_or("augment.scale_prob", a.scale_prob)?;
        a.scale_min = kv.get_or("augment.scale_min", a.scale_min)?;
        a.scale_max = kv.get_or("augment.scale_max", a.scale_max)?;
        a.photometric_prob = kv.get_or("augment.photometric_prob", a.photometric_prob)?;
        a.brightness = kv.get_or("augment.brightness", a.brightness)?;
        a.contrast = kv.get_or("augment.contrast", a.contrast)?;
        a.min_box_area_px = kv.get_or("augment.min_box_area_px", a.min_box_area_px)?;

        let mut cv = CvConfig::for_iterations(t.iterations, seed);
        let e = &mut cv.eval;
        e.conf_threshold = kv.get_or("eval.conf_threshold", e.conf_threshold)?;
        e.nms_threshold = kv.get_or("eval.nms_threshold", e.nms_threshold)?;
        e.top_k = kv.get_or("eval.top_k", e.top_k)?;
        e.iou_threshold = kv.get_or("eval.iou_threshold", e.iou_threshold)?;
        e.batch = kv.get_or("eval.batch", e.batch)?;
        cv.folds = kv.get_or("cv.folds", cv.folds)?;
        cv.val_every = kv.get_or("cv.val_every", cv.val_every)?;
        cv.val_start = kv.get_or("cv.val_start", cv.val_start)?;
        cv.fold_seed = kv.get_or("cv.fold_seed", cv.fold_seed)?;

        kv.finish()?;
        Ok(RunConfig { train: t, cv })
    }

    /// Canonical text listing every setting, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let a = &t.augment;
        let e = &self.cv.eval;
        let list = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let input = match t.input_mode {
            InputMode::AllPhases => "all".to_string(),
            InputMode::SinglePhase(p) if p == PORTAL_PHASE => "portal".to_string(),
            InputMode::SinglePhase(p) => format!("phase{p}"),
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", t.seed.to_string()),
            ("iterations", t.iterations.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr0", t.lr0.to_string()),
            ("momentum", t.momentum.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("lr_drops", list(&t.lr_drop_iters)),
            ("lr_drop_factor", t.lr_drop_factor.to_string()),
            ("jitter_alpha", t.jitter_alpha.to_string()),
            ("match_threshold", t.match_threshold.to_string()),
            ("checkpoint_every", t.checkpoint_every.to_string()),
            ("input", input),
            ("model.input_size", m.input_size.to_string()),
            ("model.phases", m.phases.to_string()),
            ("model.slices_per_phase", m.slices_per_phase.to_string()),
            ("model.grouped", m.grouped.to_string()),
            ("model.double_base", m.double_base.to_string()),
            ("model.fusion_convs", m.n_fusion_convs.to_string()),
            ("model.classes", m.n_classes.to_string()),
            ("model.width_scale", m.width_scale.to_string()),
            ("model.boxes_per_cell", list(&m.boxes_per_cell)),
            ("model.scale_min", m.scale_min.to_string()),
            ("model.scale_max", m.scale_max.to_string()),
            ("model.allow_unfused_groups", m.allow_unfused_groups.to_string()),
            ("loss.ohnm_ratio", t.loss.ohnm_ratio.to_string()),
            ("loss.loc_weight", t.loss.localization_weight.to_string()),
            ("augment.mirror_prob", a.mirror_prob.to_string()),
            ("augment.scale_prob", a.scale_prob.to_string()),
            ("augment.scale_min", a.scale_min.to_string()),
            ("augment.scale_max", a.scale_max.to_string()),
            ("augment.photometric_prob", a.photometric_prob.to_string()),
            ("augment.brightness", a.brightness.to_string()),
            ("augment.contrast", a.contrast.to_string()),
            ("augment.min_box_area_px", a.min_box_area_px.to_string()),
            ("eval.conf_threshold", e.conf_threshold.to_string()),
            ("eval.nms_threshold", e.nms_threshold.to_string()),
            ("eval.top_k", e.top_k.to_string()),
            ("eval.iou_threshold", e.iou_threshold.to_string()),
            ("eval.batch", e.batch.to_string()),
            ("cv.folds", self.cv.folds.to_string()),
            ("cv.val_every", self.cv.val_every.to_string()),
            ("cv.val_start", self.cv.val_start.to_string()),
            ("cv.fold_seed", self.cv.fold_seed.to_string()),
        ];
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn model(&self) -> &ModelConfig {
        &self.train.model
    }

    pub fn loss(&self) -> &LossConfig {
        &self.train.loss
    }

    pub fn augment(&self) -> &AugmentConfig {
        &self.train.augment
    }

    pub fn eval(&self) -> &EvalConfig {
        &self.cv.eval
    }
}

/// Keys whose values differ between two canonical run texts, including
/// keys present in only one of them.
pub fn differing_keys(a: &str, b: &str) -> Result<Vec<String>, ConfigError> {
    let map = |t: &str| -> Result<BTreeMap<String, String>, ConfigError> {
        let kv = KeyValues::parse(t)?;
        let keys: Vec<String> = kv.keys_with_prefix("").map(str::to_string).collect();
        Ok(keys.into_iter().map(|k| (k.clone(), kv.raw(&k).unwrap_or_default().to_string())).collect())
    };
    let (a, b) = (map(a)?, map(b)?);
    let mut keys: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    keys.sort();
    keys.dedup();
    Ok(keys.into_iter().filter(|k| a.get(k) != b.get(k)).collect())
}

/// Architecture keys a checkpoint must agree on to be loaded.
pub fn is_architecture_key(key: &str) -> bool {
    key.starts_with("model.") || key == "input"
}
