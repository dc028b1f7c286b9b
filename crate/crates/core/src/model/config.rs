use crate::priors::PriorLayout;

use super::ModelError;

/// Architecture switches of the grouped SSD.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input extent in pixels.
    pub input_size: usize,
    pub phases: usize,
    pub slices_per_phase: usize,
    /// Split every backbone convolution into one group per phase.
    pub grouped: bool,
    /// Double every backbone channel width.
    pub double_base: bool,
    /// 1x1 channel-selector convolutions per tap before the heads (0..=2).
    pub n_fusion_convs: usize,
    /// Number of classes including background.
    pub n_classes: usize,
    /// Multiplier on the reference VGG/SSD channel widths.
    pub width_scale: f64,
    pub boxes_per_cell: Vec<usize>,
    /// Extra aspect ratios per feature map (each adds `r` and `1/r`).
    pub aspect_ratios: Vec<Vec<f64>>,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Permit `grouped` without fusion convolutions. Only for ablations.
    pub allow_unfused_groups: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 128,
            phases: 4,
            slices_per_phase: 3,
            grouped: true,
            double_base: false,
            n_fusion_convs: 1,
            n_classes: 2,
            width_scale: 0.25,
            boxes_per_cell: vec![4, 6, 6, 6, 4, 4],
            aspect_ratios: default_aspect_ratios(&[4, 6, 6, 6, 4, 4]),
            scale_min: 0.2,
            scale_max: 0.9,
            allow_unfused_groups: false,
        }
    }
}

/// `{2}` for 4-box maps and `{2, 3}` for 6-box maps.
pub fn default_aspect_ratios(boxes_per_cell: &[usize]) -> Vec<Vec<f64>> {
    boxes_per_cell
        .iter()
        .map(|&b| match b {
            2 => vec![],
            4 => vec![2.0],
            6 => vec![2.0, 3.0],
            n => (0..(n.saturating_sub(2) / 2)).map(|i| (i + 2) as f64).collect(),
        })
        .collect()
}

/// Number of feature maps the detector taps.
pub const TAP_COUNT: usize = 6;

/// Reference (width-1.0) channel counts of the VGG16-SSD backbone.
pub(crate) const VGG_STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
pub(crate) const FC_WIDTH: usize = 1024;
/// (squeeze, expand) widths of the four extra feature layers.
pub(crate) const EXTRAS: [(usize, usize); 4] = [(256, 512), (128, 256), (128, 256), (128, 256)];

/// How an extra layer reduces its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Reduction {
    /// 3x3, stride 2, padding 1.
    Strided,
    /// 3x3, stride 1, no padding.
    Valid,
}

impl ModelConfig {
    pub fn input_channels(&self) -> usize {
        self.phases * self.slices_per_phase
    }

    pub fn groups(&self) -> usize {
        if self.grouped {
            self.phases
        } else {
            1
        }
    }

    /// Scaled backbone width, rounded to a positive multiple of the group count.
    pub fn width(&self, reference: usize) -> usize {
        let g = self.groups();
        let factor = if self.double_base { 2.0 } else { 1.0 };
        let raw = (reference as f64 * self.width_scale * factor).round() as usize;
        raw.div_ceil(g).max(1) * g
    }

    pub(crate) fn extra_reduction(index: usize, size: usize) -> Reduction {
        // The two deepest extras shrink by a valid 3x3 when the map allows it.
        if index >= 2 && size >= 3 {
            Reduction::Valid
        } else {
            Reduction::Strided
        }
    }

    /// Spatial extents of the six tapped feature maps.
    pub fn tap_sizes(&self) -> Result<Vec<usize>, ModelError> {
        let pool = |s: usize| -> Result<usize, ModelError> {
            if s < 2 {
                return Err(ModelError::Config(format!(
                    "input_size {} collapses below the pooling kernel",
                    self.input_size
                )));
            }
            Ok(s.div_ceil(2))
        };
        let mut s = self.input_size;
        for _ in 0..3 {
            s = pool(s)?;
        }
        let mut taps = vec![s];
        s = pool(s)?;
        taps.push(s);
        for i in 0..EXTRAS.len() {
            s = match Self::extra_reduction(i, s) {
                Reduction::Strided => (s + 2 - 3) / 2 + 1,
                Reduction::Valid => s - 2,
            };
            taps.push(s);
        }
        Ok(taps)
    }

    pub fn prior_layout(&self) -> Result<PriorLayout, ModelError> {
        Ok(PriorLayout {
            feature_sizes: self.tap_sizes()?,
            aspect_ratios: self.aspect_ratios.clone(),
            scale_min: self.scale_min,
            scale_max: self.scale_max,
        })
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.phases == 0 || self.slices_per_phase == 0 {
            return err("phases and slices_per_phase must be positive".into());
        }
        if self.n_classes < 2 {
            return err(format!("n_classes {} must include background and one class", self.n_classes));
        }
        if self.n_fusion_convs > 2 {
            return err(format!("n_fusion_convs {} must be 0, 1 or 2", self.n_fusion_convs));
        }
        if self.grouped && self.n_fusion_convs == 0 && !self.allow_unfused_groups {
            return err("grouped backbone requires at least one fusion convolution".into());
        }
        if !(self.width_scale > 0.0 && self.width_scale.is_finite()) {
            return err(format!("width_scale {} must be positive", self.width_scale));
        }
        if self.boxes_per_cell.len() != TAP_COUNT || self.aspect_ratios.len() != TAP_COUNT {
            return err(format!("boxes_per_cell and aspect_ratios need {TAP_COUNT} entries"));
        }
        for (k, (&b, ratios)) in self.boxes_per_cell.iter().zip(&self.aspect_ratios).enumerate() {
            if b != 2 + 2 * ratios.len() {
                return err(format!("map {k}: {b} boxes per cell but {} aspect ratios", ratios.len()));
            }
            if ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
                return err(format!("map {k}: aspect ratios must be positive"));
            }
        }
        if !(0.0 < self.scale_min && self.scale_min < self.scale_max && self.scale_max <= 1.0) {
            return err(format!("scales must satisfy 0 < {} < {} <= 1", self.scale_min, self.scale_max));
        }
        if self.input_channels() % self.groups() != 0 {
            return err(format!(
                "{} input channels not divisible by {} groups",
                self.input_channels(),
                self.groups()
            ));
        }
        self.tap_sizes()?;
        Ok(())
    }
}
