//! Multi-phase volumes, HU windowing, phase stacking, weak labels, augmentation,
//! synthetic phantoms and cross-validation folds.

mod augment;
mod io;
mod phantom;

pub use augment::{augment, jitter_boxes, resize_bilinear, AugmentConfig};
pub use io::{
    load_dataset, read_labels, read_manifest, read_volume, write_labels, write_manifest, write_volume, ManifestEntry,
    MANIFEST_FILE,
};
pub use phantom::{generate_phantom, Lesion, LesionSampler, Phantom, PhantomSpec};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::ConfigError;
use crate::priors::{BoundingBox, BoxError, GroundTruth};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("non-finite HU value")]
    NonFinite,
    #[error("slice {z} out of range for depth {depth}")]
    SliceOutOfRange { z: usize, depth: usize },
    #[error("volume: {0}")]
    Volume(String),
    #[error("phantom spec: {0}")]
    Spec(String),
    #[error("lesion {index} is not inside the liver")]
    LesionOutsideLiver { index: usize },
    #[error("cannot split {volumes} volumes into {k} folds")]
    Folds { k: usize, volumes: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Box(#[from] BoxError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub const HU_MIN: f32 = -100.0;
pub const HU_MAX: f32 = 400.0;

/// Clamps to `[HU_MIN, HU_MAX]` and maps linearly onto `[0, 1]`.
pub fn window_hu(v: f32) -> Result<f32, DataError> {
    if !v.is_finite() {
        return Err(DataError::NonFinite);
    }
    Ok((v.clamp(HU_MIN, HU_MAX) - HU_MIN) / (HU_MAX - HU_MIN))
}

/// Phase-aligned HU volumes. Voxels are stored phase-major, then by slice,
/// then row-major within a slice.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    phases: usize,
    depth: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
    /// Scanner offset added to every voxel; subtracted again before windowing.
    pub vendor_bias: f32,
}

impl PhaseVolume {
    pub fn new(phases: usize, depth: usize, height: usize, width: usize, data: Vec<f32>, vendor_bias: f32) -> Result<Self, DataError> {
        if phases == 0 || depth == 0 || height == 0 || width == 0 {
            return Err(DataError::Volume(format!("zero extent in {phases}x{depth}x{height}x{width}")));
        }
        if data.len() != phases * depth * height * width {
            return Err(DataError::Volume(format!(
                "{} voxels for {phases}x{depth}x{height}x{width}",
                data.len()
            )));
        }
        Ok(PhaseVolume { phases, depth, height, width, data, vendor_bias })
    }

    pub fn phases(&self) -> usize {
        self.phases
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn slice(&self, phase: usize, z: usize) -> &[f32] {
        let n = self.height * self.width;
        let start = (phase * self.depth + z) * n;
        &self.data[start..start + n]
    }

    pub fn slice_mut(&mut self, phase: usize, z: usize) -> &mut [f32] {
        let n = self.height * self.width;
        let start = (phase * self.depth + z) * n;
        &mut self.data[start..start + n]
    }
}

/// One lesion box in one phase, shared by every slice in `z_start..=z_end`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakLabel {
    pub phase: usize,
    pub z_start: usize,
    pub z_end: usize,
    pub bbox: BoundingBox,
    pub class: usize,
}

impl WeakLabel {
    pub fn covers(&self, z: usize) -> bool {
        self.z_start <= z && z <= self.z_end
    }
}

/// Which phases feed the model input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputMode {
    AllPhases,
    /// One phase copied into every phase block.
    SinglePhase(usize),
}

/// Index of the portal venous phase in the pre/arterial/portal/delayed order.
pub const PORTAL_PHASE: usize = 2;

/// Stacks `slices_per_phase` consecutive windowed slices centred on `z` for
/// every phase, phase-major then slice-minor. Slices past the volume ends
/// repeat the edge slice.
pub fn stack_phases_n(pv: &PhaseVolume, z: usize, slices_per_phase: usize, mode: InputMode) -> Result<Tensor<f32>, DataError> {
    if z >= pv.depth {
        return Err(DataError::SliceOutOfRange { z, depth: pv.depth });
    }
    if let InputMode::SinglePhase(p) = mode {
        if p >= pv.phases {
            return Err(DataError::Volume(format!("phase {p} out of range for {} phases", pv.phases)));
        }
    }
    let plane = pv.height * pv.width;
    let half = (slices_per_phase / 2) as isize;
    let mut out = Vec::with_capacity(pv.phases * slices_per_phase * plane);
    for block in 0..pv.phases {
        let phase = match mode {
            InputMode::AllPhases => block,
            InputMode::SinglePhase(p) => p,
        };
        for s in 0..slices_per_phase as isize {
            let zz = (z as isize + s - half).clamp(0, pv.depth as isize - 1) as usize;
            for &v in pv.slice(phase, zz) {
                out.push(window_hu(v - pv.vendor_bias)?);
            }
        }
    }
    Ok(Tensor::new(&[pv.phases * slices_per_phase, pv.height, pv.width], out)?)
}

/// Three slices per phase, all phases.
pub fn stack_phases(pv: &PhaseVolume, z: usize) -> Result<Tensor<f32>, DataError> {
    stack_phases_n(pv, z, 3, InputMode::AllPhases)
}

/// Ground truths of slice `z`: the weak labels covering it, with boxes of
/// the same lesion in different phases merged by coordinate-wise union.
/// Two labels are taken to be the same lesion when they come from different
/// phases, share a class and overlap.
pub fn slice_ground_truths(labels: &[WeakLabel], z: usize) -> Vec<GroundTruth> {
    let here: Vec<&WeakLabel> = labels.iter().filter(|l| l.covers(z)).collect();
    let mut parent: Vec<usize> = (0..here.len()).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..here.len() {
        for j in i + 1..here.len() {
            let (a, b) = (here[i], here[j]);
            let overlap = a.bbox.x_min < b.bbox.x_max
                && b.bbox.x_min < a.bbox.x_max
                && a.bbox.y_min < b.bbox.y_max
                && b.bbox.y_min < a.bbox.y_max;
            if a.phase != b.phase && a.class == b.class && overlap {
                let (ri, rj) = (root(&mut parent, i), root(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut merged: Vec<(usize, GroundTruth)> = Vec::new();
    for i in 0..here.len() {
        let r = root(&mut parent, i);
        match merged.iter_mut().find(|(k, _)| *k == r) {
            Some((_, gt)) => gt.bbox = gt.bbox.union(&here[i].bbox),
            None => merged.push((r, GroundTruth { bbox: here[i].bbox, class: here[i].class })),
        }
    }
    merged.into_iter().map(|(_, gt)| gt).collect()
}

/// A volume with its weak labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub name: String,
    pub volume: PhaseVolume,
    pub labels: Vec<WeakLabel>,
}

impl LabeledVolume {
    /// Slices that carry at least one label.
    pub fn lesion_slices(&self) -> Vec<usize> {
        (0..self.volume.depth).filter(|&z| self.labels.iter().any(|l| l.covers(z))).collect()
    }
}

/// How volumes are turned into model inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputSpec {
    pub size: usize,
    pub slices_per_phase: usize,
    pub mode: InputMode,
}

/// A training or evaluation example built from one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[phases * slices_per_phase, S, S]` windowed input.
    pub input: Tensor<f32>,
    pub gts: Vec<GroundTruth>,
    pub center_z: usize,
    pub volume: usize,
}

/// Slice address inside a list of volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SliceRef {
    pub volume: usize,
    pub z: usize,
}

/// Every lesion-bearing slice of the listed volumes.
pub fn lesion_slice_refs(volumes: &[LabeledVolume], subset: &[usize]) -> Vec<SliceRef> {
    subset
        .iter()
        .flat_map(|&v| volumes[v].lesion_slices().into_iter().map(move |z| SliceRef { volume: v, z }))
        .collect()
}

/// Stacked, windowed and resized `[C, S, S]` model input for slice `z`.
pub fn slice_input(pv: &PhaseVolume, z: usize, spec: &InputSpec) -> Result<Tensor<f32>, DataError> {
    let stacked = stack_phases_n(pv, z, spec.slices_per_phase, spec.mode)?;
    if pv.height == spec.size && pv.width == spec.size {
        Ok(stacked)
    } else {
        Ok(resize_bilinear(&stacked, spec.size, spec.size)?)
    }
}

pub fn make_sample(volumes: &[LabeledVolume], at: SliceRef, spec: &InputSpec) -> Result<Sample, DataError> {
    let lv = &volumes[at.volume];
    let input = slice_input(&lv.volume, at.z, spec)?;
    Ok(Sample { input, gts: slice_ground_truths(&lv.labels, at.z), center_z: at.z, volume: at.volume })
}

/// Train/validation volume indices of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Partitions `volumes` volume indices into `k` near-equal validation folds,
/// shuffled by `seed`.
pub fn split_folds(volumes: usize, k: usize, seed: u64) -> Result<Vec<Fold>, DataError> {
    if k < 2 || k > volumes {
        return Err(DataError::Folds { k, volumes });
    }
    let mut order: Vec<usize> = (0..volumes).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let mut val: Vec<usize> = order.iter().skip(f).step_by(k).copied().collect();
            val.sort_unstable();
            let train = (0..volumes).filter(|v| !val.contains(v)).collect();
            Fold { train, val }
        })
        .collect())
}

#[cfg(test)]
mod tests;
