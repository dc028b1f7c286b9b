use rand::Rng;

use super::{DataError, Sample};
use crate::priors::{BoundingBox, GroundTruth};
use crate::tensor::Tensor;

/// Multiplies every box coordinate by an independent draw from
/// `U(1 - alpha, 1 + alpha)`, clamps to `[0, 1]` and restores corner order.
/// A box that collapses to zero width or height keeps its original value.
pub fn jitter_boxes<R: Rng + ?Sized>(gts: &[GroundTruth], alpha: f64, rng: &mut R) -> Vec<GroundTruth> {
    gts.iter()
        .map(|gt| {
            let c = gt.bbox.as_array();
            let mut z = [1.0; 4];
            if alpha > 0.0 {
                for m in &mut z {
                    *m = rng.gen_range(1.0 - alpha..1.0 + alpha);
                }
            }
            let v: Vec<f64> = c.iter().zip(z).map(|(&c, z)| (c * z).clamp(0.0, 1.0)).collect();
            let jittered = BoundingBox::new(v[0].min(v[2]), v[1].min(v[3]), v[0].max(v[2]), v[1].max(v[3]));
            GroundTruth { bbox: jittered.unwrap_or(gt.bbox), class: gt.class }
        })
        .collect()
}

/// Bilinear resampling of a `[C, H, W]` tensor with half-pixel centres.
pub fn resize_bilinear(t: &Tensor<f32>, out_h: usize, out_w: usize) -> Result<Tensor<f32>, DataError> {
    let [c, h, w] = match t.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(DataError::Volume(format!("resize expects [C, H, W], got {s:?}"))),
    };
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::new(&[c, out_h, out_w], out)?)
}

/// Probabilities and ranges of training-time augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mirror_prob: f64,
    pub scale_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub photometric_prob: f64,
    /// Additive brightness shift bound, in windowed units.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`.
    pub contrast: f64,
    /// Boxes smaller than this many pixels after the transform are dropped.
    pub min_box_area_px: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mirror_prob: 0.5,
            scale_prob: 0.5,
            scale_min: 0.5,
            scale_max: 1.5,
            photometric_prob: 0.5,
            brightness: 0.05,
            contrast: 0.1,
            min_box_area_px: 10.0,
        }
    }
}

impl AugmentConfig {
    /// No augmentation at all.
    pub fn none() -> Self {
        AugmentConfig { mirror_prob: 0.0, scale_prob: 0.0, photometric_prob: 0.0, ..Self::default() }
    }
}

const MAX_TRIES: usize = 50;

/// Mirror, scale with crop or pad back to the input size, then brightness
/// and contrast jitter. The same geometric transform is applied to every
/// channel. A transform is accepted when at least one ground truth keeps
/// its centre inside the output and an area of `min_box_area_px`; after
/// `MAX_TRIES` rejections the sample is returned unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &Sample, rng: &mut R, cfg: &AugmentConfig) -> Result<Sample, DataError> {
    let [c, h, w] = match sample.input.shape() {
        &[c, h, w] => [c, h, w],
        s => return Err(DataError::Volume(format!("augment expects [C, S, S], got {s:?}"))),
    };
    if h != w {
        return Err(DataError::Volume(format!("augment expects a square input, got {h}x{w}")));
    }
    let s = h;
    for _ in 0..MAX_TRIES {
        let mirror = rng.gen_bool(cfg.mirror_prob);
        let scale = if rng.gen_bool(cfg.scale_prob) { rng.gen_range(cfg.scale_min..=cfg.scale_max) } else { 1.0 };
        let new = ((s as f64 * scale).round() as usize).max(1);
        let span = new.abs_diff(s);
        let (ox, oy) = (rng.gen_range(0..=span) as isize, rng.gen_range(0..=span) as isize);
        // Offset of the output window inside the scaled image; negative pads.
        let (ox, oy) = if new >= s { (ox, oy) } else { (-ox, -oy) };

        let to_out = |v: f64, off: isize| (v * new as f64 - off as f64) / s as f64;
        let mut gts = Vec::new();
        for gt in &sample.gts {
            let b = gt.bbox;
            let (x0, x1) = if mirror { (1.0 - b.x_max, 1.0 - b.x_min) } else { (b.x_min, b.x_max) };
            let moved = BoundingBox { x_min: to_out(x0, ox), y_min: to_out(b.y_min, oy), x_max: to_out(x1, ox), y_max: to_out(b.y_max, oy) };
            let (cx, cy) = moved.center();
            if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
                continue;
            }
            let clamped = moved.clamped();
            if clamped.area() * (s * s) as f64 >= cfg.min_box_area_px && clamped.validate().is_ok() {
                gts.push(GroundTruth { bbox: clamped, class: gt.class });
            }
        }
        if gts.is_empty() && !sample.gts.is_empty() {
            continue;
        }

        let mut img = sample.input.clone();
        if mirror {
            for row in img.data_mut().chunks_exact_mut(w) {
                row.reverse();
            }
        }
        if new != s {
            let scaled = resize_bilinear(&img, new, new)?;
            let src = scaled.data();
            let mut out = vec![0.0f32; c * s * s];
            for ch in 0..c {
                for y in 0..s {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= new as isize {
                        continue;
                    }
                    for x in 0..s {
                        let sx = x as isize + ox;
                        if sx >= 0 && sx < new as isize {
                            out[(ch * s + y) * s + x] = src[(ch * new + sy as usize) * new + sx as usize];
                        }
                    }
                }
            }
            img = Tensor::new(&[c, s, s], out)?;
        }
        if rng.gen_bool(cfg.photometric_prob) {
            let gain = rng.gen_range(1.0 - cfg.contrast..=1.0 + cfg.contrast) as f32;
            let shift = rng.gen_range(-cfg.brightness..=cfg.brightness) as f32;
            for v in img.data_mut() {
                *v = ((*v - 0.5) * gain + 0.5 + shift).clamp(0.0, 1.0);
            }
        }
        return Ok(Sample { input: img, gts, center_z: sample.center_z, volume: sample.volume });
    }
    Ok(sample.clone())
}
