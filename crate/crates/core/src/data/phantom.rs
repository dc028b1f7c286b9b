use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, PhaseVolume, WeakLabel, PORTAL_PHASE};
use crate::config::{KeyValues, Span};
use crate::priors::BoundingBox;

/// A spherical lesion in voxel coordinates `(x, y, z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
    /// HU offset from the surrounding liver, one entry per phase.
    pub delta: Vec<f64>,
    pub class: usize,
}

impl Lesion {
    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let d = [x as f64 - self.center[0], y as f64 - self.center[1], z as f64 - self.center[2]];
        d.iter().map(|v| v * v).sum::<f64>() <= self.radius * self.radius
    }
}

/// Random lesion generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionSampler {
    pub count: Span<usize>,
    pub radius: Span<f64>,
    /// Peak absolute HU contrast.
    pub contrast: Span<f64>,
    /// Probability that a lesion has zero portal-phase contrast.
    pub portal_hidden: f64,
}

/// Geometry and intensities of a synthetic liver phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub phases: usize,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub liver_center: [f64; 3],
    pub liver_radii: [f64; 3],
    pub liver_hu: f64,
    pub background_hu: f64,
    pub noise_sigma: f64,
    pub vendor_bias: f64,
    pub lesions: Vec<Lesion>,
    pub random: Option<LesionSampler>,
    pub seed: Option<u64>,
}

impl PhantomSpec {
    /// A `size` x `size` x `depth` phantom with a central liver and one to
    /// three random lesions, half of them invisible in the portal phase.
    pub fn desk(size: usize, depth: usize) -> Self {
        let s = size as f64;
        let d = depth as f64;
        PhantomSpec {
            phases: 4,
            depth,
            height: size,
            width: size,
            liver_center: [s / 2.0, s / 2.0, d / 2.0],
            liver_radii: [s * 0.38, s * 0.32, d * 0.7],
            liver_hu: 60.0,
            background_hu: 30.0,
            noise_sigma: 8.0,
            vendor_bias: 0.0,
            lesions: Vec::new(),
            random: Some(LesionSampler {
                count: Span { lo: 1, hi: 3 },
                radius: Span { lo: s * 0.055, hi: s * 0.1 },
                contrast: Span { lo: 60.0, hi: 100.0 },
                portal_hidden: 0.5,
            }),
            seed: None,
        }
    }

    fn liver_norm(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|i| ((p[i] - self.liver_center[i]) / self.liver_radii[i]).powi(2)).sum()
    }

    pub fn in_liver(&self, x: usize, y: usize, z: usize) -> bool {
        self.liver_norm([x as f64, y as f64, z as f64]) <= 1.0
    }

    /// Sufficient test that a whole ball lies in the liver: the far corner of
    /// its bounding cube is inside the ellipsoid.
    pub fn ball_in_liver(&self, center: [f64; 3], radius: f64) -> bool {
        let corner: [f64; 3] = std::array::from_fn(|i| {
            self.liver_center[i] + (center[i] - self.liver_center[i]).abs() + radius
        });
        self.liver_norm(corner) <= 1.0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.phases == 0 || self.depth == 0 || self.height == 0 || self.width == 0 {
            return err("dimensions must be positive".into());
        }
        if self.liver_radii.iter().any(|&r| !(r > 0.0)) {
            return err("liver radii must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise must be a finite non-negative value".into());
        }
        for (i, l) in self.lesions.iter().enumerate() {
            if l.delta.len() != self.phases {
                return err(format!("lesion {i}: {} deltas for {} phases", l.delta.len(), self.phases));
            }
            if !(l.radius > 0.0) {
                return err(format!("lesion {i}: radius must be positive"));
            }
            if l.class == 0 {
                return err(format!("lesion {i}: class 0 is background"));
            }
            if !self.ball_in_liver(l.center, l.radius) {
                return Err(DataError::LesionOutsideLiver { index: i });
            }
        }
        if let Some(r) = &self.random {
            if !(r.radius.lo > 0.0) || !(0.0..=1.0).contains(&r.portal_hidden) {
                return err("random lesions need positive radii and portal_hidden in [0, 1]".into());
            }
            if self.phases <= PORTAL_PHASE {
                return err(format!("random lesions need at least {} phases", PORTAL_PHASE + 1));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, DataError> {
        let kv = KeyValues::parse(text)?;
        let triple = |key: &str, default: [f64; 3]| -> Result<[f64; 3], DataError> {
            match kv.get_list::<f64>(key)? {
                None => Ok(default),
                Some(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
                Some(v) => Err(DataError::Spec(format!("{key}: expected 3 values, got {}", v.len()))),
            }
        };
        let height: usize = kv.require("height")?;
        let width: usize = kv.require("width")?;
        let depth: usize = kv.require("depth")?;
        let base = PhantomSpec::desk(height.min(width), depth);
        let size = [width as f64, height as f64, depth as f64];
        let mut spec = PhantomSpec {
            phases: kv.get_or("phases", 4)?,
            depth,
            height,
            width,
            liver_center: triple("liver.center", std::array::from_fn(|i| size[i] / 2.0))?,
            liver_radii: triple("liver.radii", base.liver_radii)?,
            liver_hu: kv.get_or("liver.hu", base.liver_hu)?,
            background_hu: kv.get_or("background.hu", base.background_hu)?,
            noise_sigma: kv.get_or("noise", base.noise_sigma)?,
            vendor_bias: kv.get_or("vendor_bias", 0.0)?,
            lesions: Vec::new(),
            random: None,
            seed: kv.get("seed")?,
        };
        if let Some(count) = kv.get::<Span<usize>>("random.count")? {
            let d = base.random.expect("desk spec samples lesions");
            spec.random = Some(LesionSampler {
                count,
                radius: kv.get_or("random.radius", d.radius)?,
                contrast: kv.get_or("random.contrast", d.contrast)?,
                portal_hidden: kv.get_or("random.portal_hidden", d.portal_hidden)?,
            });
        }
        let mut ids: Vec<usize> = Vec::new();
        for key in kv.keys_with_prefix("lesion.") {
            let id = key
                .split('.')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::Spec(format!("bad lesion key `{key}`")))?;
            if !ids.contains(&id) {
                ids.push(id);
            }
        }
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(DataError::Spec("lesion indices must be 0, 1, 2, ...".into()));
        }
        for id in ids {
            let center = triple(&format!("lesion.{id}.center"), [f64::NAN; 3])?;
            if center.iter().any(|v| v.is_nan()) {
                return Err(DataError::Spec(format!("lesion {id}: missing center")));
            }
            spec.lesions.push(Lesion {
                center,
                radius: kv.require(&format!("lesion.{id}.radius"))?,
                delta: kv.get_list(&format!("lesion.{id}.delta"))?.ok_or_else(|| DataError::Spec(format!("lesion {id}: missing delta")))?,
                class: kv.get_or(&format!("lesion.{id}.class"), 1)?,
            });
        }
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "phases={}\ndepth={}\nheight={}\nwidth={}", self.phases, self.depth, self.height, self.width);
        let _ = writeln!(s, "liver.center={}\nliver.radii={}", list(&self.liver_center), list(&self.liver_radii));
        let _ = writeln!(s, "liver.hu={}\nbackground.hu={}\nnoise={}\nvendor_bias={}", self.liver_hu, self.background_hu, self.noise_sigma, self.vendor_bias);
        if let Some(r) = &self.random {
            let _ = writeln!(s, "random.count={}\nrandom.radius={}\nrandom.contrast={}\nrandom.portal_hidden={}", r.count, r.radius, r.contrast, r.portal_hidden);
        }
        for (i, l) in self.lesions.iter().enumerate() {
            let _ = writeln!(s, "lesion.{i}.center={}\nlesion.{i}.radius={}\nlesion.{i}.delta={}\nlesion.{i}.class={}", list(&l.center), l.radius, list(&l.delta), l.class);
        }
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        s
    }
}

/// A generated phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: PhaseVolume,
    pub labels: Vec<WeakLabel>,
    /// Explicit lesions followed by sampled ones.
    pub lesions: Vec<Lesion>,
}

fn sample_lesions<R: Rng + ?Sized>(spec: &PhantomSpec, sampler: &LesionSampler, rng: &mut R, placed: &mut Vec<Lesion>) {
    let count = rng.gen_range(sampler.count.lo..=sampler.count.hi);
    for _ in 0..count {
        let radius = rng.gen_range(sampler.radius.lo..=sampler.radius.hi);
        let mut center = None;
        for _ in 0..1000 {
            let c: [f64; 3] = std::array::from_fn(|i| {
                spec.liver_center[i] + rng.gen_range(-1.0..1.0) * spec.liver_radii[i]
            });
            let clear = placed.iter().all(|l| {
                let d2: f64 = (0..3).map(|i| (l.center[i] - c[i]).powi(2)).sum();
                d2.sqrt() > l.radius + radius + 2.0
            });
            let in_volume = c[2] >= 0.0 && c[2] < spec.depth as f64;
            if clear && in_volume && spec.ball_in_liver(c, radius) {
                center = Some(c);
                break;
            }
        }
        let Some(center) = center else { continue };
        let c = rng.gen_range(sampler.contrast.lo..=sampler.contrast.hi);
        let hidden = rng.gen_bool(sampler.portal_hidden);
        let mut delta = vec![0.0; spec.phases];
        // Arterial enhancement with washout later, the typical pattern.
        delta[0] = c * rng.gen_range(-0.15..=0.15);
        delta[1] = c;
        delta[PORTAL_PHASE] = if hidden { 0.0 } else { -c * rng.gen_range(0.6..=1.0) };
        for d in delta.iter_mut().skip(PORTAL_PHASE + 1) {
            *d = -c * rng.gen_range(0.4..=0.8);
        }
        placed.push(Lesion { center, radius, delta, class: 1 });
    }
}

/// Axis-aligned extent of a lesion: the union of its in-volume voxels over
/// all slices, with the inclusive slice range.
fn lesion_extent(l: &Lesion, depth: usize, height: usize, width: usize) -> Option<(usize, usize, BoundingBox)> {
    let lo = |c: f64| (c - l.radius).floor().max(0.0) as usize;
    let hi = |c: f64, n: usize| ((c + l.radius).ceil().max(0.0) as usize).min(n - 1);
    let (mut x0, mut y0, mut z0) = (usize::MAX, usize::MAX, usize::MAX);
    let (mut x1, mut y1, mut z1) = (0, 0, 0);
    for z in lo(l.center[2])..=hi(l.center[2], depth) {
        for y in lo(l.center[1])..=hi(l.center[1], height) {
            for x in lo(l.center[0])..=hi(l.center[0], width) {
                if l.contains(x, y, z) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    z0 = z0.min(z);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                    z1 = z1.max(z);
                }
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    let bbox = BoundingBox {
        x_min: x0 as f64 / width as f64,
        y_min: y0 as f64 / height as f64,
        x_max: (x1 + 1) as f64 / width as f64,
        y_max: (y1 + 1) as f64 / height as f64,
    };
    Some((z0, z1, bbox))
}

/// Renders the phantom and its per-phase weak labels.
pub fn generate_phantom<R: Rng + ?Sized>(spec: &PhantomSpec, rng: &mut R) -> Result<Phantom, DataError> {
    spec.validate()?;
    let mut lesions = spec.lesions.clone();
    if let Some(sampler) = &spec.random {
        sample_lesions(spec, sampler, rng, &mut lesions);
    }
    let (d, h, w) = (spec.depth, spec.height, spec.width);
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::Spec(e.to_string()))?;
    let mut data = Vec::with_capacity(spec.phases * d * h * w);
    for p in 0..spec.phases {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let mut v = spec.background_hu;
                    if spec.in_liver(x, y, z) {
                        v = spec.liver_hu;
                        if let Some(l) = lesions.iter().find(|l| l.contains(x, y, z)) {
                            v += l.delta[p];
                        }
                    }
                    data.push((v + spec.vendor_bias + noise.sample(rng)) as f32);
                }
            }
        }
    }
    let volume = PhaseVolume::new(spec.phases, d, h, w, data, spec.vendor_bias as f32)?;
    let mut labels = Vec::new();
    for l in &lesions {
        if let Some((z_start, z_end, bbox)) = lesion_extent(l, d, h, w) {
            for phase in 0..spec.phases {
                labels.push(WeakLabel { phase, z_start, z_end, bbox, class: l.class });
            }
        }
    }
    Ok(Phantom { volume, labels, lesions })
}
