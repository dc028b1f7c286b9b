use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gt(x0: f64, y0: f64, x1: f64, y1: f64) -> GroundTruth {
    GroundTruth { bbox: BoundingBox::new(x0, y0, x1, y1).unwrap(), class: 1 }
}

fn ramp_volume(phases: usize, depth: usize, h: usize, w: usize) -> PhaseVolume {
    // Value encodes (phase, z) so stacking can be checked exactly.
    let data = (0..phases * depth)
        .flat_map(|pz| std::iter::repeat((pz / depth * 100 + pz % depth) as f32 - 100.0).take(h * w))
        .collect();
    PhaseVolume::new(phases, depth, h, w, data, 0.0).unwrap()
}

#[test]
fn window_endpoints() {
    assert_eq!(window_hu(-100.0).unwrap(), 0.0);
    assert_eq!(window_hu(400.0).unwrap(), 1.0);
    assert_eq!(window_hu(150.0).unwrap(), 0.5);
    assert_eq!(window_hu(-1000.0).unwrap(), 0.0);
    assert_eq!(window_hu(1000.0).unwrap(), 1.0);
    assert!(matches!(window_hu(f32::NAN), Err(DataError::NonFinite)));
}

proptest! {
    #[test]
    fn window_is_monotone(a in -2000.0f32..4000.0, b in -2000.0f32..4000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(window_hu(lo).unwrap() <= window_hu(hi).unwrap());
    }

    #[test]
    fn window_inverse_is_idempotent(v in 0.0f32..=1.0) {
        let hu = v * 500.0 - 100.0;
        prop_assert!((window_hu(hu).unwrap() - v).abs() < 1e-6);
    }

    #[test]
    fn jitter_keeps_boxes_valid(
        x0 in 0.0f64..0.9, y0 in 0.0f64..0.9, w in 0.001f64..0.5, h in 0.001f64..0.5,
        alpha in 0.0f64..0.99, seed in any::<u64>(),
    ) {
        let b = gt(x0, y0, (x0 + w).min(1.0), (y0 + h).min(1.0));
        let out = jitter_boxes(&[b], alpha, &mut rng(seed));
        prop_assert!(out[0].bbox.validate().is_ok());
        for c in out[0].bbox.as_array() {
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}

#[test]
fn stacking_layout_and_edges() {
    let pv = ramp_volume(4, 5, 2, 3);
    let t = stack_phases(&pv, 2).unwrap();
    assert_eq!(t.shape(), &[12, 2, 3]);
    let plane = 6;
    let chan = |c: usize| t.data()[c * plane];
    // Channels 3..5 are phase 1, slices 1..3.
    for (i, z) in (1..=3).enumerate() {
        assert_eq!(chan(3 + i), window_hu((100 + z) as f32 - 100.0).unwrap());
    }
    let edge = stack_phases(&pv, 0).unwrap();
    assert_eq!(edge.data()[..plane], edge.data()[plane..2 * plane]);
    let flat = ramp_volume(4, 1, 2, 2);
    let t = stack_phases(&flat, 0).unwrap();
    for p in 0..4 {
        let block = &t.data()[p * 12..(p + 1) * 12];
        assert_eq!(block[..4], block[4..8]);
        assert_eq!(block[4..8], block[8..12]);
    }
    assert!(matches!(stack_phases(&pv, 5), Err(DataError::SliceOutOfRange { .. })));
}

#[test]
fn single_phase_mode_copies_portal() {
    let pv = ramp_volume(4, 3, 2, 2);
    let t = stack_phases_n(&pv, 1, 3, InputMode::SinglePhase(PORTAL_PHASE)).unwrap();
    let block = 3 * 4;
    for p in 0..4 {
        assert_eq!(t.data()[p * block..(p + 1) * block], t.data()[PORTAL_PHASE * block..(PORTAL_PHASE + 1) * block]);
    }
}

#[test]
fn vendor_bias_is_removed_before_windowing() {
    let mut pv = PhaseVolume::new(1, 1, 1, 1, vec![175.0], 25.0).unwrap();
    let t = stack_phases_n(&pv, 0, 1, InputMode::AllPhases).unwrap();
    assert_eq!(t.data()[0], 0.5);
    pv.vendor_bias = 0.0;
    assert_eq!(stack_phases_n(&pv, 0, 1, InputMode::AllPhases).unwrap().data()[0], 0.55);
}

#[test]
fn ground_truths_merge_phases_of_one_lesion() {
    let b = |x0, x1| BoundingBox::new(x0, 0.1, x1, 0.3).unwrap();
    let labels = vec![
        WeakLabel { phase: 0, z_start: 2, z_end: 5, bbox: b(0.1, 0.3), class: 1 },
        WeakLabel { phase: 1, z_start: 3, z_end: 6, bbox: b(0.2, 0.35), class: 1 },
        WeakLabel { phase: 1, z_start: 0, z_end: 9, bbox: b(0.7, 0.8), class: 1 },
    ];
    let at4 = slice_ground_truths(&labels, 4);
    assert_eq!(at4.len(), 2);
    assert_eq!(at4[0].bbox, b(0.1, 0.35));
    assert_eq!(slice_ground_truths(&labels, 2)[0].bbox, b(0.1, 0.3));
    assert_eq!(slice_ground_truths(&labels, 8).len(), 1);
}

#[test]
fn jitter_zero_alpha_is_identity() {
    let gts = vec![gt(0.2, 0.3, 0.4, 0.5), gt(0.0, 0.0, 1.0, 1.0)];
    assert_eq!(jitter_boxes(&gts, 0.0, &mut rng(1)), gts);
    let tiny = jitter_boxes(&gts, 1e-12, &mut rng(1));
    for (a, b) in tiny.iter().zip(&gts) {
        for (u, v) in a.bbox.as_array().iter().zip(b.bbox.as_array()) {
            assert!((u - v).abs() < 1e-11);
        }
    }
}

#[test]
fn jitter_statistics_at_one_percent() {
    let g = gt(0.2, 0.3, 0.4, 0.5);
    let orig = g.bbox.as_array();
    let mut r = rng(2);
    let mut sum = 0.0;
    let n = 100_000;
    for _ in 0..n {
        let out = jitter_boxes(&[g], 0.01, &mut r)[0].bbox.as_array();
        for (o, c) in out.iter().zip(orig) {
            let m = o / c;
            assert!((0.99..=1.01).contains(&m));
            sum += m;
        }
    }
    assert!((sum / (4 * n) as f64 - 1.0).abs() < 1e-3);
}

fn toy_sample(s: usize, gts: Vec<GroundTruth>) -> Sample {
    let input = Tensor::from_fn(&[12, s, s], |i| (i % 97) as f32 / 97.0).unwrap();
    Sample { input, gts, center_z: 0, volume: 0 }
}

#[test]
fn mirror_reflects_boxes() {
    let s = toy_sample(16, vec![gt(0.2, 0.3, 0.4, 0.5)]);
    let cfg = AugmentConfig { mirror_prob: 1.0, ..AugmentConfig::none() };
    let out = augment(&s, &mut rng(0), &cfg).unwrap();
    let b = out.gts[0].bbox.as_array();
    for (u, v) in b.iter().zip([0.6, 0.3, 0.8, 0.5]) {
        assert!((u - v).abs() < 1e-12);
    }
    assert_eq!(out.input.data()[0], s.input.data()[15]);
}

#[test]
fn disabled_augmentation_is_identity() {
    let s = toy_sample(16, vec![gt(0.2, 0.3, 0.4, 0.5)]);
    assert_eq!(augment(&s, &mut rng(0), &AugmentConfig::none()).unwrap(), s);
}

#[test]
fn augmentation_keeps_a_ground_truth() {
    let mut r = rng(3);
    let cfg = AugmentConfig { scale_prob: 1.0, ..AugmentConfig::default() };
    for _ in 0..10_000 {
        let n = r.gen_range(0..3);
        let gts: Vec<GroundTruth> = (0..n)
            .map(|_| {
                let (x, y) = (r.gen_range(0.0..0.9), r.gen_range(0.0..0.9));
                let (w, h) = (r.gen_range(0.02..0.3f64), r.gen_range(0.02..0.3f64));
                gt(x, y, (x + w).min(1.0), (y + h).min(1.0))
            })
            .collect();
        let s = toy_sample(8, gts);
        let out = augment(&s, &mut r, &cfg).unwrap();
        assert_eq!(out.input.shape(), s.input.shape());
        assert!(!out.gts.is_empty() || s.gts.is_empty());
        for g in &out.gts {
            assert!(g.bbox.validate().is_ok());
            assert!(g.bbox.as_array().iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}

#[test]
fn resize_preserves_constants_and_identity() {
    let t = Tensor::from_fn(&[2, 5, 7], |i| i as f32).unwrap();
    assert_eq!(resize_bilinear(&t, 5, 7).unwrap(), t);
    let c = Tensor::full(&[1, 4, 4], 0.25f32).unwrap();
    assert!(resize_bilinear(&c, 9, 3).unwrap().data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
}

fn one_lesion_spec(delta: Vec<f64>) -> PhantomSpec {
    PhantomSpec {
        random: None,
        lesions: vec![Lesion { center: [30.3, 28.7, 10.2], radius: 5.6, delta, class: 1 }],
        ..PhantomSpec::desk(64, 20)
    }
}

#[test]
fn portal_hidden_lesion_is_barely_visible() {
    let spec = one_lesion_spec(vec![0.0, 80.0, 0.0, -30.0]);
    let ph = generate_phantom(&spec, &mut rng(4)).unwrap();
    let l = &ph.lesions[0];
    let (x, y, z) = (30, 29, 10);
    assert!(l.contains(x, y, z));
    let mean = |phase: usize, inside: bool| {
        let mut acc = (0.0, 0);
        for yy in 0..64 {
            for xx in 0..64 {
                let lesion = l.contains(xx, yy, z);
                if spec.in_liver(xx, yy, z) && lesion == inside {
                    acc.0 += ph.volume.slice(phase, z)[yy * 64 + xx] as f64;
                    acc.1 += 1;
                }
            }
        }
        acc.0 / acc.1 as f64
    };
    assert!((mean(PORTAL_PHASE, true) - mean(PORTAL_PHASE, false)).abs() < spec.noise_sigma);
    assert!((mean(1, true) - mean(1, false) - 80.0).abs() < spec.noise_sigma);
}

#[test]
fn weak_label_box_matches_voxel_scan() {
    let mut r = rng(5);
    for _ in 0..20 {
        let spec = PhantomSpec::desk(48, 16);
        let ph = generate_phantom(&spec, &mut r).unwrap();
        for (li, l) in ph.lesions.iter().enumerate() {
            // Brute force over the whole volume with an independent predicate.
            let (mut xs, mut ys, mut zs) = (vec![], vec![], vec![]);
            for z in 0..16 {
                for y in 0..48 {
                    for x in 0..48 {
                        let d2 = (x as f64 - l.center[0]).powi(2) + (y as f64 - l.center[1]).powi(2) + (z as f64 - l.center[2]).powi(2);
                        if d2 <= l.radius.powi(2) {
                            xs.push(x);
                            ys.push(y);
                            zs.push(z);
                        }
                    }
                }
            }
            let labels: Vec<&WeakLabel> = ph.labels.iter().skip(li * 4).take(4).collect();
            assert_eq!(labels.len(), 4);
            let expect = BoundingBox {
                x_min: *xs.iter().min().unwrap() as f64 / 48.0,
                y_min: *ys.iter().min().unwrap() as f64 / 48.0,
                x_max: (*xs.iter().max().unwrap() + 1) as f64 / 48.0,
                y_max: (*ys.iter().max().unwrap() + 1) as f64 / 48.0,
            };
            for (p, lab) in labels.iter().enumerate() {
                assert_eq!(lab.phase, p);
                assert_eq!(lab.bbox, expect);
                assert_eq!((lab.z_start, lab.z_end), (*zs.iter().min().unwrap(), *zs.iter().max().unwrap()));
            }
        }
    }
}

#[test]
fn phantom_without_lesions_has_no_labels() {
    let spec = PhantomSpec { random: None, ..PhantomSpec::desk(16, 4) };
    assert!(generate_phantom(&spec, &mut rng(0)).unwrap().labels.is_empty());
}

#[test]
fn lesion_outside_liver_is_named() {
    let mut spec = one_lesion_spec(vec![0.0; 4]);
    spec.lesions.push(Lesion { center: [1.0, 1.0, 1.0], radius: 2.0, delta: vec![0.0; 4], class: 1 });
    assert!(matches!(generate_phantom(&spec, &mut rng(0)), Err(DataError::LesionOutsideLiver { index: 1 })));
}

#[test]
fn spec_text_round_trip() {
    let mut spec = one_lesion_spec(vec![0.0, 80.0, 0.0, -30.0]);
    spec.random = PhantomSpec::desk(64, 20).random;
    spec.seed = Some(7);
    spec.vendor_bias = -12.5;
    assert_eq!(PhantomSpec::parse(&spec.to_text()).unwrap(), spec);
    assert!(matches!(PhantomSpec::parse("depth=2\nheight=4\nwidth=4\nbogus=1"), Err(DataError::Config(ConfigError::Unknown(_)))));
}

#[test]
fn phantom_generation_is_seeded() {
    let spec = PhantomSpec::desk(32, 8);
    let a = generate_phantom(&spec, &mut rng(9)).unwrap();
    let b = generate_phantom(&spec, &mut rng(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn folds_partition_volumes() {
    let folds = split_folds(10, 5, 3).unwrap();
    assert_eq!(folds.len(), 5);
    let mut seen = vec![0; 10];
    for f in &folds {
        assert_eq!(f.val.len(), 2);
        assert_eq!(f.train.len(), 8);
        for &v in &f.val {
            seen[v] += 1;
            assert!(!f.train.contains(&v));
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
    assert_eq!(folds, split_folds(10, 5, 3).unwrap());
    assert_ne!(folds, split_folds(10, 5, 4).unwrap());
    assert!(matches!(split_folds(3, 5, 0), Err(DataError::Folds { .. })));
    let uneven = split_folds(11, 5, 0).unwrap();
    assert!(uneven.iter().all(|f| (2..=3).contains(&f.val.len())));
}

#[test]
fn validation_slices_never_train() {
    let spec = PhantomSpec::desk(16, 6);
    let vols: Vec<LabeledVolume> = (0..6)
        .map(|i| {
            let ph = generate_phantom(&spec, &mut rng(i)).unwrap();
            LabeledVolume { name: format!("v{i}"), volume: ph.volume, labels: ph.labels }
        })
        .collect();
    for f in split_folds(6, 3, 1).unwrap() {
        let train = lesion_slice_refs(&vols, &f.train);
        let val = lesion_slice_refs(&vols, &f.val);
        assert!(val.iter().all(|v| train.iter().all(|t| t.volume != v.volume)));
    }
}

#[test]
fn file_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ph = generate_phantom(&PhantomSpec { vendor_bias: 20.0, ..PhantomSpec::desk(16, 5) }, &mut rng(11)).unwrap();
    write_volume(&dir.path().join("a.vol"), &ph.volume).unwrap();
    write_labels(&dir.path().join("a.txt"), &ph.labels).unwrap();
    write_manifest(
        dir.path(),
        &[ManifestEntry { volume: "a.vol".into(), labels: "a.txt".into(), seed: 11, vendor_bias: 20.0 }],
    )
    .unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back[0].volume, ph.volume);
    assert_eq!(back[0].labels, ph.labels);

    std::fs::write(dir.path().join("bad.vol"), b"NOTAVOL!").unwrap();
    assert!(matches!(read_volume(&dir.path().join("bad.vol"), 0.0), Err(DataError::Format { .. })));
    std::fs::write(dir.path().join("bad.txt"), "0 1 2 0.1 0.1\n").unwrap();
    assert!(matches!(read_labels(&dir.path().join("bad.txt")), Err(DataError::Format { .. })));
}
