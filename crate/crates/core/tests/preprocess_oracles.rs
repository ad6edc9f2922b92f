use colearn_core::preprocess::{
    apply_lung_mask, assemble_input, augment, crop_or_pad, fallback_lung_segment, normalize_hu, normalize_value,
    resample_isotropic, transform, AugmentSpec, InputTensor, DEFAULT_PAD_HU, DEFAULT_WINDOW,
};
use colearn_core::volume::{Volume, VolumeKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_volume(shape: [usize; 3], kind: VolumeKind, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| match kind {
            VolumeKind::Hu => rng.random_range(-1100.0..500.0),
            VolumeKind::Normalized => rng.random_range(0.0..1.0),
            VolumeKind::Mask => f32::from(rng.random_bool(0.3)),
        })
        .collect();
    Volume::new(shape, Some([1.0; 3]), kind, data).unwrap()
}

#[test]
fn axial_ramp_survives_resampling() {
    let (d, h, w) = (10, 4, 4);
    let sz = 2.5;
    let data: Vec<f32> = (0..d * h * w).map(|i| ((i / (h * w)) as f64 * sz) as f32).collect();
    let v = Volume::new([d, h, w], Some([sz, 1.0, 1.0]), VolumeKind::Hu, data).unwrap();
    let r = resample_isotropic(&v, 1.0).unwrap();
    assert_eq!(r.shape(), [25, 4, 4]);
    assert_eq!(r.spacing_mm(), Some([1.0; 3]));
    // Output z-index j sits at physical j mm; the ramp's value there is j.
    let last_interior = ((d - 1) as f64 * sz).floor() as usize;
    for z in 0..=last_interior {
        for y in 0..4 {
            for x in 0..4 {
                assert!((r.get(z, y, x) as f64 - z as f64).abs() <= 1e-5, "z={z}");
            }
        }
    }
}

#[test]
fn anisotropic_shape_doubles() {
    let v = Volume::filled([6, 5, 5], Some([2.0, 1.0, 1.0]), VolumeKind::Hu, 0.3).unwrap();
    let r = resample_isotropic(&v, 1.0).unwrap();
    assert_eq!(r.shape(), [12, 5, 5]);
    assert!(r.data().iter().all(|&x| x == 0.3));
    assert!(resample_isotropic(&Volume::filled([2, 2, 2], None, VolumeKind::Hu, 0.0).unwrap(), 1.0).is_err());
    assert!(resample_isotropic(&Volume::filled([1, 1, 1], Some([0.2; 3]), VolumeKind::Hu, 0.0).unwrap(), 1.0).is_err());
}

#[test]
fn own_spacing_is_identity() {
    let mut v = random_volume([5, 6, 7], VolumeKind::Hu, 3);
    v = Volume::new(v.shape(), Some([0.8, 0.8, 0.8]), VolumeKind::Hu, v.into_data()).unwrap();
    let r = resample_isotropic(&v, 0.8).unwrap();
    assert_eq!(r.shape(), v.shape());
    for (a, b) in r.data().iter().zip(v.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn resampled_masks_stay_binary() {
    let m = random_volume([5, 5, 5], VolumeKind::Mask, 9);
    let m = Volume::new(m.shape(), Some([1.7, 1.0, 0.6]), VolumeKind::Mask, m.into_data()).unwrap();
    let r = resample_isotropic(&m, 1.0).unwrap();
    assert!(r.data().iter().all(|&x| x == 0.0 || x == 1.0));
}

#[test]
fn lung_mask_matches_scalar_select() {
    let v = random_volume([4, 5, 6], VolumeKind::Hu, 1);
    let m = random_volume([4, 5, 6], VolumeKind::Mask, 2);
    let out = apply_lung_mask(&v, &m, 170.0).unwrap();
    for i in 0..v.len() {
        let expected = if m.data()[i] == 1.0 { v.data()[i] } else { 170.0 };
        assert_eq!(out.data()[i], expected);
    }
    let ones = Volume::filled([4, 5, 6], None, VolumeKind::Mask, 1.0).unwrap();
    assert_eq!(apply_lung_mask(&v, &ones, 170.0).unwrap().data(), v.data());
    let zeros = Volume::filled([4, 5, 6], None, VolumeKind::Mask, 0.0).unwrap();
    assert!(apply_lung_mask(&v, &zeros, 170.0).unwrap().data().iter().all(|&x| x == 170.0));
    assert!(apply_lung_mask(&v, &Volume::filled([4, 5, 5], None, VolumeKind::Mask, 1.0).unwrap(), 170.0).is_err());
}

#[test]
fn window_arithmetic() {
    assert_eq!(normalize_value(-1000.0, DEFAULT_WINDOW), 0.0);
    assert_eq!(normalize_value(400.0, DEFAULT_WINDOW), 1.0);
    assert_eq!(normalize_value(600.0, DEFAULT_WINDOW), 1.0);
    assert!((normalize_value(DEFAULT_PAD_HU, DEFAULT_WINDOW) as f64 - 0.8357142857).abs() < 1e-7);
    let v = Volume::filled([1, 1, 1], None, VolumeKind::Hu, 0.0).unwrap();
    assert!(normalize_hu(&v, (10.0, 10.0)).is_err());
}

proptest! {
    #[test]
    fn normalization_is_monotone(a in -3000.0f64..3000.0, b in -3000.0f64..3000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(normalize_value(lo, DEFAULT_WINDOW) <= normalize_value(hi, DEFAULT_WINDOW));
    }
}

/// Explicit index map: output `o` on an axis of input length `n` reads input
/// `o + floor((n - S) / 2)` when cropping and `o - floor((S - n) / 2)` when padding.
fn crop_pad_oracle(v: &Volume, side: usize, pad: f32) -> Vec<f32> {
    let shape = v.shape();
    let map = |o: usize, n: usize| -> Option<usize> {
        let i = if n >= side { o as i64 + ((n - side) / 2) as i64 } else { o as i64 - ((side - n) / 2) as i64 };
        (i >= 0 && i < n as i64).then_some(i as usize)
    };
    let mut out = Vec::new();
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                out.push(match (map(z, shape[0]), map(y, shape[1]), map(x, shape[2])) {
                    (Some(a), Some(b), Some(c)) => v.get(a, b, c),
                    _ => pad,
                });
            }
        }
    }
    out
}

#[test]
fn crop_or_pad_matches_index_map() {
    let v = random_volume([31, 33, 32], VolumeKind::Normalized, 4);
    let out = crop_or_pad(&v, 32, 0.25).unwrap();
    assert_eq!(out.shape(), [32, 32, 32]);
    assert_eq!(out.data(), &crop_pad_oracle(&v, 32, 0.25)[..]);
    // The single z pad slice lands after the data.
    assert!((0..32).all(|y| out.get(31, y, 0) == 0.25));
    assert_eq!(out.get(0, 0, 0), v.get(0, 0, 0));
    for shape in [[7, 9, 12], [12, 3, 10], [10, 10, 10]] {
        let v = random_volume(shape, VolumeKind::Normalized, 8);
        assert_eq!(crop_or_pad(&v, 10, 0.5).unwrap().data(), &crop_pad_oracle(&v, 10, 0.5)[..]);
    }
}

#[test]
fn crop_drops_one_slice_each_end() {
    let v = random_volume([10, 8, 8], VolumeKind::Normalized, 6);
    let out = crop_or_pad(&v, 8, 0.0).unwrap();
    for z in 0..8 {
        assert_eq!(out.get(z, 3, 4), v.get(z + 1, 3, 4));
    }
    let same = random_volume([8, 8, 8], VolumeKind::Normalized, 6);
    assert_eq!(crop_or_pad(&same, 8, 0.0).unwrap().data(), same.data());
}

fn input(side: usize, seed: u64) -> InputTensor {
    let ct = random_volume([side; 3], VolumeKind::Normalized, seed);
    let mask = random_volume([side; 3], VolumeKind::Mask, seed + 1);
    assemble_input(&ct, &mask).unwrap()
}

#[test]
fn assembly_round_trips_channels() {
    let ct = random_volume([6; 3], VolumeKind::Normalized, 1);
    let mask = random_volume([6; 3], VolumeKind::Mask, 2);
    let t = assemble_input(&ct, &mask).unwrap();
    assert_eq!(t.shape(), [2, 6, 6, 6]);
    assert_eq!(t.ct_volume().data(), ct.data());
    assert_eq!(t.mask_volume().data(), mask.data());
    let mut bad = mask.data().to_vec();
    bad[0] = 0.5;
    let mut data = ct.data().to_vec();
    data.extend(bad);
    assert!(InputTensor::new(6, data).is_err());
    assert!(assemble_input(&ct, &random_volume([6, 6, 5], VolumeKind::Mask, 3)).is_err());
    assert!(assemble_input(&mask, &mask).is_err());
}

#[test]
fn zero_augmentation_is_identity() {
    let t = input(8, 11);
    let spec = AugmentSpec {
        max_rotation_deg: 0.0,
        max_shift_voxels: 0,
        rng_seed: 99,
    };
    assert_eq!(augment(&t, &spec, 0.8), t);
}

#[test]
fn unit_shift_moves_one_hot_mask() {
    let s = 6;
    let mut data = vec![0.5f32; s * s * s];
    let mut mask = vec![0.0f32; s * s * s];
    mask[(2 * s + 3) * s + 1] = 1.0;
    data.extend(mask);
    let t = InputTensor::new(s, data).unwrap();
    let moved = transform(&t, 0.0, [1, 0, 0], 0.8);
    let m = moved.mask();
    assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 1);
    assert_eq!(m[(3 * s + 3) * s + 1], 1.0);
    // The vacated first slice is filled with the CT pad value.
    assert!(moved.ct()[..s * s].iter().all(|&v| v == 0.8));
}

#[test]
fn augmentation_is_seed_deterministic_and_binary() {
    let t = input(10, 21);
    for seed in 0..10 {
        let spec = AugmentSpec {
            rng_seed: seed,
            ..AugmentSpec::default()
        };
        let a = augment(&t, &spec, 0.8);
        assert_eq!(a, augment(&t, &spec, 0.8));
        assert!(a.mask().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(a.ct().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn shift_loses_only_voxels_leaving_the_view() {
    let t = input(9, 31);
    let s = 9isize;
    for shift in [[2, -1, 3], [-4, 4, 0], [0, 0, -2]] {
        let moved = transform(&t, 0.0, shift, 0.8);
        let kept = (0..s)
            .flat_map(|z| (0..s).flat_map(move |y| (0..s).map(move |x| (z, y, x))))
            .filter(|&(z, y, x)| {
                let src = [z - shift[0], y - shift[1], x - shift[2]];
                src.iter().all(|&c| (0..s).contains(&c)) && t.mask()[((src[0] * s + src[1]) * s + src[2]) as usize] == 1.0
            })
            .count();
        assert_eq!(moved.mask().iter().filter(|&&v| v == 1.0).count(), kept);
    }
}

/// Air-filled interior inside a one-voxel tissue shell.
fn shell_phantom(side: usize) -> Volume {
    let mut data = vec![-1000.0f32; side.pow(3)];
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                if [z, y, x].iter().any(|&c| c == 0 || c == side - 1) {
                    data[(z * side + y) * side + x] = 40.0;
                }
            }
        }
    }
    Volume::new([side; 3], Some([1.0; 3]), VolumeKind::Hu, data).unwrap()
}

#[test]
fn fallback_marks_interior_of_air_shell() {
    let side = 12;
    let v = shell_phantom(side);
    let m = fallback_lung_segment(&v);
    for z in 1..side - 1 {
        for y in 1..side - 1 {
            for x in 1..side - 1 {
                assert_eq!(m.get(z, y, x), 1.0, "interior voxel ({z},{y},{x})");
            }
        }
    }
    assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
}

#[test]
fn fallback_on_tissue_is_empty() {
    let v = Volume::filled([10, 10, 10], None, VolumeKind::Hu, 40.0).unwrap();
    assert_eq!(fallback_lung_segment(&v).count_nonzero(), 0);
}

#[test]
fn fallback_is_stable_under_its_own_mask() {
    let v = shell_phantom(14);
    let first = fallback_lung_segment(&v);
    let masked = apply_lung_mask(&v, &first, 170.0).unwrap();
    let second = fallback_lung_segment(&masked);
    for (a, b) in first.data().iter().zip(second.data()) {
        assert!(*b >= *a, "re-segmentation lost a lung voxel");
    }
}
