//! From raw HU volumes to the network's two-channel cubic input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::volume::{Volume, VolumeKind};

pub const DEFAULT_WINDOW: (f64, f64) = (-1000.0, 400.0);
pub const DEFAULT_PAD_HU: f64 = 170.0;
pub const LUNG_THRESHOLD_HU: f32 = -320.0;

/// Channel-first `[2, S, S, S]` input: normalized CT then binary nodule mask.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    side: usize,
    data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub max_rotation_deg: f64,
    pub max_shift_voxels: usize,
    pub rng_seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            max_rotation_deg: 10.0,
            max_shift_voxels: 4,
            rng_seed: 0,
        }
    }
}

impl InputTensor {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        let plane = side.pow(3);
        if side == 0 || data.len() != 2 * plane {
            return Err(invalid!("input tensor of side {side} needs {} values, got {}", 2 * plane, data.len()));
        }
        let (ct, mask) = data.split_at(plane);
        if ct.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid!("CT channel has values outside [0, 1]"));
        }
        if mask.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(invalid!("mask channel is not binary"));
        }
        Ok(Self { side, data })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn shape(&self) -> [usize; 4] {
        [2, self.side, self.side, self.side]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn ct(&self) -> &[f32] {
        &self.data[..self.side.pow(3)]
    }

    pub fn mask(&self) -> &[f32] {
        &self.data[self.side.pow(3)..]
    }

    pub fn ct_volume(&self) -> Volume {
        let s = self.side;
        Volume::new([s; 3], None, VolumeKind::Normalized, self.ct().to_vec()).expect("validated")
    }

    pub fn mask_volume(&self) -> Volume {
        let s = self.side;
        Volume::new([s; 3], None, VolumeKind::Mask, self.mask().to_vec()).expect("validated")
    }
}

/// Linear interpolation position along one axis: lower index and weight of the upper one.
fn axis_taps(n_in: usize, n_out: usize, step: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|j| {
            let pos = (j as f64 * step).clamp(0.0, (n_in - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Trilinear resampling onto an isotropic grid of `target_spacing_mm`.
///
/// Output voxel `j` along an axis samples the input at physical position
/// `j · target`, i.e. the first voxels of both grids coincide; positions past
/// the last input voxel take the edge value. Masks use nearest neighbour.
pub fn resample_isotropic(v: &Volume, target_spacing_mm: f64) -> Result<Volume> {
    let spacing = v.spacing_mm().ok_or_else(|| invalid!("volume has no spacing to resample from"))?;
    if !(target_spacing_mm.is_finite() && target_spacing_mm > 0.0) {
        return Err(invalid!("target spacing {target_spacing_mm} must be positive"));
    }
    let shape_in = v.shape();
    let mut shape = [0usize; 3];
    for a in 0..3 {
        shape[a] = (shape_in[a] as f64 * spacing[a] / target_spacing_mm).round() as usize;
        if shape[a] == 0 {
            return Err(invalid!("resampling axis {a} of {shape_in:?} yields zero voxels"));
        }
    }
    let taps: Vec<_> = (0..3)
        .map(|a| axis_taps(shape_in[a], shape[a], target_spacing_mm / spacing[a]))
        .collect();
    let src = v.data();
    let [_, hi_, wi] = shape_in;
    let at = |z: usize, y: usize, x: usize| src[(z * hi_ + y) * wi + x] as f64;
    let nearest = v.kind() == VolumeKind::Mask;
    let mut out = Vec::with_capacity(shape.iter().product());
    for &(z0, z1, fz) in &taps[0] {
        for &(y0, y1, fy) in &taps[1] {
            for &(x0, x1, fx) in &taps[2] {
                let value = if nearest {
                    let pick = |lo, hi, f: f64| if f < 0.5 { lo } else { hi };
                    at(pick(z0, z1, fz), pick(y0, y1, fy), pick(x0, x1, fx))
                } else {
                    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                    let plane = |z| {
                        lerp(
                            lerp(at(z, y0, x0), at(z, y0, x1), fx),
                            lerp(at(z, y1, x0), at(z, y1, x1), fx),
                            fy,
                        )
                    };
                    lerp(plane(z0), plane(z1), fz)
                };
                out.push(value as f32);
            }
        }
    }
    Volume::new(shape, Some([target_spacing_mm; 3]), v.kind(), out)
}

/// Sets every voxel outside the lung mask to `pad_hu`.
pub fn apply_lung_mask(v: &Volume, lung_mask: &Volume, pad_hu: f64) -> Result<Volume> {
    if v.shape() != lung_mask.shape() {
        return Err(invalid!("volume {:?} and lung mask {:?} differ in shape", v.shape(), lung_mask.shape()));
    }
    if lung_mask.kind() != VolumeKind::Mask {
        return Err(invalid!("lung mask must have kind `mask`"));
    }
    let data = v
        .data()
        .iter()
        .zip(lung_mask.data())
        .map(|(&x, &m)| if m == 0.0 { pad_hu as f32 } else { x })
        .collect();
    Volume::new(v.shape(), v.spacing_mm(), VolumeKind::Hu, data)
}

/// Maps a HU value into `[0, 1]` through the window `(lo, hi)`.
pub fn normalize_value(x: f64, window: (f64, f64)) -> f32 {
    ((x - window.0) / (window.1 - window.0)).clamp(0.0, 1.0) as f32
}

pub fn normalize_hu(v: &Volume, window: (f64, f64)) -> Result<Volume> {
    if !(window.0 < window.1) {
        return Err(invalid!("window lower bound {} must be below upper bound {}", window.0, window.1));
    }
    // NaN HU values map to the window floor.
    let data = v
        .data()
        .iter()
        .map(|&x| if x.is_nan() { 0.0 } else { normalize_value(x as f64, window) })
        .collect();
    Volume::new(v.shape(), v.spacing_mm(), VolumeKind::Normalized, data)
}

/// Center-crops axes longer than `side` and pads shorter ones with `pad_value`,
/// putting the odd voxel of a pad after the data.
pub fn crop_or_pad(v: &Volume, side: usize, pad_value: f32) -> Result<Volume> {
    if side == 0 {
        return Err(invalid!("side must be at least 1"));
    }
    let shape = v.shape();
    // For each axis: output index o maps to input index o + offset.
    let offset: Vec<isize> = shape
        .iter()
        .map(|&n| if n >= side { ((n - side) / 2) as isize } else { -(((side - n) / 2) as isize) })
        .collect();
    let src = |o: usize, a: usize| {
        let i = o as isize + offset[a];
        (0..shape[a] as isize).contains(&i).then_some(i as usize)
    };
    let mut out = Vec::with_capacity(side.pow(3));
    for z in 0..side {
        for y in 0..side {
            for x in 0..side {
                out.push(match (src(z, 0), src(y, 1), src(x, 2)) {
                    (Some(zi), Some(yi), Some(xi)) => v.get(zi, yi, xi),
                    _ => pad_value,
                });
            }
        }
    }
    Volume::new([side; 3], v.spacing_mm(), v.kind(), out)
}

pub fn assemble_input(ct: &Volume, nodule_mask: &Volume) -> Result<InputTensor> {
    if ct.kind() != VolumeKind::Normalized || nodule_mask.kind() != VolumeKind::Mask {
        return Err(invalid!(
            "expected a normalized CT and a mask, got `{}` and `{}`",
            ct.kind().as_str(),
            nodule_mask.kind().as_str()
        ));
    }
    if ct.shape() != nodule_mask.shape() || !ct.is_cubic() {
        return Err(invalid!("CT {:?} and mask {:?} must share one cubic shape", ct.shape(), nodule_mask.shape()));
    }
    let mut data = ct.data().to_vec();
    data.extend_from_slice(nodule_mask.data());
    InputTensor::new(ct.shape()[0], data)
}

/// Random in-plane rotation about the volume center followed by an integer
/// shift per axis, drawn from `spec.rng_seed`. `ct_pad` fills voxels whose
/// source lies outside the field of view.
pub fn augment(t: &InputTensor, spec: &AugmentSpec, ct_pad: f32) -> InputTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let angle = if spec.max_rotation_deg > 0.0 {
        rng.random_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
    } else {
        0.0
    };
    let m = spec.max_shift_voxels as i64;
    let shift: [isize; 3] = std::array::from_fn(|_| rng.random_range(-m..=m) as isize);
    transform(t, angle, shift, ct_pad)
}

/// Deterministic core of [`augment`]: rotate by `angle_deg` in the xy-plane, then shift.
pub fn transform(t: &InputTensor, angle_deg: f64, shift: [isize; 3], ct_pad: f32) -> InputTensor {
    let s = t.side;
    let plane = s.pow(3);
    let (ct, mask) = (t.ct(), t.mask());
    let mut out = vec![0.0f32; 2 * plane];
    let (out_ct, out_mask) = out.split_at_mut(plane);
    let inside = |i: isize| (0..s as isize).contains(&i);
    let idx = |z: usize, y: usize, x: usize| (z * s + y) * s + x;

    if angle_deg == 0.0 {
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let (zs, ys, xs) = (z as isize - shift[0], y as isize - shift[1], x as isize - shift[2]);
                    let o = idx(z, y, x);
                    if inside(zs) && inside(ys) && inside(xs) {
                        let i = idx(zs as usize, ys as usize, xs as usize);
                        out_ct[o] = ct[i];
                        out_mask[o] = mask[i];
                    } else {
                        out_ct[o] = ct_pad;
                    }
                }
            }
        }
        return InputTensor { side: s, data: out };
    }

    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (s as f64 - 1.0) / 2.0;
    for z in 0..s {
        let zs = z as isize - shift[0];
        for y in 0..s {
            for x in 0..s {
                let o = idx(z, y, x);
                if !inside(zs) {
                    out_ct[o] = ct_pad;
                    continue;
                }
                // Inverse rotation of the unshifted output position.
                let (dy, dx) = ((y as isize - shift[1]) as f64 - c, (x as isize - shift[2]) as f64 - c);
                let ys = cos * dy + sin * dx + c;
                let xs = -sin * dy + cos * dx + c;
                let zi = zs as usize;

                let (yn, xn) = (ys.round() as isize, xs.round() as isize);
                if inside(yn) && inside(xn) {
                    out_mask[o] = mask[idx(zi, yn as usize, xn as usize)];
                }

                let (y0, x0) = (ys.floor(), xs.floor());
                let (fy, fx) = (ys - y0, xs - x0);
                let (y0, x0) = (y0 as isize, x0 as isize);
                if !(y0 + 1 >= 0 && y0 < s as isize && x0 + 1 >= 0 && x0 < s as isize) {
                    out_ct[o] = ct_pad;
                    continue;
                }
                let sample = |yy: isize, xx: isize| {
                    if inside(yy) && inside(xx) {
                        ct[idx(zi, yy as usize, xx as usize)] as f64
                    } else {
                        ct_pad as f64
                    }
                };
                let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
                    + fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
                out_ct[o] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    InputTensor { side: s, data: out }
}

fn ball_offsets(radius: isize) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                if dz * dz + dy * dy + dx * dx <= radius * radius {
                    out.push([dz, dy, dx]);
                }
            }
        }
    }
    out
}

/// Binary dilation (`erode = false`) or erosion with a structuring element.
/// Erosion treats voxels outside the volume as foreground.
fn morph(mask: &[bool], shape: [usize; 3], offsets: &[[isize; 3]], erode: bool) -> Vec<bool> {
    let [d, h, w] = shape;
    let mut out = vec![false; mask.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let hit = |o: &[isize; 3]| {
                    let (zz, yy, xx) = (z as isize + o[0], y as isize + o[1], x as isize + o[2]);
                    if zz < 0 || yy < 0 || xx < 0 || zz >= d as isize || yy >= h as isize || xx >= w as isize {
                        return erode;
                    }
                    mask[(zz as usize * h + yy as usize) * w + xx as usize]
                };
                out[(z * h + y) * w + x] = if erode { offsets.iter().all(hit) } else { offsets.iter().any(hit) };
            }
        }
    }
    out
}

/// Threshold-based lung segmentation for when no external mask is available.
///
/// Voxels below -320 HU are grouped into 6-connected components; components
/// reaching the in-plane border (outside air) are discarded, and the rest are
/// closed with a radius-2 ball.
pub fn fallback_lung_segment(v: &Volume) -> Volume {
    let shape = v.shape();
    let [d, h, w] = shape;
    let candidate: Vec<bool> = v.data().iter().map(|&x| x < LUNG_THRESHOLD_HU).collect();
    let mut label = vec![usize::MAX; candidate.len()];
    let mut keep = vec![false; candidate.len()];
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..candidate.len() {
        if !candidate[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        stack.push(start);
        members.clear();
        let mut touches_border = false;
        while let Some(i) = stack.pop() {
            members.push(i);
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
                touches_border = true;
            }
            let mut visit = |j: usize| {
                if candidate[j] && label[j] == usize::MAX {
                    label[j] = start;
                    stack.push(j);
                }
            };
            if z > 0 {
                visit(i - h * w);
            }
            if z + 1 < d {
                visit(i + h * w);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if !touches_border {
            members.iter().for_each(|&i| keep[i] = true);
        }
    }
    let ball = ball_offsets(2);
    let closed = morph(&morph(&keep, shape, &ball, false), shape, &ball, true);
    let data = closed.into_iter().map(|b| if b { 1.0 } else { 0.0 }).collect();
    Volume::new(shape, v.spacing_mm(), VolumeKind::Mask, data).expect("binary by construction")
}
