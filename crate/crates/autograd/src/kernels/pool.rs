use rayon::prelude::*;

use crate::element::Element;
use crate::error::{AutogradError, Result};

/// Window size and stride of a pooling layer.
///
/// With `partial_windows` unset, every spatial extent must tile exactly;
/// otherwise trailing windows are clipped to the volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub partial_windows: bool,
}

impl PoolSpec {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            partial_windows: false,
        }
    }
}

impl Default for PoolSpec {
    fn default() -> Self {
        Self::new(2, 2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub spec: PoolSpec,
}

impl PoolGeometry {
    pub fn new(op: &'static str, shape: &[usize], spec: PoolSpec) -> Result<Self> {
        let [n, c, d, h, w] = crate::tensor::dims5(op, shape)?;
        if spec.kernel == 0 || spec.stride == 0 {
            return Err(AutogradError::InvalidArgument {
                op,
                detail: "kernel and stride must be positive".into(),
            });
        }
        let mut output = [0; 3];
        for (o, &extent) in output.iter_mut().zip([d, h, w].iter()) {
            let fits = extent >= spec.kernel && (extent - spec.kernel).is_multiple_of(spec.stride);
            if !fits && !spec.partial_windows {
                return Err(AutogradError::NonIntegralOutput {
                    op,
                    extent,
                    pad: 0,
                    kernel: spec.kernel,
                    stride: spec.stride,
                });
            }
            *o = if extent <= spec.kernel {
                1
            } else {
                (extent - spec.kernel).div_ceil(spec.stride) + 1
            };
        }
        Ok(Self {
            batch: n,
            channels: c,
            input: [d, h, w],
            output,
            spec,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.output;
        [self.batch, self.channels, d, h, w]
    }

    fn window(&self, o: usize, extent: usize) -> std::ops::Range<usize> {
        let start = o * self.spec.stride;
        start..(start + self.spec.kernel).min(extent)
    }

    fn planes(&self) -> (usize, usize) {
        (
            self.input.iter().product(),
            self.output.iter().product(),
        )
    }
}

/// Max pooling; returns the output and, per output element, the flat
/// in-plane index of the winning input (first maximum in window order).
pub fn maxpool3d_forward<T: Element>(g: &PoolGeometry, x: &[T]) -> (Vec<T>, Vec<usize>) {
    let (in_plane, out_plane) = g.planes();
    let [_, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let mut out = vec![T::zero(); g.batch * g.channels * out_plane];
    let mut arg = vec![0usize; out.len()];
    out.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .zip(x.par_chunks(in_plane))
        .for_each(|((out_p, arg_p), x_p)| {
            let mut i = 0;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0;
                        for z in g.window(oz, g.input[0]) {
                            for y in g.window(oy, h) {
                                for xx in g.window(ox, w) {
                                    let idx = (z * h + y) * w + xx;
                                    if x_p[idx] > best {
                                        best = x_p[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        out_p[i] = best;
                        arg_p[i] = best_idx;
                        i += 1;
                    }
                }
            }
        });
    (out, arg)
}

pub fn maxpool3d_backward<T: Element>(g: &PoolGeometry, argmax: &[usize], dout: &[T]) -> Vec<T> {
    let (in_plane, out_plane) = g.planes();
    let mut dx = vec![T::zero(); g.batch * g.channels * in_plane];
    dx.par_chunks_mut(in_plane)
        .zip(argmax.par_chunks(out_plane))
        .zip(dout.par_chunks(out_plane))
        .for_each(|((dx_p, arg_p), dout_p)| {
            for (&idx, &gr) in arg_p.iter().zip(dout_p) {
                dx_p[idx] = dx_p[idx] + gr;
            }
        });
    dx
}

/// Mean over each (possibly clipped) window.
pub fn avgpool3d_forward<T: Element>(g: &PoolGeometry, x: &[T]) -> Vec<T> {
    let (in_plane, out_plane) = g.planes();
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let mut out = vec![T::zero(); g.batch * g.channels * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(x.par_chunks(in_plane))
        .for_each(|(out_p, x_p)| {
            let mut i = 0;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        let mut count = 0usize;
                        for z in g.window(oz, d) {
                            for y in g.window(oy, h) {
                                for xx in g.window(ox, w) {
                                    acc = acc + x_p[(z * h + y) * w + xx];
                                    count += 1;
                                }
                            }
                        }
                        out_p[i] = acc / T::from_usize(count).unwrap();
                        i += 1;
                    }
                }
            }
        });
    out
}

pub fn avgpool3d_backward<T: Element>(g: &PoolGeometry, dout: &[T]) -> Vec<T> {
    let (in_plane, out_plane) = g.planes();
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let mut dx = vec![T::zero(); g.batch * g.channels * in_plane];
    dx.par_chunks_mut(in_plane)
        .zip(dout.par_chunks(out_plane))
        .for_each(|(dx_p, dout_p)| {
            let mut i = 0;
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (zr, yr, xr) = (g.window(oz, d), g.window(oy, h), g.window(ox, w));
                        let count = zr.len() * yr.len() * xr.len();
                        let share = dout_p[i] / T::from_usize(count).unwrap();
                        for z in zr {
                            for y in yr.clone() {
                                for xx in xr.clone() {
                                    let idx = (z * h + y) * w + xx;
                                    dx_p[idx] = dx_p[idx] + share;
                                }
                            }
                        }
                        i += 1;
                    }
                }
            }
        });
    dx
}

/// `[N, C, D, H, W] -> [N, C]` spatial mean.
pub fn global_avgpool_forward<T: Element>(plane: usize, x: &[T]) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    x.chunks(plane)
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect()
}

pub fn global_avgpool_backward<T: Element>(plane: usize, dout: &[T]) -> Vec<T> {
    let denom = T::from_usize(plane).unwrap();
    dout.iter()
        .flat_map(|&g| std::iter::repeat_n(g / denom, plane))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_through_eight_block() {
        let g = PoolGeometry::new("pool", &[1, 1, 2, 2, 2], PoolSpec::default()).unwrap();
        let x: Vec<f64> = (1..=8).map(f64::from).collect();
        let (mx, arg) = maxpool3d_forward(&g, &x);
        assert_eq!(mx, vec![8.0]);
        assert_eq!(arg, vec![7]);
        assert_eq!(avgpool3d_forward(&g, &x), vec![4.5]);
    }

    #[test]
    fn indivisible_extent_needs_partial_flag() {
        let spec = PoolSpec::default();
        assert!(PoolGeometry::new("pool", &[1, 1, 3, 4, 4], spec).is_err());
        let partial = PoolSpec {
            partial_windows: true,
            ..spec
        };
        let g = PoolGeometry::new("pool", &[1, 1, 3, 4, 4], partial).unwrap();
        assert_eq!(g.output, [2, 2, 2]);
    }

    #[test]
    fn clipped_average_divides_by_valid_count() {
        let spec = PoolSpec {
            partial_windows: true,
            ..PoolSpec::default()
        };
        let g = PoolGeometry::new("pool", &[1, 1, 1, 1, 3], spec).unwrap();
        assert_eq!(avgpool3d_forward(&g, &[1.0f64, 3.0, 5.0]), vec![2.0, 5.0]);
    }
}
