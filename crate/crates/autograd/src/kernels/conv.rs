use rayon::prelude::*;

use crate::element::Element;
use crate::error::{shape_err, AutogradError, Result};

/// Resolved shapes of a 3D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        const OP: &str = "conv3d";
        let [n, cin, d, h, w] = crate::tensor::dims5(OP, x_shape)?;
        let [cout, wcin, kd, kh, kw] = crate::tensor::dims5(OP, w_shape)?;
        if wcin != cin {
            return Err(shape_err(
                OP,
                format!("input has {cin} channels, weight expects {wcin}"),
            ));
        }
        if kd != kh || kh != kw || kd % 2 == 0 {
            return Err(AutogradError::InvalidArgument {
                op: OP,
                detail: format!("kernel must be cubic with odd side, got {kd}x{kh}x{kw}"),
            });
        }
        if stride == 0 {
            return Err(AutogradError::InvalidArgument {
                op: OP,
                detail: "stride must be positive".into(),
            });
        }
        let mut output = [0; 3];
        for (o, &extent) in output.iter_mut().zip([d, h, w].iter()) {
            let padded = extent + 2 * pad;
            if padded < kd || !(padded - kd).is_multiple_of(stride) {
                return Err(AutogradError::NonIntegralOutput {
                    op: OP,
                    extent,
                    pad,
                    kernel: kd,
                    stride,
                });
            }
            *o = (padded - kd) / stride + 1;
        }
        Ok(Self {
            batch: n,
            in_channels: cin,
            out_channels: cout,
            input: [d, h, w],
            output,
            kernel: kd,
            stride,
            pad,
        })
    }

    pub fn output_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.output;
        [self.batch, self.out_channels, d, h, w]
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.output.iter().product()
    }

    /// Rows of the unfolded matrix: `in_channels * kernel^3`.
    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.pow(3)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for output position `o` and tap `t`.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }

    /// Output positions along the last axis whose tap `t` lands inside the
    /// input, as `lo..hi`.
    fn inner_range(&self, t: usize) -> (usize, usize) {
        let (s, ow, w) = (self.stride, self.output[2], self.input[2]);
        let lo = self.pad.saturating_sub(t).div_ceil(s).min(ow);
        // Largest o with o*s + t - pad <= w - 1.
        let hi = if w + self.pad > t { ((w + self.pad - t - 1) / s + 1).min(ow) } else { 0 };
        (lo, hi.max(lo))
    }
}

/// Calls `f(dst_offset, src_offset, len)` for every contiguous run that
/// connects a row of the unfolded matrix to the input channel it samples.
/// Positions not visited are padding.
fn for_each_run(g: &ConvGeometry, tz: usize, ty: usize, tx: usize, mut f: impl FnMut(usize, usize, usize)) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (lo, hi) = g.inner_range(tx);
    if lo == hi {
        return;
    }
    for oz in 0..od {
        let Some(z) = g.source(oz, tz, d) else { continue };
        for oy in 0..oh {
            let Some(y) = g.source(oy, ty, h) else { continue };
            let src = (z * h + y) * w + lo * g.stride + tx - g.pad;
            f((oz * oh + oy) * ow + lo, src, hi - lo);
        }
    }
}

/// Unfolds one sample `[Cin, D, H, W]` into `[Cin*k^3, D'*H'*W']`; `cols`
/// must start zeroed.
fn im2col<T: Element>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    im2col_with(g, x, cols, |v| v);
}

/// [`im2col`] converting each element with `f` on the way.
fn im2col_with<T: Copy, U: Copy>(g: &ConvGeometry, x: &[T], cols: &mut [U], f: impl Fn(T) -> U) {
    let k = g.kernel;
    let vol = g.in_volume();
    let p = g.out_volume();
    let s = g.stride;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let xc = &x[ci * vol..(ci + 1) * vol];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for_each_run(g, tz, ty, tx, |o, i, len| {
                        for j in 0..len {
                            dst[o + j] = f(xc[i + j * s]);
                        }
                    });
                    row += 1;
                }
            }
        }
    }
}

/// Folds `[Cin*k^3, P]` back into `[Cin, D, H, W]`, accumulating overlaps.
fn col2im<T: Element>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let k = g.kernel;
    let vol = g.in_volume();
    let p = g.out_volume();
    let s = g.stride;
    let mut row = 0;
    for ci in 0..g.in_channels {
        let dxc = &mut dx[ci * vol..(ci + 1) * vol];
        for tz in 0..k {
            for ty in 0..k {
                for tx in 0..k {
                    let src = &cols[row * p..(row + 1) * p];
                    for_each_run(g, tz, ty, tx, |o, i, len| {
                        for j in 0..len {
                            dxc[i + j * s] = dxc[i + j * s] + src[o + j];
                        }
                    });
                    row += 1;
                }
            }
        }
    }
}

/// im2col + GEMM convolution. `bias` may be empty for no bias.
pub fn conv3d_forward<T: Element>(g: &ConvGeometry, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let in_sz = g.in_channels * g.in_volume();
    let p = g.out_volume();
    let kk = g.patch_len();
    let out_sz = g.out_channels * p;
    // Accumulates in f64: single-precision sums of the patch products lose
    // enough to matter once a batchnorm over few values follows.
    let wide = |v: &[T]| v.iter().map(|e| e.as_f64()).collect::<Vec<f64>>();
    let w64 = wide(w);
    let mut out = vec![T::zero(); g.batch * out_sz];
    out.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(out_n, x_n)| {
            let cols: Vec<f64> = if g.is_pointwise() {
                wide(x_n)
            } else {
                let mut c = vec![0.0f64; kk * p];
                im2col_with(g, x_n, &mut c, |v: T| v.as_f64());
                c
            };
            let mut acc = vec![0.0f64; out_sz];
            for (co, row) in acc.chunks_mut(p).enumerate() {
                let b = bias.get(co).map(|v| v.as_f64()).unwrap_or(0.0);
                row.iter_mut().for_each(|v| *v = b);
            }
            f64::gemm(g.out_channels, kk, p, &w64, (kk as isize, 1), &cols, (p as isize, 1), 1.0, &mut acc);
            out_n.iter_mut().zip(acc).for_each(|(o, a)| *o = T::from_f64_lossy(a));
        });
    out
}

/// Gradients `(dx, dw, db)` of a convolution given the upstream gradient.
pub fn conv3d_backward<T: Element>(
    g: &ConvGeometry,
    x: &[T],
    w: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let in_sz = g.in_channels * g.in_volume();
    let p = g.out_volume();
    let kk = g.patch_len();
    let out_sz = g.out_channels * p;

    // Weight and bias gradients are sums whose terms largely cancel (a
    // following batchnorm zeroes their mean), so they accumulate in f64.
    let wide = |v: &[T]| v.iter().map(|e| e.as_f64()).collect::<Vec<f64>>();
    let per_sample: Vec<(Vec<T>, Vec<f64>)> = x
        .par_chunks(in_sz)
        .zip(dout.par_chunks(out_sz))
        .map(|(x_n, dout_n)| {
            let mut dx_n = vec![T::zero(); in_sz];
            let mut dw_n = vec![0.0f64; g.out_channels * kk];
            let dout_w = wide(dout_n);
            if g.is_pointwise() {
                // dx = W^T dout, dW = dout x^T
                T::gemm(kk, g.out_channels, p, w, (1, kk as isize), dout_n, (p as isize, 1), T::zero(), &mut dx_n);
                f64::gemm(g.out_channels, p, kk, &dout_w, (p as isize, 1), &wide(x_n), (1, p as isize), 0.0, &mut dw_n);
            } else {
                let mut cols = vec![T::zero(); kk * p];
                im2col(g, x_n, &mut cols);
                f64::gemm(g.out_channels, p, kk, &dout_w, (p as isize, 1), &wide(&cols), (1, p as isize), 0.0, &mut dw_n);
                T::gemm(kk, g.out_channels, p, w, (1, kk as isize), dout_n, (p as isize, 1), T::zero(), &mut cols);
                col2im(g, &cols, &mut dx_n);
            }
            (dx_n, dw_n)
        })
        .collect();

    let mut dx = Vec::with_capacity(g.batch * in_sz);
    let mut dw = vec![0.0f64; g.out_channels * kk];
    for (dx_n, dw_n) in per_sample {
        dx.extend_from_slice(&dx_n);
        dw.iter_mut().zip(&dw_n).for_each(|(a, &b)| *a += b);
    }
    let mut db = vec![0.0f64; g.out_channels];
    for dout_n in dout.chunks(out_sz) {
        for (co, row) in dout_n.chunks(p).enumerate() {
            db[co] += row.iter().map(|v| v.as_f64()).sum::<f64>();
        }
    }
    let narrow = |v: Vec<f64>| v.into_iter().map(T::from_f64_lossy).collect::<Vec<T>>();
    let (dw, db) = (narrow(dw), narrow(db));
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_rejects_non_integral_output() {
        let err = ConvGeometry::new(&[1, 1, 4, 4, 4], &[1, 1, 3, 3, 3], 2, 0).unwrap_err();
        assert!(matches!(err, AutogradError::NonIntegralOutput { .. }));
    }

    #[test]
    fn geometry_rejects_channel_mismatch() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4, 4], &[1, 3, 3, 3, 3], 1, 1).is_err());
    }

    #[test]
    fn geometry_rejects_even_kernel() {
        assert!(ConvGeometry::new(&[1, 1, 4, 4, 4], &[1, 1, 2, 2, 2], 1, 0).is_err());
    }

    #[test]
    fn all_ones_sum_to_27() {
        let g = ConvGeometry::new(&[1, 1, 3, 3, 3], &[1, 1, 3, 3, 3], 1, 0).unwrap();
        let out = conv3d_forward(&g, &[1.0f64; 27], &[1.0; 27], &[0.0]);
        assert_eq!(out, vec![27.0]);
    }

    #[test]
    fn centered_delta_is_identity() {
        let g = ConvGeometry::new(&[1, 1, 3, 4, 5], &[1, 1, 3, 3, 3], 1, 1).unwrap();
        let x: Vec<f64> = (0..60).map(|i| i as f64 * 0.5 - 7.0).collect();
        let mut w = vec![0.0; 27];
        w[13] = 1.0;
        assert_eq!(conv3d_forward(&g, &x, &w, &[0.0]), x);
    }
}
