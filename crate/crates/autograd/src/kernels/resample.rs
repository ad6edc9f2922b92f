use crate::element::Element;

/// Per-axis linear interpolation taps for align-corners resampling:
/// output index `o` reads `(1 - frac) * in[lo] + frac * in[hi]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
}

pub(crate) fn align_corners_taps<T: Element>(input: usize, output: usize) -> Vec<Tap<T>> {
    (0..output)
        .map(|o| {
            if output == 1 || input == 1 {
                return Tap {
                    lo: 0,
                    hi: 0,
                    frac: T::zero(),
                };
            }
            let src = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: T::from_f64_lossy(src - lo as f64),
            }
        })
        .collect()
}

pub(crate) struct Trilinear<T> {
    pub input: [usize; 3],
    pub output: [usize; 3],
    taps: [Vec<Tap<T>>; 3],
}

impl<T: Element> Trilinear<T> {
    pub fn new(input: [usize; 3], output: [usize; 3]) -> Self {
        Self {
            input,
            output,
            taps: [
                align_corners_taps(input[0], output[0]),
                align_corners_taps(input[1], output[1]),
                align_corners_taps(input[2], output[2]),
            ],
        }
    }

    /// The eight `(input index, weight)` contributions of output voxel `(z, y, x)`.
    #[inline]
    fn corners(&self, z: usize, y: usize, x: usize) -> [(usize, T); 8] {
        let [_, h, w] = self.input;
        let (tz, ty, tx) = (self.taps[0][z], self.taps[1][y], self.taps[2][x]);
        let one = T::one();
        let mut out = [(0, T::zero()); 8];
        let mut i = 0;
        for (zi, wz) in [(tz.lo, one - tz.frac), (tz.hi, tz.frac)] {
            for (yi, wy) in [(ty.lo, one - ty.frac), (ty.hi, ty.frac)] {
                for (xi, wx) in [(tx.lo, one - tx.frac), (tx.hi, tx.frac)] {
                    out[i] = ((zi * h + yi) * w + xi, wz * wy * wx);
                    i += 1;
                }
            }
        }
        out
    }

    pub fn forward_plane(&self, x: &[T], out: &mut [T]) {
        let [od, oh, ow] = self.output;
        let mut i = 0;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    out[i] = self
                        .corners(z, y, xx)
                        .iter()
                        .fold(T::zero(), |acc, &(idx, wt)| acc + wt * x[idx]);
                    i += 1;
                }
            }
        }
    }

    pub fn backward_plane(&self, dout: &[T], dx: &mut [T]) {
        let [od, oh, ow] = self.output;
        let mut i = 0;
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    for (idx, wt) in self.corners(z, y, xx) {
                        dx[idx] = dx[idx] + wt * dout[i];
                    }
                    i += 1;
                }
            }
        }
    }
}
