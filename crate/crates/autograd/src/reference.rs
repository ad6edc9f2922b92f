//! Direct-loop reference implementations.
//!
//! These are the contract the fast kernels are checked against. They favour
//! obviousness over speed and share no code with [`crate::kernels`].

use crate::element::Element;

fn at5(shape: [usize; 5], n: usize, c: usize, z: usize, y: usize, x: usize) -> usize {
    (((n * shape[1] + c) * shape[2] + z) * shape[3] + y) * shape[4] + x
}

/// Seven nested loops over `(n, co, z, y, x, ci, taps)`; out-of-bounds taps read zero.
pub fn conv3d_direct<T: Element>(
    x: &[T],
    x_shape: [usize; 5],
    w: &[T],
    w_shape: [usize; 5],
    b: &[T],
    stride: usize,
    pad: usize,
) -> (Vec<T>, [usize; 5]) {
    let [n, cin, d, h, wd] = x_shape;
    let [cout, _, k, _, _] = w_shape;
    let od = (d + 2 * pad - k) / stride + 1;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let out_shape = [n, cout, od, oh, ow];
    let mut out = vec![T::zero(); out_shape.iter().product()];
    for ni in 0..n {
        for co in 0..cout {
            for oz in 0..od {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.get(co).copied().unwrap_or_else(T::zero);
                        for ci in 0..cin {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let z = (oz * stride + dz) as isize - pad as isize;
                                        let y = (oy * stride + dy) as isize - pad as isize;
                                        let xx = (ox * stride + dx) as isize - pad as isize;
                                        if z < 0
                                            || y < 0
                                            || xx < 0
                                            || z as usize >= d
                                            || y as usize >= h
                                            || xx as usize >= wd
                                        {
                                            continue;
                                        }
                                        let xv = x[at5(x_shape, ni, ci, z as usize, y as usize, xx as usize)];
                                        let wv = w[at5(w_shape, co, ci, dz, dy, dx)];
                                        acc = acc + xv * wv;
                                    }
                                }
                            }
                        }
                        out[at5(out_shape, ni, co, oz, oy, ox)] = acc;
                    }
                }
            }
        }
    }
    (out, out_shape)
}

fn pool_direct<T: Element>(
    x: &[T],
    shape: [usize; 5],
    k: usize,
    stride: usize,
    reduce: impl Fn(&[T]) -> T,
) -> (Vec<T>, [usize; 5]) {
    let [n, c, d, h, w] = shape;
    let out_shape = [
        n,
        c,
        (d - k) / stride + 1,
        (h - k) / stride + 1,
        (w - k) / stride + 1,
    ];
    let mut out = Vec::with_capacity(out_shape.iter().product());
    let mut window = Vec::with_capacity(k * k * k);
    for ni in 0..n {
        for ci in 0..c {
            for oz in 0..out_shape[2] {
                for oy in 0..out_shape[3] {
                    for ox in 0..out_shape[4] {
                        window.clear();
                        for dz in 0..k {
                            for dy in 0..k {
                                for dx in 0..k {
                                    window.push(
                                        x[at5(shape, ni, ci, oz * stride + dz, oy * stride + dy, ox * stride + dx)],
                                    );
                                }
                            }
                        }
                        out.push(reduce(&window));
                    }
                }
            }
        }
    }
    (out, out_shape)
}

pub fn maxpool3d_direct<T: Element>(
    x: &[T],
    shape: [usize; 5],
    k: usize,
    stride: usize,
) -> (Vec<T>, [usize; 5]) {
    pool_direct(x, shape, k, stride, |w| {
        w.iter().copied().fold(T::neg_infinity(), T::max)
    })
}

pub fn avgpool3d_direct<T: Element>(
    x: &[T],
    shape: [usize; 5],
    k: usize,
    stride: usize,
) -> (Vec<T>, [usize; 5]) {
    pool_direct(x, shape, k, stride, |w| {
        w.iter().copied().sum::<T>() / T::from_usize(w.len()).unwrap()
    })
}

/// Triple-loop `x · w + b`.
pub fn dense_direct<T: Element>(
    x: &[T],
    rows: usize,
    features: usize,
    w: &[T],
    outputs: usize,
    b: &[T],
) -> Vec<T> {
    let mut out = vec![T::zero(); rows * outputs];
    for r in 0..rows {
        for o in 0..outputs {
            let mut acc = b[o];
            for f in 0..features {
                acc = acc + x[r * features + f] * w[f * outputs + o];
            }
            out[r * outputs + o] = acc;
        }
    }
    out
}
