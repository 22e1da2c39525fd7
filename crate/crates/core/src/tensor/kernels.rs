//! Slice-level kernels for the heavier operations. Batch loops may run in
//! parallel; every reduction across examples is done sequentially in example
//! order so results do not depend on the thread count.

use rayon::prelude::*;

use super::{matmul, Real};

const K: usize = 3;
const KK: usize = K * K;

/// Unfolds one `[cin, h, w]` image into `[cin * 9, h * w]` patch columns for
/// a 3×3 kernel with zero padding of 1.
fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &mut cols[((c * KK) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let out = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xo, o) in out.iter_mut().enumerate() {
                        let sx = xo as isize + kx as isize - 1;
                        *o = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-column gradients back onto the image.
fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, gx: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut gx[c * hw..(c + 1) * hw];
        for ky in 0..K {
            for kx in 0..K {
                let row = &cols[((c * KK) + ky * K + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xo in 0..w {
                        let sx = xo as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] = dst[sx as usize] + row[y * w + xo];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn conv3x3_forward<T: Real>(
    dims: &ConvDims,
    x: &[T],
    weight: &[T],
    bias: &[T],
) -> Vec<T> {
    let ConvDims { batch, cin, cout, h, w } = *dims;
    let hw = h * w;
    let mut out = vec![T::zero(); batch * cout * hw];
    out.par_chunks_mut(cout * hw)
        .zip(x.par_chunks(cin * hw))
        .for_each_init(
            || vec![T::zero(); cin * KK * hw],
            |cols, (o, xi)| {
                im2col(xi, cin, h, w, cols);
                for (co, plane) in o.chunks_mut(hw).enumerate() {
                    plane.fill(bias[co]);
                }
                matmul(cout, cin * KK, hw, weight, false, cols, false, T::one(), o);
            },
        );
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv3x3_backward<T: Real>(
    dims: &ConvDims,
    x: &[T],
    weight: &[T],
    gout: &[T],
    need: [bool; 3],
) -> ConvGrads<T> {
    let ConvDims { batch, cin, cout, h, w } = *dims;
    let hw = h * w;
    let ckk = cin * KK;
    let per_example: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..batch)
        .into_par_iter()
        .map(|b| {
            let go = &gout[b * cout * hw..(b + 1) * cout * hw];
            let gw = need[1].then(|| {
                let mut cols = vec![T::zero(); ckk * hw];
                im2col(&x[b * cin * hw..(b + 1) * cin * hw], cin, h, w, &mut cols);
                let mut gw = vec![T::zero(); cout * ckk];
                matmul(cout, hw, ckk, go, false, &cols, true, T::zero(), &mut gw);
                gw
            });
            let gx = need[0].then(|| {
                let mut gcols = vec![T::zero(); ckk * hw];
                matmul(ckk, cout, hw, weight, true, go, false, T::zero(), &mut gcols);
                let mut gx = vec![T::zero(); cin * hw];
                col2im(&gcols, cin, h, w, &mut gx);
                gx
            });
            (gx, gw)
        })
        .collect();

    let mut grads = ConvGrads {
        input: None,
        weight: None,
        bias: None,
    };
    if need[0] {
        let mut gx = Vec::with_capacity(batch * cin * hw);
        for (g, _) in &per_example {
            gx.extend_from_slice(g.as_ref().expect("input grad computed"));
        }
        grads.input = Some(gx);
    }
    if need[1] {
        let mut gw = vec![T::zero(); cout * ckk];
        for (_, g) in &per_example {
            for (acc, v) in gw.iter_mut().zip(g.as_ref().expect("weight grad computed")) {
                *acc = *acc + *v;
            }
        }
        grads.weight = Some(gw);
    }
    if need[2] {
        let mut gb = vec![T::zero(); cout];
        for b in 0..batch {
            for (co, acc) in gb.iter_mut().enumerate() {
                let plane = &gout[(b * cout + co) * hw..][..hw];
                *acc = *acc + plane.iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(gb);
    }
    grads
}

/// Per-channel sums over the batch and spatial axes of a `[B, C, H, W]` buffer.
pub(crate) fn channel_sums<T: Real>(
    x: &[T],
    batch: usize,
    channels: usize,
    hw: usize,
    f: impl Fn(usize, T) -> T,
) -> Vec<T> {
    let mut sums = vec![T::zero(); channels];
    for b in 0..batch {
        for (c, acc) in sums.iter_mut().enumerate() {
            let base = (b * channels + c) * hw;
            for i in base..base + hw {
                *acc = *acc + f(i, x[i]);
            }
        }
    }
    sums
}
