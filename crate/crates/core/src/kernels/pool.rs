use rayon::prelude::*;

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Out-of-bounds taps never win the max.
    pub padding: usize,
}

impl PoolGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Max pooling over each `H×W` plane. Returns the pooled values and, per output,
/// the in-plane index of the first maximal tap in row-major window order.
pub fn maxpool2d_forward<T: Scalar>(g: &PoolGeometry, input: &[T]) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let out_plane = oh * ow;
    let mut out = vec![T::zero(); g.planes * out_plane];
    let mut argmax = vec![0u32; g.planes * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(argmax.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(p, (out_p, arg_p))| {
            let src = &input[p * plane..(p + 1) * plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = T::neg_infinity();
                    let mut best_idx = usize::MAX;
                    for ky in 0..g.kernel {
                        let Some(y) = (oy * g.stride + ky).checked_sub(g.padding) else { continue };
                        if y >= g.height {
                            continue;
                        }
                        for kx in 0..g.kernel {
                            let Some(x) = (ox * g.stride + kx).checked_sub(g.padding) else { continue };
                            if x >= g.width {
                                continue;
                            }
                            let idx = y * g.width + x;
                            if best_idx == usize::MAX || src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out_p[oy * ow + ox] = best;
                    arg_p[oy * ow + ox] = best_idx as u32;
                }
            }
        });
    (out, argmax)
}

pub fn maxpool2d_backward<T: Scalar>(g: &PoolGeometry, argmax: &[u32], grad_out: &[T]) -> Vec<T> {
    let plane = g.height * g.width;
    let out_plane = g.out_height() * g.out_width();
    let mut dx = vec![T::zero(); g.planes * plane];
    dx.par_chunks_mut(plane).enumerate().for_each(|(p, dx_p)| {
        let go = &grad_out[p * out_plane..(p + 1) * out_plane];
        let arg = &argmax[p * out_plane..(p + 1) * out_plane];
        for (&a, &v) in arg.iter().zip(go) {
            dx_p[a as usize] += v;
        }
    });
    dx
}
