use rayon::prelude::*;

use super::gemm::{gemm_acc, transpose};
use crate::tensor::Scalar;

/// Static shape of a 2-D cross-correlation over an `N×C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    /// Source pixel index for output `(oy, ox)` and kernel tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky).checked_sub(self.padding)?;
        let x = (ox * self.stride + kx).checked_sub(self.padding)?;
        (y < self.height && x < self.width).then_some(y * self.width + x)
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` column matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let pixels = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let src = &image[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        dst[oy * ow + ox] = match g.source(oy, ox, ky, kx) {
                            Some(idx) => src[idx],
                            None => T::zero(),
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column matrix back onto a `C×H×W` image gradient.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let plane = g.height * g.width;
    let pixels = oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        let dst = &mut image[c * plane..(c + 1) * plane];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..oh {
                    for ox in 0..ow {
                        if let Some(idx) = g.source(oy, ox, ky, kx) {
                            dst[idx] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation forward pass. Each output is `bias + Σ_{c,ky,kx} w·x`
/// accumulated in that (row-major) order.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * pixels;
    let mut out = vec![T::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len).enumerate().for_each(|(n, out_img)| {
        for (k, row) in out_img.chunks_mut(pixels).enumerate() {
            row.fill(bias[k]);
        }
        let image = &input[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm_acc(g.out_channels, pixels, patch, weight, image, out_img);
        } else {
            let mut cols = vec![T::zero(); patch * pixels];
            im2col(g, image, &mut cols);
            gemm_acc(g.out_channels, pixels, patch, weight, &cols, out_img);
        }
    });
    out
}

#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

/// Backward pass; only the requested gradients are computed.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: [bool; 3],
) -> ConvGrads<T> {
    let [want_input, want_weight, want_bias] = want;
    let pixels = g.out_pixels();
    let patch = g.patch_len();
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * pixels;

    let bias = want_bias.then(|| {
        let mut db = vec![T::zero(); g.out_channels];
        for img in grad_out.chunks(out_len) {
            for (k, row) in img.chunks(pixels).enumerate() {
                db[k] += row.iter().copied().sum::<T>();
            }
        }
        db
    });

    let weight_grad = want_weight.then(|| {
        let partials: Vec<Vec<T>> = (0..g.batch)
            .into_par_iter()
            .map(|n| {
                let image = &input[n * in_len..(n + 1) * in_len];
                let cols_t = if g.is_pointwise() {
                    transpose(patch, pixels, image)
                } else {
                    let mut cols = vec![T::zero(); patch * pixels];
                    im2col(g, image, &mut cols);
                    transpose(patch, pixels, &cols)
                };
                let mut dw = vec![T::zero(); g.out_channels * patch];
                gemm_acc(
                    g.out_channels,
                    patch,
                    pixels,
                    &grad_out[n * out_len..(n + 1) * out_len],
                    &cols_t,
                    &mut dw,
                );
                dw
            })
            .collect();
        let mut dw = vec![T::zero(); g.out_channels * patch];
        for p in partials {
            for (a, b) in dw.iter_mut().zip(p) {
                *a += b;
            }
        }
        dw
    });

    let input_grad = want_input.then(|| {
        let w_t = transpose(g.out_channels, patch, weight);
        let mut dx = vec![T::zero(); g.batch * in_len];
        dx.par_chunks_mut(in_len).enumerate().for_each(|(n, dx_img)| {
            let go = &grad_out[n * out_len..(n + 1) * out_len];
            if g.is_pointwise() {
                gemm_acc(patch, pixels, g.out_channels, &w_t, go, dx_img);
            } else {
                let mut dcols = vec![T::zero(); patch * pixels];
                gemm_acc(patch, pixels, g.out_channels, &w_t, go, &mut dcols);
                col2im(g, &dcols, dx_img);
            }
        });
        dx
    });

    ConvGrads {
        input: input_grad,
        weight: weight_grad,
        bias,
    }
}
