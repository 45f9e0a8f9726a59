//! Eager, shape-checked forms of the differentiable primitives.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry, PoolGeometry};
use crate::tensor::{fmt_shape, Scalar, Tensor};

pub(crate) fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    input.expect_rank("conv2d", 4)?;
    weight.expect_rank("conv2d", 4)?;
    let (&[n, c, h, w], &[k, wc, kh, kw]) = (input.shape(), weight.shape()) else {
        unreachable!()
    };
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("weight with {c} input channels for input {}", fmt_shape(input.shape())),
            format!("weight {}", fmt_shape(weight.shape())),
        ));
    }
    if bias.shape() != [k] {
        return Err(Error::shape("conv2d", format!("bias [{k}]"), fmt_shape(bias.shape())));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d", "stride must be at least 1"));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    Ok(ConvGeometry {
        batch: n,
        in_channels: c,
        height: h,
        width: w,
        out_channels: k,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    })
}

/// 2-D cross-correlation (no kernel flip) of `[N,C,H,W]` with `[K,C,kh,kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias, stride, padding)?;
    let out = kernels::conv2d_forward(&g, input.data(), weight.data(), bias.data());
    Tensor::new(vec![g.batch, g.out_channels, g.out_height(), g.out_width()], out)
}

pub(crate) fn pool_geometry<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<PoolGeometry> {
    input.expect_rank("maxpool2d", 4)?;
    let &[n, c, h, w] = input.shape() else { unreachable!() };
    if kernel == 0 || stride == 0 {
        return Err(Error::invalid("maxpool2d", "kernel and stride must be at least 1"));
    }
    if padding >= kernel {
        return Err(Error::invalid("maxpool2d", format!("padding {padding} must be smaller than kernel {kernel}")));
    }
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return Err(Error::invalid(
            "maxpool2d",
            format!("window {kernel}x{kernel} larger than input {h}x{w}"),
        ));
    }
    Ok(PoolGeometry {
        planes: n * c,
        height: h,
        width: w,
        kernel,
        stride,
        padding,
    })
}

/// Max pooling with a square window, floor output sizing.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_padded(input, kernel, stride, 0)
}

/// Max pooling where out-of-bounds taps are ignored rather than zero.
pub fn maxpool2d_padded<T: Scalar>(input: &Tensor<T>, kernel: usize, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = pool_geometry(input, kernel, stride, padding)?;
    let (out, _) = kernels::maxpool2d_forward(&g, input.data());
    let s = input.shape();
    Tensor::new(vec![s[0], s[1], g.out_height(), g.out_width()], out)
}

pub(crate) fn check_dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    input.expect_rank("dense", 2)?;
    weight.expect_rank("dense", 2)?;
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (wd, m) = (weight.shape()[0], weight.shape()[1]);
    if wd != d {
        return Err(Error::shape(
            "dense",
            format!("weight [{d}, M] for input {}", fmt_shape(input.shape())),
            fmt_shape(weight.shape()),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape("dense", format!("bias [{m}]"), fmt_shape(bias.shape())));
    }
    Ok((n, d, m))
}

pub(crate) fn dense_forward<T: Scalar>(n: usize, d: usize, m: usize, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(b);
    }
    kernels::gemm_acc(n, m, d, x, w, &mut out);
    out
}

/// Affine map `input · weight + bias` for `[N,D] × [D,M]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, m) = check_dense(input, weight, bias)?;
    Tensor::new(vec![n, m], dense_forward(n, d, m, input.data(), weight.data(), bias.data()))
}
