//! Stride-1, valid-padding 2-D cross-correlation (no kernel flip).

use super::{matmul_into, Tensor};
use crate::error::{Error, Result};

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: &[usize], kh: usize, kw: usize) -> Result<Self> {
        let [channels, height, width] = input[..] else {
            return Err(Error::Rank {
                op: "conv2d",
                expected: 3,
                shape: input.to_vec(),
            });
        };
        if kh > height || kw > width {
            return Err(Error::dim("conv2d", input, &[kh, kw]));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kh,
            kw,
            out_h: height - kh + 1,
            out_w: width - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `input` into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col(input: &[f64], g: &Geometry) -> Vec<f64> {
    let p = g.positions();
    let mut cols = vec![0.0; g.patch_len() * p];
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let src = &plane[(oy + ky) * g.width + kx..][..g.out_w];
                    dst[oy * g.out_w..(oy + 1) * g.out_w].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adds a patch matrix back onto an input-shaped buffer (adjoint of `im2col`).
fn col2im(cols: &[f64], g: &Geometry, out: &mut [f64]) {
    let p = g.positions();
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let dst = &mut plane[(oy + ky) * g.width + kx..][..g.out_w];
                    for (d, s) in dst.iter_mut().zip(&src[oy * g.out_w..(oy + 1) * g.out_w]) {
                        *d += s;
                    }
                }
                row += 1;
            }
        }
    }
}

fn kernel_dims(kernels: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    match kernels.shape()[..] {
        [f, c, kh, kw] if c == channels => Ok((f, kh, kw)),
        [_, _, _, _] => Err(Error::dim("conv2d", kernels.shape(), &[channels])),
        _ => Err(Error::Rank {
            op: "conv2d",
            expected: 4,
            shape: kernels.shape().to_vec(),
        }),
    }
}

/// `out[f] = sum_c input[c] (x) kernels[f][c] + bias[f]` for a `[C, H, W]`
/// input and `[F, C, kh, kw]` kernels; output is `[F, H-kh+1, W-kw+1]`.
pub fn conv2d_forward(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let channels = *input.shape().first().unwrap_or(&0);
    let (filters, kh, kw) = kernel_dims(kernels, channels)?;
    let g = Geometry::new(input.shape(), kh, kw)?;
    if bias.shape() != [filters] {
        return Err(Error::dim("conv2d bias", bias.shape(), &[filters]));
    }
    let p = g.positions();
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; filters * p];
    matmul_into(kernels.data(), &cols, &mut out, filters, g.patch_len(), p);
    for (plane, &b) in out.chunks_mut(p).zip(bias.data()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
    Ok(Tensor::from_parts(vec![filters, g.out_h, g.out_w], out))
}

/// Gradient of a scalar loss with respect to the kernels, given the input
/// and the loss gradient at the conv output.
pub fn conv2d_backward_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    kh: usize,
    kw: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kh, kw)?;
    let filters = grad_out.shape()[0];
    if grad_out.shape() != [filters, g.out_h, g.out_w] {
        return Err(Error::dim(
            "conv2d_backward_kernels",
            grad_out.shape(),
            &[filters, g.out_h, g.out_w],
        ));
    }
    let p = g.positions();
    let q = g.patch_len();
    let cols = im2col(input.data(), &g);
    let mut out = vec![0.0; filters * q];
    for (f, grad_row) in grad_out.data().chunks(p).enumerate() {
        for (j, col_row) in cols.chunks(p).enumerate() {
            out[f * q + j] = grad_row.iter().zip(col_row).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Tensor::from_parts(vec![filters, g.channels, kh, kw], out))
}

/// Gradient with respect to the `[C, H, W]` input.
pub fn conv2d_backward_input(
    kernels: &Tensor,
    grad_out: &Tensor,
    input_shape: &[usize],
) -> Result<Tensor> {
    let channels = *input_shape.first().unwrap_or(&0);
    let (filters, kh, kw) = kernel_dims(kernels, channels)?;
    let g = Geometry::new(input_shape, kh, kw)?;
    if grad_out.shape() != [filters, g.out_h, g.out_w] {
        return Err(Error::dim(
            "conv2d_backward_input",
            grad_out.shape(),
            &[filters, g.out_h, g.out_w],
        ));
    }
    let q = g.patch_len();
    let p = g.positions();
    let kt = kernels.reshape(&[filters, q])?.transpose()?;
    let mut cols = vec![0.0; q * p];
    matmul_into(kt.data(), grad_out.data(), &mut cols, q, filters, p);
    let mut out = vec![0.0; g.channels * g.height * g.width];
    col2im(&cols, &g, &mut out);
    Ok(Tensor::from_parts(input_shape.to_vec(), out))
}
