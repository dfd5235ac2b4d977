//! Raw tensor kernels shared by the tape and by plain (untaped) inference.
//!
//! All reductions use a fixed loop order so results are reproducible
//! bit-for-bit across runs.

use crate::error::{shape_err, Result};
use crate::tensor::{Shape, Tensor};

fn check_kernel(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<usize> {
    let [c_out, c_in, kh, kw] = kernel.shape();
    if c_out == 0 {
        return shape_err("kernel has no output channels");
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("kernel spatial size must be odd and square, got {kh}x{kw}"));
    }
    if padding != (kh - 1) / 2 {
        return shape_err(format!("padding {padding} does not preserve size for kernel {kh}"));
    }
    if input.channels() != c_in {
        return shape_err(format!(
            "input has {} channels but kernel expects {c_in}",
            input.channels()
        ));
    }
    Ok(kh)
}

#[inline]
fn valid_range(offset: isize, len: usize) -> (usize, usize) {
    let start = (-offset).max(0) as usize;
    let end = (len as isize - offset).clamp(0, len as isize) as usize;
    (start.min(end), end)
}

/// Same-padded, stride-1 cross-correlation without bias.
pub fn conv2d_same(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let k = check_kernel(input, kernel, padding)?;
    let [n, c_in, h, w] = input.shape();
    let c_out = kernel.shape()[0];
    let mut out = Tensor::zeros([n, c_out, h, w]);
    let p = padding as isize;
    for ni in 0..n {
        for o in 0..c_out {
            let out_plane = out.plane_mut(ni, o);
            for i in 0..c_in {
                let in_plane = input.plane(ni, i);
                for a in 0..k {
                    let dy = a as isize - p;
                    let (y0, y1) = valid_range(dy, h);
                    for b in 0..k {
                        let wv = kernel.get(o, i, a, b);
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = b as isize - p;
                        let (x0, x1) = valid_range(dx, w);
                        for y in y0..y1 {
                            let src_row = ((y as isize + dy) as usize) * w;
                            let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of `conv2d_same(input, K)` with respect to `K`, contracted with
/// `grad_output`. Output shape is `[C_out, C_in, k, k]`.
pub fn conv2d_kernel_grad(
    input: &Tensor,
    grad_output: &Tensor,
    kernel_size: usize,
    padding: usize,
) -> Result<Tensor> {
    let [n, c_in, h, w] = input.shape();
    let [gn, c_out, gh, gw] = grad_output.shape();
    if gn != n || gh != h || gw != w {
        return shape_err(format!(
            "kernel gradient of input {:?} against output {:?}",
            input.shape(),
            grad_output.shape()
        ));
    }
    if kernel_size % 2 == 0 || padding != (kernel_size - 1) / 2 {
        return shape_err(format!("invalid kernel size {kernel_size} / padding {padding}"));
    }
    let k = kernel_size;
    let p = padding as isize;
    let mut out = Tensor::zeros([c_out, c_in, k, k]);
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..k {
                let dy = a as isize - p;
                let (y0, y1) = valid_range(dy, h);
                for b in 0..k {
                    let dx = b as isize - p;
                    let (x0, x1) = valid_range(dx, w);
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let g_plane = grad_output.plane(ni, o);
                        let x_plane = input.plane(ni, i);
                        for y in y0..y1 {
                            let src_row = ((y as isize + dy) as usize) * w;
                            let xs = &x_plane[(src_row as isize + x0 as isize + dx) as usize
                                ..(src_row as isize + x1 as isize + dx) as usize];
                            let gs = &g_plane[y * w + x0..y * w + x1];
                            acc += gs.iter().zip(xs).map(|(g, x)| g * x).sum::<f64>();
                        }
                    }
                    out.set(o, i, a, b, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Swap the two channel axes of a kernel and rotate it by 180 degrees.
/// The result is the kernel of the adjoint (input-gradient) convolution.
pub fn flip_transpose(kernel: &Tensor) -> Tensor {
    let [c_out, c_in, kh, kw] = kernel.shape();
    let mut out = Tensor::zeros([c_in, c_out, kh, kw]);
    for o in 0..c_out {
        for i in 0..c_in {
            for a in 0..kh {
                for b in 0..kw {
                    out.set(i, o, a, b, kernel.get(o, i, kh - 1 - a, kw - 1 - b));
                }
            }
        }
    }
    out
}

/// `[N, C, H, W] -> [1, C, 1, 1]`
pub fn channel_sum(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape();
    let mut out = vec![0.0; c];
    for (ci, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for ni in 0..n {
            acc += x.plane(ni, ci).iter().sum::<f64>();
        }
        *slot = acc;
    }
    Tensor::channel_vector(&out)
}

/// `[1, C, 1, 1] -> shape`
pub fn channel_expand(v: &Tensor, shape: Shape) -> Result<Tensor> {
    if v.shape() != [1, shape[1], 1, 1] {
        return shape_err(format!("cannot expand {:?} to {:?}", v.shape(), shape));
    }
    let mut out = Tensor::zeros(shape);
    for ni in 0..shape[0] {
        for ci in 0..shape[1] {
            let value = v.data()[ci];
            out.plane_mut(ni, ci).fill(value);
        }
    }
    Ok(out)
}

/// `[N, C, H, W] -> [N, 1, H, W]`
pub fn sum_channels(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, 1, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            let src = x.plane(ni, ci).to_vec();
            for (d, s) in out.plane_mut(ni, 0).iter_mut().zip(&src) {
                *d += s;
            }
        }
    }
    out
}

/// `[N, 1, H, W] -> [N, C, H, W]`
pub fn expand_channels(x: &Tensor, channels: usize) -> Result<Tensor> {
    let [n, c, h, w] = x.shape();
    if c != 1 {
        return shape_err(format!("expand_channels needs a single channel, got {c}"));
    }
    let mut out = Tensor::zeros([n, channels, h, w]);
    for ni in 0..n {
        let src = x.plane(ni, 0).to_vec();
        for ci in 0..channels {
            out.plane_mut(ni, ci).copy_from_slice(&src);
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Same-padded convolution with a per-output-channel bias.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &[f64], padding: usize) -> Result<Tensor> {
    let mut out = conv2d_same(input, kernel, padding)?;
    if bias.len() != kernel.shape()[0] {
        return shape_err(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            kernel.shape()[0]
        ));
    }
    for ni in 0..out.batch() {
        for (o, b) in bias.iter().enumerate() {
            out.plane_mut(ni, o).iter_mut().for_each(|v| *v += b);
        }
    }
    Ok(out)
}
