//! Convolution and pooling kernels. Cross-correlation semantics (no kernel
//! flip). Parallelism only ever splits output into disjoint slices that are
//! each filled by fixed-order sequential loops, so results are bit-identical
//! regardless of thread count.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// (N, C, H, W) view of a rank-3 or rank-4 tensor; rank-3 is a batch of one.
fn as_batched(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::Shape(format!(
            "expected (C,H,W) or (N,C,H,W), got {dims:?}"
        ))),
    }
}

pub(super) fn conv2d_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<F>> {
    let (n, c, h, wd) = as_batched(x.dims())?;
    let &[o, wc, kh, kw] = w.dims() else {
        return Err(Error::Shape(format!(
            "kernels must be (O,C,Kh,Kw), got {:?}",
            w.dims()
        )));
    };
    if wc != c {
        return Err(Error::Shape(format!(
            "input has {c} channels but kernels expect {wc}"
        )));
    }
    if b.dims() != [o] {
        return Err(Error::Shape(format!(
            "bias must be ({o}), got {:?}",
            b.dims()
        )));
    }
    if stride < 1 {
        return Err(Error::Config("conv2d stride must be >= 1".into()));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            wd + 2 * padding
        )));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;

    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let mut out = vec![F::zero(); n * o * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, slice)| {
        let (ni, oi) = (plane / o, plane % o);
        let x_base = ni * c * h * wd;
        let w_base = oi * c * kh * kw;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bs[oi];
                for ci in 0..c {
                    let xc = x_base + ci * h * wd;
                    let wc0 = w_base + ci * kh * kw;
                    for ky in 0..kh {
                        let iy = oy * stride + ky;
                        if iy < padding || iy >= h + padding {
                            continue;
                        }
                        let iy = iy - padding;
                        for kx in 0..kw {
                            let ix = ox * stride + kx;
                            if ix < padding || ix >= wd + padding {
                                continue;
                            }
                            let ix = ix - padding;
                            acc += xs[xc + iy * wd + ix] * ws[wc0 + ky * kw + kx];
                        }
                    }
                }
                slice[oy * ow + ox] = acc;
            }
        }
    });

    let dims = if x.rank() == 3 {
        vec![o, oh, ow]
    } else {
        vec![n, o, oh, ow]
    };
    Tensor::new(dims, out)
}

/// Gradients w.r.t. input, kernels and bias.
pub(super) fn conv2d_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
    stride: usize,
    padding: usize,
) -> [Tensor<F>; 3] {
    let (n, c, h, wd) = as_batched(x.dims()).expect("validated at forward");
    let [o, _, kh, kw] = *w.dims() else { unreachable!() };
    let (oh, ow) = {
        let d = dy.dims();
        (d[d.len() - 2], d[d.len() - 1])
    };
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = vec![F::zero(); xs.len()];
    dx.par_chunks_mut(c * h * wd).enumerate().for_each(|(ni, slice)| {
        for oi in 0..o {
            let dy_base = (ni * o + oi) * oh * ow;
            let w_base = oi * c * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dys[dy_base + oy * ow + ox];
                    for ci in 0..c {
                        let xc = ci * h * wd;
                        let wc0 = w_base + ci * kh * kw;
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < padding || ix >= wd + padding {
                                    continue;
                                }
                                let ix = ix - padding;
                                slice[xc + iy * wd + ix] += g * ws[wc0 + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut dw = vec![F::zero(); ws.len()];
    dw.par_chunks_mut(c * kh * kw).enumerate().for_each(|(oi, slice)| {
        for ni in 0..n {
            let x_base = ni * c * h * wd;
            let dy_base = (ni * o + oi) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dys[dy_base + oy * ow + ox];
                    for ci in 0..c {
                        let xc = x_base + ci * h * wd;
                        let wc0 = ci * kh * kw;
                        for ky in 0..kh {
                            let iy = oy * stride + ky;
                            if iy < padding || iy >= h + padding {
                                continue;
                            }
                            let iy = iy - padding;
                            for kx in 0..kw {
                                let ix = ox * stride + kx;
                                if ix < padding || ix >= wd + padding {
                                    continue;
                                }
                                let ix = ix - padding;
                                slice[wc0 + ky * kw + kx] += g * xs[xc + iy * wd + ix];
                            }
                        }
                    }
                }
            }
        }
    });

    let mut db = vec![F::zero(); o];
    for oi in 0..o {
        let mut acc = F::zero();
        for ni in 0..n {
            let base = (ni * o + oi) * oh * ow;
            for i in 0..oh * ow {
                acc += dys[base + i];
            }
        }
        db[oi] = acc;
    }

    [
        Tensor::new(x.dims().to_vec(), dx).expect("dx dims"),
        Tensor::new(w.dims().to_vec(), dw).expect("dw dims"),
        Tensor::new(vec![o], db).expect("db dims"),
    ]
}

/// Max pooling; also returns, per output element, the flat input index of
/// the window maximum (first occurrence in row-major window order).
pub(super) fn maxpool2d_forward<F: Scalar>(
    x: &Tensor<F>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<F>, Vec<usize>)> {
    let (n, c, h, w) = as_batched(x.dims())?;
    if kernel == 0 || stride == 0 {
        return Err(Error::Config("maxpool kernel and stride must be >= 1".into()));
    }
    if kernel > h || kernel > w {
        return Err(Error::Shape(format!(
            "pool kernel {kernel} exceeds input {h}x{w}"
        )));
    }
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    let xs = x.data();

    let mut out = vec![F::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane, (oslice, aslice))| {
            let x_base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_idx = 0usize;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = x_base + (oy * stride + ky) * w + (ox * stride + kx);
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    oslice[oy * ow + ox] = best;
                    aslice[oy * ow + ox] = best_idx;
                }
            }
        });

    let dims = if x.rank() == 3 {
        vec![c, oh, ow]
    } else {
        vec![n, c, oh, ow]
    };
    Ok((Tensor::new(dims, out)?, argmax))
}

pub(super) fn maxpool2d_backward<F: Scalar>(
    x: &Tensor<F>,
    argmax: &[usize],
    dy: &Tensor<F>,
) -> Tensor<F> {
    let mut dx = vec![F::zero(); x.len()];
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dx[idx] += g;
    }
    Tensor::new(x.dims().to_vec(), dx).expect("dx dims")
}
