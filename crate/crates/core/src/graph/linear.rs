//! Dense layers, softmax, and the small shape-preserving ops.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// (N, D) view of a rank-1 or rank-2 tensor.
fn as_rows(dims: &[usize]) -> Result<(usize, usize)> {
    match *dims {
        [d] => Ok((1, d)),
        [n, d] => Ok((n, d)),
        _ => Err(Error::Shape(format!("expected (D) or (N,D), got {dims:?}"))),
    }
}

pub(super) fn dense_forward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    b: &Tensor<F>,
) -> Result<Tensor<F>> {
    let (n, d) = as_rows(x.dims())?;
    let &[wd, k] = w.dims() else {
        return Err(Error::Shape(format!(
            "dense weights must be (D,K), got {:?}",
            w.dims()
        )));
    };
    if wd != d {
        return Err(Error::Shape(format!(
            "dense input length {d} does not match weight inner dim {wd}"
        )));
    }
    if b.dims() != [k] {
        return Err(Error::Shape(format!("bias must be ({k}), got {:?}", b.dims())));
    }
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();

    let mut out = vec![F::zero(); n * k];
    out.par_chunks_mut(k).enumerate().for_each(|(ni, row)| {
        row.copy_from_slice(bs);
        let x_row = &xs[ni * d..(ni + 1) * d];
        for (di, &xv) in x_row.iter().enumerate() {
            let w_row = &ws[di * k..(di + 1) * k];
            for (acc, &wv) in row.iter_mut().zip(w_row) {
                *acc += xv * wv;
            }
        }
    });

    let dims = if x.rank() == 1 { vec![k] } else { vec![n, k] };
    Tensor::new(dims, out)
}

pub(super) fn dense_backward<F: Scalar>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &Tensor<F>,
) -> [Tensor<F>; 3] {
    let (n, d) = as_rows(x.dims()).expect("validated at forward");
    let k = w.dims()[1];
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = vec![F::zero(); n * d];
    dx.par_chunks_mut(d).enumerate().for_each(|(ni, row)| {
        let dy_row = &dys[ni * k..(ni + 1) * k];
        for (di, slot) in row.iter_mut().enumerate() {
            let w_row = &ws[di * k..(di + 1) * k];
            let mut acc = F::zero();
            for (&g, &wv) in dy_row.iter().zip(w_row) {
                acc += g * wv;
            }
            *slot = acc;
        }
    });

    let mut dw = vec![F::zero(); d * k];
    dw.par_chunks_mut(k).enumerate().for_each(|(di, row)| {
        for ni in 0..n {
            let xv = xs[ni * d + di];
            let dy_row = &dys[ni * k..(ni + 1) * k];
            for (acc, &g) in row.iter_mut().zip(dy_row) {
                *acc += xv * g;
            }
        }
    });

    let mut db = vec![F::zero(); k];
    for ni in 0..n {
        for ki in 0..k {
            db[ki] += dys[ni * k + ki];
        }
    }

    [
        Tensor::new(x.dims().to_vec(), dx).expect("dx dims"),
        Tensor::new(w.dims().to_vec(), dw).expect("dw dims"),
        Tensor::new(vec![k], db).expect("db dims"),
    ]
}

/// Row-wise stable softmax over the last dimension.
pub(super) fn softmax_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, k) = as_rows(x.dims())?;
    let mut out = vec![F::zero(); n * k];
    for ni in 0..n {
        let row = &x.data()[ni * k..(ni + 1) * k];
        softmax_row(row, &mut out[ni * k..(ni + 1) * k]);
    }
    Tensor::new(x.dims().to_vec(), out)
}

/// Stable softmax of one row into `out`.
pub(crate) fn softmax_row<F: Scalar>(row: &[F], out: &mut [F]) {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

pub(super) fn softmax_backward<F: Scalar>(y: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let (n, k) = as_rows(y.dims()).expect("validated at forward");
    let ys = y.data();
    let dys = dy.data();
    let mut dx = vec![F::zero(); n * k];
    for ni in 0..n {
        let y_row = &ys[ni * k..(ni + 1) * k];
        let dy_row = &dys[ni * k..(ni + 1) * k];
        let dot: F = y_row.iter().zip(dy_row).map(|(&y, &g)| y * g).sum();
        for ki in 0..k {
            dx[ni * k + ki] = y_row[ki] * (dy_row[ki] - dot);
        }
    }
    Tensor::new(y.dims().to_vec(), dx).expect("dx dims")
}

pub(super) fn gap_forward<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let &[n, c, h, w] = x.dims() else {
        return Err(Error::Shape(format!(
            "global_avg_pool needs (N,C,H,W), got {:?}",
            x.dims()
        )));
    };
    let area = F::cast_usize(h * w);
    let mut out = vec![F::zero(); n * c];
    for (plane, slot) in out.iter_mut().enumerate() {
        let base = plane * h * w;
        let mut acc = F::zero();
        for i in 0..h * w {
            acc += x.data()[base + i];
        }
        *slot = acc / area;
    }
    Tensor::new(vec![n, c], out)
}

pub(super) fn gap_backward<F: Scalar>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let [_, _, h, w] = *x.dims() else { unreachable!() };
    let area = F::cast_usize(h * w);
    let mut dx = vec![F::zero(); x.len()];
    for (plane, &g) in dy.data().iter().enumerate() {
        let spread = g / area;
        for i in 0..h * w {
            dx[plane * h * w + i] = spread;
        }
    }
    Tensor::new(x.dims().to_vec(), dx).expect("dx dims")
}
