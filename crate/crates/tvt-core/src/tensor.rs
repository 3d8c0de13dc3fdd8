//! Dense f64 tensors and the handful of hot kernels (matmul variants,
//! im2col/col2im) the autodiff tape is built on.
//!
//! All kernels use fixed loop orders so results are bit-identical across
//! runs; every matmul variant returns the number of multiply-accumulate
//! operations it executed, which feeds the instrumented complexity counter.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{CoreError, Result};

/// Dense row-major f64 tensor with a dynamic shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::shape(format!(
                "shape {shape:?} wants {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Interprets the tensor as [channels, height, width].
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            other => Err(CoreError::shape(format!("expected rank 3, got {other:?}"))),
        }
    }

    /// Interprets the tensor as [rows, cols].
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(CoreError::shape(format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(mut self, f: impl Fn(f64) -> f64) -> Tensor {
        for v in self.data.iter_mut() {
            *v = f(*v);
        }
        self
    }
}

/// c[m,n] += a[m,k] * b[k,n]. Returns MACs executed (m*k*n).
pub fn mm_nn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> u64 {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        let mut l = 0;
        while l + 4 <= k {
            let a0 = arow[l];
            let a1 = arow[l + 1];
            let a2 = arow[l + 2];
            let a3 = arow[l + 3];
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            l += 4;
        }
        while l < k {
            let al = arow[l];
            if al != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    crow[j] += al * brow[j];
                }
            }
            l += 1;
        }
    }
    (m * k * n) as u64
}

/// c[m,n] += a[m,k] * b[n,k]^T. Returns MACs executed (m*k*n).
pub fn mm_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> u64 {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s0 = 0.0;
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            let mut s3 = 0.0;
            let mut l = 0;
            while l + 4 <= k {
                s0 += arow[l] * brow[l];
                s1 += arow[l + 1] * brow[l + 1];
                s2 += arow[l + 2] * brow[l + 2];
                s3 += arow[l + 3] * brow[l + 3];
                l += 4;
            }
            let mut dot = (s0 + s1) + (s2 + s3);
            while l < k {
                dot += arow[l] * brow[l];
                l += 1;
            }
            crow[j] += dot;
        }
    }
    (m * k * n) as u64
}

/// c[m,n] += a[k,m]^T * b[k,n]. Returns MACs executed (m*k*n).
pub fn mm_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> u64 {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let mut l = 0;
        while l + 4 <= k {
            let a0 = a[l * m + i];
            let a1 = a[(l + 1) * m + i];
            let a2 = a[(l + 2) * m + i];
            let a3 = a[(l + 3) * m + i];
            let b0 = &b[l * n..(l + 1) * n];
            let b1 = &b[(l + 1) * n..(l + 2) * n];
            let b2 = &b[(l + 2) * n..(l + 3) * n];
            let b3 = &b[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                crow[j] += (a0 * b0[j] + a1 * b1[j]) + (a2 * b2[j] + a3 * b3[j]);
            }
            l += 4;
        }
        while l < k {
            let al = a[l * m + i];
            if al != 0.0 {
                let brow = &b[l * n..(l + 1) * n];
                for j in 0..n {
                    crow[j] += al * brow[j];
                }
            }
            l += 1;
        }
    }
    (m * k * n) as u64
}

/// Output spatial extent of a convolution along one axis.
#[inline]
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Unfolds x[cin,h,w] into col[cin*k*k, hout*wout] for a k x k convolution.
pub fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    col: &mut Vec<f64>,
) -> (usize, usize) {
    let hout = conv_out_len(h, kernel, stride, pad);
    let wout = conv_out_len(w, kernel, stride, pad);
    let rows = cin * kernel * kernel;
    let cols = hout * wout;
    col.clear();
    col.resize(rows * cols, 0.0);
    for c in 0..cin {
        let xc = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &xc[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wout..(oy + 1) * wout];
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((w as isize - shift).min(wout as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            drow[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for ox in 0..wout {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (hout, wout)
}

/// Scatter-adds dcol[cin*k*k, hout*wout] back into dx[cin,h,w].
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc(
    dcol: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dx: &mut [f64],
) {
    let hout = conv_out_len(h, kernel, stride, pad);
    let wout = conv_out_len(w, kernel, stride, pad);
    let cols = hout * wout;
    for c in 0..cin {
        let xc = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                let src = &dcol[row * cols..(row + 1) * cols];
                for oy in 0..hout {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut xc[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wout..(oy + 1) * wout];
                    for ox in 0..wout {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += srow[ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn naive_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    s += a[i * k + l] * b[l * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn rand_vec(len: usize, tag: &str) -> Vec<f64> {
        let mut s = Stream::derive(77, &["tensor-test", tag]);
        (0..len).map(|_| s.normal()).collect()
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (8, 8, 8), (13, 9, 21), (4, 31, 2)] {
            let a = rand_vec(m * k, "a");
            let b = rand_vec(k * n, "b");
            let want = naive_mm(&a, &b, m, k, n);

            let mut c = vec![0.0; m * n];
            let macs = mm_nn_acc(&mut c, &a, &b, m, k, n);
            assert_eq!(macs, (m * k * n) as u64);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // b stored transposed: bt[n,k]
            let mut bt = vec![0.0; k * n];
            for l in 0..k {
                for j in 0..n {
                    bt[j * k + l] = b[l * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            mm_nt_acc(&mut c, &a, &bt, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }

            // a stored transposed: at[k,m]
            let mut at = vec![0.0; m * k];
            for i in 0..m {
                for l in 0..k {
                    at[l * m + i] = a[i * k + l];
                }
            }
            let mut c = vec![0.0; m * n];
            mm_tn_acc(&mut c, &at, &b, m, k, n);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn naive_conv(
        x: &[f64],
        w: &[f64],
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let hout = conv_out_len(h, kernel, stride, pad);
        let wout = conv_out_len(wd, kernel, stride, pad);
        let mut y = vec![0.0; cout * hout * wout];
        for co in 0..cout {
            for oy in 0..hout {
                for ox in 0..wout {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xv = x[(ci * h + iy as usize) * wd + ix as usize];
                                    let wv = w[((co * cin + ci) * kernel + ky) * kernel + kx];
                                    s += xv * wv;
                                }
                            }
                        }
                    }
                    y[(co * hout + oy) * wout + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn im2col_matmul_matches_direct_convolution() {
        for &(cin, h, w, cout, kernel, stride, pad) in &[
            (1, 5, 5, 1, 3, 1, 1),
            (3, 8, 6, 4, 3, 1, 1),
            (2, 8, 8, 3, 3, 2, 1),
            (4, 7, 7, 2, 1, 1, 0),
            (2, 9, 9, 2, 4, 2, 1),
        ] {
            let x = rand_vec(cin * h * w, "x");
            let wt = rand_vec(cout * cin * kernel * kernel, "w");
            let want = naive_conv(&x, &wt, cin, h, w, cout, kernel, stride, pad);

            let mut col = Vec::new();
            let (hout, wout) = im2col(&x, cin, h, w, kernel, stride, pad, &mut col);
            let mut y = vec![0.0; cout * hout * wout];
            mm_nn_acc(
                &mut y,
                &wt,
                &col,
                cout,
                cin * kernel * kernel,
                hout * wout,
            );
            assert_eq!(y.len(), want.len());
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)> for random x, g.
        let (cin, h, w, kernel, stride, pad) = (3, 7, 6, 3, 2, 1);
        let x = rand_vec(cin * h * w, "adj-x");
        let mut col = Vec::new();
        let (hout, wout) = im2col(&x, cin, h, w, kernel, stride, pad, &mut col);
        let g = rand_vec(cin * kernel * kernel * hout * wout, "adj-g");
        let lhs: f64 = col.iter().zip(&g).map(|(a, b)| a * b).sum();
        let mut dx = vec![0.0; cin * h * w];
        col2im_acc(&g, cin, h, w, kernel, stride, pad, &mut dx);
        let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(&[4, 2, 2]);
        assert_eq!(t.numel(), 16);
        assert_eq!(t.dims3().unwrap(), (4, 2, 2));
        assert!(t.dims2().is_err());
    }
}
