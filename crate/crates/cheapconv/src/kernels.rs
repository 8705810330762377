//! Raw numeric routines behind the tape ops: GEMM variants, im2col-based
//! convolution forward/backward, depthwise/shift kernels, batch norm and
//! pooling. Everything is single-threaded and allocation-explicit; the tape
//! layer owns what gets recorded, this layer just computes.

use crate::tensor::{Scalar, Tensor};

/// `out += a · b` with `a: [m,k]`, `b: [k,n]`, `out: [m,n]`.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + ail * bv;
            }
        }
    }
}

/// `out += a · bᵀ` with `a: [m,k]`, `b: [n,k]`, `out: [m,n]`.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// `out += aᵀ · b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            let crow = &mut out[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c = *c + ail * bv;
            }
        }
    }
}

/// Spatial geometry shared by the convolution family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad).saturating_sub(self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        h + 2 * self.pad >= self.kernel && w + 2 * self.pad >= self.kernel
    }
}

/// Lower one sample's channel slab `[c, h, w]` into `col: [c*k*k, oh*ow]`.
fn im2col<S: Scalar>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [S],
) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut col[((ci * k + ki) * k + kj) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        for v in &mut row[oy * ow..(oy + 1) * ow] {
                            *v = S::zero();
                        }
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        row[oy * ow + ox] = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add `col: [c*k*k, oh*ow]` back into one sample's slab `[c, h, w]`.
fn col2im_add<S: Scalar>(
    col: &[S],
    c: usize,
    h: usize,
    w: usize,
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [S],
) {
    let k = g.kernel;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &col[((ci * k + ki) * k + kj) * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Grouped 2-D cross-correlation. `x: [N,Cin,H,W]`, `w: [Cout, Cin/g, k, k]`,
/// output `[N,Cout,OH,OW]`. `groups == 1` is the standard convolution;
/// `k == 1` takes a GEMM-only fast path.
pub fn conv2d_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, groups: usize, g: &ConvGeom) -> Tensor<S> {
    let (n, cin, h, wd) = x.dim4();
    let (cout, cin_g, k, _) = w.dim4();
    debug_assert_eq!(cin_g * groups, cin);
    debug_assert_eq!(k, g.kernel);
    debug_assert_eq!(cout % groups, 0);
    let (oh, ow) = g.out_hw(h, wd);
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, oh, ow]);

    if k == 1 && g.stride == 1 && g.pad == 0 {
        for ni in 0..n {
            for gi in 0..groups {
                let xs = &x.data()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
                let ws = &w.data()[gi * cout_g * cin_g..][..cout_g * cin_g];
                let os = &mut out.data_mut()[(ni * cout + gi * cout_g) * oh * ow..][..cout_g * oh * ow];
                gemm_nn(ws, xs, cout_g, cin_g, h * wd, os);
            }
        }
        return out;
    }

    let mut col = vec![S::zero(); cin_g * k * k * oh * ow];
    for ni in 0..n {
        for gi in 0..groups {
            let xs = &x.data()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
            im2col(xs, cin_g, h, wd, g, oh, ow, &mut col);
            let ws = &w.data()[gi * cout_g * cin_g * k * k..][..cout_g * cin_g * k * k];
            let os = &mut out.data_mut()[(ni * cout + gi * cout_g) * oh * ow..][..cout_g * oh * ow];
            gemm_nn(ws, &col, cout_g, cin_g * k * k, oh * ow, os);
        }
    }
    out
}

/// Gradients for [`conv2d_forward`]: returns `(dx, dw)`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &Tensor<S>,
    groups: usize,
    g: &ConvGeom,
) -> (Tensor<S>, Tensor<S>) {
    let (n, cin, h, wd) = x.dim4();
    let (cout, cin_g, k, _) = w.dim4();
    let (_, _, oh, ow) = dout.dim4();
    let cout_g = cout / groups;
    let mut dx = Tensor::zeros(&[n, cin, h, wd]);
    let mut dw = Tensor::zeros(w.shape());

    if k == 1 && g.stride == 1 && g.pad == 0 {
        for ni in 0..n {
            for gi in 0..groups {
                let xs = &x.data()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
                let ws = &w.data()[gi * cout_g * cin_g..][..cout_g * cin_g];
                let dos = &dout.data()[(ni * cout + gi * cout_g) * oh * ow..][..cout_g * oh * ow];
                let dws = &mut dw.data_mut()[gi * cout_g * cin_g..][..cout_g * cin_g];
                gemm_nt(dos, xs, cout_g, oh * ow, cin_g, dws);
                let dxs = &mut dx.data_mut()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
                gemm_tn(ws, dos, cout_g, cin_g, oh * ow, dxs);
            }
        }
        return (dx, dw);
    }

    let mut col = vec![S::zero(); cin_g * k * k * oh * ow];
    let mut dcol = vec![S::zero(); cin_g * k * k * oh * ow];
    for ni in 0..n {
        for gi in 0..groups {
            let xs = &x.data()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
            im2col(xs, cin_g, h, wd, g, oh, ow, &mut col);
            let dos = &dout.data()[(ni * cout + gi * cout_g) * oh * ow..][..cout_g * oh * ow];
            let dws = &mut dw.data_mut()[gi * cout_g * cin_g * k * k..][..cout_g * cin_g * k * k];
            gemm_nt(dos, &col, cout_g, oh * ow, cin_g * k * k, dws);

            let ws = &w.data()[gi * cout_g * cin_g * k * k..][..cout_g * cin_g * k * k];
            for v in dcol.iter_mut() {
                *v = S::zero();
            }
            gemm_tn(ws, dos, cout_g, cin_g * k * k, oh * ow, &mut dcol);
            let dxs = &mut dx.data_mut()[(ni * cin + gi * cin_g) * h * wd..][..cin_g * h * wd];
            col2im_add(&dcol, cin_g, h, wd, g, oh, ow, dxs);
        }
    }
    (dx, dw)
}

/// Depthwise 2-D cross-correlation: `x: [N,C,H,W]`, `w: [C,k,k]`.
pub fn depthwise_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: &ConvGeom) -> Tensor<S> {
    let (n, c, h, wd) = x.dim4();
    let k = g.kernel;
    debug_assert_eq!(w.shape(), &[c, k, k]);
    let (oh, ow) = g.out_hw(h, wd);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * wd..][..h * wd];
            let ker = &w.data()[ci * k * k..(ci + 1) * k * k];
            let dst = &mut out.data_mut()[(ni * c + ci) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ki in 0..k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                acc = acc + ker[ki * k + kj] * plane[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients for [`depthwise_forward`]: returns `(dx, dw)`.
pub fn depthwise_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    dout: &Tensor<S>,
    g: &ConvGeom,
) -> (Tensor<S>, Tensor<S>) {
    let (n, c, h, wd) = x.dim4();
    let k = g.kernel;
    let (_, _, oh, ow) = dout.dim4();
    let mut dx = Tensor::zeros(&[n, c, h, wd]);
    let mut dw = Tensor::zeros(&[c, k, k]);
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * wd..][..h * wd];
            let ker = &w.data()[ci * k * k..(ci + 1) * k * k];
            let dos = &dout.data()[(ni * c + ci) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = dos[oy * ow + ox];
                    if go == S::zero() {
                        continue;
                    }
                    for ki in 0..k {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < wd as isize {
                                let xi = iy as usize * wd + ix as usize;
                                dw.data_mut()[ci * k * k + ki * k + kj] =
                                    dw.data()[ci * k * k + ki * k + kj] + go * plane[xi];
                                dx.data_mut()[(ni * c + ci) * h * wd + xi] =
                                    dx.data()[(ni * c + ci) * h * wd + xi] + go * ker[ki * k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Per-channel spatial shift: `out[n,c,oy,ox] = x[n,c, oy*s + i_c - 1 - pad, ox*s + j_c - 1 - pad]`
/// with zero fill outside the input. `offsets` are 1-based `(i_c, j_c)` cells of the
/// logical `k×k` one-hot kernel.
pub fn shift_forward<S: Scalar>(x: &Tensor<S>, offsets: &[(usize, usize)], g: &ConvGeom) -> Tensor<S> {
    let (n, c, h, wd) = x.dim4();
    debug_assert_eq!(offsets.len(), c);
    let (oh, ow) = g.out_hw(h, wd);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let (ic, jc) = offsets[ci];
            let plane = &x.data()[(ni * c + ci) * h * wd..][..h * wd];
            let dst = &mut out.data_mut()[(ni * c + ci) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                let iy = (oy * g.stride + ic - 1) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let src = &plane[iy as usize * wd..(iy as usize + 1) * wd];
                for ox in 0..ow {
                    let ix = (ox * g.stride + jc - 1) as isize - g.pad as isize;
                    if ix >= 0 && ix < wd as isize {
                        dst[oy * ow + ox] = src[ix as usize];
                    }
                }
            }
        }
    }
    out
}

/// Inverse scatter for [`shift_forward`]: routes `dout` back to the source cells.
pub fn shift_backward<S: Scalar>(
    xshape: &[usize],
    dout: &Tensor<S>,
    offsets: &[(usize, usize)],
    g: &ConvGeom,
) -> Tensor<S> {
    let (n, c, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (_, _, oh, ow) = dout.dim4();
    let mut dx = Tensor::zeros(xshape);
    for ni in 0..n {
        for ci in 0..c {
            let (ic, jc) = offsets[ci];
            let dos = &dout.data()[(ni * c + ci) * oh * ow..][..oh * ow];
            let dst = &mut dx.data_mut()[(ni * c + ci) * h * wd..][..h * wd];
            for oy in 0..oh {
                let iy = (oy * g.stride + ic - 1) as isize - g.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for ox in 0..ow {
                    let ix = (ox * g.stride + jc - 1) as isize - g.pad as isize;
                    if ix >= 0 && ix < wd as isize {
                        let di = iy as usize * wd + ix as usize;
                        dst[di] = dst[di] + dos[oy * ow + ox];
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel batch statistics over `(N, H, W)`: returns `(mean, biased var)`.
pub fn batch_stats<S: Scalar>(x: &Tensor<S>) -> (Vec<S>, Vec<S>) {
    let (n, c, h, w) = x.dim4();
    let m = S::of((n * h * w) as f64);
    let mut mean = vec![S::zero(); c];
    let mut var = vec![S::zero(); c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..][..h * w];
            for &v in plane {
                mean[ci] = mean[ci] + v;
            }
        }
    }
    for v in mean.iter_mut() {
        *v = *v / m;
    }
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..][..h * w];
            let mu = mean[ci];
            for &v in plane {
                let d = v - mu;
                var[ci] = var[ci] + d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v = *v / m;
    }
    (mean, var)
}

/// Normalize with the given per-channel statistics and affine parameters.
pub fn bn_apply<S: Scalar>(
    x: &Tensor<S>,
    mean: &[S],
    var: &[S],
    gamma: &[S],
    beta: &[S],
    eps: f64,
) -> Tensor<S> {
    let (n, c, h, w) = x.dim4();
    let eps = S::of(eps);
    let mut out = Tensor::zeros(x.shape());
    for ni in 0..n {
        for ci in 0..c {
            let inv = S::one() / (var[ci] + eps).sqrt();
            let (mu, ga, be) = (mean[ci], gamma[ci], beta[ci]);
            let src = &x.data()[(ni * c + ci) * h * w..][..h * w];
            let dst = &mut out.data_mut()[(ni * c + ci) * h * w..][..h * w];
            for (o, &v) in dst.iter_mut().zip(src.iter()) {
                *o = ga * (v - mu) * inv + be;
            }
        }
    }
    out
}

/// Global average pooling `[N,C,H,W] -> [N,C]`.
pub fn gap_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim4();
    let inv = S::of(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[n, c]);
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x.data()[(ni * c + ci) * h * w..][..h * w];
            let mut acc = S::zero();
            for &v in plane {
                acc = acc + v;
            }
            out.data_mut()[ni * c + ci] = acc * inv;
        }
    }
    out
}

/// 2×2 average pooling with stride 2 (DenseNet transitions). Requires even H, W.
pub fn avgpool2_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim4();
    debug_assert!(h % 2 == 0 && w % 2 == 0, "avgpool2 needs even spatial dims");
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for ni in 0..n {
        for ci in 0..c {
            let src = &x.data()[(ni * c + ci) * h * w..][..h * w];
            let dst = &mut out.data_mut()[(ni * c + ci) * oh * ow..][..oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    dst[oy * ow + ox] =
                        (src[base] + src[base + 1] + src[base + w] + src[base + w + 1]) * quarter;
                }
            }
        }
    }
    out
}

pub fn avgpool2_backward<S: Scalar>(xshape: &[usize], dout: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = (xshape[0], xshape[1], xshape[2], xshape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::of(0.25);
    let mut dx = Tensor::zeros(xshape);
    for ni in 0..n {
        for ci in 0..c {
            let dos = &dout.data()[(ni * c + ci) * oh * ow..][..oh * ow];
            let dst = &mut dx.data_mut()[(ni * c + ci) * h * w..][..h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = dos[oy * ow + ox] * quarter;
                    let base = 2 * oy * w + 2 * ox;
                    dst[base] = dst[base] + g;
                    dst[base + 1] = dst[base + 1] + g;
                    dst[base + w] = dst[base + w] + g;
                    dst[base + w + 1] = dst[base + w + 1] + g;
                }
            }
        }
    }
    dx
}

/// Row-wise temperature softmax for logits `[N, C]`, computed with
/// max subtraction.
pub fn softmax_rows<S: Scalar>(a: &Tensor<S>, tau: f64) -> Tensor<S> {
    let (n, c) = a.dim2();
    let tau = S::of(tau);
    let mut out = Tensor::zeros(&[n, c]);
    for i in 0..n {
        let row = &a.data()[i * c..(i + 1) * c];
        let mut mx = row[0] / tau;
        for &v in row {
            let s = v / tau;
            if s > mx {
                mx = s;
            }
        }
        let dst = &mut out.data_mut()[i * c..(i + 1) * c];
        let mut sum = S::zero();
        for (o, &v) in dst.iter_mut().zip(row.iter()) {
            let e = (v / tau - mx).exp();
            *o = e;
            sum = sum + e;
        }
        for o in dst.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn gemm_nn_small() {
        // [[1,2],[3,4]] x [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transposes_agree_with_nn() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // [2,3]
        let b = [2.0, 0.0, 1.0, -1.0, 0.5, 2.0]; // [3,2]
        let mut c_nn = [0.0; 4];
        gemm_nn(&a, &b, 2, 3, 2, &mut c_nn);

        // bt: [2,3] such that btᵀ == b
        let bt = [2.0, 1.0, 0.5, 0.0, -1.0, 2.0];
        let mut c_nt = [0.0; 4];
        gemm_nt(&a, &bt, 2, 3, 2, &mut c_nt);
        assert_eq!(c_nn, c_nt);

        // at: [3,2] such that atᵀ == a
        let at = [1.0, 3.0, -2.0, 4.0, 0.5, -1.0];
        let mut c_tn = [0.0; 4];
        gemm_tn(&at, &b, 3, 2, 2, &mut c_tn);
        assert_eq!(c_nn, c_tn);
    }

    #[test]
    fn conv_scaling_identity() {
        // 1x1 input, K=1, kernel [[2]] -> output doubles the input
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let w = t(&[1, 1, 1, 1], &[2.0]);
        let g = ConvGeom { kernel: 1, stride: 1, pad: 0 };
        let y = conv2d_forward(&x, &w, 1, &g);
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn conv_all_ones_3x3_valid() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let g = ConvGeom { kernel: 3, stride: 1, pad: 0 };
        let y = conv2d_forward(&x, &w, 1, &g);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn shift_center_offset_is_identity() {
        let x = t(&[1, 2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.]);
        let g = ConvGeom { kernel: 3, stride: 1, pad: 1 };
        let y = shift_forward(&x, &[(2, 2), (2, 2)], &g);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn shift_one_column_vacates_zeros() {
        // offsets (2,3) with K=3/pad 1: reads one column to the right
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let g = ConvGeom { kernel: 3, stride: 1, pad: 1 };
        let y = shift_forward(&x, &[(2, 3)], &g);
        assert_eq!(y.data(), &[2.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn gap_of_constant_map() {
        let x = Tensor::<f64>::full(&[2, 3, 4, 4], 2.5);
        let y = gap_forward(&x);
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn softmax_symmetry_and_sum() {
        let a = t(&[1, 2], &[0.0, 0.0]);
        let p = softmax_rows(&a, 1.0);
        assert!((p.data()[0] - 0.5).abs() < 1e-12);

        let a = t(&[1, 2], &[(2.0f64).ln(), 0.0]);
        let p = softmax_rows(&a, 1.0);
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let a = t(&[1, 2], &[5.0, -5.0]);
        let p = softmax_rows(&a, 1000.0);
        assert!((p.data()[0] - 0.5).abs() < 1e-2);
    }
}
