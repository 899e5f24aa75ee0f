//! Dense kernels: matmul, stride-1 conv2d, max pooling, nearest upsampling.
//! Layout is NCHW throughout.

use super::Tensor;
use crate::error::{Error, Result};

/// `c = op(a) * op(b) + beta * c` on row-major buffers.
/// `ta`/`tb` read `a`/`b` as transposed without copying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m×k, k×n and m×n row-major
    // buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", format!("{a:?} x {b:?}")));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, rhs.data(), false, &mut out, 0.0);
        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let (need_l, need_r) = (self.requires_grad(), rhs.requires_grad());
        Ok(Tensor::from_op("matmul", vec![m, n], out, &[self, rhs], move |g| {
            let gl = need_l.then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, g, false, rhs_t.data(), true, &mut d, 0.0);
                d
            });
            let gr = need_r.then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, lhs_t.data(), true, g, false, &mut d, 0.0);
                d
            });
            vec![gl, gr]
        }))
    }

    /// Stride-1 2D convolution (cross-correlation) with symmetric zero padding.
    ///
    /// `self`: `[n, c_in, h, w]`, `weight`: `[c_out, c_in, kh, kw]`, `bias`: `[c_out]`.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
        let (xs, ws) = (self.shape(), weight.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let geo = ConvGeometry { cin, h, w, kh, kw, pad: padding, oh: h + 2 * padding - kh + 1, ow: w + 2 * padding - kw + 1 };
        let kdim = cin * kh * kw;
        let plane = geo.oh * geo.ow;
        let track = super::grad_enabled() && (self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad()));

        let mut out = vec![0.0; batch * cout * plane];
        let mut cols = Vec::with_capacity(if track { batch } else { 0 });
        let mut col = vec![0.0; kdim * plane];
        for b in 0..batch {
            let img = &self.data()[b * cin * h * w..(b + 1) * cin * h * w];
            geo.im2col(img, &mut col);
            let dst = &mut out[b * cout * plane..(b + 1) * cout * plane];
            if let Some(bias) = bias {
                for (o, &bv) in bias.data().iter().enumerate() {
                    dst[o * plane..(o + 1) * plane].fill(bv);
                }
            }
            gemm(cout, kdim, plane, weight.data(), false, &col, false, dst, if bias.is_some() { 1.0 } else { 0.0 });
            if track {
                cols.push(col.clone());
            }
        }

        let shape = vec![batch, cout, geo.oh, geo.ow];
        let (need_x, need_w) = (self.requires_grad(), weight.requires_grad());
        let need_b = bias.is_some_and(|b| b.requires_grad());
        let weight_t = weight.clone();
        let has_bias = bias.is_some();
        let backward = move |g: &[f64]| {
            let mut gx = need_x.then(|| vec![0.0; batch * cin * h * w]);
            let mut gw = need_w.then(|| vec![0.0; cout * kdim]);
            let mut gb = need_b.then(|| vec![0.0; cout]);
            let mut dcol = vec![0.0; kdim * plane];
            for b in 0..batch {
                let gout = &g[b * cout * plane..(b + 1) * cout * plane];
                if let Some(gw) = gw.as_mut() {
                    gemm(cout, plane, kdim, gout, false, &cols[b], true, gw, 1.0);
                }
                if let Some(gb) = gb.as_mut() {
                    for (o, acc) in gb.iter_mut().enumerate() {
                        *acc += gout[o * plane..(o + 1) * plane].iter().sum::<f64>();
                    }
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(kdim, cout, plane, weight_t.data(), true, gout, false, &mut dcol, 0.0);
                    geo.col2im(&dcol, &mut gx[b * cin * h * w..(b + 1) * cin * h * w]);
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(gb);
            }
            grads
        };
        let parents: Vec<&Tensor> = match bias {
            Some(b) => vec![self, weight, b],
            None => vec![self, weight],
        };
        Ok(Tensor::from_op("conv2d", shape, out, &parents, backward))
    }

    /// Non-overlapping max pooling with a square window; spatial dims must divide evenly.
    pub fn max_pool2d(&self, size: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || size == 0 || s[2] % size != 0 || s[3] % size != 0 {
            return Err(Error::shape("max_pool2d", format!("{s:?} with window {size}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / size, w / size);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let len = x.len();
        Ok(Tensor::from_op("max_pool2d", vec![n, c, oh, ow], out, &[self], move |g| {
            let mut gx = vec![0.0; len];
            for (gv, &i) in g.iter().zip(&argmax) {
                gx[i] += gv;
            }
            vec![Some(gx)]
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 || factor == 0 {
            return Err(Error::shape("upsample_nearest", format!("{s:?} by {factor}")));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for i in 0..oh {
                let row = &x[plane * h * w + (i / factor) * w..plane * h * w + (i / factor + 1) * w];
                for j in 0..ow {
                    out.push(row[j / factor]);
                }
            }
        }
        Ok(Tensor::from_op("upsample_nearest", vec![n, c, oh, ow], out, &[self], move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        gx[plane * h * w + (i / factor) * w + j / factor] += g[plane * oh * ow + i * ow + j];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    /// Rows indexed by (channel, ky, kx), columns by output pixel.
    fn im2col(&self, img: &[f64], col: &mut [f64]) {
        let plane = self.oh * self.ow;
        let mut row = 0;
        for c in 0..self.cin {
            let src = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], img: &mut [f64]) {
        let plane = self.oh * self.ow;
        let mut row = 0;
        for c in 0..self.cin {
            let dst = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..self.oh {
                        let iy = (oy + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.ow {
                            let ix = (ox + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst_row[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
