//! Elementwise arithmetic, same-rank broadcasting, reductions and selection.

use super::special;
use super::Tensor;
use crate::error::{Error, Result};

/// Index maps for a same-rank broadcast where each dim matches or is 1.
struct Broadcast {
    shape: Vec<usize>,
    lhs: Option<Vec<usize>>,
    rhs: Option<Vec<usize>>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Broadcast {
    fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast { shape: a.to_vec(), lhs: None, rhs: None });
        }
        if a.len() != b.len() {
            return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
        }
        let mut shape = Vec::with_capacity(a.len());
        for (&da, &db) in a.iter().zip(b) {
            shape.push(match (da, db) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::shape(op, format!("{a:?} vs {b:?}"))),
            });
        }
        let map = |src: &[usize]| -> Option<Vec<usize>> {
            if src == shape.as_slice() {
                return None;
            }
            let src_strides = strides(src);
            let n: usize = shape.iter().product();
            let mut out = Vec::with_capacity(n);
            let mut idx = vec![0usize; shape.len()];
            for _ in 0..n {
                let mut off = 0;
                for d in 0..shape.len() {
                    if src[d] != 1 {
                        off += idx[d] * src_strides[d];
                    }
                }
                out.push(off);
                for d in (0..shape.len()).rev() {
                    idx[d] += 1;
                    if idx[d] < shape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            Some(out)
        };
        let lhs = map(a);
        let rhs = map(b);
        Ok(Broadcast { shape, lhs, rhs })
    }

    fn reduce(map: &Option<Vec<usize>>, grad: Vec<f64>, len: usize) -> Vec<f64> {
        match map {
            None => grad,
            Some(idx) => {
                let mut out = vec![0.0; len];
                for (g, &i) in grad.iter().zip(idx) {
                    out[i] += g;
                }
                out
            }
        }
    }
}

#[inline]
fn at(map: &Option<Vec<usize>>, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i],
    }
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

fn binary(op: BinOp, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let name = match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::Div => "div",
    };
    let bc = Broadcast::new(name, a.shape(), b.shape())?;
    let n: usize = bc.shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = ad[at(&bc.lhs, i)];
        let y = bd[at(&bc.rhs, i)];
        out.push(match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        });
    }
    let shape = bc.shape.clone();
    let (ac, bcl) = (a.clone(), b.clone());
    let (need_a, need_b) = (a.requires_grad(), b.requires_grad());
    Ok(Tensor::from_op(name, shape, out, &[a, b], move |g| {
        let (ad, bd) = (ac.data(), bcl.data());
        let ga = need_a.then(|| {
            let local: Vec<f64> = match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[at(&bc.rhs, i)]).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, gi)| gi / bd[at(&bc.rhs, i)]).collect(),
            };
            Broadcast::reduce(&bc.lhs, local, ad.len())
        });
        let gb = need_b.then(|| {
            let local: Vec<f64> = match op {
                BinOp::Add => g.to_vec(),
                BinOp::Sub => g.iter().map(|gi| -gi).collect(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * ad[at(&bc.lhs, i)]).collect(),
                BinOp::Div => g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let y = bd[at(&bc.rhs, i)];
                        -gi * ad[at(&bc.lhs, i)] / (y * y)
                    })
                    .collect(),
            };
            Broadcast::reduce(&bc.rhs, local, bd.len())
        });
        vec![ga, gb]
    }))
}

/// Elementwise map whose backward multiplies by a precomputed local derivative.
fn unary(name: &'static str, x: &Tensor, f: impl Fn(f64) -> (f64, f64)) -> Tensor {
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut deriv = Vec::with_capacity(n);
    for &v in x.data() {
        let (y, d) = f(v);
        out.push(y);
        deriv.push(d);
    }
    Tensor::from_op(name, x.shape().to_vec(), out, &[x], move |g| {
        vec![Some(g.iter().zip(&deriv).map(|(a, b)| a * b).collect())]
    })
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Mul, self, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(BinOp::Div, self, other)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary("add_scalar", self, |v| (v + c, 1.0))
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        unary("mul_scalar", self, |v| (v * c, c))
    }

    pub fn neg(&self) -> Tensor {
        unary("neg", self, |v| (-v, -1.0))
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        unary("rsub_scalar", self, |v| (c - v, -1.0))
    }

    /// `c / x`
    pub fn scalar_div(&self, c: f64) -> Tensor {
        unary("scalar_div", self, |v| (c / v, -c / (v * v)))
    }

    pub fn relu(&self) -> Tensor {
        unary("relu", self, |v| if v > 0.0 { (v, 1.0) } else { (0.0, 0.0) })
    }

    pub fn exp(&self) -> Tensor {
        unary("exp", self, |v| {
            let e = v.exp();
            (e, e)
        })
    }

    pub fn log(&self) -> Tensor {
        unary("log", self, |v| (v.ln(), 1.0 / v))
    }

    pub fn softplus(&self) -> Tensor {
        unary("softplus", self, |v| (softplus_scalar(v), sigmoid(v)))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        unary("clamp", self, |v| {
            if v < lo {
                (lo, 0.0)
            } else if v > hi {
                (hi, 0.0)
            } else {
                (v, 1.0)
            }
        })
    }

    pub fn digamma(&self) -> Result<Tensor> {
        self.check_positive("digamma")?;
        Ok(unary("digamma", self, |v| (special::digamma(v), special::trigamma(v))))
    }

    pub fn lgamma(&self) -> Result<Tensor> {
        self.check_positive("lgamma")?;
        Ok(unary("lgamma", self, |v| (special::lgamma(v), special::digamma(v))))
    }

    fn check_positive(&self, op: &'static str) -> Result<()> {
        match self.data().iter().position(|&v| !(v > 0.0)) {
            Some(i) => Err(Error::domain(op, format!("element {i} = {} is not positive", self.data()[i]))),
            None => Ok(()),
        }
    }

    pub fn sum(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![1], vec![s], &[self], move |g| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum::<f64>() / n as f64;
        Tensor::from_op("mean", vec![1], vec![s], &[self], move |g| vec![Some(vec![g[0] / n as f64; n])])
    }

    /// Sum over one axis, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let (outer, dim, inner) = self.split_axis("sum_axis", axis)?;
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let src = &x[(o * dim + k) * inner..(o * dim + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = 1;
        Ok(Tensor::from_op("sum_axis", shape, out, &[self], move |g| {
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for k in 0..dim {
                    gx[(o * dim + k) * inner..(o * dim + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let (outer, dim, inner) = self.split_axis("log_softmax", axis)?;
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * dim + k) * inner + i;
                let m = (0..dim).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..dim).map(|k| (x[idx(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..dim {
                    out[idx(k)] = x[idx(k)] - lse;
                }
            }
        }
        let probs: Vec<f64> = out.iter().map(|v| v.exp()).collect();
        Ok(Tensor::from_op("log_softmax", self.shape().to_vec(), out, &[self], move |g| {
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * dim + k) * inner + i;
                    let gs: f64 = (0..dim).map(|k| g[idx(k)]).sum();
                    for k in 0..dim {
                        gx[idx(k)] = g[idx(k)] - probs[idx(k)] * gs;
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    pub(crate) fn split_axis(&self, op: &'static str, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        Ok((outer, shape[axis], inner))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Tensor::from_op("reshape", shape.to_vec(), self.data().to_vec(), &[self], |g| vec![Some(g.to_vec())]))
    }

    /// 1.0 where `self > other`, else 0.0. Not differentiable.
    pub fn gt(&self, other: &Tensor) -> Result<Tensor> {
        self.compare("gt", other, |a, b| a > b)
    }

    /// 1.0 where `self == other`, else 0.0. Not differentiable.
    pub fn eq_mask(&self, other: &Tensor) -> Result<Tensor> {
        self.compare("eq", other, |a, b| a == b)
    }

    fn compare(&self, op: &'static str, other: &Tensor, f: impl Fn(f64, f64) -> bool) -> Result<Tensor> {
        let bc = Broadcast::new(op, self.shape(), other.shape())?;
        let n: usize = bc.shape.iter().product();
        let data = (0..n)
            .map(|i| if f(self.data()[at(&bc.lhs, i)], other.data()[at(&bc.rhs, i)]) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&bc.shape, data)
    }

    /// Picks `on_true` where `cond != 0`, otherwise `on_false`. All three share a shape.
    pub fn select(cond: &Tensor, on_true: &Tensor, on_false: &Tensor) -> Result<Tensor> {
        if cond.shape() != on_true.shape() || cond.shape() != on_false.shape() {
            return Err(Error::shape(
                "select",
                format!("{:?}, {:?}, {:?}", cond.shape(), on_true.shape(), on_false.shape()),
            ));
        }
        let mask: Vec<bool> = cond.data().iter().map(|&c| c != 0.0).collect();
        let data = mask
            .iter()
            .zip(on_true.data().iter().zip(on_false.data()))
            .map(|(&m, (&t, &f))| if m { t } else { f })
            .collect();
        let (nt, nf) = (on_true.requires_grad(), on_false.requires_grad());
        Ok(Tensor::from_op("select", cond.shape().to_vec(), data, &[on_true, on_false], move |g| {
            let gt = nt.then(|| g.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect());
            let gf = nf.then(|| g.iter().zip(&mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect());
            vec![gt, gf]
        }))
    }

    /// Concatenation along `axis`; other dims must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
            if !ok {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", first.shape(), p.shape())));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&p.data()[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op("concat", shape, data, parts, move |g| {
            let mut out: Vec<Option<Vec<f64>>> =
                dims.iter().zip(&needs).map(|(&d, &n)| n.then(|| Vec::with_capacity(outer * d * inner))).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (slot, &d) in out.iter_mut().zip(&dims) {
                    if let Some(v) = slot {
                        v.extend_from_slice(&g[off..off + d * inner]);
                    }
                    off += d * inner;
                }
            }
            out
        }))
    }
}
