//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes its output eagerly, and registers a
//! closure that routes the output gradient back to its inputs.

use crate::error::{Error, Result};
use crate::numeric::tensor::Tensor;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

// ── Elementwise ─────────────────────────────────────────────────────────

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            "add",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                for p in parents {
                    if p.requires_grad() {
                        p.accumulate_grad(g);
                    }
                }
            }),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            "sub",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
                if parents[1].requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    parents[1].accumulate_grad(&neg);
                }
            }),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let out: Vec<f64> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            "mul",
            out,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f64> =
                        g.iter().zip(parents[1].data().iter()).map(|(gi, b)| gi * b).collect();
                    parents[0].accumulate_grad(&d);
                }
                if parents[1].requires_grad() {
                    let d: Vec<f64> =
                        g.iter().zip(parents[0].data().iter()).map(|(gi, a)| gi * a).collect();
                    parents[1].accumulate_grad(&d);
                }
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            "scale",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f64> = g.iter().map(|v| v * c).collect();
                    parents[0].accumulate_grad(&d);
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            "add_scalar",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    /// x * sigmoid(x).
    pub fn silu(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| x * sigmoid(x)).collect();
        Tensor::from_op(
            "silu",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(parents[0].data().iter())
                        .map(|(gi, &x)| {
                            let s = sigmoid(x);
                            gi * (s + x * s * (1.0 - s))
                        })
                        .collect();
                    parents[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// ln(1 + e^x), evaluated in the overflow-safe form.
    pub fn softplus(&self) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| softplus(x)).collect();
        Tensor::from_op(
            "softplus",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(parents[0].data().iter())
                        .map(|(gi, &x)| gi * sigmoid(x))
                        .collect();
                    parents[0].accumulate_grad(&d);
                }
            }),
        )
    }

    /// Clamp with pass-through gradient strictly inside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|v| v.clamp(lo, hi)).collect();
        Tensor::from_op(
            "clamp",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(parents[0].data().iter())
                        .map(|(gi, &x)| if x > lo && x < hi { *gi } else { 0.0 })
                        .collect();
                    parents[0].accumulate_grad(&d);
                }
            }),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// ── Reductions ──────────────────────────────────────────────────────────

impl Tensor {
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(&vec![g[0]; n]);
                }
            }),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        self.sum_all().scale(1.0 / n as f64)
    }

    /// Mean squared error against `target` (which is typically a constant).
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean_all())
    }
}

// ── Shape ops (all copying) ─────────────────────────────────────────────

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape: {:?} ({}) -> {:?} ({})",
                self.shape(),
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
            }),
        ))
    }

    /// Reorders axes; output is freshly laid out in row-major order.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axes.len() != rank {
            return Err(Error::shape(format!(
                "permute: axes {:?} vs rank {rank}",
                axes
            )));
        }
        let mut seen = vec![false; rank];
        for &a in axes {
            if a >= rank || seen[a] {
                return Err(Error::shape(format!("permute: invalid axes {axes:?}")));
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let out = permute_data(&self.data(), self.shape(), axes);
        let inverse: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let fwd_shape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let back = permute_data(g, &fwd_shape, &inverse);
                    parents[0].accumulate_grad(&back);
                }
            }),
        ))
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 2 {
            return Err(Error::shape("transpose_last2 needs rank >= 2".to_string()));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    /// Copies a contiguous range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::shape(format!("narrow: axis {axis} vs rank {rank}")));
        }
        let extent = self.shape()[axis];
        if start + len > extent || len == 0 {
            return Err(Error::shape(format!(
                "narrow: range {start}..{} exceeds extent {extent}",
                start + len
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let data = self.data();
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                out.extend_from_slice(&data[base..base + len * inner]);
            }
        }
        let full = self.numel();
        Ok(Tensor::from_op(
            "narrow",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut back = vec![0.0; full];
                    for o in 0..outer {
                        let src = o * len * inner;
                        let dst = (o * extent + start) * inner;
                        back[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    parents[0].accumulate_grad(&back);
                }
            }),
        ))
    }
}

/// Concatenates along `axis`. All other extents must agree.
pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
    if tensors.is_empty() {
        return Err(Error::shape("concat of zero tensors".to_string()));
    }
    let rank = tensors[0].rank();
    if axis >= rank {
        return Err(Error::shape(format!("concat: axis {axis} vs rank {rank}")));
    }
    for t in tensors {
        if t.rank() != rank {
            return Err(Error::shape("concat: rank mismatch".to_string()));
        }
        for d in 0..rank {
            if d != axis && t.shape()[d] != tensors[0].shape()[d] {
                return Err(Error::shape(format!(
                    "concat: shapes {:?} and {:?} differ off-axis",
                    tensors[0].shape(),
                    t.shape()
                )));
            }
        }
    }
    let outer: usize = tensors[0].shape()[..axis].iter().product();
    let inner: usize = tensors[0].shape()[axis + 1..].iter().product();
    let extents: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
    let total: usize = extents.iter().sum();
    let mut out_shape = tensors[0].shape().to_vec();
    out_shape[axis] = total;

    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (t, &e) in tensors.iter().zip(&extents) {
            let data = t.data();
            let base = o * e * inner;
            out.extend_from_slice(&data[base..base + e * inner]);
        }
    }
    let ext = extents.clone();
    Ok(Tensor::from_op(
        "concat",
        out,
        out_shape,
        tensors.to_vec(),
        Box::new(move |g, _out, parents| {
            let total: usize = ext.iter().sum();
            let mut offset = 0usize;
            for (p, &e) in parents.iter().zip(&ext) {
                if p.requires_grad() {
                    let mut back = vec![0.0; outer * e * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * e * inner;
                        back[dst..dst + e * inner].copy_from_slice(&g[src..src + e * inner]);
                    }
                    p.accumulate_grad(&back);
                }
                offset += e;
            }
        }),
    ))
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    // Stride of output axis d in the input layout.
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel = data.len();
    let mut out = vec![0.0; numel];
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for slot in out.iter_mut() {
        *slot = data[src];
        // Odometer increment over output coordinates.
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            src -= strides[d] * out_shape[d];
            coords[d] = 0;
        }
    }
    out
}

// ── Softmax ─────────────────────────────────────────────────────────────

impl Tensor {
    /// Row-stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.rank() == 0 || self.numel() == 0 {
            return Err(Error::shape("softmax on empty tensor".to_string()));
        }
        let cols = *self.shape().last().unwrap();
        if cols == 0 {
            return Err(Error::shape("softmax over zero-length axis".to_string()));
        }
        let rows = self.numel() / cols;
        let mut out = vec![0.0; self.numel()];
        {
            let data = self.data();
            for r in 0..rows {
                let row = &data[r * cols..(r + 1) * cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let dst = &mut out[r * cols..(r + 1) * cols];
                let mut sum = 0.0;
                for (d, &x) in dst.iter_mut().zip(row) {
                    let e = (x - max).exp();
                    *d = e;
                    sum += e;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out, parents| {
                if parents[0].requires_grad() {
                    let mut back = vec![0.0; g.len()];
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gy = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = y.iter().zip(gy).map(|(yi, gi)| yi * gi).sum();
                        for ((b, &yi), &gi) in
                            back[r * cols..(r + 1) * cols].iter_mut().zip(y).zip(gy)
                        {
                            *b = yi * (gi - dot);
                        }
                    }
                    parents[0].accumulate_grad(&back);
                }
            }),
        ))
    }
}

// ── Matmul ──────────────────────────────────────────────────────────────

fn mm(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    // c[p,r] += a[p,q] * b[q,r], ikj order for row locality.
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let crow = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

fn mm_at_b(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    // c[q,r] += a[p,q]^T * b[p,r]
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let brow = &b[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let crow = &mut c[k * r..(k + 1) * r];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aik * bj;
            }
        }
    }
}

fn mm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], p: usize, q: usize, r: usize) {
    // c[p,r] += a[p,q] * b[r,q]^T
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let crow = &mut c[i * r..(i + 1) * r];
        for (j, cj) in crow.iter_mut().enumerate() {
            let brow = &b[j * q..(j + 1) * q];
            let mut s = 0.0;
            for (&ak, &bk) in arow.iter().zip(brow) {
                s += ak * bk;
            }
            *cj += s;
        }
    }
}

impl Tensor {
    /// Batched matrix product `[..., p, q] x [..., q, r] -> [..., p, r]`.
    ///
    /// Batch extents must match exactly, or one operand may be rank-2 and is
    /// then broadcast across the other's batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (ra, rb) = (self.rank(), other.rank());
        if ra < 2 || rb < 2 {
            return Err(Error::shape(format!(
                "matmul: shapes {:?} x {:?} need rank >= 2",
                self.shape(),
                other.shape()
            )));
        }
        let (p, qa) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (qb, r) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if qa != qb {
            return Err(Error::shape(format!(
                "matmul: inner extents differ, {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let batch_a = &self.shape()[..ra - 2];
        let batch_b = &other.shape()[..rb - 2];
        let (batch, bcast_a, bcast_b) = if batch_a == batch_b {
            (batch_a.to_vec(), false, false)
        } else if batch_a.is_empty() {
            (batch_b.to_vec(), true, false)
        } else if batch_b.is_empty() {
            (batch_a.to_vec(), false, true)
        } else {
            return Err(Error::shape(format!(
                "matmul: incompatible batch extents {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        };
        let nb: usize = batch.iter().product();
        let q = qa;
        let mut out = vec![0.0; nb * p * r];
        {
            let da = self.data();
            let db = other.data();
            for b in 0..nb {
                let a_off = if bcast_a { 0 } else { b * p * q };
                let b_off = if bcast_b { 0 } else { b * q * r };
                mm(
                    &da[a_off..a_off + p * q],
                    &db[b_off..b_off + q * r],
                    &mut out[b * p * r..(b + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let mut out_shape = batch.clone();
        out_shape.push(p);
        out_shape.push(r);
        Ok(Tensor::from_op(
            "matmul",
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _out, parents| {
                let da = parents[0].data().clone();
                let db = parents[1].data().clone();
                if parents[0].requires_grad() {
                    let mut ga = vec![0.0; da.len()];
                    for b in 0..nb {
                        let a_off = if bcast_a { 0 } else { b * p * q };
                        let b_off = if bcast_b { 0 } else { b * q * r };
                        mm_a_bt(
                            &g[b * p * r..(b + 1) * p * r],
                            &db[b_off..b_off + q * r],
                            &mut ga[a_off..a_off + p * q],
                            p,
                            r,
                            q,
                        );
                    }
                    parents[0].accumulate_grad(&ga);
                }
                if parents[1].requires_grad() {
                    let mut gb = vec![0.0; db.len()];
                    for b in 0..nb {
                        let a_off = if bcast_a { 0 } else { b * p * q };
                        let b_off = if bcast_b { 0 } else { b * q * r };
                        mm_at_b(
                            &da[a_off..a_off + p * q],
                            &g[b * p * r..(b + 1) * p * r],
                            &mut gb[b_off..b_off + q * r],
                            p,
                            q,
                            r,
                        );
                    }
                    parents[1].accumulate_grad(&gb);
                }
            }),
        ))
    }
}

// ── Convolution ─────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvDims {
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

fn conv_forward(x: &[f64], k: &[f64], d: ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.bs * d.cout * d.oh * d.ow];
    for b in 0..d.bs {
        for co in 0..d.cout {
            let o_base = (b * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (b * d.cin + ci) * d.h * d.w;
                let k_base = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wgt = k[k_base + ky * d.kw + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        // Valid ox range so that ix = ox*s + kx - pad lands in [0, w).
                        let (ox0, ox1) = valid_range(d.ow, d.w, d.stride, kx, d.pad);
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = x_base + iy as usize * d.w;
                            let orow = o_base + oy * d.ow;
                            let mut ix =
                                (ox0 * d.stride + kx) as isize - d.pad as isize;
                            for ox in ox0..ox1 {
                                out[orow + ox] += wgt * x[xrow + ix as usize];
                                ix += d.stride as isize;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn valid_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    // ox*s + kx - pad in [0, w)
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    let hi_num = w + pad;
    let hi = if hi_num > kx {
        ((hi_num - kx - 1) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn conv_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: ConvDims,
    want_dx: bool,
    want_dk: bool,
) -> (Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; if want_dx { x.len() } else { 0 }];
    let mut dk = vec![0.0; if want_dk { k.len() } else { 0 }];
    for b in 0..d.bs {
        for co in 0..d.cout {
            let o_base = (b * d.cout + co) * d.oh * d.ow;
            for ci in 0..d.cin {
                let x_base = (b * d.cin + ci) * d.h * d.w;
                let k_base = (co * d.cin + ci) * d.kh * d.kw;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let (ox0, ox1) = valid_range(d.ow, d.w, d.stride, kx, d.pad);
                        let wgt = k[k_base + ky * d.kw + kx];
                        let mut acc = 0.0;
                        for oy in 0..d.oh {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let xrow = x_base + iy as usize * d.w;
                            let orow = o_base + oy * d.ow;
                            let mut ix =
                                (ox0 * d.stride + kx) as isize - d.pad as isize;
                            for ox in ox0..ox1 {
                                let gv = g[orow + ox];
                                if want_dk {
                                    acc += gv * x[xrow + ix as usize];
                                }
                                if want_dx {
                                    dx[xrow + ix as usize] += gv * wgt;
                                }
                                ix += d.stride as isize;
                            }
                        }
                        if want_dk {
                            dk[k_base + ky * d.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

impl Tensor {
    /// 2-D cross-correlation. `x` is `[cin, H, W]` or `[B, cin, H, W]`,
    /// `kernel` is `[cout, cin, kh, kw]` with odd spatial extents.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let batched = match self.rank() {
            3 => false,
            4 => true,
            r => {
                return Err(Error::shape(format!("conv2d: input rank {r}, want 3 or 4")));
            }
        };
        if kernel.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d: kernel shape {:?}, want [cout, cin, kh, kw]",
                kernel.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv2d: stride must be >= 1".to_string()));
        }
        let (bs, cin, h, w) = if batched {
            let s = self.shape();
            (s[0], s[1], s[2], s[3])
        } else {
            let s = self.shape();
            (1, s[0], s[1], s[2])
        };
        let ks = kernel.shape();
        let (cout, kcin, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kcin != cin {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin} vs kernel channels {kcin}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d: kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        let dims = ConvDims { bs, cin, h, w, cout, kh, kw, oh, ow, stride, pad: padding };
        let out = conv_forward(&self.data(), &kernel.data(), dims);
        let out_shape = if batched {
            vec![bs, cout, oh, ow]
        } else {
            vec![cout, oh, ow]
        };
        Ok(Tensor::from_op(
            "conv2d",
            out,
            out_shape,
            vec![self.clone(), kernel.clone()],
            Box::new(move |g, _out, parents| {
                let want_dx = parents[0].requires_grad();
                let want_dk = parents[1].requires_grad();
                if !want_dx && !want_dk {
                    return;
                }
                let x = parents[0].data().clone();
                let k = parents[1].data().clone();
                let (dx, dk) = conv_backward(&x, &k, g, dims, want_dx, want_dk);
                if want_dx {
                    parents[0].accumulate_grad(&dx);
                }
                if want_dk {
                    parents[1].accumulate_grad(&dk);
                }
            }),
        ))
    }
}

// ── Bias / norm / resampling ────────────────────────────────────────────

impl Tensor {
    /// Adds `bias[C]` over the channel axis of `[..., C, H, W]`.
    pub fn add_bias_channels(&self, bias: &Tensor) -> Result<Tensor> {
        let rank = self.rank();
        if rank < 3 {
            return Err(Error::shape("add_bias_channels: rank >= 3 required".to_string()));
        }
        let c = self.shape()[rank - 3];
        if bias.shape() != [c] {
            return Err(Error::shape(format!(
                "add_bias_channels: bias {:?} vs {} channels",
                bias.shape(),
                c
            )));
        }
        let hw: usize = self.shape()[rank - 2..].iter().product();
        let outer: usize = self.shape()[..rank - 3].iter().product();
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for o in 0..outer {
                for ci in 0..c {
                    let base = (o * c + ci) * hw;
                    let bv = b[ci];
                    for v in &mut out[base..base + hw] {
                        *v += bv;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "add_bias_channels",
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
                if parents[1].requires_grad() {
                    let mut db = vec![0.0; c];
                    for o in 0..outer {
                        for (ci, dbi) in db.iter_mut().enumerate() {
                            let base = (o * c + ci) * hw;
                            *dbi += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                    parents[1].accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Adds `bias[D]` to every row of `[N, D]`.
    pub fn add_bias_row(&self, bias: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("add_bias_row: rank-2 input required".to_string()));
        }
        let (n, d) = (self.shape()[0], self.shape()[1]);
        if bias.shape() != [d] {
            return Err(Error::shape(format!(
                "add_bias_row: bias {:?} vs row width {}",
                bias.shape(),
                d
            )));
        }
        let mut out = self.to_vec();
        {
            let b = bias.data();
            for r in 0..n {
                for (v, bv) in out[r * d..(r + 1) * d].iter_mut().zip(b.iter()) {
                    *v += bv;
                }
            }
        }
        Ok(Tensor::from_op(
            "add_bias_row",
            out,
            self.shape().to_vec(),
            vec![self.clone(), bias.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    parents[0].accumulate_grad(g);
                }
                if parents[1].requires_grad() {
                    let mut db = vec![0.0; d];
                    for r in 0..n {
                        for (dbi, gv) in db.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dbi += gv;
                        }
                    }
                    parents[1].accumulate_grad(&db);
                }
            }),
        ))
    }

    /// Group normalization over `[C, H, W]` with per-channel affine.
    pub fn group_norm(&self, gamma: &Tensor, beta: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape("group_norm: [C,H,W] input required".to_string()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        if groups == 0 || c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {c} channels not divisible by {groups} groups"
            )));
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape("group_norm: affine params must be [C]".to_string()));
        }
        let cpg = c / groups;
        let gsize = cpg * h * w;
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; groups];
        {
            let x = self.data();
            for g in 0..groups {
                let base = g * gsize;
                let slice = &x[base..base + gsize];
                let mu: f64 = slice.iter().sum::<f64>() / gsize as f64;
                let var: f64 =
                    slice.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / gsize as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[g] = inv;
                for (dst, &v) in xhat[base..base + gsize].iter_mut().zip(slice) {
                    *dst = (v - mu) * inv;
                }
            }
        }
        let hw = h * w;
        let mut out = vec![0.0; self.numel()];
        {
            let ga = gamma.data();
            let be = beta.data();
            for ci in 0..c {
                let base = ci * hw;
                for i in 0..hw {
                    out[base + i] = ga[ci] * xhat[base + i] + be[ci];
                }
            }
        }
        let xhat_saved = xhat;
        let inv_saved = inv_std;
        Ok(Tensor::from_op(
            "group_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _out, parents| {
                let ga = parents[1].data().clone();
                if parents[1].requires_grad() {
                    let mut dg = vec![0.0; c];
                    for (ci, dgi) in dg.iter_mut().enumerate() {
                        let base = ci * hw;
                        *dgi += (0..hw).map(|i| g[base + i] * xhat_saved[base + i]).sum::<f64>();
                    }
                    parents[1].accumulate_grad(&dg);
                }
                if parents[2].requires_grad() {
                    let mut db = vec![0.0; c];
                    for (ci, dbi) in db.iter_mut().enumerate() {
                        let base = ci * hw;
                        *dbi += g[base..base + hw].iter().sum::<f64>();
                    }
                    parents[2].accumulate_grad(&db);
                }
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; c * hw];
                    for grp in 0..groups {
                        let base = grp * gsize;
                        // dxhat = g * gamma (per channel)
                        let mut dxhat = vec![0.0; gsize];
                        for local_c in 0..cpg {
                            let ci = grp * cpg + local_c;
                            for i in 0..hw {
                                dxhat[local_c * hw + i] = g[ci * hw + i] * ga[ci];
                            }
                        }
                        let m1: f64 = dxhat.iter().sum::<f64>() / gsize as f64;
                        let m2: f64 = dxhat
                            .iter()
                            .zip(&xhat_saved[base..base + gsize])
                            .map(|(d, x)| d * x)
                            .sum::<f64>()
                            / gsize as f64;
                        let inv = inv_saved[grp];
                        for i in 0..gsize {
                            dx[base + i] =
                                inv * (dxhat[i] - m1 - xhat_saved[base + i] * m2);
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }
            }),
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        if self.rank() != 3 {
            return Err(Error::shape("upsample_nearest2x: [C,H,W] required".to_string()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        {
            let x = self.data();
            for ci in 0..c {
                for y in 0..oh {
                    let sy = y / 2;
                    let src = (ci * h + sy) * w;
                    let dst = (ci * oh + y) * ow;
                    for xo in 0..ow {
                        out[dst + xo] = x[src + xo / 2];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "upsample_nearest2x",
            out,
            vec![c, oh, ow],
            vec![self.clone()],
            Box::new(move |g, _out, parents| {
                if parents[0].requires_grad() {
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..oh {
                            let sy = y / 2;
                            let src = (ci * h + sy) * w;
                            let dst = (ci * oh + y) * ow;
                            for xo in 0..ow {
                                dx[src + xo / 2] += g[dst + xo];
                            }
                        }
                    }
                    parents[0].accumulate_grad(&dx);
                }
            }),
        ))
    }
}
