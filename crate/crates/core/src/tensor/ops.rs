//! Elementwise, reduction, shape and matrix primitives.

use super::{numel, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a + b).collect();
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a - b).collect();
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = g.iter().zip(b.data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(a.data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// Adds `other` broadcast over the leading axes of `self`; `other.shape`
    /// must equal the trailing axes of `self.shape`.
    pub fn add_broadcast(&self, other: &Tensor) -> Result<Tensor> {
        let (s, o) = (self.shape(), other.shape());
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(Error::shape(
                "add_broadcast",
                format!("{o:?} is not a trailing sub-shape of {s:?}"),
            ));
        }
        let inner = other.numel().max(1);
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + other.data()[i % inner])
            .collect();
        Ok(Tensor::from_op(
            "add_broadcast",
            data,
            s.to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let mut gb = vec![0.0; inner];
                for chunk in g.chunks(inner) {
                    gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            "scale",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn relu(&self) -> Tensor {
        let decide = || Ok(self.data().iter().map(|&v| usize::from(v > 0.0)).collect());
        let mask: Vec<bool> = match super::gradcheck::frozen_branch(decide).expect("relu never fails") {
            Some(m) => m.into_iter().map(|b| b == 1).collect(),
            None => self.data().iter().map(|&v| v > 0.0).collect(),
        };
        let data = self.data().iter().zip(&mask).map(|(&v, &on)| if on { v } else { 0.0 }).collect();
        Tensor::from_op(
            "relu",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().zip(&mask).map(|(g, &on)| if on { *g } else { 0.0 }).collect())]),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| sigmoid(v)).collect();
        let y = data.clone();
        Tensor::from_op(
            "sigmoid",
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(g.iter().zip(&y).map(|(g, y)| g * y * (1.0 - y)).collect())]
            }),
        )
    }

    pub fn sum(&self) -> Tensor {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![self.data().iter().sum()],
            vec![],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let inv = 1.0 / n as f64;
        Tensor::from_op(
            "mean",
            vec![self.data().iter().sum::<f64>() * inv],
            vec![],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose_last2", "need rank >= 2"));
        }
        let (m, n) = (self.shape()[r - 2], self.shape()[r - 1]);
        let batch = self.numel() / (m * n).max(1);
        let data = transpose_batched(self.data(), batch, m, n);
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::from_op(
            "transpose_last2",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_batched(g, batch, n, m))]),
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        if self.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let d = *self.shape().last().ok_or_else(|| Error::shape("softmax", "rank 0 input"))?;
        let mut y = self.data().to_vec();
        for row in y.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = y.clone();
        Ok(Tensor::from_op(
            "softmax",
            y,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), xr) in g.chunks(d).zip(out.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((x, g), y) in xr.iter_mut().zip(gr).zip(yr) {
                        *x = y * (g - dot);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Repeats the tensor `count` times along a new leading axis.
    pub fn expand_batch(&self, count: usize) -> Tensor {
        let n = self.numel();
        let mut data = Vec::with_capacity(n * count);
        for _ in 0..count {
            data.extend_from_slice(self.data());
        }
        let mut shape = vec![count];
        shape.extend_from_slice(self.shape());
        Tensor::from_op(
            "expand_batch",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gx.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Gathers slices along axis 0. Indices may repeat.
    pub fn index_select0(&self, indices: &[usize]) -> Result<Tensor> {
        let rows = *self.shape().first().ok_or_else(|| Error::shape("index_select0", "rank 0"))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(
                "index_select0",
                format!("index {bad} out of range for axis 0 of size {rows}"),
            ));
        }
        let inner = self.numel() / rows.max(1);
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = indices.len();
        let idx = indices.to_vec();
        let total = self.numel();
        Ok(Tensor::from_op(
            "index_select0",
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; total];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g[k * inner..(k + 1) * inner];
                    gx[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[N, C, H, W]` to `[N, H*W, C]`, row-major over `(H, W)`.
    pub fn flatten_spatial(&self) -> Result<Tensor> {
        let [n, c, h, w] = dims4("flatten_spatial", self)?;
        let s = h * w;
        let data = transpose_batched(self.data(), n, c, s);
        Ok(Tensor::from_op(
            "flatten_spatial",
            data,
            vec![n, s, c],
            vec![self.clone()],
            Box::new(move |g| vec![Some(transpose_batched(g, n, s, c))]),
        ))
    }

    /// Global average pool `[N, C, H, W]` to `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let [n, c, h, w] = dims4("global_avg_pool", self)?;
        let s = h * w;
        let inv = 1.0 / s as f64;
        let data = self.data().chunks(s).map(|p| p.iter().sum::<f64>() * inv).collect();
        Ok(Tensor::from_op(
            "global_avg_pool",
            data,
            vec![n, c],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(n * c * s);
                for &v in g {
                    gx.extend(std::iter::repeat_n(v * inv, s));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Multiplies each `[H, W]` plane of `self` (`[N, C, H, W]`) by the
    /// matching entry of `gate` (`[N, C]`).
    pub fn scale_channels(&self, gate: &Tensor) -> Result<Tensor> {
        let [n, c, h, w] = dims4("scale_channels", self)?;
        if gate.shape() != [n, c] {
            return Err(Error::shape(
                "scale_channels",
                format!("gate shape {:?} must be [{n}, {c}]", gate.shape()),
            ));
        }
        let s = h * w;
        let mut data = self.data().to_vec();
        for (plane, &k) in data.chunks_mut(s).zip(gate.data()) {
            plane.iter_mut().for_each(|v| *v *= k);
        }
        let (x, gt) = (self.clone(), gate.clone());
        Ok(Tensor::from_op(
            "scale_channels",
            data,
            vec![n, c, h, w],
            vec![self.clone(), gate.clone()],
            Box::new(move |g| {
                let mut gx = g.to_vec();
                let mut gg = vec![0.0; n * c];
                for (i, (gp, xp)) in g.chunks(s).zip(x.data().chunks(s)).enumerate() {
                    gg[i] = gp.iter().zip(xp).map(|(a, b)| a * b).sum();
                }
                for (plane, &k) in gx.chunks_mut(s).zip(gt.data()) {
                    plane.iter_mut().for_each(|v| *v *= k);
                }
                vec![Some(gx), Some(gg)]
            }),
        ))
    }

    /// `[B, A, C, D]` to `[B, C, A, D]` (head split/merge for attention).
    pub fn swap_axes12(&self) -> Result<Tensor> {
        let [b, a, c, d] = dims4("swap_axes12", self)?;
        let data = swap12(self.data(), b, a, c, d);
        Ok(Tensor::from_op(
            "swap_axes12",
            data,
            vec![b, c, a, d],
            vec![self.clone()],
            Box::new(move |g| vec![Some(swap12(g, b, c, a, d))]),
        ))
    }
}

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape(op, format!("expected rank-4 [N, C, H, W], got {s:?}"))),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn transpose_batched(x: &[f64], batch: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let (src, dst) = (&x[b * m * n..(b + 1) * m * n], &mut out[b * m * n..(b + 1) * m * n]);
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

fn swap12(x: &[f64], b: usize, a: usize, c: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for ai in 0..a {
            for ci in 0..c {
                let src = ((bi * a + ai) * c + ci) * d;
                let dst = ((bi * c + ci) * a + ai) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}

/// `out[m, n] (+)= a[m, k] * b[k, n]`, all row-major.
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(br).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// `out[m, n] (+)= a[m, k] * b[n, k]^T`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] += ar.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k, n] (+)= a[m, k]^T * b[m, n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            out[p * n..(p + 1) * n].iter_mut().zip(br).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

/// Batched matrix product over matching leading axes:
/// `[.., m, k] x [.., k, n] -> [.., m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, rb) = (a.rank(), b.rank());
    if ra < 2 || ra != rb || a.shape()[..ra - 2] != b.shape()[..rb - 2] {
        return Err(Error::shape(
            "matmul",
            format!("incompatible batch axes {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[ra - 2], a.shape()[ra - 1]);
    let (k2, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner axis mismatch: {k} (axis {}) vs {k2}", ra - 1),
        ));
    }
    let batch = numel(&a.shape()[..ra - 2]);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm_acc(
            &a.data()[bi * m * k..(bi + 1) * m * k],
            &b.data()[bi * k * n..(bi + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    }
    let mut shape = a.shape()[..ra - 2].to_vec();
    shape.extend([m, n]);
    let (at, bt) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        "matmul",
        out,
        shape,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = at.requires_grad().then(|| {
                let mut ga = vec![0.0; batch * m * k];
                for bi in 0..batch {
                    gemm_nt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt.data()[bi * k * n..(bi + 1) * k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = bt.requires_grad().then(|| {
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    gemm_tn_acc(
                        &at.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Affine map over the last axis: `y = x W^T + b` with `W: [Dout, Din]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [dout, din] = match *weight.shape() {
        [o, i] => [o, i],
        ref s => return Err(Error::shape("linear", format!("weight must be rank 2, got {s:?}"))),
    };
    let last = input.shape().last().copied().unwrap_or(0);
    if last != din {
        return Err(Error::shape(
            "linear",
            format!(
                "trailing axis {} of input {:?} has size {last}, weight expects {din}",
                input.rank().saturating_sub(1),
                input.shape()
            ),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [dout] {
            return Err(Error::shape("linear", format!("bias shape {:?} != [{dout}]", b.shape())));
        }
    }
    let rows = input.numel() / din.max(1);
    let mut out = vec![0.0; rows * dout];
    if let Some(b) = bias {
        for r in out.chunks_mut(dout) {
            r.copy_from_slice(b.data());
        }
    }
    gemm_nt_acc(input.data(), weight.data(), &mut out, rows, din, dout);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = dout;

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (x, w, has_bias) = (input.clone(), weight.clone(), bias.is_some());
    Ok(Tensor::from_op(
        "linear",
        out,
        shape,
        inputs,
        Box::new(move |g| {
            let gx = x.requires_grad().then(|| {
                let mut gx = vec![0.0; rows * din];
                gemm_acc(g, w.data(), &mut gx, rows, dout, din);
                gx
            });
            let mut gw = vec![0.0; dout * din];
            gemm_tn_acc(g, x.data(), &mut gw, rows, dout, din);
            let mut grads = vec![gx, Some(gw)];
            if has_bias {
                let mut gb = vec![0.0; dout];
                for r in g.chunks(dout) {
                    gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Concatenates `[N, Ci, H, W]` tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_channels", "no inputs"))?;
    let [n, _, h, w] = dims4("concat_channels", first)?;
    let mut chans = Vec::with_capacity(parts.len());
    for (i, p) in parts.iter().enumerate() {
        let [pn, pc, ph, pw] = dims4("concat_channels", p)?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::shape(
                "concat_channels",
                format!("input {i} has shape {:?}, expected [{n}, _, {h}, {w}]", p.shape()),
            ));
        }
        chans.push(pc);
    }
    let s = h * w;
    let total_c: usize = chans.iter().sum();
    let mut data = Vec::with_capacity(n * total_c * s);
    for ni in 0..n {
        for (p, &c) in parts.iter().zip(&chans) {
            data.extend_from_slice(&p.data()[ni * c * s..(ni + 1) * c * s]);
        }
    }
    Ok(Tensor::from_op(
        "concat_channels",
        data,
        vec![n, total_c, h, w],
        parts.iter().map(|&t| t.clone()).collect(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<f64>> = chans.iter().map(|c| Vec::with_capacity(n * c * s)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g[off..off + c * s]);
                    off += c * s;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}
