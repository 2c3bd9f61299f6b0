//! Convolutions and upsampling over `[N, C, H, W]` tensors.

use super::ops::{dims4, gemm_acc, gemm_nt_acc, gemm_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn geometry(
    op: &'static str,
    [_, c, h, w]: [usize; 4],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<Geometry> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(op, format!("kernel {kh}x{kw} must have odd sides")));
    }
    if stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    let out = |size: usize, k: usize, axis: &str| -> Result<usize> {
        let span = size + 2 * pad;
        if span < k {
            return Err(Error::shape(
                op,
                format!("axis {axis}: padded size {size} + 2*{pad} is smaller than kernel {k}"),
            ));
        }
        Ok((span - k) / stride + 1)
    };
    Ok(Geometry { c, h, w, kh, kw, stride, pad, oh: out(h, kh, "H")?, ow: out(w, kw, "W")? })
}

/// Unfolds one image `[C, H, W]` into columns `[C*kh*kw, oh*ow]`.
fn im2col(x: &[f64], g: &Geometry, col: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &x[(c * g.h + y as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        *d = if xx < 0 || xx >= g.w as isize { 0.0 } else { src[xx as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, dx: &mut [f64]) {
    let p = g.oh * g.ow;
    for c in 0..g.c {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((c * g.kh + i) * g.kw + j) * p..][..p];
                for oy in 0..g.oh {
                    let y = (oy * g.stride + i) as isize - g.pad as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * g.h + y as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let xx = (ox * g.stride + j) as isize - g.pad as isize;
                        if xx >= 0 && xx < g.w as isize {
                            dst[xx as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation. `weight` is `[K, C, kh, kw]`, `bias` is `[K]`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let dims = dims4("conv2d", input)?;
    let [k, wc, kh, kw] = dims4("conv2d", weight)?;
    let n = dims[0];
    if wc != dims[1] {
        return Err(Error::shape(
            "conv2d",
            format!("axis C (1): input has {} channels, weight expects {wc}", dims[1]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::shape("conv2d", format!("bias shape {:?} != [{k}]", b.shape())));
        }
    }
    let g = geometry("conv2d", dims, kh, kw, stride, padding)?;
    let (p, ck) = (g.oh * g.ow, g.c * kh * kw);
    let img = g.c * g.h * g.w;

    let mut cols = vec![0.0; n * ck * p];
    let mut out = vec![0.0; n * k * p];
    for ni in 0..n {
        let col = &mut cols[ni * ck * p..(ni + 1) * ck * p];
        im2col(&input.data()[ni * img..(ni + 1) * img], &g, col);
        let o = &mut out[ni * k * p..(ni + 1) * k * p];
        if let Some(b) = bias {
            for (row, &bv) in o.chunks_mut(p).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm_acc(weight.data(), col, o, k, ck, p);
    }

    let mut inputs = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        inputs.push(b.clone());
    }
    let (x, w, has_bias) = (input.clone(), weight.clone(), bias.is_some());
    Ok(Tensor::from_op(
        "conv2d",
        out,
        vec![n, k, g.oh, g.ow],
        inputs,
        Box::new(move |gout| {
            let mut gw = vec![0.0; k * ck];
            let mut gx = x.requires_grad().then(|| vec![0.0; n * img]);
            let mut dcol = vec![0.0; ck * p];
            for ni in 0..n {
                let go = &gout[ni * k * p..(ni + 1) * k * p];
                let col = &cols[ni * ck * p..(ni + 1) * ck * p];
                gemm_nt_acc(go, col, &mut gw, k, p, ck);
                if let Some(gx) = gx.as_mut() {
                    dcol.fill(0.0);
                    gemm_tn_acc(w.data(), go, &mut dcol, k, ck, p);
                    col2im(&dcol, &g, &mut gx[ni * img..(ni + 1) * img]);
                }
            }
            let mut grads = vec![gx, Some(gw)];
            if has_bias {
                let mut gb = vec![0.0; k];
                for ni in 0..n {
                    for (b, row) in gb.iter_mut().zip(gout[ni * k * p..(ni + 1) * k * p].chunks(p)) {
                        *b += row.iter().sum::<f64>();
                    }
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Per-channel convolution; `weight` is `[C, 1, kh, kw]`. No bias.
pub fn depthwise_conv2d(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let dims = dims4("depthwise_conv2d", input)?;
    let [wc, one, kh, kw] = dims4("depthwise_conv2d", weight)?;
    if wc != dims[1] || one != 1 {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("axis C (1): weight {:?} does not match {} input channels", weight.shape(), dims[1]),
        ));
    }
    let n = dims[0];
    let g = geometry("depthwise_conv2d", dims, kh, kw, stride, padding)?;
    let (c, h, w, oh, ow) = (g.c, g.h, g.w, g.oh, g.ow);

    // Visits every (output index, input index, kernel index) triple.
    let for_each_tap = move |mut f: Box<dyn FnMut(usize, usize, usize) + '_>| {
        for ni in 0..n {
            for ci in 0..c {
                let plane_in = (ni * c + ci) * h * w;
                let plane_out = (ni * c + ci) * oh * ow;
                for i in 0..kh {
                    for j in 0..kw {
                        let kidx = (ci * kh + i) * kw + j;
                        for oy in 0..oh {
                            let y = (oy * g.stride + i) as isize - g.pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let xx = (ox * g.stride + j) as isize - g.pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                f(
                                    plane_out + oy * ow + ox,
                                    plane_in + y as usize * w + xx as usize,
                                    kidx,
                                );
                            }
                        }
                    }
                }
            }
        }
    };

    let mut out = vec![0.0; n * c * oh * ow];
    {
        let (xd, wd) = (input.data(), weight.data());
        for_each_tap(Box::new(|o, i, k| out[o] += xd[i] * wd[k]));
    }
    let (x, wt) = (input.clone(), weight.clone());
    Ok(Tensor::from_op(
        "depthwise_conv2d",
        out,
        vec![n, c, oh, ow],
        vec![input.clone(), weight.clone()],
        Box::new(move |gout| {
            let mut gx = vec![0.0; x.numel()];
            let mut gw = vec![0.0; wt.numel()];
            let (xd, wd) = (x.data(), wt.data());
            for_each_tap(Box::new(|o, i, k| {
                gx[i] += gout[o] * wd[k];
                gw[k] += gout[o] * xd[i];
            }));
            vec![Some(gx), Some(gw)]
        }),
    ))
}

/// Source index pair and blend factor for each output position along one
/// axis, half-pixel centers (`align_corners = false`).
fn upsample_taps(size: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * size)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(size - 1);
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling with half-pixel centers (`align_corners = false`).
pub fn bilinear_upsample2x(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("bilinear_upsample2x", input)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("bilinear_upsample2x", "spatial sides must be >= 1"));
    }
    let (ty, tx) = (upsample_taps(h), upsample_taps(w));
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; n * c * oh * ow];
    for (plane_in, plane_out) in input.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = plane_in[y0 * w + x0] * (1.0 - lx) + plane_in[y0 * w + x1] * lx;
                let bot = plane_in[y1 * w + x0] * (1.0 - lx) + plane_in[y1 * w + x1] * lx;
                plane_out[oy * ow + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(Tensor::from_op(
        "bilinear_upsample2x",
        out,
        vec![n, c, oh, ow],
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; n * c * h * w];
            for (gi, go) in gx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                        let v = go[oy * ow + ox];
                        gi[y0 * w + x0] += v * (1.0 - ly) * (1.0 - lx);
                        gi[y0 * w + x1] += v * (1.0 - ly) * lx;
                        gi[y1 * w + x0] += v * ly * (1.0 - lx);
                        gi[y1 * w + x1] += v * ly * lx;
                    }
                }
            }
            vec![Some(gx)]
        }),
    ))
}
