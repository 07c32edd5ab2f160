//! Batched layer kernels over NHWC activations, forward and backward.
//!
//! Dense convolutions go through im2col and one GEMM; the patch column of
//! tap (kh, kw) and input channel ci is `(kh·d + kw)·C_in + ci`, so copying a
//! pixel's channels is a contiguous slice copy. Depthwise convolutions use
//! direct loops.

use crate::linalg::gemm;
use crate::modelgraph::{Conv2d, Linear};

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

fn im2col(conv: &Conv2d, x: &[f64], g: Geom) -> Vec<f64> {
    let (d, c_in, s, p) = (conv.d(), conv.c_in(), conv.stride, conv.padding);
    let k = d * d * c_in;
    let mut cols = vec![0.0; g.n * g.ho * g.wo * k];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * k;
                for kh in 0..d {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kw in 0..d {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * c_in;
                        let dst = row + (kh * d + kw) * c_in;
                        cols[dst..dst + c_in].copy_from_slice(&x[src..src + c_in]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(conv: &Conv2d, cols: &[f64], g: Geom) -> Vec<f64> {
    let (d, c_in, s, p) = (conv.d(), conv.c_in(), conv.stride, conv.padding);
    let k = d * d * c_in;
    let mut dx = vec![0.0; g.n * g.h * g.w * c_in];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = ((b * g.ho + oy) * g.wo + ox) * k;
                for kh in 0..d {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kw in 0..d {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * c_in;
                        let src = row + (kh * d + kw) * c_in;
                        for (a, v) in dx[dst..dst + c_in].iter_mut().zip(&cols[src..src + c_in]) {
                            *a += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Kernel as a row-major K×C_out matrix in patch-column order.
fn packed_weight(conv: &Conv2d) -> Vec<f64> {
    let (d, c_in, c_out) = (conv.d(), conv.c_in(), conv.c_out());
    let mut wm = vec![0.0; d * d * c_in * c_out];
    for ci in 0..c_in {
        for o in 0..c_out {
            for kw in 0..d {
                for kh in 0..d {
                    wm[((kh * d + kw) * c_in + ci) * c_out + o] = conv.weight.get(kh, kw, o, ci);
                }
            }
        }
    }
    wm
}

/// Inverse of [`packed_weight`], back to the kernel's linear order.
fn unpack_weight(conv: &Conv2d, wm: &[f64]) -> Vec<f64> {
    let (d, c_in, c_out) = (conv.d(), conv.c_in(), conv.c_out());
    let mut out = vec![0.0; wm.len()];
    for ci in 0..c_in {
        for o in 0..c_out {
            for kw in 0..d {
                for kh in 0..d {
                    out[kh + d * (kw + d * (o + c_out * ci))] = wm[((kh * d + kw) * c_in + ci) * c_out + o];
                }
            }
        }
    }
    out
}

fn add_bias(y: &mut [f64], bias: Option<&Vec<f64>>, c: usize) {
    if let Some(b) = bias {
        for row in y.chunks_exact_mut(c) {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
}

fn bias_grad(dy: &[f64], c: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for row in dy.chunks_exact(c) {
        for (a, v) in db.iter_mut().zip(row) {
            *a += v;
        }
    }
    db
}

pub(crate) fn conv_forward(conv: &Conv2d, x: &[f64], g: Geom) -> Vec<f64> {
    if conv.is_depthwise() {
        return depthwise_forward(conv, x, g);
    }
    let c_out = conv.c_out();
    let k = conv.d() * conv.d() * conv.c_in();
    let rows = g.n * g.ho * g.wo;
    let cols = im2col(conv, x, g);
    let wm = packed_weight(conv);
    let mut y = vec![0.0; rows * c_out];
    gemm(rows, k, c_out, (&cols, k, 1), (&wm, c_out, 1), &mut y, (c_out, 1));
    add_bias(&mut y, conv.bias.as_ref(), c_out);
    y
}

/// Returns (dx, dweight in kernel order, dbias).
pub(crate) fn conv_backward(conv: &Conv2d, x: &[f64], dy: &[f64], g: Geom) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    if conv.is_depthwise() {
        return depthwise_backward(conv, x, dy, g);
    }
    let c_out = conv.c_out();
    let k = conv.d() * conv.d() * conv.c_in();
    let rows = g.n * g.ho * g.wo;
    let cols = im2col(conv, x, g);
    let wm = packed_weight(conv);
    let mut dwm = vec![0.0; k * c_out];
    gemm(k, rows, c_out, (&cols, 1, k), (dy, c_out, 1), &mut dwm, (c_out, 1));
    let mut dcols = vec![0.0; rows * k];
    gemm(rows, c_out, k, (dy, c_out, 1), (&wm, 1, c_out), &mut dcols, (k, 1));
    let dx = col2im(conv, &dcols, g);
    let db = conv.bias.as_ref().map(|_| bias_grad(dy, c_out));
    (dx, unpack_weight(conv, &dwm), db)
}

fn depthwise_forward(conv: &Conv2d, x: &[f64], g: Geom) -> Vec<f64> {
    let (d, c, s, p) = (conv.d(), conv.c_out(), conv.stride, conv.padding);
    let wt = conv.weight.tensor().data();
    let mut y = vec![0.0; g.n * g.ho * g.wo * c];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let out = &mut y[((b * g.ho + oy) * g.wo + ox) * c..][..c];
                for kh in 0..d {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kw in 0..d {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = &x[((b * g.h + iy as usize) * g.w + ix as usize) * c..][..c];
                        let tap = kh + d * kw;
                        for ch in 0..c {
                            out[ch] += wt[tap + d * d * ch] * src[ch];
                        }
                    }
                }
            }
        }
    }
    add_bias(&mut y, conv.bias.as_ref(), c);
    y
}

fn depthwise_backward(conv: &Conv2d, x: &[f64], dy: &[f64], g: Geom) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (d, c, s, p) = (conv.d(), conv.c_out(), conv.stride, conv.padding);
    let wt = conv.weight.tensor().data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; wt.len()];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let go = &dy[((b * g.ho + oy) * g.wo + ox) * c..][..c];
                for kh in 0..d {
                    let iy = (oy * s + kh) as isize - p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kw in 0..d {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let base = ((b * g.h + iy as usize) * g.w + ix as usize) * c;
                        let tap = kh + d * kw;
                        for ch in 0..c {
                            dw[tap + d * d * ch] += go[ch] * x[base + ch];
                            dx[base + ch] += go[ch] * wt[tap + d * d * ch];
                        }
                    }
                }
            }
        }
    }
    let db = conv.bias.as_ref().map(|_| bias_grad(dy, c));
    (dx, dw, db)
}

pub(crate) fn fc_forward(fc: &Linear, x: &[f64], n: usize) -> Vec<f64> {
    let (l_in, l_out) = (fc.l_in(), fc.l_out());
    let mut y = vec![0.0; n * l_out];
    gemm(n, l_in, l_out, (x, l_in, 1), (fc.weight.as_slice(), 1, l_in), &mut y, (l_out, 1));
    add_bias(&mut y, fc.bias.as_ref(), l_out);
    y
}

pub(crate) fn fc_backward(fc: &Linear, x: &[f64], dy: &[f64], n: usize) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let (l_in, l_out) = (fc.l_in(), fc.l_out());
    let mut dw = vec![0.0; l_in * l_out];
    gemm(l_in, n, l_out, (x, 1, l_in), (dy, l_out, 1), &mut dw, (1, l_in));
    let mut dx = vec![0.0; n * l_in];
    gemm(n, l_out, l_in, (dy, l_out, 1), (fc.weight.as_slice(), l_in, 1), &mut dx, (l_in, 1));
    let db = fc.bias.as_ref().map(|_| bias_grad(dy, l_out));
    (dx, dw, db)
}

/// Max-pool forward; also returns, for every output, the input index that
/// won (first maximum on ties).
pub(crate) fn maxpool_forward(x: &[f64], g: Geom, c: usize, size: usize, stride: usize) -> (Vec<f64>, Vec<usize>) {
    let mut y = vec![0.0; g.n * g.ho * g.wo * c];
    let mut arg = vec![0; y.len()];
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut at = 0;
                    for ky in 0..size {
                        for kx in 0..size {
                            let i = ((b * g.h + oy * stride + ky) * g.w + ox * stride + kx) * c + ch;
                            if x[i] > best {
                                best = x[i];
                                at = i;
                            }
                        }
                    }
                    let o = ((b * g.ho + oy) * g.wo + ox) * c + ch;
                    y[o] = best;
                    arg[o] = at;
                }
            }
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward(dy: &[f64], arg: &[usize], input_len: usize) -> Vec<f64> {
    let mut dx = vec![0.0; input_len];
    for (g, &i) in dy.iter().zip(arg) {
        dx[i] += g;
    }
    dx
}
