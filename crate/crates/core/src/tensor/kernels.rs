//! Raw forward/backward kernels over flat `f64` buffers.
//!
//! Image tensors are `[batch, channels, height, width]`, row-major.

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes a
/// row-major operand. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe exactly the m*k, k*n and m*n buffers checked above.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn spatial_out(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let so = g.spatial_out();
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * so..(row + 1) * so];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let so = g.spatial_out();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * so..(row + 1) * so];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let so = g.spatial_out();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * so;
    let mut out = vec![0.0; g.batch * out_len];
    let mut cols = vec![0.0; g.patch() * so];
    for b in 0..g.batch {
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        let y = &mut out[b * out_len..(b + 1) * out_len];
        gemm(g.c_out, g.patch(), so, w, false, &cols, false, 0.0, y);
        if let Some(bias) = bias {
            for (co, plane) in y.chunks_mut(so).enumerate() {
                plane.iter_mut().for_each(|v| *v += bias[co]);
            }
        }
    }
    out
}

/// Returns gradients for `(x, w, bias)`; each is computed only when requested.
#[allow(clippy::type_complexity)]
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want: (bool, bool, bool),
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let so = g.spatial_out();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * so;
    let mut dx = want.0.then(|| vec![0.0; x.len()]);
    let mut dw = want.1.then(|| vec![0.0; w.len()]);
    let mut db = want.2.then(|| vec![0.0; g.c_out]);
    let mut cols = vec![0.0; g.patch() * so];
    for b in 0..g.batch {
        let dy_b = &dy[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            gemm(g.c_out, so, g.patch(), dy_b, false, &cols, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(g.patch(), g.c_out, so, w, true, dy_b, false, 0.0, &mut cols);
            col2im(g, &cols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in dy_b.chunks(so).enumerate() {
                db[co] += plane.iter().sum::<f64>();
            }
        }
    }
    (dx, dw, db)
}

pub(crate) fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for y in 0..ho {
            let srow = &src[(y / f) * w..(y / f + 1) * w];
            for (xo, d) in dst[y * wo..(y + 1) * wo].iter_mut().enumerate() {
                *d = srow[xo / f];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(dy: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &dy[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xo in 0..wo {
                dst[(y / f) * w + xo / f] += src[y * wo + xo];
            }
        }
    }
    dx
}

pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let (bh, bw) = (h / out, w / out);
    let inv = 1.0 / (bh * bw) as f64;
    let mut y = vec![0.0; planes * out * out];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                y[p * out * out + (i / bh) * out + j / bw] += src[i * w + j];
            }
        }
    }
    y.iter_mut().for_each(|v| *v *= inv);
    y
}

pub(crate) fn avg_pool_backward(dy: &[f64], planes: usize, h: usize, w: usize, out: usize) -> Vec<f64> {
    let (bh, bw) = (h / out, w / out);
    let inv = 1.0 / (bh * bw) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            for j in 0..w {
                dx[p * h * w + i * w + j] = dy[p * out * out + (i / bh) * out + j / bw] * inv;
            }
        }
    }
    dx
}

/// Returns the normalized output and per-plane inverse standard deviations.
pub(crate) fn instance_norm_forward(x: &[f64], planes: usize, hw: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; planes];
    for p in 0..planes {
        let src = &x[p * hw..(p + 1) * hw];
        let mean = src.iter().sum::<f64>() / hw as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[p] = inv;
        for (d, s) in y[p * hw..(p + 1) * hw].iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
    }
    (y, inv_std)
}

pub(crate) fn instance_norm_backward(y: &[f64], inv_std: &[f64], dy: &[f64], hw: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for (p, &inv) in inv_std.iter().enumerate() {
        let ys = &y[p * hw..(p + 1) * hw];
        let dys = &dy[p * hw..(p + 1) * hw];
        let mean_dy = dys.iter().sum::<f64>() / hw as f64;
        let mean_dyy = dys.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
        for ((d, &g), &yv) in dx[p * hw..(p + 1) * hw].iter_mut().zip(dys).zip(ys) {
            *d = inv * (g - mean_dy - yv * mean_dyy);
        }
    }
    dx
}
