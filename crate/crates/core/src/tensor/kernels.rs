//! Raw numeric kernels over flat `NCHW` buffers.

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
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
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: every caller passes buffers sized for the given dims and strides.
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

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], weight: &[f64]) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let mut out = vec![0.0; g.n * g.cout * p];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * p]
    };
    for i in 0..g.n {
        let xs = &x[i * in_len..(i + 1) * in_len];
        let b: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut cols);
            &cols
        };
        let o = &mut out[i * g.cout * p..(i + 1) * g.cout * p];
        gemm(
            g.cout,
            kk,
            p,
            weight,
            (kk as isize, 1),
            b,
            (p as isize, 1),
            0.0,
            o,
        );
    }
    out
}

/// Returns `(dx, dweight)`; `dx` is only computed when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    weight: &[f64],
    dout: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let kk = g.col_rows();
    let in_len = g.cin * g.h * g.w;
    let mut dx = want_dx.then(|| vec![0.0; g.n * in_len]);
    let mut dw = want_dw.then(|| vec![0.0; g.cout * kk]);
    let mut cols = vec![0.0; kk * p];
    let mut dcols = if want_dx && !g.is_pointwise() {
        vec![0.0; kk * p]
    } else {
        Vec::new()
    };
    for i in 0..g.n {
        let xs = &x[i * in_len..(i + 1) * in_len];
        let dos = &dout[i * g.cout * p..(i + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            let b: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut cols);
                &cols
            };
            // dW[cout×kk] += dOut[cout×p] · colsᵀ[p×kk]
            gemm(
                g.cout,
                p,
                kk,
                dos,
                (p as isize, 1),
                b,
                (1, p as isize),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx[i * in_len..(i + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    kk,
                    g.cout,
                    p,
                    weight,
                    (1, kk as isize),
                    dos,
                    (p as isize, 1),
                    0.0,
                    dxs,
                );
            } else {
                gemm(
                    kk,
                    g.cout,
                    p,
                    weight,
                    (1, kk as isize),
                    dos,
                    (p as isize, 1),
                    0.0,
                    &mut dcols,
                );
                col2im(g, &dcols, dxs);
            }
        }
    }
    (dx, dw)
}

/// Source taps for one output axis of a half-pixel bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl AxisTaps {
    /// `s = (d + 0.5)·(in/out) − 0.5`, clamped to `[0, in − 1]`.
    pub fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let last = input - 1;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for d in 0..output {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, last as f64);
            let l = (s.floor() as usize).min(last);
            lo.push(l);
            hi.push((l + 1).min(last));
            frac.push(s - l as f64);
        }
        AxisTaps { lo, hi, frac }
    }
}

pub(crate) fn resize_plane(
    src: &[f64],
    (h, w): (usize, usize),
    dst: &mut [f64],
    (ho, wo): (usize, usize),
) {
    if (h, w) == (ho, wo) {
        dst.copy_from_slice(src);
        return;
    }
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    for oy in 0..ho {
        let fy = ty.frac[oy];
        let top = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
        let bot = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
        for ox in 0..wo {
            let fx = tx.frac[ox];
            let (l, r) = (tx.lo[ox], tx.hi[ox]);
            let upper = (1.0 - fx) * top[l] + fx * top[r];
            let lower = (1.0 - fx) * bot[l] + fx * bot[r];
            dst[oy * wo + ox] = (1.0 - fy) * upper + fy * lower;
        }
    }
}

/// Adjoint of [`resize_plane`]: accumulates `dy` back onto the source grid.
pub(crate) fn resize_plane_adjoint(
    dy: &[f64],
    (ho, wo): (usize, usize),
    dx: &mut [f64],
    (h, w): (usize, usize),
) {
    if (h, w) == (ho, wo) {
        for (a, b) in dx.iter_mut().zip(dy) {
            *a += b;
        }
        return;
    }
    let ty = AxisTaps::new(h, ho);
    let tx = AxisTaps::new(w, wo);
    for oy in 0..ho {
        let fy = ty.frac[oy];
        for ox in 0..wo {
            let fx = tx.frac[ox];
            let g = dy[oy * wo + ox];
            let (l, r) = (tx.lo[ox], tx.hi[ox]);
            let top = ty.lo[oy] * w;
            let bot = ty.hi[oy] * w;
            dx[top + l] += (1.0 - fy) * (1.0 - fx) * g;
            dx[top + r] += (1.0 - fy) * fx * g;
            dx[bot + l] += fy * (1.0 - fx) * g;
            dx[bot + r] += fy * fx * g;
        }
    }
}
