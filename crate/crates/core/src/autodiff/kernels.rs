//! Raw numeric kernels behind the tape operators. Everything here works on
//! flat row-major slices; shapes are validated by the caller.

/// `c = a · b + beta · c` for row-major-or-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every index the kernel touches; the
    // output is a dense m×n row-major block inside `c`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[cin, h, w]` into `[cin·kh·kw, ho·wo]`.
fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let opx = g.out_px();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
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

/// Adjoint of [`im2col`]: scatters-adds columns back into `[cin, h, w]`.
fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let opx = g.out_px();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * opx..(row + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * opx;
    let mut out = vec![0.0; g.n * out_len];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; patch * opx]
    };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ys = &mut out[s * out_len..(s + 1) * out_len];
        let cols: &[f64] = if g.is_pointwise() {
            xs
        } else {
            im2col(xs, g, &mut col);
            &col
        };
        gemm(g.cout, patch, opx, w, (patch, 1), cols, (opx, 1), 0.0, ys);
        if let Some(b) = b {
            for (co, bias) in b.iter().enumerate() {
                ys[co * opx..(co + 1) * opx].iter_mut().for_each(|v| *v += bias);
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients for a convolution.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (patch, opx) = (g.patch(), g.out_px());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * opx;
    let mut col = vec![0.0; if g.is_pointwise() { 0 } else { patch * opx }];
    let mut dcol = vec![0.0; if dx.is_some() { patch * opx } else { 0 }];
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let dys = &dy[s * out_len..(s + 1) * out_len];
        if let Some(db) = db.as_deref_mut() {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dys[co * opx..(co + 1) * opx].iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                xs
            } else {
                im2col(xs, g, &mut col);
                &col
            };
            // dW[cout, patch] += dY[cout, opx] · colᵀ[opx, patch]
            gemm(g.cout, opx, patch, dys, (opx, 1), cols, (1, opx), 1.0, dw);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(patch, g.cout, opx, w, (1, patch), dys, (opx, 1), 1.0, dxs);
            } else {
                // dcol[patch, opx] = Wᵀ[patch, cout] · dY[cout, opx]
                gemm(patch, g.cout, opx, w, (1, patch), dys, (opx, 1), 0.0, &mut dcol);
                col2im(&dcol, g, dxs);
            }
        }
    }
}
