//! Same-size 2-d convolution kernels (im2col + GEMM).

/// `c = alpha * a·b + beta * c` on strided row-major views.
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
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the kernel touches.
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

/// Unfolds one `[cin, h, w]` image into `[cin*k*k, h*w]` patch columns.
pub(crate) fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, cols: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let lo = (-dx).max(0) as usize;
                    let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    out[..lo.min(w)].fill(0.0);
                    if hi > lo {
                        let s0 = (lo as isize + dx) as usize;
                        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                    if hi < w {
                        out[hi.max(lo)..].fill(0.0);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch columns back into `dx` (accumulating).
pub(crate) fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, dx: &mut [f64]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dxo = kx as isize - pad;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let lo = (-dxo).max(0) as usize;
                    let hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                    if hi <= lo {
                        continue;
                    }
                    let s0 = (lo as isize + dxo) as usize;
                    let dst = &mut plane[sy as usize * w + s0..sy as usize * w + s0 + (hi - lo)];
                    dst.iter_mut()
                        .zip(&src[y * w + lo..y * w + hi])
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn hw(&self) -> usize {
        self.h * self.w
    }
}

/// Forward pass. Returns the output and, when `keep_cols`, the unfolded input
/// for reuse in the backward pass.
pub(crate) fn conv_forward(
    d: &ConvDims,
    x: &[f64],
    kernel: &[f64],
    bias: &[f64],
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (patch, hw) = (d.patch(), d.hw());
    let mut out = vec![0.0; d.n * d.cout * hw];
    let mut saved = if keep_cols && d.k > 1 {
        vec![0.0; d.n * patch * hw]
    } else {
        Vec::new()
    };
    let mut scratch = if d.k > 1 && !keep_cols {
        vec![0.0; patch * hw]
    } else {
        Vec::new()
    };
    for n in 0..d.n {
        let xin = &x[n * d.cin * hw..(n + 1) * d.cin * hw];
        let cols: &[f64] = if d.k == 1 {
            xin
        } else if keep_cols {
            let buf = &mut saved[n * patch * hw..(n + 1) * patch * hw];
            im2col(xin, d.cin, d.h, d.w, d.k, buf);
            buf
        } else {
            im2col(xin, d.cin, d.h, d.w, d.k, &mut scratch);
            &scratch
        };
        let o = &mut out[n * d.cout * hw..(n + 1) * d.cout * hw];
        for (co, row) in o.chunks_mut(hw).enumerate() {
            row.fill(bias[co]);
        }
        gemm(d.cout, patch, hw, kernel, (patch, 1), cols, (hw, 1), 1.0, o);
    }
    (out, saved)
}

/// Gradients for input, kernel and bias given the upstream gradient `dy`.
pub(crate) fn conv_backward(
    d: &ConvDims,
    x: &[f64],
    saved_cols: &[f64],
    kernel: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (patch, hw) = (d.patch(), d.hw());
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    let mut db = vec![0.0; d.cout];
    let mut dcols = vec![0.0; patch * hw];
    for n in 0..d.n {
        let g = &dy[n * d.cout * hw..(n + 1) * d.cout * hw];
        for (co, row) in g.chunks(hw).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        let cols: &[f64] = if d.k == 1 {
            &x[n * d.cin * hw..(n + 1) * d.cin * hw]
        } else {
            &saved_cols[n * patch * hw..(n + 1) * patch * hw]
        };
        // dK += dY · colsᵀ
        gemm(d.cout, hw, patch, g, (hw, 1), cols, (1, hw), 1.0, &mut dk);
        // dcols = Kᵀ · dY
        if d.k == 1 {
            let dxn = &mut dx[n * d.cin * hw..(n + 1) * d.cin * hw];
            gemm(patch, d.cout, hw, kernel, (1, patch), g, (hw, 1), 0.0, dxn);
        } else {
            gemm(
                patch,
                d.cout,
                hw,
                kernel,
                (1, patch),
                g,
                (hw, 1),
                0.0,
                &mut dcols,
            );
            let dxn = &mut dx[n * d.cin * hw..(n + 1) * d.cin * hw];
            col2im(&dcols, d.cin, d.h, d.w, d.k, dxn);
        }
    }
    (dx, dk, db)
}
