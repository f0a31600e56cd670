// Raw slice kernels shared by graph forward and backward passes.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += aᵀ · b` with `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2-D convolution over an `H×W×C` map.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn cin_g(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn cout_g(&self) -> usize {
        self.c_out / self.groups
    }

    /// Patch length per group: `kernel² · c_in/groups`.
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.cin_g()
    }
}

/// Extracts patches of group `g` into `cols[(oy·out_w + ox) × patch]`,
/// ordered `(ky, kx, ci)`. Padded taps are left at zero.
pub(crate) fn im2col(x: &[f64], geom: &ConvGeom, g: usize, cols: &mut [f64]) {
    let patch = geom.patch();
    let cin_g = geom.cin_g();
    let c0 = g * cin_g;
    cols.iter_mut().for_each(|v| *v = 0.0);
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = &mut cols[(oy * geom.out_w + ox) * patch..][..patch];
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * geom.w + ix as usize) * geom.c_in + c0;
                    let dst = (ky * geom.kernel + kx) * cin_g;
                    row[dst..dst + cin_g].copy_from_slice(&x[src..src + cin_g]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `dx`.
pub(crate) fn col2im(cols: &[f64], geom: &ConvGeom, g: usize, dx: &mut [f64]) {
    let patch = geom.patch();
    let cin_g = geom.cin_g();
    let c0 = g * cin_g;
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let row = &cols[(oy * geom.out_w + ox) * patch..][..patch];
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.h as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * geom.w + ix as usize) * geom.c_in + c0;
                    let src = (ky * geom.kernel + kx) * cin_g;
                    for c in 0..cin_g {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
}

/// Grouped convolution forward. Weights are `[c_out, k, k, c_in/groups]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, geom: &ConvGeom) -> Vec<f64> {
    let positions = geom.out_h * geom.out_w;
    let patch = geom.patch();
    let cout_g = geom.cout_g();
    let mut out = vec![0.0; positions * geom.c_out];
    let mut cols = vec![0.0; positions * patch];
    let mut part = vec![0.0; positions * cout_g];
    for g in 0..geom.groups {
        im2col(x, geom, g, &mut cols);
        // weights of this group transposed to patch × cout_g
        let wg = &w[g * cout_g * patch..(g + 1) * cout_g * patch];
        let wt = transpose(wg, cout_g, patch);
        part.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(&cols, &wt, &mut part, positions, patch, cout_g);
        for p in 0..positions {
            for co in 0..cout_g {
                let oc = g * cout_g + co;
                let mut v = part[p * cout_g + co];
                if let Some(b) = bias {
                    v += b[oc];
                }
                out[p * geom.c_out + oc] = v;
            }
        }
    }
    out
}

/// Grouped convolution backward; returns `(dx, dw, dbias)`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    geom: &ConvGeom,
    need_dx: bool,
    need_dw: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let positions = geom.out_h * geom.out_w;
    let patch = geom.patch();
    let cout_g = geom.cout_g();
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; geom.c_out];
    for p in 0..positions {
        for c in 0..geom.c_out {
            db[c] += dout[p * geom.c_out + c];
        }
    }
    let mut cols = vec![0.0; positions * patch];
    let mut dpart = vec![0.0; positions * cout_g];
    let mut dcols = vec![0.0; positions * patch];
    for g in 0..geom.groups {
        for p in 0..positions {
            dpart[p * cout_g..(p + 1) * cout_g].copy_from_slice(&dout[p * geom.c_out + g * cout_g..][..cout_g]);
        }
        if need_dw {
            im2col(x, geom, g, &mut cols);
            let dwg = &mut dw[g * cout_g * patch..(g + 1) * cout_g * patch];
            gemm_tn_acc(&dpart, &cols, dwg, cout_g, positions, patch);
        }
        if need_dx {
            let wg = &w[g * cout_g * patch..(g + 1) * cout_g * patch];
            dcols.iter_mut().for_each(|v| *v = 0.0);
            gemm_acc(&dpart, wg, &mut dcols, positions, cout_g, patch);
            col2im(&dcols, geom, g, &mut dx);
        }
    }
    (dx, dw, db)
}

/// Per-axis interpolation table for bilinear ×2 upsampling with half-pixel
/// centers: `(i0, i1, w1)` per output coordinate.
pub(crate) fn upsample_table(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let w1 = src - i0 as f64;
            (i0, i1, w1)
        })
        .collect()
}

/// Cell-center coordinate of grid index `r` on an axis of `n` cells,
/// normalised into `[-1, 1]`.
pub(crate) fn cell_center(r: usize, n: usize) -> f64 {
    (2 * r + 1) as f64 / n as f64 - 1.0
}

/// Inverse of the cell-center normalisation on an axis of `n` pixels.
pub(crate) fn denormalize(v: f64, n: usize) -> f64 {
    ((v + 1.0) * n as f64 - 1.0) / 2.0
}
