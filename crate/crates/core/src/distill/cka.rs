//! Linear-kernel Gram matrices, HSIC and centered kernel alignment.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Which denominator CKA uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CkaDenominator {
    /// `sqrt(HSIC(G_t, G_t) · HSIC(G_s, G_s))`
    #[default]
    Standard,
    /// `sqrt(HSIC(G_t, G_s) · HSIC(G_t, G_s))`, which reduces CKA to a sign.
    /// Kept only for comparison.
    CrossOnly,
}

impl std::str::FromStr for CkaDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(CkaDenominator::Standard),
            "cross" => Ok(CkaDenominator::CrossOnly),
            other => Err(Error::config(format!("unknown CKA denominator `{other}`"))),
        }
    }
}

impl std::fmt::Display for CkaDenominator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CkaDenominator::Standard => "standard",
            CkaDenominator::CrossOnly => "cross",
        })
    }
}

fn dims(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[n, c] => Ok((n, c)),
        other => Err(Error::shape(what, other, &[0, 0])),
    }
}

/// `F·Fᵀ` for an `n×c` feature matrix, `n ≥ 2`.
pub fn gram(f: &Tensor) -> Result<Tensor> {
    let (n, c) = dims(f, "gram")?;
    if n < 2 {
        return Err(Error::contract(format!("gram needs at least 2 rows, got {n}")));
    }
    let d = f.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v: f64 = (0..c).map(|k| d[i * c + k] * d[j * c + k]).sum();
            out[i * n + j] = v;
            out[j * n + i] = v;
        }
    }
    Tensor::new(vec![n, n], out)
}

/// `C·G·C` with `C = I − 11ᵀ/n`.
fn double_center(g: &Tensor) -> Tensor {
    let n = g.shape()[0];
    let d = g.data();
    let row: Vec<f64> = (0..n)
        .map(|i| d[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64)
        .collect();
    let col: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| d[i * n + j]).sum::<f64>() / n as f64)
        .collect();
    let all = row.iter().sum::<f64>() / n as f64;
    Tensor::from_fn(&[n, n], |k| d[k] - row[k / n] - col[k % n] + all)
}

/// `tr(G_a·C·G_b·C) / (n−1)²`.
pub fn hsic(ga: &Tensor, gb: &Tensor) -> Result<f64> {
    let (n, m) = dims(ga, "hsic")?;
    if n != m || ga.shape() != gb.shape() {
        return Err(Error::shape("hsic", ga.shape(), gb.shape()));
    }
    if n < 2 {
        return Err(Error::contract("hsic needs n ≥ 2"));
    }
    let ca = double_center(ga);
    // tr(C·Ga·C·Gb) = Σ (C·Ga·C) ⊙ Gbᵀ
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += ca.data()[i * n + j] * gb.data()[j * n + i];
        }
    }
    Ok(acc / ((n - 1) * (n - 1)) as f64)
}

/// Linear CKA between two feature matrices with equal row counts.
pub fn cka(ft: &Tensor, fs: &Tensor) -> Result<f64> {
    cka_with(ft, fs, CkaDenominator::Standard)
}

pub fn cka_with(ft: &Tensor, fs: &Tensor, denom: CkaDenominator) -> Result<f64> {
    let (nt, _) = dims(ft, "cka teacher")?;
    let (ns, _) = dims(fs, "cka student")?;
    if nt != ns {
        return Err(Error::shape("cka token counts", ft.shape(), fs.shape()));
    }
    let (gt, gs) = (gram(ft)?, gram(fs)?);
    let cross = hsic(&gt, &gs)?;
    let den = match denom {
        CkaDenominator::Standard => (hsic(&gt, &gt)? * hsic(&gs, &gs)?).sqrt(),
        CkaDenominator::CrossOnly => (cross * cross).sqrt(),
    };
    if !(den > 0.0) || !den.is_finite() {
        return Err(Error::Degenerate(
            "CKA denominator is zero (constant feature map)".into(),
        ));
    }
    Ok(cross / den)
}

/// `HSIC` of a constant Gram matrix with a graph Gram matrix.
fn hsic_var(g: &mut Graph, centered_a: Var, gb: Var, n: usize) -> Result<Var> {
    let prod = g.mul(centered_a, gb)?;
    let s = g.sum(prod);
    Ok(g.scale(s, 1.0 / ((n - 1) * (n - 1)) as f64))
}

/// Differentiable CKA. `ft` is typically a constant (teacher) and `fs` a
/// student variable; gradients flow to whichever requires them.
pub fn cka_var(g: &mut Graph, ft: Var, fs: Var, denom: CkaDenominator) -> Result<Var> {
    let (nt, ns) = (g.shape(ft)[0], g.shape(fs)[0]);
    if g.shape(ft).len() != 2 || g.shape(fs).len() != 2 || nt != ns {
        return Err(Error::shape("cka", g.shape(ft), g.shape(fs)));
    }
    let n = nt;
    if n < 2 {
        return Err(Error::contract("cka needs n ≥ 2"));
    }
    let ftt = g.transpose(ft)?;
    let gt = g.matmul(ft, ftt)?;
    let fst = g.transpose(fs)?;
    let gs = g.matmul(fs, fst)?;
    let ct = g.double_center(gt)?;
    let cross = hsic_var(g, ct, gs, n)?;
    let den_sq = match denom {
        CkaDenominator::Standard => {
            let cs = g.double_center(gs)?;
            let tt = hsic_var(g, ct, gt, n)?;
            let ss = hsic_var(g, cs, gs, n)?;
            g.mul(tt, ss)?
        }
        CkaDenominator::CrossOnly => g.mul(cross, cross)?,
    };
    if !(g.scalar(den_sq) > 0.0) || !g.scalar(den_sq).is_finite() {
        return Err(Error::Degenerate(
            "CKA denominator is zero (constant feature map)".into(),
        ));
    }
    let den = g.sqrt(den_sq);
    g.div(cross, den)
}
