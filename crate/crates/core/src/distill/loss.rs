//! Attention losses and the combined distillation objective.

use super::cka::{cka_var, cka_with, CkaDenominator};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Weight of the attention term.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 1.5 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::config(format!(
                "lambda must be a finite value ≥ 0, got {lambda}"
            )));
        }
        Ok(LossWeights { lambda })
    }
}

/// `inter + intra + λ·att`.
pub fn total_loss(inter: f64, intra: f64, att: f64, w: LossWeights) -> f64 {
    inter + intra + w.lambda * att
}

/// How teacher and student attention maps are compared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionLossKind {
    /// `1 − CKA`
    #[default]
    Cka,
    /// Row-wise `KL(teacher ‖ student)` averaged over queries.
    Kl,
}

impl std::str::FromStr for AttentionLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cka" => Ok(AttentionLossKind::Cka),
            "kl" => Ok(AttentionLossKind::Kl),
            other => Err(Error::config(format!("unknown attention loss `{other}`"))),
        }
    }
}

impl std::fmt::Display for AttentionLossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionLossKind::Cka => "cka",
            AttentionLossKind::Kl => "kl",
        })
    }
}

/// A teacher/student feature pair; only `active` pairs contribute.
#[derive(Clone, Debug)]
pub struct DistillPair {
    pub teacher: Tensor,
    pub student: Tensor,
    pub active: bool,
}

/// `Σ (1 − CKA)` over active pairs.
pub fn attention_loss(pairs: &[DistillPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut any = false;
    for p in pairs.iter().filter(|p| p.active) {
        any = true;
        total += 1.0 - cka_with(&p.teacher, &p.student, CkaDenominator::Standard)?;
    }
    if !any {
        return Err(Error::contract("attention loss needs at least one active pair"));
    }
    Ok(total)
}

/// Floor applied to student probabilities inside the KL logarithm.
const KL_FLOOR: f64 = 1e-12;

/// Mean over rows of `KL(teacher_row ‖ student_row)` for row-stochastic maps.
pub fn kl_attention(teacher: &Tensor, student: &Tensor) -> Result<f64> {
    if teacher.shape() != student.shape() || teacher.rank() != 2 {
        return Err(Error::shape("kl attention", teacher.shape(), student.shape()));
    }
    let rows = teacher.shape()[0] as f64;
    let mut acc = 0.0;
    for (&t, &s) in teacher.data().iter().zip(student.data()) {
        if t > 0.0 {
            acc += t * (t.ln() - (s + KL_FLOOR).ln());
        }
    }
    Ok(acc / rows)
}

/// Differentiable attention loss for one pair; `teacher` is a constant.
pub fn attention_loss_var(
    g: &mut Graph,
    teacher: Var,
    student: Var,
    kind: AttentionLossKind,
    denom: CkaDenominator,
) -> Result<Var> {
    match kind {
        AttentionLossKind::Cka => {
            let c = cka_var(g, teacher, student, denom)?;
            let neg = g.scale(c, -1.0);
            Ok(g.add_scalar(neg, 1.0))
        }
        AttentionLossKind::Kl => {
            if g.shape(teacher) != g.shape(student) || g.shape(teacher).len() != 2 {
                return Err(Error::shape("kl attention", g.shape(teacher), g.shape(student)));
            }
            let rows = g.shape(teacher)[0] as f64;
            let tv = g.value(teacher).clone();
            let entropy_part: f64 = tv.data().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
            let floored = g.add_scalar(student, KL_FLOOR);
            let log_s = g.log(floored);
            let cross = g.mul(teacher, log_s)?;
            let cross = g.sum(cross);
            let neg = g.scale(cross, -1.0 / rows);
            Ok(g.add_scalar(neg, entropy_part / rows))
        }
    }
}
