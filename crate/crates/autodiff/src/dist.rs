//! Beta and categorical helpers for policy heads.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use ndarray::Array2;

use crate::error::{DiffError, Result};
use crate::special::{digamma, lgamma};
use crate::tape::Var;

/// Lower/upper clamp applied to Beta support points and samples.
pub const BETA_EDGE: f64 = 1e-6;

/// `(α−1) ln x + (β−1) ln(1−x) + lnΓ(α+β) − lnΓ(α) − lnΓ(β)`.
///
/// Operands broadcast, so an `(n, 1)` column of parameters against a
/// `(1, k)` row of support points yields an `(n, k)` table.
pub fn beta_log_density<'t>(x: Var<'t>, alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let ln_x = x.log()?;
    let ln_1mx = x.neg()?.add_scalar(1.0)?.log()?;
    let norm = alpha
        .add(beta)?
        .lgamma()?
        .sub(alpha.lgamma()?)?
        .sub(beta.lgamma()?)?;
    alpha
        .add_scalar(-1.0)?
        .mul(ln_x)?
        .add(beta.add_scalar(-1.0)?.mul(ln_1mx)?)?
        .add(norm)
}

/// [`beta_log_density`] of `(n, 1)` parameter columns at fixed support
/// points, as one fused `(n, k)` node. Gradients flow to `α` and `β` only.
pub fn beta_log_density_grid<'t>(points: &[f64], alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let (a, b) = (alpha.value(), beta.value());
    if a.ncols() != 1 || b.dim() != a.dim() {
        return Err(DiffError::Shape {
            op: "beta_log_density_grid",
            lhs: a.dim(),
            rhs: b.dim(),
        });
    }
    let ln_x: Vec<f64> = points.iter().map(|x| x.ln()).collect();
    let ln_1mx: Vec<f64> = points.iter().map(|x| (1.0 - x).ln()).collect();
    let n = a.nrows();
    let mut out = Array2::zeros((n, points.len()));
    for i in 0..n {
        let (ai, bi) = (a[[i, 0]], b[[i, 0]]);
        let norm = lgamma(ai + bi) - lgamma(ai) - lgamma(bi);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = (ai - 1.0) * ln_x[k] + (bi - 1.0) * ln_1mx[k] + norm;
        }
    }
    let tape = alpha.tape();
    tape.push(
        "beta_log_density_grid",
        &[alpha, beta],
        out,
        Box::new(move |g, p, _| {
            let (a, b) = (p[0], p[1]);
            let mut da = Array2::zeros((a.nrows(), 1));
            let mut db = Array2::zeros((a.nrows(), 1));
            for i in 0..a.nrows() {
                let (ai, bi) = (a[[i, 0]], b[[i, 0]]);
                let psi_sum = digamma(ai + bi);
                let (mut sa, mut sb, mut sg) = (0.0, 0.0, 0.0);
                for (k, gk) in g.row(i).iter().enumerate() {
                    sa += gk * ln_x[k];
                    sb += gk * ln_1mx[k];
                    sg += gk;
                }
                da[[i, 0]] = sa + sg * (psi_sum - digamma(ai));
                db[[i, 0]] = sb + sg * (psi_sum - digamma(bi));
            }
            vec![Some(da), Some(db)]
        }),
    )
}

pub fn beta_log_density_f64(x: f64, alpha: f64, beta: f64) -> f64 {
    (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() + lgamma(alpha + beta)
        - lgamma(alpha)
        - lgamma(beta)
}

/// Differential entropy of Beta(α, β).
pub fn beta_entropy<'t>(alpha: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let sum = alpha.add(beta)?;
    let ln_b = alpha.lgamma()?.add(beta.lgamma()?)?.sub(sum.lgamma()?)?;
    let ta = alpha.add_scalar(-1.0)?.mul(alpha.digamma()?)?;
    let tb = beta.add_scalar(-1.0)?.mul(beta.digamma()?)?;
    let ts = sum.add_scalar(-2.0)?.mul(sum.digamma()?)?;
    ln_b.sub(ta)?.sub(tb)?.add(ts)
}

pub fn beta_entropy_f64(alpha: f64, beta: f64) -> f64 {
    let ln_b = lgamma(alpha) + lgamma(beta) - lgamma(alpha + beta);
    ln_b - (alpha - 1.0) * digamma(alpha) - (beta - 1.0) * digamma(beta)
        + (alpha + beta - 2.0) * digamma(alpha + beta)
}

/// Draws from Beta(α, β), clamped to `[BETA_EDGE, 1 − BETA_EDGE]`.
pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, alpha: f64, beta: f64) -> f64 {
    let d = Beta::new(alpha, beta).expect("Beta parameters must be positive and finite");
    d.sample(rng).clamp(BETA_EDGE, 1.0 - BETA_EDGE)
}

/// Row-wise entropy `−Σ p ln p` from row-wise log-probabilities, `(n, 1)`.
pub fn categorical_entropy<'t>(log_probs: Var<'t>) -> Result<Var<'t>> {
    log_probs.exp()?.mul(log_probs)?.sum_cols()?.neg()
}

/// Inverse-CDF draw from a probability row. Trailing round-off falls on the
/// last positive entry.
pub fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}
