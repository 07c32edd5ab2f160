//! Ranks that meet a fixed parameter budget.
//!
//! The `*_budget_rank` functions return the largest raw rank whose factorized
//! parameter count does not exceed `budget`; the `*_rate_rank` wrappers set
//! the budget to the dense parameter count divided by `alpha`.

use crate::decomp::MultilinearRank2;
use crate::error::{Error, Result};

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha.is_finite() && alpha >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "compression rate must be at least 1, got {alpha}"
        )));
    }
    Ok(())
}

fn check_budget(budget: f64) -> Result<()> {
    if !(budget.is_finite() && budget >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid budget {budget}")));
    }
    Ok(())
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.iter().any(|&x| x == 0) {
        return Err(Error::InvalidParameter(format!("zero dimension in {dims:?}")));
    }
    Ok(())
}

/// Output rank paired with input rank `r` under split ratio `beta`.
pub fn tucker2_out_rank(r: usize, beta: f64) -> usize {
    ((beta * r as f64 + 1e-9).floor() as usize).max(1)
}

/// `c_in·r_in + d²·r_in·r_out + r_out·c_out` for the ranks
/// `(r, tucker2_out_rank(r, beta))`, before any clamping.
pub fn tucker2_param_count(c_in: usize, c_out: usize, d: usize, r: usize, beta: f64) -> usize {
    let r_out = tucker2_out_rank(r, beta);
    c_in * r + d * d * r * r_out + r_out * c_out
}

/// Largest `r ≥ 1` with `tucker2_param_count(.., r, beta) ≤ budget`.
pub fn tucker2_budget_rank(c_in: usize, c_out: usize, d: usize, beta: f64, budget: f64) -> Result<usize> {
    check_dims(&[c_in, c_out, d])?;
    check_budget(budget)?;
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let fits = |r: usize| tucker2_param_count(c_in, c_out, d, r, beta) as f64 <= budget;
    // positive root of β d² R² + (c_in + β c_out) R − budget
    let a = beta * (d * d) as f64;
    let b = c_in as f64 + beta * c_out as f64;
    let root = (-b + (b * b + 4.0 * a * budget).sqrt()) / (2.0 * a);
    let mut r = root.floor().max(0.0) as usize;
    while r > 0 && !fits(r) {
        r -= 1;
    }
    while fits(r + 1) {
        r += 1;
    }
    if r == 0 {
        return Err(Error::InfeasibleRank(format!(
            "no Tucker-2 rank fits {budget:.1} parameters for {c_in}->{c_out}, d={d}"
        )));
    }
    Ok(r)
}

/// Tucker-2 ranks whose parameter count is at most `d²·c_in·c_out / alpha`,
/// with `r_out ≈ beta·r_in`, clamped to the channel extents.
pub fn tucker2_rate_rank(c_in: usize, c_out: usize, d: usize, alpha: f64, beta: f64) -> Result<MultilinearRank2> {
    check_alpha(alpha)?;
    let budget = (d * d * c_in * c_out) as f64 / alpha;
    let r = tucker2_budget_rank(c_in, c_out, d, beta, budget)?;
    Ok(MultilinearRank2::new(tucker2_out_rank(r, beta).min(c_out), r.min(c_in)))
}

/// Largest CP rank with `R·(c_in + d² + c_out) ≤ budget`.
pub fn cpd3_budget_rank(c_in: usize, c_out: usize, d: usize, budget: f64) -> Result<usize> {
    check_dims(&[c_in, c_out, d])?;
    check_budget(budget)?;
    let per_rank = (c_in + d * d + c_out) as f64;
    let mut r = (budget / per_rank).floor() as usize;
    while r > 0 && r as f64 * per_rank > budget {
        r -= 1;
    }
    while (r + 1) as f64 * per_rank <= budget {
        r += 1;
    }
    if r == 0 {
        return Err(Error::InfeasibleRank(format!(
            "no CP rank fits {budget:.1} parameters for {c_in}->{c_out}, d={d}"
        )));
    }
    Ok(r)
}

/// CP rank with at most `d²·c_in·c_out / alpha` parameters.
pub fn cpd3_rate_rank(c_in: usize, c_out: usize, d: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    cpd3_budget_rank(c_in, c_out, d, (d * d * c_in * c_out) as f64 / alpha)
}

/// Largest rank with `R·(l_in + l_out) ≤ budget`.
pub fn svd_budget_rank(l_in: usize, l_out: usize, budget: f64) -> Result<usize> {
    check_dims(&[l_in, l_out])?;
    check_budget(budget)?;
    let per_rank = (l_in + l_out) as f64;
    let mut r = (budget / per_rank).floor() as usize;
    while r > 0 && r as f64 * per_rank > budget {
        r -= 1;
    }
    while (r + 1) as f64 * per_rank <= budget {
        r += 1;
    }
    if r == 0 {
        return Err(Error::InfeasibleRank(format!(
            "no SVD rank fits {budget:.1} parameters for {l_in}x{l_out}"
        )));
    }
    Ok(r)
}

/// SVD rank with at most `l_in·l_out / alpha` parameters, clamped to
/// `min(l_in, l_out)`.
pub fn svd_rate_rank(l_in: usize, l_out: usize, alpha: f64) -> Result<usize> {
    check_alpha(alpha)?;
    Ok(svd_budget_rank(l_in, l_out, (l_in * l_out) as f64 / alpha)?.min(l_in.min(l_out)))
}
