//! Global analytic solution of empirical variational Bayesian matrix
//! factorization (EVBMF), used as a rank estimator.
//!
//! For an L×M matrix (L ≤ M after an optional transpose) with singular
//! values γ_h, the only free quantity left after the analytic solution is
//! the noise variance σ². It is chosen by minimizing the EVB free energy over
//! σ² in `[lower, upper]`. The free energy is smooth between the
//! breakpoints σ² = γ_h²/(M·x̄), where a component switches between the
//! "pruned" and "retained" branches, so each such interval is searched
//! separately. The rank is the number of γ_h above `sqrt(M·σ²·x̄)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, Matrix2};

/// Constant of the EVB threshold: τ̄ = 2.5129·√α.
const TAU_BAR_COEFF: f64 = 2.5129;
const GOLDEN_ITERS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EVBMFEstimate {
    pub rank: usize,
    pub noise_variance: f64,
    /// Singular-value threshold implied by `noise_variance`.
    pub threshold: f64,
    /// Observed singular values above the threshold.
    pub retained_singular_values: Vec<f64>,
    /// Set for an all-zero input, where no noise level can be estimated.
    pub degenerate: bool,
}

/// The free-energy minimization problem for one matrix.
#[derive(Debug, Clone)]
pub struct EvbmfProblem {
    l: usize,
    m: usize,
    alpha: f64,
    x_bar: f64,
    singular_values: Vec<f64>,
    sq: Vec<f64>,
    lower: f64,
    upper: f64,
}

fn tau(x: f64, alpha: f64) -> f64 {
    let b = x - (1.0 + alpha);
    0.5 * (b + (b * b - 4.0 * alpha).max(0.0).sqrt())
}

impl EvbmfProblem {
    /// Returns `None` for an all-zero matrix.
    pub fn new(v: &Matrix2) -> Result<Option<Self>> {
        if !v.is_finite() {
            return Err(Error::NonFinite("EVBMF input"));
        }
        let (l, m) = if v.rows() <= v.cols() {
            (v.rows(), v.cols())
        } else {
            (v.cols(), v.rows())
        };
        let s = svd(v)?.s;
        if s.first().copied().unwrap_or(0.0) == 0.0 {
            return Ok(None);
        }
        let alpha = l as f64 / m as f64;
        let tau_bar = TAU_BAR_COEFF * alpha.sqrt();
        let x_bar = (1.0 + tau_bar) * (1.0 + alpha / tau_bar);
        let sq: Vec<f64> = s.iter().map(|x| x * x).collect();
        let (lf, mf) = (l as f64, m as f64);

        // Upper bound: all energy is noise. Lower bound: the components past
        // the largest admissible rank are pure noise.
        let upper = sq.iter().sum::<f64>() / (lf * mf);
        let max_rank = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(l);
        let tail = &sq[max_rank.min(l - 1)..];
        let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
        let first_noise = sq[max_rank.min(l - 1)];
        let mut lower = (first_noise / (mf * x_bar)).max(tail_mean / mf);
        lower = lower.max(upper * 1e-12).min(upper);

        Ok(Some(Self {
            l,
            m,
            alpha,
            x_bar,
            singular_values: s,
            sq,
            lower,
            upper,
        }))
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    /// EVB free energy as a function of σ², up to terms independent of σ².
    pub fn free_energy(&self, sigma2: f64) -> f64 {
        let mf = self.m as f64;
        let log_scale = (mf * sigma2).ln();
        let mut total = 0.0;
        for &g2 in &self.sq {
            let x = g2 / (mf * sigma2);
            total += log_scale;
            if x > self.x_bar {
                let t = tau(x, self.alpha);
                total += x - t + (t + 1.0).ln() + self.alpha * (t / self.alpha + 1.0).ln();
            } else {
                total += x;
            }
        }
        total
    }

    pub fn threshold(&self, sigma2: f64) -> f64 {
        (self.m as f64 * sigma2 * self.x_bar).sqrt()
    }

    pub fn rank_at(&self, sigma2: f64) -> usize {
        let th = self.threshold(sigma2);
        self.singular_values.iter().filter(|&&s| s > th).count()
    }

    /// Noise variance minimizing the free energy: golden-section search in
    /// log σ² on every interval between consecutive breakpoints.
    pub fn minimize(&self) -> f64 {
        let mf = self.m as f64;
        let (lo, hi) = (self.lower.ln(), self.upper.ln());
        let mut cuts = vec![lo, hi];
        for &g2 in &self.sq {
            let b = (g2 / (mf * self.x_bar)).ln();
            if b > lo && b < hi {
                cuts.push(b);
            }
        }
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();

        let energy = |u: f64| self.free_energy(u.exp());
        let mut best_u = lo;
        let mut best_f = energy(lo);
        for w in cuts.windows(2) {
            let (u, f) = golden_section(&energy, w[0], w[1]);
            if f < best_f {
                best_f = f;
                best_u = u;
            }
        }
        let f_hi = energy(hi);
        if f_hi < best_f {
            best_u = hi;
        }
        best_u.exp()
    }

    fn estimate_at(&self, sigma2: f64) -> EVBMFEstimate {
        let threshold = self.threshold(sigma2);
        let retained: Vec<f64> = self
            .singular_values
            .iter()
            .copied()
            .filter(|&s| s > threshold)
            .collect();
        EVBMFEstimate {
            rank: retained.len(),
            noise_variance: sigma2,
            threshold,
            retained_singular_values: retained,
            degenerate: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.l, self.m)
    }
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERS {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    // include the interval ends: the minimum may sit on a breakpoint
    [(a, f(a)), (c, fc), (d, fd), (b, f(b))]
        .into_iter()
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty")
}

/// EVBMF rank estimate with the noise variance learned from the data.
pub fn evbmf_rank(v: &Matrix2) -> Result<EVBMFEstimate> {
    match EvbmfProblem::new(v)? {
        None => Ok(EVBMFEstimate {
            rank: 0,
            noise_variance: 0.0,
            threshold: 0.0,
            retained_singular_values: Vec::new(),
            degenerate: true,
        }),
        Some(p) => {
            let sigma2 = p.minimize();
            Ok(p.estimate_at(sigma2))
        }
    }
}
