//! Automatic rank selection.
//!
//! Two strategies are supported. The Bayesian one estimates an "extreme"
//! rank with EVBMF and moves from the current rank towards it by a weakening
//! factor `w`. The constant-rate one picks the largest ranks whose factorized
//! parameter count stays within the current count divided by `alpha`.

mod evbmf;
mod rate;

use serde::{Deserialize, Serialize};

use crate::decomp::{orthonormalize, CPFactors, Ranks, SVDFactors, Scheme, Tucker2Factors};
use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, qr, Matrix2};
use crate::tensor::{reshape_kernel, unfold, Kernel4};

pub use evbmf::{evbmf_rank, EVBMFEstimate, EvbmfProblem};
pub use rate::{
    cpd3_budget_rank, cpd3_rate_rank, svd_budget_rank, svd_rate_rank, tucker2_budget_rank,
    tucker2_out_rank, tucker2_param_count, tucker2_rate_rank,
};

pub const DEFAULT_MIN_RANK_GUARD: usize = 21;

fn default_guard() -> usize {
    DEFAULT_MIN_RANK_GUARD
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RankMode {
    Bayesian {
        weakening_factor: f64,
    },
    ConstantRate {
        alpha: f64,
        #[serde(default = "default_beta")]
        beta: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankStrategy {
    #[serde(flatten)]
    pub mode: RankMode,
    #[serde(default = "default_guard")]
    pub min_rank_guard: usize,
}

impl RankStrategy {
    pub fn bayesian(weakening_factor: f64) -> Result<Self> {
        let s = Self {
            mode: RankMode::Bayesian { weakening_factor },
            min_rank_guard: DEFAULT_MIN_RANK_GUARD,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant_rate(alpha: f64, beta: f64) -> Result<Self> {
        let s = Self {
            mode: RankMode::ConstantRate { alpha, beta },
            min_rank_guard: DEFAULT_MIN_RANK_GUARD,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_guard(mut self, min_rank_guard: usize) -> Result<Self> {
        self.min_rank_guard = min_rank_guard;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            RankMode::Bayesian { weakening_factor: w } => {
                if !(w > 0.0 && w < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "weakening factor must lie in (0, 1), got {w}"
                    )));
                }
            }
            RankMode::ConstantRate { alpha, beta } => {
                if !(alpha.is_finite() && alpha > 1.0) {
                    return Err(Error::InvalidParameter(format!("alpha must exceed 1, got {alpha}")));
                }
                if !(beta.is_finite() && beta > 0.0) {
                    return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
                }
            }
        }
        if self.min_rank_guard == 0 {
            return Err(Error::InvalidParameter("min_rank_guard must be at least 1".into()));
        }
        Ok(())
    }
}

impl std::fmt::Display for RankStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.mode {
            RankMode::Bayesian { weakening_factor } => write!(f, "bayesian(w={weakening_factor})"),
            RankMode::ConstantRate { alpha, beta } => write!(f, "constant_rate(alpha={alpha}, beta={beta})"),
        }
    }
}

/// `floor(r_init − w·(r_init − r_extr))`, clamped to `[r_extr, r_init]`.
pub fn weakened_rank(r_init: usize, r_extr: usize, w: f64) -> Result<usize> {
    if r_extr > r_init {
        return Err(Error::InvalidParameter(format!(
            "extreme rank {r_extr} exceeds initial rank {r_init}"
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidParameter(format!("weakening factor {w} outside [0, 1]")));
    }
    let v = r_init as f64 - w * (r_init - r_extr) as f64;
    // the epsilon keeps exact products such as 256 - 0.8*216 from flooring down
    Ok(((v + 1e-9).floor() as usize).clamp(r_extr, r_init))
}

/// What rank selection sees of one layer.
#[derive(Debug, Clone, Copy)]
pub enum LayerState<'a> {
    /// Undecomposed conv layer, to be factorized with `scheme`.
    Conv { kernel: &'a Kernel4, scheme: Scheme },
    /// Undecomposed fc layer with an l_in×l_out weight.
    Fc { weight: &'a Matrix2 },
    Tucker2(&'a Tucker2Factors),
    Cp(&'a CPFactors),
    Svd(&'a SVDFactors),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// The governing rank is below the minimum-rank guard.
    BelowGuard,
    /// No rank meets the parameter budget.
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "proposal", rename_all = "snake_case")]
pub enum RankProposal {
    Skip { reason: SkipReason },
    Propose { ranks: Ranks },
}

impl<'a> LayerState<'a> {
    /// Rank compared against the minimum-rank guard.
    pub fn governing_rank(&self) -> usize {
        match *self {
            LayerState::Conv { kernel, .. } => kernel.c_in().min(kernel.c_out()),
            LayerState::Fc { weight } => weight.rows().min(weight.cols()),
            LayerState::Tucker2(f) => f.rank().r_in.min(f.rank().r_out),
            LayerState::Cp(f) => f.cp_rank(),
            LayerState::Svd(f) => f.rank(),
        }
    }

    /// Ranks a proposal may not exceed: the current ranks for factorized
    /// layers, the full ranks for dense ones.
    fn rank_cap(&self) -> Ranks {
        match *self {
            LayerState::Conv { kernel, scheme: Scheme::Cpd3 } => Ranks::Cpd3 {
                rank: cp_initial_rank(kernel),
            },
            LayerState::Conv { kernel, .. } => Ranks::Tucker2 {
                r_out: kernel.c_out(),
                r_in: kernel.c_in(),
            },
            LayerState::Fc { weight } => Ranks::Svd {
                rank: weight.rows().min(weight.cols()),
            },
            LayerState::Tucker2(f) => Ranks::tucker2(f.rank()),
            LayerState::Cp(f) => Ranks::Cpd3 { rank: f.cp_rank() },
            LayerState::Svd(f) => Ranks::Svd { rank: f.rank() },
        }
    }
}

/// Largest possible rank of either channel unfolding of the reshaped kernel.
fn cp_initial_rank(k: &Kernel4) -> usize {
    let s = k.d() * k.d();
    (k.c_out().min(s * k.c_in())).max(k.c_in().min(s * k.c_out()))
}

fn clamp_to(ranks: Ranks, cap: Ranks) -> Ranks {
    match (ranks, cap) {
        (Ranks::Tucker2 { r_out, r_in }, Ranks::Tucker2 { r_out: co, r_in: ci }) => Ranks::Tucker2 {
            r_out: r_out.clamp(1, co),
            r_in: r_in.clamp(1, ci),
        },
        (Ranks::Cpd3 { rank }, Ranks::Cpd3 { rank: c }) => Ranks::Cpd3 { rank: rank.clamp(1, c) },
        (Ranks::Svd { rank }, Ranks::Svd { rank: c }) => Ranks::Svd { rank: rank.clamp(1, c) },
        (r, _) => r,
    }
}

/// Proposes new ranks for one layer, or decides to leave it alone.
///
/// Proposed ranks are at least 1 and never exceed the current ranks.
pub fn select_ranks(state: LayerState<'_>, strategy: &RankStrategy) -> Result<RankProposal> {
    strategy.validate()?;
    if let LayerState::Conv { scheme: Scheme::Svd, .. } = state {
        return Err(Error::UnsupportedLayer("conv layers take tucker2 or cpd3".into()));
    }
    if state.governing_rank() < strategy.min_rank_guard {
        return Ok(RankProposal::Skip {
            reason: SkipReason::BelowGuard,
        });
    }
    let raw = match strategy.mode {
        RankMode::Bayesian { weakening_factor } => bayesian_ranks(state, weakening_factor)?,
        RankMode::ConstantRate { alpha, beta } => match rate_ranks(state, alpha, beta) {
            Ok(r) => r,
            Err(Error::InfeasibleRank(_)) => {
                return Ok(RankProposal::Skip {
                    reason: SkipReason::Infeasible,
                })
            }
            Err(e) => return Err(e),
        },
    };
    Ok(RankProposal::Propose {
        ranks: clamp_to(raw, state.rank_cap()),
    })
}

fn extreme(m: &Matrix2) -> Result<usize> {
    Ok(evbmf_rank(m)?.rank)
}

fn bayesian_ranks(state: LayerState<'_>, w: f64) -> Result<Ranks> {
    let cap = state.rank_cap();
    match state {
        LayerState::Conv { kernel, scheme: Scheme::Tucker2 } => {
            let t = kernel.tensor();
            let e_out = extreme(&unfold(t, 2)?)?;
            let e_in = extreme(&unfold(t, 3)?)?;
            Ok(Ranks::Tucker2 {
                r_out: weakened_rank(kernel.c_out(), e_out.min(kernel.c_out()), w)?,
                r_in: weakened_rank(kernel.c_in(), e_in.min(kernel.c_in()), w)?,
            })
        }
        LayerState::Tucker2(f) => {
            let base = orthonormalize(f)?;
            let cur = f.rank();
            let e_out = extreme(&unfold(&base.core, 2)?)?;
            let e_in = extreme(&unfold(&base.core, 3)?)?;
            Ok(Ranks::Tucker2 {
                r_out: weakened_rank(cur.r_out, e_out.min(cur.r_out), w)?,
                r_in: weakened_rank(cur.r_in, e_in.min(cur.r_in), w)?,
            })
        }
        LayerState::Conv { kernel, .. } => {
            let k3 = reshape_kernel(kernel);
            let e_out = extreme(&unfold(k3.tensor(), 1)?)?;
            let e_in = extreme(&unfold(k3.tensor(), 2)?)?;
            let init = cap.min_rank();
            Ok(Ranks::Cpd3 {
                rank: weakened_rank(init, e_out.max(e_in).min(init), w)?,
            })
        }
        LayerState::Cp(f) => {
            // The channel unfoldings equal factor·KRᵀ; with KR = QR they share
            // their singular values with the small matrices factor·Rᵀ.
            let reduced = |factor: &Matrix2, kr: Matrix2| -> Result<Matrix2> {
                let (_, r) = qr(&kr);
                factor.matmul_t(&r)
            };
            let m_out = reduced(&f.factor_out, khatri_rao(&f.factor_spatial, &f.factor_in)?)?;
            let m_in = reduced(&f.factor_in, khatri_rao(&f.factor_spatial, &f.factor_out)?)?;
            let e = extreme(&m_out)?.max(extreme(&m_in)?);
            let cur = f.cp_rank();
            Ok(Ranks::Cpd3 {
                rank: weakened_rank(cur, e.min(cur), w)?,
            })
        }
        LayerState::Fc { weight } => {
            let init = cap.min_rank();
            Ok(Ranks::Svd {
                rank: weakened_rank(init, extreme(weight)?.min(init), w)?,
            })
        }
        LayerState::Svd(f) => {
            let (_, r_in) = qr(&f.theta_in);
            let (_, r_out) = qr(&f.theta_out.transpose());
            let cur = f.rank();
            let e = extreme(&r_in.matmul_t(&r_out)?)?;
            Ok(Ranks::Svd {
                rank: weakened_rank(cur, e.min(cur), w)?,
            })
        }
    }
}

fn rate_ranks(state: LayerState<'_>, alpha: f64, beta: f64) -> Result<Ranks> {
    match state {
        LayerState::Conv { kernel, scheme: Scheme::Tucker2 } => {
            let r = tucker2_rate_rank(kernel.c_in(), kernel.c_out(), kernel.d(), alpha, beta)?;
            Ok(Ranks::tucker2(r))
        }
        LayerState::Conv { kernel, .. } => Ok(Ranks::Cpd3 {
            rank: cpd3_rate_rank(kernel.c_in(), kernel.c_out(), kernel.d(), alpha)?,
        }),
        LayerState::Fc { weight } => Ok(Ranks::Svd {
            rank: svd_rate_rank(weight.rows(), weight.cols(), alpha)?,
        }),
        LayerState::Tucker2(f) => {
            let budget = f.param_count() as f64 / alpha;
            let r = tucker2_budget_rank(f.c_in(), f.c_out(), f.d(), beta, budget)?;
            Ok(Ranks::Tucker2 {
                r_out: tucker2_out_rank(r, beta),
                r_in: r,
            })
        }
        LayerState::Cp(f) => Ok(Ranks::Cpd3 {
            rank: cpd3_budget_rank(f.c_in(), f.c_out(), f.d(), f.param_count() as f64 / alpha)?,
        }),
        LayerState::Svd(f) => Ok(Ranks::Svd {
            rank: svd_budget_rank(f.l_in(), f.l_out(), f.param_count() as f64 / alpha)?,
        }),
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::decomp::{tucker2_decompose, MultilinearRank2};
    use crate::testutil::{randn, randn_tensor};
    use proptest::prelude::*;

    fn strategy(bayes: bool, knob: f64) -> RankStrategy {
        let s = if bayes {
            RankStrategy::bayesian(0.05 + 0.9 * knob)
        } else {
            RankStrategy::constant_rate(1.0 + 9.0 * knob, 1.0)
        };
        s.unwrap().with_guard(1).unwrap()
    }

    fn never_above_cap(state: LayerState<'_>, s: &RankStrategy) -> bool {
        match select_ranks(state, s) {
            Ok(RankProposal::Propose { ranks }) => ranks.le(&state.rank_cap()),
            Ok(RankProposal::Skip { .. }) | Err(Error::InfeasibleRank(_)) => true,
            Err(_) => false,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn proposals_never_exceed_current_ranks(
            c_out in 2usize..12,
            c_in in 2usize..12,
            bayes in any::<bool>(),
            knob in 0.0f64..1.0,
            seed in any::<u64>(),
        ) {
            let s = strategy(bayes, knob);
            let k = Kernel4::new(randn_tensor(vec![3, 3, c_out, c_in], seed)).unwrap();
            let f = tucker2_decompose(&k, MultilinearRank2::new(c_out.min(5), c_in.min(4))).unwrap();
            let w = randn(c_in * 3, c_out, seed ^ 1);
            let states = [
                LayerState::Conv { kernel: &k, scheme: Scheme::Tucker2 },
                LayerState::Conv { kernel: &k, scheme: Scheme::Cpd3 },
                LayerState::Tucker2(&f),
                LayerState::Fc { weight: &w },
            ];
            for state in states {
                prop_assert!(never_above_cap(state, &s), "{:?}", state);
            }
        }

        #[test]
        fn evbmf_is_transpose_and_scale_invariant(
            rows in 4usize..30,
            cols in 4usize..30,
            scale in 1e-3f64..1e3,
            seed in any::<u64>(),
        ) {
            let m = randn(rows, cols, seed);
            let r = evbmf_rank(&m).unwrap().rank;
            prop_assert_eq!(evbmf_rank(&m.transpose()).unwrap().rank, r);
            let scaled = Matrix2::from_fn(rows, cols, |i, j| scale * m.get(i, j));
            prop_assert_eq!(evbmf_rank(&scaled).unwrap().rank, r);
        }
    }
}
