use crate::error::{Error, Result};
use crate::linalg::{leading_left_vectors, qr};
use crate::tensor::{mode_product, unfold, DenseTensor, Kernel4};

use super::{MultilinearRank2, Tucker2Factors};

const OUT_MODE: usize = 2;
const IN_MODE: usize = 3;
const HOOI_MAX_SWEEPS: usize = 10;
const HOOI_TOL: f64 = 1e-8;

fn check_rank(rank: MultilinearRank2, c_out: usize, c_in: usize) -> Result<()> {
    if rank.r_out == 0 || rank.r_out > c_out {
        return Err(Error::RankOutOfRange {
            rank: rank.r_out,
            max: c_out,
        });
    }
    if rank.r_in == 0 || rank.r_in > c_in {
        return Err(Error::RankOutOfRange {
            rank: rank.r_in,
            max: c_in,
        });
    }
    Ok(())
}

fn rel_err_from_core(norm_sq: f64, core: &DenseTensor) -> f64 {
    if norm_sq == 0.0 {
        return 0.0;
    }
    ((norm_sq - core.norm_sq()).max(0.0) / norm_sq).sqrt()
}

/// Tucker-2 approximation of a conv kernel at the given channel ranks.
///
/// Factors start from the truncated SVDs of the two channel unfoldings
/// (HOSVD) and are refined by up to 10 HOOI sweeps, stopping early once the
/// relative error moves by less than 1e-8. Factor columns are orthonormal.
pub fn tucker2_decompose(k: &Kernel4, rank: MultilinearRank2) -> Result<Tucker2Factors> {
    check_rank(rank, k.c_out(), k.c_in())?;
    let t = k.tensor();
    if !t.is_finite() {
        return Err(Error::NonFinite("Tucker-2 input kernel"));
    }
    let norm_sq = t.norm_sq();
    let mut u_out = leading_left_vectors(&unfold(t, OUT_MODE)?, rank.r_out)?;
    let mut u_in = leading_left_vectors(&unfold(t, IN_MODE)?, rank.r_in)?;
    let partial = mode_product(t, &u_out.transpose(), OUT_MODE)?;
    let mut core = mode_product(&partial, &u_in.transpose(), IN_MODE)?;

    let full = rank.r_out == k.c_out() && rank.r_in == k.c_in();
    if !full {
        let mut err = rel_err_from_core(norm_sq, &core);
        for _ in 0..HOOI_MAX_SWEEPS {
            let y = mode_product(t, &u_in.transpose(), IN_MODE)?;
            u_out = leading_left_vectors(&unfold(&y, OUT_MODE)?, rank.r_out)?;
            let z = mode_product(t, &u_out.transpose(), OUT_MODE)?;
            u_in = leading_left_vectors(&unfold(&z, IN_MODE)?, rank.r_in)?;
            core = mode_product(&z, &u_in.transpose(), IN_MODE)?;
            let next = rel_err_from_core(norm_sq, &core);
            let change = (err - next).abs();
            err = next;
            if change < HOOI_TOL {
                break;
            }
        }
    }
    Tucker2Factors::new(core, u_out, u_in, true)
}

/// Dense kernel `core ×_out factor_out ×_in factor_in`.
pub fn tucker2_reconstruct(f: &Tucker2Factors) -> Result<Kernel4> {
    f.validate()?;
    let t = mode_product(&f.core, &f.factor_out, OUT_MODE)?;
    Kernel4::new(mode_product(&t, &f.factor_in, IN_MODE)?)
}

/// Equivalent factors with orthonormal columns: thin QR of both factors, with
/// the triangular parts absorbed into the core.
pub(crate) fn orthonormalize(f: &Tucker2Factors) -> Result<Tucker2Factors> {
    if f.orthonormal {
        return Ok(f.clone());
    }
    let (q_out, r_out) = qr(&f.factor_out);
    let (q_in, r_in) = qr(&f.factor_in);
    let core = mode_product(&mode_product(&f.core, &r_out, OUT_MODE)?, &r_in, IN_MODE)?;
    Tucker2Factors::new(core, q_out, q_in, true)
}

/// Lowers the ranks of an existing Tucker-2 factorization by decomposing only
/// its core and folding the core's factors into the outer ones
/// (`factor' = factor · core_factor`).
///
/// Trained (non-orthonormal) factors are first re-orthonormalized by QR, so
/// the result matches decomposing the reconstructed kernel directly.
pub fn tucker2_recompress(f: &Tucker2Factors, rank: MultilinearRank2) -> Result<Tucker2Factors> {
    let current = f.rank();
    if !rank.le(&current) {
        return Err(Error::RankIncrease(format!(
            "Tucker-2 rank {rank} exceeds current {current}"
        )));
    }
    check_rank(rank, current.r_out, current.r_in)?;
    let base = orthonormalize(f)?;
    let inner = tucker2_decompose(&Kernel4::new(base.core.clone())?, rank)?;
    Tucker2Factors::new(
        inner.core,
        base.factor_out.matmul(&inner.factor_out)?,
        base.factor_in.matmul(&inner.factor_in)?,
        true,
    )
}
