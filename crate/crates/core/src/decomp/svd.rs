use crate::error::{Error, Result};
use crate::linalg::{qr, truncated_svd, Matrix2};

use super::SVDFactors;

/// Rank-R split of an fc weight into `theta_in = U·S` and `theta_out = Vᵀ`.
pub fn svd_decompose(w: &Matrix2, rank: usize) -> Result<SVDFactors> {
    let s = truncated_svd(w, rank)?;
    SVDFactors::new(s.u.scale_cols(&s.s), s.v.transpose())
}

pub fn svd_reconstruct(f: &SVDFactors) -> Result<Matrix2> {
    f.theta_in.matmul(&f.theta_out)
}

/// Truncates `theta_in · theta_out` to rank `rank` without forming the
/// product: both factors are reduced by QR and only the R×R middle matrix is
/// decomposed.
pub fn svd_recompress(f: &SVDFactors, rank: usize) -> Result<SVDFactors> {
    let current = f.rank();
    if rank > current {
        return Err(Error::RankIncrease(format!(
            "SVD rank {rank} exceeds current {current}"
        )));
    }
    if rank == 0 {
        return Err(Error::RankOutOfRange { rank, max: current });
    }
    let (q_in, r_in) = qr(&f.theta_in);
    let (q_out, r_out) = qr(&f.theta_out.transpose());
    let middle = r_in.matmul_t(&r_out)?;
    let s = truncated_svd(&middle, rank)?;
    let theta_in = q_in.matmul(&s.u.scale_cols(&s.s))?;
    let theta_out = q_out.matmul(&s.v)?.transpose();
    SVDFactors::new(theta_in, theta_out)
}
