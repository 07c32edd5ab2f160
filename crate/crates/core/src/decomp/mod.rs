//! Low-rank factorizations of layer weights and their recompression.
//!
//! Each scheme has a `*_decompose` (dense weights to factors), a
//! `*_reconstruct` (factors back to a dense tensor) and a `*_recompress` that
//! lowers the rank of existing factors without leaving factorized form.

mod cp;
mod svd;
mod tucker2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix2;
use crate::tensor::DenseTensor;

pub use cp::{
    cpd3_decompose, cpd3_decompose_naive_recompress, cpd3_reconstruct, cpd3_recompress, AlsOptions,
    CpFit,
};
pub use svd::{svd_decompose, svd_reconstruct, svd_recompress};
pub use tucker2::{tucker2_decompose, tucker2_reconstruct, tucker2_recompress};
pub(crate) use tucker2::orthonormalize;

/// Channel ranks of a Tucker-2 factorization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MultilinearRank2 {
    pub r_out: usize,
    pub r_in: usize,
}

impl MultilinearRank2 {
    pub fn new(r_out: usize, r_in: usize) -> Self {
        Self { r_out, r_in }
    }

    /// Elementwise `self ≤ other`.
    pub fn le(&self, other: &MultilinearRank2) -> bool {
        self.r_out <= other.r_out && self.r_in <= other.r_in
    }
}

impl std::fmt::Display for MultilinearRank2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(out {}, in {})", self.r_out, self.r_in)
    }
}

/// Tucker-2 factors of a d×d×C_out×C_in kernel: `core ×_out factor_out ×_in factor_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tucker2Factors {
    /// d×d×r_out×r_in.
    pub core: DenseTensor,
    /// C_out×r_out.
    pub factor_out: Matrix2,
    /// C_in×r_in.
    pub factor_in: Matrix2,
    /// Whether both factors currently have orthonormal columns. Cleared once
    /// the factors are trained.
    pub orthonormal: bool,
}

impl Tucker2Factors {
    pub fn new(
        core: DenseTensor,
        factor_out: Matrix2,
        factor_in: Matrix2,
        orthonormal: bool,
    ) -> Result<Self> {
        let f = Self {
            core,
            factor_out,
            factor_in,
            orthonormal,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.core.shape();
        if s.len() != 4 || s[0] != s[1] {
            return Err(Error::InvalidShape(format!(
                "Tucker-2 core must be d×d×r_out×r_in, got {s:?}"
            )));
        }
        if self.factor_out.cols() != s[2] || self.factor_in.cols() != s[3] {
            return Err(Error::ShapeMismatch(format!(
                "core {s:?} vs factors {}x{} / {}x{}",
                self.factor_out.rows(),
                self.factor_out.cols(),
                self.factor_in.rows(),
                self.factor_in.cols()
            )));
        }
        if s[2] > self.factor_out.rows() || s[3] > self.factor_in.rows() {
            return Err(Error::InvalidShape(format!(
                "ranks {:?} exceed channel extents ({}, {})",
                &s[2..],
                self.factor_out.rows(),
                self.factor_in.rows()
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.factor_out.rows()
    }

    pub fn c_in(&self) -> usize {
        self.factor_in.rows()
    }

    pub fn rank(&self) -> MultilinearRank2 {
        MultilinearRank2::new(self.core.shape()[2], self.core.shape()[3])
    }

    /// C_in·r_in + d²·r_in·r_out + r_out·C_out.
    pub fn param_count(&self) -> usize {
        let r = self.rank();
        let d = self.d();
        self.c_in() * r.r_in + d * d * r.r_in * r.r_out + r.r_out * self.c_out()
    }
}

/// CPD-3 factors of a d²×C_out×C_in kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct CPFactors {
    /// d²×R.
    pub factor_spatial: Matrix2,
    /// C_out×R.
    pub factor_out: Matrix2,
    /// C_in×R.
    pub factor_in: Matrix2,
}

impl CPFactors {
    pub fn new(factor_spatial: Matrix2, factor_out: Matrix2, factor_in: Matrix2) -> Result<Self> {
        let f = Self {
            factor_spatial,
            factor_out,
            factor_in,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.factor_spatial.cols();
        if self.factor_out.cols() != r || self.factor_in.cols() != r {
            return Err(Error::ShapeMismatch(format!(
                "CP factors have {}, {}, {} columns",
                r,
                self.factor_out.cols(),
                self.factor_in.cols()
            )));
        }
        let s = self.factor_spatial.rows();
        let d = (s as f64).sqrt().round() as usize;
        if d * d != s {
            return Err(Error::InvalidShape(format!(
                "spatial factor has {s} rows, not a square"
            )));
        }
        Ok(())
    }

    pub fn cp_rank(&self) -> usize {
        self.factor_spatial.cols()
    }

    pub fn d(&self) -> usize {
        (self.factor_spatial.rows() as f64).sqrt().round() as usize
    }

    pub fn c_out(&self) -> usize {
        self.factor_out.rows()
    }

    pub fn c_in(&self) -> usize {
        self.factor_in.rows()
    }

    /// R·(C_in + d² + C_out).
    pub fn param_count(&self) -> usize {
        self.cp_rank() * (self.c_in() + self.factor_spatial.rows() + self.c_out())
    }
}

/// Rank-R factors of an l_in×l_out fc weight: `W ≈ theta_in · theta_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct SVDFactors {
    /// l_in×R, equal to U·S at decomposition time.
    pub theta_in: Matrix2,
    /// R×l_out, equal to Vᵀ at decomposition time.
    pub theta_out: Matrix2,
}

impl SVDFactors {
    pub fn new(theta_in: Matrix2, theta_out: Matrix2) -> Result<Self> {
        if theta_in.cols() != theta_out.rows() {
            return Err(Error::ShapeMismatch(format!(
                "inner dimensions {} vs {}",
                theta_in.cols(),
                theta_out.rows()
            )));
        }
        if theta_in.cols() > theta_in.rows().min(theta_out.cols()) {
            return Err(Error::InvalidShape(format!(
                "rank {} exceeds min({}, {})",
                theta_in.cols(),
                theta_in.rows(),
                theta_out.cols()
            )));
        }
        Ok(Self {
            theta_in,
            theta_out,
        })
    }

    pub fn rank(&self) -> usize {
        self.theta_in.cols()
    }

    pub fn l_in(&self) -> usize {
        self.theta_in.rows()
    }

    pub fn l_out(&self) -> usize {
        self.theta_out.cols()
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.l_in() + self.l_out())
    }
}

/// Factorization scheme of a decomposed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Tucker2,
    Cpd3,
    Svd,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Tucker2 => "tucker2",
            Scheme::Cpd3 => "cpd3",
            Scheme::Svd => "svd",
        })
    }
}

/// Ranks of a factorized layer, tagged by scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Ranks {
    Tucker2 { r_out: usize, r_in: usize },
    Cpd3 { rank: usize },
    Svd { rank: usize },
}

impl Ranks {
    pub fn scheme(&self) -> Scheme {
        match self {
            Ranks::Tucker2 { .. } => Scheme::Tucker2,
            Ranks::Cpd3 { .. } => Scheme::Cpd3,
            Ranks::Svd { .. } => Scheme::Svd,
        }
    }

    pub fn tucker2(r: MultilinearRank2) -> Self {
        Ranks::Tucker2 {
            r_out: r.r_out,
            r_in: r.r_in,
        }
    }

    /// Elementwise `self ≤ other`; false across schemes.
    pub fn le(&self, other: &Ranks) -> bool {
        match (self, other) {
            (
                Ranks::Tucker2 { r_out, r_in },
                Ranks::Tucker2 {
                    r_out: o_out,
                    r_in: o_in,
                },
            ) => r_out <= o_out && r_in <= o_in,
            (Ranks::Cpd3 { rank: a }, Ranks::Cpd3 { rank: b }) => a <= b,
            (Ranks::Svd { rank: a }, Ranks::Svd { rank: b }) => a <= b,
            _ => false,
        }
    }

    /// The smallest rank in the tuple.
    pub fn min_rank(&self) -> usize {
        match *self {
            Ranks::Tucker2 { r_out, r_in } => r_out.min(r_in),
            Ranks::Cpd3 { rank } | Ranks::Svd { rank } => rank,
        }
    }
}

impl std::fmt::Display for Ranks {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Ranks::Tucker2 { r_out, r_in } => write!(f, "tucker2(in {r_in}, out {r_out})"),
            Ranks::Cpd3 { rank } => write!(f, "cpd3({rank})"),
            Ranks::Svd { rank } => write!(f, "svd({rank})"),
        }
    }
}
