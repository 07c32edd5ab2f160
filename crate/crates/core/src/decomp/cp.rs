//! CP alternating least squares on the reshaped d²×C_out×C_in kernel.
//!
//! The ALS loop is written against [`AlsTarget`], so the same code fits an
//! explicit tensor (first compression) or a tensor held only as CP factors
//! (recompression, where every quantity comes from R×R Gram matrices).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{khatri_rao, leading_left_vectors, solve_least_squares, Matrix2};
use crate::tensor::{fold, unfold, DenseTensor, Kernel3};

use super::CPFactors;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlsOptions {
    /// Stop once a sweep improves the relative error by less than this.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Independent starts; the best fit is kept.
    pub restarts: usize,
    pub seed: u64,
    /// Use leading singular vectors of the unfoldings for the first start.
    pub hosvd_init: bool,
}

impl Default for AlsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_sweeps: 500,
            restarts: 3,
            seed: 0,
            hosvd_init: true,
        }
    }
}

/// Result of a CP fit. Failing to converge is not an error; the achieved
/// error and sweep count are reported instead.
#[derive(Debug, Clone)]
pub struct CpFit {
    pub factors: CPFactors,
    /// Relative Frobenius error against the fitted tensor.
    pub rel_error: f64,
    /// Sweeps used by the winning start.
    pub sweeps: usize,
    /// Relative error after each sweep of the winning start.
    pub history: Vec<f64>,
}

type Factors = [Matrix2; 3];

trait AlsTarget {
    fn dims(&self) -> [usize; 3];
    /// Unfolding along `mode` times the Khatri-Rao product of the other factors.
    fn mttkrp(&self, mode: usize, f: &Factors) -> Result<Matrix2>;
    /// Unfolding along `mode` times its own transpose.
    fn mode_gram(&self, mode: usize) -> Result<Matrix2>;
    fn rel_error(&self, f: &Factors) -> Result<f64>;
}

/// The two modes other than `mode`, in increasing order.
fn others(mode: usize) -> (usize, usize) {
    match mode {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

struct ExplicitTarget {
    dims: [usize; 3],
    unfoldings: [Matrix2; 3],
    norm_sq: f64,
}

impl ExplicitTarget {
    fn new(t: &DenseTensor) -> Result<Self> {
        let s = t.shape();
        Ok(Self {
            dims: [s[0], s[1], s[2]],
            unfoldings: [unfold(t, 0)?, unfold(t, 1)?, unfold(t, 2)?],
            norm_sq: t.norm_sq(),
        })
    }
}

impl AlsTarget for ExplicitTarget {
    fn dims(&self) -> [usize; 3] {
        self.dims
    }

    fn mttkrp(&self, mode: usize, f: &Factors) -> Result<Matrix2> {
        let (a, b) = others(mode);
        self.unfoldings[mode].matmul(&khatri_rao(&f[a], &f[b])?)
    }

    fn mode_gram(&self, mode: usize) -> Result<Matrix2> {
        let u = &self.unfoldings[mode];
        u.matmul_t(u)
    }

    fn rel_error(&self, f: &Factors) -> Result<f64> {
        let approx = f[0].matmul_t(&khatri_rao(&f[1], &f[2])?)?;
        let diff = self.unfoldings[0].sub(&approx)?.frobenius_norm();
        Ok(if self.norm_sq == 0.0 {
            diff
        } else {
            diff / self.norm_sq.sqrt()
        })
    }
}

/// A tensor given by CP factors; never materialized.
struct KruskalTarget {
    factors: Factors,
    grams: [Matrix2; 3],
    norm_sq: f64,
}

impl KruskalTarget {
    fn new(factors: Factors) -> Result<Self> {
        let grams = [
            factors[0].t_matmul(&factors[0])?,
            factors[1].t_matmul(&factors[1])?,
            factors[2].t_matmul(&factors[2])?,
        ];
        let norm_sq = grams[0].hadamard(&grams[1])?.hadamard(&grams[2])?.as_slice().iter().sum::<f64>();
        Ok(Self {
            factors,
            grams,
            norm_sq: norm_sq.max(0.0),
        })
    }
}

impl AlsTarget for KruskalTarget {
    fn dims(&self) -> [usize; 3] {
        [
            self.factors[0].rows(),
            self.factors[1].rows(),
            self.factors[2].rows(),
        ]
    }

    fn mttkrp(&self, mode: usize, f: &Factors) -> Result<Matrix2> {
        let (a, b) = others(mode);
        let cross = self.factors[a]
            .t_matmul(&f[a])?
            .hadamard(&self.factors[b].t_matmul(&f[b])?)?;
        self.factors[mode].matmul(&cross)
    }

    fn mode_gram(&self, mode: usize) -> Result<Matrix2> {
        let (a, b) = others(mode);
        let inner = self.grams[a].hadamard(&self.grams[b])?;
        self.factors[mode].matmul(&inner)?.matmul_t(&self.factors[mode])
    }

    fn rel_error(&self, f: &Factors) -> Result<f64> {
        let cross = (0..3)
            .map(|m| self.factors[m].t_matmul(&f[m]))
            .collect::<Result<Vec<_>>>()?;
        let inner: f64 = cross[0].hadamard(&cross[1])?.hadamard(&cross[2])?.as_slice().iter().sum();
        let own = (0..3).map(|m| f[m].t_matmul(&f[m])).collect::<Result<Vec<_>>>()?;
        let approx_sq: f64 = own[0].hadamard(&own[1])?.hadamard(&own[2])?.as_slice().iter().sum();
        let diff_sq = (self.norm_sq - 2.0 * inner + approx_sq).max(0.0);
        Ok(if self.norm_sq == 0.0 {
            diff_sq.sqrt()
        } else {
            (diff_sq / self.norm_sq).sqrt()
        })
    }
}

/// Rescales every rank-one term so its three columns share the same norm.
fn balance(f: &mut Factors) {
    let r = f[0].cols();
    for j in 0..r {
        let norms: [f64; 3] = std::array::from_fn(|m| {
            f[m].col(j).iter().map(|x| x * x).sum::<f64>().sqrt()
        });
        if norms.iter().any(|&n| n == 0.0) {
            for m in f.iter_mut() {
                m.col_mut(j).iter_mut().for_each(|x| *x = 0.0);
            }
            continue;
        }
        let g = (norms[0] * norms[1] * norms[2]).cbrt();
        for (m, n) in f.iter_mut().zip(norms) {
            let s = g / n;
            m.col_mut(j).iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn random_factor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix2 {
    Matrix2::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn start_rng(opts: &AlsOptions, restart: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(restart as u64 + 1)))
}

/// Starting factors for restart `restart`: leading singular vectors of the
/// unfoldings (padded with random columns when R exceeds the extent) for the
/// first start when enabled, seeded Gaussian factors otherwise.
fn initial_factors(
    target: &dyn AlsTarget,
    rank: usize,
    restart: usize,
    opts: &AlsOptions,
) -> Result<Factors> {
    let dims = target.dims();
    let mut rng = start_rng(opts, restart);
    if restart == 0 && opts.hosvd_init {
        let mut out = Vec::with_capacity(3);
        for (mode, &n) in dims.iter().enumerate() {
            let k = rank.min(n);
            let lead = leading_left_vectors(&target.mode_gram(mode)?, k)?;
            let mut m = Matrix2::zeros(n, rank);
            for j in 0..k {
                m.col_mut(j).copy_from_slice(lead.col(j));
            }
            if rank > k {
                let extra = random_factor(n, rank - k, &mut rng);
                for j in k..rank {
                    m.col_mut(j).copy_from_slice(extra.col(j - k));
                }
            }
            out.push(m);
        }
        let [a, b, c]: [Matrix2; 3] = out.try_into().expect("three modes");
        Ok([a, b, c])
    } else {
        Ok([
            random_factor(dims[0], rank, &mut rng),
            random_factor(dims[1], rank, &mut rng),
            random_factor(dims[2], rank, &mut rng),
        ])
    }
}

struct Run {
    factors: Factors,
    err: f64,
    sweeps: usize,
    history: Vec<f64>,
}

fn als(target: &dyn AlsTarget, mut f: Factors, opts: &AlsOptions) -> Result<Run> {
    let mut prev = target.rel_error(&f)?;
    let mut best = Run {
        factors: f.clone(),
        err: prev,
        sweeps: 0,
        history: Vec::new(),
    };
    let mut history = Vec::new();
    for sweep in 1..=opts.max_sweeps {
        for mode in 0..3 {
            let (a, b) = others(mode);
            let gram = f[a].t_matmul(&f[a])?.hadamard(&f[b].t_matmul(&f[b])?)?;
            let rhs = target.mttkrp(mode, &f)?;
            f[mode] = solve_least_squares(&gram, &rhs.transpose())?.transpose();
        }
        balance(&mut f);
        let err = target.rel_error(&f)?;
        if !err.is_finite() {
            break;
        }
        history.push(err);
        if err <= best.err {
            best.factors = f.clone();
            best.err = err;
            best.sweeps = sweep;
        }
        if prev - err < opts.tol {
            break;
        }
        prev = err;
    }
    best.history = history;
    Ok(best)
}

fn best_of(target: &dyn AlsTarget, starts: Vec<Factors>, opts: &AlsOptions) -> Result<CpFit> {
    let mut best: Option<Run> = None;
    for init in starts {
        let run = als(target, init, opts)?;
        if best.as_ref().is_none_or(|b| run.err < b.err) {
            best = Some(run);
        }
    }
    let run = best.ok_or_else(|| Error::InvalidParameter("ALS needs at least one start".into()))?;
    let [s, o, i] = run.factors;
    Ok(CpFit {
        factors: CPFactors::new(s, o, i)?,
        rel_error: run.err,
        sweeps: run.sweeps,
        history: run.history,
    })
}

fn check_opts(rank: usize, opts: &AlsOptions) -> Result<()> {
    if rank == 0 {
        return Err(Error::RankOutOfRange { rank, max: usize::MAX });
    }
    if opts.restarts == 0 {
        return Err(Error::InvalidParameter("ALS restarts must be ≥ 1".into()));
    }
    if opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::InvalidParameter(format!("ALS tolerance {}", opts.tol)));
    }
    Ok(())
}

/// CPD-3 of a reshaped kernel by ALS with `opts.restarts` starts.
pub fn cpd3_decompose(k: &Kernel3, rank: usize, opts: &AlsOptions) -> Result<CpFit> {
    check_opts(rank, opts)?;
    if !k.tensor().is_finite() {
        return Err(Error::NonFinite("CP input kernel"));
    }
    let target = ExplicitTarget::new(k.tensor())?;
    let starts = (0..opts.restarts)
        .map(|i| initial_factors(&target, rank, i, opts))
        .collect::<Result<Vec<_>>>()?;
    best_of(&target, starts, opts)
}

/// Sum of the R outer products of matching factor columns.
pub fn cpd3_reconstruct(f: &CPFactors) -> Result<Kernel3> {
    f.validate()?;
    let m0 = f.factor_spatial.matmul_t(&khatri_rao(&f.factor_out, &f.factor_in)?)?;
    let shape = [f.factor_spatial.rows(), f.c_out(), f.c_in()];
    Kernel3::new(fold(&m0, 0, &shape)?)
}

/// Lowers the CP rank of existing factors by ALS against the tensor they
/// represent, computed entirely from Gram matrices.
///
/// The first start keeps the `rank` dominant terms of the norm-balanced
/// input; the remaining starts are the same ones [`cpd3_decompose`] uses, so
/// the result is never worse than reconstructing and refitting (up to
/// rounding).
pub fn cpd3_recompress(f: &CPFactors, rank: usize, opts: &AlsOptions) -> Result<CpFit> {
    check_opts(rank, opts)?;
    let current = f.cp_rank();
    if rank > current {
        return Err(Error::RankIncrease(format!(
            "CP rank {rank} exceeds current {current}"
        )));
    }
    let mut balanced: Factors = [
        f.factor_spatial.clone(),
        f.factor_out.clone(),
        f.factor_in.clone(),
    ];
    balance(&mut balanced);
    if rank == current {
        let [s, o, i] = balanced;
        return Ok(CpFit {
            factors: CPFactors::new(s, o, i)?,
            rel_error: 0.0,
            sweeps: 0,
            history: Vec::new(),
        });
    }

    let weight = |j: usize| -> f64 {
        balanced
            .iter()
            .map(|m| m.col(j).iter().map(|x| x * x).sum::<f64>().sqrt())
            .product()
    };
    let mut order: Vec<usize> = (0..current).collect();
    order.sort_by(|&a, &b| weight(b).total_cmp(&weight(a)).then(a.cmp(&b)));
    let keep = &order[..rank];
    let dominant: Factors = std::array::from_fn(|m| balanced[m].select_cols(keep));

    let target = KruskalTarget::new(balanced)?;
    let mut starts = vec![dominant];
    for i in 0..opts.restarts {
        starts.push(initial_factors(&target, rank, i, opts)?);
    }
    best_of(&target, starts, opts)
}

/// Reference path for recompression: reconstruct the dense kernel and fit it
/// from scratch.
pub fn cpd3_decompose_naive_recompress(
    f: &CPFactors,
    rank: usize,
    opts: &AlsOptions,
) -> Result<CpFit> {
    cpd3_decompose(&cpd3_reconstruct(f)?, rank, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_error;
    use crate::testutil::{randn, randn_tensor};

    fn kernel3_from(f: &CPFactors) -> Kernel3 {
        cpd3_reconstruct(f).unwrap()
    }

    fn planted(d2: usize, c_out: usize, c_in: usize, r: usize, seed: u64) -> CPFactors {
        CPFactors::new(randn(d2, r, seed), randn(c_out, r, seed + 1), randn(c_in, r, seed + 2)).unwrap()
    }

    #[test]
    fn recovers_planted_rank5() {
        let f = planted(9, 12, 10, 5, 3);
        let k = kernel3_from(&f);
        let fit = cpd3_decompose(&k, 5, &AlsOptions::default()).unwrap();
        assert!(fit.rel_error <= 1e-6, "rel_error {}", fit.rel_error);
        assert!(fit.sweeps <= 500);
        let rec = cpd3_reconstruct(&fit.factors).unwrap();
        assert!(rel_error(k.tensor(), rec.tensor()).unwrap() <= 1e-6);
    }

    #[test]
    fn rank1_outer_product_is_exact() {
        let f = planted(9, 6, 5, 1, 8);
        let k = kernel3_from(&f);
        let fit = cpd3_decompose(&k, 1, &AlsOptions::default()).unwrap();
        assert!(fit.rel_error <= 1e-10);
    }

    #[test]
    fn error_history_is_monotone() {
        let k = Kernel3::new(randn_tensor(vec![9, 8, 7], 21)).unwrap();
        let opts = AlsOptions {
            restarts: 1,
            hosvd_init: false,
            max_sweeps: 200,
            ..Default::default()
        };
        let fit = cpd3_decompose(&k, 6, &opts).unwrap();
        assert!(!fit.history.is_empty());
        for w in fit.history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-15, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn factors_come_out_balanced() {
        let k = Kernel3::new(randn_tensor(vec![4, 6, 5], 2)).unwrap();
        let fit = cpd3_decompose(&k, 3, &AlsOptions::default()).unwrap();
        let f = &fit.factors;
        for j in 0..3 {
            let n: Vec<f64> = [&f.factor_spatial, &f.factor_out, &f.factor_in]
                .iter()
                .map(|m| m.col(j).iter().map(|x| x * x).sum::<f64>().sqrt())
                .collect();
            assert!((n[0] - n[1]).abs() < 1e-9 * n[0] && (n[1] - n[2]).abs() < 1e-9 * n[0]);
        }
    }

    #[test]
    fn reconstruct_single_term_and_scale_indeterminacy() {
        let f = planted(4, 3, 2, 1, 5);
        let k = kernel3_from(&f);
        let t = k.tensor();
        for s in 0..4 {
            for o in 0..3 {
                for i in 0..2 {
                    let expected = f.factor_spatial.get(s, 0) * f.factor_out.get(o, 0) * f.factor_in.get(i, 0);
                    assert!((t.get(&[s, o, i]) - expected).abs() < 1e-14);
                }
            }
        }

        let g = planted(9, 5, 4, 3, 9);
        let mut h = g.clone();
        h.factor_out.col_mut(1).iter_mut().for_each(|x| *x *= 4.0);
        h.factor_in.col_mut(1).iter_mut().for_each(|x| *x *= 0.25);
        let a = kernel3_from(&g);
        let b = kernel3_from(&h);
        assert!(rel_error(a.tensor(), b.tensor()).unwrap() < 1e-14);
    }

    #[test]
    fn recompress_same_rank_keeps_tensor() {
        let f = planted(9, 8, 6, 4, 11);
        let fit = cpd3_recompress(&f, 4, &AlsOptions::default()).unwrap();
        let a = kernel3_from(&f);
        let b = kernel3_from(&fit.factors);
        assert!(rel_error(a.tensor(), b.tensor()).unwrap() <= 1e-8);
    }

    #[test]
    fn recompress_redundant_factors_to_true_rank() {
        // rank-3 tensor stored with 5 terms: terms 3 and 4 split terms 0 and 1.
        let base = planted(9, 10, 8, 3, 13);
        let mut cols_s = Vec::new();
        let mut cols_o = Vec::new();
        let mut cols_i = Vec::new();
        for (j, w) in [(0, 0.6), (1, 0.3), (2, 1.0), (0, 0.4), (1, 0.7)] {
            cols_s.extend(base.factor_spatial.col(j).iter().map(|x| x * w));
            cols_o.extend_from_slice(base.factor_out.col(j));
            cols_i.extend_from_slice(base.factor_in.col(j));
        }
        let f = CPFactors::new(
            Matrix2::from_col_major(9, 5, cols_s).unwrap(),
            Matrix2::from_col_major(10, 5, cols_o).unwrap(),
            Matrix2::from_col_major(8, 5, cols_i).unwrap(),
        )
        .unwrap();
        let a = kernel3_from(&base);
        let b = kernel3_from(&f);
        assert!(rel_error(a.tensor(), b.tensor()).unwrap() < 1e-13);

        let fit = cpd3_recompress(&f, 3, &AlsOptions::default()).unwrap();
        assert!(fit.rel_error <= 1e-6, "{}", fit.rel_error);
        let rec = kernel3_from(&fit.factors);
        assert!(rel_error(a.tensor(), rec.tensor()).unwrap() <= 1e-6);
    }

    #[test]
    fn recompress_rank1_matches_naive() {
        let f = planted(9, 7, 6, 4, 17);
        let opts = AlsOptions::default();
        let fast = cpd3_recompress(&f, 1, &opts).unwrap();
        let naive = cpd3_decompose_naive_recompress(&f, 1, &opts).unwrap();
        // fast path's error is measured via Gram identities; re-measure densely
        let full = kernel3_from(&f);
        let fast_dense = rel_error(full.tensor(), kernel3_from(&fast.factors).tensor()).unwrap();
        assert!((fast_dense - naive.rel_error).abs() <= 1e-6, "{fast_dense} vs {}", naive.rel_error);
    }

    #[test]
    fn recompress_never_worse_than_naive() {
        for seed in 0..4 {
            let f = planted(9, 8, 8, 6, 200 + seed);
            let opts = AlsOptions::default();
            let fast = cpd3_recompress(&f, 3, &opts).unwrap();
            let naive = cpd3_decompose_naive_recompress(&f, 3, &opts).unwrap();
            assert!(fast.rel_error <= naive.rel_error + 1e-6, "{} vs {}", fast.rel_error, naive.rel_error);
        }
    }

    #[test]
    fn recompress_rejects_increase_and_zero() {
        let f = planted(4, 3, 3, 2, 1);
        assert!(matches!(
            cpd3_recompress(&f, 3, &AlsOptions::default()),
            Err(Error::RankIncrease(_))
        ));
        assert!(cpd3_recompress(&f, 0, &AlsOptions::default()).is_err());
        let k = kernel3_from(&f);
        assert!(cpd3_decompose(&k, 0, &AlsOptions::default()).is_err());
    }
}
