//! C interface to `musco`.
//!
//! Every fallible function returns a [`MuscoStatus`]; on failure the message
//! is available from [`musco_last_error`] on the same thread until the next
//! failing call. Objects cross the boundary as opaque handles that the caller
//! releases with the matching `_free` function. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use musco::modelgraph::{count_flops, count_params, ModelGraph};
use musco::rank_select::{cpd3_rate_rank, evbmf_rank, svd_rate_rank, tucker2_rate_rank, weakened_rank};
use musco::trainer::forward;
use musco::{Error, Matrix2};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MuscoStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    InfeasibleRank = 4,
    Io = 5,
    CorruptFile = 6,
    Unsupported = 7,
    Panic = 8,
}

/// Dense real matrix.
pub struct MuscoMatrix {
    inner: Matrix2,
}

/// Network loaded from a manifest.
pub struct MuscoModel {
    inner: ModelGraph,
}

/// Result of an EVBMF rank estimate.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MuscoEvbmf {
    pub rank: usize,
    pub noise_variance: f64,
    pub threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior nul removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MuscoStatus {
    match e {
        Error::ShapeMismatch(_) | Error::InvalidShape(_) | Error::ModeOutOfRange { .. } => MuscoStatus::ShapeMismatch,
        Error::InfeasibleRank(_) => MuscoStatus::InfeasibleRank,
        Error::Io { .. } => MuscoStatus::Io,
        Error::Corrupt { .. } | Error::Json(_) => MuscoStatus::CorruptFile,
        Error::UnsupportedLayer(_) => MuscoStatus::Unsupported,
        _ => MuscoStatus::InvalidArgument,
    }
}

struct Fail(MuscoStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MuscoStatus::NullPointer, format!("`{what}` is null"))
}

/// Runs `f`, converting errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MuscoStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MuscoStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MuscoStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failure on this thread, or an empty string. The
/// pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn musco_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Copies `rows*cols` row-major values into a new matrix.
///
/// # Safety
/// `data` must point to `rows*cols` doubles and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musco_matrix_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut MuscoMatrix,
) -> MuscoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        if data.is_null() {
            return Err(null("data"));
        }
        let len = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(MuscoStatus::InvalidArgument, format!("{rows}x{cols} overflows")))?;
        let values = std::slice::from_raw_parts(data, len);
        let inner = Matrix2::from_row_major(rows, cols, values)?;
        *out = Box::into_raw(Box::new(MuscoMatrix { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from `musco_matrix_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn musco_matrix_free(m: *mut MuscoMatrix) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Estimates the rank of `m` by empirical variational Bayes.
///
/// # Safety
/// `m` must be a live matrix handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn musco_evbmf(m: *const MuscoMatrix, out: *mut MuscoEvbmf) -> MuscoStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("m"))?;
        let out = out_ref(out, "out")?;
        let est = evbmf_rank(&m.inner)?;
        *out = MuscoEvbmf {
            rank: est.rank,
            noise_variance: est.noise_variance,
            threshold: est.threshold,
        };
        Ok(())
    })
}

/// Tucker-2 ranks that shrink a d×d conv from `c_in` to `c_out` channels
/// by `alpha`, with `r_out = floor(beta * r_in)`.
///
/// # Safety
/// `r_out` and `r_in` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musco_tucker2_rate_rank(
    c_in: usize,
    c_out: usize,
    d: usize,
    alpha: f64,
    beta: f64,
    r_out: *mut usize,
    r_in: *mut usize,
) -> MuscoStatus {
    guard(|| {
        let (r_out, r_in) = (out_ref(r_out, "r_out")?, out_ref(r_in, "r_in")?);
        let r = tucker2_rate_rank(c_in, c_out, d, alpha, beta)?;
        *r_out = r.r_out;
        *r_in = r.r_in;
        Ok(())
    })
}

/// CP rank that shrinks a d×d conv by `alpha`.
///
/// # Safety
/// `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musco_cpd3_rate_rank(
    c_in: usize,
    c_out: usize,
    d: usize,
    alpha: f64,
    rank: *mut usize,
) -> MuscoStatus {
    guard(|| {
        *out_ref(rank, "rank")? = cpd3_rate_rank(c_in, c_out, d, alpha)?;
        Ok(())
    })
}

/// Truncated-SVD rank that shrinks an `l_in`×`l_out` fc layer by `alpha`.
///
/// # Safety
/// `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musco_svd_rate_rank(l_in: usize, l_out: usize, alpha: f64, rank: *mut usize) -> MuscoStatus {
    guard(|| {
        *out_ref(rank, "rank")? = svd_rate_rank(l_in, l_out, alpha)?;
        Ok(())
    })
}

/// Interpolates between `r_init` (w = 0) and `r_extr` (w = 1).
///
/// # Safety
/// `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn musco_weakened_rank(r_init: usize, r_extr: usize, w: f64, rank: *mut usize) -> MuscoStatus {
    guard(|| {
        *out_ref(rank, "rank")? = weakened_rank(r_init, r_extr, w)?;
        Ok(())
    })
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|e| Fail(MuscoStatus::InvalidArgument, format!("path is not UTF-8: {e}")))
}

/// Loads a model manifest and its weight blob.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn musco_model_load(path: *const c_char, out: *mut *mut MuscoModel) -> MuscoStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let inner = musco::io::load_model(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MuscoModel { inner }));
        Ok(())
    })
}

/// Writes the manifest to `path` and the weights next to it.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn musco_model_save(model: *const MuscoModel, path: *const c_char) -> MuscoStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        musco::io::save_model(&model.inner, path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from `musco_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn musco_model_free(model: *mut MuscoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Weight and bias count, and multiply-accumulates for one sample.
///
/// # Safety
/// `model` must be a live handle; `params` and `macs` writable.
#[no_mangle]
pub unsafe extern "C" fn musco_model_cost(
    model: *const MuscoModel,
    params: *mut u64,
    macs: *mut u64,
) -> MuscoStatus {
    guard(|| {
        let g = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (params, macs) = (out_ref(params, "params")?, out_ref(macs, "macs")?);
        *params = count_params(g).total() as u64;
        *macs = count_flops(g, g.input_shape())?.total;
        Ok(())
    })
}

/// Values per input sample (H·W·C) and per output sample.
///
/// # Safety
/// `model` must be a live handle; `input_len` and `output_len` writable.
#[no_mangle]
pub unsafe extern "C" fn musco_model_io_len(
    model: *const MuscoModel,
    input_len: *mut usize,
    output_len: *mut usize,
) -> MuscoStatus {
    guard(|| {
        let g = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        let (input_len, output_len) = (out_ref(input_len, "input_len")?, out_ref(output_len, "output_len")?);
        *input_len = g.input_shape().iter().product();
        *output_len = g.output_shape()?.numel();
        Ok(())
    })
}

/// Forward pass over `n` NHWC samples. `output` receives `n * output_len`
/// values; `output_cap` is its capacity in doubles.
///
/// # Safety
/// `input` must hold `n * input_len` doubles and `output` `output_cap`.
#[no_mangle]
pub unsafe extern "C" fn musco_model_forward(
    model: *const MuscoModel,
    input: *const f64,
    n: usize,
    output: *mut f64,
    output_cap: usize,
) -> MuscoStatus {
    guard(|| {
        let g = &model.as_ref().ok_or_else(|| null("model"))?.inner;
        if input.is_null() {
            return Err(null("input"));
        }
        if output.is_null() {
            return Err(null("output"));
        }
        let in_len = g.input_shape().iter().product::<usize>() * n;
        let out_len = g.output_shape()?.numel() * n;
        if output_cap < out_len {
            return Err(Fail(
                MuscoStatus::ShapeMismatch,
                format!("output holds {output_cap} values, forward produces {out_len}"),
            ));
        }
        let y = forward(g, std::slice::from_raw_parts(input, in_len), n)?;
        ptr::copy_nonoverlapping(y.as_ptr(), output, y.len());
        Ok(())
    })
}
