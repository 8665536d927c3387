//! C ABI over `csi-feedback`.
//!
//! Every entry point returns a [`CsiStatus`]. On failure the message is kept
//! per thread and can be read with [`csi_last_error_message`]. Complex
//! matrices cross the boundary as two `double` arrays (real and imaginary
//! parts), row-major, `num_rx * num_tx` entries each.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use csi_feedback::channel::{steering_vector, ChannelMatrix, ChannelParams};
use csi_feedback::feedback::{encode_scheme1, make_compressor_scheme1, FeedbackPayload, MeasurementOperator};
use csi_feedback::harness::nmse;
use csi_feedback::quantize::{calibrate, Quantizer};
use csi_feedback::solver::{redeem_solve, SolverConfig};
use csi_feedback::Error;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Degenerate = 4,
    Numerical = 5,
    Parse = 6,
    Io = 7,
    Panic = 8,
}

/// Opaque quantizer handle.
pub struct CsiQuantizer(Quantizer);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CsiStatus {
    match e {
        Error::Dimension(_) => CsiStatus::DimensionMismatch,
        Error::InvalidParameter(_) | Error::Config(_) => CsiStatus::InvalidArgument,
        Error::Degenerate(_) => CsiStatus::Degenerate,
        Error::Numerical(_) => CsiStatus::Numerical,
        Error::Parse(_) => CsiStatus::Parse,
        Error::Io(_) => CsiStatus::Io,
    }
}

struct Fail(CsiStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CsiStatus::NullPointer, format!("{what} is null"))
}

fn guard<F: FnOnce() -> Result<(), Fail>>(f: F) -> CsiStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CsiStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside csi-feedback".into());
            CsiStatus::Panic
        }
    }
}

unsafe fn input<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn output<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

unsafe fn read_channel(re: *const f64, im: *const f64, num_rx: usize, num_tx: usize) -> Result<ChannelMatrix, Fail> {
    if num_rx == 0 || num_tx == 0 {
        return Err(Fail(CsiStatus::InvalidArgument, "array sizes must be positive".into()));
    }
    let len = num_rx * num_tx;
    let (re, im) = (input(re, len, "real part")?, input(im, len, "imaginary part")?);
    Ok(ChannelMatrix(DMatrix::from_fn(num_rx, num_tx, |r, c| {
        Complex64::new(re[r * num_tx + c], im[r * num_tx + c])
    })))
}

unsafe fn write_channel(h: &ChannelMatrix, re: *mut f64, im: *mut f64) -> Result<(), Fail> {
    let (m, n) = (h.num_rx(), h.num_tx());
    let (re, im) = (output(re, m * n, "real output")?, output(im, m * n, "imaginary output")?);
    for r in 0..m {
        for c in 0..n {
            re[r * n + c] = h.0[(r, c)].re;
            im[r * n + c] = h.0[(r, c)].im;
        }
    }
    Ok(())
}

unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if s.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|e| Fail(CsiStatus::Parse, format!("{what} is not UTF-8: {e}")))
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(CsiStatus::Parse, "string contains a NUL byte".into()))
}

unsafe fn quantizer<'a>(q: *const CsiQuantizer) -> Result<&'a Quantizer, Fail> {
    q.as_ref().map(|q| &q.0).ok_or_else(|| null("quantizer"))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn csi_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn csi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Array response at `angle` (radians) for a ULA of `num_antennas`.
///
/// # Safety
/// `out_re` and `out_im` must each hold `num_antennas` doubles.
#[no_mangle]
pub unsafe extern "C" fn csi_steering_vector(
    angle: f64,
    num_antennas: usize,
    spacing_ratio: f64,
    out_re: *mut f64,
    out_im: *mut f64,
) -> CsiStatus {
    guard(|| {
        let re = output(out_re, num_antennas, "out_re")?;
        let im = output(out_im, num_antennas, "out_im")?;
        let a = steering_vector(angle, num_antennas, spacing_ratio);
        for (i, c) in a.iter().enumerate() {
            re[i] = c.re;
            im[i] = c.im;
        }
        Ok(())
    })
}

/// Sum of `num_paths` rank-one path components.
///
/// # Safety
/// Path arrays hold `num_paths` doubles; outputs hold `num_rx * num_tx`.
#[no_mangle]
pub unsafe extern "C" fn csi_synthesize_channel(
    aoa: *const f64,
    aod: *const f64,
    gain_re: *const f64,
    gain_im: *const f64,
    num_paths: usize,
    num_rx: usize,
    num_tx: usize,
    spacing_ratio: f64,
    out_re: *mut f64,
    out_im: *mut f64,
) -> CsiStatus {
    guard(|| {
        let gains = input(gain_re, num_paths, "gain_re")?
            .iter()
            .zip(input(gain_im, num_paths, "gain_im")?)
            .map(|(&re, &im)| Complex64::new(re, im))
            .collect();
        let params = ChannelParams::new(input(aoa, num_paths, "aoa")?.to_vec(), input(aod, num_paths, "aod")?.to_vec(), gains)?;
        write_channel(&params.synthesize(num_rx, num_tx, spacing_ratio), out_re, out_im)
    })
}

/// `||H - H_est||_F^2 / ||H||_F^2`.
///
/// # Safety
/// Matrix arrays hold `num_rx * num_tx` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_nmse(
    truth_re: *const f64,
    truth_im: *const f64,
    est_re: *const f64,
    est_im: *const f64,
    num_rx: usize,
    num_tx: usize,
    out: *mut f64,
) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let truth = read_channel(truth_re, truth_im, num_rx, num_tx)?;
        let est = read_channel(est_re, est_im, num_rx, num_tx)?;
        *out = nmse(&truth, &est)?;
        Ok(())
    })
}

/// Equal-width quantizer over the sample range. Free with
/// [`csi_quantizer_free`].
///
/// # Safety
/// `samples` holds `len` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_calibrate(
    samples: *const f64,
    len: usize,
    num_levels: usize,
    dither_fraction: f64,
    out: *mut *mut CsiQuantizer,
) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = calibrate(input(samples, len, "samples")?, num_levels, dither_fraction)?;
        *out = Box::into_raw(Box::new(CsiQuantizer(q)));
        Ok(())
    })
}

/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_from_json(json: *const c_char, out: *mut *mut CsiQuantizer) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = Quantizer::from_json(read_str(json, "json")?)?;
        *out = Box::into_raw(Box::new(CsiQuantizer(q)));
        Ok(())
    })
}

/// Serialized quantizer record; free the string with [`csi_string_free`].
///
/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_to_json(q: *const CsiQuantizer, out: *mut *mut c_char) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = into_c_string(quantizer(q)?.to_json()?)?;
        Ok(())
    })
}

/// # Safety
/// `q` is a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_free(q: *mut CsiQuantizer) {
    if !q.is_null() {
        drop(Box::from_raw(q));
    }
}

/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_num_levels(q: *const CsiQuantizer, out: *mut usize) -> CsiStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("out"))? = quantizer(q)?.num_levels();
        Ok(())
    })
}

/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_dither_sigma(q: *const CsiQuantizer, out: *mut f64) -> CsiStatus {
    guard(|| {
        *out.as_mut().ok_or_else(|| null("out"))? = quantizer(q)?.dither_sigma();
        Ok(())
    })
}

/// Cell index of `x + dither`.
///
/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_quantize(q: *const CsiQuantizer, x: f64, dither: f64, out: *mut usize) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if !(x + dither).is_finite() {
            return Err(Fail(CsiStatus::InvalidArgument, "input is not finite".into()));
        }
        *out = quantizer(q)?.quantize(x, dither);
        Ok(())
    })
}

/// Probability that `x` plus dither lands in cell `index`.
///
/// # Safety
/// `q` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_quantizer_cell_prob(q: *const CsiQuantizer, index: usize, x: f64, out: *mut f64) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = quantizer(q)?;
        if index >= q.num_levels() {
            return Err(Fail(CsiStatus::InvalidArgument, format!("index {index} >= Q = {}", q.num_levels())));
        }
        *out = q.cell_prob(index, x);
        Ok(())
    })
}

/// Compresses and quantizes `H` with the compressor seeded by
/// `compressor_seed`; dither draws come from `dither_seed`. Writes the
/// payload record, to be freed with [`csi_string_free`].
///
/// # Safety
/// Channel arrays hold `num_rx * num_tx` doubles; `q` is a live handle;
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn csi_encode_scheme1(
    h_re: *const f64,
    h_im: *const f64,
    num_rx: usize,
    num_tx: usize,
    q: *const CsiQuantizer,
    measurements: usize,
    compressor_seed: u64,
    dither_seed: u64,
    out: *mut *mut c_char,
) -> CsiStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let q = quantizer(q)?;
        let h = read_channel(h_re, h_im, num_rx, num_tx)?;
        let comp = make_compressor_scheme1(compressor_seed, measurements, 2 * num_rx * num_tx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(dither_seed);
        let payload = encode_scheme1(&h, &comp, q, &mut rng)?;
        *out = into_c_string(payload.to_json()?)?;
        Ok(())
    })
}

/// Recovers a `num_paths`-path channel from a payload record. The operator
/// is rebuilt from the payload seed. `solver_json` may be NULL for the
/// default solver settings.
///
/// # Safety
/// Strings are NUL-terminated; `q` is a live handle; outputs hold
/// `num_rx * num_tx` doubles where the dimensions are those in the payload.
#[no_mangle]
pub unsafe extern "C" fn csi_redeem_solve(
    payload_json: *const c_char,
    q: *const CsiQuantizer,
    num_paths: usize,
    spacing_ratio: f64,
    solver_json: *const c_char,
    out_re: *mut f64,
    out_im: *mut f64,
) -> CsiStatus {
    guard(|| {
        let q = quantizer(q)?;
        let payload = FeedbackPayload::from_json(read_str(payload_json, "payload")?)?;
        let cfg: SolverConfig = if solver_json.is_null() {
            SolverConfig::default()
        } else {
            serde_json::from_str(read_str(solver_json, "solver config")?).map_err(Error::from)?
        };
        let op = MeasurementOperator::from_payload(&payload, q)?;
        let (_, est, _) = redeem_solve(&payload, &op, q, &cfg, num_paths, spacing_ratio)?;
        write_channel(&est, out_re, out_im)
    })
}
