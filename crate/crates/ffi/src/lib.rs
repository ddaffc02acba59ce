// SPDX-License-Identifier: Apache-2.0

//! C ABI for `linterp`.
//!
//! Handles are opaque and owned by the caller until passed to the matching
//! `*_free`. Every call returns an [`LtStatus`]; on failure
//! [`lt_last_error_message`] describes the error on the calling thread.
//! Buffers are `f64` arrays whose length must equal the domain size.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;

use linterp::attribution::pixel_discussion;
use linterp::io::{default_blob_path, load_model};
use linterp::spectral::{svd_topk, SvdConfig};
use linterp::{capture, Error, InterpreterHandle, ModelSpec, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Index = 4,
    Io = 5,
    Load = 6,
    Numeric = 7,
    Refused = 8,
    Internal = 9,
}

/// Loaded model.
pub struct LtModel {
    inner: Arc<ModelSpec>,
}

/// Interpreter captured at one reference input.
pub struct LtInterpreter {
    inner: InterpreterHandle,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> LtStatus {
    match e {
        Error::Shape(_) => LtStatus::Shape,
        Error::Index { .. } => LtStatus::Index,
        Error::Config(_) | Error::Contract(_) => LtStatus::InvalidArgument,
        Error::Io(_) => LtStatus::Io,
        Error::Load(_) | Error::Parse(_) | Error::Json(_) => LtStatus::Load,
        Error::Numeric { .. } => LtStatus::Numeric,
        Error::Refused(_) => LtStatus::Refused,
        Error::State(_) => LtStatus::Internal,
    }
}

struct Fail(LtStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            LtStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            LtStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(LtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    let s = borrow(p, what)?;
    let s = CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Fail(LtStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a>(p: *const f64, len: usize, expected: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(Fail(LtStatus::Shape, format!("{what} has {len} elements, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn output<'a>(p: *mut f64, len: usize, expected: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    if len != expected {
        return Err(Fail(LtStatus::Shape, format!("{what} has {len} elements, expected {expected}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn lt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a manifest and weight blob. `weights` may be null to use the
/// manifest path with a `.bin` extension.
#[no_mangle]
pub unsafe extern "C" fn lt_model_load(
    manifest: *const c_char,
    weights: *const c_char,
    out: *mut *mut LtModel,
) -> LtStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let manifest = path_arg(manifest, "manifest")?;
        let blob = if weights.is_null() {
            default_blob_path(&manifest)
        } else {
            path_arg(weights, "weights")?
        };
        let model = load_model(&manifest, &blob)?;
        *out = Box::into_raw(Box::new(LtModel { inner: Arc::new(model) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lt_model_free(model: *mut LtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Element counts of the input and output domains.
#[no_mangle]
pub unsafe extern "C" fn lt_model_dims(model: *const LtModel, n_in: *mut usize, n_out: *mut usize) -> LtStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        if n_in.is_null() || n_out.is_null() {
            return Err(null("dims"));
        }
        let (i, o) = m.inner.dims();
        *n_in = i;
        *n_out = o;
        Ok(())
    })
}

/// Captures the frozen state at `x0` (input-shaped, `len` elements).
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_capture(
    model: *const LtModel,
    x0: *const f64,
    len: usize,
    out: *mut *mut LtInterpreter,
) -> LtStatus {
    guard(|| {
        let m = borrow(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let x = input(x0, len, m.inner.dims().0, "x0")?;
        let t = Tensor::new(m.inner.input_shape(), x.to_vec())?;
        let h = capture(m.inner.clone(), &t)?;
        *out = Box::into_raw(Box::new(LtInterpreter { inner: h }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_free(interp: *mut LtInterpreter) {
    if !interp.is_null() {
        drop(Box::from_raw(interp));
    }
}

type Map = fn(&InterpreterHandle, &Tensor) -> linterp::Result<Tensor>;

unsafe fn forward_map(
    interp: *const LtInterpreter,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
    adjoint: bool,
    f: Map,
) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let (in_shape, n_out) = if adjoint {
            (h.output_shape(), h.input_len())
        } else {
            (h.input_shape(), h.output_len())
        };
        let src = input(x, x_len, in_shape.iter().product(), "input buffer")?;
        let dst = output(y, y_len, n_out, "output buffer")?;
        let r = f(h, &Tensor::new(in_shape, src.to_vec())?)?;
        dst.copy_from_slice(r.data());
        Ok(())
    })
}

/// `y = F·x + r`.
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_apply(
    interp: *const LtInterpreter,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> LtStatus {
    forward_map(interp, x, x_len, y, y_len, false, InterpreterHandle::apply)
}

/// `y = F·x`.
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_apply_linear(
    interp: *const LtInterpreter,
    x: *const f64,
    x_len: usize,
    y: *mut f64,
    y_len: usize,
) -> LtStatus {
    forward_map(interp, x, x_len, y, y_len, false, InterpreterHandle::apply_linear)
}

/// `x = Fᵀ·y`.
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_apply_adjoint(
    interp: *const LtInterpreter,
    y: *const f64,
    y_len: usize,
    x: *mut f64,
    x_len: usize,
) -> LtStatus {
    forward_map(interp, y, y_len, x, x_len, true, InterpreterHandle::apply_adjoint)
}

#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_residual(interp: *const LtInterpreter, out: *mut f64, len: usize) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let dst = output(out, len, h.output_len(), "out")?;
        dst.copy_from_slice(h.residual()?.data());
        Ok(())
    })
}

/// Row `k` of `F` (input-shaped).
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_row(
    interp: *const LtInterpreter,
    k: usize,
    out: *mut f64,
    len: usize,
) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let dst = output(out, len, h.input_len(), "out")?;
        dst.copy_from_slice(h.row(k)?.data());
        Ok(())
    })
}

/// Column `k` of `F` (output-shaped).
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_column(
    interp: *const LtInterpreter,
    k: usize,
    out: *mut f64,
    len: usize,
) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let dst = output(out, len, h.output_len(), "out")?;
        dst.copy_from_slice(h.column(k)?.data());
        Ok(())
    })
}

/// Top-`k` singular triplets. `sigmas` holds `k` values; `v` (`k·n_in`) and
/// `u` (`k·n_out`) may be null when the vectors are not wanted.
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_svd(
    interp: *const LtInterpreter,
    k: usize,
    steps: usize,
    momentum: f64,
    seed: u64,
    sigmas: *mut f64,
    v: *mut f64,
    u: *mut f64,
) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let cfg = SvdConfig {
            k,
            steps,
            momentum,
            seed,
            ..SvdConfig::default()
        };
        cfg.validate()?;
        let dst = output(sigmas, k, k, "sigmas")?;
        let res = svd_topk(h, &cfg)?;
        for (i, t) in res.triplets.iter().enumerate() {
            dst[i] = t.sigma;
            if !v.is_null() {
                let n = h.input_len();
                std::slice::from_raw_parts_mut(v.add(i * n), n).copy_from_slice(t.v.data());
            }
            if !u.is_null() {
                let m = h.output_len();
                std::slice::from_raw_parts_mut(u.add(i * m), m).copy_from_slice(t.u.data());
            }
        }
        Ok(())
    })
}

/// Pixel discussion map for score `class` (input-shaped). Chains only.
#[no_mangle]
pub unsafe extern "C" fn lt_interpreter_pixel_discussion(
    interp: *const LtInterpreter,
    class: usize,
    out: *mut f64,
    len: usize,
) -> LtStatus {
    guard(|| {
        let h = &borrow(interp, "interpreter")?.inner;
        let dst = output(out, len, h.input_len(), "out")?;
        dst.copy_from_slice(pixel_discussion(h, class)?.map.data());
        Ok(())
    })
}

/// Static name of a status code.
#[no_mangle]
pub extern "C" fn lt_status_name(status: LtStatus) -> *const c_char {
    let s: &'static CStr = match status {
        LtStatus::Ok => c"ok",
        LtStatus::NullPointer => c"null pointer",
        LtStatus::InvalidArgument => c"invalid argument",
        LtStatus::Shape => c"shape mismatch",
        LtStatus::Index => c"index out of range",
        LtStatus::Io => c"i/o error",
        LtStatus::Load => c"load error",
        LtStatus::Numeric => c"numeric error",
        LtStatus::Refused => c"refused",
        LtStatus::Internal => c"internal error",
    };
    s.as_ptr()
}

