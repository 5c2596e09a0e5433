//! C ABI for the dyncnn inference engine.
//!
//! Handles are opaque; every function returns a status code (see the header)
//! and the last error message is retrievable per thread via
//! `dyncnn_last_error`. See `include/dyncnn.h` for the C declarations.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dyncnn::checkpoint::load_checkpoint;
use dyncnn::cost::{CostConfig, FlopTally, Placement};
use dyncnn::data::NormStats;
use dyncnn::error::Error;
use dyncnn::gating::Relu1Mode;
use dyncnn::model::{argmax_row, Network};
use dyncnn::tensor::Tensor;

pub const DYNCNN_OK: i32 = 0;
pub const DYNCNN_ERR: i32 = 1;
pub const DYNCNN_ERR_CONFIG: i32 = 2;
pub const DYNCNN_ERR_DATA: i32 = 3;
pub const DYNCNN_ERR_NUMERIC: i32 = 4;
pub const DYNCNN_ERR_ARGUMENT: i32 = 5;

pub const DYNCNN_PLACEMENT_DENSE: i32 = 0;
pub const DYNCNN_PLACEMENT_PARALLEL: i32 = 1;
pub const DYNCNN_PLACEMENT_SEQUENTIAL: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn code_of(err: &Error) -> i32 {
    err.exit_code()
}

/// Opaque model handle: a loaded network plus its normalization constants.
pub struct DyncnnModel {
    net: Network<f32>,
    norm: Option<NormStats>,
}

/// Last error message for this thread, empty string if none. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dyncnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint file into a new model handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dyncnn_model_load(path: *const c_char, out: *mut *mut DyncnnModel) -> i32 {
    if path.is_null() || out.is_null() {
        set_error("null pointer argument");
        return DYNCNN_ERR_ARGUMENT;
    }
    *out = ptr::null_mut();
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => s,
        Err(_) => {
            set_error("path is not valid UTF-8");
            return DYNCNN_ERR_ARGUMENT;
        }
    };
    match catch_unwind(|| load_checkpoint::<f32>(Path::new(path))) {
        Ok(Ok((net, norm))) => {
            *out = Box::into_raw(Box::new(DyncnnModel { net, norm }));
            DYNCNN_OK
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            code_of(&e)
        }
        Err(_) => {
            set_error("internal panic while loading checkpoint");
            DYNCNN_ERR
        }
    }
}

/// Release a model handle. Passing NULL is a no-op.
///
/// # Safety
/// `model` must be a pointer returned by `dyncnn_model_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn dyncnn_model_free(model: *mut DyncnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn dyncnn_model_classes(model: *const DyncnnModel) -> i32 {
    if model.is_null() {
        return -1;
    }
    (*model).net.classes as i32
}

/// Expected input length in floats (channels * height * width).
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn dyncnn_model_input_len(model: *const DyncnnModel) -> i64 {
    if model.is_null() {
        return -1;
    }
    let m = &*model;
    let (h, w) = m.net.input_hw;
    (m.net.stem.conv.in_channels() * h * w) as i64
}

/// Classify one image. `pixels` is channel-major (all of channel 0, then
/// channel 1, ...), values in [0,1]; normalization stored in the checkpoint
/// is applied internally. `placement` selects the execution/accounting mode.
/// On success writes the predicted class to `label_out` and, if non-NULL, the
/// per-instance FLOPs to `flops_out`.
///
/// # Safety
/// `pixels` must point to `len` floats; out-pointers must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn dyncnn_predict(
    model: *const DyncnnModel,
    pixels: *const f32,
    len: usize,
    placement: i32,
    label_out: *mut i32,
    flops_out: *mut u64,
) -> i32 {
    if model.is_null() || pixels.is_null() || label_out.is_null() {
        set_error("null pointer argument");
        return DYNCNN_ERR_ARGUMENT;
    }
    let m = &*model;
    let expected = dyncnn_model_input_len(model);
    if len as i64 != expected {
        set_error(&format!("input length {len} does not match expected {expected}"));
        return DYNCNN_ERR_ARGUMENT;
    }
    let placement = match placement {
        DYNCNN_PLACEMENT_DENSE => Placement::Dense,
        DYNCNN_PLACEMENT_PARALLEL => Placement::Parallel,
        DYNCNN_PLACEMENT_SEQUENTIAL => Placement::Sequential,
        other => {
            set_error(&format!("unknown placement {other}"));
            return DYNCNN_ERR_ARGUMENT;
        }
    };
    let raw = std::slice::from_raw_parts(pixels, len);
    let result = catch_unwind(AssertUnwindSafe(|| {
        let (h, w) = m.net.input_hw;
        let c = m.net.stem.conv.in_channels();
        let mut data = raw.to_vec();
        if let Some(norm) = &m.norm {
            let hw = h * w;
            for (ci, chunk) in data.chunks_mut(hw).enumerate().take(c) {
                let mean = norm.mean[ci.min(2)] as f32;
                let inv = 1.0 / norm.std[ci.min(2)] as f32;
                for v in chunk {
                    *v = (*v - mean) * inv;
                }
            }
        }
        let x = Tensor::new(vec![1, c, h, w], data)?;
        let mut tally = FlopTally::new(&CostConfig::new(placement));
        let logits = if placement == Placement::Dense {
            m.net.forward_dense(&x, Relu1Mode::Inference, Some(&mut tally))?.0
        } else {
            m.net.forward_skipping(&x, placement, Some(&mut tally))?.0
        };
        Ok::<(usize, u64), Error>((argmax_row(logits.data()), tally.total()))
    }));
    match result {
        Ok(Ok((label, flops))) => {
            *label_out = label as i32;
            if !flops_out.is_null() {
                *flops_out = flops;
            }
            DYNCNN_OK
        }
        Ok(Err(e)) => {
            set_error(&e.to_string());
            code_of(&e)
        }
        Err(_) => {
            set_error("internal panic during prediction");
            DYNCNN_ERR
        }
    }
}
