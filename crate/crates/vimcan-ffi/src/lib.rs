//! C ABI for the pose estimator.
//!
//! Handles are heap-allocated and opaque. Every fallible entry point returns
//! a [`VimcanStatus`] and leaves a message readable through
//! [`vimcan_last_error`]; panics are caught at the boundary and surface as
//! [`VimcanStatus::Panicked`] instead of unwinding into the caller.
//!
//! The generated header lives in `include/vimcan.h` and is refreshed on
//! every build.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use vimcan::checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
use vimcan::model::{init_model, ModelConfig};
use vimcan::params::Ctx;
use vimcan::skeleton::{IMU_COUNT, JOINT_COUNT};
use vimcan::tensor::Tensor;

/// Bumped whenever exported symbols or their contracts change.
pub const VIMCAN_ABI_VERSION: u32 = 1;

/// Opaque model handle. Created by `vimcan_model_new` or
/// `vimcan_model_load`, released by `vimcan_model_free`. A handle may be
/// shared across threads for reading (`forward`, `save`, `param_count`), but
/// creation and destruction must not race with other calls on the same
/// handle.
pub struct VimcanModel {
    inner: vimcan::model::VimcanModel,
}

/// Outcome of a fallible call.
#[repr(i32)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum VimcanStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The configuration JSON failed to parse or validate.
    BadConfig = 3,
    /// The filesystem refused a read or write.
    Io = 4,
    /// The checkpoint file was readable but its contents are unusable.
    BadCheckpoint = 5,
    /// Input dimensions the model cannot accept.
    BadInput = 6,
    /// An internal invariant failed; the panic was contained.
    Panicked = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let clean = msg.replace('\0', "?");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::default();
    });
}

fn fail(status: VimcanStatus, msg: impl AsRef<str>) -> VimcanStatus {
    set_error(msg.as_ref());
    status
}

fn guard(body: impl FnOnce() -> VimcanStatus) -> VimcanStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unidentified panic".to_string());
            set_error(&msg);
            VimcanStatus::Panicked
        }
    }
}

unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, VimcanStatus> {
    if ptr.is_null() {
        return Err(fail(VimcanStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(VimcanStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

/// ABI revision compiled into the library.
#[no_mangle]
pub extern "C" fn vimcan_abi_version() -> u32 {
    VIMCAN_ABI_VERSION
}

/// Message for the most recent failure on the calling thread, NUL-terminated
/// and empty after a success. The pointer stays valid until the next library
/// call on the same thread; copy the string if it must outlive that.
#[no_mangle]
pub extern "C" fn vimcan_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Builds a freshly initialized model. `config_json` is a JSON object with
/// the model hyperparameters; absent fields take their defaults, and a null
/// pointer selects the full default configuration. Identical `config_json`
/// and `seed` always produce the same parameters. On success `*out` owns the
/// handle.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_new(
    config_json: *const c_char,
    seed: u64,
    out: *mut *mut VimcanModel,
) -> VimcanStatus {
    guard(|| {
        clear_error();
        let Some(out) = out.as_mut() else {
            return fail(VimcanStatus::NullArgument, "out is null");
        };
        *out = ptr::null_mut();
        let cfg = if config_json.is_null() {
            ModelConfig::default()
        } else {
            let text = match read_str(config_json, "config_json") {
                Ok(s) => s,
                Err(status) => return status,
            };
            match serde_json::from_str::<ModelConfig>(text) {
                Ok(c) => c,
                Err(e) => return fail(VimcanStatus::BadConfig, format!("config: {e}")),
            }
        };
        match init_model(&cfg, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(VimcanModel { inner }));
                VimcanStatus::Ok
            }
            Err(e) => fail(VimcanStatus::BadConfig, e.to_string()),
        }
    })
}

/// Restores a model from a checkpoint written by `vimcan_model_save` or the
/// CLI trainer. On success `*out` owns the handle.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_load(
    path: *const c_char,
    out: *mut *mut VimcanModel,
) -> VimcanStatus {
    guard(|| {
        clear_error();
        let Some(out) = out.as_mut() else {
            return fail(VimcanStatus::NullArgument, "out is null");
        };
        *out = ptr::null_mut();
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match load_checkpoint(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(VimcanModel { inner }));
                VimcanStatus::Ok
            }
            Err(CheckpointError::IoError(e)) => fail(VimcanStatus::Io, format!("{path}: {e}")),
            Err(e) => fail(VimcanStatus::BadCheckpoint, e.to_string()),
        }
    })
}

/// Writes the model to `path` as a checkpoint loadable by
/// `vimcan_model_load` and the CLI. Saving the same model twice produces
/// byte-identical files.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_save(
    model: *const VimcanModel,
    path: *const c_char,
) -> VimcanStatus {
    guard(|| {
        clear_error();
        let Some(model) = model.as_ref() else {
            return fail(VimcanStatus::NullArgument, "model is null");
        };
        let path = match read_str(path, "path") {
            Ok(s) => s,
            Err(status) => return status,
        };
        match save_checkpoint(&model.inner, path) {
            Ok(()) => VimcanStatus::Ok,
            Err(CheckpointError::IoError(e)) => fail(VimcanStatus::Io, format!("{path}: {e}")),
            Err(e) => fail(VimcanStatus::BadCheckpoint, e.to_string()),
        }
    })
}

/// Number of trainable parameters; zero for a null handle.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_param_count(model: *const VimcanModel) -> usize {
    catch_unwind(AssertUnwindSafe(|| {
        model.as_ref().map_or(0, |m| m.inner.count_params())
    }))
    .unwrap_or(0)
}

/// Runs inference on one sequence. `keypoints` holds `frames * 17 * 2`
/// doubles laid out frame-major as (frame, joint, xy) in normalized image
/// coordinates; `imu` holds `frames * 6 * 4` doubles as (frame, sensor,
/// wxyz) orientation quaternions; `out_positions` receives `frames * 17 * 3`
/// doubles as (frame, joint, xyz) root-relative positions in meters. The
/// caller guarantees the buffers really are that large and do not overlap.
/// Sequences shorter than two frames or beyond the scan capacity are
/// rejected with `BadInput`.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_forward(
    model: *const VimcanModel,
    keypoints: *const f64,
    imu: *const f64,
    frames: usize,
    out_positions: *mut f64,
) -> VimcanStatus {
    guard(|| {
        clear_error();
        let Some(model) = model.as_ref() else {
            return fail(VimcanStatus::NullArgument, "model is null");
        };
        if keypoints.is_null() {
            return fail(VimcanStatus::NullArgument, "keypoints is null");
        }
        if imu.is_null() {
            return fail(VimcanStatus::NullArgument, "imu is null");
        }
        if out_positions.is_null() {
            return fail(VimcanStatus::NullArgument, "out_positions is null");
        }
        // joints*2 is the largest per-frame multiplier, so checking it
        // covers the imu slice length too
        let Some(kp_len) = frames.checked_mul(JOINT_COUNT * 2) else {
            return fail(VimcanStatus::BadInput, "frame count overflows");
        };
        let kp_vals = std::slice::from_raw_parts(keypoints, kp_len);
        let imu_vals = std::slice::from_raw_parts(imu, frames * IMU_COUNT * 4);
        let kps = match Tensor::from_vec(&[frames, JOINT_COUNT, 2], kp_vals.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(VimcanStatus::BadInput, e.to_string()),
        };
        let quats = match Tensor::from_vec(&[frames, IMU_COUNT, 4], imu_vals.to_vec()) {
            Ok(t) => t,
            Err(e) => return fail(VimcanStatus::BadInput, e.to_string()),
        };
        let mut ctx = Ctx::frozen(&model.inner.arena);
        let pred = match model.inner.forward(&mut ctx, &kps, &quats) {
            Ok(t) => t,
            Err(e) => return fail(VimcanStatus::BadInput, e.to_string()),
        };
        let data = pred.data();
        debug_assert_eq!(data.len(), frames * JOINT_COUNT * 3);
        ptr::copy_nonoverlapping(data.as_ptr(), out_positions, data.len());
        VimcanStatus::Ok
    })
}

/// Releases a handle. Null is accepted and ignored. The handle must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn vimcan_model_free(model: *mut VimcanModel) {
    if !model.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(model))));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    const CFG: &str = r#"{"d_e":8,"d_g":16,"global_blocks":1,"heads":2,"state":4}"#;

    fn new_model() -> *mut VimcanModel {
        let cfg = CString::new(CFG).unwrap();
        let mut handle: *mut VimcanModel = ptr::null_mut();
        let status = unsafe { vimcan_model_new(cfg.as_ptr(), 7, &mut handle) };
        assert_eq!(status, VimcanStatus::Ok, "{}", last_error_string());
        assert!(!handle.is_null());
        handle
    }

    fn last_error_string() -> String {
        let p = vimcan_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    fn forward_vec(handle: *const VimcanModel, frames: usize) -> Vec<f64> {
        let kps: Vec<f64> =
            (0..frames * 17 * 2).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
        let mut imu = vec![0.0; frames * 6 * 4];
        for q in imu.chunks_mut(4) {
            q[0] = 1.0;
        }
        let mut out = vec![f64::NAN; frames * 17 * 3];
        let status = unsafe {
            vimcan_model_forward(handle, kps.as_ptr(), imu.as_ptr(), frames, out.as_mut_ptr())
        };
        assert_eq!(status, VimcanStatus::Ok, "{}", last_error_string());
        out
    }

    #[test]
    fn abi_version_is_one() {
        assert_eq!(vimcan_abi_version(), 1);
    }

    #[test]
    fn create_forward_save_load_round_trip() {
        let handle = new_model();
        let n = unsafe { vimcan_model_param_count(handle) };
        assert!(n > 0);
        let first = forward_vec(handle, 4);
        assert!(first.iter().all(|v| v.is_finite()));
        assert_eq!(last_error_string(), "");

        let dir = tempfile::tempdir().unwrap();
        let path =
            CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
        let status = unsafe { vimcan_model_save(handle, path.as_ptr()) };
        assert_eq!(status, VimcanStatus::Ok, "{}", last_error_string());

        let mut restored: *mut VimcanModel = ptr::null_mut();
        let status = unsafe { vimcan_model_load(path.as_ptr(), &mut restored) };
        assert_eq!(status, VimcanStatus::Ok, "{}", last_error_string());
        assert_eq!(unsafe { vimcan_model_param_count(restored) }, n);

        // restored weights are bit-identical, so inference must be too
        let second = forward_vec(restored, 4);
        assert_eq!(first, second);

        unsafe {
            vimcan_model_free(handle);
            vimcan_model_free(restored);
            vimcan_model_free(ptr::null_mut());
        }
    }

    #[test]
    fn seed_controls_initialization() {
        let cfg = CString::new(CFG).unwrap();
        let mut a: *mut VimcanModel = ptr::null_mut();
        let mut b: *mut VimcanModel = ptr::null_mut();
        unsafe {
            assert_eq!(vimcan_model_new(cfg.as_ptr(), 7, &mut a), VimcanStatus::Ok);
            assert_eq!(vimcan_model_new(cfg.as_ptr(), 8, &mut b), VimcanStatus::Ok);
        }
        let ya = forward_vec(a, 3);
        let yb = forward_vec(b, 3);
        assert_ne!(ya, yb);
        unsafe {
            vimcan_model_free(a);
            vimcan_model_free(b);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let cfg = CString::new(CFG).unwrap();
        let status = unsafe { vimcan_model_new(cfg.as_ptr(), 0, ptr::null_mut()) };
        assert_eq!(status, VimcanStatus::NullArgument);
        assert!(!last_error_string().is_empty());

        let bad = CString::new(r#"{"d_g": "wide"}"#).unwrap();
        let mut h: *mut VimcanModel = ptr::null_mut();
        let status = unsafe { vimcan_model_new(bad.as_ptr(), 0, &mut h) };
        assert_eq!(status, VimcanStatus::BadConfig);
        assert!(h.is_null());
        assert!(last_error_string().contains("config"));

        let junk: [c_char; 2] = [-1, 0];
        let status = unsafe { vimcan_model_load(junk.as_ptr(), &mut h) };
        assert_eq!(status, VimcanStatus::InvalidUtf8);

        let missing = CString::new("/nonexistent/vimcan.ckpt").unwrap();
        let status = unsafe { vimcan_model_load(missing.as_ptr(), &mut h) };
        assert_eq!(status, VimcanStatus::Io);
        assert!(h.is_null());

        let status = unsafe { vimcan_model_save(ptr::null(), missing.as_ptr()) };
        assert_eq!(status, VimcanStatus::NullArgument);

        assert_eq!(unsafe { vimcan_model_param_count(ptr::null()) }, 0);
    }

    #[test]
    fn forward_validates_inputs() {
        let handle = new_model();
        let kps = vec![0.0; 17 * 2];
        let imu = vec![0.0; 6 * 4];
        let mut out = vec![0.0; 17 * 3];

        // one frame is below the model minimum
        let status = unsafe {
            vimcan_model_forward(handle, kps.as_ptr(), imu.as_ptr(), 1, out.as_mut_ptr())
        };
        assert_eq!(status, VimcanStatus::BadInput);
        assert!(!last_error_string().is_empty());

        let status = unsafe {
            vimcan_model_forward(handle, ptr::null(), imu.as_ptr(), 1, out.as_mut_ptr())
        };
        assert_eq!(status, VimcanStatus::NullArgument);
        let status = unsafe {
            vimcan_model_forward(ptr::null(), kps.as_ptr(), imu.as_ptr(), 1, out.as_mut_ptr())
        };
        assert_eq!(status, VimcanStatus::NullArgument);

        unsafe { vimcan_model_free(handle) };
    }

    #[test]
    fn header_exposes_the_surface() {
        let header = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/include/vimcan.h"
        ))
        .unwrap();
        for needle in [
            "VimcanModel",
            "VimcanStatus",
            "vimcan_abi_version",
            "vimcan_last_error",
            "vimcan_model_new",
            "vimcan_model_load",
            "vimcan_model_save",
            "vimcan_model_param_count",
            "vimcan_model_forward",
            "vimcan_model_free",
            "VIMCAN_STATUS_BAD_CHECKPOINT",
        ] {
            assert!(header.contains(needle), "header missing {needle}");
        }
    }
}
