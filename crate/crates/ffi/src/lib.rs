//! C interface for loading datasets and trained checkpoints and rendering
//! frames. Objects are opaque handles released with their `_free`
//! function; every fallible call returns an [`NhpStatus`] and leaves a
//! message for [`nhp_last_error`] on the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nhp_core::field::Model;
use nhp_core::synth::{read_dataset, CaptureSet};
use nhp_core::train::{evaluate, render_frame, Checkpoint, Protocol};
use nhp_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    BufferTooSmall = 6,
    Panic = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NhpProtocol {
    Pose = 0,
    Identity = 1,
    Seen = 2,
}

/// A dataset directory read into memory.
pub struct NhpDataset {
    data: CaptureSet,
}

/// Trained weights with their configuration, ready for rendering.
pub struct NhpModel {
    checkpoint: Checkpoint<f32>,
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Failure(NhpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::BehindCamera(_) | Error::OutOfBounds(..) => NhpStatus::InvalidArgument,
            Error::Io { .. } => NhpStatus::Io,
            Error::Format(_) | Error::Json(_) | Error::Image { .. } | Error::ParamMismatch { .. } => NhpStatus::Format,
            Error::NonFinite(_) => NhpStatus::NonFinite,
            Error::Shape { .. } => NhpStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: NhpStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

/// Runs `f`, recording its error (or panic) for `nhp_last_error`.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NhpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NhpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            NhpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NhpStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NhpStatus::InvalidArgument, format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(NhpStatus::NullPointer, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(fail(NhpStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn nhp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated,
/// always NUL-terminated when `len > 0`) and returns the full message length
/// in bytes, excluding the terminator. The message is empty after a
/// successful call.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nhp_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Reads a dataset directory written by `nhp gen-data`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nhp_dataset_open(dir: *const c_char, out: *mut *mut NhpDataset) -> NhpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        let data = read_dataset(&dir)?;
        *out = Box::into_raw(Box::new(NhpDataset { data }));
        Ok(())
    })
}

/// # Safety
/// `dataset` must be null or a handle from `nhp_dataset_open` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhp_dataset_free(dataset: *mut NhpDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Subject, frame and camera counts and the image size of a dataset. Any
/// output pointer may be null.
///
/// # Safety
/// `dataset` must be a live handle; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn nhp_dataset_info(
    dataset: *const NhpDataset,
    subjects: *mut usize,
    frames: *mut usize,
    views: *mut usize,
    width: *mut usize,
    height: *mut usize,
) -> NhpStatus {
    guard(|| {
        let d = &ref_arg(dataset, "dataset")?.data;
        for (p, v) in [
            (subjects, d.subjects.len()),
            (frames, d.frames),
            (views, d.cameras.len()),
            (width, d.width()),
            (height, d.height()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `nhp train` in either precision.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn nhp_model_load(path: *const c_char, out: *mut *mut NhpModel) -> NhpStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let checkpoint = Checkpoint::<f64>::load(&path)?.cast::<f32>();
        let model = checkpoint.model()?;
        *out = Box::into_raw(Box::new(NhpModel { checkpoint, model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `nhp_model_load` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn nhp_model_free(model: *mut NhpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders `subject` at `frame` from dataset camera `view` into `rgb`, row
/// major, three floats per pixel in [0, 1]. `rgb_len` is the buffer length
/// in floats and must be at least `3·width·height`. `samples` of 0 uses the
/// checkpoint's training setting.
///
/// # Safety
/// Handles must be live, `subject` NUL-terminated and `rgb` must point to
/// `rgb_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn nhp_render(
    model: *const NhpModel,
    dataset: *const NhpDataset,
    subject: *const c_char,
    frame: usize,
    view: usize,
    samples: usize,
    rgb: *mut f32,
    rgb_len: usize,
) -> NhpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let data = &ref_arg(dataset, "dataset")?.data;
        let subject = data.subject(str_arg(subject, "subject")?)?;
        out_arg(rgb, "rgb")?;
        let cam = data
            .cameras
            .get(view)
            .ok_or_else(|| fail(NhpStatus::InvalidArgument, format!("camera {view} not in dataset")))?;
        let need = 3 * cam.width * cam.height;
        if rgb_len < need {
            return Err(fail(
                NhpStatus::BufferTooSmall,
                format!("rgb buffer holds {rgb_len} floats, {need} needed"),
            ));
        }
        let cfg = &m.checkpoint.config;
        let samples = if samples == 0 { cfg.train.samples } else { samples };
        let out = render_frame(&m.model, &m.checkpoint.store, cfg, data, subject, frame, cam, samples)?;
        std::slice::from_raw_parts_mut(rgb, need).copy_from_slice(&out.image.data);
        Ok(())
    })
}

/// Scores the model under an evaluation protocol (an [`NhpProtocol`] value)
/// of its configuration and writes the mean PSNR (dB) and SSIM. Either
/// output may be null.
///
/// # Safety
/// Handles must be live; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn nhp_evaluate(
    model: *const NhpModel,
    dataset: *const NhpDataset,
    protocol: u32,
    psnr: *mut f64,
    ssim: *mut f64,
) -> NhpStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let data = &ref_arg(dataset, "dataset")?.data;
        let protocol = match protocol {
            p if p == NhpProtocol::Pose as u32 => Protocol::Pose,
            p if p == NhpProtocol::Identity as u32 => Protocol::Identity,
            p if p == NhpProtocol::Seen as u32 => Protocol::Seen,
            p => return Err(fail(NhpStatus::InvalidArgument, format!("unknown protocol {p}"))),
        };
        let report = evaluate(&m.model, &m.checkpoint.store, &m.checkpoint.config, data, protocol)?;
        if !report.all_finite() {
            return Err(fail(NhpStatus::NonFinite, "rendered images contain non-finite pixels"));
        }
        if !psnr.is_null() {
            *psnr = report.mean_psnr();
        }
        if !ssim.is_null() {
            *ssim = report.mean_ssim();
        }
        Ok(())
    })
}
