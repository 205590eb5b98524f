//! C ABI over the numeric core: noise schedule walks, discrepancy maps,
//! segmentation metrics, and the pipeline stage runner.
//!
//! Conventions at the boundary:
//! - every entry point returns an [`MdfStatus`] and never unwinds into C;
//! - arrays cross as plain buffers with explicit lengths, row-major;
//! - the schedule is an opaque handle created by [`mdf_schedule_new`] and
//!   released by [`mdf_schedule_free`];
//! - on any non-OK status, [`mdf_last_error_message`] returns a
//!   human-readable reason, valid on the calling thread until its next
//!   `mdf_` call.

use maskdiff::config::ExperimentConfig;
use maskdiff::discrepancy::{inter_discrepancy, intra_discrepancy};
use maskdiff::metrics::{auroc, dice, miou, pixel_accuracy};
use maskdiff::pipeline::{self, PipelineError, StageContext};
use maskdiff::schedule::NoiseSchedule;
use ndarray::{ArrayView1, ArrayView2, ArrayView3};
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

/// Result of every `mdf_` call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdfStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A value argument was out of range or otherwise malformed.
    InvalidArgument = 2,
    /// Buffer lengths or array shapes disagree.
    ShapeMismatch = 3,
    /// A pipeline stage cannot run in the current run-directory state
    /// (missing prerequisite, lock held, stale inputs under strict mode).
    PipelineState = 4,
    /// The operation itself failed; see mdf_last_error_message.
    RuntimeError = 5,
    /// An internal panic was caught at the boundary.
    Panic = 6,
}

/// Noise schedule handle; contents are not visible to C.
pub struct MdfSchedule(NoiseSchedule);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = owned);
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = CString::default());
}

/// Explanation of the most recent failure on this thread, empty after a
/// success. The pointer is invalidated by the thread's next `mdf_` call.
#[no_mangle]
pub extern "C" fn mdf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Static name for a status code ("ok", "null_argument", ...).
#[no_mangle]
pub extern "C" fn mdf_status_name(status: MdfStatus) -> *const c_char {
    let name: &'static CStr = match status {
        MdfStatus::Ok => c"ok",
        MdfStatus::NullArgument => c"null_argument",
        MdfStatus::InvalidArgument => c"invalid_argument",
        MdfStatus::ShapeMismatch => c"shape_mismatch",
        MdfStatus::PipelineState => c"pipeline_state",
        MdfStatus::RuntimeError => c"runtime_error",
        MdfStatus::Panic => c"panic",
    };
    name.as_ptr()
}

/// Runs `f` with panics converted to MdfStatus::Panic; successes clear the
/// thread's error slot so stale messages never outlive their failure.
fn guarded<F: FnOnce() -> MdfStatus>(f: F) -> MdfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => {
            if status == MdfStatus::Ok {
                clear_error();
            }
            status
        }
        Err(_) => {
            set_error("internal panic caught at the FFI boundary");
            MdfStatus::Panic
        }
    }
}

macro_rules! require_nonnull {
    ($($ptr:ident),+ $(,)?) => {
        $(
            if $ptr.is_null() {
                set_error(concat!("argument `", stringify!($ptr), "` is null"));
                return MdfStatus::NullArgument;
            }
        )+
    };
}

// ---------------------------------------------------------------------------
// schedule

/// Creates a linear-beta schedule with `steps` steps over
/// [`beta_start`, `beta_end`] and stores the handle in `*out`.
///
/// # Safety
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_new(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut MdfSchedule,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(out);
        match NoiseSchedule::linear(steps, beta_start, beta_end) {
            Ok(s) => {
                unsafe { *out = Box::into_raw(Box::new(MdfSchedule(s))) };
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::InvalidArgument
            }
        }
    })
}

/// Releases a schedule handle. Passing null is a no-op.
///
/// # Safety
/// `schedule` must be a handle from [`mdf_schedule_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_free(schedule: *mut MdfSchedule) {
    if !schedule.is_null() {
        drop(unsafe { Box::from_raw(schedule) });
    }
}

unsafe fn schedule_scalar(
    schedule: *const MdfSchedule,
    t: usize,
    out: *mut f64,
    get: impl Fn(&NoiseSchedule, usize) -> f64,
) -> MdfStatus {
    require_nonnull!(schedule, out);
    let s = unsafe { &(*schedule).0 };
    if t < 1 || t > s.steps() {
        set_error(&format!("step {t} outside 1..={}", s.steps()));
        return MdfStatus::InvalidArgument;
    }
    unsafe { *out = get(s, t) };
    MdfStatus::Ok
}

/// Step count of the schedule.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_steps(
    schedule: *const MdfSchedule,
    out: *mut usize,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(schedule, out);
        unsafe { *out = (*schedule).0.steps() };
        MdfStatus::Ok
    })
}

/// Variance increment at 1-based step `t`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_beta(
    schedule: *const MdfSchedule,
    t: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { schedule_scalar(schedule, t, out, |s, t| s.beta(t)) })
}

/// Signal retention `1 - beta` at step `t`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_alpha(
    schedule: *const MdfSchedule,
    t: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { schedule_scalar(schedule, t, out, |s, t| s.alpha(t)) })
}

/// Cumulative signal retention up to step `t`.
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_alpha_bar(
    schedule: *const MdfSchedule,
    t: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { schedule_scalar(schedule, t, out, |s, t| s.alpha_bar(t)) })
}

/// Reverse-step noise scale at step `t` (zero at t = 1).
///
/// # Safety
/// `schedule` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_sigma(
    schedule: *const MdfSchedule,
    t: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { schedule_scalar(schedule, t, out, |s, t| s.sigma(t)) })
}

/// Diffuses `x0` to step `t`: `out = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
/// All three buffers hold `len` contiguous f32 values.
///
/// # Safety
/// `x0`, `eps`, and `out` must each point to `len` readable (writable for
/// `out`) f32 values; `schedule` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_q_sample(
    schedule: *const MdfSchedule,
    x0: *const f32,
    eps: *const f32,
    out: *mut f32,
    len: usize,
    t: usize,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(schedule, x0, eps, out);
        let s = unsafe { &(*schedule).0 };
        let x0 = ArrayView1::from(unsafe { std::slice::from_raw_parts(x0, len) });
        let eps = ArrayView1::from(unsafe { std::slice::from_raw_parts(eps, len) });
        match s.q_sample(x0, t, eps) {
            Ok(res) => {
                unsafe { std::slice::from_raw_parts_mut(out, len) }
                    .copy_from_slice(res.as_slice().unwrap());
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::InvalidArgument
            }
        }
    })
}

/// One reverse denoising step from `x_t` to `x_{t-1}` given the predicted
/// noise and a unit Gaussian draw `z`. `z` may be null for a deterministic
/// step (and is ignored at t = 1 regardless).
///
/// # Safety
/// `x_t`, `eps_hat`, `out`, and (when non-null) `z` must each point to `len`
/// f32 values, `out` writable; `schedule` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mdf_schedule_reverse_step(
    schedule: *const MdfSchedule,
    x_t: *const f32,
    eps_hat: *const f32,
    z: *const f32,
    out: *mut f32,
    len: usize,
    t: usize,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(schedule, x_t, eps_hat, out);
        let s = unsafe { &(*schedule).0 };
        let x_t = ArrayView1::from(unsafe { std::slice::from_raw_parts(x_t, len) });
        let eps_hat = ArrayView1::from(unsafe { std::slice::from_raw_parts(eps_hat, len) });
        let zeros;
        let z = if z.is_null() {
            zeros = vec![0.0f32; len];
            ArrayView1::from(zeros.as_slice())
        } else {
            ArrayView1::from(unsafe { std::slice::from_raw_parts(z, len) })
        };
        match s.reverse_step(x_t, eps_hat, t, z) {
            Ok(res) => {
                unsafe { std::slice::from_raw_parts_mut(out, len) }
                    .copy_from_slice(res.as_slice().unwrap());
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::InvalidArgument
            }
        }
    })
}

// ---------------------------------------------------------------------------
// discrepancy maps

/// Per-pixel mean absolute channel difference between two reconstructions.
/// Inputs are channels x height x width, row-major; `out` receives
/// height x width values.
///
/// # Safety
/// `mu_mixture` and `mu_normal` must each point to
/// `channels * height * width` f32 values and `out` to `height * width`
/// writable f32 values.
#[no_mangle]
pub unsafe extern "C" fn mdf_inter_discrepancy(
    mu_mixture: *const f32,
    mu_normal: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(mu_mixture, mu_normal, out);
        let n = channels * height * width;
        let shape = (channels, height, width);
        let a = unsafe { std::slice::from_raw_parts(mu_mixture, n) };
        let b = unsafe { std::slice::from_raw_parts(mu_normal, n) };
        let (Ok(a), Ok(b)) = (
            ArrayView3::from_shape(shape, a),
            ArrayView3::from_shape(shape, b),
        ) else {
            set_error("channels * height * width does not describe the buffers");
            return MdfStatus::ShapeMismatch;
        };
        match inter_discrepancy(a, b) {
            Ok(map) => {
                unsafe { std::slice::from_raw_parts_mut(out, height * width) }
                    .copy_from_slice(map.as_slice().unwrap());
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::ShapeMismatch
            }
        }
    })
}

/// Per-pixel RMS spread of ensemble members around their mean. `members`
/// holds `n_members` stacked channels x height x width blocks; `out`
/// receives height x width values.
///
/// # Safety
/// `members` must point to `n_members * channels * height * width` f32
/// values, `mu` to `channels * height * width`, and `out` to
/// `height * width` writable f32 values.
#[no_mangle]
pub unsafe extern "C" fn mdf_intra_discrepancy(
    members: *const f32,
    n_members: usize,
    mu: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out: *mut f32,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(members, mu, out);
        let block = channels * height * width;
        let shape = (channels, height, width);
        let all = unsafe { std::slice::from_raw_parts(members, n_members * block) };
        let member_arrays: Vec<_> = (0..n_members)
            .map(|j| {
                ArrayView3::from_shape(shape, &all[j * block..(j + 1) * block])
                    .map(|v| v.to_owned())
            })
            .collect::<Result<_, _>>()
            .unwrap_or_default();
        if member_arrays.len() != n_members {
            set_error("channels * height * width does not describe the buffers");
            return MdfStatus::ShapeMismatch;
        }
        let mu = unsafe { std::slice::from_raw_parts(mu, block) };
        let Ok(mu) = ArrayView3::from_shape(shape, mu) else {
            set_error("channels * height * width does not describe the buffers");
            return MdfStatus::ShapeMismatch;
        };
        match intra_discrepancy(&member_arrays, mu) {
            Ok(map) => {
                unsafe { std::slice::from_raw_parts_mut(out, height * width) }
                    .copy_from_slice(map.as_slice().unwrap());
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::InvalidArgument
            }
        }
    })
}

// ---------------------------------------------------------------------------
// segmentation metrics

unsafe fn metric_on_masks(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    out: *mut f64,
    f: impl Fn(ArrayView2<'_, u8>, ArrayView2<'_, u8>) -> Result<f64, maskdiff::metrics::MetricsError>,
) -> MdfStatus {
    require_nonnull!(pred, gt, out);
    let pred = unsafe { std::slice::from_raw_parts(pred, len) };
    let gt = unsafe { std::slice::from_raw_parts(gt, len) };
    let pred = ArrayView2::from_shape((1, len), pred).unwrap();
    let gt = ArrayView2::from_shape((1, len), gt).unwrap();
    match f(pred, gt) {
        Ok(v) => {
            unsafe { *out = v };
            MdfStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            MdfStatus::InvalidArgument
        }
    }
}

/// Dice overlap of two flattened binary masks (values 0 or 1); both empty
/// scores 1.
///
/// # Safety
/// `pred` and `gt` must each point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_dice(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { metric_on_masks(pred, gt, len, out, |p, g| dice(p, g)) })
}

/// Mean IoU over the lesion and background classes of two flattened binary
/// masks; an absent class scores 1 for that class.
///
/// # Safety
/// `pred` and `gt` must each point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_miou(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { metric_on_masks(pred, gt, len, out, |p, g| miou(p, g)) })
}

/// Fraction of agreeing pixels between two flattened binary masks.
///
/// # Safety
/// `pred` and `gt` must each point to `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_pixel_accuracy(
    pred: *const u8,
    gt: *const u8,
    len: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| unsafe { metric_on_masks(pred, gt, len, out, |p, g| pixel_accuracy(p, g)) })
}

/// Probability that a random abnormal score exceeds a random normal score
/// (ties count half), the area under the ROC curve.
///
/// # Safety
/// `normal` must point to `n_normal` f64 values, `abnormal` to `n_abnormal`,
/// and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mdf_auroc(
    normal: *const f64,
    n_normal: usize,
    abnormal: *const f64,
    n_abnormal: usize,
    out: *mut f64,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(normal, abnormal, out);
        let normal = unsafe { std::slice::from_raw_parts(normal, n_normal) };
        let abnormal = unsafe { std::slice::from_raw_parts(abnormal, n_abnormal) };
        match auroc(normal, abnormal) {
            Ok(v) => {
                unsafe { *out = v };
                MdfStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::InvalidArgument
            }
        }
    })
}

// ---------------------------------------------------------------------------
// pipeline stages

/// Runs one pipeline stage against the run directory named by the config at
/// `config_path` (TOML). `stage` is one of "synth", "train-ae:mixture",
/// "train-ae:normal_only", "features", "train-diff", "sample", "eval".
/// `strict` promotes stale-input warnings to failures.
///
/// # Safety
/// `config_path` and `stage` must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn mdf_run_stage(
    config_path: *const c_char,
    stage: *const c_char,
    strict: bool,
) -> MdfStatus {
    guarded(|| {
        require_nonnull!(config_path, stage);
        let Ok(config_path) = unsafe { CStr::from_ptr(config_path) }.to_str() else {
            set_error("config_path is not valid UTF-8");
            return MdfStatus::InvalidArgument;
        };
        let Ok(stage) = unsafe { CStr::from_ptr(stage) }.to_str() else {
            set_error("stage is not valid UTF-8");
            return MdfStatus::InvalidArgument;
        };

        let cfg = match ExperimentConfig::load(config_path.as_ref()) {
            Ok(cfg) => cfg,
            Err(e) => {
                set_error(&e.to_string());
                return MdfStatus::InvalidArgument;
            }
        };
        if let Err(e) = cfg.validate() {
            set_error(&e.to_string());
            return MdfStatus::InvalidArgument;
        }
        let ctx = StageContext::new(cfg, strict);

        use maskdiff::discrepancy::EnsembleRole;
        let result = match stage {
            "synth" => pipeline::stage_synth(&ctx),
            "train-ae:mixture" => pipeline::stage_train_ae(&ctx, EnsembleRole::Mixture),
            "train-ae:normal_only" => pipeline::stage_train_ae(&ctx, EnsembleRole::NormalOnly),
            "features" => pipeline::stage_features(&ctx),
            "train-diff" => pipeline::stage_train_diff(&ctx),
            "sample" => pipeline::stage_sample(&ctx),
            "eval" => pipeline::stage_eval(&ctx),
            other => {
                set_error(&format!("unknown stage `{other}`"));
                return MdfStatus::InvalidArgument;
            }
        };
        match result {
            Ok(_) => MdfStatus::Ok,
            Err(
                e @ (PipelineError::MissingPrerequisite { .. }
                | PipelineError::Locked(_)
                | PipelineError::StaleInput { .. }),
            ) => {
                set_error(&e.to_string());
                MdfStatus::PipelineState
            }
            Err(e) => {
                set_error(&e.to_string());
                MdfStatus::RuntimeError
            }
        }
    })
}
