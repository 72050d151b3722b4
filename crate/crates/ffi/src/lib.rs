//! C ABI over the `semsplat` library.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `semsplat_*_new`/`load` call and released by the matching `_free`.
//! Fallible calls return a [`SemsplatStatus`]; on failure the message is kept
//! per thread and read back with [`semsplat_last_error`].
//!
//! Poses are world-to-camera 4×4 matrices, row-major, 16 doubles.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use nalgebra::Matrix4;
use semsplat::error::Error;
use semsplat::pipeline::{run, PipelineConfig, RunReport};
use semsplat::rasterizer::{render, CameraIntrinsics, Pose, RenderFlags, RenderOutput};
use semsplat::scene::GaussianMap;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SemsplatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Dimension = 6,
    Numeric = 7,
    Tracking = 8,
    BufferTooSmall = 9,
    Panic = 10,
}

/// Pinhole camera; `width`/`height` in pixels.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SemsplatIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

/// Summary numbers of a finished run. Metrics that could not be computed
/// (no ground truth) are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SemsplatMetrics {
    pub ate_rmse_cm: f64,
    pub mean_keyframe_psnr: f64,
    pub mean_keyframe_ssim: f64,
    pub accuracy: f64,
    pub miou: f64,
    pub num_frames: u64,
    pub num_keyframes: u64,
    pub num_gaussians: u64,
    pub runtime_seconds: f64,
}

/// Gaussian map handle.
pub struct SemsplatMap(GaussianMap);

/// Rendered images handle.
pub struct SemsplatRender(RenderOutput);

/// Pipeline configuration handle.
pub struct SemsplatConfig(PipelineConfig);

/// Finished run handle.
pub struct SemsplatReport(RunReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(SemsplatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Dimension(_) => SemsplatStatus::Dimension,
            Error::Io { .. } | Error::Image { .. } => SemsplatStatus::Io,
            Error::Format(_) => SemsplatStatus::Format,
            Error::Config(_) => SemsplatStatus::Config,
            Error::Tracking(_) => SemsplatStatus::Tracking,
            Error::Numeric(_) => SemsplatStatus::Numeric,
        };
        Fail(code, e.to_string())
    }
}

fn fail(code: SemsplatStatus, msg: impl Into<String>) -> Fail {
    Fail(code, msg.into())
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SemsplatStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SemsplatStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SemsplatStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(SemsplatStatus::NullPointer, "null handle"))
}

unsafe fn out_ptr<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(SemsplatStatus::NullPointer, "null output pointer"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    Ok(PathBuf::from(str_arg(p)?))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(SemsplatStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SemsplatStatus::InvalidArgument, "string is not UTF-8"))
}

unsafe fn pose_arg(p: *const f64) -> Result<Pose, Fail> {
    if p.is_null() {
        return Err(fail(SemsplatStatus::NullPointer, "null pose"));
    }
    let v = std::slice::from_raw_parts(p, 16);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(fail(SemsplatStatus::InvalidArgument, "pose has non-finite entries"));
    }
    Ok(Pose::from_matrix(&Matrix4::from_row_slice(v)))
}

fn write_pose(pose: &Pose, out: &mut [f64]) {
    let m = pose.to_matrix();
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = m[(r, c)];
        }
    }
}

unsafe fn copy_out(src: &[f64], dst: *mut f64, len: usize) -> Result<(), Fail> {
    if dst.is_null() {
        return Err(fail(SemsplatStatus::NullPointer, "null buffer"));
    }
    if len < src.len() {
        return Err(fail(
            SemsplatStatus::BufferTooSmall,
            format!("buffer holds {len} values, need {}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn semsplat_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn semsplat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Empty map whose Gaussians carry `feature_dim` feature channels.
#[no_mangle]
pub extern "C" fn semsplat_map_new(feature_dim: u32) -> *mut SemsplatMap {
    boxed(SemsplatMap(GaussianMap::new(feature_dim as usize)))
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_map_load(path: *const c_char, out: *mut *mut SemsplatMap) -> SemsplatStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = std::ptr::null_mut();
        let map = GaussianMap::load(&path_arg(path)?)?;
        *out = boxed(SemsplatMap(map));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_map_save(map: *const SemsplatMap, path: *const c_char) -> SemsplatStatus {
    guard(|| {
        borrow(map)?.0.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Number of Gaussians; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn semsplat_map_len(map: *const SemsplatMap) -> u64 {
    map.as_ref().map_or(0, |m| m.0.len() as u64)
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_map_feature_dim(map: *const SemsplatMap) -> u32 {
    map.as_ref().map_or(0, |m| m.0.feature_dim() as u32)
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_map_free(map: *mut SemsplatMap) {
    release(map)
}

/// Renders `map` from `pose` (16 doubles). With `features` nonzero the
/// feature image is rendered too.
#[no_mangle]
pub unsafe extern "C" fn semsplat_render(
    map: *const SemsplatMap,
    pose: *const f64,
    intrinsics: *const SemsplatIntrinsics,
    features: bool,
    out: *mut *mut SemsplatRender,
) -> SemsplatStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = std::ptr::null_mut();
        let map = borrow(map)?;
        let i = borrow(intrinsics)?;
        let intr = CameraIntrinsics::new(i.fx, i.fy, i.cx, i.cy, i.width as usize, i.height as usize);
        intr.validate()?;
        let flags = if features {
            RenderFlags::WITH_FEATURES
        } else {
            RenderFlags::GEOMETRY
        };
        let r = render(&map.0, &pose_arg(pose)?, &intr, flags)?;
        *out = boxed(SemsplatRender(r));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_render_width(r: *const SemsplatRender) -> u32 {
    r.as_ref().map_or(0, |r| r.0.color.width() as u32)
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_render_height(r: *const SemsplatRender) -> u32 {
    r.as_ref().map_or(0, |r| r.0.color.height() as u32)
}

/// Feature channels per pixel; 0 when features were not rendered.
#[no_mangle]
pub unsafe extern "C" fn semsplat_render_feature_dim(r: *const SemsplatRender) -> u32 {
    r.as_ref()
        .and_then(|r| r.0.features.as_ref())
        .map_or(0, |f| f.channels() as u32)
}

/// Copies the interleaved RGB image (`3·w·h` doubles, row-major).
#[no_mangle]
pub unsafe extern "C" fn semsplat_render_color(r: *const SemsplatRender, buf: *mut f64, len: usize) -> SemsplatStatus {
    guard(|| copy_out(borrow(r)?.0.color.data(), buf, len))
}

/// Copies the depth image in meters (`w·h` doubles).
#[no_mangle]
pub unsafe extern "C" fn semsplat_render_depth(r: *const SemsplatRender, buf: *mut f64, len: usize) -> SemsplatStatus {
    guard(|| copy_out(borrow(r)?.0.depth.data(), buf, len))
}

/// Copies accumulated opacity (`w·h` doubles).
#[no_mangle]
pub unsafe extern "C" fn semsplat_render_alpha(r: *const SemsplatRender, buf: *mut f64, len: usize) -> SemsplatStatus {
    guard(|| copy_out(borrow(r)?.0.alpha.data(), buf, len))
}

/// Copies the interleaved feature image (`N·w·h` doubles).
#[no_mangle]
pub unsafe extern "C" fn semsplat_render_features(
    r: *const SemsplatRender,
    buf: *mut f64,
    len: usize,
) -> SemsplatStatus {
    guard(|| match &borrow(r)?.0.features {
        Some(f) => copy_out(f.data(), buf, len),
        None => Err(fail(SemsplatStatus::InvalidArgument, "features were not rendered")),
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_render_free(r: *mut SemsplatRender) {
    release(r)
}

#[no_mangle]
pub extern "C" fn semsplat_config_default() -> *mut SemsplatConfig {
    boxed(SemsplatConfig(PipelineConfig::default()))
}

/// Parses a TOML configuration; omitted keys take their defaults.
#[no_mangle]
pub unsafe extern "C" fn semsplat_config_from_toml(
    text: *const c_char,
    out: *mut *mut SemsplatConfig,
) -> SemsplatStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = std::ptr::null_mut();
        let cfg = PipelineConfig::from_toml_str(str_arg(text)?)?;
        *out = boxed(SemsplatConfig(cfg));
        Ok(())
    })
}

/// Where the run writes its exports; NULL disables writing.
#[no_mangle]
pub unsafe extern "C" fn semsplat_config_set_output_dir(
    cfg: *mut SemsplatConfig,
    dir: *const c_char,
) -> SemsplatStatus {
    guard(|| {
        let cfg = out_ptr(cfg)?;
        cfg.0.output_dir = if dir.is_null() { None } else { Some(path_arg(dir)?) };
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_config_free(cfg: *mut SemsplatConfig) {
    release(cfg)
}

/// Runs tracking and mapping over the configured sequence.
#[no_mangle]
pub unsafe extern "C" fn semsplat_run(cfg: *const SemsplatConfig, out: *mut *mut SemsplatReport) -> SemsplatStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = std::ptr::null_mut();
        let report = run(&borrow(cfg)?.0)?;
        *out = boxed(SemsplatReport(report));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_report_metrics(
    report: *const SemsplatReport,
    out: *mut SemsplatMetrics,
) -> SemsplatStatus {
    guard(|| {
        let m = &borrow(report)?.0.metrics;
        *out_ptr(out)? = SemsplatMetrics {
            ate_rmse_cm: m.ate_rmse_cm.unwrap_or(f64::NAN),
            mean_keyframe_psnr: m.mean_keyframe_psnr,
            mean_keyframe_ssim: m.mean_keyframe_ssim,
            accuracy: m.accuracy.unwrap_or(f64::NAN),
            miou: m.miou.unwrap_or(f64::NAN),
            num_frames: m.num_frames as u64,
            num_keyframes: m.num_keyframes as u64,
            num_gaussians: m.num_gaussians as u64,
            runtime_seconds: m.runtime_seconds,
        };
        Ok(())
    })
}

/// Number of tracked frames; 0 for a NULL handle.
#[no_mangle]
pub unsafe extern "C" fn semsplat_report_num_poses(report: *const SemsplatReport) -> u64 {
    report.as_ref().map_or(0, |r| r.0.trajectory.len() as u64)
}

/// Estimated pose of frame `index` into `out` (16 doubles).
#[no_mangle]
pub unsafe extern "C" fn semsplat_report_pose(
    report: *const SemsplatReport,
    index: u64,
    out: *mut f64,
) -> SemsplatStatus {
    guard(|| {
        let t = &borrow(report)?.0.trajectory;
        let e = t.get(index as usize).ok_or_else(|| {
            fail(SemsplatStatus::InvalidArgument, format!("pose {index} out of range ({})", t.len()))
        })?;
        if out.is_null() {
            return Err(fail(SemsplatStatus::NullPointer, "null pose buffer"));
        }
        write_pose(&e.pose, std::slice::from_raw_parts_mut(out, 16));
        Ok(())
    })
}

/// Copies the final map into a new handle owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn semsplat_report_map(report: *const SemsplatReport, out: *mut *mut SemsplatMap) -> SemsplatStatus {
    guard(|| {
        let out = out_ptr(out)?;
        *out = boxed(SemsplatMap(borrow(report)?.0.map.clone()));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn semsplat_report_free(report: *mut SemsplatReport) {
    release(report)
}
