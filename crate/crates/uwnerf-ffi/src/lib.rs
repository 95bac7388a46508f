//! C ABI over the uwnerf library.
//!
//! Conventions, mirrored in the generated `include/uwnerf.h`:
//!
//! * Every fallible call returns a [`UwStatus`]; `UW_STATUS_OK` is zero.
//!   On failure a human-readable message is stored per thread and can be
//!   read with [`uw_last_error_message`] until the next failing call on
//!   the same thread.
//! * Scenes and models are opaque handles created by `uw_*_load` and
//!   released by the matching `uw_*_free` (exactly once; `NULL` is a
//!   safe no-op).
//! * Images cross the boundary as dense row-major `height x width x 3`
//!   buffers of `double` in `[0,1]`.
//! * Panics never unwind across the boundary; they surface as
//!   `UW_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array3;

use uwnerf::dataset::SceneDataset;
use uwnerf::eval;
use uwnerf::trainer::Trainer;
use uwnerf::UwError;

/// Result of every fallible API call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UwStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument was malformed: bad UTF-8, wrong buffer length,
    /// out-of-range index, invalid configuration.
    InvalidArgument = 2,
    /// File or directory access failed.
    Io = 3,
    /// The computation itself failed (numerical divergence, incompatible
    /// checkpoint, rendering error).
    Runtime = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn fail(status: UwStatus, message: &str) -> UwStatus {
    set_error(message);
    status
}

fn fail_err(err: &UwError) -> UwStatus {
    let status = match err {
        UwError::Io { .. } | UwError::Image { .. } => UwStatus::Io,
        UwError::InvalidConfig(_) | UwError::Shape(_) => UwStatus::InvalidArgument,
        _ => UwStatus::Runtime,
    };
    fail(status, &err.to_string())
}

/// Runs a body with panic containment.
fn guarded(body: impl FnOnce() -> UwStatus) -> UwStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(UwStatus::Panic, "internal panic"),
    }
}

/// Last failure message of the current thread; empty until a call fails.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn uw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Reads a required UTF-8 path argument.
///
/// # Safety
/// `ptr` must be null or point at a NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a str, UwStatus> {
    if ptr.is_null() {
        return Err(fail(UwStatus::NullArgument, "path is null"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(UwStatus::InvalidArgument, "path is not valid UTF-8"))
}

/// A loaded multi-view scene.
pub struct UwScene(SceneDataset);

/// A trained model restored from a checkpoint.
pub struct UwModel(Trainer);

/// Loads a scene directory.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point at writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn uw_scene_load(path: *const c_char, out: *mut *mut UwScene) -> UwStatus {
    guarded(|| {
        if out.is_null() {
            return fail(UwStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match uwnerf::dataset::load_scene(Path::new(path)) {
            Ok(scene) => {
                *out = Box::into_raw(Box::new(UwScene(scene)));
                UwStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Releases a scene handle.  `NULL` is ignored; freeing twice is
/// undefined behavior.
///
/// # Safety
/// `scene` must be a pointer returned by [`uw_scene_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn uw_scene_free(scene: *mut UwScene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of views in the scene.
///
/// # Safety
/// `scene` must be a live scene handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uw_scene_view_count(
    scene: *const UwScene,
    out: *mut usize,
) -> UwStatus {
    guarded(|| {
        if scene.is_null() || out.is_null() {
            return fail(UwStatus::NullArgument, "scene or out is null");
        }
        *out = (*scene).0.images.len();
        UwStatus::Ok
    })
}

/// Image height and width shared by every view of the scene.
///
/// # Safety
/// `scene` must be a live scene handle; `height`/`width` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uw_scene_image_size(
    scene: *const UwScene,
    height: *mut usize,
    width: *mut usize,
) -> UwStatus {
    guarded(|| {
        if scene.is_null() || height.is_null() || width.is_null() {
            return fail(UwStatus::NullArgument, "scene, height or width is null");
        }
        let (h, w, _) = (*scene).0.images[0].dim();
        *height = h;
        *width = w;
        UwStatus::Ok
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must point at writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn uw_model_load(path: *const c_char, out: *mut *mut UwModel) -> UwStatus {
    guarded(|| {
        if out.is_null() {
            return fail(UwStatus::NullArgument, "out is null");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(status) => return status,
        };
        match Trainer::load(Path::new(path)) {
            Ok(trainer) => {
                *out = Box::into_raw(Box::new(UwModel(trainer)));
                UwStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Releases a model handle.  `NULL` is ignored; freeing twice is
/// undefined behavior.
///
/// # Safety
/// `model` must be a pointer returned by [`uw_model_load`] or null.
#[no_mangle]
pub unsafe extern "C" fn uw_model_free(model: *mut UwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Renders one dataset view.  `restored` receives the restoration; the
/// optional `composed` (pass `NULL` to skip) receives the
/// self-reconstruction.  Both buffers hold `height * width * 3` doubles,
/// row-major.
///
/// # Safety
/// Handles must be live; non-null buffers must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn uw_render_view(
    model: *const UwModel,
    scene: *const UwScene,
    view_index: usize,
    restored: *mut f64,
    composed: *mut f64,
    len: usize,
) -> UwStatus {
    guarded(|| {
        if model.is_null() || scene.is_null() || restored.is_null() {
            return fail(UwStatus::NullArgument, "model, scene or restored is null");
        }
        let model = &(*model).0;
        let scene = &(*scene).0;
        let (h, w, _) = scene.images[0].dim();
        if len != h * w * 3 {
            return fail(
                UwStatus::InvalidArgument,
                &format!("buffer holds {len} doubles, view needs {}", h * w * 3),
            );
        }
        match eval::render_view(model.store(), model.config(), scene, view_index) {
            Ok(view) => {
                let out = std::slice::from_raw_parts_mut(restored, len);
                for (dst, src) in out.iter_mut().zip(view.restored.iter()) {
                    *dst = *src;
                }
                if !composed.is_null() {
                    let out = std::slice::from_raw_parts_mut(composed, len);
                    for (dst, src) in out.iter_mut().zip(view.composed.iter()) {
                        *dst = *src;
                    }
                }
                UwStatus::Ok
            }
            Err(e) => fail_err(&e),
        }
    })
}

/// Copies a raw buffer into an owned image array.
///
/// # Safety
/// `ptr` must hold `height * width * 3` doubles.
unsafe fn image_arg(
    name: &str,
    ptr: *const f64,
    height: usize,
    width: usize,
) -> Result<Array3<f64>, UwStatus> {
    if ptr.is_null() {
        return Err(fail(UwStatus::NullArgument, &format!("{name} is null")));
    }
    if height == 0 || width == 0 {
        return Err(fail(
            UwStatus::InvalidArgument,
            &format!("{name}: image dimensions are zero"),
        ));
    }
    let slice = std::slice::from_raw_parts(ptr, height * width * 3);
    Ok(Array3::from_shape_vec((height, width, 3), slice.to_vec())
        .expect("length checked above"))
}

macro_rules! pair_metric {
    ($name:ident, $call:expr, $doc:literal) => {
        #[doc = $doc]
        ///
        /// # Safety
        /// `a` and `b` must hold `height * width * 3` doubles; `out` must
        /// be writable.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            a: *const f64,
            b: *const f64,
            height: usize,
            width: usize,
            out: *mut f64,
        ) -> UwStatus {
            guarded(|| {
                if out.is_null() {
                    return fail(UwStatus::NullArgument, "out is null");
                }
                let a = match image_arg("a", a, height, width) {
                    Ok(img) => img,
                    Err(status) => return status,
                };
                let b = match image_arg("b", b, height, width) {
                    Ok(img) => img,
                    Err(status) => return status,
                };
                #[allow(clippy::redundant_closure_call)]
                match ($call)(&a, &b) {
                    Ok(value) => {
                        *out = value;
                        UwStatus::Ok
                    }
                    Err(e) => fail_err(&e),
                }
            })
        }
    };
}

macro_rules! single_metric {
    ($name:ident, $call:path, $doc:literal) => {
        #[doc = $doc]
        ///
        /// # Safety
        /// `image` must hold `height * width * 3` doubles; `out` must be
        /// writable.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            image: *const f64,
            height: usize,
            width: usize,
            out: *mut f64,
        ) -> UwStatus {
            guarded(|| {
                if out.is_null() {
                    return fail(UwStatus::NullArgument, "out is null");
                }
                let image = match image_arg("image", image, height, width) {
                    Ok(img) => img,
                    Err(status) => return status,
                };
                match $call(&image) {
                    Ok(value) => {
                        *out = value;
                        UwStatus::Ok
                    }
                    Err(e) => fail_err(&e),
                }
            })
        }
    };
}

pair_metric!(
    uw_metric_psnr,
    |a, b| eval::psnr(a, b, eval::PSNR_CAP_DB),
    "Peak signal-to-noise ratio in dB between two [0,1] images, capped at 100."
);
pair_metric!(
    uw_metric_ssim,
    |a, b| eval::ssim(a, b),
    "Structural similarity between two [0,1] images (11x11 Gaussian window)."
);
single_metric!(
    uw_metric_uiqm,
    eval::uiqm,
    "No-reference underwater image quality measure (colorfulness, sharpness, contrast)."
);
single_metric!(
    uw_metric_uciqe,
    eval::uciqe,
    "No-reference underwater color image quality measure (chroma, contrast, saturation)."
);
