//! C ABI over the registration library.
//!
//! Models are opaque handles created by `car_model_load` or
//! `car_model_init` and released with `car_model_free`. Every fallible call
//! returns a [`CarStatus`]; on failure `car_last_error` describes the most
//! recent error on the calling thread. Images are row-major `double` arrays
//! with values in `[0, 1]`; fields hold the row displacements followed by
//! the column displacements.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use carreg::augment::{augment_demo, RcConfig};
use carreg::io::checkpoint;
use carreg::metrics::evaluate_pair;
use carreg::simnet::{ArchSpec, CarModel};
use carreg::{CarError, DeformationField, Image2D, LabelMask};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CarStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Io = 5,
    NonFinite = 6,
    Config = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CarMetrics {
    pub dice: f64,
    /// NaN when no label occurs in both masks.
    pub hd95: f64,
    pub folding_pct: f64,
    pub grad_jac: f64,
}

/// Opaque model handle.
pub struct CarModelHandle {
    model: CarModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &CarError) -> CarStatus {
    match e {
        CarError::Shape { .. } => CarStatus::Shape,
        CarError::InvalidArgument(_) => CarStatus::InvalidArgument,
        CarError::NonFinite(_) => CarStatus::NonFinite,
        CarError::Format { .. } => CarStatus::Format,
        CarError::Config { .. } => CarStatus::Config,
        CarError::Io { .. } => CarStatus::Io,
    }
}

struct Fail(CarStatus, String);

impl From<CarError> for Fail {
    fn from(e: CarError) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CarStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CarStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(&msg);
            s
        }
        Err(_) => {
            set_error("internal panic");
            CarStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CarStatus::NullPointer, format!("{} is null", what))
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

fn area(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(CarStatus::InvalidArgument, format!("bad extents {}x{}", height, width)))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn car_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn car_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn car_model_load(path: *const c_char, out: *mut *mut CarModelHandle) -> CarStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(CarStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = checkpoint::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(CarModelHandle { model: ck.model }));
        Ok(())
    })
}

/// Creates a freshly initialised model with the default architecture.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn car_model_init(seed: u64, out: *mut *mut CarModelHandle) -> CarStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = CarModel::init(ArchSpec::default(), seed)?;
        *out = Box::into_raw(Box::new(CarModelHandle { model }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `handle` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn car_model_free(handle: *mut CarModelHandle) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of resolution levels; image extents must be multiples of
/// `2^levels`. Returns 0 for a null handle.
///
/// # Safety
/// `handle` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn car_model_levels(handle: *const CarModelHandle) -> u32 {
    handle.as_ref().map_or(0, |h| h.model.arch().levels as u32)
}

/// Registers `moving` to `fixed`. Writes `2·H·W` displacements to
/// `field_out` and, if non-null, `H·W` warped pixels to `warped_out`.
///
/// # Safety
/// Buffers must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn car_register(
    handle: *const CarModelHandle,
    moving: *const f64,
    fixed: *const f64,
    height: usize,
    width: usize,
    field_out: *mut f64,
    warped_out: *mut f64,
) -> CarStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let n = area(height, width)?;
        let m = Image2D::new(height, width, slice(moving, n, "moving")?.to_vec())?;
        let f = Image2D::new(height, width, slice(fixed, n, "fixed")?.to_vec())?;
        let field_buf = slice_mut(field_out, 2 * n, "field_out")?;
        let reg = carreg::trainer::register(&h.model, &m, &f, None)?;
        field_buf.copy_from_slice(reg.field.tensor().data());
        if !warped_out.is_null() {
            slice_mut(warped_out, n, "warped_out")?.copy_from_slice(reg.warped.pixels());
        }
        Ok(())
    })
}

/// Scores a field: warps `mask_moving` and compares it with `mask_fixed`.
///
/// # Safety
/// Masks hold `H·W` labels, `field` holds `2·H·W` values, `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn car_metrics(
    mask_moving: *const u32,
    mask_fixed: *const u32,
    field: *const f64,
    height: usize,
    width: usize,
    out: *mut CarMetrics,
) -> CarStatus {
    guard(|| {
        let n = area(height, width)?;
        let mm = LabelMask::new(height, width, slice(mask_moving, n, "mask_moving")?.to_vec())?;
        let mf = LabelMask::new(height, width, slice(mask_fixed, n, "mask_fixed")?.to_vec())?;
        let phi = DeformationField::new(height, width, slice(field, 2 * n, "field")?.to_vec())?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let r = evaluate_pair(&mm, &mf, &phi)?;
        *out = CarMetrics {
            dice: r.dice,
            hd95: r.hd95.unwrap_or(f64::NAN),
            folding_pct: r.folding_pct,
            grad_jac: r.grad_jac,
        };
        Ok(())
    })
}

/// Renders `img` in one random contrast chosen by `seed`.
///
/// # Safety
/// `img` and `out` hold `H·W` values.
#[no_mangle]
pub unsafe extern "C" fn car_augment(
    img: *const f64,
    height: usize,
    width: usize,
    seed: u64,
    kernel_size: u32,
    depth: u32,
    out: *mut f64,
) -> CarStatus {
    guard(|| {
        let n = area(height, width)?;
        let src = Image2D::new(height, width, slice(img, n, "img")?.to_vec())?;
        let dst = slice_mut(out, n, "out")?;
        let cfg = RcConfig {
            kernel_size: kernel_size as usize,
            ..RcConfig::with_depth(depth as usize)
        };
        let r = augment_demo(seed, &cfg, &src, 1)?;
        dst.copy_from_slice(r[0].pixels());
        Ok(())
    })
}
