//! C ABI over `eqckn`.
//!
//! Objects are opaque handles created by `*_new`/`*_load` functions and
//! released with the matching `*_free`. Every fallible call returns an
//! [`EcknStatus`]; on failure, [`eckn_last_error`] describes the cause for
//! the calling thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use eqckn::ckn::{global_pool, verify_equivariance, Network};
use eqckn::group::{build_group, DiscretizedGroup, GroupElement, GroupKind};
use eqckn::kernel::{kernel_eval, KernelSpec};
use eqckn::signal::{lift, BaseImage};
use eqckn::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EcknStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Numerical = 4,
    Unsupported = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A discretized group grid.
pub struct EcknGroup {
    inner: Arc<DiscretizedGroup>,
}

/// A fitted network.
pub struct EcknNetwork {
    inner: Network,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(err: &Error) -> EcknStatus {
    match err {
        Error::Io { .. } | Error::Idx { .. } | Error::Embedding(_) | Error::Json(_) => EcknStatus::Io,
        Error::Unsupported(_) | Error::VariantMismatch { .. } => EcknStatus::Unsupported,
        Error::NotPsd { .. } | Error::DegenerateReference { .. } | Error::InsufficientPatches { .. } => {
            EcknStatus::Numerical
        }
        _ => EcknStatus::InvalidArgument,
    }
}

/// Runs `f`, recording any error or panic for [`eckn_last_error`].
fn guard(f: impl FnOnce() -> Result<(), (EcknStatus, String)>) -> EcknStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EcknStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            EcknStatus::Panic
        }
    }
}

fn lib(err: Error) -> (EcknStatus, String) {
    (status_of(&err), err.to_string())
}

fn null(what: &str) -> (EcknStatus, String) {
    (EcknStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], (EcknStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, (EcknStatus, String)> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (EcknStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (EcknStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn eckn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn eckn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn new_group(kind: GroupKind, out: *mut *mut EcknGroup) -> EcknStatus {
    guard(|| {
        let out = unsafe { out_ref(out, "out")? };
        let g = build_group(kind).map_err(lib)?;
        *out = Box::into_raw(Box::new(EcknGroup { inner: Arc::new(g) }));
        Ok(())
    })
}

/// SE(2) grid: `height × width` pixels times `n_theta` angles.
#[no_mangle]
pub extern "C" fn eckn_group_se2_new(height: usize, width: usize, n_theta: usize, out: *mut *mut EcknGroup) -> EcknStatus {
    new_group(
        GroupKind::Se2 {
            height,
            width,
            n_theta,
        },
        out,
    )
}

/// Equiangular sphere grid with `n_beta` rings of `n_phi` points.
#[no_mangle]
pub extern "C" fn eckn_group_s2_new(n_beta: usize, n_phi: usize, out: *mut *mut EcknGroup) -> EcknStatus {
    new_group(GroupKind::S2 { n_beta, n_phi }, out)
}

/// Number of grid elements.
///
/// # Safety
/// `group` must come from a `eckn_group_*_new` call and not be freed.
#[no_mangle]
pub unsafe extern "C" fn eckn_group_len(group: *const EcknGroup, out: *mut usize) -> EcknStatus {
    guard(|| {
        let g = group.as_ref().ok_or_else(|| null("group"))?;
        *out_ref(out, "out")? = g.inner.len();
        Ok(())
    })
}

/// Releases a group; null is ignored.
///
/// # Safety
/// `group` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eckn_group_free(group: *mut EcknGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// `K(x, y)` for a kernel named like the config syntax (`exponential`,
/// `arccos1`, `rbf:<bandwidth>`, `rbf_alpha:<a>`, `poly:<d>`).
///
/// # Safety
/// `x` and `y` must point to `dim` doubles; `kernel` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn eckn_kernel_eval(
    kernel: *const c_char,
    x: *const f64,
    y: *const f64,
    dim: usize,
    out: *mut f64,
) -> EcknStatus {
    guard(|| {
        let spec = KernelSpec::parse(str_arg(kernel, "kernel")?).map_err(lib)?;
        let (x, y) = (slice(x, dim, "x")?, slice(y, dim, "y")?);
        *out_ref(out, "out")? = kernel_eval(&spec, x, y).map_err(lib)?;
        Ok(())
    })
}

/// Loads a network saved by `eqckn fit` (directory or manifest path).
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn eckn_network_load(path: *const c_char, out: *mut *mut EcknNetwork) -> EcknStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_ref(out, "out")?;
        let net = Network::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(EcknNetwork { inner: net }));
        Ok(())
    })
}

/// Releases a network; null is ignored.
///
/// # Safety
/// `net` must be null or a live handle; it must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn eckn_network_free(net: *mut EcknNetwork) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Length of the vector written by [`eckn_network_represent`].
///
/// # Safety
/// `net` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn eckn_network_output_len(net: *const EcknNetwork, out: *mut usize) -> EcknStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        *out_ref(out, "out")? = net.inner.output_channels();
        Ok(())
    })
}

unsafe fn lifted(net: &Network, pixels: *const f64, height: usize, width: usize) -> Result<eqckn::signal::FeatureMap, (EcknStatus, String)> {
    let px = slice(pixels, height * width, "pixels")?;
    let img = BaseImage::new(height, width, 1, px.to_vec()).map_err(lib)?;
    lift(&img, net.group()).map_err(lib)
}

/// Globally pooled representation of a grayscale image (row-major,
/// values in `[0, 1]`). On an S² network the image must already be sampled
/// on the `n_beta × n_phi` grid.
///
/// # Safety
/// `pixels` must hold `height * width` doubles and `out` `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn eckn_network_represent(
    net: *const EcknNetwork,
    pixels: *const f64,
    height: usize,
    width: usize,
    out: *mut f64,
    out_len: usize,
) -> EcknStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.inner;
        let need = net.output_channels();
        if out_len < need {
            return Err((EcknStatus::BufferTooSmall, format!("need {need} doubles, got {out_len}")));
        }
        let x = lifted(net, pixels, height, width)?;
        let v = global_pool(&net.forward(&x).map_err(lib)?);
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&v);
        Ok(())
    })
}

/// `‖Φ(L_g x) − L_g Φ(x)‖ / ‖Φ(x)‖` for the SE(2) element `(tx, ty, theta)`.
///
/// # Safety
/// `pixels` must hold `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn eckn_network_equivariance_error(
    net: *const EcknNetwork,
    pixels: *const f64,
    height: usize,
    width: usize,
    tx: f64,
    ty: f64,
    theta: f64,
    out: *mut f64,
) -> EcknStatus {
    guard(|| {
        let net = &net.as_ref().ok_or_else(|| null("net"))?.inner;
        let x = lifted(net, pixels, height, width)?;
        let g = GroupElement::se2(tx, ty, theta);
        *out_ref(out, "out")? = verify_equivariance(net, &x, &g).map_err(lib)?;
        Ok(())
    })
}
