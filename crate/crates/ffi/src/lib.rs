//! C ABI over the `mscnn` core: model files, resolution adaptation, the
//! stencil coarsening map, stability diagnostics, and image transfer.
//!
//! Every fallible function returns an [`MscnnStatus`]; on failure a message
//! is available from [`mscnn_last_error_message`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use mscnn::grid::{prolong_image, restrict_image, Grid2D, Image, TransferKind, TransferPair};
use mscnn::model_io::{load_model, save_model, ModelFile};
use mscnn::multiscale::{adapt_model_resolution, Direction};
use mscnn::propagation::{classify, propagate};
use mscnn::stencil::{
    build_coarsen_map, coarsen_stencil, refine_stencil, stability_report, CoarsenMap, Stencil,
};
use mscnn::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MscnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Numerical = 6,
    Panic = 7,
}

/// Values accepted by `transfer` parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MscnnTransfer {
    Constant = 0,
    Bilinear = 1,
}

/// Values accepted by `direction` parameters.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MscnnDirection {
    Coarsen = 0,
    Refine = 1,
}

/// A loaded model: network parameters, classifier, and provenance.
pub struct MscnnModel {
    inner: ModelFile,
}

/// The linear map from fine to coarse stencil weights for one stencil size
/// and transfer pair.
pub struct MscnnCoarsenMap {
    inner: CoarsenMap,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MscnnStatus {
    match e.exit_code() {
        2 => MscnnStatus::InvalidArgument,
        3 => MscnnStatus::Io,
        4 => MscnnStatus::Format,
        5 => MscnnStatus::Dimension,
        _ => MscnnStatus::Numerical,
    }
}

struct Failure(MscnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(MscnnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(MscnnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MscnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MscnnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MscnnStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn input<'a>(data: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn output<'a>(data: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if data.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(data, len))
}

fn transfer_arg(t: u32) -> Result<TransferPair, Failure> {
    match t {
        0 => Ok(TransferPair::new(TransferKind::ConstantAverage)),
        1 => Ok(TransferPair::new(TransferKind::BilinearFullWeighting)),
        _ => Err(invalid(format!("unknown transfer code {t}"))),
    }
}

fn direction_arg(d: u32) -> Result<Direction, Failure> {
    match d {
        0 => Ok(Direction::Coarsen),
        1 => Ok(Direction::Refine),
        _ => Err(invalid(format!("unknown direction code {d}"))),
    }
}

fn copy_out(src: &[f64], dst: &mut [f64]) -> Result<(), Failure> {
    if src.len() != dst.len() {
        return Err(Failure(
            MscnnStatus::Dimension,
            format!(
                "output buffer holds {} values, {} required",
                dst.len(),
                src.len()
            ),
        ));
    }
    dst.copy_from_slice(src);
    Ok(())
}

/// Message for the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn mscnn_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads a model file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_load(
    path: *const c_char,
    out: *mut *mut MscnnModel,
) -> MscnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = load_model(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(MscnnModel { inner }));
        Ok(())
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must come from this library; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_save(
    model: *const MscnnModel,
    path: *const c_char,
) -> MscnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        save_model(&m.inner, &path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_free(model: *mut MscnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Grid size, spacing, and class count of a model.
///
/// # Safety
/// All pointers must be valid; `model` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_shape(
    model: *const MscnnModel,
    nx: *mut usize,
    ny: *mut usize,
    h: *mut f64,
    num_classes: *mut usize,
) -> MscnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if nx.is_null() || ny.is_null() || h.is_null() || num_classes.is_null() {
            return Err(null("output pointer"));
        }
        let g = m.inner.grid();
        *nx = g.nx();
        *ny = g.ny();
        *h = g.h();
        *num_classes = m.inner.classifier.num_classes();
        Ok(())
    })
}

/// Class probabilities for one row-major image on the model grid.
///
/// # Safety
/// `pixels` must hold `len` values and `probs` `probs_len` values.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_predict(
    model: *const MscnnModel,
    pixels: *const f64,
    len: usize,
    probs: *mut f64,
    probs_len: usize,
) -> MscnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = Image::new(m.inner.grid(), input(pixels, len, "pixels")?.to_vec())?;
        let p = classify(&propagate(&x, &m.inner.params)?, &m.inner.classifier)?;
        copy_out(&p, output(probs, probs_len, "probs")?)
    })
}

/// A new model moved one resolution octave in `direction`
/// ([`MscnnDirection`]) with the given [`MscnnTransfer`] pair.
///
/// # Safety
/// `model` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mscnn_model_adapt(
    model: *const MscnnModel,
    direction: u32,
    transfer: u32,
    out: *mut *mut MscnnModel,
) -> MscnnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let t = transfer_arg(transfer)?;
        let dir = direction_arg(direction)?;
        let map = build_coarsen_map(m.inner.params.k(), &t)?;
        let (params, classifier) =
            adapt_model_resolution(&m.inner.params, &m.inner.classifier, dir, &map, &t)?;
        let inner = ModelFile {
            params,
            classifier,
            provenance: m.inner.provenance.clone(),
        };
        *out = Box::into_raw(Box::new(MscnnModel { inner }));
        Ok(())
    })
}

/// Builds the coarsening map for `k`×`k` stencils.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mscnn_coarsen_map_new(
    k: usize,
    transfer: u32,
    out: *mut *mut MscnnCoarsenMap,
) -> MscnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = build_coarsen_map(k, &transfer_arg(transfer)?)?;
        *out = Box::into_raw(Box::new(MscnnCoarsenMap { inner }));
        Ok(())
    })
}

/// Releases a map handle. Null is ignored.
///
/// # Safety
/// `map` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mscnn_coarsen_map_free(map: *mut MscnnCoarsenMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// 2-norm condition number of the map.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mscnn_coarsen_map_condition(
    map: *const MscnnCoarsenMap,
    condition: *mut f64,
) -> MscnnStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        if condition.is_null() {
            return Err(null("condition"));
        }
        *condition = m.inner.condition();
        Ok(())
    })
}

unsafe fn map_stencil(
    map: *const MscnnCoarsenMap,
    src: *const f64,
    dst: *mut f64,
    len: usize,
    f: fn(&Stencil, &CoarsenMap) -> mscnn::Result<Stencil>,
) -> MscnnStatus {
    guard(|| {
        let m = map.as_ref().ok_or_else(|| null("map"))?;
        let k = m.inner.k();
        if len != k * k {
            return Err(Failure(
                MscnnStatus::Dimension,
                format!("stencil buffers must hold {} values", k * k),
            ));
        }
        let s = Stencil::new(k, input(src, len, "weights")?.to_vec())?;
        let out = f(&s, &m.inner)?;
        copy_out(out.weights(), output(dst, len, "out")?)
    })
}

/// Coarse stencil for a fine one; both buffers hold `k*k` row-major weights.
///
/// # Safety
/// Buffers must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn mscnn_coarsen_map_coarsen(
    map: *const MscnnCoarsenMap,
    fine: *const f64,
    coarse: *mut f64,
    len: usize,
) -> MscnnStatus {
    map_stencil(map, fine, coarse, len, coarsen_stencil)
}

/// Fine stencil whose coarsening is `coarse`.
///
/// # Safety
/// Buffers must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn mscnn_coarsen_map_refine(
    map: *const MscnnCoarsenMap,
    coarse: *const f64,
    fine: *mut f64,
    len: usize,
) -> MscnnStatus {
    map_stencil(map, coarse, fine, len, refine_stencil)
}

/// Largest real part of the stencil's symbol on an `nx`×`ny` grid and the
/// largest forward-Euler growth factor `|1 + dt λ|`.
///
/// # Safety
/// `weights` must hold `k*k` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mscnn_stability_report(
    weights: *const f64,
    k: usize,
    nx: usize,
    ny: usize,
    h: f64,
    dt: f64,
    max_real: *mut f64,
    growth: *mut f64,
) -> MscnnStatus {
    guard(|| {
        if max_real.is_null() || growth.is_null() {
            return Err(null("output pointer"));
        }
        let s = Stencil::new(k, input(weights, k * k, "weights")?.to_vec())?;
        let r = stability_report(&s, &Grid2D::new(nx, ny, h)?, dt)?;
        *max_real = r.max_real;
        *growth = r.spectral_radius_step;
        Ok(())
    })
}

/// Restricts an `nx`×`ny` image to `(nx/2)`×`(ny/2)`.
///
/// # Safety
/// `img` must hold `nx*ny` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mscnn_restrict_image(
    img: *const f64,
    nx: usize,
    ny: usize,
    transfer: u32,
    out: *mut f64,
    out_len: usize,
) -> MscnnStatus {
    guard(|| {
        let g = Grid2D::new(nx, ny, 1.0)?;
        let x = Image::new(g, input(img, nx * ny, "img")?.to_vec())?;
        let y = restrict_image(&x, &transfer_arg(transfer)?)?;
        copy_out(y.values(), output(out, out_len, "out")?)
    })
}

/// Prolongs an `nx`×`ny` image to `(2nx)`×`(2ny)`.
///
/// # Safety
/// `img` must hold `nx*ny` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn mscnn_prolong_image(
    img: *const f64,
    nx: usize,
    ny: usize,
    transfer: u32,
    out: *mut f64,
    out_len: usize,
) -> MscnnStatus {
    guard(|| {
        let g = Grid2D::new(nx, ny, 1.0)?;
        let x = Image::new(g, input(img, nx * ny, "img")?.to_vec())?;
        let y = prolong_image(&x, &transfer_arg(transfer)?);
        copy_out(y.values(), output(out, out_len, "out")?)
    })
}
