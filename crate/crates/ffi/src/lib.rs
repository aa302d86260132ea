//! C interface to the tumorseg library.
//!
//! Every function returns a [`TsStatus`]. On failure the message is kept per
//! thread and read with [`ts_last_error_message`]. Objects are handed out as
//! opaque pointers and must be released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use tumorseg::metrics::evaluate_case;
use tumorseg::network::{Network, Tiling};
use tumorseg::phantom::{generate_phantom, PhantomConfig};
use tumorseg::preprocess::window_transform;
use tumorseg::volume::{nifti, raw, Mask, Volume};
use tumorseg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Format = 4,
    Data = 5,
    Io = 6,
    Internal = 7,
    Panic = 8,
}

/// Intensity grid, axes (z, y, x).
pub struct TsVolume(Volume);

/// Label grid, axes (z, y, x).
pub struct TsMask(Mask);

/// Trained segmentation network.
pub struct TsNetwork(Network);

/// Metrics for one case. Undefined values are NaN and flagged by `has_*`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct TsMetrics {
    pub dc: f64,
    pub voe: f64,
    pub rvd: f64,
    pub assd_mm: f64,
    pub msd_mm: f64,
    pub rmsd_mm: f64,
    pub has_rvd: bool,
    pub has_surface: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TsStatus {
    match e {
        Error::Shape(_) => TsStatus::Shape,
        Error::InvalidArgument(_) => TsStatus::InvalidArgument,
        Error::Graph(_) => TsStatus::Internal,
        Error::Format(_) | Error::Json(_) => TsStatus::Format,
        Error::Data(_) => TsStatus::Data,
        Error::Io { .. } | Error::RawIo(_) => TsStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> TsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(&format!("null pointer passed as {what}"));
            TsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(&format!("panic: {msg}"));
            TsStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, len: usize) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(Failure::Null("buffer"));
    }
    if len < src.len() {
        return Err(Error::InvalidArgument(format!(
            "buffer holds {len} elements, {} needed",
            src.len()
        ))
        .into());
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ts_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn ts_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `dims` and `spacing` point to 3 values, `values` to `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_new(
    dims: *const usize,
    spacing: *const f64,
    values: *const f32,
    len: usize,
    out: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let dims: [usize; 3] = deref(dims.cast::<[usize; 3]>(), "dims")?.to_owned();
        let spacing: [f64; 3] = deref(spacing.cast::<[f64; 3]>(), "spacing")?.to_owned();
        if values.is_null() {
            return Err(Failure::Null("values"));
        }
        let v = std::slice::from_raw_parts(values, len).to_vec();
        put(out, TsVolume(Volume::new(dims, spacing, v)?))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_read_raw(
    path: *const c_char,
    out: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| put(out, TsVolume(raw::read_volume(&path_arg(path)?)?)))
}

/// Reads a `.nii` or `.nii.gz` image. `labels_out` may be null; otherwise it
/// receives a mask handle when the image holds labels, or null.
///
/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_read_nifti(
    path: *const c_char,
    out: *mut *mut TsVolume,
    labels_out: *mut *mut TsMask,
) -> TsStatus {
    guard(|| {
        let img = nifti::read_nifti(&path_arg(path)?)?;
        if !labels_out.is_null() {
            *labels_out = match img.labels {
                Some(m) => Box::into_raw(Box::new(TsMask(m))),
                None => ptr::null_mut(),
            };
        }
        put(out, TsVolume(img.volume))
    })
}

/// # Safety
/// `volume` is a live handle; `dims` and `spacing` hold 3 values each.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_geometry(
    volume: *const TsVolume,
    dims: *mut usize,
    spacing: *mut f64,
) -> TsStatus {
    guard(|| {
        let v = &deref(volume, "volume")?.0;
        copy_out(&v.dims, dims, 3)?;
        copy_out(&v.spacing, spacing, 3)
    })
}

/// # Safety
/// `volume` is a live handle; `buffer` holds `len` floats.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_copy_values(
    volume: *const TsVolume,
    buffer: *mut f32,
    len: usize,
) -> TsStatus {
    guard(|| copy_out(&deref(volume, "volume")?.0.values, buffer, len))
}

/// # Safety
/// `volume` is null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ts_volume_free(volume: *mut TsVolume) {
    if !volume.is_null() {
        drop(Box::from_raw(volume));
    }
}

/// Clamps to `[lo, hi]` and rescales to `[0, 1]`.
///
/// # Safety
/// `volume` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_window_transform(
    volume: *const TsVolume,
    lo: f32,
    hi: f32,
    out: *mut *mut TsVolume,
) -> TsStatus {
    guard(|| {
        let v = window_transform(&deref(volume, "volume")?.0, lo, hi)?;
        put(out, TsVolume(v))
    })
}

/// # Safety
/// `dims` and `spacing` point to 3 values, `labels` to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_new(
    dims: *const usize,
    spacing: *const f64,
    labels: *const u8,
    len: usize,
    out: *mut *mut TsMask,
) -> TsStatus {
    guard(|| {
        let dims: [usize; 3] = deref(dims.cast::<[usize; 3]>(), "dims")?.to_owned();
        let spacing: [f64; 3] = deref(spacing.cast::<[f64; 3]>(), "spacing")?.to_owned();
        if labels.is_null() {
            return Err(Failure::Null("labels"));
        }
        let l = std::slice::from_raw_parts(labels, len).to_vec();
        put(out, TsMask(Mask::new(dims, spacing, l)?))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_read_raw(path: *const c_char, out: *mut *mut TsMask) -> TsStatus {
    guard(|| put(out, TsMask(raw::read_mask(&path_arg(path)?)?)))
}

/// # Safety
/// `mask` is a live handle; `dims` and `spacing` hold 3 values each.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_geometry(
    mask: *const TsMask,
    dims: *mut usize,
    spacing: *mut f64,
) -> TsStatus {
    guard(|| {
        let m = &deref(mask, "mask")?.0;
        copy_out(&m.dims, dims, 3)?;
        copy_out(&m.spacing, spacing, 3)
    })
}

/// # Safety
/// `mask` is a live handle; `buffer` holds `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_copy_labels(
    mask: *const TsMask,
    buffer: *mut u8,
    len: usize,
) -> TsStatus {
    guard(|| copy_out(&deref(mask, "mask")?.0.labels, buffer, len))
}

/// Binary mask of voxels equal to `label`.
///
/// # Safety
/// `mask` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_binarize(
    mask: *const TsMask,
    label: u8,
    out: *mut *mut TsMask,
) -> TsStatus {
    guard(|| {
        let m = deref(mask, "mask")?.0.binarize(label)?;
        put(out, TsMask(m))
    })
}

/// # Safety
/// `mask` is null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ts_mask_free(mask: *mut TsMask) {
    if !mask.is_null() {
        drop(Box::from_raw(mask));
    }
}

/// Synthetic case with the default phantom settings.
///
/// # Safety
/// `volume_out` and `mask_out` are writable.
#[no_mangle]
pub unsafe extern "C" fn ts_phantom_generate(
    seed: u64,
    volume_out: *mut *mut TsVolume,
    mask_out: *mut *mut TsMask,
) -> TsStatus {
    guard(|| {
        if volume_out.is_null() || mask_out.is_null() {
            return Err(Failure::Null("output handle"));
        }
        let p = generate_phantom(&PhantomConfig::default(), seed)?;
        put(volume_out, TsVolume(p.volume))?;
        put(mask_out, TsMask(p.mask))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_load(
    path: *const c_char,
    out: *mut *mut TsNetwork,
) -> TsStatus {
    guard(|| {
        let (net, _) = Network::load(&path_arg(path)?)?;
        put(out, TsNetwork(net))
    })
}

/// # Safety
/// `network` is a live handle; `count` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_param_count(
    network: *const TsNetwork,
    count: *mut usize,
) -> TsStatus {
    guard(|| {
        let n = deref(network, "network")?.0.param_count();
        copy_out(&[n], count, 1)
    })
}

/// Binary mask from sliding depth windows of `depth` slices every `stride`.
///
/// # Safety
/// `network` and `volume` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_network_predict(
    network: *const TsNetwork,
    volume: *const TsVolume,
    depth: usize,
    stride: usize,
    threshold: f32,
    out: *mut *mut TsMask,
) -> TsStatus {
    guard(|| {
        let net = &deref(network, "network")?.0;
        let v = &deref(volume, "volume")?.0;
        let m = net.predict_mask(v, Tiling { depth, stride }, threshold)?;
        put(out, TsMask(m))
    })
}

/// # Safety
/// `network` is null or a handle from this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn ts_network_free(network: *mut TsNetwork) {
    if !network.is_null() {
        drop(Box::from_raw(network));
    }
}

/// Metrics of binary `pred` against binary `gt`.
///
/// # Safety
/// `pred` and `gt` are live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn ts_metrics_evaluate(
    pred: *const TsMask,
    gt: *const TsMask,
    out: *mut TsMetrics,
) -> TsStatus {
    guard(|| {
        let m = evaluate_case("ffi", &deref(pred, "pred")?.0, &deref(gt, "gt")?.0)?;
        let r = TsMetrics {
            dc: m.dc,
            voe: m.voe,
            rvd: m.rvd.unwrap_or(f64::NAN),
            assd_mm: m.assd_mm.unwrap_or(f64::NAN),
            msd_mm: m.msd_mm.unwrap_or(f64::NAN),
            rmsd_mm: m.rmsd_mm.unwrap_or(f64::NAN),
            has_rvd: m.rvd.is_some(),
            has_surface: m.assd_mm.is_some(),
        };
        copy_out(&[r], out, 1)
    })
}
