//! C ABI over the attribution toolkit.
//!
//! Conventions: objects cross the boundary as opaque handles that must be
//! released with their matching `_free` function; fallible calls report an
//! [`IgpStatus`] through an out-parameter and leave a human-readable message
//! retrievable with [`igp_last_error_message`] (thread-local, valid until
//! the next failing call on the same thread). Strings are NUL-terminated
//! UTF-8. Score buffers are row-major `layer_count x intermediate_dim` and
//! live as long as their owning handle.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, c_double, size_t};

use igprobe::attribution::{attribute, AttributionConfig, AttributionMap};
use igprobe::error::Error;
use igprobe::model::{load_model, MaskedLm, Model};
use igprobe::selection::{adaptive_select, coarse_select};

/// Result codes; additions keep existing values stable.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum IgpStatus {
    IgpOk = 0,
    IgpLoadError = 1,
    IgpCapabilityError = 2,
    IgpPromptStructureError = 3,
    IgpMultiTokenTarget = 4,
    IgpBoundsError = 5,
    IgpDegenerateMap = 6,
    IgpInvalidArgument = 7,
    IgpCapacityError = 8,
    IgpShapeMismatch = 9,
    IgpIoError = 10,
    IgpFormatError = 11,
    IgpNullPointer = 12,
    IgpInvalidUtf8 = 13,
    IgpPanic = 14,
}

fn status_of(err: &Error) -> IgpStatus {
    match err.category() {
        "load" => IgpStatus::IgpLoadError,
        "capability" => IgpStatus::IgpCapabilityError,
        "prompt-structure" => IgpStatus::IgpPromptStructureError,
        "multi-token-target" => IgpStatus::IgpMultiTokenTarget,
        "bounds" => IgpStatus::IgpBoundsError,
        "degenerate-map" => IgpStatus::IgpDegenerateMap,
        "invalid-argument" => IgpStatus::IgpInvalidArgument,
        "capacity" => IgpStatus::IgpCapacityError,
        "shape-mismatch" => IgpStatus::IgpShapeMismatch,
        "io" => IgpStatus::IgpIoError,
        "format" => IgpStatus::IgpFormatError,
        _ => IgpStatus::IgpInvalidArgument,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn record_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn set_status(out: *mut IgpStatus, status: IgpStatus) {
    if !out.is_null() {
        unsafe { *out = status };
    }
}

/// Opaque loaded model.
pub struct IgpModel {
    inner: Model,
}

/// Opaque attribution result.
pub struct IgpAttribution {
    map: AttributionMap,
    /// Row-major copy handed out to C.
    scores: Vec<c_double>,
    layer_count: size_t,
    intermediate_dim: size_t,
}

/// Opaque neuron set: parallel member arrays in (layer, index) order.
pub struct IgpNeuronSet {
    layers: Vec<size_t>,
    indices: Vec<size_t>,
    support: Vec<u32>,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, IgpStatus> {
    if ptr.is_null() {
        record_error("null pointer argument");
        return Err(IgpStatus::IgpNullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        record_error("argument is not valid UTF-8");
        IgpStatus::IgpInvalidUtf8
    })
}

fn guarded<T>(
    status: *mut IgpStatus,
    f: impl FnOnce() -> Result<T, IgpStatus>,
) -> Option<T> {
    let outcome = catch_unwind(AssertUnwindSafe(f));
    match outcome {
        Ok(Ok(value)) => {
            set_status(status, IgpStatus::IgpOk);
            Some(value)
        }
        Ok(Err(code)) => {
            set_status(status, code);
            None
        }
        Err(_) => {
            record_error("internal panic");
            set_status(status, IgpStatus::IgpPanic);
            None
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn igp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failure on this thread. Valid until the next failing
/// call on the same thread; never NULL.
#[no_mangle]
pub extern "C" fn igp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Load a model from a checkpoint directory or toy spec file.
/// Returns NULL on failure.
///
/// # Safety
/// `path` must be a valid NUL-terminated string or NULL; `status` must be
/// NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn igp_model_load(
    path: *const c_char,
    status: *mut IgpStatus,
) -> *mut IgpModel {
    guarded(status, || {
        let path = cstr(path)?;
        match load_model(Path::new(path)) {
            Ok(inner) => Ok(Box::into_raw(Box::new(IgpModel { inner }))),
            Err(e) => {
                record_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
    .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `model` must come from [`igp_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn igp_model_free(model: *mut IgpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be NULL or a live handle from [`igp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn igp_model_layer_count(model: *const IgpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).inner.info().layer_count
}

/// # Safety
/// `model` must be NULL or a live handle from [`igp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn igp_model_intermediate_dim(model: *const IgpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).inner.info().intermediate_dim
}

/// # Safety
/// `model` must be NULL or a live handle from [`igp_model_load`].
#[no_mangle]
pub unsafe extern "C" fn igp_model_vocab_size(model: *const IgpModel) -> size_t {
    if model.is_null() {
        return 0;
    }
    (*model).inner.info().vocab_size
}

/// Integrated-gradients attribution of `target` over a masked prompt.
/// Returns NULL on failure.
///
/// # Safety
/// `model` must be a live handle; `prompt` and `target` must be valid
/// NUL-terminated strings or NULL; `status` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn igp_attribute(
    model: *const IgpModel,
    prompt: *const c_char,
    target: *const c_char,
    steps: size_t,
    normalize: bool,
    status: *mut IgpStatus,
) -> *mut IgpAttribution {
    guarded(status, || {
        if model.is_null() {
            record_error("null model");
            return Err(IgpStatus::IgpNullPointer);
        }
        let prompt = cstr(prompt)?;
        let target = cstr(target)?;
        let config = AttributionConfig {
            steps,
            layers: igprobe::attribution::LayerSelection::All,
            normalize,
        };
        match attribute(&(*model).inner, prompt, target, &config) {
            Ok(map) => {
                let scores: Vec<c_double> = map.scores().iter().copied().collect();
                Ok(Box::into_raw(Box::new(IgpAttribution {
                    layer_count: map.layer_count(),
                    intermediate_dim: map.intermediate_dim(),
                    scores,
                    map,
                })))
            }
            Err(e) => {
                record_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
    .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `attribution` must come from [`igp_attribute`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn igp_attribution_free(attribution: *mut IgpAttribution) {
    if !attribution.is_null() {
        drop(Box::from_raw(attribution));
    }
}

/// # Safety
/// `attribution` must be NULL or a live handle from [`igp_attribute`].
#[no_mangle]
pub unsafe extern "C" fn igp_attribution_layer_count(
    attribution: *const IgpAttribution,
) -> size_t {
    if attribution.is_null() {
        return 0;
    }
    (*attribution).layer_count
}

/// # Safety
/// `attribution` must be NULL or a live handle from [`igp_attribute`].
#[no_mangle]
pub unsafe extern "C" fn igp_attribution_intermediate_dim(
    attribution: *const IgpAttribution,
) -> size_t {
    if attribution.is_null() {
        return 0;
    }
    (*attribution).intermediate_dim
}

/// Row-major `layer_count x intermediate_dim` score buffer, owned by the
/// attribution handle.
///
/// # Safety
/// `attribution` must be NULL or a live handle; the buffer is valid only
/// while the handle lives.
#[no_mangle]
pub unsafe extern "C" fn igp_attribution_scores(
    attribution: *const IgpAttribution,
) -> *const c_double {
    if attribution.is_null() {
        return std::ptr::null();
    }
    (*attribution).scores.as_ptr()
}

fn export_set(set: igprobe::selection::NeuronSet) -> *mut IgpNeuronSet {
    let mut layers = Vec::with_capacity(set.len());
    let mut indices = Vec::with_capacity(set.len());
    let mut support = Vec::with_capacity(set.len());
    for (n, &s) in set.iter() {
        layers.push(n.layer);
        indices.push(n.index);
        support.push(s);
    }
    Box::into_raw(Box::new(IgpNeuronSet {
        layers,
        indices,
        support,
    }))
}

/// Neurons with score strictly above `t` (`t >= 0`). Returns NULL on failure.
///
/// # Safety
/// `attribution` must be NULL or a live handle; `status` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn igp_select_coarse(
    attribution: *const IgpAttribution,
    t: c_double,
    status: *mut IgpStatus,
) -> *mut IgpNeuronSet {
    guarded(status, || {
        if attribution.is_null() {
            record_error("null attribution");
            return Err(IgpStatus::IgpNullPointer);
        }
        match coarse_select(&(*attribution).map, t) {
            Ok(set) => Ok(export_set(set)),
            Err(e) => {
                record_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
    .unwrap_or(std::ptr::null_mut())
}

/// Neurons at or above `fraction` of the map maximum. Returns NULL on failure.
///
/// # Safety
/// `attribution` must be NULL or a live handle; `status` NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn igp_select_adaptive(
    attribution: *const IgpAttribution,
    fraction: c_double,
    status: *mut IgpStatus,
) -> *mut IgpNeuronSet {
    guarded(status, || {
        if attribution.is_null() {
            record_error("null attribution");
            return Err(IgpStatus::IgpNullPointer);
        }
        match adaptive_select(&(*attribution).map, fraction) {
            Ok(set) => Ok(export_set(set)),
            Err(e) => {
                record_error(&e.to_string());
                Err(status_of(&e))
            }
        }
    })
    .unwrap_or(std::ptr::null_mut())
}

/// # Safety
/// `set` must be NULL or a live handle from a select call.
#[no_mangle]
pub unsafe extern "C" fn igp_neuron_set_len(set: *const IgpNeuronSet) -> size_t {
    if set.is_null() {
        return 0;
    }
    (*set).layers.len()
}

/// Fetch member `i` (in (layer, index) order) into the out-parameters.
///
/// # Safety
/// `set` must be NULL or a live handle; out-parameters must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn igp_neuron_set_member(
    set: *const IgpNeuronSet,
    i: size_t,
    layer: *mut size_t,
    index: *mut size_t,
    support: *mut u32,
) -> IgpStatus {
    if set.is_null() {
        record_error("null neuron set");
        return IgpStatus::IgpNullPointer;
    }
    let s = &*set;
    if i >= s.layers.len() {
        record_error("member index out of range");
        return IgpStatus::IgpBoundsError;
    }
    if !layer.is_null() {
        *layer = s.layers[i];
    }
    if !index.is_null() {
        *index = s.indices[i];
    }
    if !support.is_null() {
        *support = s.support[i];
    }
    IgpStatus::IgpOk
}

/// # Safety
/// `set` must come from a select call and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn igp_neuron_set_free(set: *mut IgpNeuronSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}
