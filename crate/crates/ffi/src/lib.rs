//! C interface to dynamic grained encoder checkpoints.
//!
//! Every function returns a [`DgeStatus`]; on failure the thread-local
//! message behind [`dge_last_error_message`] describes what went wrong.
//! Models are opaque handles created by [`dge_model_load`] and released
//! with [`dge_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use dge_core::budget::{flops_report, BudgetReport};
use dge_core::encoder::VitModel;
use dge_core::router::export_decision;
use dge_core::tensor::checkpoint::read_manifest;
use dge_core::tensor::{DType, Element, Tensor};
use dge_core::DgeError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DgeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Checkpoint = 4,
    Numeric = 5,
    Config = 6,
    BufferTooSmall = 7,
    Panic = 8,
    Internal = 9,
}

/// Compute summary of one routed inference.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DgeRouteSummary {
    /// Realized compute ratio of the dynamic part.
    pub beta: f64,
    pub dynamic_flops: f64,
    pub static_flops: f64,
    /// Queries summed over all layers.
    pub queries: usize,
}

enum Inner {
    F32(VitModel<f32>),
    F64(VitModel<f64>),
}

/// Loaded classifier; opaque to C.
pub struct DgeModel {
    inner: Inner,
}

type Failure = (DgeStatus, String);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let text = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn classify_error(e: DgeError) -> Failure {
    let status = match &e {
        DgeError::Io { .. } => DgeStatus::Io,
        DgeError::Checkpoint(_) | DgeError::Json(_) => DgeStatus::Checkpoint,
        DgeError::Numeric { .. } => DgeStatus::Numeric,
        DgeError::Config(_) => DgeStatus::Config,
        DgeError::Dimension { .. } | DgeError::Shape { .. } | DgeError::Usage(_) | DgeError::Degenerate(_) => {
            DgeStatus::InvalidArgument
        }
        DgeError::Invariant(_) => DgeStatus::Internal,
    };
    (status, e.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DgeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            DgeStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside dge");
            DgeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (DgeStatus::NullPointer, format!("`{what}` is null"))
}

fn run_model<T: Element>(model: &VitModel<T>, pixels: &[f64]) -> Result<(Vec<f64>, BudgetReport, String), Failure> {
    let cfg = model.config();
    let image = Tensor::<T>::from_f64([cfg.in_channels, cfg.image_size, cfg.image_size], pixels)
        .map_err(classify_error)?;
    let (logits, trace) = model.classify(&image).map_err(classify_error)?;
    let report = flops_report(cfg, model.partition(), &trace).map_err(classify_error)?;
    let layers: Vec<_> = trace
        .iter()
        .enumerate()
        .map(|(l, out)| export_decision(l, &out.decision, model.partition(), cfg.patch_size))
        .collect();
    let json = serde_json_string(&layers, &report)?;
    Ok((logits.to_f64_vec(), report, json))
}

fn serde_json_string(
    layers: &[dge_core::router::LayerDecisionExport],
    report: &BudgetReport,
) -> Result<String, Failure> {
    #[derive(serde::Serialize)]
    struct Routing<'a> {
        layers: &'a [dge_core::router::LayerDecisionExport],
        budget: &'a BudgetReport,
    }
    serde_json::to_string(&Routing { layers, budget: report }).map_err(|e| classify_error(e.into()))
}

impl DgeModel {
    fn input_len(&self) -> usize {
        match &self.inner {
            Inner::F32(m) => m.input_len(),
            Inner::F64(m) => m.input_len(),
        }
    }

    fn num_classes(&self) -> usize {
        match &self.inner {
            Inner::F32(m) => m.config().num_classes,
            Inner::F64(m) => m.config().num_classes,
        }
    }

    fn run(&self, pixels: &[f64]) -> Result<(Vec<f64>, BudgetReport, String), Failure> {
        if pixels.len() != self.input_len() {
            return Err((
                DgeStatus::InvalidArgument,
                format!("expected {} pixels, got {}", self.input_len(), pixels.len()),
            ));
        }
        match &self.inner {
            Inner::F32(m) => run_model(m, pixels),
            Inner::F64(m) => run_model(m, pixels),
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dge_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next dge call on the same thread.
#[no_mangle]
pub extern "C" fn dge_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint manifest. Parameters stay in the precision they were
/// saved with.
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` a writable
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn dge_model_load(manifest_path: *const c_char, out: *mut *mut DgeModel) -> DgeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        unsafe { *out = ptr::null_mut() };
        if manifest_path.is_null() {
            return Err(null("manifest_path"));
        }
        let path = unsafe { CStr::from_ptr(manifest_path) }
            .to_str()
            .map_err(|e| (DgeStatus::InvalidArgument, format!("path is not UTF-8: {e}")))?;
        let path = Path::new(path);
        let manifest = read_manifest(path).map_err(classify_error)?;
        let dtype = manifest.params.values().next().map(|p| p.dtype).unwrap_or(DType::F32);
        let inner = match dtype {
            DType::F32 => Inner::F32(VitModel::load(path).map_err(classify_error)?),
            DType::F64 => Inner::F64(VitModel::load(path).map_err(classify_error)?),
        };
        unsafe { *out = Box::into_raw(Box::new(DgeModel { inner })) };
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`dge_model_load`] and not have been freed; null
/// is ignored.
#[no_mangle]
pub unsafe extern "C" fn dge_model_free(model: *mut DgeModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of pixels one image must have (channels × size × size); 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dge_model_input_len(model: *const DgeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, DgeModel::input_len)
}

/// Number of logits per image; 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn dge_model_num_classes(model: *const DgeModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, DgeModel::num_classes)
}

/// Routed inference on one channel-major image.
///
/// Writes `num_classes` logits into `logits_out`. `report_out` may be null.
///
/// # Safety
/// `pixels` must hold `pixels_len` values and `logits_out` room for
/// `logits_len` values.
#[no_mangle]
pub unsafe extern "C" fn dge_model_classify(
    model: *const DgeModel,
    pixels: *const f64,
    pixels_len: usize,
    logits_out: *mut f64,
    logits_len: usize,
    report_out: *mut DgeRouteSummary,
) -> DgeStatus {
    guard(|| {
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        if logits_out.is_null() {
            return Err(null("logits_out"));
        }
        if logits_len < model.num_classes() {
            return Err((
                DgeStatus::BufferTooSmall,
                format!("logits buffer holds {logits_len}, need {}", model.num_classes()),
            ));
        }
        let pixels = unsafe { std::slice::from_raw_parts(pixels, pixels_len) };
        let (logits, report, _) = model.run(pixels)?;
        unsafe { std::slice::from_raw_parts_mut(logits_out, logits.len()) }.copy_from_slice(&logits);
        if let Some(out) = unsafe { report_out.as_mut() } {
            *out = DgeRouteSummary {
                beta: report.beta,
                dynamic_flops: report.dynamic_flops,
                static_flops: report.static_flops,
                queries: report.layers.iter().map(|l| l.psi).sum(),
            };
        }
        Ok(())
    })
}

/// Per-layer routing decisions and the FLOPs report as a JSON string.
/// Release it with [`dge_string_free`].
///
/// # Safety
/// As [`dge_model_classify`]; `json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn dge_model_route_json(
    model: *const DgeModel,
    pixels: *const f64,
    pixels_len: usize,
    json_out: *mut *mut c_char,
) -> DgeStatus {
    guard(|| {
        if json_out.is_null() {
            return Err(null("json_out"));
        }
        unsafe { *json_out = ptr::null_mut() };
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if pixels.is_null() {
            return Err(null("pixels"));
        }
        let pixels = unsafe { std::slice::from_raw_parts(pixels, pixels_len) };
        let (_, _, json) = model.run(pixels)?;
        let text = CString::new(json).map_err(|e| (DgeStatus::Internal, e.to_string()))?;
        unsafe { *json_out = text.into_raw() };
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`dge_model_route_json`] and not have been freed;
/// null is ignored.
#[no_mangle]
pub unsafe extern "C" fn dge_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}
