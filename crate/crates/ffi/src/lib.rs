//! C ABI over the sheath simulator.
//!
//! Objects are opaque handles created by `sheath_*_new`/`_load` and released
//! with the matching `_free`. Every fallible call returns a `SheathStatus`;
//! on failure `sheath_last_error()` describes what went wrong on the calling
//! thread. Strings returned to the caller are owned by it and released with
//! `sheath_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use sheath::attack::{apply_noise, NoiseConfig};
use sheath::config::ExperimentConfig;
use sheath::experiment::{cmd_fit_sheath, cmd_run, cmd_train, load_model, ScenarioKind};
use sheath::harness::Detector;
use sheath::models::{build_model, ArchitectureId};
use sheath::nn::{read_weights_file, ModelSpec};
use sheath::sheath::PseudoSize;
use sheath::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SheathStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Shape = 3,
    Numeric = 4,
    Format = 5,
    Config = 6,
    Io = 7,
    Panic = 8,
}

/// Noise families accepted by `sheath_apply_noise`.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SheathNoiseKind {
    GaussianMasked = 0,
    PolaritySwitch = 1,
}

/// A trained or freshly initialised network.
pub struct SheathModel {
    inner: Arc<ModelSpec>,
}

/// A parsed experiment config.
pub struct SheathConfig {
    inner: ExperimentConfig,
}

/// A calibrated partial copy of one layer plus its comparator.
pub struct SheathDetector {
    inner: Detector,
    input_dims: Vec<usize>,
    output_dims: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SheathStatus, String);

fn status_of(e: &Error) -> SheathStatus {
    match e {
        Error::Shape(_) => SheathStatus::Shape,
        Error::Numeric(_) => SheathStatus::Numeric,
        Error::Format { .. } => SheathStatus::Format,
        Error::Config(_) => SheathStatus::Config,
        Error::Io { .. } => SheathStatus::Io,
        Error::Node { source, .. } => status_of(source),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SheathStatus::InvalidArgument, msg.into())
}

fn null(what: &str) -> Failure {
    Failure(SheathStatus::NullArgument, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SheathStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SheathStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SheathStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| invalid("string contains NUL"))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sheath_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL after a
/// success. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn sheath_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn sheath_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---- models ----

/// Builds `arch` ("edgecnn", "lenet5", "minivggnet") with seeded random
/// weights and its default input shape.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_new(
    arch: *const c_char,
    seed: u64,
    model: *mut *mut SheathModel,
) -> SheathStatus {
    guard(|| {
        let arch: ArchitectureId = text(arch, "arch")?.parse()?;
        let m = build_model(arch, &arch.default_input_shape(), 10, seed)?;
        *out(model, "model")? = Box::into_raw(Box::new(SheathModel { inner: Arc::new(m) }));
        Ok(())
    })
}

/// Loads a weight file written by `sheath train`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_load(path: *const c_char, model: *mut *mut SheathModel) -> SheathStatus {
    guard(|| {
        let m = read_weights_file(&PathBuf::from(text(path, "path")?))?;
        *out(model, "model")? = Box::into_raw(Box::new(SheathModel { inner: Arc::new(m) }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not have been freed. NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_free(model: *mut SheathModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values in one input image.
///
/// # Safety
/// `model` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_input_len(model: *const SheathModel, len: *mut usize) -> SheathStatus {
    guard(|| {
        *out(len, "len")? = handle(model, "model")?.inner.input_shape.iter().product();
        Ok(())
    })
}

/// Number of output classes.
///
/// # Safety
/// `model` must be a live handle; `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_output_len(model: *const SheathModel, len: *mut usize) -> SheathStatus {
    guard(|| {
        *out(len, "len")? = handle(model, "model")?.inner.num_outputs()?;
        Ok(())
    })
}

/// Class probabilities for one image laid out channel-major.
///
/// # Safety
/// `input` must hold `input_len` values and `output` room for `output_len`.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_forward(
    model: *const SheathModel,
    input: *const f64,
    input_len: usize,
    output: *mut f64,
    output_len: usize,
) -> SheathStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let x = Tensor::new(m.input_shape.clone(), slice(input, input_len, "input")?.to_vec())?;
        let y = m.forward(&x)?;
        if output.is_null() {
            return Err(null("output"));
        }
        if output_len != y.len() {
            return Err(invalid(format!("output buffer holds {output_len} values, model produces {}", y.len())));
        }
        std::slice::from_raw_parts_mut(output, output_len).copy_from_slice(y.data());
        Ok(())
    })
}

/// Index of the most probable class.
///
/// # Safety
/// `input` must hold `input_len` values; `class` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_predict(
    model: *const SheathModel,
    input: *const f64,
    input_len: usize,
    class: *mut usize,
) -> SheathStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let x = Tensor::new(m.input_shape.clone(), slice(input, input_len, "input")?.to_vec())?;
        *out(class, "class")? = m.predict(&x)?;
        Ok(())
    })
}

/// Value counts of `layer`'s input and output maps.
///
/// # Safety
/// `model` must be a live handle; `layer` a NUL-terminated string; both
/// outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_layer_lens(
    model: *const SheathModel,
    layer: *const c_char,
    input_len: *mut usize,
    output_len: *mut usize,
) -> SheathStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let (i, o) = layer_dims(m, text(layer, "layer")?)?;
        *out(input_len, "input_len")? = i.iter().product();
        *out(output_len, "output_len")? = o.iter().product();
        Ok(())
    })
}

fn layer_dims(m: &ModelSpec, layer: &str) -> Result<(Vec<usize>, Vec<usize>), Failure> {
    let idx = m.layer_index(layer).ok_or_else(|| invalid(format!("unknown layer {layer:?}")))?;
    let input = m.input_dims_of(idx)?;
    let output = m.layers[idx].output_dims(&input)?;
    Ok((input, output))
}

unsafe fn fill(dst: *mut f64, len: usize, src: &Tensor, what: &str) -> Result<(), Failure> {
    if dst.is_null() {
        return Err(null(what));
    }
    if len != src.len() {
        return Err(invalid(format!("{what} holds {len} values, needs {}", src.len())));
    }
    std::slice::from_raw_parts_mut(dst, len).copy_from_slice(src.data());
    Ok(())
}

/// The clean input and output maps of `layer` for one image: what the
/// layer's node receives and what it sends on.
///
/// # Safety
/// `image` must hold `image_len` values; `input_map` and `output_map` must
/// have room for the lengths given by `sheath_model_layer_lens`.
#[no_mangle]
pub unsafe extern "C" fn sheath_model_layer_maps(
    model: *const SheathModel,
    layer: *const c_char,
    image: *const f64,
    image_len: usize,
    input_map: *mut f64,
    input_len: usize,
    output_map: *mut f64,
    output_len: usize,
) -> SheathStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let layer = text(layer, "layer")?;
        let idx = m.layer_index(layer).ok_or_else(|| invalid(format!("unknown layer {layer:?}")))?;
        let x = Tensor::new(m.input_shape.clone(), slice(image, image_len, "image")?.to_vec())?;
        let input = if idx == 0 { x } else { m.forward_range(&x, 0..idx)? };
        let output = m.layers[idx].forward(&input)?;
        fill(input_map, input_len, &input, "input_map")?;
        fill(output_map, output_len, &output, "output_map")
    })
}

// ---- noise ----

/// Perturbs a feature map in place; mean and spread of the Gaussian are
/// taken from the map itself. `sp` is ignored for polarity switching.
///
/// # Safety
/// `data` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn sheath_apply_noise(
    kind: SheathNoiseKind,
    np: f64,
    sp: f64,
    seed: u64,
    data: *mut f64,
    len: usize,
) -> SheathStatus {
    guard(|| {
        if data.is_null() {
            return Err(null("data"));
        }
        let buf = std::slice::from_raw_parts_mut(data, len);
        let cfg = match kind {
            SheathNoiseKind::GaussianMasked => NoiseConfig::gaussian(np, sp, seed),
            SheathNoiseKind::PolaritySwitch => NoiseConfig::polarity(np, seed),
        };
        let fm = Tensor::new(vec![len], buf.to_vec())?;
        buf.copy_from_slice(apply_noise(&fm, &cfg)?.data());
        Ok(())
    })
}

// ---- detectors ----

/// Copies the first `p` filters of `layer` and calibrates the comparator on
/// `n_images` clean images stored back to back.
///
/// # Safety
/// `images` must hold `n_images * input_len` values; `detector` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_detector_new(
    model: *const SheathModel,
    layer: *const c_char,
    p: usize,
    images: *const f64,
    n_images: usize,
    epsilon_floor: f64,
    detector: *mut *mut SheathDetector,
) -> SheathStatus {
    guard(|| {
        let m = &handle(model, "model")?.inner;
        let layer = text(layer, "layer")?;
        let image_len: usize = m.input_shape.iter().product();
        let total = n_images.checked_mul(image_len).ok_or_else(|| invalid("image buffer too large"))?;
        let data = slice(images, total, "images")?;
        let clean = data
            .chunks_exact(image_len)
            .map(|c| Tensor::new(m.input_shape.clone(), c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let (det, _) = Detector::calibrated(m, layer, PseudoSize::P(p), &clean, epsilon_floor)?;
        let (input_dims, output_dims) = layer_dims(m, layer)?;
        *out(detector, "detector")? = Box::into_raw(Box::new(SheathDetector { inner: det, input_dims, output_dims }));
        Ok(())
    })
}

/// # Safety
/// `detector` must come from this library and not have been freed. NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sheath_detector_free(detector: *mut SheathDetector) {
    if !detector.is_null() {
        drop(Box::from_raw(detector));
    }
}

/// Value counts of the guarded layer's input and output maps.
///
/// # Safety
/// `detector` must be a live handle; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_detector_lens(
    detector: *const SheathDetector,
    input_len: *mut usize,
    output_len: *mut usize,
) -> SheathStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        *out(input_len, "input_len")? = d.input_dims.iter().product();
        *out(output_len, "output_len")? = d.output_dims.iter().product();
        Ok(())
    })
}

/// Comparator MSE of a received message against the copy's recomputation
/// from the message's upstream input, and whether it exceeds the threshold.
///
/// # Safety
/// `payload` and `upstream` must hold the lengths reported by
/// `sheath_detector_lens`; `mse` and `flagged` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_detector_score(
    detector: *const SheathDetector,
    payload: *const f64,
    payload_len: usize,
    upstream: *const f64,
    upstream_len: usize,
    mse: *mut f64,
    flagged: *mut bool,
) -> SheathStatus {
    guard(|| {
        let d = handle(detector, "detector")?;
        let payload = Tensor::new(d.output_dims.clone(), slice(payload, payload_len, "payload")?.to_vec())?;
        let upstream = Tensor::new(d.input_dims.clone(), slice(upstream, upstream_len, "upstream")?.to_vec())?;
        let score = d.inner.score(&payload, &upstream);
        if !score.is_finite() {
            return Err(Failure(SheathStatus::Numeric, "message could not be compared".into()));
        }
        *out(mse, "mse")? = score;
        *out(flagged, "flagged")? = score > d.inner.comparator.threshold;
        Ok(())
    })
}

/// Comparator threshold fixed at calibration.
///
/// # Safety
/// `detector` must be a live handle; `threshold` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_detector_threshold(
    detector: *const SheathDetector,
    threshold: *mut f64,
) -> SheathStatus {
    guard(|| {
        *out(threshold, "threshold")? = handle(detector, "detector")?.inner.comparator.threshold;
        Ok(())
    })
}

// ---- experiments ----

/// Parses and validates a TOML experiment config.
///
/// # Safety
/// `path` must be a NUL-terminated string; `config` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_config_load(path: *const c_char, config: *mut *mut SheathConfig) -> SheathStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&PathBuf::from(text(path, "path")?))?;
        cfg.validate()?;
        *out(config, "config")? = Box::into_raw(Box::new(SheathConfig { inner: cfg }));
        Ok(())
    })
}

/// # Safety
/// `config` must come from this library and not have been freed. NULL is
/// ignored.
#[no_mangle]
pub unsafe extern "C" fn sheath_config_free(config: *mut SheathConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Redirects the config's outputs (weights, guards, reports) to `dir`.
///
/// # Safety
/// `config` must be a live handle; `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sheath_config_set_out_dir(config: *mut SheathConfig, dir: *const c_char) -> SheathStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        out(config, "config")?.inner.eval.out_dir = dir;
        Ok(())
    })
}

/// Trains the configured model; `test_accuracy` may be NULL.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sheath_train(config: *const SheathConfig, test_accuracy: *mut f64) -> SheathStatus {
    guard(|| {
        let record = cmd_train(&handle(config, "config")?.inner)?;
        if let Some(acc) = test_accuracy.as_mut() {
            *acc = record.test_accuracy;
        }
        Ok(())
    })
}

/// Calibrates the configured guards and fits their recover models.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sheath_fit(config: *const SheathConfig) -> SheathStatus {
    guard(|| {
        cmd_fit_sheath(&handle(config, "config")?.inner)?;
        Ok(())
    })
}

/// Runs a scenario ("detect", "recover", "sweep", "multinode", "stealth",
/// "overhead") and returns its report as JSON in `report`, to be released
/// with `sheath_string_free`. `violations` receives the number of config
/// bounds the report breaks and may be NULL.
///
/// # Safety
/// `config` must be a live handle; `scenario` a NUL-terminated string;
/// `report` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_run(
    config: *const SheathConfig,
    scenario: *const c_char,
    report: *mut *mut c_char,
    violations: *mut usize,
) -> SheathStatus {
    guard(|| {
        let cfg = &handle(config, "config")?.inner;
        let kind: ScenarioKind = text(scenario, "scenario")?.parse().map_err(invalid)?;
        let report = out(report, "report")?;
        let outcome = cmd_run(cfg, kind)?;
        let json = serde_json::to_string(&outcome.report).map_err(|e| invalid(e.to_string()))?;
        *report = owned_string(json)?;
        if let Some(v) = violations.as_mut() {
            *v = outcome.violations.len();
        }
        Ok(())
    })
}

/// Loads the trained model a config points at.
///
/// # Safety
/// `config` must be a live handle; `model` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sheath_config_model(
    config: *const SheathConfig,
    model: *mut *mut SheathModel,
) -> SheathStatus {
    guard(|| {
        let m = load_model(&handle(config, "config")?.inner)?;
        *out(model, "model")? = Box::into_raw(Box::new(SheathModel { inner: Arc::new(m) }));
        Ok(())
    })
}
