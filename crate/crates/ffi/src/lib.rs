//! C ABI over the stnet models.
//!
//! Every function returns a [`StnetStatus`]; on failure a message is available from
//! [`stnet_last_error`] on the same thread. Handles are opaque and must be released
//! with the matching `*_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use stnet::config::RunConfig;
use stnet::fusion::{build_itxn, itxn_forward, ItxnGraph, Modality, ModalityBundle};
use stnet::graph::ExecOptions;
use stnet::kernels::Mode;
use stnet::params::ParamSet;
use stnet::rng::RngStream;
use stnet::sampling::{sample_segments, SuperImageBatch};
use stnet::stnet::{build_stnet, forward_stnet, init_stnet_params, StNetGraph};
use stnet::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StnetStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Internal = 5,
    Panic = 6,
}

/// Segment sampling regime: random offsets for training, centered for evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StnetSampleMode {
    Train = 0,
    Eval = 1,
}

enum Arch {
    Clip(StNetGraph),
    Seq(ItxnGraph),
}

/// Opaque model handle: an architecture plus its f32 parameters.
pub struct StnetModel {
    arch: Arch,
    params: ParamSet<f32>,
}

impl StnetModel {
    fn graph(&self) -> &stnet::graph::ModelGraph {
        match &self.arch {
            Arch::Clip(g) => &g.graph,
            Arch::Seq(g) => &g.graph,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(StnetStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Shape { .. } | Error::Dim { .. } => StnetStatus::ShapeMismatch,
            Error::Io(_) | Error::Format { .. } => StnetStatus::Io,
            Error::NonFinite { .. } => StnetStatus::Internal,
            _ => StnetStatus::InvalidArgument,
        };
        Fail(code, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(StnetStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StnetStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => StnetStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(&msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("panic: {msg}"));
            StnetStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(Fail(StnetStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `p` is null or a NUL-terminated string.
unsafe fn opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Fail> {
    if p.is_null() {
        return Ok(None);
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Some)
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn config_from(json: *const c_char) -> Result<RunConfig, Fail> {
    let cfg = match opt_str(json, "config_json")? {
        Some(s) => serde_json::from_str::<RunConfig>(s).map_err(|e| invalid(format!("config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Message of the last failed call on this thread (empty if none). The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn stnet_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stnet_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds an StNet from a JSON run config (NULL for defaults) with the standard init.
///
/// # Safety
/// `config_json` is null or NUL-terminated; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_new_stnet(config_json: *const c_char, num_classes: usize, seed: u64, out: *mut *mut StnetModel) -> StnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = config_from(config_json)?;
        let g = build_stnet(&cfg.stnet(num_classes))?;
        let params = init_stnet_params::<f32>(&g, RngStream::new(seed).named("init"), None)?;
        *out = Box::into_raw(Box::new(StnetModel { arch: Arch::Clip(g), params }));
        Ok(())
    })
}

/// Builds an iTXN over the modalities configured in the run config.
///
/// # Safety
/// As for [`stnet_model_new_stnet`].
#[no_mangle]
pub unsafe extern "C" fn stnet_model_new_itxn(config_json: *const c_char, num_classes: usize, seed: u64, out: *mut *mut StnetModel) -> StnetStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = config_from(config_json)?;
        let g = build_itxn(&cfg.multimodal_xor.dims, &cfg.fusion_txn, num_classes)?;
        let params = g.graph.init_params::<f32>(RngStream::new(seed).named("init"));
        *out = Box::into_raw(Box::new(StnetModel { arch: Arch::Seq(g), params }));
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle from a `stnet_model_new_*` call, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_free(model: *mut StnetModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_param_count(model: *const StnetModel, out: *mut usize) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).graph().param_count();
        Ok(())
    })
}

/// Output width (number of classes) of the model.
///
/// # Safety
/// `model` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_num_classes(model: *const StnetModel, out: *mut usize) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = match &(*model).arch {
            Arch::Clip(g) => g.config.num_classes,
            Arch::Seq(g) => g.num_classes,
        };
        Ok(())
    })
}

/// Layer table as JSON. Release the string with [`stnet_string_free`].
///
/// # Safety
/// `model` and `out` are valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_describe_json(model: *const StnetModel, out: *mut *mut c_char) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let d = (*model).graph().describe(None)?;
        let s = serde_json::to_string(&d).map_err(|e| Fail(StnetStatus::Internal, e.to_string()))?;
        *out = CString::new(s).map_err(|e| Fail(StnetStatus::Internal, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` is null or a string returned by this library, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn stnet_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Eval-mode StNet forward on clips laid out `[batch, segments, channels, height, width]`
/// (row-major f32, `channels` = 3N). Writes `batch * num_classes` logits.
///
/// # Safety
/// `clips` holds the stated number of floats; `logits` holds `logits_len` floats.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_forward_clips(
    model: *const StnetModel,
    clips: *const f32,
    batch: usize,
    segments: usize,
    channels: usize,
    height: usize,
    width: usize,
    logits: *mut f32,
    logits_len: usize,
) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(clips, "clips")?;
        non_null(logits, "logits")?;
        let m = &*model;
        let Arch::Clip(g) = &m.arch else {
            return Err(invalid("stnet_model_forward_clips needs an StNet handle"));
        };
        let shape = [batch, segments, channels, height, width];
        let n: usize = shape.iter().product();
        let data = std::slice::from_raw_parts(clips, n).to_vec();
        let batch_t = SuperImageBatch {
            clips: Tensor::new(shape.to_vec(), data)?,
            labels: vec![],
        };
        let f = forward_stnet(g, &m.params, &batch_t, Mode::Eval, ExecOptions::default())?;
        copy_out(f.logits().data(), logits, logits_len)
    })
}

/// Eval-mode iTXN forward on one sample. Modality `i` is named `names[i]`
/// (`rgb`, `flow_a`, `flow_b`, `audio`) and has `lengths[i] x dims[i]` row-major floats
/// at `data[i]`. Writes `num_classes` logits.
///
/// # Safety
/// All arrays hold `n_modalities` entries and each `data[i]` holds the stated floats.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_forward_bundle(
    model: *const StnetModel,
    names: *const *const c_char,
    data: *const *const f32,
    lengths: *const usize,
    dims: *const usize,
    n_modalities: usize,
    logits: *mut f32,
    logits_len: usize,
) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(logits, "logits")?;
        let m = &*model;
        let Arch::Seq(g) = &m.arch else {
            return Err(invalid("stnet_model_forward_bundle needs an iTXN handle"));
        };
        let mut bundle = ModalityBundle::new();
        if n_modalities > 0 {
            for p in [names.cast::<u8>(), data.cast(), lengths.cast(), dims.cast()] {
                non_null(p, "modality arrays")?;
            }
        }
        for i in 0..n_modalities {
            let name = opt_str(*names.add(i), "names")?.ok_or_else(|| Fail(StnetStatus::NullPointer, format!("names[{i}] is null")))?;
            let modality: Modality = name.parse()?;
            let (t, d) = (*lengths.add(i), *dims.add(i));
            let p = *data.add(i);
            non_null(p, "data[i]")?;
            let seq = Tensor::new(vec![t, d], std::slice::from_raw_parts(p, t * d).to_vec())?;
            bundle.insert(modality, seq)?;
        }
        let y = itxn_forward(g, &m.params, &bundle, Mode::Eval)?;
        copy_out(y.data(), logits, logits_len)
    })
}

unsafe fn copy_out(src: &[f32], dst: *mut f32, len: usize) -> Result<(), Fail> {
    if len != src.len() {
        return Err(Fail(StnetStatus::ShapeMismatch, format!("logits buffer holds {len} floats, output has {}", src.len())));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, len);
    Ok(())
}

/// Writes the parameters as a manifest plus one binary blob per tensor under `dir`.
///
/// # Safety
/// `model` is valid; `dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_save_params(model: *const StnetModel, dir: *const c_char) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        let dir = opt_str(dir, "dir")?.ok_or_else(|| Fail(StnetStatus::NullPointer, "`dir` is null".into()))?;
        (*model).params.save(Path::new(dir))?;
        Ok(())
    })
}

/// Replaces the parameters with ones saved by [`stnet_model_save_params`]; names and
/// shapes must match the architecture.
///
/// # Safety
/// `model` is valid; `dir` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stnet_model_load_params(model: *mut StnetModel, dir: *const c_char) -> StnetStatus {
    guard(|| {
        non_null(model, "model")?;
        let dir = opt_str(dir, "dir")?.ok_or_else(|| Fail(StnetStatus::NullPointer, "`dir` is null".into()))?;
        let p = ParamSet::<f32>::load(Path::new(dir))?;
        (*model).graph().check_params(&p)?;
        (*model).params = p;
        Ok(())
    })
}

/// Start frame of each of `segments` segments of `n` frames in a clip of `frames` frames.
///
/// # Safety
/// `offsets` holds `offsets_len` entries.
#[no_mangle]
pub unsafe extern "C" fn stnet_sample_segments(
    frames: usize,
    segments: usize,
    n: usize,
    mode: StnetSampleMode,
    seed: u64,
    offsets: *mut usize,
    offsets_len: usize,
) -> StnetStatus {
    guard(|| {
        non_null(offsets, "offsets")?;
        let m = match mode {
            StnetSampleMode::Train => Mode::Train,
            StnetSampleMode::Eval => Mode::Eval,
        };
        let v = sample_segments(frames, segments, n, m, &RngStream::new(seed))?;
        if offsets_len != v.len() {
            return Err(Fail(StnetStatus::ShapeMismatch, format!("offsets buffer holds {offsets_len} entries, need {}", v.len())));
        }
        ptr::copy_nonoverlapping(v.as_ptr(), offsets, v.len());
        Ok(())
    })
}
