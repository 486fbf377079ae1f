//! C ABI over `vif-core`.
//!
//! Every fallible function returns a [`VifStatus`]; on failure the message
//! is kept per thread and read with [`vif_last_error_message`]. Models are
//! opaque handles created by `vif_model_new`/`vif_model_load` and released
//! with `vif_model_free`. No function retains caller pointers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vif_core::analysis::{mi_check, savgol, Joint};
use vif_core::model::{generate, Checkpoint, GenerationConfig, Mode, ModelConfig, ModelParams};
use vif_core::synthgrid::{vocab_size_for, GridImage, TaskSample};
use vif_core::tensor::{Precision, Rng};
use vif_core::vif::VifParams;
use vif_core::VifError;

pub const VIF_MODE_BASELINE: u32 = 0;
pub const VIF_MODE_VIF: u32 = 1;
pub const VIF_MODE_PASSTHROUGH: u32 = 2;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VifStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Precision = 5,
    Config = 6,
    Checkpoint = 7,
    Dataset = 8,
    Contract = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

impl From<&VifError> for VifStatus {
    fn from(e: &VifError) -> Self {
        match e {
            VifError::Shape { .. } => VifStatus::Shape,
            VifError::NonFinite(_) => VifStatus::NonFinite,
            VifError::Precision(_) => VifStatus::Precision,
            VifError::InvalidArgument(_) => VifStatus::InvalidArgument,
            VifError::Config(_) => VifStatus::Config,
            VifError::Checkpoint(_) => VifStatus::Checkpoint,
            VifError::Dataset { .. } => VifStatus::Dataset,
            VifError::Contract(_) => VifStatus::Contract,
            VifError::Io(_) => VifStatus::Io,
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

struct Failure(VifStatus, String);

impl From<VifError> for Failure {
    fn from(e: VifError) -> Self {
        Failure((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VifStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VifStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VifStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VifStatus::Panic
        }
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn vif_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Opaque model handle: decoder weights plus optional former weights.
pub struct VifModel {
    model: ModelParams,
    vif: Option<VifParams>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct VifModelOptions {
    pub seed: u64,
    pub grid_side: u32,
    pub n_symbols: u32,
    pub d_vision: u32,
    pub d_model: u32,
    pub n_layers: u32,
    pub n_heads: u32,
    pub ffn_mult: u32,
    pub max_seq_len: u32,
    /// Attach a former; when false only baseline decoding is available.
    pub with_vif: bool,
    pub vif_heads: u32,
    pub vif_self_attn: bool,
    pub use_f64: bool,
}

#[no_mangle]
pub extern "C" fn vif_model_options_default() -> VifModelOptions {
    let m = ModelConfig::default();
    VifModelOptions {
        seed: 0,
        grid_side: m.max_grid_side as u32,
        n_symbols: m.n_symbols as u32,
        d_vision: m.d_vision as u32,
        d_model: m.d_model as u32,
        n_layers: m.n_layers as u32,
        n_heads: m.n_heads as u32,
        ffn_mult: m.ffn_mult as u32,
        max_seq_len: m.max_seq_len as u32,
        with_vif: true,
        vif_heads: 4,
        vif_self_attn: true,
        use_f64: false,
    }
}

fn build_model(o: &VifModelOptions) -> Result<VifModel, Failure> {
    let precision = if o.use_f64 { Precision::F64 } else { Precision::F32 };
    let cfg = ModelConfig {
        n_symbols: o.n_symbols as usize,
        vocab_size: vocab_size_for(o.n_symbols as usize),
        max_grid_side: o.grid_side as usize,
        d_vision: o.d_vision as usize,
        d_model: o.d_model as usize,
        n_layers: o.n_layers as usize,
        n_heads: o.n_heads as usize,
        ffn_mult: o.ffn_mult as usize,
        max_seq_len: o.max_seq_len as usize,
        precision,
    };
    cfg.validate()?;
    let root = Rng::new(o.seed);
    let model = ModelParams::init(&cfg, &mut root.fork("init.model"))?;
    let vif = if o.with_vif {
        if o.vif_heads == 0 || !cfg.d_model.is_multiple_of(o.vif_heads as usize) {
            return Err(Failure(VifStatus::Config, format!("vif_heads {} must divide d_model", o.vif_heads)));
        }
        Some(VifParams::init(cfg.d_model, o.vif_heads as usize, o.vif_self_attn, precision, &mut root.fork("init.vif"))?)
    } else {
        None
    };
    Ok(VifModel { model, vif })
}

/// Creates a randomly initialized model. `options` may be null for the
/// defaults.
///
/// # Safety
/// `options` must be null or point to a valid `VifModelOptions`; `out` must
/// be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vif_model_new(options: *const VifModelOptions, out: *mut *mut VifModel) -> VifStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let o = if options.is_null() { vif_model_options_default() } else { *options };
        let m = build_model(&o)?;
        *out = Box::into_raw(Box::new(m));
        Ok(())
    })
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| Failure(VifStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

/// Loads a checkpoint written by the CLI or `vif_model_save`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vif_model_load(path: *const c_char, out: *mut *mut VifModel) -> VifStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ck = Checkpoint::load(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VifModel { model: ck.model, vif: ck.vif }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vif_model_save(model: *const VifModel, path: *const c_char) -> VifStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let ck = Checkpoint { model: m.model.clone(), vif: m.vif.clone() };
        ck.save(&path_arg(path)?)?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vif_model_free(model: *mut VifModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vif_model_vocab_size(model: *const VifModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.vocab_size)
}

/// Total parameter count including the former, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn vif_model_num_params(model: *const VifModel) -> usize {
    model
        .as_ref()
        .map_or(0, |m| m.model.num_params() + m.vif.as_ref().map_or(0, VifParams::num_params))
}

/// Greedy decoding on a `side x side` grid with the recall prompt. Writes
/// up to `out_cap` token ids and the generated length to `out_len`; returns
/// `BufferTooSmall` (with `out_len` set) when the buffer is short.
///
/// # Safety
/// `model` must be a live handle, `cells` must point to `n_cells` values,
/// `out_tokens` to `out_cap` writable slots and `out_len` to one.
#[no_mangle]
pub unsafe extern "C" fn vif_generate(
    model: *const VifModel,
    cells: *const u32,
    n_cells: usize,
    side: u32,
    mode: u32,
    max_new_tokens: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> VifStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if cells.is_null() {
            return Err(null("cells"));
        }
        if out_len.is_null() || (out_tokens.is_null() && out_cap > 0) {
            return Err(null("output buffer"));
        }
        let mode = match mode {
            VIF_MODE_BASELINE => Mode::Baseline,
            VIF_MODE_VIF => Mode::Vif,
            VIF_MODE_PASSTHROUGH => Mode::Passthrough,
            other => return Err(Failure(VifStatus::InvalidArgument, format!("unknown mode {other}"))),
        };
        let cells: Vec<usize> = std::slice::from_raw_parts(cells, n_cells).iter().map(|&c| c as usize).collect();
        if cells.len() != (side as usize) * (side as usize) {
            return Err(Failure(VifStatus::Shape, format!("{} cells for side {side}", cells.len())));
        }
        let image = GridImage::new(side as usize, cells, m.model.config.n_symbols)?;
        let sample = TaskSample::new(image);
        let cfg = GenerationConfig::new(mode, max_new_tokens);
        let trace = generate(&sample.image, &sample.prompt, &m.model, m.vif.as_ref(), &cfg)?;
        let tokens = trace.tokens();
        *out_len = tokens.len();
        if tokens.len() > out_cap {
            return Err(Failure(
                VifStatus::BufferTooSmall,
                format!("{} tokens do not fit in {out_cap}", tokens.len()),
            ));
        }
        for (i, &t) in tokens.iter().enumerate() {
            *out_tokens.add(i) = t as u32;
        }
        Ok(())
    })
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct VifMiReport {
    /// `I(o; z | t)` in bits.
    pub i_oz_t: f64,
    /// `I(o; a | z, t)` in bits.
    pub i_oa_zt: f64,
    /// `I(o; z, a | t)` in bits.
    pub i_oza_t: f64,
    pub residual: f64,
    pub margin: f64,
    pub passed: bool,
}

/// Conditional-MI check on a joint table over `(o, z, a, t)` stored
/// row-major with `t` fastest; `dims` holds the four support sizes.
///
/// # Safety
/// `dims` must point to 4 values, `p` to their product, `out` to one report.
#[no_mangle]
pub unsafe extern "C" fn vif_mi_check(p: *const f64, dims: *const usize, out: *mut VifMiReport) -> VifStatus {
    guard(|| {
        if p.is_null() || dims.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        let d = std::slice::from_raw_parts(dims, 4);
        let dims = [d[0], d[1], d[2], d[3]];
        if dims.iter().any(|&x| x == 0 || x > vif_core::analysis::mi::MAX_SUPPORT) {
            return Err(Failure(VifStatus::InvalidArgument, format!("supports {dims:?} outside 1..=6")));
        }
        let n: usize = dims.iter().product();
        let joint = Joint::new(dims, std::slice::from_raw_parts(p, n).to_vec())?;
        let r = mi_check(&joint, "ffi");
        *out = VifMiReport {
            i_oz_t: r.i_oz_t,
            i_oa_zt: r.i_oa_zt,
            i_oza_t: r.i_oza_t,
            residual: r.residual,
            margin: r.margin,
            passed: r.passed(),
        };
        Ok(())
    })
}

/// Savitzky–Golay smoothing of `n` values into `out` (also `n` long).
///
/// # Safety
/// `values` and `out` must each point to `n` doubles; they may alias.
#[no_mangle]
pub unsafe extern "C" fn vif_savgol(
    values: *const f64,
    n: usize,
    window: usize,
    polyorder: usize,
    out: *mut f64,
) -> VifStatus {
    guard(|| {
        if values.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let smoothed = savgol(std::slice::from_raw_parts(values, n), window, polyorder)?;
        ptr::copy_nonoverlapping(smoothed.as_ptr(), out, n);
        Ok(())
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vif_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
