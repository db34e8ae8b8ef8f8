//! C ABI over `acs-core`.
//!
//! Every fallible function returns an [`AcsStatus`] and writes results through
//! out-pointers. On failure the message is kept per thread and can be read
//! with [`acs_last_error_message`]. Objects cross the boundary as opaque
//! handles that must be released with their matching `_free` function.
//!
//! Arrays are passed as pointer plus length. Functions that fill a
//! caller-owned array also take its capacity and report the length they
//! need; with too small a capacity they return `ACS_STATUS_BUFFER_TOO_SMALL`
//! and write nothing but that length.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use acs_core::data::{generate_synthetic, load_native, noisy_recall, Dataset, SyntheticSpec};
use acs_core::experiment::{run_qat, RunConfig, RunResult};
use acs_core::network::{load_checkpoint, predict, Mode, Model};
use acs_core::numerics::{ProbVector, Tensor2};
use acs_core::quant::{self, QuantConfig};
use acs_core::scoring::{self, AnnealingStrategy, ScoreRecord};
use acs_core::selection::{self, Coreset};
use acs_core::{Error, ErrorKind};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    Dimension = 10,
    Config = 11,
    State = 12,
    Input = 13,
    Format = 14,
    Domain = 15,
    Run = 16,
    Io = 17,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AcsStrategy {
    Cosine = 0,
    Fixed = 1,
    Linear = 2,
    Sqrt = 3,
    Quadratic = 4,
    EvsOnly = 5,
    DsOnly = 6,
}

fn strategy_from(code: u32) -> FfiResult<AnnealingStrategy> {
    Ok(match code {
        c if c == AcsStrategy::Cosine as u32 => AnnealingStrategy::Cosine,
        c if c == AcsStrategy::Fixed as u32 => AnnealingStrategy::Fixed,
        c if c == AcsStrategy::Linear as u32 => AnnealingStrategy::Linear,
        c if c == AcsStrategy::Sqrt as u32 => AnnealingStrategy::Sqrt,
        c if c == AcsStrategy::Quadratic as u32 => AnnealingStrategy::Quadratic,
        c if c == AcsStrategy::EvsOnly as u32 => AnnealingStrategy::EvsOnly,
        c if c == AcsStrategy::DsOnly as u32 => AnnealingStrategy::DsOnly,
        c => return Err(Error::Config(format!("unknown strategy code {c}")).into()),
    })
}

/// Opaque dataset handle.
pub struct AcsDataset(Dataset);
/// Opaque run configuration handle.
pub struct AcsConfig(RunConfig);
/// Opaque finished-run handle.
pub struct AcsRun(RunResult);
/// Opaque model handle.
pub struct AcsModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(kind: ErrorKind) -> AcsStatus {
    match kind {
        ErrorKind::Dimension => AcsStatus::Dimension,
        ErrorKind::Config => AcsStatus::Config,
        ErrorKind::State => AcsStatus::State,
        ErrorKind::Input => AcsStatus::Input,
        ErrorKind::Format => AcsStatus::Format,
        ErrorKind::Domain => AcsStatus::Domain,
        ErrorKind::Run => AcsStatus::Run,
        ErrorKind::Io => AcsStatus::Io,
    }
}

/// Failure raised at the boundary itself.
enum Fail {
    Core(Error),
    Null(&'static str),
    Utf8(&'static str),
    TooSmall { needed: usize },
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

type FfiResult<T> = std::result::Result<T, Fail>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> AcsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AcsStatus::Ok,
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(e.kind())
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            AcsStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            AcsStatus::InvalidUtf8
        }
        Ok(Err(Fail::TooSmall { needed })) => {
            set_error(format!("buffer too small, {needed} elements needed"));
            AcsStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            AcsStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &'static str) -> FfiResult<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn out<'a, T>(ptr: *mut T, what: &'static str) -> FfiResult<&'a mut T> {
    ptr.as_mut().ok_or(Fail::Null(what))
}

unsafe fn handle<'a, T>(ptr: *const T, what: &'static str) -> FfiResult<&'a T> {
    ptr.as_ref().ok_or(Fail::Null(what))
}

unsafe fn string(ptr: *const c_char, what: &'static str) -> FfiResult<String> {
    if ptr.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(str::to_owned)
        .map_err(|_| Fail::Utf8(what))
}

/// Copies `src` into a caller buffer of capacity `cap`, reporting the needed
/// length through `len_out`.
unsafe fn fill<T: Copy>(src: &[T], dst: *mut T, cap: usize, len_out: *mut usize) -> FfiResult<()> {
    *out(len_out, "len_out")? = src.len();
    if src.len() > cap {
        return Err(Fail::TooSmall { needed: src.len() });
    }
    if !src.is_empty() {
        if dst.is_null() {
            return Err(Fail::Null("output buffer"));
        }
        std::ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    }
    Ok(())
}

fn into_handle<T>(value: T) -> *mut T {
    Box::into_raw(Box::new(value))
}

unsafe fn free<T>(ptr: *mut T) {
    if !ptr.is_null() {
        drop(Box::from_raw(ptr));
    }
}

/// Message of the last failure on this thread, or null if there was none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn acs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

fn quant_config(bits: u32, signed: bool, scale: f64) -> FfiResult<QuantConfig> {
    Ok(QuantConfig::new(bits, signed)?.with_scale(scale)?)
}

/// Fake-quantizes `v` with step `scale`.
///
/// # Safety
/// `out_value` must be a valid pointer to an `f64`.
#[no_mangle]
pub unsafe extern "C" fn acs_quantize(
    v: f64,
    bits: u32,
    signed: bool,
    scale: f64,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        let cfg = quant_config(bits, signed, scale)?;
        *out(out_value, "out_value")? = quant::quantize(v, &cfg)?;
        Ok(())
    })
}

/// Straight-through gradient of `upstream` at real value `v`.
///
/// # Safety
/// `out_value` must be a valid pointer to an `f64`.
#[no_mangle]
pub unsafe extern "C" fn acs_ste_gradient(
    v: f64,
    upstream: f64,
    bits: u32,
    signed: bool,
    scale: f64,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        let cfg = quant_config(bits, signed, scale)?;
        *out(out_value, "out_value")? = quant::ste_gradient(v, upstream, &cfg)?;
        Ok(())
    })
}

/// Max-abs scale for `values` at the given bit width.
///
/// # Safety
/// `values` must point to `len` doubles; `out_scale` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_calibrate_scale(
    values: *const f64,
    len: usize,
    bits: u32,
    signed: bool,
    out_scale: *mut f64,
) -> AcsStatus {
    guard(|| {
        let v = slice(values, len, "values")?;
        let cfg = quant::calibrate_scale(v, QuantConfig::new(bits, signed)?)?;
        *out(out_scale, "out_scale")? = cfg.scale().unwrap_or(quant::MIN_SCALE);
        Ok(())
    })
}

unsafe fn prob(ptr: *const f64, len: usize, what: &'static str) -> FfiResult<ProbVector> {
    Ok(ProbVector::new(slice(ptr, len, what)?.to_vec())?)
}

/// Error-vector score between a prediction and a label distribution.
///
/// # Safety
/// `p` and `y` must each point to `len` doubles; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_evs(
    p: *const f64,
    y: *const f64,
    len: usize,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        *out(out_value, "out_value")? = scoring::evs(&prob(p, len, "p")?, &prob(y, len, "y")?)?;
        Ok(())
    })
}

/// Disagreement score between a student and a teacher distribution.
///
/// # Safety
/// `p` and `p_teacher` must each point to `len` doubles; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_ds(
    p: *const f64,
    p_teacher: *const f64,
    len: usize,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        *out(out_value, "out_value")? =
            scoring::ds(&prob(p, len, "p")?, &prob(p_teacher, len, "p_teacher")?)?;
        Ok(())
    })
}

/// Annealing coefficient at epoch `t` of `total`; `strategy` is an
/// `AcsStrategy` value.
///
/// # Safety
/// `out_value` must be a valid pointer to an `f64`.
#[no_mangle]
pub unsafe extern "C" fn acs_beta(
    t: usize,
    total: usize,
    strategy: u32,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        *out(out_value, "out_value")? = scoring::beta(t, total, strategy_from(strategy)?)?;
        Ok(())
    })
}

/// `β·evs + (1−β)·ds`, clamped between the two scores.
#[no_mangle]
pub extern "C" fn acs_score(d_evs: f64, d_ds: f64, beta: f64) -> f64 {
    scoring::acs_score(d_evs, d_ds, beta)
}

/// Number of samples kept at `fraction` of `n`.
#[no_mangle]
pub extern "C" fn acs_coreset_size(fraction: f64, n: usize) -> usize {
    selection::coreset_size(fraction, n)
}

/// Ids of the top `fraction` of `scores` (index = sample id), ties to the
/// lower id, written in ascending order.
///
/// # Safety
/// `scores` must point to `n` doubles; `out_ids` to `cap` slots; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_select_topk(
    scores: *const f64,
    n: usize,
    fraction: f64,
    out_ids: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> AcsStatus {
    guard(|| {
        let records: Vec<ScoreRecord> = slice(scores, n, "scores")?
            .iter()
            .enumerate()
            .map(|(id, &s)| ScoreRecord {
                sample_id: id,
                epoch: 0,
                d_evs: s,
                d_ds: None,
                d_acs: s,
            })
            .collect();
        let c = selection::select_topk(&records, fraction, n)?;
        fill(c.ids(), out_ids, cap, out_len)
    })
}

fn coreset(ids: &[usize]) -> FfiResult<Coreset> {
    Ok(Coreset::new(0, ids.to_vec(), 0.0, "ffi", 0)?)
}

/// Percentage of `a`'s ids also in `b`; both must have equal size.
///
/// # Safety
/// `a` and `b` must point to `a_len` and `b_len` ids; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_coreset_overlap(
    a: *const usize,
    a_len: usize,
    b: *const usize,
    b_len: usize,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        let ca = coreset(slice(a, a_len, "a")?)?;
        let cb = coreset(slice(b, b_len, "b")?)?;
        *out(out_value, "out_value")? = selection::coreset_overlap(&ca, &cb)?;
        Ok(())
    })
}

/// Fraction of `noisy` ids that appear in `pruned`.
///
/// # Safety
/// `pruned` and `noisy` must point to their lengths in ids; `out_value` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_noisy_recall(
    pruned: *const usize,
    pruned_len: usize,
    noisy: *const usize,
    noisy_len: usize,
    out_value: *mut f64,
) -> AcsStatus {
    guard(|| {
        let p: BTreeSet<usize> = slice(pruned, pruned_len, "pruned")?
            .iter()
            .copied()
            .collect();
        let q: BTreeSet<usize> = slice(noisy, noisy_len, "noisy")?.iter().copied().collect();
        *out(out_value, "out_value")? = noisy_recall(&p, &q)?;
        Ok(())
    })
}

/// Gaussian-blob dataset.
///
/// # Safety
/// `out_dataset` must be a valid pointer; release the result with `acs_dataset_free`.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_synthetic(
    classes: usize,
    dims: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
    out_dataset: *mut *mut AcsDataset,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let d = generate_synthetic(&SyntheticSpec {
            classes,
            dims,
            per_class,
            spread,
            seed,
        })?;
        *slot = into_handle(AcsDataset(d));
        Ok(())
    })
}

/// Loads a dataset in the native binary format.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_dataset` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_load(
    path: *const c_char,
    out_dataset: *mut *mut AcsDataset,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_dataset, "out_dataset")?;
        let d = load_native(&PathBuf::from(string(path, "path")?))?;
        *slot = into_handle(AcsDataset(d));
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_len(dataset: *const AcsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.len())
}

/// Feature dimension, or 0 for a null handle.
///
/// # Safety
/// `dataset` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_dims(dataset: *const AcsDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.dims())
}

/// Copies the labels into `out_labels`.
///
/// # Safety
/// `dataset` must be a live handle; `out_labels` must hold `cap` slots; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_labels(
    dataset: *const AcsDataset,
    out_labels: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> AcsStatus {
    guard(|| {
        fill(
            handle(dataset, "dataset")?.0.labels(),
            out_labels,
            cap,
            out_len,
        )
    })
}

/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn acs_dataset_free(dataset: *mut AcsDataset) {
    free(dataset)
}

/// Parses a TOML run configuration.
///
/// # Safety
/// `text` must be a nul-terminated string; `out_config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_config_parse(
    text: *const c_char,
    out_config: *mut *mut AcsConfig,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let c = RunConfig::from_toml(&string(text, "text")?)?;
        c.validate()?;
        *slot = into_handle(AcsConfig(c));
        Ok(())
    })
}

/// Reads and parses a TOML run configuration file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_config` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_config_load(
    path: *const c_char,
    out_config: *mut *mut AcsConfig,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_config, "out_config")?;
        let c = RunConfig::load(&PathBuf::from(string(path, "path")?))?;
        c.validate()?;
        *slot = into_handle(AcsConfig(c));
        Ok(())
    })
}

/// Overrides the coreset fraction.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_config_set_fraction(
    config: *mut AcsConfig,
    fraction: f64,
) -> AcsStatus {
    guard(|| {
        let c = out(config, "config")?;
        let mut next = c.0.clone();
        next.qat.fraction = fraction;
        next.validate()?;
        c.0 = next;
        Ok(())
    })
}

/// Overrides the master seed.
///
/// # Safety
/// `config` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_config_set_seed(config: *mut AcsConfig, seed: u64) -> AcsStatus {
    guard(|| {
        out(config, "config")?.0.seed = seed;
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn acs_config_free(config: *mut AcsConfig) {
    free(config)
}

/// Runs quantization-aware training. Nothing is written to disk.
///
/// # Safety
/// `config` must be a live handle; `out_run` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_run_qat(
    config: *const AcsConfig,
    out_run: *mut *mut AcsRun,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_run, "out_run")?;
        let mut c = handle(config, "config")?.0.clone();
        c.out_dir = None;
        *slot = into_handle(AcsRun(run_qat(&c)?));
        Ok(())
    })
}

/// Test accuracy after the last epoch, or NaN for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_run_final_test_acc(run: *const AcsRun) -> f64 {
    run.as_ref().map_or(f64::NAN, |r| r.0.final_test_acc())
}

/// Epochs run, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_run_epochs(run: *const AcsRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.epochs)
}

/// Number of selection rounds, or 0 for a null handle.
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn acs_run_rounds(run: *const AcsRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.coresets.len())
}

/// Coreset ids chosen at selection round `round`.
///
/// # Safety
/// `run` must be a live handle; `out_ids` must hold `cap` slots; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_run_coreset(
    run: *const AcsRun,
    round: usize,
    out_ids: *mut usize,
    cap: usize,
    out_len: *mut usize,
) -> AcsStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let c =
            r.0.coresets
                .get(round)
                .ok_or_else(|| Error::Input(format!("no selection round {round}")))?;
        fill(c.ids(), out_ids, cap, out_len)
    })
}

/// Metrics CSV as UTF-8 bytes. `out_len` receives the byte length, excluding
/// the trailing nul that is written when it fits.
///
/// # Safety
/// `run` must be a live handle; `buf` must hold `cap` bytes; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_run_metrics_csv(
    run: *const AcsRun,
    buf: *mut c_char,
    cap: usize,
    out_len: *mut usize,
) -> AcsStatus {
    guard(|| {
        let text = handle(run, "run")?.0.metrics.to_csv_string();
        let bytes = CString::new(text).expect("csv has no nul");
        let with_nul = bytes.as_bytes_with_nul();
        *out(out_len, "out_len")? = with_nul.len() - 1;
        if with_nul.len() > cap {
            return Err(Fail::TooSmall {
                needed: with_nul.len(),
            });
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        std::ptr::copy_nonoverlapping(with_nul.as_ptr().cast(), buf, with_nul.len());
        Ok(())
    })
}

/// Takes the trained student out of a run. The run stays valid.
///
/// # Safety
/// `run` must be a live handle; `out_model` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_run_model(
    run: *const AcsRun,
    out_model: *mut *mut AcsModel,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        *slot = into_handle(AcsModel(handle(run, "run")?.0.model.clone()));
        Ok(())
    })
}

/// # Safety
/// `run` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn acs_run_free(run: *mut AcsRun) {
    free(run)
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string; `out_model` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_model_load(
    path: *const c_char,
    out_model: *mut *mut AcsModel,
) -> AcsStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let (m, _role) = load_checkpoint(PathBuf::from(string(path, "path")?))?;
        *slot = into_handle(AcsModel(m));
        Ok(())
    })
}

/// Class probabilities for one input. `quantized` selects fake-quantized
/// weights (and activations) instead of the real-valued ones.
///
/// # Safety
/// `model` must be a live handle; `x` must point to `dims` doubles; `out_probs`
/// must hold `cap` slots; `out_len` must be valid.
#[no_mangle]
pub unsafe extern "C" fn acs_model_predict(
    model: *const AcsModel,
    x: *const f64,
    dims: usize,
    quantized: bool,
    out_probs: *mut f64,
    cap: usize,
    out_len: *mut usize,
) -> AcsStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let input = Tensor2::new(1, dims, slice(x, dims, "x")?.to_vec())?;
        let mode = if quantized { Mode::Quant } else { Mode::Fp };
        let probs = predict(m, &input, mode)?;
        fill(probs[0].as_slice(), out_probs, cap, out_len)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn acs_model_free(model: *mut AcsModel) {
    free(model)
}
