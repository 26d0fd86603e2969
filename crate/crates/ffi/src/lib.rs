//! C ABI for the incft engine.
//!
//! Objects cross the boundary as opaque handles (`IncftModel`, `IncftCorpus`)
//! created by `*_load` / `*_generate` / `*_train` calls and released with the
//! matching `*_free`. Every fallible call returns an [`IncftStatus`]; on
//! failure [`incft_last_error`] describes the problem. Strings returned by the
//! library are freed with [`incft_string_free`].
//!
//! Handles are not synchronized: a handle may be used from any thread, but not
//! from two threads at once.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use incft::checkpoint::Checkpoint;
use incft::cli::run_experiment;
use incft::config::RunConfig;
use incft::corpus_dir::{read_corpus, write_corpus};
use incft::data::{generate_corpus, SessionCorpus, CLASS_COUNT};
use incft::experiment::{fine_tune_phase, initial_phase, unit_images, SplitMode};
use incft::network::forward;
use incft::optim::accuracy;
use incft::tensor::{argmax, Tensor};
use incft::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IncftStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    InvalidArgument = 2,
    /// File system error.
    Io = 3,
    /// Checkpoint failed to parse or its CRC did not verify.
    Checkpoint = 4,
    /// Corpus is malformed or its digest did not verify.
    Corpus = 5,
    /// Configuration could not be parsed or is invalid.
    Config = 6,
    /// Tensor or buffer sizes do not match.
    Shape = 7,
    /// Requested units do not exist or overlap.
    Plan = 8,
    /// The library panicked; the handle involved should be discarded.
    Panic = 9,
    Internal = 10,
}

/// A network with its parameters, as stored in a checkpoint.
pub struct IncftModel {
    checkpoint: Checkpoint,
}

/// A loaded or generated session corpus.
pub struct IncftCorpus {
    corpus: SessionCorpus,
    config: Option<RunConfig>,
}

/// Split mode selector for unit-based calls.
pub const INCFT_MODE_INTRA: u32 = 0;
pub const INCFT_MODE_INTER: u32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(err: &Error) -> IncftStatus {
    match err {
        Error::Shape(_) => IncftStatus::Shape,
        Error::InvalidArgument(_) => IncftStatus::InvalidArgument,
        Error::Pgm(_) | Error::Corpus(_) => IncftStatus::Corpus,
        Error::Checkpoint(_) => IncftStatus::Checkpoint,
        Error::Config(_) => IncftStatus::Config,
        Error::Plan(_) | Error::Leakage(_) => IncftStatus::Plan,
        Error::File { .. } | Error::Io(_) => IncftStatus::Io,
        Error::Json(_) => IncftStatus::Internal,
    }
}

/// Failure inside a call: either a library error or a bad argument detected here.
enum Fail {
    Lib(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> IncftStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            IncftStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_last_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(name))) => {
            set_last_error(format!("{name} must not be null"));
            IncftStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_last_error(msg);
            IncftStatus::InvalidArgument
        }
        Err(_) => {
            set_last_error("internal panic");
            IncftStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{name} is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(name))
}

unsafe fn mut_arg<'a, T>(p: *mut T, name: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(name))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, name: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Fail> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_toml_str(str_arg(p, "config_toml")?)?)
}

fn mode_arg(mode: u32) -> Result<SplitMode, Fail> {
    match mode {
        INCFT_MODE_INTRA => Ok(SplitMode::IntraSession),
        INCFT_MODE_INTER => Ok(SplitMode::InterSession),
        m => Err(Fail::Arg(format!("unknown mode {m}"))),
    }
}

/// Message describing the last failure on the calling thread, or an empty
/// string. Valid until the next library call on this thread.
#[no_mangle]
pub extern "C" fn incft_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn incft_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frees a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn incft_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn incft_model_load(path: *const c_char, out: *mut *mut IncftModel) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let checkpoint = Checkpoint::load(PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(IncftModel { checkpoint }));
        Ok(())
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn incft_model_save(model: *const IncftModel, path: *const c_char) -> IncftStatus {
    guard(|| {
        let model = ref_arg(model, "model")?;
        model.checkpoint.save(PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn incft_model_free(model: *mut IncftModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input shape `channels × height × width` and class count of a model.
///
/// # Safety
/// `model` must be a live handle; output pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn incft_model_shape(
    model: *const IncftModel,
    out_channels: *mut u32,
    out_height: *mut u32,
    out_width: *mut u32,
    out_classes: *mut u32,
) -> IncftStatus {
    guard(|| {
        let spec = &ref_arg(model, "model")?.checkpoint.spec;
        let [c, h, w] = spec.input_shape();
        *mut_arg(out_channels, "out_channels")? = c as u32;
        *mut_arg(out_height, "out_height")? = h as u32;
        *mut_arg(out_width, "out_width")? = w as u32;
        *mut_arg(out_classes, "out_classes")? = spec.class_count() as u32;
        Ok(())
    })
}

/// Number of fine-tune phases applied to the model (0 after initial training).
///
/// # Safety
/// `model` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_model_phase(model: *const IncftModel, out: *mut u32) -> IncftStatus {
    guard(|| {
        *mut_arg(out, "out")? = ref_arg(model, "model")?.checkpoint.phase as u32;
        Ok(())
    })
}

/// Runs `count` images (`count × C × H × W` floats in `[0, 1]`, row-major)
/// through the model. Writes `count × classes` logits to `out_logits` when it
/// is non-null and the argmax class of each image to `out_classes` when that is
/// non-null.
///
/// # Safety
/// Buffers must hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn incft_model_predict(
    model: *const IncftModel,
    pixels: *const f32,
    pixels_len: usize,
    count: usize,
    out_logits: *mut f32,
    logits_len: usize,
    out_classes: *mut u32,
) -> IncftStatus {
    guard(|| {
        let ck = &ref_arg(model, "model")?.checkpoint;
        let [c, h, w] = ck.spec.input_shape();
        let k = ck.spec.class_count();
        if count == 0 {
            return Err(Fail::Arg("count must be at least 1".into()));
        }
        if pixels_len != count * c * h * w {
            return Err(Error::Shape(format!("expected {} pixels, got {pixels_len}", count * c * h * w)).into());
        }
        let data = slice_arg(pixels, pixels_len, "pixels")?.to_vec();
        let batch = Tensor::new(vec![count, c, h, w], data)?;
        let (logits, _) = forward(&ck.spec, &ck.params, &batch, false)?;
        if !out_logits.is_null() {
            if logits_len < count * k {
                return Err(Error::Shape(format!("logit buffer holds {logits_len}, need {}", count * k)).into());
            }
            std::slice::from_raw_parts_mut(out_logits, count * k).copy_from_slice(logits.data());
        }
        if !out_classes.is_null() {
            let classes = std::slice::from_raw_parts_mut(out_classes, count);
            for (dst, row) in classes.iter_mut().zip(logits.data().chunks(k)) {
                *dst = argmax(row) as u32;
            }
        }
        Ok(())
    })
}

/// Fraction of correctly classified images among the given units of `corpus`
/// (sessions in inter mode, rounds of `session` in intra mode).
///
/// # Safety
/// Handles must be live; `units` must hold `units_len` values.
#[no_mangle]
pub unsafe extern "C" fn incft_model_evaluate(
    model: *const IncftModel,
    corpus: *const IncftCorpus,
    mode: u32,
    session: u32,
    units: *const u32,
    units_len: usize,
    out_accuracy: *mut f64,
) -> IncftStatus {
    guard(|| {
        let ck = &ref_arg(model, "model")?.checkpoint;
        let corpus = &ref_arg(corpus, "corpus")?.corpus;
        let images = unit_images(corpus, mode_arg(mode)?, session, slice_arg(units, units_len, "units")?)?;
        let out = mut_arg(out_accuracy, "out_accuracy")?;
        *out = accuracy(&ck.spec, &ck.params, &images)?;
        Ok(())
    })
}

/// Trains a fresh default network on the given units, using the
/// `[experiment]` settings of `config_toml` (null for defaults).
///
/// # Safety
/// `corpus` must be live; `units` must hold `units_len` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_model_train(
    corpus: *const IncftCorpus,
    config_toml: *const c_char,
    mode: u32,
    session: u32,
    units: *const u32,
    units_len: usize,
    seed: u64,
    out: *mut *mut IncftModel,
) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let corpus = &ref_arg(corpus, "corpus")?.corpus;
        let config = config_arg(config_toml)?;
        let images = unit_images(corpus, mode_arg(mode)?, session, slice_arg(units, units_len, "units")?)?;
        let (h, w) = corpus.resolution();
        let (spec, params, _) = initial_phase(&config.experiment, [1, h, w], CLASS_COUNT, seed, &images)?;
        *out = Box::into_raw(Box::new(IncftModel {
            checkpoint: Checkpoint::new(spec, params, 0),
        }));
        Ok(())
    })
}

/// Runs the next fine-tune phase on `model` in place. With the same seed this
/// reproduces the corresponding phase of an experiment run.
///
/// # Safety
/// Handles must be live and `model` not shared; `units` must hold `units_len` values.
#[no_mangle]
pub unsafe extern "C" fn incft_model_finetune(
    model: *mut IncftModel,
    corpus: *const IncftCorpus,
    config_toml: *const c_char,
    mode: u32,
    session: u32,
    units: *const u32,
    units_len: usize,
    seed: u64,
) -> IncftStatus {
    guard(|| {
        let model = mut_arg(model, "model")?;
        let corpus = &ref_arg(corpus, "corpus")?.corpus;
        let config = config_arg(config_toml)?;
        let images = unit_images(corpus, mode_arg(mode)?, session, slice_arg(units, units_len, "units")?)?;
        let phase = model.checkpoint.phase.checked_add(1).ok_or_else(|| Fail::Arg("phase counter exhausted".into()))?;
        let ck = &mut model.checkpoint;
        fine_tune_phase(&config.experiment, &ck.spec, &mut ck.params, seed, phase as usize, &images)?;
        ck.phase = phase;
        Ok(())
    })
}

/// Generates a synthetic corpus from the `[corpus]` settings of `config_toml`
/// (null for defaults).
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_generate(config_toml: *const c_char, out: *mut *mut IncftCorpus) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let config = config_arg(config_toml)?;
        let corpus = generate_corpus(&config.corpus)?;
        *out = Box::into_raw(Box::new(IncftCorpus {
            corpus,
            config: Some(config),
        }));
        Ok(())
    })
}

/// Loads a corpus directory and verifies its manifest digest.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_load(dir: *const c_char, out: *mut *mut IncftCorpus) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let (corpus, _) = read_corpus(PathBuf::from(str_arg(dir, "dir")?))?;
        *out = Box::into_raw(Box::new(IncftCorpus { corpus, config: None }));
        Ok(())
    })
}

/// Writes the corpus as PGM files plus a manifest.
///
/// # Safety
/// `corpus` must be live; `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_save(corpus: *const IncftCorpus, dir: *const c_char) -> IncftStatus {
    guard(|| {
        let c = ref_arg(corpus, "corpus")?;
        write_corpus(&c.corpus, c.config.as_ref().map(|r| &r.corpus), PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Releases a corpus. Null is ignored.
///
/// # Safety
/// `corpus` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_free(corpus: *mut IncftCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Session count, rounds per session and total image count.
///
/// # Safety
/// `corpus` must be live; output pointers writable.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_counts(
    corpus: *const IncftCorpus,
    out_sessions: *mut u32,
    out_rounds: *mut u32,
    out_images: *mut u64,
) -> IncftStatus {
    guard(|| {
        let c = &ref_arg(corpus, "corpus")?.corpus;
        *mut_arg(out_sessions, "out_sessions")? = c.sessions().len() as u32;
        *mut_arg(out_rounds, "out_rounds")? = c.rounds_per_session() as u32;
        *mut_arg(out_images, "out_images")? = c.total_images() as u64;
        Ok(())
    })
}

/// Content digest (64 hex characters) as a new string; free with
/// [`incft_string_free`].
///
/// # Safety
/// `corpus` must be live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_corpus_digest(corpus: *const IncftCorpus, out: *mut *mut c_char) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = ptr::null_mut();
        let digest = ref_arg(corpus, "corpus")?.corpus.digest();
        *out = CString::new(digest).expect("hex has no nul").into_raw();
        Ok(())
    })
}

/// Runs the cross-validated experiment described by `config_toml` (null for
/// defaults) on `corpus` and returns the results document as JSON; free it
/// with [`incft_string_free`].
///
/// # Safety
/// `corpus` must be live; `out_json` writable.
#[no_mangle]
pub unsafe extern "C" fn incft_experiment_run(
    corpus: *const IncftCorpus,
    config_toml: *const c_char,
    out_json: *mut *mut c_char,
) -> IncftStatus {
    guard(|| {
        let out = mut_arg(out_json, "out_json")?;
        *out = ptr::null_mut();
        let handle = ref_arg(corpus, "corpus")?;
        let mut config = config_arg(config_toml)?;
        // Echo the generator settings when the corpus was generated here.
        if let Some(generated) = &handle.config {
            config.corpus = generated.corpus.clone();
        }
        let results = run_experiment(&config, &handle.corpus, None, &mut std::io::sink())?;
        let json = serde_json::to_string(&results).map_err(Error::from)?;
        *out = CString::new(json).expect("JSON has no nul").into_raw();
        Ok(())
    })
}
