//! C ABI over `fdg-core`.
//!
//! Objects cross the boundary as opaque handles created by `fdg_*_new`,
//! `fdg_*_generate`, `fdg_*_load` or `fdg_federation_run` and released with
//! the matching `fdg_*_free`. Every fallible call returns an [`FdgStatus`];
//! on failure `fdg_last_error()` describes the error until the next failing
//! call on the same thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use fdg_core::data::{generate_corpus, SyntheticCorpus};
use fdg_core::federation::{evaluate, run_federation};
use fdg_core::harness::ExperimentConfig;
use fdg_core::model::ModelParams;
use fdg_core::style::compute_style_stats;
use fdg_core::{Error, Tensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FdgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Numeric = 4,
    Shape = 5,
    Io = 6,
    Format = 7,
    Other = 8,
    Panic = 9,
}

/// Synthetic multi-domain corpus.
pub struct FdgCorpus(SyntheticCorpus);

/// Model parameters (a trained global model or a loaded checkpoint).
pub struct FdgModel(ModelParams);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let message = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(message));
}

fn status_of(err: &Error) -> FdgStatus {
    match err {
        Error::Config(_) | Error::IndivisibleClients { .. } | Error::InvalidHookBlock(_) => FdgStatus::Config,
        Error::Numeric(_) => FdgStatus::Numeric,
        Error::Shape { .. } | Error::LabelOutOfRange { .. } => FdgStatus::Shape,
        Error::Io(_) => FdgStatus::Io,
        Error::Format(_) | Error::ManifestMismatch(_) | Error::Json(_) => FdgStatus::Format,
        _ => FdgStatus::Other,
    }
}

struct Failure(FdgStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Failure>) -> FdgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => FdgStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {message}"));
            FdgStatus::Panic
        }
    }
}

fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    // SAFETY: the caller guarantees a non-null pointer is valid for reads.
    unsafe { p.as_ref() }.ok_or_else(|| Failure(FdgStatus::NullPointer, format!("{what} is null")))
}

fn out_ptr<T>(p: *mut T, what: &str) -> Result<*mut T, Failure> {
    if p.is_null() {
        Err(Failure(FdgStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(p)
    }
}

fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(FdgStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure(FdgStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure(FdgStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, len) })
}

fn slice_out<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure(FdgStatus::NullPointer, format!("{what} is null")));
    }
    // SAFETY: the caller guarantees `len` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, len) })
}

fn config_arg(p: *const c_char) -> Result<ExperimentConfig, Failure> {
    let text = if p.is_null() { "" } else { str_arg(p, "config")? };
    Ok(ExperimentConfig::parse(text, &[])?)
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn fdg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Generate the corpus described by a flat TOML config (null or "" for defaults).
///
/// # Safety
/// `config` is null or a NUL-terminated string; `out` is a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fdg_corpus_generate(config: *const c_char, out: *mut *mut FdgCorpus) -> FdgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let config = config_arg(config)?;
        let corpus = generate_corpus(&config.corpus)?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FdgCorpus(corpus))) };
        Ok(())
    })
}

/// Number of samples, or 0 for a null handle.
///
/// # Safety
/// `corpus` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdg_corpus_len(corpus: *const FdgCorpus) -> usize {
    // SAFETY: caller contract.
    unsafe { corpus.as_ref() }.map_or(0, |c| c.0.len())
}

/// Number of domains, or 0 for a null handle.
///
/// # Safety
/// `corpus` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdg_corpus_num_domains(corpus: *const FdgCorpus) -> usize {
    // SAFETY: caller contract.
    unsafe { corpus.as_ref() }.map_or(0, |c| c.0.num_domains())
}

/// Copy sample `index` into `image` (`3·S·S` floats, CHW) and its label into `label`.
///
/// # Safety
/// `corpus` is a live handle; `image` holds `image_len` floats; `label` is valid.
#[no_mangle]
pub unsafe extern "C" fn fdg_corpus_sample(
    corpus: *const FdgCorpus,
    index: usize,
    image: *mut f32,
    image_len: usize,
    label: *mut usize,
) -> FdgStatus {
    guard(|| {
        let corpus = &non_null(corpus, "corpus")?.0;
        let label = out_ptr(label, "label")?;
        if index >= corpus.len() {
            return Err(Failure(FdgStatus::Config, format!("sample {index} out of range for {}", corpus.len())));
        }
        let (t, labels) = corpus.gather(&[index]);
        if image_len != t.data().len() {
            return Err(Failure(FdgStatus::Shape, format!("image buffer holds {image_len}, need {}", t.data().len())));
        }
        slice_out(image, image_len, "image")?.copy_from_slice(t.data());
        // SAFETY: checked non-null above.
        unsafe { *label = labels[0] };
        Ok(())
    })
}

/// # Safety
/// `corpus` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdg_corpus_free(corpus: *mut FdgCorpus) {
    if !corpus.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(corpus) });
    }
}

/// Run one federation (config mode, seed and target_domain) on `corpus`.
/// Writes the global model to `out_model` and the final target-domain accuracy
/// to `target_acc` (which may be null).
///
/// # Safety
/// `config` is null or NUL-terminated; `corpus` is live; `out_model` is valid.
#[no_mangle]
pub unsafe extern "C" fn fdg_federation_run(
    config: *const c_char,
    corpus: *const FdgCorpus,
    out_model: *mut *mut FdgModel,
    target_acc: *mut f64,
) -> FdgStatus {
    guard(|| {
        let out_model = out_ptr(out_model, "out_model")?;
        let corpus = &non_null(corpus, "corpus")?.0;
        let config = config_arg(config)?;
        let outcome = run_federation(&config.federation, corpus)?;
        if !target_acc.is_null() {
            // SAFETY: checked non-null.
            unsafe { *target_acc = outcome.final_eval.target_acc };
        }
        // SAFETY: checked non-null above.
        unsafe { *out_model = Box::into_raw(Box::new(FdgModel(outcome.params))) };
        Ok(())
    })
}

/// Eval-mode accuracy of `model` on every sample of `domain`.
///
/// # Safety
/// `model` and `corpus` are live handles; `accuracy` is valid.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_domain_accuracy(
    model: *const FdgModel,
    corpus: *const FdgCorpus,
    domain: usize,
    accuracy: *mut f64,
) -> FdgStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        let corpus = &non_null(corpus, "corpus")?.0;
        let accuracy = out_ptr(accuracy, "accuracy")?;
        if domain >= corpus.num_domains() {
            return Err(Failure(FdgStatus::Config, format!("domain {domain} out of range")));
        }
        let report = evaluate(model, corpus, domain)?;
        // SAFETY: checked non-null above.
        unsafe { *accuracy = report.target_acc };
        Ok(())
    })
}

/// Number of output classes, or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_num_classes(model: *const FdgModel) -> usize {
    // SAFETY: caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| m.0.arch().num_classes)
}

/// Floats per input image (`channels · size · size`), or 0 for a null handle.
///
/// # Safety
/// `model` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_image_len(model: *const FdgModel) -> usize {
    // SAFETY: caller contract.
    unsafe { model.as_ref() }.map_or(0, |m| {
        let a = m.0.arch();
        a.in_channels * a.image_size * a.image_size
    })
}

/// Eval-mode logits for `n` images. `images` holds `n · fdg_model_image_len`
/// floats (NCHW); `logits` receives `n · fdg_model_num_classes` floats.
///
/// # Safety
/// Buffers hold at least the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_predict(
    model: *const FdgModel,
    images: *const f32,
    n: usize,
    logits: *mut f32,
    logits_len: usize,
) -> FdgStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        let a = model.arch();
        let per = a.in_channels * a.image_size * a.image_size;
        if logits_len != n * a.num_classes {
            return Err(Failure(
                FdgStatus::Shape,
                format!("logits buffer holds {logits_len}, need {}", n * a.num_classes),
            ));
        }
        if n == 0 {
            return Ok(());
        }
        let data = slice_arg(images, n * per, "images")?.to_vec();
        let x = Tensor::new(vec![n, a.in_channels, a.image_size, a.image_size], data)?;
        let out = model.predict(&x)?;
        slice_out(logits, logits_len, "logits")?.copy_from_slice(out.data());
        Ok(())
    })
}

/// Write a checkpoint file.
///
/// # Safety
/// `model` is live; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_save(model: *const FdgModel, path: *const c_char) -> FdgStatus {
    guard(|| {
        let model = &non_null(model, "model")?.0;
        let path = str_arg(path, "path")?;
        let mut w = BufWriter::new(File::create(path).map_err(Error::from)?);
        model.save(&mut w)?;
        w.flush().map_err(Error::from)?;
        Ok(())
    })
}

/// Read a checkpoint file.
///
/// # Safety
/// `path` is NUL-terminated; `out` is valid.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_load(path: *const c_char, out: *mut *mut FdgModel) -> FdgStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = str_arg(path, "path")?;
        let file = File::open(path).map_err(Error::from)?;
        let model = ModelParams::load(BufReader::new(file))?;
        // SAFETY: checked non-null above.
        unsafe { *out = Box::into_raw(Box::new(FdgModel(model))) };
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fdg_model_free(model: *mut FdgModel) {
    if !model.is_null() {
        // SAFETY: produced by Box::into_raw in this crate.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Channel-wise mean and standard deviation of one `[C,H,W]` feature map.
/// `mu` and `sigma` each receive `channels` floats.
///
/// # Safety
/// `feature` holds `channels·height·width` floats; `mu`, `sigma` hold `channels`.
#[no_mangle]
pub unsafe extern "C" fn fdg_style_stats(
    feature: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    mu: *mut f32,
    sigma: *mut f32,
) -> FdgStatus {
    guard(|| {
        let data = slice_arg(feature, channels * height * width, "feature")?.to_vec();
        let stats = compute_style_stats(&Tensor::new(vec![channels, height, width], data)?)?;
        slice_out(mu, channels, "mu")?.copy_from_slice(&stats.mu);
        slice_out(sigma, channels, "sigma")?.copy_from_slice(&stats.sigma);
        Ok(())
    })
}
