//! C interface to annoforge.
//!
//! Every fallible function returns an `AfStatus`. On failure a message is
//! kept per thread and can be fetched with `af_last_error`. Strings handed
//! out by this library are freed with `af_string_free`; handles with their
//! matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use annoforge::config::RunConfig;
use annoforge::datasets::{load_dataset, Dataset, DatasetError};
use annoforge::domain::{LabelSpace, Outcome};
use annoforge::metrics::{fleiss_kappa, mcnemar_counts, McNemarMethod, RatingTable};
use annoforge::prompting::parse_label;
use annoforge::providers::BackendMode;
use annoforge::runner::{self, LoadedRun, RunError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    ConfigError = 4,
    DatasetError = 5,
    IoError = 6,
    ProviderError = 7,
    MetricsError = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfMcNemarMethod {
    Exact = 0,
    Chi2Cc = 1,
    Auto = 2,
}

impl From<AfMcNemarMethod> for McNemarMethod {
    fn from(m: AfMcNemarMethod) -> Self {
        match m {
            AfMcNemarMethod::Exact => McNemarMethod::Exact,
            AfMcNemarMethod::Chi2Cc => McNemarMethod::Chi2Cc,
            AfMcNemarMethod::Auto => McNemarMethod::Auto,
        }
    }
}

/// Counts reported by `af_annotate`.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AfAnnotateSummary {
    pub instances: usize,
    pub failed: usize,
    pub resumed: usize,
    pub backend_calls: usize,
}

/// A loaded dataset.
pub struct AfDataset(Dataset);

/// A finished run: manifest, dataset and transcripts.
pub struct AfRun(LoadedRun);

thread_local! {
    static LAST_ERROR: RefCell<Option<String>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg.into()));
}

struct Failure(AfStatus, String);

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        let status = match &e {
            RunError::Config(_) => AfStatus::ConfigError,
            RunError::Dataset(_) => AfStatus::DatasetError,
            RunError::Engine(_) | RunError::Provider(_) => AfStatus::ProviderError,
            RunError::Metrics(_) | RunError::IdMismatch(_) => AfStatus::MetricsError,
            RunError::Io { .. } | RunError::Corrupt { .. } => AfStatus::IoError,
        };
        Failure(status, e.to_string())
    }
}

impl From<DatasetError> for Failure {
    fn from(e: DatasetError) -> Self {
        Failure(AfStatus::DatasetError, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AfStatus {
    LAST_ERROR.with(|e| e.borrow_mut().take());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AfStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside annoforge");
            AfStatus::Panic
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(AfStatus::NullArgument, format!("{name} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AfStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or NULL. Free the result
/// with `af_string_free`.
#[no_mangle]
pub extern "C" fn af_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().clone().map_or(ptr::null_mut(), c_string))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn af_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Fleiss' kappa of a row-major `items` x `categories` count table.
///
/// # Safety
/// `counts` must point to `items * categories` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn af_fleiss_kappa(
    counts: *const u32,
    items: usize,
    categories: usize,
    out: *mut f64,
) -> AfStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        if items == 0 || categories == 0 {
            return Err(Failure(AfStatus::InvalidArgument, "empty table".into()));
        }
        let flat = std::slice::from_raw_parts(counts, items * categories);
        let rows = flat.chunks(categories).map(<[u32]>::to_vec).collect();
        let k = RatingTable::new(rows)
            .and_then(|t| fleiss_kappa(&t))
            .map_err(|e| Failure(AfStatus::MetricsError, e.to_string()))?;
        *out = k;
        Ok(())
    })
}

/// McNemar test on discordant counts. `statistic` receives NaN for the exact
/// method; it may be NULL.
///
/// # Safety
/// `p_value` must be valid; `statistic` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn af_mcnemar(
    b: u64,
    c: u64,
    method: AfMcNemarMethod,
    p_value: *mut f64,
    statistic: *mut f64,
) -> AfStatus {
    guard(|| {
        if p_value.is_null() {
            return Err(null("p_value"));
        }
        let r = mcnemar_counts(b, c, method.into());
        *p_value = r.p_value;
        if !statistic.is_null() {
            *statistic = r.statistic.unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Parses a model response against `labels`. `out_index` receives the
/// position of the matched label, or -1 when no valid label was found.
///
/// # Safety
/// `labels` must point to `n_labels` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn af_parse_label(
    text: *const c_char,
    labels: *const *const c_char,
    n_labels: usize,
    out_index: *mut i64,
) -> AfStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        if out_index.is_null() {
            return Err(null("out_index"));
        }
        let names = std::slice::from_raw_parts(labels, n_labels)
            .iter()
            .map(|&p| str_arg(p, "label"))
            .collect::<Result<Vec<_>, _>>()?;
        let space = LabelSpace::new(names)
            .map_err(|e| Failure(AfStatus::InvalidArgument, e.to_string()))?;
        *out_index = match parse_label(text, &space) {
            Outcome::Label(l) => space.index_of(&l).map_or(-1, |i| i as i64),
            Outcome::Invalid => -1,
        };
        Ok(())
    })
}

/// # Safety
/// Paths must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn af_dataset_load(
    data: *const c_char,
    guideline: *const c_char,
    out: *mut *mut AfDataset,
) -> AfStatus {
    guard(|| {
        let data = str_arg(data, "data")?;
        let guideline = str_arg(guideline, "guideline")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let ds = load_dataset(Path::new(data), Path::new(guideline))?;
        *out = Box::into_raw(Box::new(AfDataset(ds)));
        Ok(())
    })
}

/// Number of instances, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_dataset_len(ds: *const AfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.instances.len())
}

/// Size of the label space, or 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_dataset_label_count(ds: *const AfDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.task.label_space.len())
}

/// # Safety
/// `ds` must be NULL or a handle from `af_dataset_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn af_dataset_free(ds: *mut AfDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Runs `annotate` from a TOML config file. Failed instances are reported in
/// `summary`, not as an error status.
///
/// # Safety
/// `config_path` must be NUL-terminated; `summary` must be NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn af_annotate(
    config_path: *const c_char,
    summary: *mut AfAnnotateSummary,
) -> AfStatus {
    guard(|| {
        let path = str_arg(config_path, "config_path")?;
        let cfg = RunConfig::load(Path::new(path)).map_err(RunError::from)?;
        let s = runner::annotate(&cfg, BackendMode::Live)?;
        if !summary.is_null() {
            *summary = AfAnnotateSummary {
                instances: s.instances,
                failed: s.failed,
                resumed: s.resumed,
                backend_calls: s.backend_calls,
            };
        }
        Ok(())
    })
}

/// Loads a run directory written by `af_annotate`.
///
/// # Safety
/// `dir` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn af_run_load(dir: *const c_char, out: *mut *mut AfRun) -> AfStatus {
    guard(|| {
        let dir = str_arg(dir, "dir")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let run = runner::load_run(Path::new(dir), None)?;
        *out = Box::into_raw(Box::new(AfRun(run)));
        Ok(())
    })
}

/// Number of transcripts, or 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_run_len(run: *const AfRun) -> usize {
    run.as_ref().map_or(0, |r| r.0.transcripts.len())
}

/// Number of transcripts whose instance failed, or 0 for NULL.
///
/// # Safety
/// `run` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn af_run_failed(run: *const AfRun) -> usize {
    run.as_ref().map_or(0, |r| {
        r.0.transcripts
            .iter()
            .filter(|t| t.final_decision.is_failed())
            .count()
    })
}

/// Scores `n_runs` runs together and writes the report files to
/// `reports_dir`.
///
/// # Safety
/// `runs` must point to `n_runs` live handles; `reports_dir` must be
/// NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn af_evaluate(
    runs: *const *const AfRun,
    n_runs: usize,
    method: AfMcNemarMethod,
    reports_dir: *const c_char,
) -> AfStatus {
    guard(|| {
        let dir = str_arg(reports_dir, "reports_dir")?;
        if runs.is_null() || n_runs == 0 {
            return Err(Failure(AfStatus::InvalidArgument, "no runs given".into()));
        }
        let loaded = std::slice::from_raw_parts(runs, n_runs)
            .iter()
            .map(|&r| r.as_ref().map(|r| r.0.clone()).ok_or_else(|| null("run")))
            .collect::<Result<Vec<_>, _>>()?;
        runner::evaluate(&loaded, method.into(), Path::new(dir))?;
        Ok(())
    })
}

/// # Safety
/// `run` must be NULL or a handle from `af_run_load`, freed once.
#[no_mangle]
pub unsafe extern "C" fn af_run_free(run: *mut AfRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
