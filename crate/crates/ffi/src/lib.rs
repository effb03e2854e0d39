//! C ABI over the `unger` pipeline.
//!
//! Every fallible call returns an [`UngerStatus`]; on failure the message is
//! kept per thread and can be read with [`unger_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use unger::corpus::SplitSelector;
use unger::pipeline::{self, Recommender, RunConfig};
use unger::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UngerStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Format = 5,
    Json = 6,
    Config = 7,
    Invalid = 8,
    Shape = 9,
    NonFinite = 10,
    OutOfRange = 11,
    Panic = 12,
}

impl From<&Error> for UngerStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => UngerStatus::Io,
            Error::Parse { .. } => UngerStatus::Parse,
            Error::Format { .. } => UngerStatus::Format,
            Error::Json(_) => UngerStatus::Json,
            Error::Config(_) => UngerStatus::Config,
            Error::Invalid(_) => UngerStatus::Invalid,
            Error::Shape { .. } => UngerStatus::Shape,
            Error::NonFinite { .. } => UngerStatus::NonFinite,
        }
    }
}

/// A trained run loaded for serving.
pub struct UngerRecommender(Recommender);

/// A ranked list of `(item token, score)` pairs.
pub struct UngerRecommendations {
    items: Vec<CString>,
    scores: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: UngerStatus, msg: impl Into<String>) -> UngerStatus {
    set_error(msg.into());
    status
}

fn guard(f: impl FnOnce() -> Result<(), UngerStatus>) -> UngerStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UngerStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(UngerStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: unger::Result<T>) -> Result<T, UngerStatus> {
    r.map_err(|e| fail(UngerStatus::from(&e), e.to_string()))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, UngerStatus> {
    if p.is_null() {
        return Err(fail(UngerStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        fail(
            UngerStatus::InvalidUtf8,
            format!("{name} is not valid UTF-8"),
        )
    })
}

fn null_check<T>(p: *const T, name: &str) -> Result<(), UngerStatus> {
    if p.is_null() {
        Err(fail(UngerStatus::NullArgument, format!("{name} is null")))
    } else {
        Ok(())
    }
}

fn into_list(list: Vec<(String, f64)>) -> *mut UngerRecommendations {
    let (items, scores) = list
        .into_iter()
        .map(|(t, s)| (CString::new(t).unwrap_or_default(), s))
        .unzip();
    Box::into_raw(Box::new(UngerRecommendations { items, scores }))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unger_version() -> *const c_char {
    static VERSION: std::sync::OnceLock<CString> = std::sync::OnceLock::new();
    VERSION
        .get_or_init(|| CString::new(pipeline::version()).unwrap_or_default())
        .as_ptr()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn unger_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Runs one pipeline subcommand (`synth-data`, `train-stage1`, ...) with an
/// optional JSON config file (null for defaults) into `out_dir`.
///
/// # Safety
/// String arguments must be null or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn unger_run_command(
    command: *const c_char,
    config_path: *const c_char,
    out_dir: *const c_char,
) -> UngerStatus {
    guard(|| {
        let command = str_arg(command, "command")?;
        let out = Path::new(str_arg(out_dir, "out_dir")?);
        let cfg = if config_path.is_null() {
            RunConfig::default()
        } else {
            lift(RunConfig::load(Path::new(str_arg(
                config_path,
                "config_path",
            )?)))?
        };
        let r = match command {
            "synth-data" => pipeline::synth_data(&cfg, out).map(drop),
            "prepare-data" => pipeline::prepare_data(&cfg, out).map(drop),
            "train-stage1" => pipeline::train_stage1_cmd(&cfg, out).map(drop),
            "export-embeddings" => pipeline::export_embeddings(&cfg, out).map(drop),
            "quantize" => pipeline::quantize(&cfg, out).map(drop),
            "train-stage2" => pipeline::train_stage2_cmd(&cfg, out).map(drop),
            "recommend" => pipeline::recommend(&cfg, out).map(drop),
            "evaluate" => pipeline::evaluate(&cfg, out).map(drop),
            "dominance" => pipeline::dominance(&cfg, out).map(drop),
            "bench-cost" => pipeline::bench(&cfg, out).map(drop),
            "ablate" => pipeline::ablate(&cfg, out).map(drop),
            other => {
                return Err(fail(
                    UngerStatus::Invalid,
                    format!("unknown command {other:?}"),
                ))
            }
        };
        lift(r)
    })
}

/// Loads a trained run directory. On success `*out` owns a new handle.
///
/// # Safety
/// `run_dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unger_recommender_open(
    run_dir: *const c_char,
    out: *mut *mut UngerRecommender,
) -> UngerStatus {
    guard(|| {
        null_check(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(run_dir, "run_dir")?;
        let r = lift(Recommender::open(Path::new(dir)))?;
        *out = Box::into_raw(Box::new(UngerRecommender(r)));
        Ok(())
    })
}

/// Releases a recommender. Null is ignored.
///
/// # Safety
/// `handle` must come from [`unger_recommender_open`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn unger_recommender_free(handle: *mut UngerRecommender) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of items in the catalogue, or 0 for a null handle.
///
/// # Safety
/// `handle` must be null or a live recommender.
#[no_mangle]
pub unsafe extern "C" fn unger_recommender_n_items(handle: *const UngerRecommender) -> usize {
    handle.as_ref().map_or(0, |h| h.0.n_items())
}

/// Top-`k` items after `history` (item tokens, oldest first) with beam
/// width `beam >= k`. On success `*out` owns a new list.
///
/// # Safety
/// `handle` must be live, `history` must point to `n_history` valid strings
/// and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unger_recommend(
    handle: *const UngerRecommender,
    history: *const *const c_char,
    n_history: usize,
    beam: usize,
    k: usize,
    out: *mut *mut UngerRecommendations,
) -> UngerStatus {
    guard(|| {
        null_check(out, "out")?;
        *out = ptr::null_mut();
        null_check(handle, "handle")?;
        if n_history > 0 {
            null_check(history, "history")?;
        }
        let tokens = (0..n_history)
            .map(|i| str_arg(*history.add(i), "history item"))
            .collect::<Result<Vec<&str>, _>>()?;
        let list = lift((*handle).0.recommend(&tokens, beam, k))?;
        *out = into_list(list);
        Ok(())
    })
}

/// Top-`k` items for a user of the loaded corpus at its test split.
///
/// # Safety
/// As for [`unger_recommend`]; `user` must be a valid string.
#[no_mangle]
pub unsafe extern "C" fn unger_recommend_user(
    handle: *const UngerRecommender,
    user: *const c_char,
    beam: usize,
    k: usize,
    out: *mut *mut UngerRecommendations,
) -> UngerStatus {
    guard(|| {
        null_check(out, "out")?;
        *out = ptr::null_mut();
        null_check(handle, "handle")?;
        let user = str_arg(user, "user")?;
        let list = lift(
            (*handle)
                .0
                .recommend_user(user, SplitSelector::Test, beam, k),
        )?;
        *out = into_list(list);
        Ok(())
    })
}

/// Length of a list, or 0 for null.
///
/// # Safety
/// `list` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn unger_recommendations_len(list: *const UngerRecommendations) -> usize {
    list.as_ref().map_or(0, |l| l.items.len())
}

/// Item token at `index`; valid while the list lives. Null when out of range.
///
/// # Safety
/// `list` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn unger_recommendations_item(
    list: *const UngerRecommendations,
    index: usize,
) -> *const c_char {
    list.as_ref()
        .and_then(|l| l.items.get(index))
        .map_or(ptr::null(), |c| c.as_ptr())
}

/// Score at `index` written to `*score`.
///
/// # Safety
/// `list` must be null or live and `score` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unger_recommendations_score(
    list: *const UngerRecommendations,
    index: usize,
    score: *mut f64,
) -> UngerStatus {
    guard(|| {
        null_check(list, "list")?;
        null_check(score, "score")?;
        let l = &*list;
        let s = l.scores.get(index).ok_or_else(|| {
            fail(
                UngerStatus::OutOfRange,
                format!("index {index} out of range"),
            )
        })?;
        *score = *s;
        Ok(())
    })
}

/// Releases a list. Null is ignored.
///
/// # Safety
/// `list` must come from a recommend call and not be used again.
#[no_mangle]
pub unsafe extern "C" fn unger_recommendations_free(list: *mut UngerRecommendations) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}
