//! C ABI over the `bowrank` library.
//!
//! Conventions:
//!
//! * Every fallible function returns a [`BwStatus`]; `BW_STATUS_OK` is 0.
//! * On failure a message is stored per thread and can be read with
//!   [`bw_last_error`] until the next failing call on that thread.
//! * Objects are opaque handles created by `*_load` / `*_build` functions
//!   and released with the matching `*_free`. Passing NULL to a `_free`
//!   function is a no-op.
//! * Strings returned through out-parameters are owned by the caller and
//!   must be released with [`bw_string_free`].
//! * Panics never cross the boundary; they surface as `BW_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bowrank::bm25::{build_index, Bm25Params, InvertedIndex};
use bowrank::cka::cka_linear;
use bowrank::corpus;
use bowrank::eval::{evaluate, EvalOptions};
use bowrank::model::{load_any, AnyModel};
use bowrank::perturb::{self, PerturbMode};
use bowrank::tokenizer::{load_vocab, TokenizedPair, Vocab};
use bowrank::Error;
use ndarray::ArrayView2;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BwStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidData = 5,
    Config = 6,
    Checkpoint = 7,
    Degenerate = 8,
    Diverged = 9,
    Panic = 10,
}

impl From<&Error> for BwStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => BwStatus::Io,
            Error::Parse { .. } => BwStatus::Parse,
            Error::Invalid(_) => BwStatus::InvalidData,
            Error::Config(_) => BwStatus::Config,
            Error::Checkpoint(_) => BwStatus::Checkpoint,
            Error::Degenerate(_) => BwStatus::Degenerate,
            Error::Diverged { .. } => BwStatus::Diverged,
        }
    }
}

/// Tokenizer vocabulary.
pub struct BwVocab(Vocab);

/// Trained cross-encoder of either precision.
pub struct BwModel(AnyModel);

/// BM25 inverted index.
pub struct BwIndex(InvertedIndex);

/// Mean metrics of a run: NDCG@10, MAP, Recall@100 and MRR@10.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BwMetrics {
    pub ndcg_at_10: f64,
    pub map: f64,
    pub recall_at_100: f64,
    pub mrr_at_10: f64,
    /// Queries with at least one relevant document.
    pub n_queries: usize,
    /// Judged queries without any relevant document.
    pub n_skipped: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(BwStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(BwStatus::from(&e), e.to_string())
    }
}

type FfiResult<T> = Result<T, Failure>;

fn guard(f: impl FnOnce() -> FfiResult<()>) -> BwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BwStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            BwStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(BwStatus::NullArgument, format!("`{what}` is NULL"))
}

unsafe fn arg_str<'a>(p: *const c_char, what: &str) -> FfiResult<&'a str> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(BwStatus::InvalidUtf8, format!("`{what}` is not UTF-8")))
}

unsafe fn arg_ref<'a, T>(p: *const T, what: &str) -> FfiResult<&'a T> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn arg_out<'a, T>(p: *mut T, what: &str) -> FfiResult<&'a mut T> {
    p.as_mut().ok_or_else(|| null(what))
}

/// NULL means `natural`.
unsafe fn arg_mode(p: *const c_char) -> FfiResult<PerturbMode> {
    if p.is_null() {
        return Ok(PerturbMode::Natural);
    }
    Ok(arg_str(p, "mode")?.parse()?)
}

fn into_c_string(s: String) -> FfiResult<*mut c_char> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(BwStatus::InvalidData, "output contains NUL".into()))
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn bw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a vocabulary file (one token per line).
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bw_vocab_load(path: *const c_char, out: *mut *mut BwVocab) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        let v = load_vocab(PathBuf::from(arg_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(BwVocab(v)));
        Ok(())
    })
}

/// Number of tokens, specials included; 0 for NULL.
///
/// # Safety
/// `vocab` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bw_vocab_len(vocab: *const BwVocab) -> usize {
    vocab.as_ref().map_or(0, |v| v.0.len())
}

/// # Safety
/// `vocab` must be NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bw_vocab_free(vocab: *mut BwVocab) {
    if !vocab.is_null() {
        drop(Box::from_raw(vocab));
    }
}

/// Tokenizes `text`, applies `mode` (`natural`, `sort` or
/// `shuffle:<seed>`; NULL means natural) with example key `key`, and
/// writes the space-joined tokens to `*out`.
///
/// # Safety
/// Pointers must be valid; `key` may be NULL (empty key).
#[no_mangle]
pub unsafe extern "C" fn bw_perturb_text(
    vocab: *const BwVocab,
    text: *const c_char,
    mode: *const c_char,
    key: *const c_char,
    out: *mut *mut c_char,
) -> BwStatus {
    guard(|| {
        let vocab = &arg_ref(vocab, "vocab")?.0;
        let out = arg_out(out, "out")?;
        let key = if key.is_null() { "" } else { arg_str(key, "key")? };
        let pair = TokenizedPair::from_parts(&vocab.tokenize(arg_str(text, "text")?), &[]);
        let p = perturb::apply(&pair, arg_mode(mode)?, key);
        *out = into_c_string(vocab.decode(p.query_ids()).join(" "))?;
        Ok(())
    })
}

/// Loads a checkpoint.
///
/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bw_model_load(path: *const c_char, out: *mut *mut BwModel) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        let m = load_any(&PathBuf::from(arg_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(BwModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bw_model_free(model: *mut BwModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scores a (query, passage) pair after perturbing it with `mode` under
/// example key `key`. Writes the relevance probability to `*prob` and the
/// logit margin (the ranking score) to `*margin`; either may be NULL.
///
/// # Safety
/// Handles and strings must be valid; `mode` and `key` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn bw_model_score(
    model: *const BwModel,
    vocab: *const BwVocab,
    query: *const c_char,
    passage: *const c_char,
    mode: *const c_char,
    key: *const c_char,
    prob: *mut f64,
    margin: *mut f64,
) -> BwStatus {
    guard(|| {
        let model = &arg_ref(model, "model")?.0;
        let vocab = &arg_ref(vocab, "vocab")?.0;
        let key = if key.is_null() { "" } else { arg_str(key, "key")? };
        let pair = vocab.encode_pair(
            arg_str(query, "query")?,
            arg_str(passage, "passage")?,
            model.config().max_len,
        )?;
        let pair = perturb::apply(&pair, arg_mode(mode)?, key);
        if let Some(p) = prob.as_mut() {
            *p = model.score(&pair)?;
        }
        if let Some(m) = margin.as_mut() {
            *m = model.relevance_margin(&pair)?;
        }
        Ok(())
    })
}

/// Builds a BM25 index over a collection file (`id<TAB>text`).
///
/// # Safety
/// `collection_path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bw_index_build(collection_path: *const c_char, out: *mut *mut BwIndex) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        let c = corpus::load_collection(arg_str(collection_path, "collection_path")?)?;
        *out = Box::into_raw(Box::new(BwIndex(build_index(&c)?)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a valid C string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bw_index_load(path: *const c_char, out: *mut *mut BwIndex) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        let idx = InvertedIndex::load(&PathBuf::from(arg_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(BwIndex(idx)));
        Ok(())
    })
}

/// # Safety
/// `index` must be a live handle and `path` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn bw_index_save(index: *const BwIndex, path: *const c_char) -> BwStatus {
    guard(|| {
        let index = &arg_ref(index, "index")?.0;
        Ok(index.save(&PathBuf::from(arg_str(path, "path")?))?)
    })
}

/// Number of indexed documents; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn bw_index_num_docs(index: *const BwIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.num_docs())
}

/// # Safety
/// `index` must be NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bw_index_free(index: *mut BwIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Retrieves the top `k` documents for every query of `queries_path` and
/// writes a TREC run to `run_path`.
///
/// # Safety
/// `index` must be a live handle and the paths valid C strings.
#[no_mangle]
pub unsafe extern "C" fn bw_index_retrieve(
    index: *const BwIndex,
    queries_path: *const c_char,
    k: usize,
    k1: f64,
    b: f64,
    run_path: *const c_char,
) -> BwStatus {
    guard(|| {
        let index = &arg_ref(index, "index")?.0;
        let queries = corpus::load_queries(arg_str(queries_path, "queries_path")?)?;
        let run = index.retrieve_run(&queries, k, &Bm25Params { k1, b }, "bm25")?;
        Ok(corpus::write_run(&run, arg_str(run_path, "run_path")?)?)
    })
}

/// Evaluates a TREC run against qrels with default cutoffs and relevance
/// threshold 1.
///
/// # Safety
/// Paths must be valid C strings and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bw_evaluate(run_path: *const c_char, qrels_path: *const c_char, out: *mut BwMetrics) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        let run = corpus::load_run(arg_str(run_path, "run_path")?)?;
        let qrels = corpus::load_qrels(arg_str(qrels_path, "qrels_path")?)?;
        let r = evaluate(&run, &qrels, &EvalOptions::default())?;
        *out = BwMetrics {
            ndcg_at_10: r.mean.ndcg,
            map: r.mean.map,
            recall_at_100: r.mean.recall,
            mrr_at_10: r.mean.mrr,
            n_queries: r.per_query.len(),
            n_skipped: r.skipped,
        };
        Ok(())
    })
}

/// Linear CKA of two row-major matrices with `n` rows each (`dx` and `dy`
/// columns).
///
/// # Safety
/// `x` must hold `n * dx` values, `y` `n * dy` values, `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn bw_cka_linear(
    x: *const f64,
    y: *const f64,
    n: usize,
    dx: usize,
    dy: usize,
    out: *mut f64,
) -> BwStatus {
    guard(|| {
        let out = arg_out(out, "out")?;
        if x.is_null() || y.is_null() {
            return Err(null(if x.is_null() { "x" } else { "y" }));
        }
        let shape_err = |_| Failure(BwStatus::InvalidData, "matrix size overflows".into());
        let xs = std::slice::from_raw_parts(x, n.checked_mul(dx).ok_or(()).map_err(shape_err)?);
        let ys = std::slice::from_raw_parts(y, n.checked_mul(dy).ok_or(()).map_err(shape_err)?);
        let xv = ArrayView2::from_shape((n, dx), xs).expect("length matches shape");
        let yv = ArrayView2::from_shape((n, dy), ys).expect("length matches shape");
        *out = cka_linear(xv, yv)?;
        Ok(())
    })
}
