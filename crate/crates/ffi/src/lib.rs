//! C ABI over the `coe` crate.
//!
//! Every fallible call returns a [`CoeStatus`]; on failure the message is
//! available from [`coe_last_error_message`] on the same thread. Objects are
//! opaque handles released with their `_free` function. Strings handed out by
//! the library are NUL-terminated and released with [`coe_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use coe::corpus::{resolve_profile, CorpusError, DatasetProfile};
use coe::index::{cosine, fuse, IndexError};
use coe::lmm::TokenScore;
use coe::pipeline::parse_label;
use coe::prompt::{build_final_prompt, EvolutionInfo};
use coe::{EmbeddingVector, FusedIndex, FusionConfig, MemeRecord};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    BadFormat = 5,
    NotFound = 6,
    Panic = 7,
}

/// Fused embedding index loaded from or built for a meme pool.
pub struct CoeIndex(FusedIndex);

/// Dataset profile: label words, amplifier text and prompt templates.
pub struct CoeProfile(DatasetProfile);

/// One retrieval hit: row position in the index and cosine similarity.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeHit {
    pub position: usize,
    pub similarity: f64,
}

/// Outcome of label parsing.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoeLabel {
    pub prediction: u8,
    pub score: f64,
    pub unparseable: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(CoeStatus, String);

impl From<IndexError> for Failure {
    fn from(e: IndexError) -> Self {
        let status = match e {
            IndexError::Io(_) => CoeStatus::Io,
            IndexError::BadMagic
            | IndexError::UnsupportedVersion(_)
            | IndexError::Truncated { .. }
            | IndexError::Inconsistent(_) => CoeStatus::BadFormat,
            _ => CoeStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        let status = match e {
            CorpusError::UnknownProfile { .. } => CoeStatus::NotFound,
            CorpusError::Io { .. } => CoeStatus::Io,
            _ => CoeStatus::BadFormat,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CoeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
            CoeStatus::Ok
        }
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CoeStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(CoeStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CoeStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn opt_str_arg<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        str_arg(p, what).map(Some)
    }
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn owned_string(s: &str) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(CoeStatus::InvalidArgument, "string contains a NUL byte".into()))
}

fn vector(values: &[f32]) -> Result<EmbeddingVector, Failure> {
    Ok(EmbeddingVector::new(values.to_vec())?)
}

fn fusion(text_weight: f32, image_weight: f32, normalize: bool) -> FusionConfig {
    FusionConfig {
        text_weight,
        image_weight,
        normalize,
    }
}

/// Message of the last failed call on this thread, or NULL after a success.
/// The pointer stays valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn coe_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Releases a string returned by the library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn coe_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a CIDX index file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_index_load(path: *const c_char, out: *mut *mut CoeIndex) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let index = coe::cemb::load_index(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(CoeIndex(index)));
        Ok(())
    })
}

/// Builds an index from `count` already-fused rows of width `dim`, stored
/// row-major in `rows`. `ids` holds `count` strings. The fusion weights are
/// recorded in the index and used for nothing else.
///
/// # Safety
/// `ids` must hold `count` valid strings and `rows` `count * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn coe_index_from_rows(
    ids: *const *const c_char,
    rows: *const f32,
    count: usize,
    dim: usize,
    text_weight: f32,
    image_weight: f32,
    normalize: bool,
    out: *mut *mut CoeIndex,
) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id_ptrs = slice_arg(ids, count, "ids")?;
        let ids = id_ptrs
            .iter()
            .map(|&p| str_arg(p, "id").map(str::to_owned))
            .collect::<Result<Vec<_>, _>>()?;
        let len = count
            .checked_mul(dim)
            .ok_or_else(|| Failure(CoeStatus::InvalidArgument, "count * dim overflows".into()))?;
        let matrix = slice_arg(rows, len, "rows")?.to_vec();
        let index = FusedIndex::from_rows(ids, matrix, dim, fusion(text_weight, image_weight, normalize))?;
        *out = Box::into_raw(Box::new(CoeIndex(index)));
        Ok(())
    })
}

/// Writes the index as a CIDX file.
///
/// # Safety
/// `index` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn coe_index_save(index: *const CoeIndex, path: *const c_char) -> CoeStatus {
    guard(|| {
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        coe::cemb::save_index(&index.0, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of rows; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn coe_index_len(index: *const CoeIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.len())
}

/// Row width; 0 for NULL.
///
/// # Safety
/// `index` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn coe_index_dim(index: *const CoeIndex) -> usize {
    index.as_ref().map_or(0, |i| i.0.dim())
}

/// Copies the id of row `position` into a new string.
///
/// # Safety
/// `index` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_index_id(index: *const CoeIndex, position: usize, out: *mut *mut c_char) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        let id = index
            .0
            .ids()
            .get(position)
            .ok_or_else(|| Failure(CoeStatus::NotFound, format!("no row {position}")))?;
        *out = owned_string(id)?;
        Ok(())
    })
}

/// Exact cosine top-k. `hits` must have room for `k` entries; the number
/// written (min(k, rows available)) goes to `written`. Ties rank by position.
/// `exclude_id` may be NULL.
///
/// # Safety
/// `query` must hold `dim` floats and `hits` `k` entries.
#[no_mangle]
pub unsafe extern "C" fn coe_index_top_k(
    index: *const CoeIndex,
    query: *const f32,
    dim: usize,
    k: usize,
    exclude_id: *const c_char,
    hits: *mut CoeHit,
    written: *mut usize,
) -> CoeStatus {
    guard(|| {
        let written = out_arg(written, "written")?;
        let index = index.as_ref().ok_or_else(|| null("index"))?;
        let query = vector(slice_arg(query, dim, "query")?)?;
        let exclude = opt_str_arg(exclude_id, "exclude_id")?;
        let found = index.0.top_k(&query, k, exclude)?;
        if hits.is_null() {
            return Err(null("hits"));
        }
        let hits = std::slice::from_raw_parts_mut(hits, k);
        for (slot, n) in hits.iter_mut().zip(&found) {
            *slot = CoeHit {
                position: index.0.position(&n.id).expect("hit comes from the index"),
                similarity: n.similarity,
            };
        }
        *written = found.len();
        Ok(())
    })
}

/// Releases an index. NULL is ignored.
///
/// # Safety
/// `index` must be NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coe_index_free(index: *mut CoeIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Weighted mix of a text and an image embedding (weights rescaled to sum to
/// one), L2-normalized when `normalize` is set. Writes `dim` floats to `out`.
///
/// # Safety
/// `text`, `image` and `out` must each hold `dim` floats.
#[no_mangle]
pub unsafe extern "C" fn coe_fuse(
    text: *const f32,
    image: *const f32,
    dim: usize,
    text_weight: f32,
    image_weight: f32,
    normalize: bool,
    out: *mut f32,
) -> CoeStatus {
    guard(|| {
        let t = vector(slice_arg(text, dim, "text")?)?;
        let i = vector(slice_arg(image, dim, "image")?)?;
        let fused = fuse(&t, &i, &fusion(text_weight, image_weight, normalize))?;
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, dim).copy_from_slice(fused.as_slice());
        Ok(())
    })
}

/// Cosine similarity of two nonzero vectors, computed in double precision.
///
/// # Safety
/// `a` and `b` must each hold `dim` floats; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_cosine(a: *const f32, b: *const f32, dim: usize, out: *mut f64) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = cosine(&vector(slice_arg(a, dim, "a")?)?, &vector(slice_arg(b, dim, "b")?)?)?;
        Ok(())
    })
}

/// Area under the ROC curve with half credit for ties. Labels are 0 or 1 and
/// both classes must be present.
///
/// # Safety
/// `scores` and `labels` must each hold `n` entries; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_auc(scores: *const f64, labels: *const u8, n: usize, out: *mut f64) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = coe::eval::auc(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)
            .map_err(|e| Failure(CoeStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Looks up a built-in profile (FHM, MAMI, HarM; case-insensitive) or, failing
/// that, reads a profile JSON file at that path.
///
/// # Safety
/// `name_or_path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_profile_load(name_or_path: *const c_char, out: *mut *mut CoeProfile) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let profile = resolve_profile(str_arg(name_or_path, "name_or_path")?)?;
        *out = Box::into_raw(Box::new(CoeProfile(profile)));
        Ok(())
    })
}

/// Canonical profile name as a new string.
///
/// # Safety
/// `profile` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn coe_profile_name(profile: *const CoeProfile, out: *mut *mut c_char) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let profile = profile.as_ref().ok_or_else(|| null("profile"))?;
        *out = owned_string(&profile.0.name)?;
        Ok(())
    })
}

/// Releases a profile. NULL is ignored.
///
/// # Safety
/// `profile` must be NULL or a live handle, not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coe_profile_free(profile: *mut CoeProfile) {
    if !profile.is_null() {
        drop(Box::from_raw(profile));
    }
}

/// Maps a model answer to a label. `first_token` (nullable) and its log
/// probability, when given, turn the score into P(positive).
///
/// # Safety
/// `profile` must be a live handle, `text` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn coe_parse_label(
    profile: *const CoeProfile,
    text: *const c_char,
    first_token: *const c_char,
    logprob: f64,
    out: *mut CoeLabel,
) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let profile = profile.as_ref().ok_or_else(|| null("profile"))?;
        let text = str_arg(text, "text")?;
        let tokens = opt_str_arg(first_token, "first_token")?.map(|t| {
            vec![TokenScore {
                token: t.to_owned(),
                logprob,
            }]
        });
        let parsed = parse_label(text, &profile.0, tokens.as_deref());
        *out = CoeLabel {
            prediction: parsed.prediction,
            score: parsed.score,
            unparseable: parsed.unparseable,
        };
        Ok(())
    })
}

/// Renders the final classification prompt for a meme caption. `info`
/// (nullable) is the extracted evolution information from `source_count`
/// neighbors; `use_amplifier` adds the profile's definition as a rule.
///
/// # Safety
/// `profile` must be a live handle, `caption` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn coe_render_final_prompt(
    profile: *const CoeProfile,
    caption: *const c_char,
    info: *const c_char,
    source_count: usize,
    use_amplifier: bool,
    out: *mut *mut c_char,
) -> CoeStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let profile = profile.as_ref().ok_or_else(|| null("profile"))?;
        let target = MemeRecord::new("target", "target", str_arg(caption, "caption")?);
        let info = opt_str_arg(info, "info")?.map(|text| EvolutionInfo { text, source_count });
        let prompt = build_final_prompt(&profile.0, &target, info, None, use_amplifier)
            .map_err(|e| Failure(CoeStatus::InvalidArgument, e.to_string()))?;
        *out = owned_string(&prompt.text)?;
        Ok(())
    })
}
