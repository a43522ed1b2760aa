//! C ABI over `lac-core`. Every function returns a `LacStatus`; on failure
//! the message is kept per thread and read with `lac_last_error`. Handles are
//! opaque and owned by the caller until `lac_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use lac_core::harness::checkpoint;
use lac_core::inference::{generate, score};
use lac_core::latentpolicy::Mode;
use lac_core::toyscene::prompt::{Category, Vocab};
use lac_core::toyscene::{decode_scene, sample_task};
use lac_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LacStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Io = 4,
    Format = 5,
    Internal = 6,
}

/// Loaded model; opaque to C.
pub struct LacModel {
    inner: lac_core::model::LacModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LacStatus {
    match e {
        Error::Io(_) => LacStatus::Io,
        Error::Format(_) | Error::Json(_) => LacStatus::Format,
        Error::InvalidArgument(_) | Error::Shape(_) | Error::Config(_) => LacStatus::InvalidArgument,
        Error::NonFinite(_) | Error::Diverged(_) => LacStatus::Internal,
    }
}

/// Run `f`, mapping errors and panics to a status and the last-error slot.
fn guard(f: impl FnOnce() -> Result<(), (LacStatus, String)>) -> LacStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LacStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            LacStatus::Internal
        }
    }
}

fn core<T>(r: lac_core::Result<T>) -> Result<T, (LacStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (LacStatus, String) {
    (LacStatus::NullPointer, format!("{what} is null"))
}

/// Borrow `n` elements; a zero-length slice may come with a null pointer.
unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], (LacStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn model<'a>(m: *const LacModel) -> Result<&'a LacModel, (LacStatus, String)> {
    m.as_ref().ok_or_else(|| null("model"))
}

fn tokens_of(t: &[u32]) -> Vec<usize> {
    t.iter().map(|&v| v as usize).collect()
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn lac_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Load a checkpoint into a new handle written to `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lac_model_load(path: *const c_char, out: *mut *mut LacModel) -> LacStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|_| (LacStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ck = core(checkpoint::load(Path::new(p)))?;
        *out = Box::into_raw(Box::new(LacModel { inner: ck.model }));
        Ok(())
    })
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `m` must come from `lac_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lac_model_free(m: *mut LacModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Length of a flattened scene (slots × slot width).
///
/// # Safety
/// `m` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lac_model_scene_dim(m: *const LacModel, out: *mut usize) -> LacStatus {
    guard(|| {
        let m = model(m)?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.config.world.flat_dim();
        Ok(())
    })
}

/// Draw a task prompt of `category` (0..6 in report column order) as tokens.
/// `*n_tokens` receives the prompt length even when `cap` is too small.
///
/// # Safety
/// `m` must be a live handle; `tokens` must hold `cap` elements; `n_tokens`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn lac_sample_task(
    m: *const LacModel,
    category: u32,
    seed: u64,
    tokens: *mut u32,
    cap: usize,
    n_tokens: *mut usize,
) -> LacStatus {
    guard(|| {
        let m = model(m)?;
        let n_out = n_tokens.as_mut().ok_or_else(|| null("n_tokens"))?;
        let cat = *Category::ALL
            .get(category as usize)
            .ok_or_else(|| (LacStatus::InvalidArgument, format!("category {category} out of range")))?;
        let world = &m.inner.config.world;
        let (spec, _) = sample_task(world, seed, cat);
        let t = spec.tokens(&Vocab::new(world));
        *n_out = t.len();
        if t.len() > cap {
            return Err((LacStatus::BufferTooSmall, format!("prompt needs {} tokens, buffer holds {cap}", t.len())));
        }
        if tokens.is_null() {
            return Err(null("tokens"));
        }
        for (i, v) in t.into_iter().enumerate() {
            *tokens.add(i) = v as u32;
        }
        Ok(())
    })
}

/// Generate a scene for a prompt. Writes the flattened scene to `scene`
/// (`scene_len` must equal `lac_model_scene_dim`), its toy reward to
/// `*reward` and the number of latent actions to `*n_actions`. Null output
/// pointers other than `scene` are skipped.
///
/// # Safety
/// `m` must be a live handle; `tokens` must hold `n_tokens` elements;
/// `scene` must hold `scene_len` elements.
#[no_mangle]
pub unsafe extern "C" fn lac_sample(
    m: *const LacModel,
    tokens: *const u32,
    n_tokens: usize,
    stochastic: bool,
    seed: u64,
    scene: *mut f64,
    scene_len: usize,
    reward: *mut f64,
    n_actions: *mut usize,
) -> LacStatus {
    guard(|| {
        let m = &model(m)?.inner;
        let toks = tokens_of(slice(tokens, n_tokens, "tokens")?);
        let dim = m.config.world.flat_dim();
        if scene.is_null() {
            return Err(null("scene"));
        }
        if scene_len < dim {
            return Err((LacStatus::BufferTooSmall, format!("scene needs {dim} values, buffer holds {scene_len}")));
        }
        let mode = if stochastic { Mode::Stochastic } else { Mode::Mean };
        let g = core(generate(m, &toks, &m.config.schedule, mode, seed))?;
        let r = core(score(m, &toks, &g.scene))?;
        std::ptr::copy_nonoverlapping(g.x0.as_ptr(), scene, dim);
        if let Some(out) = reward.as_mut() {
            *out = r;
        }
        if let Some(out) = n_actions.as_mut() {
            *out = g.rollout.len();
        }
        Ok(())
    })
}

/// Toy reward of a flattened scene against a prompt.
///
/// # Safety
/// `m` must be a live handle; `tokens` and `scene` must hold `n_tokens` and
/// `scene_len` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn lac_reward(
    m: *const LacModel,
    tokens: *const u32,
    n_tokens: usize,
    scene: *const f64,
    scene_len: usize,
    out: *mut f64,
) -> LacStatus {
    guard(|| {
        let m = &model(m)?.inner;
        let toks = tokens_of(slice(tokens, n_tokens, "tokens")?);
        let flat = slice(scene, scene_len, "scene")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let s = core(decode_scene(&m.config.world, flat))?;
        *out = core(score(m, &toks, &s))?;
        Ok(())
    })
}
