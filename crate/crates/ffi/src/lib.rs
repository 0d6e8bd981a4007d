//! C interface: load a trained policy bundle, drive it from caller-owned
//! observations, or evaluate it in the built-in simulator.
//!
//! Every function returns an [`HbStatus`]; on failure the message is kept
//! per thread and read with [`hb_last_error`]. Handles are opaque and owned
//! by the caller, who releases them with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use hamletbench::bundle::PolicyBundle;
use hamletbench::env::{reset, EnvError, Instruction, Observation, ProprioState, TaskId, NUM_CELLS};
use hamletbench::harness::{evaluate_policy, ExperimentConfig};
use hamletbench::policy::Episode;
use hamletbench::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Config = 5,
    Runtime = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// A loaded policy bundle.
pub struct HbPolicy {
    bundle: PolicyBundle,
}

/// Per-episode policy state (memory buffer, frame history, timestep). Only
/// valid with the policy that created it.
pub struct HbEpisode {
    owner: *const HbPolicy,
    episode: Episode,
}

/// Success rates of a seeded evaluation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HbEvalResult {
    pub episodes: u32,
    pub full: f64,
    pub partial: f64,
    pub full_se: f64,
    pub mean_length: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Fail(HbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Config(_) | Error::Json(_) => HbStatus::Config,
            Error::Io { .. } | Error::Env(EnvError::Io { .. }) => HbStatus::Io,
            Error::Env(EnvError::UnknownTask(_)) => HbStatus::InvalidArgument,
            _ => HbStatus::Runtime,
        };
        Fail(status, e.to_string())
    }
}

fn fail(status: HbStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Runs `f`, turning errors and panics into a status plus last-error text.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            HbStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            HbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(fail(HbStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HbStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| fail(HbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn mut_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| fail(HbStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(HbStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn task_arg(name: &str) -> Result<TaskId, Fail> {
    name.parse::<TaskId>().map_err(|e| fail(HbStatus::InvalidArgument, e.to_string()))
}

/// Copies `s` plus a NUL into `buf`; errors if it does not fit.
unsafe fn write_str(s: &str, buf: *mut c_char, len: usize) -> Result<(), Fail> {
    let out = out_slice(buf, len, "buffer")?;
    if out.len() < s.len() + 1 {
        return Err(fail(HbStatus::BufferTooSmall, format!("need {} bytes", s.len() + 1)));
    }
    for (o, b) in out.iter_mut().zip(s.bytes()) {
        *o = b as c_char;
    }
    out[s.len()] = 0;
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (truncated and
/// NUL-terminated when `len > 0`). Returns the full message length plus one.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hb_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            let out = std::slice::from_raw_parts_mut(buf, len);
            for (o, b) in out.iter_mut().zip(msg.bytes().take(n)) {
                *o = b as c_char;
            }
            out[n] = 0;
        }
        msg.len() + 1
    })
}

/// Loads a policy checkpoint written by the training tools.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_policy_load(path: *const c_char, out: *mut *mut HbPolicy) -> HbStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let path = str_arg(path, "path")?;
        let bundle = PolicyBundle::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(HbPolicy { bundle }));
        Ok(())
    })
}

/// # Safety
/// `policy` must be null or a handle from [`hb_policy_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_policy_free(policy: *mut HbPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Actions per decision, or 0 for a null handle.
///
/// # Safety
/// `policy` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hb_policy_chunk(policy: *const HbPolicy) -> usize {
    policy.as_ref().map_or(0, |p| p.bundle.meta.chunk())
}

/// Writes the policy variant name (`single_frame`, `hamlet`, ...) into `buf`.
///
/// # Safety
/// `policy` must be a live handle; `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn hb_policy_mode(policy: *const HbPolicy, buf: *mut c_char, len: usize) -> HbStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        write_str(p.bundle.meta.mode.name(), buf, len)
    })
}

/// Starts an episode for `policy`.
///
/// # Safety
/// `policy` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hb_episode_new(policy: *const HbPolicy, out: *mut *mut HbEpisode) -> HbStatus {
    guard(|| {
        let out = mut_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let p = ref_arg(policy, "policy")?;
        *out = Box::into_raw(Box::new(HbEpisode {
            owner: policy,
            episode: p.bundle.new_episode(),
        }));
        Ok(())
    })
}

/// # Safety
/// `episode` must be null or a handle from [`hb_episode_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn hb_episode_free(episode: *mut HbEpisode) {
    if !episode.is_null() {
        drop(Box::from_raw(episode));
    }
}

/// Environment steps the episode has been advanced by.
///
/// # Safety
/// `episode` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hb_episode_timestep(episode: *const HbEpisode) -> usize {
    episode.as_ref().map_or(0, |e| e.episode.timestep())
}

/// One decision: `cells` holds the 49 grid tokens row-major, `proprio` the
/// normalised gripper x, y and holding flag, `instruction` its tokens.
/// Writes the chunk's action ids into `actions` and their count into
/// `written`, then advances the episode by one chunk.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `episode` must come from
/// `policy`.
#[no_mangle]
pub unsafe extern "C" fn hb_policy_act(
    policy: *const HbPolicy,
    episode: *mut HbEpisode,
    cells: *const u8,
    proprio: *const f32,
    instruction: *const u8,
    instruction_len: usize,
    actions: *mut u8,
    actions_cap: usize,
    written: *mut usize,
) -> HbStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        let ep = mut_arg(episode, "episode")?;
        let written = mut_arg(written, "written")?;
        *written = 0;
        if ep.owner != policy {
            return Err(fail(HbStatus::InvalidArgument, "episode belongs to a different policy"));
        }
        let obs = Observation::from_slice(slice_arg(cells, NUM_CELLS, "cells")?)
            .map_err(|e| fail(HbStatus::InvalidArgument, e.to_string()))?;
        let pr = slice_arg(proprio, 3, "proprio")?;
        if pr.iter().any(|v| !v.is_finite()) {
            return Err(fail(HbStatus::InvalidArgument, "proprio must be finite"));
        }
        let proprio = ProprioState { x: pr[0], y: pr[1], holding: pr[2] };
        let instr = Instruction(slice_arg(instruction, instruction_len, "instruction")?.to_vec());
        let chunk = p.bundle.meta.chunk();
        let out = out_slice(actions, actions_cap, "actions")?;
        if out.len() < chunk {
            return Err(fail(HbStatus::BufferTooSmall, format!("need room for {chunk} actions")));
        }
        let d = p.bundle.act(&mut ep.episode, &obs, &proprio, &instr, false)?;
        for (o, a) in out.iter_mut().zip(&d.actions) {
            *o = a.id() as u8;
        }
        *written = d.actions.len();
        Ok(())
    })
}

/// The first observation of a seeded episode of `task`: 49 cell tokens,
/// 3 proprio values and the instruction tokens (`instruction_len` receives
/// the count).
///
/// # Safety
/// `task` must be a NUL-terminated string; output pointers must be valid for
/// their lengths.
#[no_mangle]
pub unsafe extern "C" fn hb_env_reset(
    task: *const c_char,
    seed: u64,
    cells: *mut u8,
    proprio: *mut f32,
    instruction: *mut u8,
    instruction_cap: usize,
    instruction_len: *mut usize,
) -> HbStatus {
    guard(|| {
        let task = task_arg(str_arg(task, "task")?)?;
        let len = mut_arg(instruction_len, "instruction_len")?;
        let (_, obs, pr, instr) = reset(task, seed);
        *len = instr.tokens().len();
        out_slice(cells, NUM_CELLS, "cells")?.copy_from_slice(&obs.cells);
        out_slice(proprio, 3, "proprio")?.copy_from_slice(&pr.to_array());
        let out = out_slice(instruction, instruction_cap, "instruction")?;
        if out.len() < instr.tokens().len() {
            return Err(fail(HbStatus::BufferTooSmall, format!("need room for {} tokens", instr.tokens().len())));
        }
        out[..instr.tokens().len()].copy_from_slice(instr.tokens());
        Ok(())
    })
}

/// Runs `episodes` seeded simulator episodes of `task`.
///
/// # Safety
/// `policy` must be a live handle, `task` a NUL-terminated string and `out`
/// writable.
#[no_mangle]
pub unsafe extern "C" fn hb_evaluate(policy: *const HbPolicy, task: *const c_char, episodes: u32, seed: u64, out: *mut HbEvalResult) -> HbStatus {
    guard(|| {
        let p = ref_arg(policy, "policy")?;
        let out = mut_arg(out, "out")?;
        let task = task_arg(str_arg(task, "task")?)?;
        if episodes == 0 {
            return Err(fail(HbStatus::InvalidArgument, "episodes must be positive"));
        }
        let e = evaluate_policy(&p.bundle, task, episodes as usize, seed, None)?;
        *out = HbEvalResult {
            episodes,
            full: e.full,
            partial: e.partial,
            full_se: e.full_se,
            mean_length: e.mean_length,
        };
        Ok(())
    })
}

/// Checks an experiment configuration (JSON text) against the schema and
/// its cross-field rules.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hb_config_validate(json: *const c_char) -> HbStatus {
    guard(|| {
        ExperimentConfig::from_json_str(str_arg(json, "json")?)?;
        Ok(())
    })
}
