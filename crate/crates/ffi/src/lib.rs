//! C ABI over `piwm`.
//!
//! Handles are opaque pointers created by `*_new`/`*_load` and released with
//! the matching `*_free`. Every fallible call returns a [`PiwmStatus`]; on
//! failure [`piwm_last_error`] describes the problem for the calling thread.
//! Frames cross the boundary as row-major RGB bytes (`h × w × 3`).

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use piwm::bench;
use piwm::eval::start_from;
use piwm::mask::{conditioning_mask, MaskMode, MaskParams};
use piwm::nn::{Denoiser, NnError};
use piwm::sample::{denoise_next_frame, FrameDenoiser, RolloutState, SamplerConfig};
use piwm::sim::{self, Action, SimConfig, SimError, SimWorld};
use piwm::BevFrame;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PiwmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Terminal = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

/// `mode` argument of [`piwm_mask`].
pub const PIWM_MASK_HARD: u32 = 0;
pub const PIWM_MASK_SOFT: u32 = 1;

/// Simulator world.
pub struct PiwmSim {
    world: SimWorld,
}

/// Loaded denoiser, shareable between rollouts.
pub struct PiwmModel {
    model: Arc<Denoiser>,
}

/// Autoregressive rollout bound to a model.
pub struct PiwmRollout {
    model: Arc<Denoiser>,
    state: RolloutState,
    mask: MaskParams,
    sampler: SamplerConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("nul bytes removed"));
}

struct Failure(PiwmStatus, String);

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let code = match e {
            SimError::Terminal { .. } => PiwmStatus::Terminal,
            _ => PiwmStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

impl From<NnError> for Failure {
    fn from(e: NnError) -> Self {
        let code = match e {
            NnError::Io(_) => PiwmStatus::Io,
            NnError::Format(_) | NnError::ConfigMismatch(_) => PiwmStatus::Format,
            _ => PiwmStatus::InvalidArgument,
        };
        Failure(code, e.to_string())
    }
}

macro_rules! failure_from {
    ($($t:ty => $code:expr),*) => {
        $(impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure($code, e.to_string())
            }
        })*
    };
}

failure_from!(
    piwm::sample::SampleError => PiwmStatus::Internal,
    piwm::mask::MaskError => PiwmStatus::InvalidArgument,
    piwm::frame::FrameError => PiwmStatus::InvalidArgument,
    piwm::eval::EvalError => PiwmStatus::Internal,
    bench::BenchError => PiwmStatus::InvalidArgument
);

fn fail(code: PiwmStatus, msg: impl Into<String>) -> Failure {
    Failure(code, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PiwmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PiwmStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            PiwmStatus::Internal
        }
    }
}

unsafe fn get<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(PiwmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn get_mut<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(PiwmStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, need: usize) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(PiwmStatus::NullPointer, "output buffer is null"));
    }
    if len < need {
        return Err(fail(PiwmStatus::BufferTooSmall, format!("buffer holds {len}, need {need}")));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

fn action(code: u8) -> Result<Action, Failure> {
    Ok(Action::from_code(code)?)
}

fn write_frame(f: &BevFrame, out: *mut u8, len: usize) -> Result<(), Failure> {
    let bytes = f.to_u8_hwc();
    unsafe { out_slice(out, len, bytes.len()) }?.copy_from_slice(&bytes);
    Ok(())
}

/// Message for the last failed call on this thread; empty if none. Valid
/// until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn piwm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn piwm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Frame size of the default simulator.
#[no_mangle]
pub unsafe extern "C" fn piwm_frame_dims(h: *mut u32, w: *mut u32, c: *mut u32) -> PiwmStatus {
    guard(|| {
        let cfg = SimConfig::default();
        *get_mut(h, "h")? = cfg.frame_h as u32;
        *get_mut(w, "w")? = cfg.frame_w as u32;
        *get_mut(c, "c")? = cfg.channels as u32;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_sim_new(seed: u64, out: *mut *mut PiwmSim) -> PiwmStatus {
    guard(|| {
        let slot = get_mut(out, "out")?;
        let world = sim::spawn(&SimConfig::default(), seed)?;
        *slot = Box::into_raw(Box::new(PiwmSim { world }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_sim_free(sim: *mut PiwmSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Advances one step. Returns `PIWM_STATUS_TERMINAL` once the ego has collided.
#[no_mangle]
pub unsafe extern "C" fn piwm_sim_step(sim: *mut PiwmSim, action_code: u8) -> PiwmStatus {
    guard(|| {
        let s = get_mut(sim, "sim")?;
        let a = action(action_code)?;
        s.world = sim::step(&s.world, a)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_sim_collided(sim: *const PiwmSim, out: *mut bool) -> PiwmStatus {
    guard(|| {
        *get_mut(out, "out")? = get(sim, "sim")?.world.collided;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_sim_render(sim: *const PiwmSim, out: *mut u8, len: usize) -> PiwmStatus {
    guard(|| write_frame(&sim::render_bev(&get(sim, "sim")?.world), out, len))
}

#[no_mangle]
pub unsafe extern "C" fn piwm_model_load(path: *const c_char, out: *mut *mut PiwmModel) -> PiwmStatus {
    guard(|| {
        let slot = get_mut(out, "out")?;
        if path.is_null() {
            return Err(fail(PiwmStatus::NullPointer, "path is null"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(PiwmStatus::InvalidArgument, "path is not UTF-8"))?;
        let model = Denoiser::load(Path::new(p)).map_err(|e| {
            let f = Failure::from(e);
            Failure(f.0, format!("{p}: {}", f.1))
        })?;
        *slot = Box::into_raw(Box::new(PiwmModel { model: Arc::new(model) }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_model_free(model: *mut PiwmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn piwm_model_info(model: *const PiwmModel, history_len: *mut u32, mask_channels: *mut u32, params: *mut u64) -> PiwmStatus {
    guard(|| {
        let m = &get(model, "model")?.model;
        *get_mut(history_len, "history_len")? = m.history_len() as u32;
        *get_mut(mask_channels, "mask_channels")? = m.mask_channels() as u32;
        *get_mut(params, "params")? = m.param_count() as u64;
        Ok(())
    })
}

/// Starts a rollout from the simulator seeded with `seed`, warmed up with
/// IDLE steps to fill the history. The model handle may be freed afterwards.
#[no_mangle]
pub unsafe extern "C" fn piwm_rollout_new(model: *const PiwmModel, seed: u64, warm_start: bool, out: *mut *mut PiwmRollout) -> PiwmStatus {
    guard(|| {
        let slot = get_mut(out, "out")?;
        let m = get(model, "model")?.model.clone();
        let start = start_from(sim::spawn(&SimConfig::default(), seed)?, m.history_len(), seed)?;
        let state = RolloutState::new(start.context, &start.prior_actions, seed)?;
        let mode = if m.mask_channels() > 0 { MaskMode::Soft } else { MaskMode::None };
        *slot = Box::into_raw(Box::new(PiwmRollout {
            model: m,
            state,
            mask: MaskParams::with_mode(mode),
            sampler: SamplerConfig {
                warm_start,
                ..SamplerConfig::default()
            },
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn piwm_rollout_free(rollout: *mut PiwmRollout) {
    if !rollout.is_null() {
        drop(Box::from_raw(rollout));
    }
}

/// Generates the next frame for `action_code` into `out` (RGB bytes).
#[no_mangle]
pub unsafe extern "C" fn piwm_rollout_step(rollout: *mut PiwmRollout, action_code: u8, out: *mut u8, len: usize) -> PiwmStatus {
    guard(|| {
        let r = get_mut(rollout, "rollout")?;
        let a = action(action_code)?;
        let f = denoise_next_frame(&mut r.state, a, r.model.as_ref(), &r.mask, &r.sampler)?;
        write_frame(&f, out, len)
    })
}

/// Conditioning mask of an RGB frame, `h × w` floats in `[0, 1]`.
#[no_mangle]
pub unsafe extern "C" fn piwm_mask(rgb: *const u8, h: u32, w: u32, mode: u32, out: *mut f32, len: usize) -> PiwmStatus {
    guard(|| {
        if rgb.is_null() {
            return Err(fail(PiwmStatus::NullPointer, "rgb is null"));
        }
        let mode = match mode {
            PIWM_MASK_HARD => MaskMode::Hard,
            PIWM_MASK_SOFT => MaskMode::Soft,
            m => return Err(fail(PiwmStatus::InvalidArgument, format!("unknown mask mode {m}"))),
        };
        let (h, w) = (h as usize, w as usize);
        let bytes = std::slice::from_raw_parts(rgb, h * w * 3);
        let frame = BevFrame::from_u8_hwc(h, w, bytes)?;
        let params = MaskParams {
            mode,
            target_h: h,
            target_w: w,
            ..MaskParams::default()
        };
        let (m, _) = conditioning_mask(&frame, &params, None)?;
        let m = m.ok_or_else(|| fail(PiwmStatus::Internal, "no mask produced"))?;
        out_slice(out, len, m.values.len())?.copy_from_slice(&m.values);
        Ok(())
    })
}

/// Nearest-rank percentile of `n` values.
#[no_mangle]
pub unsafe extern "C" fn piwm_percentile(values: *const f64, n: usize, p: f64, out: *mut f64) -> PiwmStatus {
    guard(|| {
        let slot = get_mut(out, "out")?;
        if values.is_null() && n > 0 {
            return Err(fail(PiwmStatus::NullPointer, "values is null"));
        }
        let v = if n == 0 { &[][..] } else { std::slice::from_raw_parts(values, n) };
        *slot = bench::percentile(v, p)?;
        Ok(())
    })
}
