//! Autoregressive rollout: Karras noise schedule, Euler sampling and
//! warm-start canvas initialisation from the previous clean frame.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{BevFrame, CHANNELS};
use crate::mask::{conditioning_mask, EgoCentroid, MaskError, MaskField, MaskParams};
use crate::nn::{Denoiser, NnError, Real};
use crate::sim::Action;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("context must hold {expected} frames, got {got}")]
    Context { expected: usize, got: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WsEntry {
    /// Run the whole schedule from `σ_max` on the warm-start canvas.
    FullSchedule,
    /// Enter at `√(σ_off² + σ_ew²)` and continue with the schedule levels below it.
    #[default]
    MatchedSigma,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub warm_start: bool,
    pub sigma_off: f64,
    pub sigma_ew: f64,
    pub ws_entry: WsEntry,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 3,
            sigma_min: 0.002,
            sigma_max: 20.0,
            rho: 7.0,
            warm_start: false,
            sigma_off: 0.1,
            sigma_ew: 0.5,
            ws_entry: WsEntry::MatchedSigma,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.n_steps == 0 {
            return Err(SampleError::Config("n_steps must be at least 1".into()));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(SampleError::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if !(self.rho > 0.0) {
            return Err(SampleError::Config("rho must be positive".into()));
        }
        if !(self.sigma_off >= 0.0 && self.sigma_ew >= 0.0) {
            return Err(SampleError::Config("warm-start deviations must be non-negative".into()));
        }
        Ok(())
    }

    /// Noise levels for a warm-started pass, ending in 0.
    pub fn warm_schedule(&self) -> Vec<f64> {
        let full = karras_schedule(self);
        match self.ws_entry {
            WsEntry::FullSchedule => full,
            WsEntry::MatchedSigma => {
                let entry = self.sigma_off.hypot(self.sigma_ew);
                if entry == 0.0 {
                    return vec![0.0];
                }
                let mut s = vec![entry];
                s.extend(full.into_iter().filter(|v| *v < entry));
                s
            }
        }
    }
}

/// `[σ_0, …, σ_{N−1}, 0]` with `ρ`-warped spacing between `σ_max` and `σ_min`.
pub fn karras_schedule(cfg: &SamplerConfig) -> Vec<f64> {
    let n = cfg.n_steps;
    let mut out = Vec::with_capacity(n + 1);
    if n == 1 {
        out.push(cfg.sigma_max);
    } else {
        let a = cfg.sigma_max.powf(1.0 / cfg.rho);
        let b = cfg.sigma_min.powf(1.0 / cfg.rho);
        for k in 0..n {
            out.push(if k == 0 {
                cfg.sigma_max
            } else if k == n - 1 {
                cfg.sigma_min
            } else {
                (a + k as f64 / (n - 1) as f64 * (b - a)).powf(cfg.rho)
            });
        }
    }
    out.push(0.0);
    out
}

/// Previous clean frame plus one `N(0, σ_off²)` offset per channel and
/// element-wise `N(0, σ_ew²)` noise. No clamping.
pub fn warm_start_init(prev: &BevFrame, sigma_off: f64, sigma_ew: f64, rng: &mut impl Rng) -> BevFrame {
    let mut out = prev.clone();
    let n = prev.plane_len();
    for c in 0..CHANNELS {
        let z: f64 = rng.sample(StandardNormal);
        let delta = (sigma_off * z) as f32;
        for v in &mut out.data[c * n..(c + 1) * n] {
            let e: f64 = rng.sample(StandardNormal);
            *v += delta + (sigma_ew * e) as f32;
        }
    }
    out
}

/// Euler integration of the probability-flow ODE over `sigmas` (last entry
/// 0). Returns the state after every step.
pub fn euler_trajectory<T: Real, E>(
    x0: Vec<T>,
    sigmas: &[f64],
    mut denoise: impl FnMut(&[T], f64) -> Result<Vec<T>, E>,
) -> Result<Vec<Vec<T>>, E> {
    let mut x = x0;
    let mut out = Vec::with_capacity(sigmas.len().saturating_sub(1));
    for k in 0..sigmas.len().saturating_sub(1) {
        let (s, s_next) = (sigmas[k], sigmas[k + 1]);
        let d = denoise(&x, s)?;
        let h = T::of((s_next - s) / s);
        for (xi, di) in x.iter_mut().zip(&d) {
            let slope = *xi - *di;
            *xi += h * slope;
        }
        out.push(x.clone());
    }
    Ok(out)
}

/// Anything that can play the role of `D_θ` at sampling time.
pub trait FrameDenoiser {
    fn history_len(&self) -> usize;
    fn mask_channels(&self) -> usize;
    fn denoise(
        &self,
        x_noisy: &BevFrame,
        sigma: f64,
        context: &[BevFrame],
        actions: &[Action],
        mask: Option<&MaskField>,
    ) -> Result<BevFrame, NnError>;
}

impl FrameDenoiser for Denoiser {
    fn history_len(&self) -> usize {
        self.config.history_len
    }

    fn mask_channels(&self) -> usize {
        self.config.mask_channels
    }

    fn denoise(
        &self,
        x_noisy: &BevFrame,
        sigma: f64,
        context: &[BevFrame],
        actions: &[Action],
        mask: Option<&MaskField>,
    ) -> Result<BevFrame, NnError> {
        Denoiser::denoise(self, x_noisy, sigma, context, actions, mask)
    }
}

/// Generates the frame following `context` under `actions` (the newest action
/// last). `warm` is the previous clean frame when warm start applies.
#[allow(clippy::too_many_arguments)]
pub fn generate_frame<M: FrameDenoiser + ?Sized>(
    model: &M,
    context: &[BevFrame],
    actions: &[Action],
    mask: Option<&MaskField>,
    warm: Option<&BevFrame>,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<BevFrame, SampleError> {
    cfg.validate()?;
    let l = model.history_len();
    if context.len() != l || l == 0 {
        return Err(SampleError::Context {
            expected: l,
            got: context.len(),
        });
    }
    let (h, w) = (context[0].h, context[0].w);
    let (canvas, sigmas) = match warm {
        Some(prev) if cfg.warm_start => (
            warm_start_init(prev, cfg.sigma_off, cfg.sigma_ew, rng),
            cfg.warm_schedule(),
        ),
        _ => {
            let sched = karras_schedule(cfg);
            let s0 = sched[0];
            let data = (0..CHANNELS * h * w)
                .map(|_| (s0 * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            (BevFrame { h, w, data }, sched)
        }
    };
    let traj = euler_trajectory(canvas.data, &sigmas, |x, s| {
        let xf = BevFrame { h, w, data: x.to_vec() };
        model.denoise(&xf, s, context, actions, mask).map(|f| f.data)
    })?;
    let data = traj.into_iter().last().unwrap_or_default();
    let mut out = if data.is_empty() {
        warm.cloned().unwrap_or_else(|| BevFrame::zeros(h, w))
    } else {
        BevFrame { h, w, data }
    };
    out.clamp_unit();
    Ok(out)
}

/// State of one autoregressive rollout.
#[derive(Debug, Clone)]
pub struct RolloutState {
    pub context: VecDeque<BevFrame>,
    /// `L` slots; the oldest is dropped when a new action arrives.
    pub actions: VecDeque<Action>,
    pub last_clean: Option<BevFrame>,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub centroid: Option<EgoCentroid>,
}

impl RolloutState {
    /// `prior_actions` are the `L − 1` actions taken at all but the newest
    /// context frame, oldest first.
    pub fn new(context: Vec<BevFrame>, prior_actions: &[Action], seed: u64) -> Result<Self, SampleError> {
        let l = context.len();
        if l == 0 {
            return Err(SampleError::Context { expected: 1, got: 0 });
        }
        if prior_actions.len() + 1 != l {
            return Err(SampleError::Config(format!(
                "need {} prior actions for {l} context frames, got {}",
                l - 1,
                prior_actions.len()
            )));
        }
        let mut actions = VecDeque::with_capacity(l);
        actions.push_back(Action::Idle);
        actions.extend(prior_actions.iter().copied());
        Ok(Self {
            context: context.into(),
            actions,
            last_clean: None,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            centroid: None,
        })
    }

    pub fn newest(&self) -> &BevFrame {
        self.context.back().expect("context is never empty")
    }
}

/// One rollout step: conditions on the context, the history and `action`,
/// then advances the ring buffer with the generated frame.
pub fn denoise_next_frame<M: FrameDenoiser + ?Sized>(
    state: &mut RolloutState,
    action: Action,
    model: &M,
    mask_params: &MaskParams,
    cfg: &SamplerConfig,
) -> Result<BevFrame, SampleError> {
    let l = model.history_len();
    if state.context.len() != l {
        return Err(SampleError::Context {
            expected: l,
            got: state.context.len(),
        });
    }
    let mask = if model.mask_channels() > 0 {
        let (m, c) = conditioning_mask(state.newest(), mask_params, state.centroid)?;
        state.centroid = c;
        m
    } else {
        None
    };
    let mut actions = state.actions.clone();
    actions.pop_front();
    actions.push_back(action);
    let ctx: Vec<BevFrame> = state.context.iter().cloned().collect();
    let acts: Vec<Action> = actions.iter().copied().collect();
    let warm = (state.step > 0).then_some(()).and(state.last_clean.as_ref());
    let frame = generate_frame(model, &ctx, &acts, mask.as_ref(), warm, cfg, &mut state.rng)?;
    state.actions = actions;
    state.context.pop_front();
    state.context.push_back(frame.clone());
    state.last_clean = Some(frame.clone());
    state.step += 1;
    Ok(frame)
}

/// Generates one frame per action.
pub fn rollout<M: FrameDenoiser + ?Sized>(
    state: &mut RolloutState,
    actions: &[Action],
    model: &M,
    mask_params: &MaskParams,
    cfg: &SamplerConfig,
) -> Result<Vec<BevFrame>, SampleError> {
    actions
        .iter()
        .map(|a| denoise_next_frame(state, *a, model, mask_params, cfg))
        .collect()
}
