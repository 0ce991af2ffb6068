//! Denoiser training: segment sampling, noise-level sampling, corruption,
//! MSE loss and Adam updates, with checkpoint/resume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::{Dataset, Episode};
use crate::frame::{BevFrame, CHANNELS};
use crate::mask::{conditioning_mask, MaskError, MaskField, MaskMode, MaskParams};
use crate::nn::{Denoiser, DenoiserConfig, DenoiserInput, EdmParams, Graph, NnError, Tensor};
use crate::sim::Action;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no episode has the {needed} frames a training window needs")]
    NoWindow { needed: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (sigmas {sigmas:?})")]
    NonFinite { step: usize, sigmas: Vec<f64> },
    #[error("i/o failure at step {step}; resume from {resume:?}: {source}")]
    Io {
        step: usize,
        resume: Option<PathBuf>,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// `None` disables the shadow copy.
    pub ema_decay: Option<f64>,
    pub mask: MaskParams,
    pub edm: EdmParams,
    pub model: DenoiserConfig,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            steps: 1000,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: Some(0.999),
            mask: MaskParams::default(),
            edm: EdmParams::default(),
            model: DenoiserConfig::default(),
            seed: 0,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Model config with the mask channel following the mask mode.
    pub fn model_config(&self) -> DenoiserConfig {
        DenoiserConfig {
            mask_channels: self.mask.mode.channels(),
            ..self.model
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrainError::Config("adam betas must lie in [0, 1)".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(TrainError::Config("ema_decay must lie in [0, 1]".into()));
            }
        }
        self.mask.validate()?;
        self.edm.validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}

/// A training window: `L` context frames, their actions and the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub episode: usize,
    /// Index of the newest context frame.
    pub t: usize,
    pub context: Vec<BevFrame>,
    pub actions: Vec<Action>,
    pub target: BevFrame,
}

fn window_count(ep: &Episode, l: usize) -> usize {
    ep.len().saturating_sub(l)
}

/// Draws a window uniformly over all valid windows of all episodes.
pub fn sample_segment(episodes: &[Episode], l: usize, rng: &mut impl Rng) -> Result<Segment, TrainError> {
    let (episode, t) = sample_window(episodes, l, rng)?;
    let ep = &episodes[episode];
    Ok(Segment {
        episode,
        t,
        context: ep.frames[t + 1 - l..=t].to_vec(),
        actions: ep.actions[t + 1 - l..=t].to_vec(),
        target: ep.frames[t + 1].clone(),
    })
}

fn sample_window(episodes: &[Episode], l: usize, rng: &mut impl Rng) -> Result<(usize, usize), TrainError> {
    let total: usize = episodes.iter().map(|e| window_count(e, l)).sum();
    if total == 0 || l == 0 {
        return Err(TrainError::NoWindow { needed: l + 1 });
    }
    let mut k = rng.random_range(0..total);
    for (i, ep) in episodes.iter().enumerate() {
        let n = window_count(ep, l);
        if k < n {
            return Ok((i, k + l - 1));
        }
        k -= n;
    }
    unreachable!("k < total")
}

/// `σ = exp(p_mean + p_std · z)`, `z ~ N(0, 1)`.
pub fn sample_noise_level(edm: &EdmParams, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (edm.p_mean + edm.p_std * z).exp()
}

/// Batch-level RNG for `step`: one ChaCha stream per step, so the data drawn
/// at a step never depends on what happened before it.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub input: DenoiserInput<f32>,
    /// Clean targets, `(B, 3, H, W)`.
    pub targets: Tensor<f32>,
    /// `(episode, t)` of every sample.
    pub windows: Vec<(usize, usize)>,
}

/// Conditioning masks computed once per frame from each frame itself.
pub struct MaskCache {
    masks: Vec<Vec<Option<MaskField>>>,
}

impl MaskCache {
    pub fn build(episodes: &[Episode], params: &MaskParams) -> Result<Self, TrainError> {
        let masks = episodes
            .iter()
            .map(|ep| {
                ep.frames
                    .iter()
                    .map(|f| conditioning_mask(f, params, None).map(|(m, _)| m))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { masks })
    }

    pub fn get(&self, episode: usize, t: usize) -> Option<&MaskField> {
        self.masks[episode][t].as_ref()
    }
}

/// Assembles the batch for `step`, including the corrupted targets.
pub fn make_batch(
    episodes: &[Episode],
    masks: &MaskCache,
    cfg: &TrainConfig,
    step: usize,
) -> Result<TrainBatch, TrainError> {
    let mut rng = step_rng(cfg.seed, step);
    let l = cfg.model.history_len;
    let b = cfg.batch_size;
    let (h, w) = {
        let f = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or(TrainError::NoWindow { needed: l + 1 })?;
        (f.frames[0].h, f.frames[0].w)
    };
    let plane = CHANNELS * h * w;
    let with_mask = cfg.mask.mode != MaskMode::None;
    let mut x_noisy = Vec::with_capacity(b * plane);
    let mut targets = Vec::with_capacity(b * plane);
    let mut context = Vec::with_capacity(b * l * plane);
    let mut mask = Vec::with_capacity(if with_mask { b * h * w } else { 0 });
    let mut actions = Vec::with_capacity(b * l);
    let mut sigmas = Vec::with_capacity(b);
    let mut windows = Vec::with_capacity(b);
    for _ in 0..b {
        let (ei, t) = sample_window(episodes, l, &mut rng)?;
        let ep = &episodes[ei];
        for f in &ep.frames[t + 1 - l..=t] {
            context.extend_from_slice(&f.data);
        }
        actions.extend(ep.actions[t + 1 - l..=t].iter().map(|a| a.index()));
        if with_mask {
            let m = masks.get(ei, t).ok_or(TrainError::Config("mask cache is empty".into()))?;
            mask.extend_from_slice(&m.values);
        }
        let sigma = sample_noise_level(&cfg.edm, &mut rng);
        let target = &ep.frames[t + 1].data;
        for v in target {
            let z: f32 = rng.sample(StandardNormal);
            x_noisy.push(*v + sigma as f32 * z);
        }
        targets.extend_from_slice(target);
        sigmas.push(sigma);
        windows.push((ei, t));
    }
    Ok(TrainBatch {
        input: DenoiserInput {
            x_noisy: Tensor::from_vec(&[b, CHANNELS, h, w], x_noisy)?,
            context: Tensor::from_vec(&[b, CHANNELS * l, h, w], context)?,
            mask: if with_mask {
                Some(Tensor::from_vec(&[b, 1, h, w], mask)?)
            } else {
                None
            },
            actions,
            sigmas,
        },
        targets: Tensor::from_vec(&[b, CHANNELS, h, w], targets)?,
        windows,
    })
}

/// Adam moments and the optional EMA shadow.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub step: usize,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub ema: Option<Vec<Tensor<f32>>>,
    pub loss_ema: Option<f64>,
}

impl OptState {
    pub fn new(model: &Denoiser, ema: bool) -> Self {
        let zeros: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| Tensor::zeros(&t.shape)).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            ema: ema.then(|| model.params.iter().map(|(_, t)| t.clone()).collect()),
            loss_ema: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    /// `x̂⁰` for the batch before the update.
    pub prediction: Tensor<f32>,
}

/// One optimisation step on `batch`.
pub fn training_step(
    model: &mut Denoiser,
    batch: &TrainBatch,
    opt: &mut OptState,
    cfg: &TrainConfig,
) -> Result<StepOutput, TrainError> {
    let mut g = Graph::<f32>::new();
    let vars = model.bind(&mut g, true);
    let pred = model.forward(&mut g, &vars, &batch.input)?;
    let loss_var = g.mse(pred, batch.targets.clone())?;
    let loss = g.value(loss_var).data[0] as f64;
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            step: opt.step,
            sigmas: batch.input.sigmas.clone(),
        });
    }
    let mut grads = g.backward(loss_var);
    let prediction = g.value(pred).clone();

    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let lr = cfg.learning_rate as f32;
    let eps = cfg.adam_eps as f32;
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    for (i, (_, p)) in model.params.iter_mut().enumerate() {
        let Some(gr) = grads.take(vars[i]) else { continue };
        let (m, v) = (&mut opt.m[i].data, &mut opt.v[i].data);
        for j in 0..p.data.len() {
            let gj = gr.data[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p.data[j] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    if let (Some(ema), Some(d)) = (opt.ema.as_mut(), cfg.ema_decay) {
        let d = d as f32;
        for (e, (_, p)) in ema.iter_mut().zip(&model.params) {
            for (ev, pv) in e.data.iter_mut().zip(&p.data) {
                *ev = d * *ev + (1.0 - d) * *pv;
            }
        }
    }
    opt.loss_ema = Some(match opt.loss_ema {
        None => loss,
        Some(prev) => 0.99 * prev + 0.01 * loss,
    });
    Ok(StepOutput { loss, prediction })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss: f64,
    pub ema_loss: f64,
    pub wall_ms: u64,
}

/// Model, optimiser state and progress, serialisable for resume.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub opt: OptState,
    pub config: TrainConfig,
}

const CKPT_MAGIC: &[u8; 6] = b"PIWMCK";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| TrainError::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn blob(&mut self) -> Result<&'a [u8], TrainError> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

fn shaped_like(model: &Denoiser, tensors: &[Tensor<f32>]) -> Denoiser {
    Denoiser {
        config: model.config,
        sigma_data: model.sigma_data,
        params: model
            .params
            .iter()
            .zip(tensors)
            .map(|((n, _), t)| (n.clone(), t.clone()))
            .collect(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CKPT_MAGIC.to_vec();
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        let blob = |out: &mut Vec<u8>, b: &[u8]| {
            out.extend_from_slice(&(b.len() as u64).to_le_bytes());
            out.extend_from_slice(b);
        };
        blob(&mut out, &cfg);
        out.extend_from_slice(&(self.opt.step as u64).to_le_bytes());
        out.extend_from_slice(&self.opt.loss_ema.unwrap_or(f64::NAN).to_le_bytes());
        blob(&mut out, &self.model.to_bytes());
        blob(&mut out, &shaped_like(&self.model, &self.opt.m).to_bytes());
        blob(&mut out, &shaped_like(&self.model, &self.opt.v).to_bytes());
        match &self.opt.ema {
            Some(e) => blob(&mut out, &shaped_like(&self.model, e).to_bytes()),
            None => blob(&mut out, &[]),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        if bytes.len() < 6 || &bytes[..6] != CKPT_MAGIC {
            return Err(TrainError::Checkpoint("bad magic".into()));
        }
        let mut c = Cursor { bytes, pos: 6 };
        let config: TrainConfig =
            serde_json::from_slice(c.blob()?).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let step = c.u64()? as usize;
        let le = f64::from_bits(c.u64()?);
        let model = Denoiser::from_bytes(c.blob()?)?;
        let tensors = |b: &[u8]| -> Result<Vec<Tensor<f32>>, TrainError> {
            Ok(Denoiser::from_bytes(b)?.params.into_iter().map(|(_, t)| t).collect())
        };
        let m = tensors(c.blob()?)?;
        let v = tensors(c.blob()?)?;
        let e = c.blob()?;
        let ema = if e.is_empty() { None } else { Some(tensors(e)?) };
        if c.pos != bytes.len() {
            return Err(TrainError::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            model,
            opt: OptState {
                step,
                m,
                v,
                ema,
                loss_ema: (!le.is_nan()).then_some(le),
            },
            config,
        })
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|source| TrainError::Io {
            step: 0,
            resume: None,
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// The weights to ship: the EMA shadow when present.
    pub fn export(&self) -> Denoiser {
        match &self.opt.ema {
            Some(e) => shaped_like(&self.model, e),
            None => self.model.clone(),
        }
    }
}

/// Output locations derived from the model path.
#[derive(Debug, Clone)]
pub struct TrainPaths {
    pub model: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

impl TrainPaths {
    pub fn for_model(model: &Path) -> Self {
        let name = model.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Self {
            model: model.to_path_buf(),
            checkpoint: model.with_file_name(format!("{name}.ckpt")),
            metrics: model.with_file_name(format!("{name}.metrics.jsonl")),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Runs the fixed-step training loop. With `resume`, continues from the
/// checkpoint and appends to the metrics log; the result is identical to an
/// uninterrupted run with the same config.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    paths: &TrainPaths,
    resume: Option<&Checkpoint>,
    mut on_step: impl FnMut(&MetricsRecord),
) -> Result<Checkpoint, TrainError> {
    cfg.validate()?;
    let l = cfg.model.history_len;
    if !dataset.episodes.iter().any(|e| window_count(e, l) > 0) {
        return Err(TrainError::NoWindow { needed: l + 1 });
    }
    let mut ck = match resume {
        Some(c) => {
            if c.config.model_config() != cfg.model_config() || c.config.seed != cfg.seed {
                return Err(TrainError::Checkpoint("checkpoint was made with a different config".into()));
            }
            c.clone()
        }
        None => {
            let model = Denoiser::new(cfg.model_config(), cfg.edm.sigma_data, cfg.seed)?;
            let opt = OptState::new(&model, cfg.ema_decay.is_some());
            Checkpoint {
                model,
                opt,
                config: cfg.clone(),
            }
        }
    };
    ck.config = cfg.clone();
    let masks = if cfg.mask.mode == MaskMode::None {
        MaskCache { masks: vec![] }
    } else {
        MaskCache::build(&dataset.episodes, &cfg.mask)?
    };

    let io = |step: usize, resume: Option<PathBuf>| move |source| TrainError::Io { step, resume, source };
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&paths.metrics)
        .map_err(io(ck.opt.step, None))?;
    let mut last_ckpt: Option<PathBuf> = resume.map(|_| paths.checkpoint.clone());
    let start = Instant::now();

    while ck.opt.step < cfg.steps {
        let step = ck.opt.step;
        let batch = make_batch(&dataset.episodes, &masks, cfg, step)?;
        let out = training_step(&mut ck.model, &batch, &mut ck.opt, cfg)?;
        let rec = MetricsRecord {
            step: ck.opt.step,
            loss: out.loss,
            ema_loss: ck.opt.loss_ema.unwrap_or(out.loss),
            wall_ms: start.elapsed().as_millis() as u64,
        };
        let line = serde_json::to_string(&rec).expect("record serialises");
        writeln!(metrics, "{line}").map_err(io(step, last_ckpt.clone()))?;
        on_step(&rec);
        if cfg.checkpoint_every > 0 && ck.opt.step % cfg.checkpoint_every == 0 && ck.opt.step < cfg.steps {
            write_atomic(&paths.checkpoint, &ck.to_bytes()).map_err(io(step, last_ckpt.clone()))?;
            last_ckpt = Some(paths.checkpoint.clone());
        }
    }
    metrics.flush().map_err(io(ck.opt.step, last_ckpt.clone()))?;
    write_atomic(&paths.checkpoint, &ck.to_bytes()).map_err(io(ck.opt.step, last_ckpt.clone()))?;
    ck.export()
        .save(&paths.model)
        .map_err(|e| match e {
            NnError::Io(source) => TrainError::Io {
                step: ck.opt.step,
                resume: Some(paths.checkpoint.clone()),
                source,
            },
            other => other.into(),
        })?;
    Ok(ck)
}

/// Reads a metrics JSONL file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let text = fs::read_to_string(path).map_err(|source| TrainError::Io {
        step: 0,
        resume: None,
        source,
    })?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| TrainError::Checkpoint(format!("metrics line: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collect::{run_episode, Policy};
    use crate::sim::SimConfig;

    fn episodes(n: usize, len: usize) -> Vec<Episode> {
        let cfg = SimConfig::default();
        (0..n)
            .map(|i| run_episode(&cfg, &Policy::Random, len, 100 + i as u64).unwrap())
            .filter(|e| e.len() == len)
            .collect()
    }

    #[test]
    fn unique_window_and_action_alignment() {
        let eps = episodes(1, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let s = sample_segment(&eps, 4, &mut rng).unwrap();
            assert_eq!(s.t, 3);
            assert_eq!(s.target, eps[0].frames[4]);
            assert_eq!(s.actions[3], eps[0].actions[3]);
            assert_eq!(s.context[0], eps[0].frames[0]);
        }
        assert!(matches!(
            sample_segment(&eps, 5, &mut rng),
            Err(TrainError::NoWindow { needed: 6 })
        ));
    }

    #[test]
    fn noise_level_degenerate_std() {
        let edm = EdmParams {
            p_std: 0.0,
            ..EdmParams::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_noise_level(&edm, &mut rng), (-0.4f64).exp());
        }
    }

    #[test]
    fn ema_equals_params_when_decay_is_zero() {
        let eps = episodes(2, 8);
        let cfg = TrainConfig {
            batch_size: 2,
            ema_decay: Some(0.0),
            model: DenoiserConfig {
                base_width: 4,
                embed_dim: 8,
                groups: 2,
                ..DenoiserConfig::default()
            },
            ..TrainConfig::default()
        };
        let masks = MaskCache::build(&eps, &cfg.mask).unwrap();
        let mut model = Denoiser::new(cfg.model_config(), 0.5, 0).unwrap();
        let mut opt = OptState::new(&model, true);
        for step in 0..3 {
            let b = make_batch(&eps, &masks, &cfg, step).unwrap();
            training_step(&mut model, &b, &mut opt, &cfg).unwrap();
        }
        for (e, (_, p)) in opt.ema.as_ref().unwrap().iter().zip(&model.params) {
            assert_eq!(e, p);
        }
    }

    #[test]
    fn batch_is_step_indexed() {
        let eps = episodes(2, 10);
        let cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let masks = MaskCache::build(&eps, &cfg.mask).unwrap();
        let a = make_batch(&eps, &masks, &cfg, 7).unwrap();
        let _ = make_batch(&eps, &masks, &cfg, 3).unwrap();
        let b = make_batch(&eps, &masks, &cfg, 7).unwrap();
        assert_eq!(a.input.x_noisy, b.input.x_noisy);
        assert_eq!(a.windows, b.windows);
        assert_eq!(a.input.mask.as_ref().unwrap().shape, [3, 1, 32, 64]);
    }
}
