//! Inference latency, throughput and memory harness.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{EvalError, ScenarioStart, WorldModel};
use crate::sample::SamplerConfig;
use crate::sim::Action;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("percentile of an empty series")]
    Empty,
    #[error("percentile rank {0} outside (0, 100]")]
    Rank(f64),
    #[error("invalid bench config: {0}")]
    Config(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Nearest-rank percentile: `sorted[⌈p/100·n⌉ − 1]`.
pub fn percentile(values: &[f64], p: f64) -> Result<f64, BenchError> {
    if values.is_empty() {
        return Err(BenchError::Empty);
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(BenchError::Rank(p));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    Ok(v[rank.clamp(1, v.len()) - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub trials: usize,
    pub frames_per_trial: usize,
    pub warmup_discard: usize,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            frames_per_trial: 1000,
            warmup_discard: 5,
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.trials == 0 {
            return Err(BenchError::Config("trials must be at least 1".into()));
        }
        if self.frames_per_trial <= self.warmup_discard {
            return Err(BenchError::Config(format!(
                "frames_per_trial ({}) must exceed warmup_discard ({})",
                self.frames_per_trial, self.warmup_discard
            )));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        self.trials * (self.frames_per_trial - self.warmup_discard)
    }

    /// The fixed action script shared by every trial.
    pub fn action_script(&self) -> Vec<Action> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.frames_per_trial)
            .map(|_| Action::ALL[rng.random_range(0..Action::COUNT)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInfo {
    pub os: String,
    pub arch: String,
    pub cpus: usize,
    pub cpu_model: Option<String>,
    pub timer: String,
    pub memory_counter: String,
}

impl HostInfo {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo").ok().and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        });
        Self {
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            cpus: std::thread::available_parallelism().map_or(1, |n| n.get()),
            cpu_model,
            timer: "monotonic wall clock".into(),
            memory_counter: "process peak resident set (VmHWM)".into(),
        }
    }
}

/// Peak resident set size of this process in MiB, where available.
pub fn peak_rss_mib() -> Option<f64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kib: f64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib / 1024.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSeries {
    /// Retained per-frame latencies, ms.
    pub latency_ms: Vec<f64>,
    pub peak_rss_mib: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub p95_fps: f64,
    pub p95_latency_ms: f64,
    pub peak_rss_mib: Option<f64>,
    pub retained: usize,
    pub trials: Vec<TrialSeries>,
    pub config: BenchConfig,
    pub host: HostInfo,
}

/// Times `model.step` per frame over `cfg.trials` runs from the same start.
/// p95 FPS is the 95th percentile of per-frame `1000 / latency`.
pub fn run_bench(model: &mut dyn WorldModel, start: &ScenarioStart, cfg: &BenchConfig) -> Result<BenchReport, BenchError> {
    cfg.validate()?;
    let script = cfg.action_script();
    let mut trials = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        model.start(start)?;
        let mut lat = Vec::with_capacity(cfg.frames_per_trial - cfg.warmup_discard);
        for (i, a) in script.iter().enumerate() {
            let t0 = Instant::now();
            let frame = model.step(*a)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            drop(frame);
            if i >= cfg.warmup_discard {
                lat.push(ms);
            }
        }
        trials.push(TrialSeries {
            latency_ms: lat,
            peak_rss_mib: peak_rss_mib(),
        });
    }
    let all: Vec<f64> = trials.iter().flat_map(|t| t.latency_ms.iter().copied()).collect();
    let fps: Vec<f64> = all.iter().map(|ms| 1000.0 / ms).collect();
    Ok(BenchReport {
        p95_fps: percentile(&fps, 95.0)?,
        p95_latency_ms: percentile(&all, 95.0)?,
        peak_rss_mib: trials.iter().filter_map(|t| t.peak_rss_mib).reduce(f64::max),
        retained: all.len(),
        trials,
        config: cfg.clone(),
        host: HostInfo::detect(),
    })
}
