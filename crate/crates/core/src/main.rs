use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use piwm::bench::{run_bench, BenchConfig};
use piwm::collect::{collect_with_progress, Dataset, MctsConfig};
use piwm::eval::{evaluate, psnr_teacher_forced, start_from, EvalParams, LearnedModel, SuiteConfig, Suites};
use piwm::mask::{conditioning_mask, MaskMode, MaskParams};
use piwm::nn::Denoiser;
use piwm::sample::{denoise_next_frame, FrameDenoiser, RolloutState, SamplerConfig};
use piwm::service::{serve, AppState};
use piwm::sim::{self, Action, SimConfig};
use piwm::train::{train, TrainConfig, TrainPaths};
use piwm::BevFrame;

#[derive(Parser)]
#[command(name = "piwm", version, about = "Physics-informed BEV world model")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct SamplerArgs {
    /// Start each frame from the previous one instead of pure noise.
    #[arg(long)]
    warm_start: bool,
    #[arg(long, default_value_t = 0.1)]
    sigma_off: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_ew: f64,
    #[arg(long, default_value_t = 3)]
    sampler_steps: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            warm_start: self.warm_start,
            sigma_off: self.sigma_off,
            sigma_ew: self.sigma_ew,
            n_steps: self.sampler_steps,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Drive the simulator with MCTS and write an episode dataset.
    Collect {
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mcts_sims: Option<usize>,
    },
    /// Train a denoiser on a collected dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "soft")]
        mask: MaskMode,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        lr: Option<f64>,
        /// Full training config as JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from `<out>.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Roll a trained model out from a simulator start.
    Rollout {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 40)]
        frames: usize,
        /// JSON list of action codes or names, or `random`.
        #[arg(long, default_value = "random")]
        actions: String,
        #[arg(long)]
        mask: Option<MaskMode>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a model on the consistency suites.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset for teacher-forced PSNR.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "default")]
        suite: String,
        #[arg(long)]
        mask: Option<MaskMode>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 200)]
        psnr_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        report: PathBuf,
    },
    /// Measure per-frame inference latency.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        trials: usize,
        #[arg(long, default_value_t = 1000)]
        frames: usize,
        #[arg(long, default_value_t = 5)]
        discard: usize,
        #[arg(long)]
        mask: Option<MaskMode>,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve interactive sessions over HTTP and WebSocket.
    Serve {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Write conditioning masks for a directory of PNG frames.
    Mask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value = "soft")]
        mode: MaskMode,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn mask_for(model: &Denoiser, mode: Option<MaskMode>) -> Result<MaskParams> {
    let mode = mode.unwrap_or(if model.mask_channels() > 0 { MaskMode::Soft } else { MaskMode::None });
    if mode.channels() != model.mask_channels() {
        bail!(
            "mask mode {} does not fit a model with {} mask channel(s)",
            mode.as_str(),
            model.mask_channels()
        );
    }
    Ok(MaskParams::with_mode(mode))
}

fn parse_actions(spec: &str, n: usize, seed: u64) -> Result<Vec<Action>> {
    if spec == "random" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
        return Ok((0..n).map(|_| Action::ALL[rng.random_range(0..Action::COUNT)]).collect());
    }
    let raw: Vec<serde_json::Value> = read_json(Path::new(spec))?;
    let acts = raw
        .into_iter()
        .map(|v| match v.as_u64() {
            Some(c) => u8::try_from(c)
                .ok()
                .and_then(|c| Action::from_code(c).ok())
                .with_context(|| format!("bad action code {c}")),
            None => serde_json::from_value(v).context("bad action"),
        })
        .collect::<Result<Vec<_>>>()?;
    if acts.len() < n {
        bail!("script has {} actions, {n} frames requested", acts.len());
    }
    Ok(acts[..n].to_vec())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let sim_cfg = SimConfig::default();
    match cli.cmd {
        Cmd::Collect {
            episodes,
            steps,
            seed,
            out,
            mcts_sims,
        } => {
            let mut mcts = MctsConfig::default();
            if let Some(k) = mcts_sims {
                mcts.simulations_per_move = k;
            }
            let m = collect_with_progress(episodes, steps, &sim_cfg, &mcts, seed, &out, |i, ep| {
                eprintln!("episode {}/{episodes}: {} frames{}", i + 1, ep.len(), if ep.collided_at.is_some() { " (collision)" } else { "" });
            })?;
            println!("wrote {} episodes to {}", m.episodes.len(), out.display());
        }
        Cmd::Train {
            data,
            mask,
            steps,
            batch,
            out,
            seed,
            lr,
            config,
            resume,
        } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => read_json(&p)?,
                None => TrainConfig::default(),
            };
            cfg.mask = MaskParams { mode: mask, ..cfg.mask };
            cfg.steps = steps;
            cfg.batch_size = batch;
            cfg.seed = seed;
            if let Some(lr) = lr {
                cfg.learning_rate = lr;
            }
            let ds = Dataset::load(&data)?;
            let paths = TrainPaths::for_model(&out);
            let ck = if resume {
                Some(piwm::train::Checkpoint::load(&paths.checkpoint)?)
            } else {
                None
            };
            let every = (steps / 20).max(1);
            train(&ds, &cfg, &paths, ck.as_ref(), |m| {
                if m.step % every == 0 || m.step == steps {
                    eprintln!("step {} loss {:.5} ema {:.5}", m.step, m.loss, m.ema_loss);
                }
            })?;
            println!("model {} metrics {}", paths.model.display(), paths.metrics.display());
        }
        Cmd::Rollout {
            model,
            frames,
            actions,
            mask,
            sampler,
            seed,
            out,
        } => {
            let net = Denoiser::load(&model)?;
            let mask = mask_for(&net, mask)?;
            let scfg = sampler.config();
            let acts = parse_actions(&actions, frames, seed)?;
            let start = start_from(sim::spawn(&sim_cfg, seed)?, net.history_len(), seed)?;
            let mut st = RolloutState::new(start.context.clone(), &start.prior_actions, seed)?;
            fs::create_dir_all(&out)?;
            let mut files = Vec::with_capacity(frames + 1);
            let mut save = |i: usize, f: &BevFrame| -> Result<()> {
                let name = format!("{i:05}.png");
                fs::write(out.join(&name), f.to_png()?)?;
                files.push(name);
                Ok(())
            };
            save(0, st.newest())?;
            for (i, a) in acts.iter().enumerate() {
                let f = denoise_next_frame(&mut st, *a, &net, &mask, &scfg)?;
                save(i + 1, &f)?;
            }
            write_json(
                &out.join("trace.json"),
                &serde_json::json!({
                    "model": model,
                    "seed": seed,
                    "mask_mode": mask.mode,
                    "sampler": scfg,
                    "actions": acts.iter().map(|a| a.code()).collect::<Vec<_>>(),
                    "frames": files,
                }),
            )?;
            println!("wrote {} frames to {}", frames + 1, out.display());
        }
        Cmd::Eval {
            model,
            data,
            suite,
            mask,
            sampler,
            psnr_samples,
            seed,
            report,
        } => {
            let suite_cfg = match suite.as_str() {
                "default" => SuiteConfig::default(),
                "small" => SuiteConfig {
                    scenarios: 6,
                    kir_commands: 8,
                    ..SuiteConfig::default()
                },
                other => bail!("unknown suite {other:?} (expected default or small)"),
            };
            let net = Denoiser::load(&model)?;
            let mask = mask_for(&net, mask)?;
            let scfg = sampler.config();
            let p = EvalParams::default();
            let suites = Suites::build(&sim_cfg, net.history_len(), &suite_cfg, &p)?;
            let psnr = match data {
                Some(d) => Some(psnr_teacher_forced(&net, &Dataset::load(&d)?.episodes, psnr_samples, &mask, &scfg, seed)?),
                None => None,
            };
            let mut lm = LearnedModel::new(&net, mask, scfg, seed);
            let r = evaluate(&mut lm, &suites, &p, psnr.as_ref())?;
            write_json(&report, &r)?;
            println!(
                "IEC {:.1}  KIR {:.1}  TEC {:.1}  WO {:.1}{}",
                r.iec,
                r.kir,
                r.tec,
                r.wo,
                r.psnr_db.map(|v| format!("  PSNR {v:.2} dB")).unwrap_or_default()
            );
        }
        Cmd::Bench {
            model,
            trials,
            frames,
            discard,
            mask,
            sampler,
            seed,
            out,
        } => {
            let net = Denoiser::load(&model)?;
            let mask = mask_for(&net, mask)?;
            let cfg = BenchConfig {
                trials,
                frames_per_trial: frames,
                warmup_discard: discard,
                sampler: sampler.config(),
                seed,
            };
            let start = start_from(sim::spawn(&sim_cfg, seed)?, net.history_len(), seed)?;
            let mut lm = LearnedModel::new(&net, mask, cfg.sampler.clone(), seed);
            let r = run_bench(&mut lm, &start, &cfg)?;
            write_json(&out, &r)?;
            println!(
                "p95 latency {:.2} ms  p95 fps {:.1}  peak rss {}",
                r.p95_latency_ms,
                r.p95_fps,
                r.peak_rss_mib.map(|m| format!("{m:.1} MiB")).unwrap_or_else(|| "n/a".into())
            );
        }
        Cmd::Serve { model, port, host } => {
            if let Some(m) = &model {
                Denoiser::load(m).with_context(|| format!("loading {}", m.display()))?;
            }
            let addr: SocketAddr = format!("{host}:{port}").parse()?;
            let state = Arc::new(AppState::new(sim_cfg, model));
            let rt = tokio::runtime::Runtime::new()?;
            eprintln!("listening on http://{addr}");
            rt.block_on(serve(state, addr))?;
        }
        Cmd::Mask {
            input,
            mode,
            params,
            out,
        } => {
            let mut mp: MaskParams = match params {
                Some(p) => read_json(&p)?,
                None => MaskParams::default(),
            };
            mp.mode = mode;
            if mode == MaskMode::None {
                bail!("mask mode none produces no masks");
            }
            let mut names: Vec<PathBuf> = fs::read_dir(&input)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect();
            names.sort();
            fs::create_dir_all(&out)?;
            for p in &names {
                let f = BevFrame::from_png(&fs::read(p)?).with_context(|| format!("decoding {}", p.display()))?;
                let (m, _) = conditioning_mask(&f, &mp, None)?;
                let m = m.expect("hard and soft modes always produce a mask");
                fs::write(out.join(p.file_name().expect("listed files have names")), m.to_png()?)?;
            }
            println!("wrote {} masks to {}", names.len(), out.display());
        }
    }
    Ok(())
}
