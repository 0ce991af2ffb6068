//! Physical-consistency metrics over generated frame sequences.
//!
//! Vehicles are found as 4-connected color components and tracked with greedy
//! nearest-centroid matching. Existence proxies (IEC, TEC) count tracks that
//! vanish or appear away from the frame border; the kinematic proxy (KIR)
//! checks that commands move the scene the right way. Any [`WorldModel`] can be
//! evaluated, including the simulator itself.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::collect::{episode_seed, Episode};
use crate::frame::{BevFrame, CHANNELS};
use crate::mask::{classify_colors, MaskField, MaskParams};
use crate::sample::{generate_frame, FrameDenoiser, RolloutState, SampleError, SamplerConfig};
use crate::sim::{self, Action, SimConfig, SimError, SimWorld, VehicleState};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("could not build a valid {kind} scenario; seeds tried start at {seed}")]
    Scenario { kind: String, seed: u64 },
    #[error("score input {0} outside [0, 100]")]
    Range(f64),
    #[error("nothing to evaluate: {0}")]
    Empty(String),
    #[error("world model was stepped before start")]
    NotStarted,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalParams {
    /// Color thresholds used for classification.
    pub colors: MaskParams,
    pub min_area: usize,
    pub gate_px: f64,
    pub edge_margin_px: f64,
    /// Below this many opportunities a score is flagged low-confidence.
    pub min_opportunities: usize,
    pub kir_horizon: usize,
    pub kir_response_px: f64,
    /// Minimum change of mean per-frame drift, in px, for speed commands.
    pub kir_drift_margin: f64,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            colors: MaskParams::default(),
            min_area: 3,
            gate_px: 6.0,
            edge_margin_px: 5.0,
            min_opportunities: 20,
            kir_horizon: 8,
            kir_response_px: 2.0,
            kir_drift_margin: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjClass {
    Ego,
    Surr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    pub class: ObjClass,
    /// `(x, y)` = (column, row), pixel centres at integer coordinates.
    pub centroid: (f64, f64),
    pub area: usize,
    /// `(x0, y0, x1, y1)`, inclusive.
    pub bbox: (usize, usize, usize, usize),
}

fn components(mask: &MaskField, class: ObjClass, min_area: usize, out: &mut Vec<DetectedObject>) {
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if seen[start] || mask.values[start] < 0.5 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            sx += c;
            sy += r;
            n += 1;
            x0 = x0.min(c);
            x1 = x1.max(c);
            y0 = y0.min(r);
            y1 = y1.max(r);
            let mut visit = |j: usize| {
                if !seen[j] && mask.values[j] >= 0.5 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if n >= min_area {
            out.push(DetectedObject {
                class,
                centroid: (sx as f64 / n as f64, sy as f64 / n as f64),
                area: n,
                bbox: (x0, y0, x1, y1),
            });
        }
    }
}

/// 4-connected components of the ego and surrounding-vehicle color classes,
/// sorted by `(class, x)`.
pub fn detect_objects(frame: &BevFrame, p: &EvalParams) -> Vec<DetectedObject> {
    let (ego, surr) = classify_colors(frame, &p.colors);
    let mut out = Vec::new();
    components(&ego, ObjClass::Ego, p.min_area, &mut out);
    components(&surr, ObjClass::Surr, p.min_area, &mut out);
    out.sort_by(|a, b| a.class.cmp(&b.class).then(a.centroid.0.total_cmp(&b.centroid.0)));
    out
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

/// Greedy one-to-one matching of same-class objects by centroid distance
/// within `gate`. Returns `(index in prev, index in next)` pairs.
pub fn match_objects(prev: &[DetectedObject], next: &[DetectedObject], gate: f64) -> Vec<(usize, usize)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::new();
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in next.iter().enumerate() {
            let d = dist(a.centroid, b.centroid);
            if a.class == b.class && d <= gate {
                cand.push((d, i, j));
            }
        }
    }
    cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_n) = (vec![false; prev.len()], vec![false; next.len()]);
    let mut out = Vec::new();
    for (_, i, j) in cand {
        if !used_p[i] && !used_n[j] {
            used_p[i] = true;
            used_n[j] = true;
            out.push((i, j));
        }
    }
    out
}

fn interior(c: (f64, f64), h: usize, w: usize, margin: f64) -> bool {
    let d = c.0.min(c.1).min(w as f64 - 1.0 - c.0).min(h as f64 - 1.0 - c.1);
    d >= margin
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Vanish,
    Apparition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExistenceEvent {
    pub sequence: usize,
    pub frame: usize,
    pub kind: EventKind,
    pub class: ObjClass,
    pub centroid: (f64, f64),
}

/// Summed event counts; scores aggregate by summing before dividing.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExistenceCount {
    pub events: usize,
    pub opportunities: usize,
    pub log: Vec<ExistenceEvent>,
}

impl ExistenceCount {
    pub fn merge(&mut self, other: ExistenceCount) {
        self.events += other.events;
        self.opportunities += other.opportunities;
        self.log.extend(other.log);
    }
}

/// Counts vanish/apparition events along one frame sequence.
pub fn count_existence_events(frames: &[BevFrame], p: &EvalParams, sequence: usize) -> ExistenceCount {
    let mut out = ExistenceCount::default();
    let mut prev: Option<Vec<DetectedObject>> = None;
    for (t, f) in frames.iter().enumerate() {
        let objs = detect_objects(f, p);
        let inside = |o: &DetectedObject| interior(o.centroid, f.h, f.w, p.edge_margin_px);
        out.opportunities += objs.iter().filter(|o| inside(o)).count();
        if let Some(prev) = &prev {
            let m = match_objects(prev, &objs, p.gate_px);
            let mut hit_p = vec![false; prev.len()];
            let mut hit_n = vec![false; objs.len()];
            for (i, j) in m {
                hit_p[i] = true;
                hit_n[j] = true;
            }
            for (i, o) in prev.iter().enumerate() {
                if !hit_p[i] && interior(o.centroid, f.h, f.w, p.edge_margin_px) {
                    out.events += 1;
                    out.log.push(ExistenceEvent {
                        sequence,
                        frame: t,
                        kind: EventKind::Vanish,
                        class: o.class,
                        centroid: o.centroid,
                    });
                }
            }
            for (j, o) in objs.iter().enumerate() {
                if !hit_n[j] && inside(o) {
                    out.events += 1;
                    out.log.push(ExistenceEvent {
                        sequence,
                        frame: t,
                        kind: EventKind::Apparition,
                        class: o.class,
                        centroid: o.centroid,
                    });
                }
            }
        }
        prev = Some(objs);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyScore {
    pub score: f64,
    pub events: usize,
    pub opportunities: usize,
    pub low_confidence: bool,
    pub log: Vec<ExistenceEvent>,
}

pub fn existence_score(count: ExistenceCount, p: &EvalParams) -> ProxyScore {
    let score = if count.opportunities == 0 {
        100.0
    } else {
        (100.0 * (1.0 - count.events as f64 / count.opportunities as f64)).max(0.0)
    };
    ProxyScore {
        score,
        events: count.events,
        opportunities: count.opportunities,
        low_confidence: count.opportunities < p.min_opportunities,
        log: count.log,
    }
}

/// Existence consistency of one sequence (normally a rollout under IDLE).
pub fn tec_proxy(frames: &[BevFrame], p: &EvalParams) -> ProxyScore {
    existence_score(count_existence_events(frames, p, 0), p)
}

pub fn wo(iec: f64, kir: f64, tec: f64) -> Result<f64, EvalError> {
    for v in [iec, kir, tec] {
        if !(0.0..=100.0).contains(&v) {
            return Err(EvalError::Range(v));
        }
    }
    Ok(0.5 * iec + 0.25 * kir + 0.25 * tec)
}

/// `10 log10(1 / mse)`, capped at 99 dB.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        99.0
    } else {
        (10.0 * (1.0 / mse).log10()).min(99.0)
    }
}

// ---------------------------------------------------------------------------
// World models and scenarios

/// A scenario start: the simulator state at the newest context frame and what
/// a learned model needs to continue from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStart {
    pub seed: u64,
    pub world: SimWorld,
    /// `L` frames, oldest first; the last one is the current frame.
    pub context: Vec<BevFrame>,
    /// The `L − 1` actions taken between the context frames.
    pub prior_actions: Vec<Action>,
}

/// Anything that can be driven frame by frame.
pub trait WorldModel {
    fn start(&mut self, start: &ScenarioStart) -> Result<(), EvalError>;
    fn step(&mut self, action: Action) -> Result<BevFrame, EvalError>;
}

/// The simulator behind the world-model interface.
#[derive(Debug, Default)]
pub struct SimModel {
    world: Option<SimWorld>,
}

impl WorldModel for SimModel {
    fn start(&mut self, start: &ScenarioStart) -> Result<(), EvalError> {
        self.world = Some(start.world.clone());
        Ok(())
    }

    fn step(&mut self, action: Action) -> Result<BevFrame, EvalError> {
        let w = self.world.as_ref().ok_or(EvalError::NotStarted)?;
        let next = sim::step(w, action)?;
        let frame = sim::render_bev(&next);
        self.world = Some(next);
        Ok(frame)
    }
}

/// A denoiser rolled out autoregressively.
pub struct LearnedModel<'a, M: FrameDenoiser + ?Sized> {
    pub model: &'a M,
    pub mask: MaskParams,
    pub sampler: SamplerConfig,
    pub seed: u64,
    state: Option<RolloutState>,
}

impl<'a, M: FrameDenoiser + ?Sized> LearnedModel<'a, M> {
    pub fn new(model: &'a M, mask: MaskParams, sampler: SamplerConfig, seed: u64) -> Self {
        Self {
            model,
            mask,
            sampler,
            seed,
            state: None,
        }
    }
}

impl<M: FrameDenoiser + ?Sized> WorldModel for LearnedModel<'_, M> {
    fn start(&mut self, start: &ScenarioStart) -> Result<(), EvalError> {
        self.state = Some(RolloutState::new(
            start.context.clone(),
            &start.prior_actions,
            self.seed ^ start.seed,
        )?);
        Ok(())
    }

    fn step(&mut self, action: Action) -> Result<BevFrame, EvalError> {
        let st = self.state.as_mut().ok_or(EvalError::NotStarted)?;
        Ok(crate::sample::denoise_next_frame(st, action, self.model, &self.mask, &self.sampler)?)
    }
}

/// Runs `script` from `start` and returns the current frame followed by one
/// frame per action.
pub fn drive(model: &mut dyn WorldModel, start: &ScenarioStart, script: &[Action]) -> Result<Vec<BevFrame>, EvalError> {
    model.start(start)?;
    let mut frames = Vec::with_capacity(script.len() + 1);
    frames.push(start.context.last().cloned().ok_or(EvalError::Empty("context".into()))?);
    for a in script {
        frames.push(model.step(*a)?);
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    LaneChangeIntoNeighbor,
    TailgateThenBrake,
    SqueezeBetween,
    Cruise,
}

impl ScenarioKind {
    fn tag(self) -> u64 {
        match self {
            ScenarioKind::LaneChangeIntoNeighbor => 0x11,
            ScenarioKind::TailgateThenBrake => 0x22,
            ScenarioKind::SqueezeBetween => 0x33,
            ScenarioKind::Cruise => 0x44,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub start: ScenarioStart,
    pub script: Vec<Action>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub scenarios: usize,
    pub frames: usize,
    pub kir_commands: usize,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            scenarios: 20,
            frames: 40,
            kir_commands: 40,
            seed: 2024,
            max_attempts: 200,
        }
    }
}

/// Warm-up of `l − 1` IDLE steps from `world`, producing the context.
pub fn start_from(world: SimWorld, l: usize, seed: u64) -> Result<ScenarioStart, SimError> {
    let mut w = world;
    let mut context = vec![sim::render_bev(&w)];
    for _ in 1..l {
        w = sim::step(&w, Action::Idle)?;
        context.push(sim::render_bev(&w));
    }
    Ok(ScenarioStart {
        seed,
        world: w,
        context,
        prior_actions: vec![Action::Idle; l - 1],
    })
}

/// Bumper gap and closing speed to the nearest vehicle ahead in any lane the
/// ego occupies.
fn gap_ahead(w: &SimWorld) -> Option<(f64, f64)> {
    let cfg = &w.config;
    w.npcs
        .iter()
        .filter(|n| {
            [w.ego.lane, w.ego.target_lane]
                .iter()
                .any(|l| n.lane == *l || n.target_lane == *l)
        })
        .filter(|n| n.x > 0.0 && n.x < cfg.road_length_m / 2.0)
        .map(|n| (n.x - cfg.vehicle_length_m, w.ego.speed - n.speed))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// Brakes when the closing speed would eat the gap, else keeps going.
fn keep_safe(w: &SimWorld, default: Action) -> Action {
    match gap_ahead(w) {
        Some((gap, dv)) if dv > -0.5 && gap - 0.05 * dv.max(0.0) * (dv.max(0.0) + 1.0) < 4.0 => Action::Slower,
        _ => default,
    }
}

fn place(w: &mut SimWorld, id_slot: usize, lane: usize, x: f64, speed: f64) {
    let cfg = w.config.clone();
    let v = &mut w.npcs[id_slot];
    v.lane = lane;
    v.target_lane = lane;
    v.lat_offset = 0.0;
    v.x = x;
    v.speed = speed;
    v.cruise_speed = speed.clamp(cfg.npc_cruise_min, cfg.npc_cruise_max);
}

/// Removes NPCs other than the first `keep` that crowd `(lane, x)`.
fn clear_around(w: &mut SimWorld, keep: usize, spots: &[(usize, f64)], radius: f64) {
    let len = w.config.road_length_m;
    let mut i = keep;
    while i < w.npcs.len() {
        let n = &w.npcs[i];
        let crowded = spots.iter().any(|(l, x)| {
            let d = ((n.x - x + len / 2.0).rem_euclid(len) - len / 2.0).abs();
            n.lane == *l && d < radius
        });
        if crowded {
            w.npcs.remove(i);
        } else {
            i += 1;
        }
    }
}

fn build_scenario(kind: ScenarioKind, sim_cfg: &SimConfig, l: usize, frames: usize, seed: u64) -> Result<Option<Scenario>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = sim::spawn(sim_cfg, seed)?;
    let lanes = sim_cfg.lane_count;
    let ego_lane = w.ego.lane;
    let ego_speed = w.ego.speed;
    if w.npcs.len() < 2 {
        return Ok(None);
    }
    let mut lane_cmd = None;
    match kind {
        ScenarioKind::LaneChangeIntoNeighbor => {
            let left = ego_lane > 0 && (ego_lane + 1 >= lanes || rng.random::<bool>());
            let target = if left { ego_lane - 1 } else { ego_lane + 1 };
            let x = if rng.random::<bool>() {
                rng.random_range(9.0..14.0)
            } else {
                -rng.random_range(9.0..13.0)
            };
            let speed = ego_speed + rng.random_range(-1.0..2.0);
            place(&mut w, 0, target, x, speed);
            clear_around(&mut w, 1, &[(target, x), (ego_lane, 0.0)], 14.0);
            lane_cmd = Some(if left { Action::LaneLeft } else { Action::LaneRight });
        }
        ScenarioKind::TailgateThenBrake => {
            let x = rng.random_range(13.0..20.0);
            let speed = rng.random_range(21.0..24.0);
            place(&mut w, 0, ego_lane, x, speed);
            clear_around(&mut w, 1, &[(ego_lane, x), (ego_lane, 0.0)], 14.0);
        }
        ScenarioKind::SqueezeBetween => {
            if ego_lane == 0 || ego_lane + 1 >= lanes {
                return Ok(None);
            }
            let xl = rng.random_range(5.0..10.0);
            let xr = xl + rng.random_range(-2.0..2.0);
            place(&mut w, 0, ego_lane - 1, xl, rng.random_range(20.0..22.0));
            place(&mut w, 1, ego_lane + 1, xr, rng.random_range(20.0..22.0));
            clear_around(
                &mut w,
                2,
                &[(ego_lane - 1, xl), (ego_lane + 1, xr), (ego_lane, 10.0)],
                14.0,
            );
        }
        ScenarioKind::Cruise => {}
    }
    w.collided = sim::check_collision(&w);
    if w.collided {
        return Ok(None);
    }
    let start = match start_from(w, l, seed) {
        Ok(s) => s,
        Err(SimError::Terminal { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let mut world = start.world.clone();
    if world.collided {
        return Ok(None);
    }
    let mut script = Vec::with_capacity(frames);
    for t in 0..frames {
        let a = match kind {
            ScenarioKind::LaneChangeIntoNeighbor if t == 3 => lane_cmd.unwrap_or(Action::Idle),
            ScenarioKind::TailgateThenBrake if t < 20 => match gap_ahead(&world) {
                Some((gap, dv)) if gap - 0.05 * dv.max(0.0) * (dv.max(0.0) + 1.0) < 5.0 && dv > -0.5 => Action::Slower,
                Some((gap, dv)) if gap > 8.0 && dv < 5.0 => Action::Faster,
                _ => Action::Idle,
            },
            ScenarioKind::TailgateThenBrake if t < 28 => Action::Slower,
            ScenarioKind::SqueezeBetween if t < 5 => keep_safe(&world, Action::Faster),
            _ => keep_safe(&world, Action::Idle),
        };
        script.push(a);
        world = sim::step(&world, a)?;
        if world.collided {
            return Ok(None);
        }
    }
    Ok(Some(Scenario { kind, start, script }))
}

fn validate_scenario(s: &Scenario, p: &EvalParams) -> Result<bool, EvalError> {
    let frames = drive(&mut SimModel::default(), &s.start, &s.script)?;
    let count = count_existence_events(&frames, p, 0);
    if count.events != 0 || count.opportunities == 0 {
        return Ok(false);
    }
    if s.kind == ScenarioKind::LaneChangeIntoNeighbor {
        let cmd = s.script.iter().find(|a| matches!(a, Action::LaneLeft | Action::LaneRight));
        let moved = ego_row(&frames[0], p)
            .zip(ego_row(frames.last().unwrap(), p))
            .map(|(a, b)| (b - a).abs() >= 4.0)
            .unwrap_or(false);
        return Ok(cmd.is_some() && moved);
    }
    Ok(true)
}

fn suite_of(kinds: &[ScenarioKind], sim_cfg: &SimConfig, l: usize, cfg: &SuiteConfig, p: &EvalParams) -> Result<Vec<Scenario>, EvalError> {
    let mut out = Vec::with_capacity(cfg.scenarios);
    for i in 0..cfg.scenarios {
        let kind = kinds[i % kinds.len()];
        let first = episode_seed(cfg.seed ^ kind.tag(), i * cfg.max_attempts);
        let mut found = None;
        for a in 0..cfg.max_attempts {
            let seed = episode_seed(cfg.seed ^ kind.tag(), i * cfg.max_attempts + a);
            if let Some(s) = build_scenario(kind, sim_cfg, l, cfg.frames, seed)? {
                if validate_scenario(&s, p)? {
                    found = Some(s);
                    break;
                }
            }
        }
        out.push(found.ok_or(EvalError::Scenario {
            kind: format!("{kind:?}"),
            seed: first,
        })?);
    }
    Ok(out)
}

/// Interaction scenarios cycling through lane-change-into-neighbor,
/// tailgate-then-brake and squeeze-between.
pub fn iec_suite(sim_cfg: &SimConfig, l: usize, cfg: &SuiteConfig, p: &EvalParams) -> Result<Vec<Scenario>, EvalError> {
    suite_of(
        &[
            ScenarioKind::LaneChangeIntoNeighbor,
            ScenarioKind::TailgateThenBrake,
            ScenarioKind::SqueezeBetween,
        ],
        sim_cfg,
        l,
        cfg,
        p,
    )
}

/// Free-driving scenarios (IDLE unless braking is needed).
pub fn tec_suite(sim_cfg: &SimConfig, l: usize, cfg: &SuiteConfig, p: &EvalParams) -> Result<Vec<Scenario>, EvalError> {
    let cfg = SuiteConfig {
        seed: cfg.seed.wrapping_add(1),
        ..*cfg
    };
    suite_of(&[ScenarioKind::Cruise], sim_cfg, l, &cfg, p)
}

pub fn iec_proxy(model: &mut dyn WorldModel, suite: &[Scenario], p: &EvalParams) -> Result<ProxyScore, EvalError> {
    let mut total = ExistenceCount::default();
    for (i, s) in suite.iter().enumerate() {
        let frames = drive(model, &s.start, &s.script)?;
        total.merge(count_existence_events(&frames, p, i));
    }
    Ok(existence_score(total, p))
}

/// TEC over a suite of rollouts.
pub fn tec_proxy_suite(model: &mut dyn WorldModel, suite: &[Scenario], p: &EvalParams) -> Result<ProxyScore, EvalError> {
    iec_proxy(model, suite, p)
}

// ---------------------------------------------------------------------------
// Kinematic response

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KirTrial {
    pub command: Action,
    pub start: ScenarioStart,
}

impl KirTrial {
    /// Script for the command branch: lane changes are a single press,
    /// speed commands are held.
    pub fn script(&self, horizon: usize) -> Vec<Action> {
        match self.command {
            Action::LaneLeft | Action::LaneRight => {
                let mut s = vec![Action::Idle; horizon];
                s[0] = self.command;
                s
            }
            a => vec![a; horizon],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KirOutcome {
    pub trial: usize,
    pub command: Action,
    pub correct: bool,
    /// Row shift of the ego (lane commands) or drift change (speed commands).
    pub response: Option<f64>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KirScore {
    pub score: f64,
    pub correct: usize,
    pub total: usize,
    pub log: Vec<KirOutcome>,
}

fn ego_row(frame: &BevFrame, p: &EvalParams) -> Option<f64> {
    detect_objects(frame, p)
        .into_iter()
        .filter(|o| o.class == ObjClass::Ego)
        .max_by_key(|o| o.area)
        .map(|o| o.centroid.1)
}

/// Mean per-frame column drift of matched surrounding vehicles.
pub fn surround_drift(frames: &[BevFrame], p: &EvalParams) -> Option<f64> {
    let dets: Vec<Vec<DetectedObject>> = frames
        .iter()
        .map(|f| detect_objects(f, p).into_iter().filter(|o| o.class == ObjClass::Surr).collect())
        .collect();
    let (mut sum, mut n) = (0.0, 0usize);
    for t in 1..dets.len() {
        for (i, j) in match_objects(&dets[t - 1], &dets[t], p.gate_px) {
            sum += dets[t][j].centroid.0 - dets[t - 1][i].centroid.0;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

fn judge(trial: &KirTrial, cmd: &[BevFrame], idle: Option<&[BevFrame]>, p: &EvalParams) -> (bool, Option<f64>, Option<String>) {
    match trial.command {
        Action::LaneLeft | Action::LaneRight => {
            let Some(r0) = ego_row(&cmd[0], p) else {
                return (false, None, Some("ego not detected in start frame".into()));
            };
            let sign = if trial.command == Action::LaneLeft { -1.0 } else { 1.0 };
            let best = cmd[1..]
                .iter()
                .filter_map(|f| ego_row(f, p))
                .map(|r| sign * (r - r0))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            match best {
                None => (false, None, Some("ego never detected".into())),
                Some(v) => (v >= p.kir_response_px, Some(v), None),
            }
        }
        Action::Faster | Action::Slower => {
            let idle = idle.expect("speed trials carry an idle branch");
            match (surround_drift(cmd, p), surround_drift(idle, p)) {
                (Some(dc), Some(di)) => {
                    let delta = dc - di;
                    let ok = if trial.command == Action::Faster {
                        delta <= -p.kir_drift_margin
                    } else {
                        delta >= p.kir_drift_margin
                    };
                    (ok, Some(delta), None)
                }
                _ => (false, None, Some("no matched surrounding vehicles".into())),
            }
        }
        Action::Idle => (false, None, Some("IDLE is not a command".into())),
    }
}

fn run_trial(model: &mut dyn WorldModel, trial: &KirTrial, p: &EvalParams) -> Result<(bool, Option<f64>, Option<String>), EvalError> {
    let cmd = drive(model, &trial.start, &trial.script(p.kir_horizon))?;
    let idle = match trial.command {
        Action::Faster | Action::Slower => Some(drive(model, &trial.start, &vec![Action::Idle; p.kir_horizon])?),
        _ => None,
    };
    Ok(judge(trial, &cmd, idle.as_deref(), p))
}

/// Command trials balanced over LANE_LEFT, LANE_RIGHT, FASTER and SLOWER,
/// each validated so the simulator itself responds correctly.
pub fn kir_suite(sim_cfg: &SimConfig, l: usize, cfg: &SuiteConfig, p: &EvalParams) -> Result<Vec<KirTrial>, EvalError> {
    let commands = [Action::LaneLeft, Action::LaneRight, Action::Faster, Action::Slower];
    let mut out = Vec::with_capacity(cfg.kir_commands);
    for i in 0..cfg.kir_commands {
        let command = commands[i % commands.len()];
        let first = episode_seed(cfg.seed ^ 0x4B49_52, i * cfg.max_attempts);
        let mut found = None;
        for a in 0..cfg.max_attempts {
            let seed = episode_seed(cfg.seed ^ 0x4B49_52, i * cfg.max_attempts + a);
            let Some(s) = build_scenario(ScenarioKind::Cruise, sim_cfg, l, 0, seed)? else { continue };
            let trial = KirTrial { command, start: s.start };
            let ok = match run_trial(&mut SimModel::default(), &trial, p) {
                Ok((ok, _, _)) => ok,
                Err(EvalError::Sim(SimError::Terminal { .. })) => false,
                Err(e) => return Err(e),
            };
            let safe = ok && {
                let mut w = trial.start.world.clone();
                let mut fine = true;
                for a in trial.script(p.kir_horizon) {
                    w = sim::step(&w, a)?;
                    fine &= !w.collided;
                }
                fine
            };
            if safe {
                found = Some(trial);
                break;
            }
        }
        out.push(found.ok_or(EvalError::Scenario {
            kind: format!("KIR {command:?}"),
            seed: first,
        })?);
    }
    Ok(out)
}

pub fn kir_proxy(model: &mut dyn WorldModel, trials: &[KirTrial], p: &EvalParams) -> Result<KirScore, EvalError> {
    if trials.is_empty() {
        return Err(EvalError::Empty("KIR suite".into()));
    }
    let mut log = Vec::with_capacity(trials.len());
    for (i, t) in trials.iter().enumerate() {
        let (correct, response, note) = match run_trial(model, t, p) {
            Ok(r) => r,
            Err(EvalError::Sim(SimError::Terminal { step })) => (false, None, Some(format!("simulator terminal at step {step}"))),
            Err(e) => return Err(e),
        };
        log.push(KirOutcome {
            trial: i,
            command: t.command,
            correct,
            response,
            note,
        });
    }
    Ok(kir_score(log))
}

pub fn kir_score(log: Vec<KirOutcome>) -> KirScore {
    let correct = log.iter().filter(|o| o.correct).count();
    let total = log.len();
    KirScore {
        score: if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 },
        correct,
        total,
        log,
    }
}

// ---------------------------------------------------------------------------
// Reconstruction and color statistics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PsnrResult {
    pub mean_db: f64,
    pub samples: usize,
    pub predictions: Vec<BevFrame>,
    pub targets: Vec<BevFrame>,
}

/// Mean PSNR of one-step predictions with ground-truth context. Windows are
/// drawn with a fixed seed; with warm start the newest context frame is the
/// previous clean frame.
pub fn psnr_teacher_forced<M: FrameDenoiser + ?Sized>(
    model: &M,
    episodes: &[Episode],
    n_samples: usize,
    mask: &MaskParams,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<PsnrResult, EvalError> {
    let l = model.history_len();
    let windows: Vec<(usize, usize)> = episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (l.saturating_sub(1)..ep.len().saturating_sub(1)).map(move |t| (e, t)))
        .collect();
    if windows.is_empty() || n_samples == 0 {
        return Err(EvalError::Empty("no teacher-forcing window".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut predictions = Vec::with_capacity(n_samples);
    let mut targets = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let (e, t) = windows[rng.random_range(0..windows.len())];
        let ep = &episodes[e];
        let context = &ep.frames[t + 1 - l..=t];
        let actions = &ep.actions[t + 1 - l..=t];
        let m = if model.mask_channels() > 0 {
            crate::mask::conditioning_mask(&ep.frames[t], mask, None)
                .map_err(SampleError::from)?
                .0
        } else {
            None
        };
        let pred = generate_frame(model, context, actions, m.as_ref(), Some(&ep.frames[t]), sampler, &mut rng)?;
        total += psnr(pred.mse(&ep.frames[t + 1]));
        predictions.push(pred);
        targets.push(ep.frames[t + 1].clone());
    }
    Ok(PsnrResult {
        mean_db: total / n_samples as f64,
        samples: n_samples,
        predictions,
        targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistShift {
    /// Per-channel L1 distance on ego-colored pixels.
    pub green: [f64; 3],
    /// Per-channel L1 distance on pixels of neither vehicle class.
    pub background: [f64; 3],
}

pub const HIST_BINS: usize = 64;

fn group_histograms(frames: &[BevFrame], p: &EvalParams) -> [[Vec<f64>; 3]; 2] {
    let mut hist: [[Vec<f64>; 3]; 2] = std::array::from_fn(|_| std::array::from_fn(|_| vec![0.0; HIST_BINS]));
    for f in frames {
        let (ego, surr) = classify_colors(f, &p.colors);
        let n = f.plane_len();
        for i in 0..n {
            let group = if ego.values[i] >= 0.5 {
                0
            } else if surr.values[i] >= 0.5 {
                continue;
            } else {
                1
            };
            for c in 0..CHANNELS {
                let v = f.data[c * n + i].clamp(0.0, 1.0);
                let bin = ((v * HIST_BINS as f32) as usize).min(HIST_BINS - 1);
                hist[group][c][bin] += 1.0;
            }
        }
    }
    hist
}

fn l1_normalized(a: &[f64], b: &[f64]) -> f64 {
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    match (sa > 0.0, sb > 0.0) {
        (false, false) => 0.0,
        (true, true) => a.iter().zip(b).map(|(x, y)| (x / sa - y / sb).abs()).sum(),
        _ => 2.0,
    }
}

/// Per-channel 64-bin histogram distance between two frame sets, for ego
/// pixels and for background pixels.
pub fn color_histogram_shift(a: &[BevFrame], b: &[BevFrame], p: &EvalParams) -> HistShift {
    let (ha, hb) = (group_histograms(a, p), group_histograms(b, p));
    let per = |g: usize| std::array::from_fn(|c| l1_normalized(&ha[g][c], &hb[g][c]));
    HistShift {
        green: per(0),
        background: per(1),
    }
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsCounts {
    pub iec_events: usize,
    pub iec_opportunities: usize,
    pub tec_events: usize,
    pub tec_opportunities: usize,
    pub kir_correct: usize,
    pub kir_total: usize,
    pub psnr_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iec: f64,
    pub kir: f64,
    pub tec: f64,
    pub wo: f64,
    pub psnr_db: Option<f64>,
    pub hist_shift: Option<HistShift>,
    pub counts: MetricsCounts,
    pub iec_low_confidence: bool,
    pub tec_low_confidence: bool,
    pub iec_events: Vec<ExistenceEvent>,
    pub tec_events: Vec<ExistenceEvent>,
    pub kir_log: Vec<KirOutcome>,
}

/// Prebuilt scenario suites for one history length.
#[derive(Debug, Clone)]
pub struct Suites {
    pub iec: Vec<Scenario>,
    pub tec: Vec<Scenario>,
    pub kir: Vec<KirTrial>,
}

impl Suites {
    pub fn build(sim_cfg: &SimConfig, l: usize, cfg: &SuiteConfig, p: &EvalParams) -> Result<Self, EvalError> {
        Ok(Self {
            iec: iec_suite(sim_cfg, l, cfg, p)?,
            tec: tec_suite(sim_cfg, l, cfg, p)?,
            kir: kir_suite(sim_cfg, l, cfg, p)?,
        })
    }
}

/// Runs the three proxies; PSNR and color statistics are added when given.
pub fn evaluate(
    model: &mut dyn WorldModel,
    suites: &Suites,
    p: &EvalParams,
    psnr: Option<&PsnrResult>,
) -> Result<MetricsReport, EvalError> {
    let iec = iec_proxy(model, &suites.iec, p)?;
    let tec = tec_proxy_suite(model, &suites.tec, p)?;
    let kir = kir_proxy(model, &suites.kir, p)?;
    Ok(MetricsReport {
        iec: iec.score,
        kir: kir.score,
        tec: tec.score,
        wo: wo(iec.score, kir.score, tec.score)?,
        psnr_db: psnr.map(|r| r.mean_db),
        hist_shift: psnr.map(|r| color_histogram_shift(&r.predictions, &r.targets, p)),
        counts: MetricsCounts {
            iec_events: iec.events,
            iec_opportunities: iec.opportunities,
            tec_events: tec.events,
            tec_opportunities: tec.opportunities,
            kir_correct: kir.correct,
            kir_total: kir.total,
            psnr_samples: psnr.map_or(0, |r| r.samples),
        },
        iec_low_confidence: iec.low_confidence,
        tec_low_confidence: tec.low_confidence,
        iec_events: iec.log,
        tec_events: tec.log,
        kir_log: kir.log,
    })
}

/// Rasterized centre `(x, y)` of a vehicle, for checking detections.
pub fn raster_centre(cfg: &SimConfig, v: &VehicleState) -> Option<(f64, f64)> {
    let px = sim::footprint_pixels(cfg, v);
    if px.is_empty() {
        return None;
    }
    let n = px.len() as f64;
    Some((
        px.iter().map(|p| p.1 as f64).sum::<f64>() / n,
        px.iter().map(|p| p.0 as f64).sum::<f64>() / n,
    ))
}
