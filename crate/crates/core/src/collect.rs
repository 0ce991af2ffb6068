//! MCTS ego agent and the on-disk episode dataset.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{BevFrame, CHANNELS};
use crate::sim::{self, Action, ColorScheme, SimConfig, SimError, SimWorld, VehicleState};

pub const EPISODE_MAGIC: &[u8; 4] = b"PIWM";
pub const EPISODE_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CollectError {
    #[error("episode must contain at least one step")]
    EmptyEpisode,
    #[error("invalid MCTS config: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("i/o failure after episode {last_complete:?}: {source}")]
    PartialOutput {
        last_complete: Option<usize>,
        #[source]
        source: io::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("episode format: {0}")]
    Format(String),
    #[error("manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutPolicy {
    Random,
    Idle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MctsConfig {
    pub simulations_per_move: usize,
    pub ucb_c: f64,
    pub max_depth: usize,
    pub discount: f64,
    pub w_speed: f64,
    pub w_collision: f64,
    pub w_lane_coverage: f64,
    pub rollout_policy: RolloutPolicy,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            simulations_per_move: 64,
            ucb_c: 1.4,
            max_depth: 12,
            discount: 0.9,
            w_speed: 1.0,
            w_collision: 500.0,
            w_lane_coverage: 0.6,
            rollout_policy: RolloutPolicy::Idle,
        }
    }
}

impl MctsConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<(), CollectError> {
        if self.simulations_per_move < 1 {
            return Err(CollectError::Config("simulations_per_move must be >= 1".into()));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(CollectError::Config("discount must lie in (0,1]".into()));
        }
        let bound = self.w_speed * sim.speed_max * self.max_depth as f64;
        if !(self.w_collision > bound) || !(self.w_collision > self.w_speed + self.w_lane_coverage) {
            return Err(CollectError::Config(format!(
                "w_collision {} must exceed w_speed*speed_max*max_depth = {bound}",
                self.w_collision
            )));
        }
        Ok(())
    }
}

/// Ego lane visit counts within one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneHistory {
    counts: Vec<u32>,
}

impl LaneHistory {
    pub fn new(lane_count: usize) -> Self {
        Self {
            counts: vec![0; lane_count],
        }
    }

    pub fn from_counts(counts: Vec<u32>) -> Self {
        Self { counts }
    }

    pub fn visit(&mut self, lane: usize) {
        self.counts[lane] += 1;
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Inverse visit frequency of `lane`, scaled so a uniform history gives
    /// `1/lane_count`, and capped at 1. Frequencies use add-one smoothing.
    pub fn novelty(&self, lane: usize) -> f64 {
        let k = self.counts.len() as f64;
        let total: u32 = self.counts.iter().sum();
        let p = (self.counts[lane] as f64 + 1.0) / (total as f64 + k);
        (1.0 / (k * k * p)).min(1.0)
    }
}

pub fn reward(
    cfg: &MctsConfig,
    _before: &SimWorld,
    _action: Action,
    after: &SimWorld,
    history: &LaneHistory,
) -> f64 {
    let speed_term = cfg.w_speed * after.ego.speed / after.config.speed_max;
    let collision = if after.collided { cfg.w_collision } else { 0.0 };
    speed_term - collision + cfg.w_lane_coverage * history.novelty(after.ego.lane)
}

/// Actions with a distinct effect in `world`. Lateral commands are dropped
/// mid lane change and at the road edges, where they would act as IDLE.
pub fn legal_actions(world: &SimWorld) -> [bool; Action::COUNT] {
    let ego = &world.ego;
    let free = !ego.lane_changing();
    let mut legal = [true; Action::COUNT];
    legal[Action::LaneLeft.index()] = free && ego.lane > 0;
    legal[Action::LaneRight.index()] = free && ego.lane + 1 < world.config.lane_count;
    legal
}

struct Node {
    world: SimWorld,
    history: LaneHistory,
    children: [Option<usize>; Action::COUNT],
    legal: [bool; Action::COUNT],
    visits: u32,
    value_sum: f64,
    /// Reward on the edge leading into this node.
    reward: f64,
    depth: usize,
}

impl Node {
    fn terminal(&self, max_depth: usize) -> bool {
        self.world.collided || self.depth >= max_depth
    }

    fn fully_expanded(&self) -> bool {
        self.children
            .iter()
            .zip(&self.legal)
            .all(|(c, legal)| c.is_some() || !legal)
    }
}

fn transition(
    cfg: &MctsConfig,
    world: &SimWorld,
    history: &LaneHistory,
    action: Action,
) -> (SimWorld, LaneHistory, f64) {
    let next = sim::step(world, action).expect("search never steps a collided world");
    let r = reward(cfg, world, action, &next, history);
    let mut h = history.clone();
    h.visit(next.ego.lane);
    (next, h, r)
}

/// UCT search from `world`; returns the most visited legal root action, ties
/// going to the lowest action index.
pub fn mcts_select_action(
    world: &SimWorld,
    history: &LaneHistory,
    cfg: &MctsConfig,
    rng: &mut ChaCha8Rng,
) -> Action {
    mcts_search(world, history, cfg, rng).0
}

/// Like [`mcts_select_action`] but also returns root visit counts.
pub fn mcts_search(
    world: &SimWorld,
    history: &LaneHistory,
    cfg: &MctsConfig,
    rng: &mut ChaCha8Rng,
) -> (Action, [u32; Action::COUNT]) {
    let mut nodes = vec![Node {
        world: world.clone(),
        history: history.clone(),
        children: [None; Action::COUNT],
        legal: legal_actions(world),
        visits: 0,
        value_sum: 0.0,
        reward: 0.0,
        depth: 0,
    }];

    for _ in 0..cfg.simulations_per_move {
        let mut path = vec![0usize];
        let mut cur = 0usize;
        // Selection.
        while nodes[cur].fully_expanded() && !nodes[cur].terminal(cfg.max_depth) {
            let parent_visits = nodes[cur].visits.max(1) as f64;
            let mut best: Option<(usize, f64)> = None;
            for child in nodes[cur].children.iter().flatten() {
                let n = &nodes[*child];
                let q = n.value_sum / n.visits as f64;
                let u = q + cfg.ucb_c * (parent_visits.ln() / n.visits as f64).sqrt();
                if best.is_none_or(|(_, b)| u > b) {
                    best = Some((*child, u));
                }
            }
            cur = best.expect("fully expanded node has children").0;
            path.push(cur);
        }
        // Expansion of the first untried action.
        if !nodes[cur].terminal(cfg.max_depth) {
            let node = &nodes[cur];
            let slot = (0..Action::COUNT)
                .find(|&i| node.legal[i] && node.children[i].is_none())
                .expect("not fully expanded");
            let action = Action::ALL[slot];
            let (w, h, r) = transition(cfg, &nodes[cur].world, &nodes[cur].history, action);
            let depth = nodes[cur].depth + 1;
            let legal = legal_actions(&w);
            nodes.push(Node {
                world: w,
                history: h,
                children: [None; Action::COUNT],
                legal,
                visits: 0,
                value_sum: 0.0,
                reward: r,
                depth,
            });
            let id = nodes.len() - 1;
            nodes[cur].children[slot] = Some(id);
            cur = id;
            path.push(cur);
        }
        // Rollout.
        let mut ret = 0.0;
        {
            let leaf = &nodes[cur];
            if !leaf.terminal(cfg.max_depth) {
                let mut w = leaf.world.clone();
                let mut h = leaf.history.clone();
                let mut scale = 1.0;
                for _ in leaf.depth..cfg.max_depth {
                    let a = match cfg.rollout_policy {
                        RolloutPolicy::Idle => Action::Idle,
                        RolloutPolicy::Random => Action::ALL[rng.random_range(0..Action::COUNT)],
                    };
                    let (nw, nh, r) = transition(cfg, &w, &h, a);
                    ret += scale * r;
                    scale *= cfg.discount;
                    w = nw;
                    h = nh;
                    if w.collided {
                        break;
                    }
                }
            }
        }
        // Backup.
        for &id in path.iter().rev() {
            let node = &mut nodes[id];
            ret = node.reward + cfg.discount * ret;
            node.visits += 1;
            node.value_sum += ret;
        }
    }

    let mut visits = [0u32; Action::COUNT];
    for (i, c) in nodes[0].children.iter().enumerate() {
        if let Some(c) = c {
            visits[i] = nodes[*c].visits;
        }
    }
    let legal = nodes[0].legal;
    let mut best = legal.iter().position(|l| *l).expect("FASTER is always legal");
    for i in best + 1..Action::COUNT {
        if legal[i] && visits[i] > visits[best] {
            best = i;
        }
    }
    (Action::ALL[best], visits)
}

/// Per-vehicle record as stored in the episode file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u8,
    pub is_ego: bool,
    pub lane: u8,
    pub x_m: f32,
    pub lat_offset_m: f32,
    pub speed: f32,
}

impl From<&VehicleState> for VehicleRecord {
    fn from(v: &VehicleState) -> Self {
        Self {
            id: v.id as u8,
            is_ego: v.is_ego,
            lane: v.lane as u8,
            x_m: v.x as f32,
            lat_offset_m: v.lat_offset as f32,
            speed: v.speed as f32,
        }
    }
}

pub fn world_records(world: &SimWorld) -> Vec<VehicleRecord> {
    std::iter::once(&world.ego)
        .chain(&world.npcs)
        .map(VehicleRecord::from)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub frames: Vec<BevFrame>,
    pub actions: Vec<Action>,
    pub states: Vec<Vec<VehicleRecord>>,
    pub seed: u64,
    pub collided_at: Option<usize>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<(), CollectError> {
        let t = self.len();
        if t == 0 {
            return Err(CollectError::EmptyEpisode);
        }
        if self.actions.len() != t || self.states.len() != t {
            return Err(CollectError::Format("frames/actions/states length mismatch".into()));
        }
        let (h, w) = (self.frames[0].h, self.frames[0].w);
        out.write_all(EPISODE_MAGIC)?;
        out.write_all(&EPISODE_VERSION.to_le_bytes())?;
        out.write_all(&(t as u32).to_le_bytes())?;
        out.write_all(&(h as u16).to_le_bytes())?;
        out.write_all(&(w as u16).to_le_bytes())?;
        out.write_all(&(CHANNELS as u16).to_le_bytes())?;
        for f in &self.frames {
            if (f.h, f.w) != (h, w) {
                return Err(CollectError::Format("frame dims differ within episode".into()));
            }
            out.write_all(&f.to_u8_hwc())?;
        }
        let codes: Vec<u8> = self.actions.iter().map(|a| a.code()).collect();
        out.write_all(&codes)?;
        for st in &self.states {
            if st.len() > u8::MAX as usize {
                return Err(CollectError::Format("too many vehicles in one frame".into()));
            }
            out.write_all(&[st.len() as u8])?;
            for v in st {
                out.write_all(&[v.id, v.is_ego as u8, v.lane])?;
                out.write_all(&v.x_m.to_le_bytes())?;
                out.write_all(&v.lat_offset_m.to_le_bytes())?;
                out.write_all(&v.speed.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CollectError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    /// Parses an episode file. `seed` and `collided_at` live in the manifest
    /// and are filled in by the caller.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CollectError> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != EPISODE_MAGIC {
            return Err(CollectError::Format("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != EPISODE_VERSION {
            return Err(CollectError::Format(format!("unsupported version {version}")));
        }
        let t = read_u32(&mut r)? as usize;
        let h = read_u16(&mut r)? as usize;
        let w = read_u16(&mut r)? as usize;
        let c = read_u16(&mut r)? as usize;
        if c != CHANNELS {
            return Err(CollectError::Format(format!("expected {CHANNELS} channels, got {c}")));
        }
        let mut frames = Vec::with_capacity(t);
        let mut buf = vec![0u8; h * w * c];
        for _ in 0..t {
            read_exact(&mut r, &mut buf)?;
            frames.push(BevFrame::from_u8_hwc(h, w, &buf).map_err(|e| CollectError::Format(e.to_string()))?);
        }
        let mut codes = vec![0u8; t];
        read_exact(&mut r, &mut codes)?;
        let actions = codes
            .into_iter()
            .map(Action::from_code)
            .collect::<Result<Vec<_>, _>>()?;
        let mut states = Vec::with_capacity(t);
        for _ in 0..t {
            let mut n = [0u8; 1];
            read_exact(&mut r, &mut n)?;
            let mut st = Vec::with_capacity(n[0] as usize);
            for _ in 0..n[0] {
                let mut head = [0u8; 3];
                read_exact(&mut r, &mut head)?;
                st.push(VehicleRecord {
                    id: head[0],
                    is_ego: head[1] & 1 == 1,
                    lane: head[2],
                    x_m: read_f32(&mut r)?,
                    lat_offset_m: read_f32(&mut r)?,
                    speed: read_f32(&mut r)?,
                });
            }
            states.push(st);
        }
        if !r.is_empty() {
            return Err(CollectError::Format(format!("{} trailing bytes", r.len())));
        }
        Ok(Self {
            frames,
            actions,
            states,
            seed: 0,
            collided_at: None,
        })
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CollectError> {
    r.read_exact(buf)
        .map_err(|_| CollectError::Format("truncated episode file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CollectError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut &[u8]) -> Result<u16, CollectError> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_f32(r: &mut &[u8]) -> Result<f32, CollectError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

/// Ego policy used to drive an episode.
#[derive(Debug, Clone)]
pub enum Policy {
    Mcts(MctsConfig),
    /// Uniformly random actions; the collision-rate baseline.
    Random,
}

/// Seed for episode `index` of a run seeded with `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs one episode of at most `steps` frames. A collision truncates the
/// episode at the collision frame, which is kept (with an IDLE placeholder
/// action) and flagged in `collided_at`.
pub fn run_episode(
    sim_cfg: &SimConfig,
    policy: &Policy,
    steps: usize,
    seed: u64,
) -> Result<Episode, CollectError> {
    if steps == 0 {
        return Err(CollectError::EmptyEpisode);
    }
    if let Policy::Mcts(cfg) = policy {
        cfg.validate(sim_cfg)?;
    }
    let mut world = sim::spawn(sim_cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_AC71_0115);
    let mut history = LaneHistory::new(sim_cfg.lane_count);
    let mut ep = Episode {
        frames: Vec::with_capacity(steps),
        actions: Vec::with_capacity(steps),
        states: Vec::with_capacity(steps),
        seed,
        collided_at: None,
    };
    for t in 0..steps {
        ep.frames.push(sim::render_bev(&world));
        ep.states.push(world_records(&world));
        history.visit(world.ego.lane);
        if world.collided {
            ep.actions.push(Action::Idle);
            ep.collided_at = Some(t);
            break;
        }
        let action = match policy {
            Policy::Mcts(cfg) => mcts_select_action(&world, &history, cfg, &mut rng),
            Policy::Random => Action::ALL[rng.random_range(0..Action::COUNT)],
        };
        ep.actions.push(action);
        world = sim::step(&world, action)?;
    }
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDescriptor {
    pub id: usize,
    pub length: usize,
    pub file: String,
    pub seed: u64,
    pub collided_at: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub episodes: Vec<EpisodeDescriptor>,
    pub color_scheme: ColorScheme,
    /// Action name to wire code.
    pub action_encoding: Vec<(String, u8)>,
    pub sim_config: SimConfig,
    pub mcts_config: MctsConfig,
}

pub fn action_encoding() -> Vec<(String, u8)> {
    [
        ("LANE_LEFT", Action::LaneLeft),
        ("IDLE", Action::Idle),
        ("LANE_RIGHT", Action::LaneRight),
        ("FASTER", Action::Faster),
        ("SLOWER", Action::Slower),
    ]
    .into_iter()
    .map(|(n, a)| (n.to_string(), a.code()))
    .collect()
}

/// Collects `n` MCTS episodes into `out_dir`. The manifest is written last
/// through a rename, so its presence marks a complete dataset.
pub fn collect_episodes(
    n: usize,
    steps: usize,
    sim_cfg: &SimConfig,
    mcts_cfg: &MctsConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest, CollectError> {
    collect_with_progress(n, steps, sim_cfg, mcts_cfg, seed, out_dir, |_, _| {})
}

pub fn collect_with_progress(
    n: usize,
    steps: usize,
    sim_cfg: &SimConfig,
    mcts_cfg: &MctsConfig,
    seed: u64,
    out_dir: &Path,
    mut progress: impl FnMut(usize, &Episode),
) -> Result<DatasetManifest, CollectError> {
    if steps == 0 {
        return Err(CollectError::EmptyEpisode);
    }
    sim_cfg.validate()?;
    mcts_cfg.validate(sim_cfg)?;
    fs::create_dir_all(out_dir).map_err(|source| CollectError::PartialOutput {
        last_complete: None,
        source,
    })?;
    let policy = Policy::Mcts(mcts_cfg.clone());
    let mut descriptors = Vec::with_capacity(n);
    for id in 0..n {
        let ep_seed = episode_seed(seed, id);
        let ep = run_episode(sim_cfg, &policy, steps, ep_seed)?;
        let file = format!("episode_{id:05}.piwm");
        let last_complete = id.checked_sub(1);
        fs::write(out_dir.join(&file), ep.to_bytes()?)
            .map_err(|source| CollectError::PartialOutput { last_complete, source })?;
        progress(id, &ep);
        descriptors.push(EpisodeDescriptor {
            id,
            length: ep.len(),
            file,
            seed: ep_seed,
            collided_at: ep.collided_at,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        frame_h: sim_cfg.frame_h,
        frame_w: sim_cfg.frame_w,
        channels: CHANNELS,
        episodes: descriptors,
        color_scheme: sim_cfg.color_scheme.clone(),
        action_encoding: action_encoding(),
        sim_config: sim_cfg.clone(),
        mcts_config: mcts_cfg.clone(),
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CollectError::Manifest(e.to_string()))?;
    let tmp = out_dir.join(format!("{MANIFEST_FILE}.tmp"));
    let last_complete = n.checked_sub(1);
    fs::write(&tmp, json)
        .and_then(|_| fs::rename(&tmp, out_dir.join(MANIFEST_FILE)))
        .map_err(|source| CollectError::PartialOutput { last_complete, source })?;
    Ok(manifest)
}

/// A loaded dataset: manifest plus all episodes in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, CollectError> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
            .map_err(|e| CollectError::Manifest(e.to_string()))?;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for d in &manifest.episodes {
            let path: PathBuf = dir.join(&d.file);
            let mut ep = Episode::from_bytes(&fs::read(&path)?)?;
            if ep.len() != d.length {
                return Err(CollectError::Manifest(format!(
                    "{} holds {} frames, manifest says {}",
                    d.file,
                    ep.len(),
                    d.length
                )));
            }
            if ep.frames[0].h != manifest.frame_h || ep.frames[0].w != manifest.frame_w {
                return Err(CollectError::Manifest(format!("{} has non-uniform dims", d.file)));
            }
            ep.seed = d.seed;
            ep.collided_at = d.collided_at;
            episodes.push(ep);
        }
        Ok(Self { manifest, episodes })
    }

    pub fn from_episodes(manifest: DatasetManifest, episodes: Vec<Episode>) -> Self {
        Self { manifest, episodes }
    }

    pub fn frame_count(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }
}
