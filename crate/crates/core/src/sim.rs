//! Kinematic multi-lane highway on a ring road, rendered as an ego-centric
//! bird's-eye-view raster.
//!
//! Longitudinal positions are stored relative to the ego vehicle, so the ego
//! always sits at `x = 0` and at column `W/4` of the rendered frame. The ring
//! wrap happens far outside the visible window, which means vehicles only ever
//! enter or leave the frame through its left and right edges.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::BevFrame;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
    #[error("cannot place {requested} vehicles: road holds at most {capacity}")]
    Placement { requested: usize, capacity: usize },
    #[error("world is in a terminal (collided) state at step {step}")]
    Terminal { step: u64 },
    #[error("unknown action code {0}")]
    UnknownAction(u8),
}

/// Discrete meta-actions. The numeric codes are shared by the dataset
/// format, the denoiser embeddings and the wire protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Action {
    LaneLeft = 0,
    Idle = 1,
    LaneRight = 2,
    Faster = 3,
    Slower = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::LaneLeft,
        Action::Idle,
        Action::LaneRight,
        Action::Faster,
        Action::Slower,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self, SimError> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or(SimError::UnknownAction(code))
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorScheme {
    pub ego_rgb: [f32; 3],
    pub npc_rgb: [f32; 3],
    pub road_rgb: [f32; 3],
    pub lane_marking_rgb: [f32; 3],
}

impl Default for ColorScheme {
    // All components are multiples of 1/255 so an 8-bit round trip is lossless.
    fn default() -> Self {
        Self {
            ego_rgb: [40.0 / 255.0, 215.0 / 255.0, 40.0 / 255.0],
            npc_rgb: [40.0 / 255.0, 65.0 / 255.0, 230.0 / 255.0],
            road_rgb: [90.0 / 255.0, 90.0 / 255.0, 90.0 / 255.0],
            lane_marking_rgb: [150.0 / 255.0, 150.0 / 255.0, 150.0 / 255.0],
        }
    }
}

impl ColorScheme {
    pub fn validate(&self) -> Result<(), SimError> {
        let all = [
            self.ego_rgb,
            self.npc_rgb,
            self.road_rgb,
            self.lane_marking_rgb,
        ];
        if all.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SimError::InvalidConfig("colors must lie in [0,1]".into()));
        }
        let [r, g, b] = self.ego_rgb;
        if g - r.max(b) < 0.3 {
            return Err(SimError::InvalidConfig("ego color must be green-dominant".into()));
        }
        let [r, g, b] = self.npc_rgb;
        if b - r.max(g) < 0.3 {
            return Err(SimError::InvalidConfig("npc color must be blue-dominant".into()));
        }
        for (name, c) in [("road", self.road_rgb), ("lane marking", self.lane_marking_rgb)] {
            let hi = c.iter().copied().fold(f32::MIN, f32::max);
            let lo = c.iter().copied().fold(f32::MAX, f32::min);
            if hi - lo > 0.05 {
                return Err(SimError::InvalidConfig(format!("{name} color must be achromatic")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub lane_count: usize,
    pub lane_width_px: usize,
    pub road_length_m: f64,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub dt: f64,
    pub npc_count: usize,
    /// Ego speed bounds.
    pub speed_min: f64,
    pub speed_max: f64,
    /// NPC cruise speeds are drawn uniformly from this range.
    pub npc_cruise_min: f64,
    pub npc_cruise_max: f64,
    pub px_per_m: f64,
    pub vehicle_length_m: f64,
    pub vehicle_width_m: f64,
    /// Ego longitudinal acceleration applied by FASTER / SLOWER.
    pub accel: f64,
    /// Lateral speed during a lane change.
    pub lat_speed: f64,
    /// NPC headway: brake when the bumper gap drops below this.
    pub safe_gap_m: f64,
    pub npc_decel: f64,
    pub npc_relax: f64,
    /// Minimum bumper gap used when spawning vehicles.
    pub spawn_gap_m: f64,
    pub color_scheme: ColorScheme,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            lane_count: 4,
            lane_width_px: 6,
            road_length_m: 240.0,
            frame_h: 32,
            frame_w: 64,
            channels: 3,
            dt: 0.1,
            npc_count: 12,
            speed_min: 15.0,
            speed_max: 35.0,
            npc_cruise_min: 20.0,
            npc_cruise_max: 28.0,
            px_per_m: 1.0,
            vehicle_length_m: 4.0,
            vehicle_width_m: 2.0,
            accel: 10.0,
            lat_speed: 12.0,
            safe_gap_m: 8.0,
            npc_decel: 8.0,
            npc_relax: 2.0,
            spawn_gap_m: 6.0,
            color_scheme: ColorScheme::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if self.lane_count < 2 {
            return bad("lane_count must be >= 2");
        }
        if self.channels != 3 {
            return bad("channels is fixed at 3");
        }
        let road_px = self.lane_count * self.lane_width_px;
        if self.frame_h < road_px || (self.frame_h - road_px) % 2 != 0 {
            return bad("frame_h must equal lane_count * lane_width_px plus equal margins");
        }
        if self.frame_w < 8 {
            return bad("frame_w too small");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.speed_min < self.speed_max) || self.speed_min < 0.0 {
            return bad("speed_min must be in [0, speed_max)");
        }
        if !(self.npc_cruise_min <= self.npc_cruise_max) || self.npc_cruise_max > self.speed_max {
            return bad("npc cruise range must be ordered and within speed_max");
        }
        if !(self.px_per_m > 0.0) || !(self.vehicle_length_m > 0.0) || !(self.vehicle_width_m > 0.0) {
            return bad("scales and vehicle dimensions must be positive");
        }
        if !(self.lat_speed > 0.0) || !(self.accel >= 0.0) {
            return bad("lat_speed must be positive and accel non-negative");
        }
        if self.vehicle_width_m >= self.lane_width_m() {
            return bad("vehicle must be narrower than a lane");
        }
        if !(self.road_length_m > 0.0) {
            return bad("road_length_m must be positive");
        }
        self.color_scheme.validate()
    }

    pub fn lane_width_m(&self) -> f64 {
        self.lane_width_px as f64 / self.px_per_m
    }

    pub fn margin_px(&self) -> usize {
        (self.frame_h - self.lane_count * self.lane_width_px) / 2
    }

    /// Steps needed to complete a lane change.
    pub fn lane_change_steps(&self) -> u32 {
        (self.lane_width_m() / (self.lat_speed * self.dt)).ceil().max(1.0) as u32
    }

    pub fn vehicle_len_px(&self) -> usize {
        (self.vehicle_length_m * self.px_per_m).round() as usize
    }

    pub fn vehicle_w_px(&self) -> usize {
        (self.vehicle_width_m * self.px_per_m).round() as usize
    }

    /// Column of the ego vehicle's center.
    pub fn ego_col(&self) -> f64 {
        (self.frame_w / 4) as f64
    }

    /// Center line of `lane` in meters from the top road edge.
    pub fn lane_center_m(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width_m()
    }

    /// Spawn slot length on the ring.
    fn slot_len(&self) -> f64 {
        self.vehicle_length_m + 2.0 * self.spawn_gap_m
    }

    /// Number of NPCs that fit with the spawn spacing.
    pub fn placement_capacity(&self) -> usize {
        let per_lane = (self.road_length_m / self.slot_len()).floor() as usize;
        (per_lane * self.lane_count).saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub id: u32,
    pub lane: usize,
    /// Signed offset from the lane center, negative toward lane 0.
    pub lat_offset: f64,
    /// Longitudinal position relative to the ego, in meters.
    pub x: f64,
    pub speed: f64,
    pub target_lane: usize,
    pub is_ego: bool,
    pub cruise_speed: f64,
}

impl VehicleState {
    pub fn lane_changing(&self) -> bool {
        self.target_lane != self.lane
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: SimConfig,
    pub ego: VehicleState,
    pub npcs: Vec<VehicleState>,
    pub rng_state: u64,
    pub step_index: u64,
    pub collided: bool,
    /// Distance travelled by the ego; drives the lane-marking phase.
    pub odometer_m: f64,
}

fn wrap(x: f64, length: f64) -> f64 {
    let half = length / 2.0;
    (x + half).rem_euclid(length) - half
}

pub fn spawn(config: &SimConfig, seed: u64) -> Result<SimWorld, SimError> {
    config.validate()?;
    let capacity = config.placement_capacity();
    if config.npc_count > capacity {
        return Err(SimError::Placement {
            requested: config.npc_count,
            capacity,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (config.lane_count - 1) / 2;
    let hi = config.lane_count / 2;
    let ego_lane = if lo == hi || rng.random::<bool>() { lo } else { hi };
    let ego_speed = 0.5 * (config.speed_min + config.speed_max);
    let ego = VehicleState {
        id: 0,
        lane: ego_lane,
        lat_offset: 0.0,
        x: 0.0,
        speed: ego_speed,
        target_lane: ego_lane,
        is_ego: true,
        cruise_speed: ego_speed,
    };

    // Every (lane, slot) pair except the ego's own slot is a candidate;
    // a partial Fisher-Yates shuffle picks npc_count of them.
    let slot = config.slot_len();
    let per_lane = (config.road_length_m / slot).floor() as usize;
    let mut slots: Vec<(usize, usize)> = (0..config.lane_count)
        .flat_map(|l| (0..per_lane).map(move |s| (l, s)))
        .filter(|&(l, s)| !(l == ego_lane && s == 0))
        .collect();
    for i in 0..config.npc_count {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut chosen = slots[..config.npc_count].to_vec();
    chosen.sort_unstable();

    let npcs = chosen
        .into_iter()
        .enumerate()
        .map(|(k, (lane, s))| {
            let jitter = rng.random::<f64>() * config.spawn_gap_m;
            let cruise = config.npc_cruise_min
                + rng.random::<f64>() * (config.npc_cruise_max - config.npc_cruise_min);
            VehicleState {
                id: k as u32 + 1,
                lane,
                lat_offset: 0.0,
                x: wrap(s as f64 * slot + jitter, config.road_length_m),
                speed: cruise,
                target_lane: lane,
                is_ego: false,
                cruise_speed: cruise,
            }
        })
        .collect();

    let mut world = SimWorld {
        config: config.clone(),
        ego,
        npcs,
        rng_state: rng.random(),
        step_index: 0,
        collided: false,
        odometer_m: 0.0,
    };
    world.collided = check_collision(&world);
    Ok(world)
}

fn lateral_center(cfg: &SimConfig, v: &VehicleState) -> f64 {
    cfg.lane_center_m(v.lane) + v.lat_offset
}

fn rects_overlap(cfg: &SimConfig, a: &VehicleState, b: &VehicleState) -> bool {
    let dx = wrap(a.x - b.x, cfg.road_length_m).abs();
    let dy = (lateral_center(cfg, a) - lateral_center(cfg, b)).abs();
    dx < cfg.vehicle_length_m && dy < cfg.vehicle_width_m
}

/// True iff any two vehicle footprints strictly overlap.
pub fn check_collision(world: &SimWorld) -> bool {
    let cfg = &world.config;
    let all: Vec<&VehicleState> = std::iter::once(&world.ego).chain(&world.npcs).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            if rects_overlap(cfg, all[i], all[j]) {
                return true;
            }
        }
    }
    false
}

fn occupies(v: &VehicleState, lane: usize) -> bool {
    v.lane == lane || v.target_lane == lane
}

fn advance_lane_change(cfg: &SimConfig, v: &mut VehicleState) {
    if !v.lane_changing() {
        return;
    }
    let n = cfg.lane_change_steps();
    let lw = cfg.lane_width_m();
    let dir = if v.target_lane < v.lane { -1.0 } else { 1.0 };
    let done = (v.lat_offset.abs() * n as f64 / lw).round() as u32 + 1;
    if done >= n {
        v.lane = v.target_lane;
        v.lat_offset = 0.0;
    } else {
        v.lat_offset = dir * done as f64 * lw / n as f64;
    }
}

pub fn step(world: &SimWorld, action: Action) -> Result<SimWorld, SimError> {
    if world.collided {
        return Err(SimError::Terminal {
            step: world.step_index,
        });
    }
    let cfg = &world.config;
    let mut next = world.clone();

    let ego = &mut next.ego;
    let dv = cfg.accel * cfg.dt;
    match action {
        Action::Faster => ego.speed = (ego.speed + dv).min(cfg.speed_max),
        Action::Slower => ego.speed = (ego.speed - dv).max(cfg.speed_min),
        Action::LaneLeft if !ego.lane_changing() && ego.lane > 0 => ego.target_lane = ego.lane - 1,
        Action::LaneRight if !ego.lane_changing() && ego.lane + 1 < cfg.lane_count => {
            ego.target_lane = ego.lane + 1
        }
        _ => {}
    }
    advance_lane_change(cfg, ego);

    // Headway rule, evaluated on the pre-step snapshot so the update is
    // simultaneous for all NPCs.
    let new_speeds: Vec<f64> = world
        .npcs
        .iter()
        .map(|npc| {
            let leader = std::iter::once(&world.ego)
                .chain(world.npcs.iter())
                .filter(|o| o.id != npc.id && occupies(o, npc.lane))
                .map(|o| (wrap(o.x - npc.x, cfg.road_length_m), o.speed))
                .filter(|(d, _)| *d > 0.0)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            match leader {
                Some((dist, lead_speed)) if dist - cfg.vehicle_length_m < cfg.safe_gap_m => {
                    (npc.speed - cfg.npc_decel * cfg.dt).min(lead_speed).max(0.0)
                }
                _ => {
                    let delta = (npc.cruise_speed - npc.speed)
                        .clamp(-cfg.npc_relax * cfg.dt, cfg.npc_relax * cfg.dt);
                    npc.speed + delta
                }
            }
        })
        .collect();

    let ego_speed = next.ego.speed;
    for (npc, v) in next.npcs.iter_mut().zip(new_speeds) {
        npc.speed = v.min(cfg.speed_max);
        npc.x = wrap(npc.x + (npc.speed - ego_speed) * cfg.dt, cfg.road_length_m);
    }
    next.odometer_m += ego_speed * cfg.dt;
    next.step_index += 1;
    next.collided = check_collision(&next);
    Ok(next)
}

/// Pixel rectangle `(row0, col0, rows, cols)` covered by a vehicle, before
/// clipping to the frame. Rows and columns may be negative.
pub fn footprint(cfg: &SimConfig, v: &VehicleState) -> (i64, i64, usize, usize) {
    let len = cfg.vehicle_len_px();
    let wid = cfg.vehicle_w_px();
    let col_c = cfg.ego_col() + v.x * cfg.px_per_m;
    let row_c = cfg.margin_px() as f64 + lateral_center(cfg, v) * cfg.px_per_m;
    let col0 = (col_c - len as f64 / 2.0).round() as i64;
    let row0 = (row_c - wid as f64 / 2.0).round() as i64;
    (row0, col0, wid, len)
}

/// Frame pixels `(row, col)` covered by a vehicle after clipping.
pub fn footprint_pixels(cfg: &SimConfig, v: &VehicleState) -> Vec<(usize, usize)> {
    let (r0, c0, rows, cols) = footprint(cfg, v);
    let mut out = Vec::with_capacity(rows * cols);
    for r in r0..r0 + rows as i64 {
        for c in c0..c0 + cols as i64 {
            if r >= 0 && c >= 0 && (r as usize) < cfg.frame_h && (c as usize) < cfg.frame_w {
                out.push((r as usize, c as usize));
            }
        }
    }
    out
}

pub fn render_bev(world: &SimWorld) -> BevFrame {
    let cfg = &world.config;
    let colors = &cfg.color_scheme;
    let mut frame = BevFrame::filled(cfg.frame_h, cfg.frame_w, colors.road_rgb);
    let margin = cfg.margin_px();
    let road_bottom = margin + cfg.lane_count * cfg.lane_width_px;

    // Solid road edges.
    for row in [margin.checked_sub(1), Some(road_bottom)].into_iter().flatten() {
        if row < cfg.frame_h {
            for col in 0..cfg.frame_w {
                frame.set_rgb(row, col, colors.lane_marking_rgb);
            }
        }
    }
    // Dashed separators: 2 px on, 2 px off, scrolling with the ego.
    let phase = (world.odometer_m * cfg.px_per_m).floor() as i64;
    for k in 1..cfg.lane_count {
        let row = margin + k * cfg.lane_width_px;
        for col in 0..cfg.frame_w {
            if (col as i64 + phase).rem_euclid(4) < 2 {
                frame.set_rgb(row, col, colors.lane_marking_rgb);
            }
        }
    }
    for npc in &world.npcs {
        for (r, c) in footprint_pixels(cfg, npc) {
            frame.set_rgb(r, c, colors.npc_rgb);
        }
    }
    for (r, c) in footprint_pixels(cfg, &world.ego) {
        frame.set_rgb(r, c, colors.ego_rgb);
    }
    frame
}

/// NPCs whose footprint intersects the frame.
pub fn visible_npcs(world: &SimWorld) -> impl Iterator<Item = &VehicleState> {
    world
        .npcs
        .iter()
        .filter(|v| !footprint_pixels(&world.config, v).is_empty())
}
