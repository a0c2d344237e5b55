//! Procedural stand-in game environments that render frames from a known
//! internal state.
//!
//! *Pitch*: a top-down football field with `P` players (two teams) and a
//! ball. The state is, per player, position `(x, y)` and facing direction
//! `(dx, dy)`; then the ball's `(x, y, z)` and `(dx, dy, dz)`: `4P + 6`
//! variables.
//!
//! Field coordinates map to pixels by
//!
//! ```text
//! s  = min(W / 2, H / (2 · 0.42))
//! px = W / 2 + x · s
//! py = H / 2 + y · s
//! ```
//!
//! in continuous pixel coordinates (pixel `(r, c)` covers `[c, c+1) × [r, r+1)`).
//! On a square frame this is `px = (x + 1) / 2 · W` with the field
//! letterboxed vertically; the bands above and below it hold the stands
//! and advertising banners.
//!
//! *Corridor*: a first-person corridor with enemies drawn as
//! perspective-scaled rectangles. The screen is split into left 40 %,
//! middle 20 % and right 40 %; each region reports its nearest enemy's
//! box centre `(x, y)`, width and height in normalised screen coordinates,
//! masked invalid when the region is empty: 12 variables.
//!
//! Nuisance parameters (ambient light, pitch/wall texture, banner pattern)
//! change pixels but never the state.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::dataset::{write_manifest, Manifest, ManifestEntry, StateVector};
use crate::error::DatasetError;
use crate::frame::Frame;

pub const FIELD_HALF_HEIGHT: f64 = 0.42;
pub const REGION_BOUNDS: [(f64, f64); 3] = [(0.0, 0.4), (0.4, 0.6), (0.6, 1.0)];
pub const REGION_NAMES: [&str; 3] = ["left", "middle", "right"];

const TEAM_NAMES: [&str; 2] = ["home", "away"];
const NUM_TEXTURES: u8 = 5;
const NUM_BANNERS: u8 = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "env", rename_all = "lowercase", deny_unknown_fields)]
pub enum Environment {
    /// `players` is the total over both teams.
    Pitch { players: usize },
    Corridor,
}

impl Default for Environment {
    fn default() -> Self {
        Environment::Pitch { players: 4 }
    }
}

impl Environment {
    pub fn name(&self) -> &'static str {
        match self {
            Environment::Pitch { .. } => "pitch",
            Environment::Corridor => "corridor",
        }
    }

    /// State dimension `k`.
    pub fn k(&self) -> usize {
        match *self {
            Environment::Pitch { players } => 4 * players + 6,
            Environment::Corridor => 12,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        match *self {
            Environment::Pitch { players } if !(1..=44).contains(&players) => {
                Err(DatasetError::Invalid(format!("pitch needs 1..=44 players, got {players}")))
            }
            _ => Ok(()),
        }
    }

    pub fn variable_names(&self) -> Vec<String> {
        match *self {
            Environment::Pitch { players } => {
                let mut names = Vec::with_capacity(self.k());
                for slot in pitch_roster(players) {
                    for c in ["x", "y", "dx", "dy"] {
                        names.push(format!("{}_{c}", slot.label()));
                    }
                }
                names.extend(["ball_x", "ball_y", "ball_z", "ball_dx", "ball_dy", "ball_dz"].map(String::from));
                names
            }
            Environment::Corridor => REGION_NAMES
                .iter()
                .flat_map(|r| ["x", "y", "w", "h"].map(|c| format!("{r}_{c}")))
                .collect(),
        }
    }

    /// Aggregation groups over variable indices.
    pub fn groups(&self) -> Vec<(String, Vec<usize>)> {
        match *self {
            Environment::Pitch { players } => {
                let roster = pitch_roster(players);
                let pick = |pred: &dyn Fn(&RosterSlot) -> bool, offset: usize| -> Vec<usize> {
                    roster.iter().enumerate().filter(|(_, s)| pred(s)).map(|(i, _)| 4 * i + offset).collect()
                };
                let defensive = |s: &RosterSlot| s.role != Role::Attacker;
                let attacking = |s: &RosterSlot| s.role == Role::Attacker;
                let ball = 4 * players;
                let mut groups = vec![
                    ("defensive_x".to_string(), pick(&defensive, 0)),
                    ("defensive_y".to_string(), pick(&defensive, 1)),
                    ("attacking_x".to_string(), pick(&attacking, 0)),
                    ("attacking_y".to_string(), pick(&attacking, 1)),
                    ("player_direction".to_string(), (0..players).flat_map(|i| [4 * i + 2, 4 * i + 3]).collect()),
                    ("ball_position".to_string(), vec![ball, ball + 1, ball + 2]),
                    ("ball_direction".to_string(), vec![ball + 3, ball + 4, ball + 5]),
                ];
                groups.retain(|(_, idx)| !idx.is_empty());
                groups
            }
            Environment::Corridor => REGION_NAMES
                .iter()
                .enumerate()
                .map(|(r, name)| (name.to_string(), (4 * r..4 * r + 4).collect()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Goalkeeper,
    Defender,
    Attacker,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RosterSlot {
    pub team: usize,
    pub role: Role,
    /// 1-based position within the role on its team.
    pub ordinal: usize,
}

impl RosterSlot {
    pub fn label(&self) -> String {
        let team = TEAM_NAMES[self.team];
        match self.role {
            Role::Goalkeeper => format!("{team}_gk"),
            Role::Defender => format!("{team}_def{}", self.ordinal),
            Role::Attacker => format!("{team}_att{}", self.ordinal),
        }
    }
}

/// Home team takes the first `ceil(P/2)` players. Each team fields a
/// goalkeeper, then `round((n − 1) · 0.4)` defenders, then attackers.
pub fn pitch_roster(players: usize) -> Vec<RosterSlot> {
    let home = players.div_ceil(2);
    let mut out = Vec::with_capacity(players);
    for (team, n) in [(0, home), (1, players - home)] {
        let defenders = ((n.saturating_sub(1)) as f64 * 0.4).round() as usize;
        for i in 0..n {
            let (role, ordinal) = match i {
                0 => (Role::Goalkeeper, 1),
                i if i <= defenders => (Role::Defender, i),
                i => (Role::Attacker, i - defenders),
            };
            out.push(RosterSlot { team, role, ordinal });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Player {
    pub slot: RosterSlot,
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitchState {
    pub players: Vec<Player>,
    pub ball: Ball,
}

/// Normalised screen box: centre `(x, y)`, size `(w, h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Enemy {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Enemy {
    pub fn left(&self) -> f64 {
        self.x - self.w / 2.0
    }

    pub fn right(&self) -> f64 {
        self.x + self.w / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorridorState {
    /// Nearest enemy per region, if any.
    pub nearest: [Option<Enemy>; 3],
    /// Farther enemies, drawn but not labelled.
    pub others: Vec<Enemy>,
}

impl CorridorState {
    pub fn empty() -> Self {
        CorridorState { nearest: [None; 3], others: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GameState {
    Pitch(PitchState),
    Corridor(CorridorState),
}

impl GameState {
    pub fn to_state_vector(&self) -> StateVector {
        match self {
            GameState::Pitch(s) => {
                let mut v: Vec<f64> = s.players.iter().flat_map(|p| [p.x, p.y, p.dx, p.dy]).collect();
                let b = &s.ball;
                v.extend([b.x, b.y, b.z, b.dx, b.dy, b.dz]);
                StateVector::all_valid(v)
            }
            GameState::Corridor(s) => {
                let mut values = Vec::with_capacity(12);
                let mut valid = Vec::with_capacity(12);
                for e in &s.nearest {
                    match e {
                        Some(e) => values.extend([e.x, e.y, e.w, e.h]),
                        None => values.extend([f64::NAN; 4]),
                    }
                    valid.extend([e.is_some(); 4]);
                }
                StateVector::new(values, valid)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NuisanceParams {
    /// Global light multiplier in `[0.6, 1.0]`.
    pub ambient_brightness: f64,
    pub background_texture_id: u8,
    pub sideline_banner_pattern: u8,
}

impl NuisanceParams {
    pub fn neutral() -> Self {
        NuisanceParams { ambient_brightness: 1.0, background_texture_id: 0, sideline_banner_pattern: 0 }
    }

    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        NuisanceParams {
            ambient_brightness: rng.gen_range(0.6..=1.0),
            background_texture_id: rng.gen_range(0..NUM_TEXTURES),
            sideline_banner_pattern: rng.gen_range(0..NUM_BANNERS),
        }
    }
}

// ------------------------------------------------------------------ sampling

fn normal(rng: &mut ChaCha8Rng, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("positive sd").sample(rng)
}

fn unit_angle(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let a = rng.gen_range(0.0..2.0 * PI);
    (a.cos(), a.sin())
}

const X_LIMIT: f64 = 0.97;
const Y_LIMIT: f64 = 0.40;

fn sample_player(slot: RosterSlot, defenders: usize, rng: &mut ChaCha8Rng) -> Player {
    // Home defends the goal at x = −1; away is mirrored.
    let (x, y) = match slot.role {
        Role::Goalkeeper => (normal(rng, -0.90, 0.03), normal(rng, 0.0, 0.07)),
        Role::Defender => {
            let lane = (slot.ordinal as f64 - 0.5) / defenders as f64 * 0.7 - 0.35;
            (normal(rng, -0.55, 0.10), normal(rng, lane, 0.06))
        }
        Role::Attacker => (rng.gen_range(-0.5..0.95), rng.gen_range(-Y_LIMIT..Y_LIMIT)),
    };
    let sign = if slot.team == 0 { 1.0 } else { -1.0 };
    let (dx, dy) = unit_angle(rng);
    Player { slot, x: (sign * x).clamp(-X_LIMIT, X_LIMIT), y: y.clamp(-Y_LIMIT, Y_LIMIT), dx, dy }
}

pub fn sample_pitch(players: usize, rng: &mut ChaCha8Rng) -> PitchState {
    let roster = pitch_roster(players);
    let defenders_on = |team: usize| roster.iter().filter(|s| s.team == team && s.role == Role::Defender).count();
    let players = roster.iter().map(|&slot| sample_player(slot, defenders_on(slot.team), rng)).collect();
    let [dx, dy, dz]: [f64; 3] = UnitSphere.sample(rng);
    let ball = Ball {
        x: rng.gen_range(-0.95..0.95),
        y: rng.gen_range(-Y_LIMIT..Y_LIMIT),
        z: rng.gen_range(0.0..0.5),
        dx,
        dy,
        dz,
    };
    PitchState { players, ball }
}

/// Enemy at depth `s ∈ (0, 1]` (1 = closest) placed inside `[lo, hi]`.
fn sample_enemy(lo: f64, hi: f64, s: f64, rng: &mut ChaCha8Rng) -> Enemy {
    let h = 0.45 * s;
    let w = h * rng.gen_range(0.3..0.4);
    let bottom = (0.5 + 0.45 * s + rng.gen_range(-0.03..0.03)).min(0.99);
    let x = rng.gen_range(lo + w / 2.0..=hi - w / 2.0);
    Enemy { x, y: bottom - h / 2.0, w, h }
}

pub fn sample_corridor(rng: &mut ChaCha8Rng) -> CorridorState {
    let mut state = CorridorState::empty();
    for (r, &(lo, hi)) in REGION_BOUNDS.iter().enumerate() {
        if rng.gen::<f64>() >= 0.65 {
            continue;
        }
        let s = rng.gen_range(0.25..1.0);
        state.nearest[r] = Some(sample_enemy(lo, hi, s, rng));
        if rng.gen::<f64>() < 0.3 {
            let far = s * rng.gen_range(0.4..0.8);
            state.others.push(sample_enemy(lo, hi, far, rng));
        }
    }
    state
}

pub fn sample_state(env: &Environment, rng: &mut ChaCha8Rng) -> GameState {
    match *env {
        Environment::Pitch { players } => GameState::Pitch(sample_pitch(players, rng)),
        Environment::Corridor => GameState::Corridor(sample_corridor(rng)),
    }
}

// ----------------------------------------------------------------- rendering

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<[f32; 3]>,
}

const SUPERSAMPLE: usize = 4;

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { h, w, px: vec![[0.0; 3]; h * w] }
    }

    fn set(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        self.px[r * self.w + c] = rgb;
    }

    fn blend(&mut self, r: usize, c: usize, rgb: [f32; 3], alpha: f32) {
        let p = &mut self.px[r * self.w + c];
        for (o, &n) in p.iter_mut().zip(&rgb) {
            *o = *o * (1.0 - alpha) + n * alpha;
        }
    }

    /// Anti-aliased fill of the region `inside(x, y)` within a bounding box,
    /// by supersampled coverage.
    fn fill(&mut self, bbox: (f64, f64, f64, f64), rgb: [f32; 3], alpha: f32, inside: impl Fn(f64, f64) -> bool) {
        let (x0, y0, x1, y1) = bbox;
        let c0 = x0.floor().max(0.0) as usize;
        let r0 = y0.floor().max(0.0) as usize;
        let c1 = (x1.ceil().max(0.0) as usize).min(self.w);
        let r1 = (y1.ceil().max(0.0) as usize).min(self.h);
        let n = SUPERSAMPLE as f64;
        for r in r0..r1 {
            for c in c0..c1 {
                let mut hits = 0;
                for i in 0..SUPERSAMPLE {
                    for j in 0..SUPERSAMPLE {
                        if inside(c as f64 + (j as f64 + 0.5) / n, r as f64 + (i as f64 + 0.5) / n) {
                            hits += 1;
                        }
                    }
                }
                if hits > 0 {
                    self.blend(r, c, rgb, alpha * hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32);
                }
            }
        }
    }

    fn disc(&mut self, cx: f64, cy: f64, radius: f64, rgb: [f32; 3], alpha: f32) {
        let bbox = (cx - radius, cy - radius, cx + radius, cy + radius);
        self.fill(bbox, rgb, alpha, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius);
    }

    fn segment(&mut self, a: (f64, f64), b: (f64, f64), width: f64, rgb: [f32; 3], alpha: f32) {
        let half = width / 2.0;
        let bbox = (a.0.min(b.0) - half, a.1.min(b.1) - half, a.0.max(b.0) + half, a.1.max(b.1) + half);
        let (vx, vy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (vx * vx + vy * vy).max(1e-12);
        self.fill(bbox, rgb, alpha, |x, y| {
            let t = (((x - a.0) * vx + (y - a.1) * vy) / len2).clamp(0.0, 1.0);
            let (qx, qy) = (a.0 + t * vx, a.1 + t * vy);
            (x - qx).powi(2) + (y - qy).powi(2) <= half * half
        });
    }

    fn rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, rgb: [f32; 3], alpha: f32) {
        self.fill((x0, y0, x1, y1), rgb, alpha, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1);
    }

    fn into_frame(self, brightness: f64) -> Frame {
        let b = brightness as f32;
        let data = self.px.iter().flat_map(|p| p.map(|v| (v * b).clamp(0.0, 1.0))).collect();
        Frame::new(self.h, self.w, data).expect("canvas dimensions")
    }
}

fn hsv(h_deg: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

/// Distinct per-player colour; hues avoid the grass greens and the ball's yellow.
pub fn player_color(index: usize, players: usize) -> [f32; 3] {
    let hue = 170.0 + 220.0 * (index as f64 + 0.5) / players as f64;
    let value = if index % 2 == 0 { 0.95 } else { 0.72 };
    hsv(hue, 0.85, value)
}

pub const BALL_COLOR: [f32; 3] = [1.0, 0.92, 0.2];
const LINE_COLOR: [f32; 3] = [1.0, 1.0, 1.0];
const GRASS: [[f32; 3]; 2] = [[0.18, 0.50, 0.20], [0.22, 0.58, 0.24]];

/// Field-to-pixel scale and the pixel position of field `(x, y)`.
pub fn field_to_pixel(x: f64, y: f64, height: usize, width: usize) -> (f64, f64) {
    let s = field_scale(height, width);
    (width as f64 / 2.0 + x * s, height as f64 / 2.0 + y * s)
}

fn field_scale(height: usize, width: usize) -> f64 {
    (width as f64 / 2.0).min(height as f64 / (2.0 * FIELD_HALF_HEIGHT))
}

pub fn player_radius(height: usize, width: usize) -> f64 {
    0.064 * field_scale(height, width)
}

fn render_pitch(state: &PitchState, nuisance: &NuisanceParams, height: usize, width: usize) -> Frame {
    let mut cv = Canvas::new(height, width);
    let s = field_scale(height, width);
    let (fx0, fy0) = field_to_pixel(-1.0, -FIELD_HALF_HEIGHT, height, width);
    let (fx1, fy1) = field_to_pixel(1.0, FIELD_HALF_HEIGHT, height, width);
    let tex = nuisance.background_texture_id;
    let period = (width as f64 / 8.0).max(2.0);
    for r in 0..height {
        for c in 0..width {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let on_field = x >= fx0 && x < fx1 && y >= fy0 && y < fy1;
            let rgb = if on_field {
                let band = match tex {
                    0 => (x / period) as usize,
                    1 => (y / period) as usize,
                    2 => (x / period) as usize + (y / period) as usize,
                    3 => 0,
                    _ => ((x + y) / period) as usize,
                };
                GRASS[band % 2]
            } else {
                [0.24, 0.24, 0.27]
            };
            cv.set(r, c, rgb);
        }
    }
    // Advertising boards just outside the long sides.
    let palettes: [[[f32; 3]; 3]; NUM_BANNERS as usize] = [
        [[0.85, 0.1, 0.1], [0.95, 0.95, 0.95], [0.1, 0.2, 0.7]],
        [[0.1, 0.1, 0.1], [0.9, 0.6, 0.1], [0.9, 0.9, 0.9]],
        [[0.2, 0.7, 0.9], [0.1, 0.1, 0.4], [0.9, 0.3, 0.6]],
        [[0.5, 0.2, 0.6], [0.9, 0.9, 0.3], [0.3, 0.3, 0.3]],
        [[0.9, 0.5, 0.4], [0.2, 0.5, 0.3], [0.95, 0.85, 0.7]],
    ];
    let pb = nuisance.sideline_banner_pattern as usize % palettes.len();
    let board = 0.06 * s;
    let block = width as f64 / (4.0 + 2.0 * pb as f64);
    for (y0, y1) in [(fy0 - board, fy0), (fy1, fy1 + board)] {
        let mut x = 0.0;
        let mut k = 0;
        while x < width as f64 {
            cv.rect(x, y0.max(0.0), (x + block).min(width as f64), y1.min(height as f64), palettes[pb][k % 3], 1.0);
            x += block;
            k += 1;
        }
    }
    // Markings.
    let lw = (0.012 * s).max(0.35);
    let px = |x: f64, y: f64| field_to_pixel(x, y, height, width);
    let h = FIELD_HALF_HEIGHT;
    for (a, b) in [
        ((-1.0, -h), (1.0, -h)),
        ((-1.0, h), (1.0, h)),
        ((-1.0, -h), (-1.0, h)),
        ((1.0, -h), (1.0, h)),
        ((0.0, -h), (0.0, h)),
        ((-1.0, -0.2), (-0.84, -0.2)),
        ((-0.84, -0.2), (-0.84, 0.2)),
        ((-0.84, 0.2), (-1.0, 0.2)),
        ((1.0, -0.2), (0.84, -0.2)),
        ((0.84, -0.2), (0.84, 0.2)),
        ((0.84, 0.2), (1.0, 0.2)),
    ] {
        cv.segment(px(a.0, a.1), px(b.0, b.1), lw, LINE_COLOR, 0.8);
    }
    let (cx, cy) = px(0.0, 0.0);
    let rc = 0.15 * s;
    cv.fill((cx - rc - lw, cy - rc - lw, cx + rc + lw, cy + rc + lw), LINE_COLOR, 0.8, |x, y| {
        (((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - rc).abs() <= lw / 2.0
    });
    // Ball shadow, players, ball.
    let b = &state.ball;
    let (bx, by) = px(b.x, b.y);
    let rb = 0.045 * s;
    cv.disc(bx, by, rb, [0.05, 0.15, 0.05], 0.6);
    let rp = player_radius(height, width);
    let n = state.players.len();
    for (i, p) in state.players.iter().enumerate() {
        let (x, y) = px(p.x, p.y);
        let color = player_color(i, n);
        cv.disc(x, y, rp, color, 1.0);
        let dark = color.map(|v| v * 0.45);
        // Direction tick, clear of the disc.
        let (gap, reach) = (rp + 0.015 * s, rp + 0.07 * s);
        let start = (x + p.dx * gap, y + p.dy * gap);
        let end = (x + p.dx * reach, y + p.dy * reach);
        cv.segment(start, end, (0.025 * s).max(0.5), dark, 1.0);
    }
    let lift = b.z * 0.16 * s;
    let rball = rb * (1.0 + b.z);
    cv.disc(bx, by - lift, rball, BALL_COLOR, 1.0);
    let tick = (bx + b.dx * (rball + 0.05 * s), by - lift + b.dy * (rball + 0.05 * s));
    cv.segment((bx, by - lift), tick, (0.02 * s).max(0.4), [0.35, 0.3, 0.05], 0.9);
    cv.into_frame(nuisance.ambient_brightness)
}

pub const ENEMY_BODY: [f32; 3] = [0.65, 0.12, 0.10];
const ENEMY_HEAD: [f32; 3] = [0.90, 0.70, 0.55];

fn render_corridor(state: &CorridorState, nuisance: &NuisanceParams, height: usize, width: usize) -> Frame {
    let mut cv = Canvas::new(height, width);
    let (hf, wf) = (height as f64, width as f64);
    let tex = nuisance.background_texture_id as f64;
    let lights = nuisance.sideline_banner_pattern as f64;
    for r in 0..height {
        for c in 0..width {
            let (u, v) = ((c as f64 + 0.5) / wf, (r as f64 + 0.5) / hf);
            let (du, dv) = (u - 0.5, v - 0.5);
            let rgb = if du.abs() < 0.08 && dv.abs() < 0.06 {
                [0.2, 0.2, 0.22]
            } else if du.abs() > dv.abs() * 1.4 + 0.08 {
                // Side walls with brick rows whose spacing follows the texture id.
                let depth = 0.08 / (du.abs() - 0.08 + 1e-3).max(0.02);
                let row = (dv / (du.abs() + 1e-3) * (3.0 + tex)).floor() as i64;
                let col = (depth * 2.0).floor() as i64;
                if (row + col).rem_euclid(2) == 0 {
                    [0.50, 0.45, 0.40]
                } else {
                    [0.42, 0.37, 0.33]
                }
            } else if dv < 0.0 {
                let depth = 1.0 / (-dv).max(0.02);
                let lit = du.abs() < 0.05 && ((depth * (0.5 + 0.25 * lights)).floor() as i64) % 2 == 0;
                if lit {
                    [0.85, 0.85, 0.75]
                } else {
                    [0.33, 0.34, 0.40]
                }
            } else {
                [0.40, 0.30, 0.20]
            };
            cv.set(r, c, rgb);
        }
    }
    let mut enemies: Vec<&Enemy> = state.nearest.iter().flatten().chain(&state.others).collect();
    enemies.sort_by(|a, b| a.h.total_cmp(&b.h));
    for e in enemies {
        let (x0, x1) = (e.left() * wf, e.right() * wf);
        let (y0, y1) = ((e.y - e.h / 2.0) * hf, (e.y + e.h / 2.0) * hf);
        cv.rect(x0, y0, x1, y1, ENEMY_BODY, 1.0);
        cv.rect(x0 + (x1 - x0) * 0.25, y0, x1 - (x1 - x0) * 0.25, y0 + (y1 - y0) * 0.22, ENEMY_HEAD, 1.0);
    }
    cv.into_frame(nuisance.ambient_brightness)
}

/// Deterministic function of `(state, nuisance, size)`.
pub fn render(state: &GameState, nuisance: &NuisanceParams, height: usize, width: usize) -> Frame {
    match state {
        GameState::Pitch(s) => render_pitch(s, nuisance, height, width),
        GameState::Corridor(s) => render_corridor(s, nuisance, height, width),
    }
}

// ---------------------------------------------------------------- generation

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7452_4149_4E00_0001,
            Split::Eval => 0x4556_414C_0000_0002,
        }
    }
}

/// Generator for frame `index` of `split`; splits never share a stream.
pub fn frame_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    rng.set_stream(index);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateSpec {
    pub env: Environment,
    pub count: usize,
    pub split: Split,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

/// Draws state and nuisance for one frame.
pub fn sample_frame(spec: &GenerateSpec, index: usize) -> (GameState, NuisanceParams) {
    let mut rng = frame_rng(spec.seed, spec.split, index as u64);
    let state = sample_state(&spec.env, &mut rng);
    let nuisance = NuisanceParams::sample(&mut rng);
    (state, nuisance)
}

/// Renders `count` frames into `out_dir/images/` and writes
/// `out_dir/manifest.json`; returns the manifest path.
pub fn generate_dataset(spec: &GenerateSpec, out_dir: &Path) -> Result<PathBuf, DatasetError> {
    spec.env.validate()?;
    if spec.height < 8 || spec.width < 8 {
        return Err(DatasetError::Invalid(format!("frame size {}x{} is too small", spec.height, spec.width)));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| DatasetError::Io { path: images.clone(), source })?;
    let mut manifest = Manifest::new(spec.env.variable_names(), out_dir);
    for i in 0..spec.count {
        let (state, nuisance) = sample_frame(spec, i);
        let rel = PathBuf::from(format!("images/{i:06}.png"));
        render(&state, &nuisance, spec.height, spec.width).save_png(&out_dir.join(&rel))?;
        manifest.entries.push(ManifestEntry { image_path: rel, state: state.to_state_vector() });
    }
    let path = out_dir.join("manifest.json");
    write_manifest(&manifest, &path)?;
    Ok(path)
}
