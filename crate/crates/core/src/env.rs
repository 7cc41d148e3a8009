//! Cart-pole simulator with a flat-color rasterizer.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{Image, Rgb};

pub const GRAVITY: f64 = 9.8;
pub const CART_MASS: f64 = 1.0;
pub const POLE_MASS: f64 = 0.1;
pub const HALF_LENGTH: f64 = 0.5;
pub const FORCE: f64 = 10.0;
pub const DT: f64 = 0.02;
pub const X_LIMIT: f64 = 2.4;
pub const THETA_LIMIT: f64 = 12.0 * std::f64::consts::PI / 180.0;
pub const MAX_STEPS: u32 = 500;

pub const WHITE: Rgb = [255, 255, 255];
pub const CART_COLOR: Rgb = [0, 0, 0];
pub const POLE_COLOR: Rgb = [210, 180, 140];
pub const AXLE_COLOR: Rgb = [128, 128, 128];

/// Half-ranges used to normalize `(x, x_dot, theta, theta_dot)` to [0, 1].
pub const STATE_RANGES: [f64; 4] = [X_LIMIT, 3.0, THETA_LIMIT, 3.5];
pub const STATE_NAMES: [&str; 4] = ["cart_position", "cart_velocity", "pole_angle", "pole_angular_velocity"];

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("episode already finished; call reset")]
    EpisodeDone,
    #[error("invalid action {0}")]
    InvalidAction(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CartPoleState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub steps: u32,
}

impl CartPoleState {
    pub fn zero() -> Self {
        CartPoleState {
            x: 0.0,
            x_dot: 0.0,
            theta: 0.0,
            theta_dot: 0.0,
            steps: 0,
        }
    }

    pub fn vector(&self) -> [f64; 4] {
        [self.x, self.x_dot, self.theta, self.theta_dot]
    }

    pub fn failed(&self) -> bool {
        self.x.abs() > X_LIMIT || self.theta.abs() > THETA_LIMIT
    }

    pub fn done(&self) -> bool {
        self.failed() || self.steps >= MAX_STEPS
    }
}

/// Time derivative of `(x, x_dot, theta, theta_dot)` under a horizontal force.
pub fn derivatives(s: [f64; 4], force: f64) -> [f64; 4] {
    let total = CART_MASS + POLE_MASS;
    let pml = POLE_MASS * HALF_LENGTH;
    let (sin, cos) = s[2].sin_cos();
    let temp = (force + pml * s[3] * s[3] * sin) / total;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (HALF_LENGTH * (4.0 / 3.0 - POLE_MASS * cos * cos / total));
    let x_acc = temp - pml * theta_acc * cos / total;
    [s[1], x_acc, s[3], theta_acc]
}

pub fn action_force(action: usize) -> Result<f64, EnvError> {
    match action {
        0 => Ok(-FORCE),
        1 => Ok(FORCE),
        a => Err(EnvError::InvalidAction(a)),
    }
}

/// One semi-implicit Euler step; velocities update first.
pub fn dynamics(state: &CartPoleState, action: usize) -> Result<CartPoleState, EnvError> {
    let force = action_force(action)?;
    let d = derivatives(state.vector(), force);
    let x_dot = state.x_dot + DT * d[1];
    let x = state.x + DT * x_dot;
    let theta_dot = state.theta_dot + DT * d[3];
    let theta = state.theta + DT * theta_dot;
    Ok(CartPoleState {
        x,
        x_dot,
        theta,
        theta_dot,
        steps: state.steps + 1,
    })
}

/// Rasterizer geometry. The cart spans `cart_width` columns centred on the
/// linear map of `x` from `[-2.4, 2.4]` to `[margin, width - margin]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    pub cart_width: i64,
    pub cart_height: i64,
    pub cart_top: i64,
    pub pole_length: f64,
    pub pole_width: f64,
    pub axle_size: i64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            width: 160,
            height: 120,
            cart_width: 24,
            cart_height: 12,
            cart_top: 80,
            pole_length: 40.0,
            pole_width: 4.0,
            axle_size: 4,
        }
    }
}

impl RenderConfig {
    /// Continuous cart-centre column for cart position `x`.
    pub fn cart_center(&self, x: f64) -> f64 {
        let half = self.cart_width as f64 / 2.0;
        let mid = self.width as f64 / 2.0;
        mid + x / X_LIMIT * (mid - half)
    }

    pub fn cart_left(&self, x: f64) -> i64 {
        self.cart_center(x).round() as i64 - self.cart_width / 2
    }
}

pub fn render(state: &CartPoleState, cfg: &RenderConfig) -> Image {
    let mut img = Image::new(cfg.width, cfg.height, WHITE);
    let left = cfg.cart_left(state.x);
    img.fill_rect(left, cfg.cart_top, cfg.cart_width, cfg.cart_height, CART_COLOR);

    let pivot_x = (left + cfg.cart_width / 2) as f64;
    let pivot_y = cfg.cart_top as f64;
    let (sin, cos) = state.theta.sin_cos();
    let half_w = cfg.pole_width / 2.0;
    let reach = cfg.pole_length + cfg.pole_width;
    let x0 = ((pivot_x - reach).floor() as i64).max(0);
    let x1 = ((pivot_x + reach).ceil() as i64).min(cfg.width as i64 - 1);
    let y0 = ((pivot_y - reach).floor() as i64).max(0);
    let y1 = ((pivot_y + reach).ceil() as i64).min(cfg.height as i64 - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let rx = px as f64 + 0.5 - pivot_x;
            let ry = py as f64 + 0.5 - pivot_y;
            let along = rx * sin - ry * cos;
            let across = rx * cos + ry * sin;
            if (0.0..=cfg.pole_length).contains(&along) && across.abs() <= half_w {
                img.set(px as usize, py as usize, POLE_COLOR);
            }
        }
    }

    let a = cfg.axle_size;
    img.fill_rect(pivot_x as i64 - a / 2, cfg.cart_top - a / 2, a, a, AXLE_COLOR);
    img
}

/// Maps a raw state to `[0, 1]^4` over [`STATE_RANGES`], clipped.
pub fn ground_truth_features(state: &CartPoleState) -> [f64; 4] {
    let v = state.vector();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = ((v[i] / STATE_RANGES[i] + 1.0) / 2.0).clamp(0.0, 1.0);
    }
    out
}

pub fn denormalize(features: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (2.0 * features[i] - 1.0) * STATE_RANGES[i];
    }
    out
}

#[derive(Clone, Debug)]
pub struct CartPole {
    pub state: CartPoleState,
    pub render_config: RenderConfig,
    rng: ChaCha8Rng,
}

impl CartPole {
    pub fn new(seed: u64, render_config: RenderConfig) -> Self {
        let mut env = CartPole {
            state: CartPoleState::zero(),
            render_config,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        env.state = env.sample_initial();
        env
    }

    fn sample_initial(&mut self) -> CartPoleState {
        let mut u = || self.rng.gen_range(-0.05..=0.05);
        CartPoleState {
            x: u(),
            x_dot: u(),
            theta: u(),
            theta_dot: u(),
            steps: 0,
        }
    }

    /// Reseeds and draws a fresh initial state.
    pub fn reset(&mut self, seed: u64) -> (CartPoleState, Image) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.state = self.sample_initial();
        (self.state, self.render())
    }

    /// Draws a fresh initial state from the current stream.
    pub fn reset_next(&mut self) -> CartPoleState {
        self.state = self.sample_initial();
        self.state
    }

    /// Advances one step. Reward is 1 unless the new state has failed.
    pub fn step(&mut self, action: usize) -> Result<(CartPoleState, f64, bool), EnvError> {
        if self.state.done() {
            return Err(EnvError::EpisodeDone);
        }
        self.state = dynamics(&self.state, action)?;
        let reward = if self.state.failed() { 0.0 } else { 1.0 };
        Ok((self.state, reward, self.state.done()))
    }

    pub fn render(&self) -> Image {
        render(&self.state, &self.render_config)
    }
}

/// One line of a trajectory dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub step: u32,
    pub state: [f64; 4],
    pub action: Option<usize>,
    pub reward: f64,
    pub done: bool,
    pub frame_path: Option<String>,
}

pub fn write_trajectory(path: &Path, records: &[TrajectoryRecord]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Hand-tuned linear controller that keeps the pole up for the full episode.
pub fn balancing_action(state: &CartPoleState) -> usize {
    let u = state.theta + 0.5 * state.theta_dot + 0.01 * state.x + 0.1 * state.x_dot;
    (u > 0.0) as usize
}
