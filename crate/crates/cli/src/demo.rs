//! Pendulum rollout generator producing logs in the ingest format.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vizarel_core::ingest::{write_meta, write_step};
use vizarel_core::rollout::compute_returns;
use vizarel_core::{Experience, SessionMeta};

pub const GRAVITY: f64 = 10.0;
pub const MASS: f64 = 1.0;
pub const LENGTH: f64 = 1.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const MAX_SPEED: f64 = 8.0;
pub const DT: f64 = 0.05;
pub const DISCOUNT: f64 = 0.99;

const KP: f64 = 4.0;
const KD: f64 = 1.0;
const EXPLORATION_STD: f64 = 0.5;
const VALUE_NOISE: f64 = 0.05;
const RENDER_SIZE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoConfig {
    pub episodes: usize,
    pub steps: usize,
    pub seed: u64,
    pub render: bool,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            episodes: 20,
            steps: 200,
            seed: 0,
            render: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DemoOutput {
    pub log: PathBuf,
    pub steps: usize,
    pub renders: usize,
}

/// Wraps an angle to [-pi, pi).
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

/// One integration step. Velocity is updated first and the new velocity
/// moves the angle.
pub fn step_dynamics(theta: f64, theta_dot: f64, u: f64) -> (f64, f64) {
    let u = u.clamp(-MAX_TORQUE, MAX_TORQUE);
    let accel = -3.0 * GRAVITY / (2.0 * LENGTH) * theta.sin() + 3.0 * u / (MASS * LENGTH * LENGTH);
    let theta_dot = (theta_dot + accel * DT).clamp(-MAX_SPEED, MAX_SPEED);
    (theta + theta_dot * DT, theta_dot)
}

/// Reward components `[-angle^2, -0.1 speed^2, -0.001 torque^2]`.
pub fn reward_components(theta: f64, theta_dot: f64, u: f64) -> [f64; 3] {
    let a = wrap_angle(theta);
    [-(a * a), -0.1 * theta_dot * theta_dot, -0.001 * u * u]
}

pub fn observation(theta: f64, theta_dot: f64) -> Vec<f64> {
    vec![theta.sin(), theta.cos(), theta_dot]
}

pub fn meta() -> SessionMeta {
    SessionMeta {
        env_name: "pendulum".into(),
        obs_dim: 3,
        action_dim: 1,
        discount: DISCOUNT,
        obs_labels: Some(vec!["sin(theta)".into(), "cos(theta)".into(), "theta_dot".into()]),
        action_labels: Some(vec!["torque".into()]),
        reward_component_labels: Some(vec!["angle".into(), "velocity".into(), "torque".into()]),
    }
}

pub fn render_path(episode: usize, t: usize) -> String {
    format!("renders/ep{episode:05}_t{t:06}.png")
}

/// Simulates the episodes. Everything is drawn from one seeded stream, so
/// the same config always yields the same experiences.
pub fn simulate(config: &DemoConfig) -> Vec<Vec<Experience>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.episodes)
        .map(|e| simulate_episode(e, config, &mut rng))
        .collect()
}

fn simulate_episode(episode: usize, config: &DemoConfig, rng: &mut ChaCha8Rng) -> Vec<Experience> {
    let mut theta: f64 = rng.random_range(-PI..PI);
    let mut theta_dot: f64 = rng.random_range(-1.0..1.0);
    let mut steps = Vec::with_capacity(config.steps);
    for t in 0..config.steps {
        let noise: f64 = rng.sample(StandardNormal);
        let u = (-KP * wrap_angle(theta) - KD * theta_dot + EXPLORATION_STD * noise)
            .clamp(-MAX_TORQUE, MAX_TORQUE);
        let components = reward_components(theta, theta_dot, u);
        let obs = observation(theta, theta_dot);
        let (next_theta, next_theta_dot) = step_dynamics(theta, theta_dot, u);
        steps.push(Experience {
            episode_index: episode,
            t,
            obs,
            action: vec![u],
            reward: components.iter().sum(),
            reward_components: Some(components.to_vec()),
            next_obs: observation(next_theta, next_theta_dot),
            done: t + 1 == config.steps,
            value: None,
            next_value: None,
            render: config.render.then(|| render_path(episode, t)),
        });
        theta = next_theta;
        theta_dot = next_theta_dot;
    }

    // Value estimates: the discounted return tail plus noise proportional to it.
    let rewards: Vec<f64> = steps.iter().map(|s| s.reward).collect();
    let returns = compute_returns(&rewards, DISCOUNT);
    let values: Vec<f64> = returns
        .iter()
        .map(|&r| {
            let z: f64 = rng.sample(StandardNormal);
            r + VALUE_NOISE * r.abs() * z
        })
        .collect();
    for (t, step) in steps.iter_mut().enumerate() {
        step.value = Some(values[t]);
        step.next_value = values.get(t + 1).copied();
    }
    steps
}

/// Writes `demo.jsonl` (and `renders/` when enabled) into `out_dir`.
pub fn generate(config: &DemoConfig, out_dir: &Path) -> io::Result<DemoOutput> {
    fs::create_dir_all(out_dir)?;
    let episodes = simulate(config);
    let log = out_dir.join("demo.jsonl");
    let mut out = BufWriter::new(fs::File::create(&log)?);
    write_meta(&meta(), &mut out)?;
    let mut steps = 0;
    for ep in &episodes {
        for exp in ep {
            write_step(exp, &mut out)?;
            steps += 1;
        }
    }
    out.flush()?;

    let mut renders = 0;
    if config.render {
        fs::create_dir_all(out_dir.join("renders"))?;
        for ep in &episodes {
            for exp in ep {
                let theta = exp.obs[0].atan2(exp.obs[1]);
                let png = render_png(theta)?;
                fs::write(out_dir.join(render_path(exp.episode_index, exp.t)), png)?;
                renders += 1;
            }
        }
    }
    Ok(DemoOutput { log, steps, renders })
}

/// Draws the pendulum as an 8-bit grayscale PNG: a rod from the pivot with a
/// bob at its tip, angle 0 pointing up.
pub fn render_png(theta: f64) -> io::Result<Vec<u8>> {
    let size = RENDER_SIZE as usize;
    let c = (size as f64 - 1.0) / 2.0;
    let rod = size as f64 * 0.38;
    let tip = (c + rod * theta.sin(), c - rod * theta.cos());
    let mut pixels = vec![255u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64, y as f64);
            let v = if dist(p, tip) <= 5.0 {
                40
            } else if dist(p, (c, c)) <= 2.0 {
                0
            } else if segment_distance(p, (c, c), tip) <= 1.5 {
                110
            } else {
                continue;
            };
            pixels[y * size + x] = v;
        }
    }
    let mut bytes = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut bytes, RENDER_SIZE, RENDER_SIZE);
        encoder.set_color(png::ColorType::Grayscale);
        encoder.set_depth(png::BitDepth::Eight);
        let mut writer = encoder.write_header().map_err(io::Error::other)?;
        writer.write_image_data(&pixels).map_err(io::Error::other)?;
    }
    Ok(bytes)
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let s = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    dist(p, (a.0 + s * dx, a.1 + s * dy))
}
