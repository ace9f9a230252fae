//! Procedural camera-controllable 2D world.
//!
//! An infinite seeded texture (smooth plane waves plus sparse blob
//! landmarks) is viewed through a pan/zoom/rotate camera. Every control
//! sequence has an exact ground-truth rendering, which is what the drift and
//! control metrics compare against.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{AaptError, Result};
use crate::tensor::Tensor;
use crate::video::Video;

/// Number of scene classes; a clip's prompt id is `seed % SCENE_CLASSES`.
pub const SCENE_CLASSES: usize = 4;

/// Base control channels: dx, dy, d_zoom, d_rot.
pub const CONTROL_CHANNELS: usize = 4;

pub const EPISODE_MAGIC: &[u8; 8] = b"AAPTEP1\0";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub x: f64,
    pub y: f64,
    /// Log magnification, kept within `[-1, 1]`.
    pub zoom: f64,
    pub rot: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldState {
    pub seed: u64,
    pub camera: Camera,
}

impl WorldState {
    /// Starting pose derived from the seed.
    pub fn from_seed(seed: u64) -> Self {
        let h = splitmix(seed ^ 0x5eed_ca3e);
        let x = (h % 10_000) as f64 * 0.1;
        let y = ((h >> 20) % 10_000) as f64 * 0.1;
        WorldState { seed, camera: Camera { x, y, zoom: 0.0, rot: 0.0 } }
    }

    pub fn prompt_id(&self) -> usize {
        (self.seed % SCENE_CLASSES as u64) as usize
    }

    /// Applies one relative control. Translation is expressed in screen
    /// pixels of the current view.
    pub fn apply(&mut self, c: &ControlSignal) {
        let cam = &mut self.camera;
        let s = (-cam.zoom).exp();
        let (sn, cs) = cam.rot.sin_cos();
        let (dx, dy) = (c.dx as f64, c.dy as f64);
        cam.x += (cs * dx - sn * dy) * s;
        cam.y += (sn * dx + cs * dy) * s;
        cam.zoom = (cam.zoom + c.dzoom as f64).clamp(-1.0, 1.0);
        cam.rot += c.drot as f64;
    }
}

/// Frame-to-frame camera change, in raw units (pixels, log-zoom, radians).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlSignal {
    pub dx: f32,
    pub dy: f32,
    pub dzoom: f32,
    pub drot: f32,
}

impl ControlSignal {
    pub fn new(dx: f32, dy: f32, dzoom: f32, drot: f32) -> Self {
        ControlSignal { dx, dy, dzoom, drot }
    }

    pub fn as_array(&self) -> [f32; CONTROL_CHANNELS] {
        [self.dx, self.dy, self.dzoom, self.drot]
    }

    pub fn from_slice(v: &[f32]) -> Self {
        ControlSignal { dx: v[0], dy: v[1], dzoom: v[2], drot: v[3] }
    }

    pub fn is_zero(&self) -> bool {
        self.as_array().iter().all(|v| *v == 0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub initial: WorldState,
    /// One control per pixel frame after the first.
    pub controls: Vec<ControlSignal>,
}

impl Trajectory {
    pub fn still(initial: WorldState, length: usize) -> Self {
        Trajectory { initial, controls: vec![ControlSignal::default(); length] }
    }

    pub fn frames(&self) -> usize {
        self.controls.len() + 1
    }

    /// Camera pose at every frame.
    pub fn poses(&self) -> Vec<Camera> {
        let mut st = self.initial;
        let mut out = vec![st.camera];
        for c in &self.controls {
            st.apply(c);
            out.push(st.camera);
        }
        out
    }

    pub fn extend(&mut self, more: &[ControlSignal]) {
        self.controls.extend_from_slice(more);
    }
}

/// Random-walk statistics for sampled trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionProfile {
    pub name: String,
    /// Stationary standard deviation per channel (dx, dy, dzoom, drot).
    pub std: [f32; CONTROL_CHANNELS],
    /// Per-step clip bound per channel.
    pub bound: [f32; CONTROL_CHANNELS],
    /// AR(1) coefficient of the walk.
    pub smoothness: f32,
}

impl MotionProfile {
    pub fn zero() -> Self {
        MotionProfile { name: "static".into(), std: [0.0; 4], bound: [0.0; 4], smoothness: 0.9 }
    }

    pub fn default_walk() -> Self {
        MotionProfile {
            name: "default".into(),
            std: [0.4, 0.4, 0.01, 0.01],
            bound: [1.2, 1.2, 0.03, 0.03],
            smoothness: 0.9,
        }
    }

    /// Translation-only walk.
    pub fn pan() -> Self {
        MotionProfile { name: "pan".into(), std: [0.4, 0.4, 0.0, 0.0], bound: [1.2, 1.2, 0.0, 0.0], smoothness: 0.9 }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "static" => Ok(Self::zero()),
            "default" => Ok(Self::default_walk()),
            "pan" => Ok(Self::pan()),
            other => Err(AaptError::Format(format!("unknown motion profile {other:?}"))),
        }
    }
}

/// Smooth bounded random walk over controls.
pub fn sample_trajectory<R: Rng + ?Sized>(rng: &mut R, initial: WorldState, length: usize, profile: &MotionProfile) -> Trajectory {
    let rho = profile.smoothness.clamp(0.0, 0.999);
    let innov = (1.0 - rho * rho).sqrt();
    let mut state = [0.0f32; CONTROL_CHANNELS];
    for (c, s) in state.iter_mut().enumerate() {
        let z: f32 = rng.sample(StandardNormal);
        *s = (z * profile.std[c]).clamp(-profile.bound[c], profile.bound[c]);
    }
    let mut zoom = initial.camera.zoom as f32;
    let mut controls = Vec::with_capacity(length);
    for _ in 0..length {
        let mut v = [0.0f32; CONTROL_CHANNELS];
        for c in 0..CONTROL_CHANNELS {
            let z: f32 = rng.sample(StandardNormal);
            state[c] = (rho * state[c] + innov * profile.std[c] * z).clamp(-profile.bound[c], profile.bound[c]);
            v[c] = state[c];
        }
        // reflect the zoom walk at the log-zoom limits
        if (zoom + v[2]).abs() > 1.0 {
            state[2] = -state[2];
            v[2] = state[2];
        }
        zoom += v[2];
        controls.push(ControlSignal::from_slice(&v));
    }
    Trajectory { initial, controls }
}

pub(crate) fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

#[derive(Clone, Copy, Debug)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: f64,
}

const PALETTES: [[[f32; 3]; 3]; SCENE_CLASSES] = [
    [[0.15, 0.35, 0.15], [0.55, 0.75, 0.35], [0.9, 0.85, 0.3]],
    [[0.1, 0.2, 0.45], [0.4, 0.65, 0.85], [0.95, 0.95, 0.9]],
    [[0.45, 0.25, 0.1], [0.85, 0.65, 0.4], [0.2, 0.1, 0.05]],
    [[0.3, 0.3, 0.3], [0.7, 0.7, 0.75], [0.85, 0.2, 0.2]],
];

/// Seeded infinite texture.
#[derive(Clone, Debug)]
pub struct Texture {
    seed: u64,
    waves: Vec<Wave>,
    palette: [[f32; 3]; 3],
    cell: f64,
    blob_sigma: f64,
    density: f64,
}

impl Texture {
    pub fn new(seed: u64) -> Self {
        let mut h = splitmix(seed);
        let mut next = || {
            h = splitmix(h);
            unit(h)
        };
        let waves = (0..4)
            .map(|i| {
                let theta = next() * std::f64::consts::TAU;
                let wavelength = 12.0 + 14.0 * next();
                let k = std::f64::consts::TAU / wavelength;
                Wave { kx: k * theta.cos(), ky: k * theta.sin(), phase: next() * std::f64::consts::TAU, amp: 1.0 / (1.0 + i as f64 * 0.5) }
            })
            .collect::<Vec<_>>();
        Texture {
            seed,
            waves,
            palette: PALETTES[(seed % SCENE_CLASSES as u64) as usize],
            cell: 10.0,
            blob_sigma: 1.8,
            density: 0.35,
        }
    }

    pub fn sample(&self, wx: f64, wy: f64) -> [f32; 3] {
        let norm: f64 = self.waves.iter().map(|w| w.amp).sum();
        let s: f64 = self.waves.iter().map(|w| w.amp * (w.kx * wx + w.ky * wy + w.phase).cos()).sum::<f64>() / norm;
        let m = ((s + 1.0) * 0.5).clamp(0.0, 1.0);
        let m = m * m * (3.0 - 2.0 * m);
        let [lo, hi, accent] = self.palette;
        let mut rgb = [0.0f64; 3];
        for c in 0..3 {
            rgb[c] = lo[c] as f64 + (hi[c] - lo[c]) as f64 * m;
        }
        let cx = (wx / self.cell).floor() as i64;
        let cy = (wy / self.cell).floor() as i64;
        for oy in -1..=1 {
            for ox in -1..=1 {
                let (ix, iy) = (cx + ox, cy + oy);
                let hsh = splitmix(self.seed ^ splitmix((ix as u64).wrapping_mul(0x1f1f_1f1f) ^ (iy as u64).wrapping_mul(0x7777_7777_0000_0001)));
                if unit(hsh) > self.density {
                    continue;
                }
                let px = (ix as f64 + 0.2 + 0.6 * unit(splitmix(hsh))) * self.cell;
                let py = (iy as f64 + 0.2 + 0.6 * unit(splitmix(hsh ^ 1))) * self.cell;
                let r2 = (wx - px).powi(2) + (wy - py).powi(2);
                let wgt = (-r2 / (2.0 * self.blob_sigma * self.blob_sigma)).exp();
                if wgt < 1e-4 {
                    continue;
                }
                let tint = 0.75 + 0.25 * unit(splitmix(hsh ^ 2));
                for c in 0..3 {
                    rgb[c] += (accent[c] as f64 * tint - rgb[c]) * wgt;
                }
            }
        }
        [rgb[0] as f32, rgb[1] as f32, rgb[2] as f32]
    }

    /// Renders one `height x width` view.
    pub fn render_view(&self, cam: &Camera, height: usize, width: usize, out: &mut [f32]) {
        let hw = height * width;
        let s = (-cam.zoom).exp();
        let (sn, cs) = cam.rot.sin_cos();
        for v in 0..height {
            for u in 0..width {
                let lx = (u as f64 + 0.5 - width as f64 / 2.0) * s;
                let ly = (v as f64 + 0.5 - height as f64 / 2.0) * s;
                let wx = cam.x + cs * lx - sn * ly;
                let wy = cam.y + sn * lx + cs * ly;
                let rgb = self.sample(wx, wy);
                for c in 0..3 {
                    out[c * hw + v * width + u] = rgb[c];
                }
            }
        }
    }
}

/// Ground-truth video for a trajectory.
pub fn render_world(seed: u64, trajectory: &Trajectory, frames: usize, height: usize, width: usize) -> Result<Video> {
    if frames != trajectory.frames() {
        return Err(AaptError::Shape(format!("{} controls cannot describe {frames} frames", trajectory.controls.len())));
    }
    let tex = Texture::new(seed);
    let mut video = Video::zeros(frames, height, width);
    for (t, cam) in trajectory.poses().iter().enumerate() {
        tex.render_view(cam, height, width, video.frame_mut(t));
    }
    Ok(video)
}

/// Per-channel scale used to bring controls to roughly unit spread.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleStats {
    pub std: [f32; CONTROL_CHANNELS],
}

impl Default for ScaleStats {
    fn default() -> Self {
        ScaleStats { std: [1.0; CONTROL_CHANNELS] }
    }
}

impl ScaleStats {
    /// Population standard deviation of each channel over all controls.
    /// Channels that never move get scale 1.
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut sum = [0.0f64; CONTROL_CHANNELS];
        let mut sq = [0.0f64; CONTROL_CHANNELS];
        let mut n = 0usize;
        for t in trajs {
            for c in &t.controls {
                for (k, v) in c.as_array().iter().enumerate() {
                    sum[k] += *v as f64;
                    sq[k] += (*v as f64).powi(2);
                }
                n += 1;
            }
        }
        let mut std = [1.0f32; CONTROL_CHANNELS];
        if n > 0 {
            for k in 0..CONTROL_CHANNELS {
                let mean = sum[k] / n as f64;
                let var = (sq[k] / n as f64 - mean * mean).max(0.0);
                if var > 1e-12 {
                    std[k] = var.sqrt() as f32;
                }
            }
        }
        ScaleStats { std }
    }

    pub fn normalize(&self, c: &ControlSignal) -> [f32; CONTROL_CHANNELS] {
        let a = c.as_array();
        std::array::from_fn(|k| a[k] / self.std[k])
    }

    pub fn denormalize(&self, v: &[f32]) -> ControlSignal {
        ControlSignal::new(v[0] * self.std[0], v[1] * self.std[1], v[2] * self.std[2], v[3] * self.std[3])
    }
}

/// Control width seen by the backbone per latent frame.
pub fn control_dim(temporal_factor: usize) -> usize {
    CONTROL_CHANNELS * temporal_factor
}

/// Per-latent-position control embedding, `[positions, 4 * temporal_factor]`.
///
/// Position 0 is the given first frame and carries zeros; position `k`
/// stacks the normalized controls of the pixel frames in chunk `k`.
/// Any normalized component beyond `outlier_threshold` rejects the sample.
pub fn encode_camera(controls: &[ControlSignal], stats: &ScaleStats, temporal_factor: usize, outlier_threshold: f32) -> Result<Tensor> {
    if controls.len() % temporal_factor != 0 {
        return Err(AaptError::Shape(format!("{} controls is not a multiple of temporal factor {temporal_factor}", controls.len())));
    }
    let positions = 1 + controls.len() / temporal_factor;
    let dim = control_dim(temporal_factor);
    let mut data = vec![0.0f32; positions * dim];
    for (i, c) in controls.iter().enumerate() {
        let n = stats.normalize(c);
        if let Some(bad) = n.iter().find(|v| v.abs() > outlier_threshold || !v.is_finite()) {
            return Err(AaptError::Rejected(format!("control {i} has normalized component {bad}")));
        }
        let pos = 1 + i / temporal_factor;
        let slot = i % temporal_factor;
        data[pos * dim + slot * CONTROL_CHANNELS..pos * dim + (slot + 1) * CONTROL_CHANNELS].copy_from_slice(&n);
    }
    Tensor::new(vec![positions, dim], data)
}

/// One synthetic training episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingClip {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub trajectory: Trajectory,
    /// Interleaved RGB8 pixels, when stored.
    pub rgb: Option<Vec<u8>>,
}

impl TrainingClip {
    pub fn frames(&self) -> usize {
        self.trajectory.frames()
    }

    pub fn prompt_id(&self) -> usize {
        self.trajectory.initial.prompt_id()
    }

    /// Stored pixels, or a fresh ground-truth render when none are stored.
    pub fn video(&self) -> Result<Video> {
        match &self.rgb {
            Some(rgb) => Video::from_rgb8(self.frames(), self.height, self.width, rgb),
            None => render_world(self.seed, &self.trajectory, self.frames(), self.height, self.width),
        }
    }
}

/// Deterministic clip from `(seed, frames, profile)`.
pub fn generate_clip(seed: u64, frames: usize, profile: &MotionProfile, height: usize, width: usize, with_pixels: bool) -> Result<TrainingClip> {
    if frames == 0 {
        return Err(AaptError::Shape("clip needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x7a3c_0b5e));
    let trajectory = sample_trajectory(&mut rng, WorldState::from_seed(seed), frames - 1, profile);
    let rgb = if with_pixels { Some(render_world(seed, &trajectory, frames, height, width)?.to_rgb8()) } else { None };
    Ok(TrainingClip { seed, height, width, trajectory, rgb })
}

pub fn write_episode(path: impl AsRef<Path>, clip: &TrainingClip) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EPISODE_MAGIC);
    buf.extend_from_slice(&(clip.frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.height as u32).to_le_bytes());
    buf.extend_from_slice(&(clip.width as u32).to_le_bytes());
    buf.extend_from_slice(&(CONTROL_CHANNELS as u32).to_le_bytes());
    buf.extend_from_slice(&clip.seed.to_le_bytes());
    for c in &clip.trajectory.controls {
        for v in c.as_array() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &clip.rgb {
        Some(rgb) => {
            buf.push(1);
            buf.extend_from_slice(rgb);
        }
        None => buf.push(0),
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(AaptError::Format(format!("truncated: need {n} bytes at offset {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_episode(path: impl AsRef<Path>) -> Result<TrainingClip> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    if cur.take(8)? != EPISODE_MAGIC {
        return Err(AaptError::Format("bad episode magic".into()));
    }
    let frames = cur.u32()? as usize;
    let height = cur.u32()? as usize;
    let width = cur.u32()? as usize;
    let cdim = cur.u32()? as usize;
    if cdim != CONTROL_CHANNELS {
        return Err(AaptError::Format(format!("control_dim {cdim}, expected {CONTROL_CHANNELS}")));
    }
    if frames == 0 {
        return Err(AaptError::Format("episode with zero frames".into()));
    }
    let seed = cur.u64()?;
    let mut controls = Vec::with_capacity(frames - 1);
    for _ in 0..frames - 1 {
        let v = [cur.f32()?, cur.f32()?, cur.f32()?, cur.f32()?];
        controls.push(ControlSignal::from_slice(&v));
    }
    let flag = cur.take(1)?[0];
    let rgb = match flag {
        0 => None,
        1 => Some(cur.take(frames * height * width * 3)?.to_vec()),
        f => return Err(AaptError::Format(format!("bad payload flag {f}"))),
    };
    Ok(TrainingClip { seed, height, width, trajectory: Trajectory { initial: WorldState::from_seed(seed), controls }, rgb })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub seed: u64,
    pub frames: usize,
    pub profile: String,
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let text: String = entries.iter().map(|e| format!("{},{},{}\n", e.seed, e.frames, e.profile)).collect();
    fs::write(path, text)?;
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let bad = || AaptError::Format(format!("manifest line {}: {line:?}", i + 1));
        if parts.len() != 3 {
            return Err(bad());
        }
        out.push(ManifestEntry {
            seed: parts[0].trim().parse().map_err(|_| bad())?,
            frames: parts[1].trim().parse().map_err(|_| bad())?,
            profile: parts[2].trim().to_string(),
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&fs::read_to_string(path)?)
}

impl ManifestEntry {
    pub fn regenerate(&self, height: usize, width: usize, with_pixels: bool) -> Result<TrainingClip> {
        generate_clip(self.seed, self.frames, &MotionProfile::named(&self.profile)?, height, width, with_pixels)
    }
}
