//! Streaming generation sessions: one forward per latent frame against a
//! sliding-window KV cache.

use std::sync::Arc;
use std::time::Instant;

use crate::autograd::{counters, Graph};
use crate::backbone::{grid_to_tokens, Backbone, FrameInput, Provenance};
use crate::codec::Codec;
use crate::error::{AaptError, Result};
use crate::rollout::{rollout_open, rollout_step, step_noise, Carry, RecycledInput};
use crate::tensor::Tensor;
use crate::video::Video;
use crate::world::{ControlSignal, ScaleStats, CONTROL_CHANNELS};

/// A generation stream that can move between threads.
#[derive(Clone, Debug)]
pub struct GenSession {
    model: Arc<Backbone>,
    carry: Carry,
    seed: u64,
    frame_counter: usize,
    nfe_counter: usize,
    /// Ablation hook: feed zeros to the recycled channel.
    pub zero_recycle: bool,
}

impl GenSession {
    /// Opens a stream from a token-major first latent frame `[tokens, C]`.
    pub fn open(model: Arc<Backbone>, first: &Tensor, prompt_id: usize, seed: u64) -> Result<Self> {
        let cfg = &model.cfg;
        if first.shape() != [cfg.tokens_per_frame(), cfg.latent_channels] {
            return Err(AaptError::Shape(format!("first latent {:?} does not match the model", first.shape())));
        }
        let g = Graph::no_grad();
        let b = model.bind_const(&g);
        let carry = rollout_open(&b, g.constant(first), prompt_id)?.carry();
        Ok(GenSession { model, carry, seed, frame_counter: 0, nfe_counter: 0, zero_recycle: false })
    }

    /// Opens a stream from one pixel frame, encoded on its own.
    pub fn open_image(model: Arc<Backbone>, codec: &Codec, image: &Video, prompt_id: usize, seed: u64) -> Result<Self> {
        if image.frames != 1 || image.height != codec.cfg.height || image.width != codec.cfg.width {
            return Err(AaptError::Shape(format!(
                "image {}x{}x{} does not match codec {}x{}",
                image.frames, image.height, image.width, codec.cfg.height, codec.cfg.width
            )));
        }
        let z = codec.encode(image)?;
        Self::open(model, &grid_to_tokens(&z.index0(0)), prompt_id, seed)
    }

    pub fn model(&self) -> &Backbone {
        &self.model
    }

    /// Generates the next latent frame `[tokens, C]` from a
    /// `[1, control_channels]` control row.
    pub fn generate_next(&mut self, control: &Tensor) -> Result<Tensor> {
        let g = Graph::no_grad();
        let b = self.model.bind_const(&g);
        let mut st = self.carry.resume(&g);
        let shape = [self.model.cfg.tokens_per_frame(), self.model.cfg.latent_channels];
        let eps = step_noise(self.seed, st.next_index, &shape);
        let mode = if self.zero_recycle { RecycledInput::Zeroed } else { RecycledInput::Detached };
        let out = rollout_step(&b, &mut st, g.constant(control), &eps, mode)?.value();
        self.carry = st.carry();
        self.frame_counter += 1;
        self.nfe_counter += 1;
        Ok(out)
    }

    /// Transformer forwards run so far, the context frame included.
    pub fn forwards(&self) -> usize {
        self.carry.cache.forwards
    }

    pub fn frame_counter(&self) -> usize {
        self.frame_counter
    }

    pub fn nfe_counter(&self) -> usize {
        self.nfe_counter
    }

    pub fn last_frame(&self) -> &Tensor {
        &self.carry.prev
    }

    pub fn resident_frames(&self) -> Vec<usize> {
        self.carry.cache.resident_frames()
    }

    pub fn cache_bytes(&self) -> usize {
        self.carry.cache.nbytes()
    }

    pub fn window_n(&self) -> usize {
        self.carry.cache.window_n
    }
}

/// Control row for one latent frame whose pixel frames all share `c`.
pub fn control_row(c: &ControlSignal, stats: &ScaleStats, temporal_factor: usize) -> Tensor {
    let n = stats.normalize(c);
    Tensor::from_fn(&[1, CONTROL_CHANNELS * temporal_factor], |i| n[i % CONTROL_CHANNELS])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Recycle,
    DiffusionForcing,
}

/// Idealised new-frame tokens processed per step and in total.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cost {
    pub per_step: usize,
    pub total: usize,
}

pub fn cost_model(scheme: Scheme, steps: usize, tokens_per_frame: usize) -> Result<Cost> {
    if steps < 1 {
        return Err(AaptError::Contract("cost model needs at least one step".into()));
    }
    let per_step = match scheme {
        Scheme::Recycle => tokens_per_frame,
        Scheme::DiffusionForcing => 2 * tokens_per_frame,
    };
    Ok(Cost { per_step, total: per_step * steps })
}

/// Multiply-accumulates spent per forward on the timestep conditioning,
/// which does not scale with tokens.
pub fn conditioning_macs(model: &Backbone) -> u64 {
    let c = &model.cfg;
    let d = c.model_dim as u64;
    let per_block = d * 6 * d;
    (c.time_embed_dim as u64 * d + d * d + c.layers as u64 * per_block + d * 2 * d) + c.control_channels as u64 * d
}

/// Measured per-step MACs of both schemes at steady state, with the
/// per-forward conditioning constant removed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeasuredCost {
    pub recycle_macs: f64,
    pub diffusion_forcing_macs: f64,
}

impl MeasuredCost {
    pub fn ratio(&self) -> f64 {
        self.recycle_macs / self.diffusion_forcing_macs
    }
}

/// Runs `steps` steps of each scheme after a warm-up of `window_n` frames.
/// The diffusion-forcing analog recomputes the previous frame as a clean
/// input (replacing its cache entry) before processing the new noisy frame,
/// so it spends two frame forwards per step.
pub fn measure_cost(model: &Backbone, first: &Tensor, controls: &[Tensor], seed: u64) -> Result<MeasuredCost> {
    let n = model.cfg.window_n;
    if controls.len() <= n {
        return Err(AaptError::Contract("need more controls than the window".into()));
    }
    let konst = conditioning_macs(model) as f64;
    let shape = [model.cfg.tokens_per_frame(), model.cfg.latent_channels];
    let g = Graph::no_grad();
    let b = model.bind_const(&g);
    let mut st = rollout_open(&b, g.constant(first), 0)?;
    let mut rec = 0u64;
    for (i, c) in controls.iter().enumerate() {
        let eps = step_noise(seed, st.next_index, &shape);
        counters::reset();
        rollout_step(&b, &mut st, g.constant(c), &eps, RecycledInput::Detached)?;
        if i >= n {
            rec += counters::macs();
        }
    }
    let g = Graph::no_grad();
    let b = model.bind_const(&g);
    let mut st = rollout_open(&b, g.constant(first), 0)?;
    let zeros = g.constant(&Tensor::zeros(&shape));
    let mut df = 0u64;
    for (i, c) in controls.iter().enumerate() {
        let k = st.next_index;
        let eps = step_noise(seed, k, &shape);
        counters::reset();
        if k > 1 {
            let prev = st.cache.frames.pop().ok_or_else(|| AaptError::Contract("empty cache".into()))?;
            let clean = FrameInput { noisy: st.prev, recycled: zeros, control: g.constant(c), t: 0.0 };
            b.forward_step(&mut st.cache, &clean, prev.frame_index, Provenance::Generated)?;
        }
        let fi = FrameInput { noisy: g.constant(&eps), recycled: zeros, control: g.constant(c), t: 1.0 };
        let out = b.forward_step(&mut st.cache, &fi, k, Provenance::Generated)?.out;
        st.cache.evict();
        st.prev = g.constant(&eps).sub(out);
        st.next_index += 1;
        if i >= n {
            df += counters::macs();
        }
    }
    let steps = (controls.len() - n) as f64;
    Ok(MeasuredCost { recycle_macs: rec as f64 / steps - konst, diffusion_forcing_macs: df as f64 / steps - 2.0 * konst })
}

/// Step latencies and cache sizes of a streaming run.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub window_n: usize,
    pub step_ms: Vec<f64>,
    pub cache_bytes: Vec<usize>,
    pub nfe: usize,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    if s.is_empty() {
        return f64::NAN;
    }
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

impl BenchReport {
    pub fn min_ms(&self) -> f64 {
        self.step_ms.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_ms(&self) -> f64 {
        self.step_ms.iter().sum::<f64>() / self.step_ms.len().max(1) as f64
    }

    pub fn p99_ms(&self) -> f64 {
        let mut s = self.step_ms.clone();
        s.sort_by(f64::total_cmp);
        s.get(((s.len() as f64 * 0.99).ceil() as usize).saturating_sub(1)).copied().unwrap_or(f64::NAN)
    }

    /// Median step time over frames `a..=b` (1-based).
    pub fn window_ms(&self, a: usize, b: usize) -> f64 {
        median(&self.step_ms[a - 1..b.min(self.step_ms.len())])
    }

    /// Relative change between frames `[N+1, 2N]` and the last window.
    pub fn latency_drift(&self) -> f64 {
        let n = self.window_n;
        let end = self.step_ms.len();
        let early = self.window_ms(n + 1, 2 * n);
        let late = self.window_ms(end - n + 1, end);
        (late - early).abs() / early
    }

    pub fn memory_drift(&self) -> f64 {
        let n = self.window_n;
        let early = self.cache_bytes[2 * n - 1] as f64;
        let late = *self.cache_bytes.last().unwrap() as f64;
        (late - early).abs() / early
    }

    pub fn to_kv(&self) -> String {
        let n = self.window_n;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
        kv("steps", self.step_ms.len().to_string());
        kv("window_n", n.to_string());
        kv("warmup_frames", n.to_string());
        kv("nfe", self.nfe.to_string());
        kv("step_ms_min", format!("{:.4}", self.min_ms()));
        kv("step_ms_mean", format!("{:.4}", self.mean_ms()));
        kv("step_ms_p99", format!("{:.4}", self.p99_ms()));
        kv("warmup_ms_mean", format!("{:.4}", self.step_ms[..n.min(self.step_ms.len())].iter().sum::<f64>() / n.max(1) as f64));
        kv("steady_ms_first_window", format!("{:.4}", self.window_ms(n + 1, 2 * n)));
        kv("steady_ms_last_window", format!("{:.4}", self.window_ms(self.step_ms.len() - n + 1, self.step_ms.len())));
        kv("cache_bytes_2n", self.cache_bytes[(2 * n).min(self.cache_bytes.len()) - 1].to_string());
        kv("cache_bytes_last", self.cache_bytes.last().copied().unwrap_or(0).to_string());
        kv("latency_drift", format!("{:.4}", self.latency_drift()));
        kv("memory_drift", format!("{:.4}", self.memory_drift()));
        s
    }
}

/// Generates `steps` frames with zero controls, timing each step. Each
/// timing is the best of `repeats` runs of the same step.
pub fn bench(session: &mut GenSession, steps: usize, repeats: usize) -> Result<BenchReport> {
    let n = session.window_n();
    if steps <= 2 * n {
        return Err(AaptError::Contract(format!("bench needs more than {} steps", 2 * n)));
    }
    let cc = session.model().cfg.control_channels;
    let control = Tensor::zeros(&[1, cc]);
    let mut step_ms = Vec::with_capacity(steps);
    let mut cache_bytes = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut best = f64::INFINITY;
        for _ in 1..repeats.max(1) {
            let mut probe = session.clone();
            let t0 = Instant::now();
            probe.generate_next(&control)?;
            best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        }
        let t0 = Instant::now();
        session.generate_next(&control)?;
        best = best.min(t0.elapsed().as_secs_f64() * 1e3);
        step_ms.push(best);
        cache_bytes.push(session.cache_bytes());
    }
    Ok(BenchReport { window_n: n, step_ms, cache_bytes, nfe: session.nfe_counter() })
}

pub const FRAME_MAGIC: &[u8; 7] = b"AAPTFR1";

/// One decoded pixel frame on the wire: magic, u32 frame index, u16 width,
/// u16 height (little-endian), then `height` rows of RGB8.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameOut {
    pub frame_index: u32,
    pub width: u16,
    pub height: u16,
    pub rgb: Vec<u8>,
}

impl FrameOut {
    /// Frame `t` of `v`, quantized to RGB8.
    pub fn from_video(v: &Video, t: usize, frame_index: u32) -> Result<Self> {
        if t >= v.frames || v.width > u16::MAX as usize || v.height > u16::MAX as usize {
            return Err(AaptError::Shape(format!("frame {t} of a {}-frame {}x{} video", v.frames, v.height, v.width)));
        }
        Ok(FrameOut { frame_index, width: v.width as u16, height: v.height as u16, rgb: v.slice(t, t + 1).to_rgb8() })
    }

    pub fn to_video(&self) -> Result<Video> {
        Video::from_rgb8(1, self.height as usize, self.width as usize, &self.rgb)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(15 + self.rgb.len());
        b.extend_from_slice(FRAME_MAGIC);
        b.extend_from_slice(&self.frame_index.to_le_bytes());
        b.extend_from_slice(&self.width.to_le_bytes());
        b.extend_from_slice(&self.height.to_le_bytes());
        b.extend_from_slice(&self.rgb);
        b
    }

    pub fn decode(b: &[u8]) -> Result<Self> {
        if b.len() < 15 || &b[..7] != FRAME_MAGIC {
            return Err(AaptError::Format("not a frame (bad magic or short header)".into()));
        }
        let frame_index = u32::from_le_bytes(b[7..11].try_into().unwrap());
        let width = u16::from_le_bytes(b[11..13].try_into().unwrap());
        let height = u16::from_le_bytes(b[13..15].try_into().unwrap());
        let want = 3 * width as usize * height as usize;
        if b.len() - 15 != want {
            return Err(AaptError::Format(format!("frame payload is {} bytes, expected {want}", b.len() - 15)));
        }
        Ok(FrameOut { frame_index, width, height, rgb: b[15..].to_vec() })
    }
}

/// Concatenated frame records, as written to `frames.bin`.
pub fn decode_frame_stream(mut b: &[u8]) -> Result<Vec<FrameOut>> {
    let mut out = Vec::new();
    while !b.is_empty() {
        if b.len() < 15 {
            return Err(AaptError::Format("truncated frame record".into()));
        }
        let n = 15 + 3 * u16::from_le_bytes(b[11..13].try_into().unwrap()) as usize * u16::from_le_bytes(b[13..15].try_into().unwrap()) as usize;
        if b.len() < n {
            return Err(AaptError::Format("truncated frame record".into()));
        }
        out.push(FrameOut::decode(&b[..n])?);
        b = &b[n..];
    }
    Ok(out)
}
