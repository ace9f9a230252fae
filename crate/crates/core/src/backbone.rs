//! Block-causal diffusion transformer shared by generator and discriminator.
//!
//! Sequence: learned prompt tokens, then one span of `tokens_per_frame`
//! tokens per latent frame. Every frame token carries three channel groups
//! (noisy-or-clean frame, recycled previous frame, control plane) that are
//! projected and summed, which is the same as one projection over their
//! channel concatenation.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{AaptError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub prompt_tokens: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    pub window_n: usize,
    pub latent_channels: usize,
    pub control_channels: usize,
    pub temporal_rope_interval: f32,
    /// Spatial coordinates are rescaled so the grid always spans this extent.
    pub spatial_rope_extent: f32,
    pub mlp_ratio: usize,
    pub time_embed_dim: usize,
    pub scene_classes: usize,
}

/// Channel counts of the three concatenated input groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputChannels {
    pub noise_or_frame: usize,
    pub recycled: usize,
    pub control: usize,
}

impl BackboneConfig {
    pub fn desk() -> Self {
        BackboneConfig {
            model_dim: 128,
            layers: 4,
            heads: 4,
            prompt_tokens: 4,
            latent_h: 8,
            latent_w: 8,
            window_n: 8,
            latent_channels: 8,
            control_channels: 16,
            temporal_rope_interval: 1.0,
            spatial_rope_extent: 8.0,
            mlp_ratio: 4,
            time_embed_dim: 64,
            scene_classes: crate::world::SCENE_CLASSES,
        }
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn input_channels(&self) -> InputChannels {
        InputChannels { noise_or_frame: self.latent_channels, recycled: self.latent_channels, control: self.control_channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_n < 1 {
            return Err(AaptError::Config("window_n must be >= 1".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(AaptError::Config("model_dim must be divisible by heads".into()));
        }
        if self.head_dim() % 4 != 0 {
            return Err(AaptError::Config("head dim must be a multiple of 4 for 3-axis rotary embedding".into()));
        }
        if self.prompt_tokens == 0 || self.tokens_per_frame() == 0 || self.layers == 0 {
            return Err(AaptError::Config("prompt_tokens, tokens_per_frame and layers must be positive".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(AaptError::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpanKind {
    Prompt,
    Frame,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub kind: SpanKind,
    pub frame_index: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenLayout {
    pub spans: Vec<Span>,
}

impl TokenLayout {
    /// Prompt span followed by frames `0..frames`.
    pub fn new(prompt_tokens: usize, frames: usize, tokens_per_frame: usize) -> Self {
        Self::with_frames(prompt_tokens, &(0..frames).collect::<Vec<_>>(), tokens_per_frame)
    }

    pub fn with_frames(prompt_tokens: usize, frames: &[usize], tokens_per_frame: usize) -> Self {
        let mut spans = vec![Span { kind: SpanKind::Prompt, frame_index: 0, start: 0, end: prompt_tokens }];
        let mut at = prompt_tokens;
        for &f in frames {
            spans.push(Span { kind: SpanKind::Frame, frame_index: f, start: at, end: at + tokens_per_frame });
            at += tokens_per_frame;
        }
        TokenLayout { spans }
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_spans(&self) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(|s| s.kind == SpanKind::Frame)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.spans.first().ok_or_else(|| AaptError::Contract("empty layout".into()))?;
        if first.kind != SpanKind::Prompt || first.start != 0 {
            return Err(AaptError::Contract("layout must start with the prompt span".into()));
        }
        let mut at = first.end;
        let mut last: Option<usize> = None;
        for s in &self.spans[1..] {
            if s.kind != SpanKind::Frame || s.start != at || s.end <= s.start {
                return Err(AaptError::Contract("frame spans must tile the sequence after the prompt".into()));
            }
            if last.is_some_and(|l| s.frame_index <= l) {
                return Err(AaptError::Contract("frame indices must increase".into()));
            }
            last = Some(s.frame_index);
            at = s.end;
        }
        Ok(())
    }
}

/// Whether a query at frame `qi` may read keys of frame `ki` under window `n`.
pub fn frame_visible(qi: usize, ki: usize, n: usize) -> bool {
    ki <= qi && (ki == 0 || ki + n > qi)
}

/// Row-major `[len x len]` mask; `true` means the query row may attend.
pub fn build_mask(layout: &TokenLayout, window_n: usize) -> Vec<bool> {
    let t = layout.len();
    let mut m = vec![false; t * t];
    for q in &layout.spans {
        for k in &layout.spans {
            let allowed = match (q.kind, k.kind) {
                (SpanKind::Prompt, SpanKind::Prompt) => true,
                (SpanKind::Prompt, SpanKind::Frame) => false,
                (SpanKind::Frame, SpanKind::Prompt) => true,
                (SpanKind::Frame, SpanKind::Frame) => frame_visible(q.frame_index, k.frame_index, window_n),
            };
            if allowed {
                for i in q.start..q.end {
                    m[i * t + k.start..i * t + k.end].iter_mut().for_each(|x| *x = true);
                }
            }
        }
    }
    m
}

/// Rotary pair counts per axis: (temporal, vertical, horizontal).
fn rope_split(cfg: &BackboneConfig) -> (usize, usize, usize) {
    let pairs = cfg.head_dim() / 2;
    let t = pairs / 2;
    let y = (pairs - t) / 2;
    (t, y, pairs - t - y)
}

fn axis_freqs(n: usize) -> impl Iterator<Item = f32> {
    (0..n).map(move |i| 100f32.powf(-(i as f32) / n.max(1) as f32))
}

/// Temporal base angle before per-frequency scaling.
pub fn temporal_base_angle(cfg: &BackboneConfig, t_index: usize) -> f32 {
    t_index as f32 * cfg.temporal_rope_interval
}

/// Per-head rotation phases of one frame token: temporal pairs first, then
/// vertical, then horizontal. Temporal phases use the fixed interval; the
/// spatial ones are stretched so the grid spans `spatial_rope_extent`.
pub fn rope_angles(cfg: &BackboneConfig, t_index: usize, spatial_index: usize) -> Vec<f32> {
    let (nt, ny, nx) = rope_split(cfg);
    let base = temporal_base_angle(cfg, t_index);
    let y = (spatial_index / cfg.latent_w) as f32 + 0.5;
    let x = (spatial_index % cfg.latent_w) as f32 + 0.5;
    let py = y * cfg.spatial_rope_extent / cfg.latent_h as f32;
    let px = x * cfg.spatial_rope_extent / cfg.latent_w as f32;
    let mut out = Vec::with_capacity(nt + ny + nx);
    out.extend(axis_freqs(nt).map(|f| base * f));
    out.extend(axis_freqs(ny).map(|f| py * f));
    out.extend(axis_freqs(nx).map(|f| px * f));
    out
}

/// Cos/sin tables for `[tokens, model_dim]` rows; prompt rows rotate by 0.
fn rope_tables(cfg: &BackboneConfig, layout: &TokenLayout) -> (Arc<Vec<f32>>, Arc<Vec<f32>>) {
    let d = cfg.model_dim;
    let mut cos = Vec::with_capacity(layout.len() * d / 2);
    let mut sin = Vec::with_capacity(layout.len() * d / 2);
    for s in &layout.spans {
        for tok in 0..s.end - s.start {
            let phases = match s.kind {
                SpanKind::Prompt => vec![0.0; cfg.head_dim() / 2],
                SpanKind::Frame => rope_angles(cfg, s.frame_index, tok),
            };
            for _ in 0..cfg.heads {
                for &p in &phases {
                    cos.push(p.cos());
                    sin.push(p.sin());
                }
            }
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

/// Sinusoidal embedding of a timestep in `[0, 1]`.
pub fn timestep_features(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let f = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        v.push((t * 1000.0 * f).cos());
    }
    for i in 0..half {
        let f = (-(10000f32.ln()) * i as f32 / half as f32).exp();
        v.push((t * 1000.0 * f).sin());
    }
    v
}

/// Token-major view `[h*w, c]` of a latent grid `[c, h, w]`.
pub fn grid_to_tokens(grid: &Tensor) -> Tensor {
    let s = grid.shape();
    let (c, hw) = (s[0], s[1] * s[2]);
    let d = grid.data();
    Tensor::from_fn(&[hw, c], |i| d[(i % c) * hw + i / c])
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(tokens: &Tensor, h: usize, w: usize) -> Tensor {
    let c = tokens.shape()[1];
    let hw = h * w;
    let d = tokens.data();
    Tensor::from_fn(&[c, h, w], |i| d[(i % hw) * c + i / hw])
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct BlockP {
    ada: Lin,
    qkv: Lin,
    out: Lin,
    mlp1: Lin,
    mlp2: Lin,
}

#[derive(Clone, Debug)]
struct Slots {
    in_noise: Lin,
    in_recycled: usize,
    in_control: usize,
    prompt: usize,
    t1: Lin,
    t2: Lin,
    blocks: Vec<BlockP>,
    final_ada: Lin,
    head: Lin,
    logit: Option<Lin>,
}

fn lin(ps: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, i: usize, o: usize, std: f32) -> Lin {
    let w = ps.push(format!("{name}.w"), Tensor::randn(&[i, o], std, rng));
    let b = ps.push(format!("{name}.b"), Tensor::zeros(&[o]));
    Lin { w, b }
}

/// Transformer weights. A discriminator is a backbone with a logit head.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub params: ParamSet,
    slots: Slots,
}

/// Where cached keys/values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Prompt,
    /// The user-supplied or ground-truth first frame.
    Context,
    /// Computed from dataset frames.
    Real,
    /// Computed from the model's own samples.
    Generated,
}

/// Inputs at one frame position; tensors are token-major.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'g> {
    /// `[tokens, C]` noisy latent, or a clean frame for the context position
    /// and the discriminator.
    pub noisy: Var<'g>,
    /// `[tokens, C]` previous frame.
    pub recycled: Var<'g>,
    /// `[1, control_channels]`, broadcast over tokens.
    pub control: Var<'g>,
    pub t: f32,
}

/// Keys and values of one frame for every layer.
#[derive(Clone, Debug)]
pub struct FrameKv<'g> {
    pub frame_index: usize,
    pub provenance: Provenance,
    pub layers: Vec<(Var<'g>, Var<'g>)>,
}

/// Per-layer attention cache bound to one graph.
#[derive(Clone, Debug)]
pub struct KvCache<'g> {
    pub prompt: Vec<(Var<'g>, Var<'g>)>,
    pub frames: Vec<FrameKv<'g>>,
    pub window_n: usize,
    /// Transformer forwards executed against this cache.
    pub forwards: usize,
}

/// Plain-tensor copy of a [`KvCache`] that outlives its graph.
#[derive(Clone, Debug, PartialEq)]
pub struct KvSnapshot {
    pub prompt: Vec<(Tensor, Tensor)>,
    pub frames: Vec<(usize, Provenance, Vec<(Tensor, Tensor)>)>,
    pub window_n: usize,
    pub forwards: usize,
}

impl<'g> KvCache<'g> {
    pub fn resident_frames(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.frame_index).collect()
    }

    /// Drops the oldest non-pinned frames until at most `window_n` remain;
    /// frame 0 is pinned.
    pub fn evict(&mut self) {
        let unpinned = self.frames.iter().filter(|f| f.frame_index != 0).count();
        let mut excess = unpinned.saturating_sub(self.window_n);
        self.frames.retain(|f| {
            if f.frame_index != 0 && excess > 0 {
                excess -= 1;
                false
            } else {
                true
            }
        });
    }

    /// Cuts gradient flow through every cached entry.
    pub fn detached(&self) -> KvCache<'g> {
        let d = |l: &Vec<(Var<'g>, Var<'g>)>| l.iter().map(|(k, v)| (k.detach(), v.detach())).collect();
        KvCache {
            prompt: d(&self.prompt),
            frames: self.frames.iter().map(|f| FrameKv { frame_index: f.frame_index, provenance: f.provenance, layers: d(&f.layers) }).collect(),
            window_n: self.window_n,
            forwards: self.forwards,
        }
    }

    pub fn snapshot(&self) -> KvSnapshot {
        let s = |l: &Vec<(Var<'g>, Var<'g>)>| l.iter().map(|(k, v)| (k.value(), v.value())).collect();
        KvSnapshot {
            prompt: s(&self.prompt),
            frames: self.frames.iter().map(|f| (f.frame_index, f.provenance, s(&f.layers))).collect(),
            window_n: self.window_n,
            forwards: self.forwards,
        }
    }

    pub fn nbytes(&self) -> usize {
        let b = |l: &Vec<(Var<'g>, Var<'g>)>| l.iter().map(|(k, v)| 4 * (k.numel() + v.numel())).sum::<usize>();
        b(&self.prompt) + self.frames.iter().map(|f| b(&f.layers)).sum::<usize>()
    }
}

impl KvSnapshot {
    pub fn attach<'g>(&self, g: &'g Graph) -> KvCache<'g> {
        let a = |l: &Vec<(Tensor, Tensor)>| l.iter().map(|(k, v)| (g.constant(k), g.constant(v))).collect();
        KvCache {
            prompt: a(&self.prompt),
            frames: self.frames.iter().map(|(i, p, l)| FrameKv { frame_index: *i, provenance: *p, layers: a(l) }).collect(),
            window_n: self.window_n,
            forwards: self.forwards,
        }
    }

    pub fn resident_frames(&self) -> Vec<usize> {
        self.frames.iter().map(|f| f.0).collect()
    }

    pub fn nbytes(&self) -> usize {
        let b = |l: &Vec<(Tensor, Tensor)>| l.iter().map(|(k, v)| k.nbytes() + v.nbytes()).sum::<usize>();
        b(&self.prompt) + self.frames.iter().map(|f| b(&f.2)).sum::<usize>()
    }
}

/// Outputs of a forward over frame tokens.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOut<'g> {
    /// `[frames * tokens, C]` velocity prediction.
    pub out: Var<'g>,
    /// `[frames * tokens, D]` final-block hidden states.
    pub hidden: Var<'g>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, seed, false)
    }

    fn build(cfg: BackboneConfig, seed: u64, with_logit: bool) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = cfg.model_dim;
        let c = cfg.latent_channels;
        let cin = (2 * c + cfg.control_channels) as f32;
        let in_std = 1.0 / cin.sqrt();
        let in_noise = lin(&mut ps, &mut rng, "in.noise", c, d, in_std);
        let in_recycled = ps.push("in.recycled.w", Tensor::randn(&[c, d], in_std, &mut rng));
        let in_control = ps.push("in.control.w", Tensor::randn(&[cfg.control_channels, d], in_std, &mut rng));
        let prompt = ps.push("prompt.embed", Tensor::randn(&[cfg.scene_classes * cfg.prompt_tokens, d], 0.5, &mut rng));
        let e = cfg.time_embed_dim;
        let t1 = lin(&mut ps, &mut rng, "time.fc1", e, d, 1.0 / (e as f32).sqrt());
        let t2 = lin(&mut ps, &mut rng, "time.fc2", d, d, 1.0 / (d as f32).sqrt());
        let ds = 1.0 / (d as f32).sqrt();
        let hidden = cfg.mlp_ratio * d;
        let blocks = (0..cfg.layers)
            .map(|l| BlockP {
                ada: lin(&mut ps, &mut rng, &format!("block{l}.ada"), d, 6 * d, 0.02),
                qkv: lin(&mut ps, &mut rng, &format!("block{l}.qkv"), d, 3 * d, ds),
                out: lin(&mut ps, &mut rng, &format!("block{l}.attn_out"), d, d, 0.5 * ds),
                mlp1: lin(&mut ps, &mut rng, &format!("block{l}.mlp1"), d, hidden, ds),
                mlp2: lin(&mut ps, &mut rng, &format!("block{l}.mlp2"), hidden, d, 0.5 / (hidden as f32).sqrt()),
            })
            .collect();
        let final_ada = lin(&mut ps, &mut rng, "final.ada", d, 2 * d, 0.02);
        let head = lin(&mut ps, &mut rng, "final.out", d, c, ds);
        let logit = with_logit.then(|| lin(&mut ps, &mut rng, "disc.logit", d, 1, ds));
        let slots = Slots { in_noise, in_recycled, in_control, prompt, t1, t2, blocks, final_ada, head, logit };
        Ok(Backbone { cfg, params: ps, slots })
    }

    /// A discriminator initialized from `init` plus a fresh logit head.
    pub fn discriminator_from(init: &Backbone, seed: u64) -> Result<Self> {
        let mut d = Self::build(init.cfg.clone(), seed, true)?;
        for i in 0..init.params.len() {
            let j = d.params.index_of(init.params.name(i)).expect("shared parameter");
            *d.params.get_mut(j) = init.params.get(i).clone();
        }
        Ok(d)
    }

    pub fn is_discriminator(&self) -> bool {
        self.slots.logit.is_some()
    }

    /// Rebuilds around loaded parameters (with a logit head if `params` has one).
    pub fn from_params(cfg: BackboneConfig, params: &ParamSet) -> Result<Self> {
        let mut b = Self::build(cfg, 0, params.index_of("disc.logit.w").is_some())?;
        b.params.load_from(params)?;
        Ok(b)
    }

    pub fn bind<'g>(&self, g: &'g Graph, base: usize) -> Bound<'g> {
        self.bind_vars(g, self.params.bind(g, base))
    }

    pub fn bind_const<'g>(&self, g: &'g Graph) -> Bound<'g> {
        self.bind_vars(g, self.params.bind_const(g))
    }

    /// Binds externally created leaves, one per parameter in order.
    pub fn bind_vars<'g>(&self, g: &'g Graph, p: Vec<Var<'g>>) -> Bound<'g> {
        assert_eq!(p.len(), self.params.len(), "one var per parameter");
        Bound { cfg: self.cfg.clone(), slots: self.slots.clone(), p, g }
    }
}

/// Backbone weights bound into a graph.
pub struct Bound<'g> {
    cfg: BackboneConfig,
    slots: Slots,
    pub p: Vec<Var<'g>>,
    g: &'g Graph,
}

impl<'g> Bound<'g> {
    pub fn cfg(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &'g Graph {
        self.g
    }

    fn lin(&self, x: Var<'g>, l: Lin) -> Var<'g> {
        x.linear(self.p[l.w], self.p[l.b])
    }

    /// `[1, D]` conditioning vector for a timestep (after SiLU).
    fn time_cond(&self, t: f32) -> Var<'g> {
        let e = self.cfg().time_embed_dim;
        let f = self.g.constant(&Tensor::new(vec![1, e], timestep_features(t, e)).unwrap());
        let h = self.lin(f, self.slots.t1).silu();
        self.lin(h, self.slots.t2).silu()
    }

    fn embed_frame(&self, fi: &FrameInput<'g>) -> Var<'g> {
        let s = &self.slots;
        let ctrl = fi.control.matmul(self.p[s.in_control]);
        self.lin(fi.noisy, s.in_noise).add(fi.recycled.matmul(self.p[s.in_recycled])).add_row(ctrl.reshape(&[self.cfg().model_dim]))
    }

    fn prompt_rows(&self, prompt_id: usize) -> Result<Var<'g>> {
        let cfg = self.cfg();
        if prompt_id >= cfg.scene_classes {
            return Err(AaptError::Contract(format!("prompt id {prompt_id} out of range")));
        }
        let (p, d) = (cfg.prompt_tokens, cfg.model_dim);
        let idx: Vec<u32> = (0..p * d).map(|i| (prompt_id * p * d + i) as u32).collect();
        Ok(self.p[self.slots.prompt].gather(Arc::new(idx), vec![p, d]))
    }

    /// Per-token modulation rows: zeros for prompt tokens, otherwise the
    /// condition of the token's frame.
    fn token_rows(&self, conds: Option<Var<'g>>, token_frame: &[Option<usize>], width: usize) -> Var<'g> {
        let zero = self.g.constant(&Tensor::zeros(&[1, width]));
        let (f, table) = match conds {
            Some(c) => (c.shape()[0], Var::concat_rows(&[zero, c])),
            None => (0, zero),
        };
        let mut idx = Vec::with_capacity(token_frame.len() * width);
        for tf in token_frame {
            let r = tf.map_or(0, |k| k + 1);
            debug_assert!(r <= f);
            idx.extend((0..width).map(|c| (r * width + c) as u32));
        }
        table.gather(Arc::new(idx), vec![token_frame.len(), width])
    }

    fn modulate(x: Var<'g>, shift: Var<'g>, scale: Var<'g>) -> Var<'g> {
        x.layer_norm(1e-6).mul(scale.add_scalar(1.0)).add(shift)
    }

    /// Runs all blocks over query rows `x`. `keys(l, k, v)` assembles the key
    /// and value rows visible to the queries at layer `l` given their own
    /// projections; the returned per-layer own keys/values feed caches.
    #[allow(clippy::type_complexity)]
    fn blocks(
        &self,
        mut x: Var<'g>,
        conds: &[Var<'g>],
        token_frame: &[Option<usize>],
        rope: &(Arc<Vec<f32>>, Arc<Vec<f32>>),
        mut keys: impl FnMut(usize, Var<'g>, Var<'g>) -> (Var<'g>, Var<'g>, Arc<Vec<bool>>),
    ) -> (Var<'g>, Vec<(Var<'g>, Var<'g>)>) {
        let cfg = self.cfg();
        let d = cfg.model_dim;
        let mut own = Vec::with_capacity(cfg.layers);
        for (l, bp) in self.slots.blocks.iter().enumerate() {
            let per_frame = (!conds.is_empty()).then(|| Var::concat_rows(&conds.iter().map(|c| self.lin(*c, bp.ada)).collect::<Vec<_>>()));
            let m = self.token_rows(per_frame, token_frame, 6 * d);
            let piece = |i: usize| m.slice_cols(i * d, d);
            let h = Self::modulate(x, piece(0), piece(1));
            let qkv = self.lin(h, bp.qkv);
            let q = qkv.slice_cols(0, d).rope(rope.0.clone(), rope.1.clone());
            let k = qkv.slice_cols(d, d).rope(rope.0.clone(), rope.1.clone());
            let v = qkv.slice_cols(2 * d, d);
            own.push((k, v));
            let (kk, vv, mask) = keys(l, k, v);
            let a = self.lin(q.attention(kk, vv, mask, cfg.heads), bp.out);
            x = x.add(a.mul(piece(2).add_scalar(1.0)));
            let h = Self::modulate(x, piece(3), piece(4));
            let mlp = self.lin(self.lin(h, bp.mlp1).silu(), bp.mlp2);
            x = x.add(mlp.mul(piece(5).add_scalar(1.0)));
        }
        (x, own)
    }

    fn head(&self, x: Var<'g>, conds: &[Var<'g>], token_frame: &[Option<usize>]) -> Var<'g> {
        let d = self.cfg().model_dim;
        let per_frame = Some(Var::concat_rows(&conds.iter().map(|c| self.lin(*c, self.slots.final_ada)).collect::<Vec<_>>()));
        let m = self.token_rows(per_frame, token_frame, 2 * d);
        let h = Self::modulate(x, m.slice_cols(0, d), m.slice_cols(d, d));
        self.lin(h, self.slots.head)
    }

    fn check_frame(&self, fi: &FrameInput<'g>) -> Result<()> {
        let cfg = self.cfg();
        let tpf = cfg.tokens_per_frame();
        let c = cfg.latent_channels;
        if fi.noisy.shape() != [tpf, c] || fi.recycled.shape() != [tpf, c] || fi.control.shape() != [1, cfg.control_channels] {
            return Err(AaptError::Shape(format!(
                "frame input shapes {:?}/{:?}/{:?} do not match [{tpf},{c}] and [1,{}]",
                fi.noisy.shape(),
                fi.recycled.shape(),
                fi.control.shape(),
                cfg.control_channels
            )));
        }
        if !(0.0..=1.0).contains(&fi.t) {
            return Err(AaptError::Contract(format!("timestep {} outside [0,1]", fi.t)));
        }
        Ok(())
    }

    /// Teacher-forced forward over frames `0..frames.len()`, all positions at
    /// once under the block-causal mask. Frame 0 is the clean context frame
    /// (`t = 0`); every later position must share one timestep unless
    /// `mixed_t` is set (the discriminator samples its own `t`, which it also
    /// applies uniformly).
    pub fn forward_parallel(&self, frames: &[FrameInput<'g>], prompt_id: usize) -> Result<ForwardOut<'g>> {
        self.forward_parallel_at(frames, prompt_id, 0)
    }

    /// As [`forward_parallel`](Self::forward_parallel) with frame indices
    /// starting at `first_index`.
    pub fn forward_parallel_at(&self, frames: &[FrameInput<'g>], prompt_id: usize, first_index: usize) -> Result<ForwardOut<'g>> {
        if frames.is_empty() {
            return Err(AaptError::Contract("forward_parallel needs at least one frame".into()));
        }
        for f in frames {
            self.check_frame(f)?;
        }
        let shared = frames.iter().skip(usize::from(first_index == 0)).map(|f| f.t).collect::<Vec<_>>();
        if shared.windows(2).any(|w| w[0] != w[1]) {
            return Err(AaptError::Contract("all generated positions must share one timestep".into()));
        }
        let cfg = self.cfg();
        let tpf = cfg.tokens_per_frame();
        let idx: Vec<usize> = (first_index..first_index + frames.len()).collect();
        let layout = TokenLayout::with_frames(cfg.prompt_tokens, &idx, tpf);
        let mask = Arc::new(build_mask(&layout, cfg.window_n));
        let rope = rope_tables(cfg, &layout);
        let mut rows = vec![self.prompt_rows(prompt_id)?];
        rows.extend(frames.iter().map(|f| self.embed_frame(f)));
        let x = Var::concat_rows(&rows);
        let conds: Vec<Var<'g>> = frames.iter().map(|f| self.time_cond(f.t)).collect();
        let mut token_frame = vec![None; cfg.prompt_tokens];
        for k in 0..frames.len() {
            token_frame.extend(std::iter::repeat_n(Some(k), tpf));
        }
        let (x, _) = self.blocks(x, &conds, &token_frame, &rope, |_, k, v| (k, v, mask.clone()));
        let p = cfg.prompt_tokens;
        let body = x.slice_rows(p, x.shape()[0]);
        let out = self.head(body, &conds, &token_frame[p..]);
        Ok(ForwardOut { out, hidden: body })
    }

    /// Caches the prompt tokens' keys and values for every layer.
    pub fn prompt_cache(&self, prompt_id: usize) -> Result<KvCache<'g>> {
        let cfg = self.cfg();
        let layout = TokenLayout::with_frames(cfg.prompt_tokens, &[], 0);
        let rope = rope_tables(cfg, &layout);
        let p = cfg.prompt_tokens;
        let mask = Arc::new(vec![true; p * p]);
        let x = self.prompt_rows(prompt_id)?;
        let token_frame = vec![None; p];
        let (_, own) = self.blocks(x, &[], &token_frame, &rope, |_, k, v| (k, v, mask.clone()));
        Ok(KvCache { prompt: own, frames: Vec::new(), window_n: cfg.window_n, forwards: 0 })
    }

    /// One transformer forward for frame `frame_index` against `cache`;
    /// appends that frame's keys/values. Cached frames outside the window
    /// are ignored, eviction is left to the caller.
    pub fn forward_step(&self, cache: &mut KvCache<'g>, fi: &FrameInput<'g>, frame_index: usize, provenance: Provenance) -> Result<ForwardOut<'g>> {
        self.check_frame(fi)?;
        let cfg = self.cfg();
        if cache.prompt.len() != cfg.layers {
            return Err(AaptError::Contract("cache was not built for this backbone".into()));
        }
        if cache.frames.last().is_some_and(|f| f.frame_index >= frame_index) {
            return Err(AaptError::Contract(format!("frame {frame_index} is not newer than the cache")));
        }
        let window = cfg.window_n;
        if cache.window_n != window {
            return Err(AaptError::Contract("cache window differs from the backbone's".into()));
        }
        if cache.frames.iter().filter(|f| f.frame_index != 0).count() > window {
            return Err(AaptError::Contract("cache overflow: evict before stepping".into()));
        }
        let tpf = cfg.tokens_per_frame();
        let layout = TokenLayout::with_frames(0, &[frame_index], tpf);
        let rope = rope_tables(cfg, &layout);
        let x = self.embed_frame(fi);
        let conds = [self.time_cond(fi.t)];
        let token_frame = vec![Some(0); tpf];
        let visible: Vec<usize> = cache
            .frames
            .iter()
            .enumerate()
            .filter(|(_, f)| frame_visible(frame_index, f.frame_index, window))
            .map(|(i, _)| i)
            .collect();
        let cached = &*cache;
        let (x, own) = self.blocks(x, &conds, &token_frame, &rope, |l, k, v| {
            let mut ks = vec![cached.prompt[l].0];
            let mut vs = vec![cached.prompt[l].1];
            for &i in &visible {
                ks.push(cached.frames[i].layers[l].0);
                vs.push(cached.frames[i].layers[l].1);
            }
            ks.push(k);
            vs.push(v);
            let kk = Var::concat_rows(&ks);
            let n = kk.shape()[0];
            (kk, Var::concat_rows(&vs), Arc::new(vec![true; tpf * n]))
        });
        let out = self.head(x, &conds, &token_frame);
        cache.frames.push(FrameKv { frame_index, provenance, layers: own });
        cache.forwards += 1;
        Ok(ForwardOut { out, hidden: x })
    }

    /// Per-frame logits `[frames, 1]` from final hidden states.
    pub fn logits(&self, hidden: Var<'g>) -> Result<Var<'g>> {
        let l = self.slots.logit.ok_or_else(|| AaptError::Contract("backbone has no logit head".into()))?;
        Ok(self.lin(hidden.group_mean_rows(self.cfg().tokens_per_frame()), l))
    }
}
