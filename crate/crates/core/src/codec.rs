//! Tiny causal video autoencoder.
//!
//! The first pixel frame is compressed on its own; every later latent frame
//! covers `temporal_factor` pixel frames. Time is folded into channels within
//! a chunk, and chunks are linked by causal temporal convolutions that only
//! look one latent step back. The decoder keeps those one-step buffers in a
//! [`DecoderState`], so streamed decoding reproduces batch decoding exactly.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::{AaptError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use crate::video::Video;

#[derive(Clone, Debug, PartialEq)]
pub struct CodecConfig {
    pub temporal_factor: usize,
    pub spatial_factor: usize,
    pub latent_channels: usize,
    /// Widths from pixel resolution down to latent resolution; entries past
    /// `log2(spatial_factor) + 1` set the latent-resolution mid width.
    pub decoder_channels: Vec<usize>,
    pub residual_blocks_per_scale: usize,
    pub kl_weight: f32,
    pub height: usize,
    pub width: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            temporal_factor: 4,
            spatial_factor: 4,
            latent_channels: 8,
            decoder_channels: vec![16, 32, 64, 64],
            residual_blocks_per_scale: 2,
            kl_weight: 1e-6,
            height: 32,
            width: 32,
        }
    }
}

impl CodecConfig {
    pub fn levels(&self) -> usize {
        self.spatial_factor.trailing_zeros() as usize
    }

    pub fn latent_hw(&self) -> (usize, usize) {
        (self.height / self.spatial_factor, self.width / self.spatial_factor)
    }

    fn width_at(&self, level: usize) -> usize {
        self.decoder_channels[level.min(self.decoder_channels.len() - 1)]
    }

    fn mid_width(&self) -> usize {
        *self.decoder_channels.last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        if self.temporal_factor < 1 {
            return Err(AaptError::Config("temporal_factor must be >= 1".into()));
        }
        if !self.spatial_factor.is_power_of_two() {
            return Err(AaptError::Config("spatial_factor must be a power of two".into()));
        }
        if self.height % self.spatial_factor != 0 || self.width % self.spatial_factor != 0 {
            return Err(AaptError::Config("frame size must be divisible by spatial_factor".into()));
        }
        if self.decoder_channels.len() < self.levels() + 1 {
            return Err(AaptError::Config(format!("decoder_channels needs at least {} entries", self.levels() + 1)));
        }
        Ok(())
    }

    /// Latent frames produced for `pixel_frames` input frames.
    pub fn latent_frames(&self, pixel_frames: usize) -> Result<usize> {
        if pixel_frames == 0 || (pixel_frames - 1) % self.temporal_factor != 0 {
            return Err(AaptError::Shape(format!(
                "pixel frame count {pixel_frames} is not 1 + {}k",
                self.temporal_factor
            )));
        }
        Ok(1 + (pixel_frames - 1) / self.temporal_factor)
    }

    pub fn pixel_frames(&self, latent_frames: usize) -> usize {
        if latent_frames == 0 {
            0
        } else {
            1 + (latent_frames - 1) * self.temporal_factor
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvP {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct ResP {
    a: ConvP,
    b: ConvP,
}

#[derive(Clone, Debug)]
struct TemporalP {
    cur: ConvP,
    prev: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    enc_in: ConvP,
    enc_res: Vec<Vec<ResP>>,
    enc_down: Vec<ConvP>,
    enc_time: TemporalP,
    enc_mid: Vec<ResP>,
    enc_out: ConvP,
    enc_skip: ConvP,
    dec_time: TemporalP,
    dec_res: Vec<ResP>,
    dec_mid_time: TemporalP,
    dec_up: Vec<ConvP>,
    dec_up_res: Vec<Vec<ResP>>,
    dec_out: ConvP,
    dec_skip: ConvP,
    latent_shift: usize,
    latent_scale: usize,
}

fn conv_param<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize, gain: f32) -> ConvP {
    let std = gain / ((cin * 9) as f32).sqrt();
    let w = ps.push(format!("{name}.w"), Tensor::randn(&[cout, cin, 3, 3], std, rng));
    let b = ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvP { w, b }
}

fn linear_param<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize) -> ConvP {
    let w = ps.push(format!("{name}.w"), Tensor::randn(&[cout, cin, 1, 1], 1.0 / (cin as f32).sqrt(), rng));
    let b = ps.push(format!("{name}.b"), Tensor::zeros(&[cout]));
    ConvP { w, b }
}

fn res_params<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, ch: usize) -> ResP {
    ResP { a: conv_param(ps, rng, &format!("{name}.a"), ch, ch, 1.0), b: conv_param(ps, rng, &format!("{name}.b"), ch, ch, 0.3) }
}

fn temporal_params<R: Rng>(ps: &mut ParamSet, rng: &mut R, name: &str, cin: usize, cout: usize) -> TemporalP {
    let cur = conv_param(ps, rng, &format!("{name}.cur"), cin, cout, 1.0);
    let std = 0.5 / ((cin * 9) as f32).sqrt();
    let prev = ps.push(format!("{name}.prev.w"), Tensor::randn(&[cout, cin, 3, 3], std, rng));
    TemporalP { cur, prev }
}

/// Causal video autoencoder weights.
#[derive(Clone, Debug)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamSet,
    layout: Layout,
}

/// One latent frame, `[latent_channels, h_l, w_l]`, in normalized units.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFrame {
    pub grid: Tensor,
}

/// Streaming decoder buffers: the previous latent input and the previous
/// mid-level activation.
#[derive(Clone, Debug)]
pub struct DecoderState {
    key: u64,
    prev_latent: Option<Tensor>,
    prev_mid: Option<Tensor>,
    decoded: usize,
}

impl DecoderState {
    pub fn frames_decoded(&self) -> usize {
        self.decoded
    }

    pub fn buffers_bytes(&self) -> usize {
        self.prev_latent.as_ref().map_or(0, |t| t.nbytes()) + self.prev_mid.as_ref().map_or(0, |t| t.nbytes())
    }
}

struct Bound<'g> {
    p: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    fn conv(&self, x: Var<'g>, c: ConvP) -> Var<'g> {
        x.conv2d(self.p[c.w], Some(self.p[c.b]))
    }

    fn res(&self, x: Var<'g>, r: &ResP) -> Var<'g> {
        let h = self.conv(x.silu(), r.a);
        let h = self.conv(h.silu(), r.b);
        x.add(h)
    }

    fn temporal(&self, x: Var<'g>, prev: Var<'g>, t: &TemporalP) -> Var<'g> {
        self.conv(x, t.cur).add(prev.conv2d(self.p[t.prev], None))
    }
}

/// Previous-time copy along the leading axis, zeros at `t = 0`.
fn shift_time<'g>(x: Var<'g>, first_prev: Option<&Tensor>) -> Var<'g> {
    let s = x.shape();
    let g = x.graph();
    let mut one = s.clone();
    one[0] = 1;
    let head = match first_prev {
        Some(t) => g.constant(&t.reshape(&one).expect("prev buffer shape")),
        None => g.constant(&Tensor::zeros(&one)),
    };
    if s[0] == 1 {
        head
    } else {
        Var::concat_rows(&[head, x.slice_rows(0, s[0] - 1)])
    }
}

/// Inverse of [`space_to_depth`].
fn depth_to_space(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    let (n, c4, h, w) = (s[0], s[1], s[2], s[3]);
    let c = c4 / 4;
    let mut idx = Vec::with_capacity(n * c4 * h * w);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let sub = ch * 4 + (y % 2) * 2 + xx % 2;
                    idx.push((((b * c4 + sub) * h + y / 2) * w + xx / 2) as u32);
                }
            }
        }
    }
    x.gather(Arc::new(idx), vec![n, c, 2 * h, 2 * w])
}

fn upsample2(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut idx = Vec::with_capacity(n * c * h * w * 4);
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                idx.push((p * h * w + (y / 2) * w + xx / 2) as u32);
            }
        }
    }
    x.gather(Arc::new(idx), vec![n, c, 2 * h, 2 * w])
}

fn space_to_depth(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (h2, w2) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            idx.push((((b * c + ch) * h + 2 * y + dy) * w + 2 * xx + dx) as u32);
                        }
                    }
                }
            }
        }
    }
    x.gather(Arc::new(idx), vec![n, 4 * c, h2, w2])
}

fn session_key(params: &ParamSet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, t) in params.iter() {
        for v in t.data().iter().step_by(97) {
            h ^= v.to_bits() as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h ^= t.numel() as u64;
    }
    h
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let levels = cfg.levels();
        let r = cfg.residual_blocks_per_scale;
        let pix_in = 3 * cfg.temporal_factor;
        let c = cfg.latent_channels;
        let mid = cfg.mid_width();

        let enc_in = conv_param(&mut ps, &mut rng, "enc.in", pix_in, cfg.width_at(0), 1.0);
        let mut enc_res = Vec::new();
        let mut enc_down = Vec::new();
        enc_res.push((0..r).map(|i| res_params(&mut ps, &mut rng, &format!("enc.l0.res{i}"), cfg.width_at(0))).collect());
        for l in 1..=levels {
            enc_down.push(conv_param(&mut ps, &mut rng, &format!("enc.l{l}.down"), 4 * cfg.width_at(l - 1), cfg.width_at(l), 1.0));
            enc_res.push((0..r).map(|i| res_params(&mut ps, &mut rng, &format!("enc.l{l}.res{i}"), cfg.width_at(l))).collect());
        }
        let enc_time = temporal_params(&mut ps, &mut rng, "enc.time", cfg.width_at(levels), mid);
        let enc_mid = (0..r).map(|i| res_params(&mut ps, &mut rng, &format!("enc.mid.res{i}"), mid)).collect();
        let enc_out = conv_param(&mut ps, &mut rng, "enc.out", mid, 2 * c, 0.1);
        let folded = pix_in * cfg.spatial_factor * cfg.spatial_factor;
        let enc_skip = linear_param(&mut ps, &mut rng, "enc.skip", folded, 2 * c);

        let dec_time = temporal_params(&mut ps, &mut rng, "dec.time", c, mid);
        let dec_res = (0..r).map(|i| res_params(&mut ps, &mut rng, &format!("dec.mid.res{i}"), mid)).collect();
        let dec_mid_time = temporal_params(&mut ps, &mut rng, "dec.mid.time", mid, cfg.width_at(levels));
        let mut dec_up = Vec::new();
        let mut dec_up_res = Vec::new();
        for l in (1..=levels).rev() {
            dec_up.push(conv_param(&mut ps, &mut rng, &format!("dec.l{l}.up"), cfg.width_at(l), cfg.width_at(l - 1), 1.0));
            dec_up_res.push((0..r).map(|i| res_params(&mut ps, &mut rng, &format!("dec.l{}.res{i}", l - 1), cfg.width_at(l - 1))).collect());
        }
        let dec_out = conv_param(&mut ps, &mut rng, "dec.out", cfg.width_at(0), pix_in, 0.1);
        let dec_skip = linear_param(&mut ps, &mut rng, "dec.skip", c, folded);
        let latent_shift = ps.push("latent.shift", Tensor::zeros(&[c]));
        let latent_scale = ps.push("latent.scale", Tensor::ones(&[c]));

        let layout = Layout {
            enc_in,
            enc_res,
            enc_down,
            enc_time,
            enc_mid,
            enc_out,
            enc_skip,
            dec_time,
            dec_res,
            dec_mid_time,
            dec_up,
            dec_up_res,
            dec_out,
            dec_skip,
            latent_shift,
            latent_scale,
        };
        Ok(Codec { cfg, params: ps, layout })
    }

    /// Rebuilds a codec around loaded parameters.
    pub fn from_params(cfg: CodecConfig, params: &ParamSet) -> Result<Self> {
        let mut c = Codec::new(cfg, 0)?;
        c.params.load_from(params)?;
        Ok(c)
    }

    fn check_video(&self, v: &Video) -> Result<usize> {
        if v.height != self.cfg.height || v.width != self.cfg.width {
            return Err(AaptError::Shape(format!(
                "video is {}x{}, codec expects {}x{}",
                v.height, v.width, self.cfg.height, self.cfg.width
            )));
        }
        self.cfg.latent_frames(v.frames)
    }

    /// Pixel chunks as `[latents, 3 * tf, H, W]`; chunk 0 repeats frame 0.
    fn chunk_pixels(&self, v: &Video) -> Result<Tensor> {
        let n = self.check_video(v)?;
        let tf = self.cfg.temporal_factor;
        let fl = v.frame_len();
        let mut data = Vec::with_capacity(n * tf * fl);
        for _ in 0..tf {
            data.extend_from_slice(v.frame(0));
        }
        for k in 1..n {
            for f in 0..tf {
                data.extend_from_slice(v.frame(1 + (k - 1) * tf + f));
            }
        }
        Tensor::new(vec![n, 3 * tf, v.height, v.width], data)
    }

    /// Mean and log-variance of the latent posterior, unnormalized.
    fn encode_graph<'g>(&self, b: &Bound<'g>, x: Var<'g>) -> (Var<'g>, Var<'g>) {
        let l = &self.layout;
        let mut folded = x;
        for _ in 0..self.cfg.levels() {
            folded = space_to_depth(folded);
        }
        let mut h = b.conv(x, l.enc_in);
        for r in &l.enc_res[0] {
            h = b.res(h, r);
        }
        for (lv, down) in l.enc_down.iter().enumerate() {
            h = b.conv(space_to_depth(h.silu()), *down);
            for r in &l.enc_res[lv + 1] {
                h = b.res(h, r);
            }
        }
        let prev = shift_time(h, None);
        let mut h = b.temporal(h, prev, &l.enc_time);
        for r in &l.enc_mid {
            h = b.res(h, r);
        }
        let o = b.conv(h.silu(), l.enc_out).add(folded.conv2d(b.p[l.enc_skip.w], Some(b.p[l.enc_skip.b])));
        let s = o.shape();
        let c = self.cfg.latent_channels;
        let hw = s[2] * s[3];
        let flat = o.reshape(&[s[0], 2 * c * hw]);
        let mean = flat.slice_cols(0, c * hw).reshape(&[s[0], c, s[2], s[3]]);
        let logvar = flat.slice_cols(c * hw, c * hw).reshape(&[s[0], c, s[2], s[3]]);
        (mean, logvar)
    }

    /// Decoder over unnormalized latents `[n, c, h, w]` with optional
    /// carried-in buffers. Returns pixel chunks and the mid activation fed to
    /// the mid temporal conv.
    fn decode_graph<'g>(&self, b: &Bound<'g>, z: Var<'g>, prev_z: Option<&Tensor>, prev_mid: Option<&Tensor>) -> (Var<'g>, Var<'g>) {
        let l = &self.layout;
        let pz = shift_time(z, prev_z);
        let mut h = b.temporal(z, pz, &l.dec_time);
        for r in &l.dec_res {
            h = b.res(h, r);
        }
        let mid = h;
        let pm = shift_time(mid, prev_mid);
        let mut h = b.temporal(mid.silu(), pm.silu(), &l.dec_mid_time);
        for (up, res) in l.dec_up.iter().zip(&l.dec_up_res) {
            h = b.conv(upsample2(h.silu()), *up);
            for r in res {
                h = b.res(h, r);
            }
        }
        let mut skip = b.conv(z, l.dec_skip);
        for _ in 0..self.cfg.levels() {
            skip = depth_to_space(skip);
        }
        (b.conv(h.silu(), l.dec_out).add(skip), mid)
    }

    fn normalize<'g>(&self, b: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        per_channel_affine(z, b.p[self.layout.latent_shift], b.p[self.layout.latent_scale], true)
    }

    fn denormalize<'g>(&self, b: &Bound<'g>, z: Var<'g>) -> Var<'g> {
        per_channel_affine(z, b.p[self.layout.latent_shift], b.p[self.layout.latent_scale], false)
    }

    /// Deterministic (posterior-mean) normalized latents, `[n, c, h_l, w_l]`.
    pub fn encode(&self, video: &Video) -> Result<Tensor> {
        let x = self.chunk_pixels(video)?;
        let g = Graph::no_grad();
        let b = Bound { p: self.params.bind_const(&g) };
        let (mean, _) = self.encode_graph(&b, g.constant(&x));
        Ok(self.normalize(&b, mean).value())
    }

    /// Batch decode of normalized latents `[n, c, h_l, w_l]`.
    pub fn decode(&self, latents: &Tensor) -> Result<Video> {
        self.check_latents(latents)?;
        let g = Graph::no_grad();
        let b = Bound { p: self.params.bind_const(&g) };
        let z = self.denormalize(&b, g.constant(latents));
        let (chunks, _) = self.decode_graph(&b, z, None, None);
        Ok(self.unchunk(&chunks.value(), true))
    }

    fn check_latents(&self, latents: &Tensor) -> Result<()> {
        let (h, w) = self.cfg.latent_hw();
        let s = latents.shape();
        if s.len() != 4 || s[1] != self.cfg.latent_channels || s[2] != h || s[3] != w {
            return Err(AaptError::Shape(format!("latents {:?} do not match codec [n,{},{h},{w}]", s, self.cfg.latent_channels)));
        }
        Ok(())
    }

    fn unchunk(&self, chunks: &Tensor, first_is_frame0: bool) -> Video {
        let s = chunks.shape();
        let tf = self.cfg.temporal_factor;
        let (h, w) = (s[2], s[3]);
        let fl = 3 * h * w;
        let d = chunks.data();
        let mut data = Vec::new();
        let mut frames = 0;
        for k in 0..s[0] {
            let chunk = &d[k * tf * fl..(k + 1) * tf * fl];
            if k == 0 && first_is_frame0 {
                data.extend_from_slice(&chunk[(tf - 1) * fl..]);
                frames += 1;
            } else {
                data.extend_from_slice(chunk);
                frames += tf;
            }
        }
        Video { frames, height: h, width: w, data }
    }

    pub fn new_decoder_state(&self) -> DecoderState {
        DecoderState { key: session_key(&self.params), prev_latent: None, prev_mid: None, decoded: 0 }
    }

    /// Decodes one latent frame: the first yields one pixel frame, later
    /// ones yield `temporal_factor` frames.
    pub fn decode_stream(&self, lf: &LatentFrame, st: &mut DecoderState) -> Result<Video> {
        if st.key != session_key(&self.params) {
            return Err(AaptError::Session("decoder state belongs to a different codec".into()));
        }
        let s = lf.grid.shape();
        let grid = lf.grid.reshape(&[1, s[0], s.get(1).copied().unwrap_or(0), s.get(2).copied().unwrap_or(0)])?;
        self.check_latents(&grid)?;
        let g = Graph::no_grad();
        let b = Bound { p: self.params.bind_const(&g) };
        let z = self.denormalize(&b, g.constant(&grid));
        let (chunk, mid) = self.decode_graph(&b, z, st.prev_latent.as_ref(), st.prev_mid.as_ref());
        let first = st.decoded == 0;
        st.prev_latent = Some(z.value());
        st.prev_mid = Some(mid.value());
        st.decoded += 1;
        Ok(self.unchunk(&chunk.value(), first))
    }

    /// Reconstruction MSE plus `kl_weight` times the Gaussian KL, using a
    /// reparameterized posterior sample.
    fn train_loss<'g>(&self, g: &'g Graph, b: &Bound<'g>, video: &Video, rng: &mut ChaCha8Rng) -> Result<(Var<'g>, f32)> {
        let x = self.chunk_pixels(video)?;
        let (mean, logvar) = self.encode_graph(b, g.constant(&x));
        let logvar = logvar.scale(0.1).tanh().scale(10.0).add_scalar(-10.0);
        let noise = Tensor::from_fn(&mean.shape(), |_| rng.sample::<f32, _>(StandardNormal));
        let z = mean.add(logvar.scale(0.5).exp().mul(g.constant(&noise)));
        let (chunks, _) = self.decode_graph(b, z, None, None);
        let target = g.constant(&self.chunk_targets(video)?);
        let recon = chunks.mse(target);
        let kl = mean.square().add(logvar.exp()).sub(logvar).add_scalar(-1.0).mean().scale(0.5);
        let loss = recon.add(kl.scale(self.cfg.kl_weight));
        Ok((loss, recon.item()))
    }

    /// Decoder targets aligned with chunk outputs (chunk 0 target repeats
    /// frame 0, matching how it is encoded).
    fn chunk_targets(&self, video: &Video) -> Result<Tensor> {
        self.chunk_pixels(video)
    }

    /// Pixel chunks folded to latent resolution, one row per latent pixel.
    fn folded_rows(&self, v: &Video) -> Result<(Vec<f32>, usize)> {
        let x = self.chunk_pixels(v)?;
        let g = Graph::no_grad();
        let mut f = g.constant(&x);
        for _ in 0..self.cfg.levels() {
            f = space_to_depth(f);
        }
        let t = f.value();
        let s = t.shape();
        let (n, d, hw) = (s[0], s[1], s[2] * s[3]);
        let mut rows = Vec::with_capacity(n * d * hw);
        for b in 0..n {
            for p in 0..hw {
                for j in 0..d {
                    rows.push(t.data()[(b * d + j) * hw + p]);
                }
            }
        }
        Ok((rows, d))
    }

    /// Initializes the linear shortcut pair to the leading principal
    /// components of folded pixel chunks; the nonlinear paths then learn a
    /// residual on top of it.
    pub fn init_principal_shortcut(&mut self, videos: &[Video]) -> Result<()> {
        let c = self.cfg.latent_channels;
        let mut d = 0;
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut cov: Vec<f64> = Vec::new();
        for v in videos {
            let (rows, dim) = self.folded_rows(v)?;
            if sum.is_empty() {
                d = dim;
                sum = vec![0.0; d];
                cov = vec![0.0; d * d];
            }
            for r in rows.chunks(d) {
                for i in 0..d {
                    let ri = r[i] as f64;
                    sum[i] += ri;
                    for j in i..d {
                        cov[i * d + j] += ri * r[j] as f64;
                    }
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(AaptError::Contract("principal init needs data".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let m = nalgebra::DMatrix::from_fn(d, d, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            cov[a * d + b] / n as f64 - mean[a] * mean[b]
        });
        let eig = m.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let (es, ds) = (self.layout.enc_skip, self.layout.dec_skip);
        let mut ew = vec![0.0f32; 2 * c * d];
        let mut eb = vec![0.0f32; 2 * c];
        let mut dw = vec![0.0f32; d * c];
        for (k, &col) in order.iter().take(c.min(d)).enumerate() {
            let u = eig.eigenvectors.column(col);
            let sd = eig.eigenvalues[col].max(1e-12).sqrt();
            let mut proj = 0.0;
            for j in 0..d {
                ew[k * d + j] = (u[j] / sd) as f32;
                dw[j * c + k] = (u[j] * sd) as f32;
                proj += u[j] * mean[j];
            }
            eb[k] = (-proj / sd) as f32;
        }
        *self.params.get_mut(es.w) = Tensor::new(vec![2 * c, d, 1, 1], ew)?;
        *self.params.get_mut(es.b) = Tensor::new(vec![2 * c], eb)?;
        *self.params.get_mut(ds.w) = Tensor::new(vec![d, c, 1, 1], dw)?;
        *self.params.get_mut(ds.b) = Tensor::new(vec![d], mean.iter().map(|&v| v as f32).collect())?;
        Ok(())
    }

    /// Sets the latent normalization to the per-channel mean and std of the
    /// posterior means over `videos`.
    pub fn fit_latent_stats(&mut self, videos: &[Video]) -> Result<()> {
        let c = self.cfg.latent_channels;
        let (shift, scale) = (self.layout.latent_shift, self.layout.latent_scale);
        *self.params.get_mut(shift) = Tensor::zeros(&[c]);
        *self.params.get_mut(scale) = Tensor::ones(&[c]);
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        let mut n = 0usize;
        for v in videos {
            let z = self.encode(v)?;
            let s = z.shape();
            let hw = s[2] * s[3];
            for f in 0..s[0] {
                for ch in 0..c {
                    for p in 0..hw {
                        let val = z.data()[(f * c + ch) * hw + p] as f64;
                        sum[ch] += val;
                        sq[ch] += val * val;
                    }
                }
            }
            n += s[0] * hw;
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = (0..c).map(|k| ((sq[k] / n as f64 - (mean[k] as f64).powi(2)).max(1e-8).sqrt()) as f32).collect();
        *self.params.get_mut(shift) = Tensor::new(vec![c], mean)?;
        *self.params.get_mut(scale) = Tensor::new(vec![c], std)?;
        Ok(())
    }
}

/// `(x - shift) / scale` per channel of `[n, c, h, w]`, or the inverse.
fn per_channel_affine<'g>(z: Var<'g>, shift: Var<'g>, scale: Var<'g>, forward: bool) -> Var<'g> {
    let s = z.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let sh = shift.value();
    let sc = scale.value();
    let mut mul = Vec::with_capacity(n * c * hw);
    let mut add = Vec::with_capacity(n * c * hw);
    for _ in 0..n {
        for ch in 0..c {
            for _ in 0..hw {
                if forward {
                    mul.push(1.0 / sc.data()[ch]);
                    add.push(-sh.data()[ch] / sc.data()[ch]);
                } else {
                    mul.push(sc.data()[ch]);
                    add.push(sh.data()[ch]);
                }
            }
        }
    }
    let g = z.graph();
    z.mul(g.constant(&Tensor::new(s.clone(), mul).unwrap())).add(g.constant(&Tensor::new(s, add).unwrap()))
}

/// Training summary for [`train_codec`].
#[derive(Clone, Debug, Default)]
pub struct CodecTrainLog {
    /// `(step, loss)` at every logged step.
    pub losses: Vec<(usize, f32)>,
    pub initial_recon: f32,
    pub final_recon: f32,
    pub validation_psnr: f32,
}

/// Schedule for [`train_codec`].
#[derive(Clone, Debug)]
pub struct CodecTrainOptions {
    pub steps: usize,
    /// Clips averaged per update.
    pub batch: usize,
    pub seed: u64,
    /// Start the linear shortcut from the data's principal components.
    pub principal_init: bool,
}

impl Default for CodecTrainOptions {
    fn default() -> Self {
        CodecTrainOptions { steps: 1000, batch: 4, seed: 0, principal_init: true }
    }
}

/// Cosine decay from `lr` to `lr / 20`.
pub fn cosine_lr(lr: f32, step: usize, steps: usize) -> f32 {
    let p = step as f32 / steps.max(1) as f32;
    let lo = lr / 20.0;
    lo + (lr - lo) * 0.5 * (1.0 + (std::f32::consts::PI * p).cos())
}

/// Fits the codec on `dataset`, then fits the latent normalization and
/// reports validation PSNR. Aborts on a non-finite loss.
pub fn train_codec(
    codec: &mut Codec,
    dataset: &[Video],
    validation: &[Video],
    opt: OptimizerConfig,
    sched: &CodecTrainOptions,
) -> Result<CodecTrainLog> {
    if dataset.is_empty() {
        return Err(AaptError::Contract("train_codec needs a nonempty dataset".into()));
    }
    if sched.principal_init {
        codec.init_principal_shortcut(dataset)?;
    }
    let steps = sched.steps;
    let batch = sched.batch.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let base_lr = opt.learning_rate;
    let mut optim = Optimizer::new(opt, 0)?;
    let mut log = CodecTrainLog::default();
    let mut recent = Vec::new();
    for step in 0..steps {
        optim.set_learning_rate(cosine_lr(base_lr, step, steps));
        let g = Graph::new();
        let b = Bound { p: codec.params.bind(&g, 0) };
        let mut total: Option<Var<'_>> = None;
        let mut recon = 0.0;
        for _ in 0..batch {
            let v = &dataset[rng.random_range(0..dataset.len())];
            let (l, r) = codec.train_loss(&g, &b, v, &mut rng)?;
            recon += r / batch as f32;
            total = Some(match total {
                Some(t) => t.add(l),
                None => l,
            });
        }
        let loss = total.unwrap().scale(1.0 / batch as f32);
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(AaptError::NonFinite(format!("codec loss at step {step}")));
        }
        let grads = g.backward(loss)?;
        optim.step(&mut codec.params, &grads)?;
        if step == 0 {
            log.initial_recon = recon;
        }
        recent.push(recon);
        if step % 10 == 0 || step + 1 == steps {
            log.losses.push((step, lv));
        }
    }
    let tail = recent.len().min(20);
    log.final_recon = recent[recent.len() - tail..].iter().sum::<f32>() / tail.max(1) as f32;
    codec.fit_latent_stats(dataset)?;
    let val = if validation.is_empty() { dataset } else { validation };
    let mut psnr = 0.0;
    for v in val {
        psnr += codec.decode(&codec.encode(v)?)?.psnr(v);
    }
    log.validation_psnr = psnr / val.len() as f32;
    Ok(log)
}
