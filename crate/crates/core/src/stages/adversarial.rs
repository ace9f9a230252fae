//! Stage 3: adversarial post-training with student-forcing rollouts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::diffusion::{clip_noise, x0_from_velocity};
use super::{context_input, teacher_inputs, RecycleMode};
use crate::autograd::{Grads, Graph, Var};
use crate::backbone::{Backbone, Bound, FrameInput, Provenance};
use crate::data::LatentClip;
use crate::error::{AaptError, Result};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::rollout::{rollout_frames, rollout_open, Carry, RecycledInput};
use crate::tensor::Tensor;

/// Parameter ids of the discriminator start here so both networks can live
/// in one graph.
pub const DISC_PARAM_BASE: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub sigma_perturb: f32,
    pub lambda_reg: f32,
    pub segment_len_frames: usize,
    pub overlap_frames: usize,
    pub extensions: usize,
    pub detach_recycled: bool,
    pub recycle: RecycleMode,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        AdversarialConfig { sigma_perturb: 0.1, lambda_reg: 1000.0, segment_len_frames: 4, overlap_frames: 1, extensions: 3, detach_recycled: true, recycle: RecycleMode::Full }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_perturb > 0.0) {
            return Err(AaptError::Config("sigma_perturb must be positive".into()));
        }
        if self.overlap_frames == 0 || self.overlap_frames >= self.segment_len_frames {
            return Err(AaptError::Config("need 0 < overlap_frames < segment_len_frames".into()));
        }
        Ok(())
    }

    pub fn recycled(&self) -> RecycledInput {
        if self.recycle == RecycleMode::ZeroAfterFirst {
            RecycledInput::Zeroed
        } else if self.detach_recycled {
            RecycledInput::Detached
        } else {
            RecycledInput::Attached
        }
    }

    /// Frames generated by one long-video round.
    pub fn long_video_frames(&self) -> usize {
        self.segment_len_frames + self.extensions * (self.segment_len_frames - self.overlap_frames)
    }
}

/// RMSProp pair for generator and discriminator.
pub fn adversarial_optimizers(lr_g: f32, lr_d: f32) -> Result<(Optimizer, Optimizer)> {
    Ok((Optimizer::new(OptimizerConfig::rmsprop(lr_g, 0.9), 0)?, Optimizer::new(OptimizerConfig::rmsprop(lr_d, 0.9), DISC_PARAM_BASE)?))
}

/// A clip as the discriminator sees it: clean frames in the noise channel,
/// the previous frame in the recycled channel.
#[derive(Clone, Debug)]
pub struct DiscInput<'g> {
    pub prompt_id: usize,
    pub context: Var<'g>,
    pub frames: Vec<Var<'g>>,
    pub recycled: Vec<Var<'g>>,
    pub controls: Vec<Var<'g>>,
}

impl<'g> DiscInput<'g> {
    /// `controls[k]` belongs to `frames[k]`.
    pub fn new(g: &'g Graph, context: Var<'g>, frames: Vec<Var<'g>>, controls: &[Tensor], prompt_id: usize) -> Self {
        let mut recycled = vec![context];
        recycled.extend(frames.iter().take(frames.len().saturating_sub(1)).copied());
        DiscInput { prompt_id, context, frames, recycled, controls: controls.iter().map(|c| g.constant(c)).collect() }
    }

    pub fn from_clip(g: &'g Graph, clip: &LatentClip) -> Self {
        let frames: Vec<Var<'g>> = clip.frames[1..].iter().map(|f| g.constant(f)).collect();
        let controls: Vec<Tensor> = (1..clip.len()).map(|k| clip.control_row(k)).collect();
        Self::new(g, g.constant(&clip.frames[0]), frames, &controls, clip.prompt_id)
    }

    /// Applies the generator's recycling mode to the recycled channel, so
    /// the critic is conditioned the way the generator is.
    pub fn with_recycle(mut self, mode: RecycleMode) -> Self {
        let g = self.context.graph();
        for k in 1..self.recycled.len() {
            if !mode.keeps(k + 1) {
                self.recycled[k] = g.constant(&Tensor::zeros(&self.recycled[k].shape()));
            }
        }
        self
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn detached(&self) -> Self {
        let d = |v: &[Var<'g>]| v.iter().map(|x| x.detach()).collect();
        DiscInput { prompt_id: self.prompt_id, context: self.context.detach(), frames: d(&self.frames), recycled: d(&self.recycled), controls: self.controls.clone() }
    }

    /// Adds `sigma * noise[k]` to the frame channel only.
    pub fn perturbed(&self, noise: &[Tensor], sigma: f32) -> Self {
        let g = self.context.graph();
        let frames = self.frames.iter().zip(noise).map(|(f, n)| f.add(g.constant(&n.map(|v| v * sigma)))).collect();
        DiscInput { frames, ..self.clone() }
    }

    pub fn noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.frames.iter().map(|f| Tensor::from_fn(&f.shape(), |_| rng.sample::<f32, _>(StandardNormal))).collect()
    }
}

/// One logit per evaluated frame position.
#[derive(Clone, Copy, Debug)]
pub struct DiscOutput<'g> {
    /// `[frames, 1]`.
    pub logits: Var<'g>,
}

impl DiscOutput<'_> {
    pub fn per_frame_logits(&self) -> Vec<f32> {
        self.logits.value().to_vec()
    }
}

/// Discriminator timestep: uniform, not shifted.
pub fn sample_disc_t<R: Rng + ?Sized>(rng: &mut R) -> f32 {
    rng.random::<f32>()
}

pub fn disc_forward<'g>(d: &Bound<'g>, x: &DiscInput<'g>, t: f32) -> Result<DiscOutput<'g>> {
    if x.is_empty() {
        return Err(AaptError::Contract("discriminator needs at least one frame".into()));
    }
    let g = d.graph();
    let mut inputs = vec![context_input(g, x.context, d.cfg().control_channels)];
    for k in 0..x.len() {
        inputs.push(FrameInput { noisy: x.frames[k], recycled: x.recycled[k], control: x.controls[k], t });
    }
    let hidden = d.forward_parallel(&inputs, x.prompt_id)?.hidden;
    let tpf = d.cfg().tokens_per_frame();
    Ok(DiscOutput { logits: d.logits(hidden.slice_rows(tpf, hidden.shape()[0]))? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Generator,
    Discriminator,
}

/// Mean of `f(fake - real)` with `f_G(x) = -ln(1 + e^-x)` and
/// `f_D(x) = -ln(1 + e^x)`; each side maximises its value.
pub fn rpgan_loss<'g>(fake: Var<'g>, real: Var<'g>, side: Side) -> Result<Var<'g>> {
    if fake.shape() != real.shape() {
        return Err(AaptError::Shape(format!("logit shapes {:?} vs {:?}", fake.shape(), real.shape())));
    }
    let diff = fake.sub(real);
    Ok(match side {
        Side::Generator => diff.neg().softplus().neg().mean(),
        Side::Discriminator => diff.softplus().neg().mean(),
    })
}

/// `lambda * mean_k (D(x)_k - D(x + sigma n)_k)^2` for any per-frame scorer.
pub fn approx_reg<'g, F>(disc: F, x: &DiscInput<'g>, noise: &[Tensor], sigma: f32, lambda: f32) -> Result<Var<'g>>
where
    F: Fn(&DiscInput<'g>) -> Result<Var<'g>>,
{
    let clean = disc(x)?;
    let moved = disc(&x.perturbed(noise, sigma))?;
    Ok(clean.sub(moved).square().mean().scale(lambda))
}

/// Approximated R1 on real data.
pub fn approx_r1<'g, R: Rng + ?Sized>(d: &Bound<'g>, real: &DiscInput<'g>, t: f32, cfg: &AdversarialConfig, rng: &mut R) -> Result<Var<'g>> {
    let noise = real.noise(rng);
    approx_reg(|x| Ok(disc_forward(d, x, t)?.logits), real, &noise, cfg.sigma_perturb, cfg.lambda_reg)
}

/// Approximated R2 on generated samples.
pub fn approx_r2<'g, R: Rng + ?Sized>(d: &Bound<'g>, fake: &DiscInput<'g>, t: f32, cfg: &AdversarialConfig, rng: &mut R) -> Result<Var<'g>> {
    approx_r1(d, fake, t, cfg, rng)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdvRecord {
    /// Minimised generator objective `-f_G`.
    pub g_loss: f32,
    /// Minimised discriminator objective `-f_D + aR1 + aR2`.
    pub d_loss: f32,
    pub ar1: f32,
    pub ar2: f32,
}

impl AdvRecord {
    pub fn is_finite(&self) -> bool {
        self.g_loss.is_finite() && self.d_loss.is_finite() && self.ar1.is_finite() && self.ar2.is_finite()
    }
}

fn mean_of<'g>(vs: Vec<Var<'g>>) -> Var<'g> {
    let n = vs.len() as f32;
    vs.into_iter().reduce(|a, b| a.add(b)).expect("non-empty").scale(1.0 / n)
}

fn check_finite(r: &AdvRecord) -> Result<()> {
    if r.is_finite() {
        Ok(())
    } else {
        Err(AaptError::NonFinite(format!("adversarial losses {r:?}")))
    }
}

/// One discriminator step then one generator step on student-forcing
/// rollouts of `batch`. The generator is scored by the updated
/// discriminator.
pub fn adversarial_round(
    gen: &mut Backbone,
    disc: &mut Backbone,
    g_opt: &mut Optimizer,
    d_opt: &mut Optimizer,
    batch: &[&LatentClip],
    cfg: &AdversarialConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdvRecord> {
    if batch.is_empty() {
        return Err(AaptError::Contract("empty batch".into()));
    }
    let g = Graph::new();
    let gb = gen.bind(&g, 0);
    let mut fakes = Vec::with_capacity(batch.len());
    let mut reals = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    for clip in batch {
        if clip.len() < 2 {
            return Err(AaptError::Contract("adversarial clips need a generated frame".into()));
        }
        let controls: Vec<Tensor> = (1..clip.len()).map(|k| clip.control_row(k)).collect();
        let first = g.constant(&clip.frames[0]);
        let mut st = rollout_open(&gb, first, clip.prompt_id)?;
        let frames = rollout_frames(&gb, &mut st, &controls, rng.random(), cfg.recycled())?;
        fakes.push(DiscInput::new(&g, first, frames, &controls, clip.prompt_id).with_recycle(cfg.recycle));
        reals.push(DiscInput::from_clip(&g, clip).with_recycle(cfg.recycle));
        ts.push(sample_disc_t(rng));
    }
    let mut rec = AdvRecord::default();
    {
        let db = disc.bind(&g, DISC_PARAM_BASE);
        let (mut dl, mut r1s, mut r2s) = (Vec::new(), Vec::new(), Vec::new());
        for ((fake, real), &t) in fakes.iter().zip(&reals).zip(&ts) {
            let fake = fake.detached();
            let fd = rpgan_loss(disc_forward(&db, &fake, t)?.logits, disc_forward(&db, real, t)?.logits, Side::Discriminator)?;
            let r1 = approx_r1(&db, real, t, cfg, rng)?;
            let r2 = approx_r2(&db, &fake, t, cfg, rng)?;
            dl.push(fd.neg().add(r1).add(r2));
            r1s.push(r1);
            r2s.push(r2);
        }
        let d_loss = mean_of(dl);
        rec.d_loss = d_loss.item();
        rec.ar1 = mean_of(r1s).item();
        rec.ar2 = mean_of(r2s).item();
        check_finite(&rec)?;
        let grads = g.backward(d_loss)?;
        d_opt.step(&mut disc.params, &grads)?;
    }
    let db = disc.bind_const(&g);
    let mut gl = Vec::new();
    for ((fake, real), &t) in fakes.iter().zip(&reals).zip(&ts) {
        gl.push(rpgan_loss(disc_forward(&db, fake, t)?.logits, disc_forward(&db, real, t)?.logits, Side::Generator)?.neg());
    }
    let g_loss = mean_of(gl);
    rec.g_loss = g_loss.item();
    check_finite(&rec)?;
    let grads = g.backward(g_loss)?;
    g_opt.step(&mut gen.params, &grads)?;
    Ok(rec)
}

/// Discriminator scores for the teacher-forcing ablation: every fake frame
/// `k` is evaluated against a cache holding the real frames `0..k`.
pub struct TeacherForcedScores<'g> {
    pub fake_logits: Var<'g>,
    pub real_logits: Var<'g>,
    /// Provenance of the cached frames each fake frame attended to.
    pub context_provenance: Vec<Vec<Provenance>>,
}

pub fn teacher_forced_scores<'g>(d: &Bound<'g>, clip: &LatentClip, fakes: &[Var<'g>], t: f32) -> Result<TeacherForcedScores<'g>> {
    if fakes.len() + 1 != clip.len() {
        return Err(AaptError::Shape(format!("{} fakes for a clip of {}", fakes.len(), clip.len())));
    }
    let g = d.graph();
    let real: Vec<Var<'g>> = clip.frames.iter().map(|f| g.constant(f)).collect();
    let mut cache = d.prompt_cache(clip.prompt_id)?;
    d.forward_step(&mut cache, &context_input(g, real[0], d.cfg().control_channels), 0, Provenance::Context)?;
    cache.evict();
    let (mut fl, mut rl, mut prov) = (Vec::new(), Vec::new(), Vec::new());
    for k in 1..clip.len() {
        let control = g.constant(&clip.control_row(k));
        let mut c = cache.clone();
        prov.push(c.frames.iter().map(|f| f.provenance).collect());
        let fake_in = FrameInput { noisy: fakes[k - 1], recycled: real[k - 1], control, t };
        fl.push(d.logits(d.forward_step(&mut c, &fake_in, k, Provenance::Generated)?.hidden)?);
        let real_in = FrameInput { noisy: real[k], recycled: real[k - 1], control, t };
        rl.push(d.logits(d.forward_step(&mut cache, &real_in, k, Provenance::Real)?.hidden)?);
        cache.evict();
    }
    Ok(TeacherForcedScores { fake_logits: Var::concat_rows(&fl), real_logits: Var::concat_rows(&rl), context_provenance: prov })
}

/// Parallel one-step predictions from ground-truth inputs at `t = 1`.
pub fn teacher_forced_predictions<'g>(gb: &Bound<'g>, clip: &LatentClip, eps: &[Tensor]) -> Result<Vec<Var<'g>>> {
    let g = gb.graph();
    let tpf = gb.cfg().tokens_per_frame();
    let noisy: Vec<Var<'g>> = eps.iter().map(|e| g.constant(e)).collect();
    let inputs = teacher_inputs(g, clip, &noisy, 1.0, RecycleMode::Full);
    let out = gb.forward_parallel(&inputs, clip.prompt_id)?.out;
    Ok((1..clip.len()).map(|k| x0_from_velocity(noisy[k - 1], out.slice_rows(k * tpf, (k + 1) * tpf), 1.0)).collect())
}

fn perturb<'g>(v: &[Var<'g>], sigma: f32, rng: &mut ChaCha8Rng) -> Vec<Var<'g>> {
    v.iter().map(|x| x.add(x.graph().constant(&Tensor::from_fn(&x.shape(), |_| sigma * rng.sample::<f32, _>(StandardNormal))))).collect()
}

/// Ablation round: the generator predicts every frame in parallel from
/// ground truth; the discriminator scores each prediction on a real cache.
pub fn teacher_forcing_round(
    gen: &mut Backbone,
    disc: &mut Backbone,
    g_opt: &mut Optimizer,
    d_opt: &mut Optimizer,
    batch: &[&LatentClip],
    cfg: &AdversarialConfig,
    rng: &mut ChaCha8Rng,
) -> Result<AdvRecord> {
    if batch.is_empty() {
        return Err(AaptError::Contract("empty batch".into()));
    }
    let g = Graph::new();
    let gb = gen.bind(&g, 0);
    let mut fakes = Vec::new();
    let mut ts = Vec::new();
    for clip in batch {
        let eps = clip_noise(clip, rng);
        fakes.push(teacher_forced_predictions(&gb, clip, &eps)?);
        ts.push(sample_disc_t(rng));
    }
    let mut rec = AdvRecord::default();
    {
        let db = disc.bind(&g, DISC_PARAM_BASE);
        let (mut dl, mut r1s, mut r2s) = (Vec::new(), Vec::new(), Vec::new());
        for ((clip, fake), &t) in batch.iter().zip(&fakes).zip(&ts) {
            let fake: Vec<Var<'_>> = fake.iter().map(|f| f.detach()).collect();
            let s = teacher_forced_scores(&db, clip, &fake, t)?;
            let fd = rpgan_loss(s.fake_logits, s.real_logits, Side::Discriminator)?;
            let sp = teacher_forced_scores(&db, clip, &perturb(&fake, cfg.sigma_perturb, rng), t)?;
            let real_frames: Vec<Var<'_>> = clip.frames[1..].iter().map(|f| g.constant(f)).collect();
            let moved_real = perturb(&real_frames, cfg.sigma_perturb, rng);
            let sr = teacher_forced_scores(&db, clip, &moved_real, t)?;
            let r1 = s.real_logits.sub(sr.fake_logits).square().mean().scale(cfg.lambda_reg);
            let r2 = s.fake_logits.sub(sp.fake_logits).square().mean().scale(cfg.lambda_reg);
            dl.push(fd.neg().add(r1).add(r2));
            r1s.push(r1);
            r2s.push(r2);
        }
        let d_loss = mean_of(dl);
        rec.d_loss = d_loss.item();
        rec.ar1 = mean_of(r1s).item();
        rec.ar2 = mean_of(r2s).item();
        check_finite(&rec)?;
        let grads = g.backward(d_loss)?;
        d_opt.step(&mut disc.params, &grads)?;
    }
    let db = disc.bind_const(&g);
    let mut gl = Vec::new();
    for ((clip, fake), &t) in batch.iter().zip(&fakes).zip(&ts) {
        let s = teacher_forced_scores(&db, clip, fake, t)?;
        gl.push(rpgan_loss(s.fake_logits, s.real_logits, Side::Generator)?.neg());
    }
    let g_loss = mean_of(gl);
    rec.g_loss = g_loss.item();
    check_finite(&rec)?;
    let grads = g.backward(g_loss)?;
    g_opt.step(&mut gen.params, &grads)?;
    Ok(rec)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongVideoRecord {
    pub losses: AdvRecord,
    pub segments: usize,
    /// Every generated frame in stream order.
    pub stream: Vec<Tensor>,
    /// Frames scored per segment, overlap included.
    pub segment_frames: Vec<Vec<Tensor>>,
}

/// Streams one long rollout from `first`'s first frame in segments. Each
/// segment is generated in a fresh graph from the detached cache of the
/// previous one; gradients of all segments are accumulated into one step
/// per network. `controls[k]` drives frame `k + 1`; `reals` supply real
/// segments in turn and need at least `segment_len_frames + 1` frames.
#[allow(clippy::too_many_arguments)]
pub fn long_video_round(
    gen: &mut Backbone,
    disc: &mut Backbone,
    g_opt: &mut Optimizer,
    d_opt: &mut Optimizer,
    first: &LatentClip,
    controls: &[Tensor],
    reals: &[&LatentClip],
    cfg: &AdversarialConfig,
    rng: &mut ChaCha8Rng,
) -> Result<LongVideoRecord> {
    cfg.validate()?;
    if cfg.extensions < 1 {
        return Err(AaptError::Config("long-video training needs at least one extension".into()));
    }
    let (seg, ov) = (cfg.segment_len_frames, cfg.overlap_frames);
    let total = cfg.long_video_frames();
    if controls.len() < total {
        return Err(AaptError::Contract(format!("{} controls for {total} frames", controls.len())));
    }
    if reals.is_empty() || reals.iter().any(|r| r.len() < seg + 1) {
        return Err(AaptError::Contract("real segments are too short".into()));
    }
    let noise_seed: u64 = rng.random();
    let mut carry: Option<Carry> = None;
    let mut stream: Vec<Tensor> = Vec::with_capacity(total);
    let mut segment_frames = Vec::new();
    let (mut gd, mut gg) = (Grads::default(), Grads::default());
    let mut acc = AdvRecord::default();
    let segments = cfg.extensions + 1;
    for s in 0..segments {
        let g = Graph::new();
        let gb = gen.bind(&g, 0);
        let mut st = match &carry {
            None => rollout_open(&gb, g.constant(&first.frames[0]), first.prompt_id)?,
            Some(c) => c.resume(&g),
        };
        let start = stream.len();
        let n_new = if s == 0 { seg } else { seg - ov };
        let new = rollout_frames(&gb, &mut st, &controls[start..start + n_new], noise_seed, cfg.recycled())?;
        let real_clip = reals[s % reals.len()];
        let (fake, real) = if s == 0 {
            let ctl: Vec<Tensor> = controls[..seg].to_vec();
            (DiscInput::new(&g, g.constant(&first.frames[0]), new.clone(), &ctl, first.prompt_id), DiscInput::from_clip(&g, &real_clip.window(0, seg + 1)))
        } else {
            let tail: Vec<Var<'_>> = stream[start - ov..].iter().map(|f| g.constant(f)).collect();
            let mut frames = tail[1..].to_vec();
            frames.extend(new.iter().copied());
            let ctl: Vec<Tensor> = controls[start - ov + 1..start + n_new].to_vec();
            (DiscInput::new(&g, tail[0], frames, &ctl, first.prompt_id), DiscInput::from_clip(&g, &real_clip.window(0, seg)))
        };
        let (fake, real) = (fake.with_recycle(cfg.recycle), real.with_recycle(cfg.recycle));
        let t = sample_disc_t(rng);
        let db = disc.bind(&g, DISC_PARAM_BASE);
        let fake_d = fake.detached();
        let fd = rpgan_loss(disc_forward(&db, &fake_d, t)?.logits, disc_forward(&db, &real, t)?.logits, Side::Discriminator)?;
        let r1 = approx_r1(&db, &real, t, cfg, rng)?;
        let r2 = approx_r2(&db, &fake_d, t, cfg, rng)?;
        let d_loss = fd.neg().add(r1).add(r2);
        let dc = disc.bind_const(&g);
        let g_loss = rpgan_loss(disc_forward(&dc, &fake, t)?.logits, disc_forward(&dc, &real, t)?.logits, Side::Generator)?.neg();
        let rec = AdvRecord { g_loss: g_loss.item(), d_loss: d_loss.item(), ar1: r1.item(), ar2: r2.item() };
        check_finite(&rec)?;
        gd.accumulate(g.backward(d_loss)?);
        gg.accumulate(g.backward(g_loss)?);
        acc.g_loss += rec.g_loss / segments as f32;
        acc.d_loss += rec.d_loss / segments as f32;
        acc.ar1 += rec.ar1 / segments as f32;
        acc.ar2 += rec.ar2 / segments as f32;
        let mut scored: Vec<Tensor> = if s == 0 { Vec::new() } else { stream[start - ov..].to_vec() };
        for f in &new {
            let v = f.value();
            scored.push(v.clone());
            stream.push(v);
        }
        segment_frames.push(scored);
        carry = Some(st.carry());
    }
    gd.scale(1.0 / segments as f32);
    gg.scale(1.0 / segments as f32);
    d_opt.step(&mut disc.params, &gd)?;
    g_opt.step(&mut gen.params, &gg)?;
    Ok(LongVideoRecord { losses: acc, segments, stream, segment_frames })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::student_forcing_rollout;
    use crate::testutil::{tiny_backbone, toy_clip};
    use rand::SeedableRng;

    fn pair(seed: u64) -> (Backbone, Backbone) {
        let cfg = tiny_backbone();
        let gen = Backbone::new(cfg, seed).unwrap();
        let disc = Backbone::discriminator_from(&gen, seed + 1).unwrap();
        (gen, disc)
    }

    #[test]
    fn critic_recycling_follows_the_generator() {
        let cfg = tiny_backbone();
        let clip = toy_clip(&cfg, 4, 5);
        let g = Graph::no_grad();
        let full = DiscInput::from_clip(&g, &clip).with_recycle(RecycleMode::Full);
        for k in 0..3 {
            assert_eq!(full.recycled[k].value(), clip.frames[k]);
        }
        let zero = DiscInput::from_clip(&g, &clip).with_recycle(RecycleMode::ZeroAfterFirst);
        assert_eq!(zero.recycled[0].value(), clip.frames[0]);
        for k in 1..3 {
            assert!(zero.recycled[k].value().data().iter().all(|v| *v == 0.0));
            assert_eq!(zero.frames[k].value(), clip.frames[k + 1]);
        }
    }

    #[test]
    fn rpgan_values() {
        let g = Graph::no_grad();
        let v = |x: &[f32]| g.constant(&Tensor::new(vec![x.len(), 1], x.to_vec()).unwrap());
        let eq = rpgan_loss(v(&[0.3, -1.0]), v(&[0.3, -1.0]), Side::Generator).unwrap().item();
        assert!((eq + std::f32::consts::LN_2).abs() < 1e-6);
        let d = rpgan_loss(v(&[1.0]), v(&[0.0]), Side::Discriminator).unwrap().item();
        assert!((d - -(1.0f32 + 1.0f32.exp()).ln()).abs() < 1e-6);
        assert!((d + 1.3133).abs() < 1e-4);
        let far = rpgan_loss(v(&[60.0]), v(&[0.0]), Side::Generator).unwrap().item();
        assert!(far.abs() < 1e-6);
        let far_d = rpgan_loss(v(&[60.0]), v(&[0.0]), Side::Discriminator).unwrap().item();
        assert!((far_d + 60.0).abs() < 1e-4);
        for side in [Side::Generator, Side::Discriminator] {
            let a = rpgan_loss(v(&[0.7, 2.0]), v(&[-0.2, 0.4]), side).unwrap().item();
            let b = rpgan_loss(v(&[5.7, 7.0]), v(&[4.8, 5.4]), side).unwrap().item();
            assert!((a - b).abs() < 1e-6);
        }
        assert!(rpgan_loss(v(&[1.0]), v(&[0.0, 1.0]), Side::Generator).is_err());
    }

    fn linear_scores<'g>(d: &DiscInput<'g>, w: Var<'g>) -> Result<Var<'g>> {
        Ok(Var::concat_rows(&d.frames.iter().map(|f| f.mul(w).sum().reshape(&[1, 1])).collect::<Vec<_>>()))
    }

    fn linear_reg(x: &[f32]) -> (f32, f64) {
        let g = Graph::no_grad();
        let w = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let n = Tensor::new(vec![2, 2], vec![0.3, 1.2, -0.7, 0.1]).unwrap();
        let x = Tensor::new(vec![2, 2], x.to_vec()).unwrap();
        let input = DiscInput::new(&g, g.constant(&x), vec![g.constant(&x)], &[Tensor::zeros(&[1, 1])], 0);
        let wv = g.constant(&w);
        let (sigma, lambda) = (0.1f32, 1000.0f32);
        let reg = approx_reg(|d| linear_scores(d, wv), &input, std::slice::from_ref(&n), sigma, lambda).unwrap().item();
        let wn: f64 = w.data().iter().zip(n.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        (reg, lambda as f64 * (sigma as f64).powi(2) * wn * wn)
    }

    #[test]
    fn linear_discriminator_regulariser_closed_form() {
        let (reg, want) = linear_reg(&[0.0; 4]);
        assert!(((reg as f64 - want) / want).abs() < 1e-6, "{reg} vs {want}");
        // Away from the origin the logit difference cancels in f32.
        let (reg, want) = linear_reg(&[1.0, 2.0, 3.0, 4.0]);
        assert!(((reg as f64 - want) / want).abs() < 1e-5, "{reg} vs {want}");
        let g = Graph::no_grad();
        let x = g.constant(&Tensor::ones(&[2, 2]));
        let input = DiscInput::new(&g, x, vec![x], &[Tensor::zeros(&[1, 1])], 0);
        let wv = g.constant(&Tensor::ones(&[2, 2]));
        let zero = approx_reg(|d| linear_scores(d, wv), &input, &[Tensor::ones(&[2, 2])], 0.0, 1000.0).unwrap().item();
        assert_eq!(zero, 0.0);
    }

    #[test]
    fn disc_logits_are_per_frame_and_causal() {
        let (_, disc) = pair(1);
        let clip = toy_clip(&disc.cfg, 4, 2);
        let g = Graph::no_grad();
        let d = disc.bind_const(&g);
        let a = disc_forward(&d, &DiscInput::from_clip(&g, &clip), 0.4).unwrap().per_frame_logits();
        assert_eq!(a.len(), 3);
        let mut moved = clip.clone();
        moved.frames[2] = moved.frames[2].map(|v| v + 1.0);
        let b = disc_forward(&d, &DiscInput::from_clip(&g, &moved), 0.4).unwrap().per_frame_logits();
        assert!((a[0] - b[0]).abs() <= 1e-6);
        assert_ne!(a[1], b[1]);
        let prefix = disc_forward(&d, &DiscInput::from_clip(&g, &clip.window(0, 2)), 0.4).unwrap().per_frame_logits();
        assert!((prefix[0] - a[0]).abs() < 1e-5);
    }

    #[test]
    fn disc_timestep_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 10_000;
        let mut x: Vec<f32> = (0..n).map(|_| sample_disc_t(&mut rng)).collect();
        x.sort_by(f32::total_cmp);
        let ks = x.iter().enumerate().map(|(i, &v)| ((i + 1) as f32 / n as f32 - v).abs().max((v - i as f32 / n as f32).abs())).fold(0.0f32, f32::max);
        assert!(ks < 1.36 / (n as f32).sqrt(), "KS {ks}");
    }

    #[test]
    fn round_is_finite_and_regularisers_only_in_d() {
        let (mut gen, mut disc) = pair(3);
        let clips: Vec<_> = (0..2).map(|s| toy_clip(&gen.cfg, 3, s)).collect();
        let refs: Vec<_> = clips.iter().collect();
        let (mut go, mut dopt) = adversarial_optimizers(1e-4, 1e-4).unwrap();
        let before = gen.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = adversarial_round(&mut gen, &mut disc, &mut go, &mut dopt, &refs, &AdversarialConfig::default(), &mut rng).unwrap();
        assert!(r.is_finite());
        assert!(r.ar1 >= 0.0 && r.ar2 >= 0.0);
        assert!(gen.params.tensors().iter().zip(before.tensors()).any(|(a, b)| a != b));
        let r = teacher_forcing_round(&mut gen, &mut disc, &mut go, &mut dopt, &refs, &AdversarialConfig::default(), &mut rng).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn teacher_forced_scores_use_real_context() {
        let (gen, disc) = pair(4);
        let clip = toy_clip(&gen.cfg, 4, 1);
        let g = Graph::no_grad();
        let gb = gen.bind_const(&g);
        let eps = clip_noise(&clip, &mut ChaCha8Rng::seed_from_u64(2));
        let fakes = teacher_forced_predictions(&gb, &clip, &eps).unwrap();
        let s = teacher_forced_scores(&disc.bind_const(&g), &clip, &fakes, 0.5).unwrap();
        assert_eq!(s.fake_logits.shape(), vec![3, 1]);
        assert_eq!(s.context_provenance[0], vec![Provenance::Context]);
        assert_eq!(s.context_provenance[2], vec![Provenance::Context, Provenance::Real, Provenance::Real]);
    }

    #[test]
    fn long_video_segments_tile_one_stream() {
        let (mut gen, mut disc) = pair(5);
        let cfg = AdversarialConfig { segment_len_frames: 3, overlap_frames: 1, extensions: 2, ..AdversarialConfig::default() };
        let total = cfg.long_video_frames();
        assert_eq!(total, 3 + 2 * 2);
        let long = toy_clip(&gen.cfg, total + 1, 7);
        let controls: Vec<Tensor> = (1..=total).map(|k| long.control_row(k)).collect();
        let reals: Vec<_> = (0..2).map(|s| toy_clip(&gen.cfg, 4, s)).collect();
        let refs: Vec<_> = reals.iter().collect();
        let (mut go, mut dopt) = adversarial_optimizers(1e-4, 1e-4).unwrap();
        let probe = gen.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut seed_rng = rng.clone();
        let rec = long_video_round(&mut gen, &mut disc, &mut go, &mut dopt, &long, &controls, &refs, &cfg, &mut rng).unwrap();
        assert!(rec.losses.is_finite());
        assert_eq!(rec.stream.len(), total);
        assert_eq!(rec.segments, 3);
        let mut tiled = rec.segment_frames[0].clone();
        for s in &rec.segment_frames[1..] {
            tiled.extend(s[cfg.overlap_frames..].iter().cloned());
        }
        assert_eq!(tiled, rec.stream);
        let g = Graph::no_grad();
        let (whole, _) = student_forcing_rollout(&probe.bind_const(&g), g.constant(&long.frames[0]), &controls, long.prompt_id, seed_rng.random(), RecycledInput::Detached).unwrap();
        for (a, b) in whole.iter().zip(&rec.stream) {
            assert_eq!(&a.value(), b);
        }
    }
}
