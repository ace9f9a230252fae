//! The staged training pipeline, evaluation runs and ablations, driven by a
//! [`RunConfig`].

use std::sync::Arc;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{grid_to_tokens, tokens_to_grid, Backbone};
use crate::checkpoint::Checkpoint;
use crate::codec::{cosine_lr, train_codec, Codec, CodecTrainLog, CodecTrainOptions};
use crate::config::{AdvMode, RunConfig, Stage};
use crate::data::{latent_corpus, LatentClip};
use crate::error::{AaptError, Result};
use crate::eval::{control_error, corpus_mean, drift_metric, frame_features, gaussian_frechet, motion_magnitude, DriftCurve, EvalReport};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::stages::adversarial::{adversarial_optimizers, adversarial_round, long_video_round, teacher_forcing_round, AdvRecord, AdversarialConfig};
use crate::stages::consistency::{build_step_grid, cd_train_step, distillation_gap, DistillationGap};
use crate::stages::diffusion::{diffusion_train_step, validation_velocity_mse, TimestepSchedule};
use crate::stages::RecycleMode;
use crate::stream::GenSession;
use crate::tensor::Tensor;
use crate::video::Video;
use crate::world::{encode_camera, generate_clip, render_world, sample_trajectory, splitmix, MotionProfile, ScaleStats, TrainingClip, Trajectory, WorldState, CONTROL_CHANNELS};

/// Independent RNG per pipeline stage.
pub fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stage)))
}

/// Synthetic episodes plus the control normalization computed from them.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<TrainingClip>,
    pub val: Vec<TrainingClip>,
    pub stats: ScaleStats,
}

pub fn train_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.train_clips as u64).map(|i| cfg.seed * 100_000 + i).collect()
}

pub fn val_seeds(cfg: &RunConfig) -> Vec<u64> {
    (0..cfg.val_clips as u64).map(|i| cfg.seed * 100_000 + 50_000 + i).collect()
}

pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let profile = MotionProfile::named(&cfg.profile)?;
    let make = |seeds: Vec<u64>| -> Result<Vec<TrainingClip>> {
        seeds.into_iter().map(|s| generate_clip(s, cfg.clip_frames, &profile, cfg.height, cfg.width, true)).collect()
    };
    let train = make(train_seeds(cfg))?;
    let val = make(val_seeds(cfg))?;
    let stats = ScaleStats::from_trajectories(train.iter().map(|c| &c.trajectory));
    Ok(Corpus { train, val, stats })
}

#[derive(Clone, Debug)]
pub struct LatentData {
    pub train: Vec<LatentClip>,
    pub val: Vec<LatentClip>,
    pub dropped: usize,
}

pub fn encode_corpus(codec: &Codec, corpus: &Corpus, cfg: &RunConfig) -> Result<LatentData> {
    let (train, d1) = latent_corpus(codec, &corpus.train, &corpus.stats, cfg.outlier_threshold)?;
    let (val, d2) = latent_corpus(codec, &corpus.val, &corpus.stats, cfg.outlier_threshold)?;
    if train.is_empty() || val.is_empty() {
        return Err(AaptError::Contract("every clip was rejected".into()));
    }
    Ok(LatentData { train, val, dropped: d1 + d2 })
}

pub fn codec_stage(cfg: &RunConfig, corpus: &Corpus) -> Result<(Codec, CodecTrainLog)> {
    let mut codec = Codec::new(cfg.codec()?, splitmix(cfg.seed ^ 0xc0dec))?;
    let train: Vec<Video> = corpus.train.iter().map(|c| c.video()).collect::<Result<_>>()?;
    let val: Vec<Video> = corpus.val.iter().map(|c| c.video()).collect::<Result<_>>()?;
    let opts = CodecTrainOptions { steps: cfg.codec_steps, batch: cfg.codec_batch, seed: splitmix(cfg.seed ^ 1), principal_init: true };
    let log = train_codec(&mut codec, &train, &val, OptimizerConfig::adamw(cfg.codec_lr, 0.0), &opts)?;
    Ok((codec, log))
}

/// `step,loss` lines.
pub fn losses_csv(rows: &[(usize, f32)]) -> String {
    let mut s = String::from("step,loss\n");
    for (k, l) in rows {
        s.push_str(&format!("{k},{l}\n"));
    }
    s
}

#[derive(Clone, Debug, Default)]
pub struct AdaptLog {
    pub losses: Vec<(usize, f32)>,
    /// `(steps taken, validation velocity MSE)`.
    pub validation: Vec<(usize, f32)>,
}

impl AdaptLog {
    pub fn validation_at(&self, step: usize) -> Option<f32> {
        self.validation.iter().find(|(s, _)| *s == step).map(|v| v.1)
    }

    pub fn final_validation(&self) -> Option<f32> {
        self.validation.last().map(|v| v.1)
    }
}

fn sample_batch<'a, R: Rng>(clips: &'a [LatentClip], n: usize, rng: &mut R) -> Vec<&'a LatentClip> {
    (0..n.max(1)).map(|_| clips.choose(rng).expect("nonempty corpus")).collect()
}

/// Stage 1: teacher-forced flow matching, short clips first.
pub fn adapt(cfg: &RunConfig, data: &LatentData, recycle: RecycleMode) -> Result<(Backbone, AdaptLog)> {
    let mut model = Backbone::new(cfg.backbone()?, splitmix(cfg.seed ^ 0x5147))?;
    let sched = TimestepSchedule { s: cfg.s1_shift };
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.s1_lr, 0.0), 0)?;
    let mut rng = stage_rng(cfg.seed, 1);
    let short_len = cfg.codec()?.latent_frames(cfg.s1_short_frames)?;
    let short: Vec<LatentClip> = data.train.iter().map(|c| c.window(0, short_len.min(c.len()))).collect();
    let short_steps = (cfg.s1_steps as f32 * cfg.s1_short_fraction) as usize;
    let val_seed = splitmix(cfg.seed ^ 0x7a1);
    let mut log = AdaptLog::default();
    log.validation.push((0, validation_velocity_mse(&model, &data.val, &sched, recycle, 4, val_seed)?));
    for step in 0..cfg.s1_steps {
        opt.set_learning_rate(cosine_lr(cfg.s1_lr, step, cfg.s1_steps));
        let pool = if step < short_steps { &short } else { &data.train };
        let batch = sample_batch(pool, cfg.s1_batch, &mut rng);
        let r = diffusion_train_step(&mut model, &mut opt, &batch, &sched, recycle, &mut rng)?;
        log.losses.push((step, r.loss));
        let done = step + 1;
        if done % cfg.s1_val_every.max(1) == 0 || done == cfg.s1_steps {
            log.validation.push((done, validation_velocity_mse(&model, &data.val, &sched, recycle, 4, val_seed)?));
        }
    }
    Ok((model, log))
}

#[derive(Clone, Debug, Default)]
pub struct DistillLog {
    pub losses: Vec<(usize, f32)>,
    pub gap: Option<DistillationGap>,
}

/// Stage 2: consistency distillation of a stage-1 teacher.
pub fn distill(cfg: &RunConfig, teacher: &Backbone, data: &LatentData, recycle: RecycleMode) -> Result<(Backbone, DistillLog)> {
    let mut student = teacher.clone();
    let grid = build_step_grid(cfg.s2_grid, cfg.s1_shift)?;
    let mut opt = Optimizer::new(OptimizerConfig::adamw(cfg.s2_lr, 0.0), 0)?;
    let mut rng = stage_rng(cfg.seed, 2);
    let mut log = DistillLog::default();
    for step in 0..cfg.s2_steps {
        opt.set_learning_rate(cosine_lr(cfg.s2_lr, step, cfg.s2_steps));
        let batch = sample_batch(&data.train, cfg.s2_batch, &mut rng);
        let r = cd_train_step(&mut student, teacher, &mut opt, &batch, &grid, recycle, &mut rng)?;
        log.losses.push((step, r.loss));
    }
    log.gap = Some(distillation_gap(&student, teacher, &data.val, &grid, recycle, splitmix(cfg.seed ^ 0x9a9))?);
    Ok((student, log))
}

pub fn adversarial_config(cfg: &RunConfig, recycle: RecycleMode) -> AdversarialConfig {
    AdversarialConfig {
        sigma_perturb: cfg.s3_sigma,
        lambda_reg: cfg.s3_lambda,
        segment_len_frames: cfg.s3_segment,
        overlap_frames: cfg.s3_overlap,
        extensions: cfg.s3_extensions,
        detach_recycled: cfg.s3_detach_recycled,
        recycle,
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdvLog {
    pub records: Vec<AdvRecord>,
}

impl AdvLog {
    pub fn all_finite(&self) -> bool {
        self.records.iter().all(|r| r.is_finite())
    }

    /// `step,g_loss,d_loss,ar1,ar2` lines.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,g_loss,d_loss,ar1,ar2\n");
        for (k, r) in self.records.iter().enumerate() {
            s.push_str(&format!("{k},{},{},{},{}\n", r.g_loss, r.d_loss, r.ar1, r.ar2));
        }
        s
    }
}

/// Per-latent-frame control rows for `count` frames of a fresh trajectory.
fn fresh_controls(cfg: &RunConfig, stats: &ScaleStats, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
    let tf = cfg.codec()?.temporal_factor;
    let profile = MotionProfile::named(&cfg.profile)?;
    for _ in 0..64 {
        let start = WorldState::from_seed(rng.random());
        let traj = sample_trajectory(rng, start, count * tf, &profile);
        match encode_camera(&traj.controls, stats, tf, cfg.outlier_threshold) {
            Ok(rows) => {
                let d = rows.shape()[1];
                return Ok((1..=count).map(|k| Tensor::new(vec![1, d], rows.data()[k * d..(k + 1) * d].to_vec()).unwrap()).collect());
            }
            Err(AaptError::Rejected(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(AaptError::Contract("could not sample an in-bounds trajectory".into()))
}

/// Stage 3: adversarial post-training of `gen_init` against a
/// discriminator initialized from `disc_init`.
pub fn advtrain(cfg: &RunConfig, gen_init: &Backbone, disc_init: &Backbone, data: &LatentData, stats: &ScaleStats, recycle: RecycleMode) -> Result<(Backbone, Backbone, AdvLog)> {
    let mut gen = gen_init.clone();
    let mut disc = Backbone::discriminator_from(disc_init, splitmix(cfg.seed ^ 0xd15c))?;
    let acfg = adversarial_config(cfg, recycle);
    acfg.validate()?;
    let (mut g_opt, mut d_opt) = adversarial_optimizers(cfg.s3_lr_g, cfg.s3_lr_d)?;
    g_opt.cfg.alpha = cfg.s3_alpha;
    d_opt.cfg.alpha = cfg.s3_alpha;
    let mut rng = stage_rng(cfg.seed, 3);
    let mut log = AdvLog::default();
    for _ in 0..cfg.s3_rounds {
        let rec = match cfg.s3_mode {
            AdvMode::Student => {
                let batch = sample_batch(&data.train, cfg.s3_batch, &mut rng);
                adversarial_round(&mut gen, &mut disc, &mut g_opt, &mut d_opt, &batch, &acfg, &mut rng)?
            }
            AdvMode::Teacher => {
                let batch = sample_batch(&data.train, cfg.s3_batch, &mut rng);
                teacher_forcing_round(&mut gen, &mut disc, &mut g_opt, &mut d_opt, &batch, &acfg, &mut rng)?
            }
            AdvMode::Long => {
                let first = sample_batch(&data.train, 1, &mut rng)[0];
                let total = acfg.long_video_frames();
                let own = (first.len() - 1).min(total);
                let mut controls: Vec<Tensor> = (1..=own).map(|k| first.control_row(k)).collect();
                controls.extend(fresh_controls(cfg, stats, total - own, &mut rng)?);
                let reals = sample_batch(&data.train, acfg.extensions + 1, &mut rng);
                long_video_round(&mut gen, &mut disc, &mut g_opt, &mut d_opt, first, &controls, &reals, &acfg, &mut rng)?.losses
            }
        };
        log.records.push(rec);
    }
    Ok((gen, disc, log))
}

/// A ground-truth episode for evaluation.
#[derive(Clone, Debug)]
pub struct EvalEpisode {
    pub seed: u64,
    pub trajectory: Trajectory,
    pub truth: Video,
    /// Control rows for generated frames `1..=horizon`.
    pub controls: Vec<Tensor>,
}

/// `clips` in-bounds episodes of `horizon` generated latent frames.
pub fn eval_episodes(cfg: &RunConfig, stats: &ScaleStats, horizon: usize) -> Result<Vec<EvalEpisode>> {
    let tf = cfg.codec()?.temporal_factor;
    let profile = MotionProfile::named(&cfg.profile)?;
    let frames = 1 + horizon * tf;
    let mut out = Vec::new();
    let mut seed = cfg.eval_seed + 1000 * cfg.seed;
    while out.len() < cfg.eval_clips {
        let clip = generate_clip(seed, frames, &profile, cfg.height, cfg.width, false)?;
        seed += 1;
        let rows = match encode_camera(&clip.trajectory.controls, stats, tf, cfg.outlier_threshold) {
            Ok(r) => r,
            Err(AaptError::Rejected(_)) => continue,
            Err(e) => return Err(e),
        };
        let d = rows.shape()[1];
        let controls = (1..=horizon).map(|k| Tensor::new(vec![1, d], rows.data()[k * d..(k + 1) * d].to_vec()).unwrap()).collect();
        let truth = render_world(clip.seed, &clip.trajectory, frames, cfg.height, cfg.width)?;
        out.push(EvalEpisode { seed: clip.seed, trajectory: clip.trajectory, truth, controls });
    }
    Ok(out)
}

/// An episode of `pixel_frames` frames (rounded up to whole latent frames)
/// from world seed `seed`, controls sampled from the config's motion
/// profile and never rejected.
pub fn control_episode(cfg: &RunConfig, stats: &ScaleStats, seed: u64, pixel_frames: usize) -> Result<EvalEpisode> {
    let tf = cfg.codec()?.temporal_factor;
    if pixel_frames < 2 {
        return Err(AaptError::Config("an episode needs at least 2 frames".into()));
    }
    let horizon = (pixel_frames - 1).div_ceil(tf);
    let total = 1 + horizon * tf;
    let profile = MotionProfile::named(&cfg.profile)?;
    let mut rng = stage_rng(seed, 77);
    let trajectory = sample_trajectory(&mut rng, WorldState::from_seed(seed), total - 1, &profile);
    let rows = encode_camera(&trajectory.controls, stats, tf, f32::INFINITY)?;
    let d = rows.shape()[1];
    let controls = (1..=horizon).map(|k| Tensor::new(vec![1, d], rows.data()[k * d..(k + 1) * d].to_vec())).collect::<Result<Vec<_>>>()?;
    let truth = render_world(seed, &trajectory, total, cfg.height, cfg.width)?;
    Ok(EvalEpisode { seed, trajectory, truth, controls })
}

/// Latent frames `[tokens, C]` to a pixel video.
pub fn decode_tokens(codec: &Codec, frames: &[Tensor]) -> Result<Video> {
    let (h, w) = codec.cfg.latent_hw();
    let grids: Vec<Tensor> = frames.iter().map(|f| tokens_to_grid(f, h, w)).collect();
    codec.decode(&Tensor::stack(&grids)?)
}

/// One streamed generation: the decoded video, per-step latency in
/// milliseconds, and the generator NFE.
pub struct Generated {
    pub video: Video,
    pub latents: Vec<Tensor>,
    pub step_ms: Vec<f64>,
    pub nfe: usize,
}

pub fn generate_episode(model: &Arc<Backbone>, codec: &Codec, ep: &EvalEpisode, seed: u64, zero_recycle: bool) -> Result<Generated> {
    let first = ep.truth.slice(0, 1);
    let prompt = ep.trajectory.initial.prompt_id();
    let mut s = GenSession::open_image(model.clone(), codec, &first, prompt, seed)?;
    s.zero_recycle = zero_recycle;
    let z0 = grid_to_tokens(&codec.encode(&first)?.index0(0));
    let mut latents = vec![z0];
    let mut step_ms = Vec::with_capacity(ep.controls.len());
    for c in &ep.controls {
        let t0 = Instant::now();
        latents.push(s.generate_next(c)?);
        step_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(Generated { video: decode_tokens(codec, &latents)?, latents, step_ms, nfe: s.nfe_counter() })
}

/// Streams every episode and aggregates the metrics. Drift curves are
/// averaged over episodes per pixel frame.
pub fn evaluate(label: &str, model: &Arc<Backbone>, codec: &Codec, episodes: &[EvalEpisode], seed: u64, zero_recycle: bool) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(AaptError::Contract("no evaluation episodes".into()));
    }
    let reference = corpus_mean(episodes.iter().map(|e| &e.truth));
    let mut drift = DriftCurve::default();
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    let (mut trans, mut rot, mut cmd, mut motion) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
    let mut step_ms = Vec::new();
    let (mut nfe, mut frames) = (0, 0);
    for (i, ep) in episodes.iter().enumerate() {
        let gen = generate_episode(model, codec, ep, seed.wrapping_add(i as u64), zero_recycle)?;
        let c = drift_metric(&gen.video, &ep.truth, reference)?;
        if drift.is_empty() {
            drift = c;
        } else {
            drift.mse.iter_mut().zip(&c.mse).for_each(|(a, b)| *a += b);
            drift.mean_dev.iter_mut().zip(&c.mean_dev).for_each(|(a, b)| *a += b);
        }
        fa.extend(frame_features(&gen.video));
        fb.extend(frame_features(&ep.truth));
        let ce = control_error(&gen.video, &ep.trajectory.controls)?;
        trans += ce.trans;
        rot += ce.rot;
        cmd += ce.commanded_trans;
        motion += motion_magnitude(&gen.video)?;
        nfe += gen.nfe;
        frames += gen.latents.len() - 1;
        step_ms.extend(gen.step_ms);
    }
    let n = episodes.len() as f32;
    drift.mse.iter_mut().for_each(|v| *v /= n);
    drift.mean_dev.iter_mut().for_each(|v| *v /= n);
    step_ms.sort_by(|a, b| a.total_cmp(b));
    let p99 = step_ms[((step_ms.len() as f64 * 0.99).ceil() as usize).clamp(1, step_ms.len()) - 1];
    let report = EvalReport {
        label: label.to_string(),
        drift,
        frechet: gaussian_frechet(&fa, &fb)?,
        control_err: crate::eval::ControlError { trans: trans / n, rot: rot / n, commanded_trans: cmd / n },
        motion_mag: motion / n,
        nfe,
        frames,
        step_ms_mean: step_ms.iter().sum::<f64>() / step_ms.len() as f64,
        step_ms_p99: p99,
    };
    if !report.is_finite() {
        return Err(AaptError::NonFinite(format!("evaluation report {label}")));
    }
    Ok(report)
}

/// Codec, data and the two pretraining stages of one pipeline run.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub corpus: Corpus,
    pub codec: Codec,
    pub codec_log: CodecTrainLog,
    pub data: LatentData,
    pub stage1: Backbone,
    pub adapt_log: AdaptLog,
    pub stage2: Backbone,
    pub distill_log: DistillLog,
    pub recycle: RecycleMode,
}

pub fn pretrain(cfg: &RunConfig, recycle: RecycleMode) -> Result<Pretrained> {
    let corpus = build_corpus(cfg)?;
    let (codec, codec_log) = codec_stage(cfg, &corpus)?;
    pretrain_from(cfg, corpus, codec, codec_log, recycle)
}

/// Pretraining with an existing codec.
pub fn pretrain_from(cfg: &RunConfig, corpus: Corpus, codec: Codec, codec_log: CodecTrainLog, recycle: RecycleMode) -> Result<Pretrained> {
    let data = encode_corpus(&codec, &corpus, cfg)?;
    let (stage1, adapt_log) = adapt(cfg, &data, recycle)?;
    let (stage2, distill_log) = distill(cfg, &stage1, &data, recycle)?;
    Ok(Pretrained { corpus, codec, codec_log, data, stage1, adapt_log, stage2, distill_log, recycle })
}

impl Pretrained {
    /// Stage-3 training with `mode`, everything else from `cfg`.
    pub fn advtrain(&self, cfg: &RunConfig, mode: AdvMode) -> Result<(Backbone, AdvLog)> {
        let mut c = cfg.clone();
        c.s3_mode = mode;
        let (gen, _, log) = advtrain(&c, &self.stage2, &self.stage1, &self.data, &self.corpus.stats, self.recycle)?;
        Ok((gen, log))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    NoRecycle,
    TeacherForcing,
    ShortTraining,
}

impl AblationKind {
    pub fn name(&self) -> &'static str {
        match self {
            AblationKind::NoRecycle => "no_recycle",
            AblationKind::TeacherForcing => "teacher_forcing",
            AblationKind::ShortTraining => "short_training",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AblationKind::NoRecycle, AblationKind::TeacherForcing, AblationKind::ShortTraining].into_iter().find(|k| k.name() == s)
    }
}

/// Paired evaluation of a baseline and an ablated model.
#[derive(Clone, Debug)]
pub struct AblationResult {
    pub kind: AblationKind,
    pub horizon: usize,
    pub metric: &'static str,
    pub baseline: EvalReport,
    pub variant: EvalReport,
    pub baseline_value: f32,
    pub variant_value: f32,
    /// Whether the expected direction holds.
    pub holds: bool,
}

impl AblationResult {
    pub fn table(&self) -> String {
        format!(
            "ablation={} horizon={} metric={}\n{:<12} {:>12}\n{:<12} {:>12.6}\n{:<12} {:>12.6}\nexpected_direction_holds={}\n",
            self.kind.name(),
            self.horizon,
            self.metric,
            "model",
            self.metric,
            self.baseline.label,
            self.baseline_value,
            self.variant.label,
            self.variant_value,
            self.holds
        )
    }
}

/// Shared inputs for the three ablations of one seed: the pretrained
/// pipeline and its student-forcing stage-3 generator.
pub struct AblationContext {
    pub cfg: RunConfig,
    pub base: Pretrained,
    pub student: Arc<Backbone>,
    pub student_log: AdvLog,
}

impl AblationContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let base = pretrain(cfg, cfg.s1_recycle)?;
        let (student, student_log) = base.advtrain(cfg, AdvMode::Student)?;
        Ok(AblationContext { cfg: cfg.clone(), base, student: Arc::new(student), student_log })
    }

    /// Generated frames per training clip.
    pub fn training_horizon(&self) -> usize {
        self.base.data.train[0].len() - 1
    }
}

/// Drift over the frames of the last latent frame.
fn final_drift(r: &EvalReport, tf: usize) -> f32 {
    r.drift.tail_mean(tf)
}

pub fn run_ablation(kind: AblationKind, ctx: &AblationContext) -> Result<AblationResult> {
    let cfg = &ctx.cfg;
    let tf = cfg.codec()?.temporal_factor;
    let codec = &ctx.base.codec;
    let stats = &ctx.base.corpus.stats;
    let eval_seed = splitmix(cfg.seed ^ 0xe7a1);
    let th = ctx.training_horizon();
    match kind {
        AblationKind::TeacherForcing => {
            let horizon = 2 * th;
            let eps = eval_episodes(cfg, stats, horizon)?;
            let (teacher, _) = ctx.base.advtrain(cfg, AdvMode::Teacher)?;
            let b = evaluate("student_forcing", &ctx.student, codec, &eps, eval_seed, false)?;
            let v = evaluate("teacher_forcing", &Arc::new(teacher), codec, &eps, eval_seed, false)?;
            let (bv, vv) = (final_drift(&b, tf), final_drift(&v, tf));
            Ok(AblationResult { kind, horizon, metric: "final_drift_mse", baseline: b, variant: v, baseline_value: bv, variant_value: vv, holds: bv < vv })
        }
        AblationKind::ShortTraining => {
            let horizon = 4 * th;
            let eps = eval_episodes(cfg, stats, horizon)?;
            let (long, _) = ctx.base.advtrain(cfg, AdvMode::Long)?;
            let b = evaluate("long_trained", &Arc::new(long), codec, &eps, eval_seed, false)?;
            let v = evaluate("short_trained", &ctx.student, codec, &eps, eval_seed, false)?;
            let (bv, vv) = (final_drift(&b, tf), final_drift(&v, tf));
            Ok(AblationResult { kind, horizon, metric: "final_drift_mse", baseline: b, variant: v, baseline_value: bv, variant_value: vv, holds: bv < vv })
        }
        AblationKind::NoRecycle => {
            let horizon = cfg.eval_horizon;
            let eps = eval_episodes(cfg, stats, horizon)?;
            let zero = pretrain_from(cfg, ctx.base.corpus.clone(), codec.clone(), ctx.base.codec_log.clone(), RecycleMode::ZeroAfterFirst)?;
            let (ablated, _) = zero.advtrain(cfg, AdvMode::Student)?;
            let b = evaluate("recycle", &ctx.student, codec, &eps, eval_seed, false)?;
            let v = evaluate("no_recycle", &Arc::new(ablated), codec, &eps, eval_seed, true)?;
            let (bv, vv) = (b.motion_mag, v.motion_mag);
            Ok(AblationResult { kind, horizon, metric: "motion_mag", baseline: b, variant: v, baseline_value: bv, variant_value: vv, holds: vv < bv })
        }
    }
}

/// Stores the scale statistics as a `[4]` tensor.
pub fn stats_params(stats: &ScaleStats) -> crate::params::ParamSet {
    let mut ps = crate::params::ParamSet::new();
    ps.push("std", Tensor::new(vec![CONTROL_CHANNELS], stats.std.to_vec()).unwrap());
    ps
}

pub fn stats_from_params(ps: &crate::params::ParamSet) -> Result<ScaleStats> {
    let i = ps.index_of("std").ok_or_else(|| AaptError::Format("missing scale statistics".into()))?;
    let d = ps.get(i).data();
    if d.len() != CONTROL_CHANNELS {
        return Err(AaptError::Format("scale statistics have the wrong length".into()));
    }
    Ok(ScaleStats { std: std::array::from_fn(|k| d[k]) })
}

/// Everything a later stage or a generation run needs from a checkpoint.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub stage: Stage,
    pub config: RunConfig,
    pub codec: Codec,
    pub stats: ScaleStats,
    pub gen: Option<Backbone>,
    /// Stage-1 weights carried forward as the discriminator initialization.
    pub stage1: Option<Backbone>,
    pub disc: Option<Backbone>,
}

pub fn checkpoint_for(stage: Stage, cfg: &RunConfig, codec: &Codec, stats: &ScaleStats, gen: Option<&Backbone>, stage1: Option<&Backbone>, disc: Option<&Backbone>) -> Checkpoint {
    let mut c = Checkpoint::new(stage, cfg);
    c.insert_group("codec", &codec.params);
    c.insert_group("stats", &stats_params(stats));
    if let Some(g) = gen {
        c.insert_group("gen", &g.params);
    }
    if let Some(s) = stage1 {
        c.insert_group("stage1", &s.params);
    }
    if let Some(d) = disc {
        c.insert_group("disc", &d.params);
    }
    c
}

pub fn load_checkpoint(ck: &Checkpoint) -> Result<Loaded> {
    let config = ck.run_config()?;
    let codec = Codec::from_params(config.codec()?, &ck.group("codec")?)?;
    let stats = stats_from_params(&ck.group("stats")?)?;
    let bcfg = config.backbone()?;
    let load = |g: &str| -> Result<Option<Backbone>> {
        if ck.has_group(g) {
            Ok(Some(Backbone::from_params(bcfg.clone(), &ck.group(g)?)?))
        } else {
            Ok(None)
        }
    };
    Ok(Loaded { stage: ck.stage, gen: load("gen")?, stage1: load("stage1")?, disc: load("disc")?, config, codec, stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> RunConfig {
        let mut c = RunConfig::tiny();
        c.height = 8;
        c.width = 8;
        c.clip_frames = 9;
        c.s1_short_frames = 5;
        c.train_clips = 4;
        c.val_clips = 2;
        c.codec_steps = 3;
        c.codec_channels = vec![4, 4, 4];
        c.codec_latent_channels = 4;
        c.model_dim = 16;
        c.model_layers = 1;
        c.model_time_embed_dim = 8;
        c.s1_steps = 4;
        c.s1_val_every = 2;
        c.s2_steps = 2;
        c.s2_grid = 4;
        c.s3_rounds = 2;
        c.s3_segment = 2;
        c.s3_extensions = 1;
        c.eval_clips = 2;
        c.eval_horizon = 3;
        c
    }

    #[test]
    fn micro_pipeline_runs_and_round_trips_through_a_checkpoint() {
        let cfg = micro();
        let p = pretrain(&cfg, RecycleMode::Full).unwrap();
        assert_eq!(p.adapt_log.validation.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 2, 4]);
        assert!(p.distill_log.gap.is_some());
        for mode in [AdvMode::Student, AdvMode::Teacher, AdvMode::Long] {
            let (_, log) = p.advtrain(&cfg, mode).unwrap();
            assert_eq!(log.records.len(), 2);
            assert!(log.all_finite());
        }
        let ck = checkpoint_for(Stage::Stage2, &cfg, &p.codec, &p.corpus.stats, Some(&p.stage2), Some(&p.stage1), None);
        let back = load_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.gen.unwrap().params, p.stage2.params);
        assert_eq!(back.codec.params, p.codec.params);
        assert_eq!(back.stats, p.corpus.stats);
        assert!(back.disc.is_none());
        let eps = eval_episodes(&cfg, &p.corpus.stats, 3).unwrap();
        let m = Arc::new(p.stage2.clone());
        let r = evaluate("x", &m, &p.codec, &eps, 1, false).unwrap();
        assert_eq!(r.nfe, 6);
        assert_eq!(r.frames, 6);
        assert_eq!(r.drift.len(), 13);
        assert_eq!(r, evaluate("x", &m, &p.codec, &eps, 1, false).map(|mut q| {
            q.step_ms_mean = r.step_ms_mean;
            q.step_ms_p99 = r.step_ms_p99;
            q
        }).unwrap());
    }
}
