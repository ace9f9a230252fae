//! Stage 1: teacher-forced flow-matching adaptation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{teacher_inputs, RecycleMode};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Bound};
use crate::data::LatentClip;
use crate::error::{AaptError, Result};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimestepSchedule {
    pub s: f32,
}

impl Default for TimestepSchedule {
    fn default() -> Self {
        TimestepSchedule { s: 24.0 }
    }
}

impl TimestepSchedule {
    /// Draws `t ~ U(0, 1)` and shifts it.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        shift_timestep(rng.random::<f32>(), self.s).expect("uniform draw is in range")
    }
}

/// `(s * t) / (1 + (s - 1) * t)`.
pub fn shift_timestep(t: f32, s: f32) -> Result<f32> {
    if !(0.0..=1.0).contains(&t) {
        return Err(AaptError::Contract(format!("timestep {t} outside [0,1]")));
    }
    if !(s >= 1.0) {
        return Err(AaptError::Contract(format!("shift factor {s} below 1")));
    }
    Ok((s * t) / (1.0 + (s - 1.0) * t))
}

/// `(1 - t) * x0 + t * eps`.
pub fn make_noisy(x0: &Tensor, eps: &Tensor, t: f32) -> Result<Tensor> {
    x0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

/// `eps - x0`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    eps.zip_map(x0, |e, a| e - a)
}

/// `x_t - t * v`, the clean-sample estimate implied by a velocity.
pub fn x0_from_velocity<'g>(x_t: Var<'g>, v: Var<'g>, t: f32) -> Var<'g> {
    x_t.sub(v.scale(t))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample {
    pub x0: Tensor,
    pub eps: Tensor,
    pub t_shifted: f32,
    pub x_t: Tensor,
}

impl NoisySample {
    pub fn new(x0: Tensor, eps: Tensor, t_shifted: f32) -> Result<Self> {
        let x_t = make_noisy(&x0, &eps, t_shifted)?;
        Ok(NoisySample { x0, eps, t_shifted, x_t })
    }
}

/// Gaussian noise for every generated position of a clip.
pub fn clip_noise<R: Rng + ?Sized>(clip: &LatentClip, rng: &mut R) -> Vec<Tensor> {
    clip.frames[1..].iter().map(|f| Tensor::from_fn(f.shape(), |_| rng.sample::<f32, _>(StandardNormal))).collect()
}

/// Velocity MSE of one clip at timestep `t` (already shifted) and noise `eps`.
pub fn diffusion_loss<'g>(b: &Bound<'g>, clip: &LatentClip, t: f32, eps: &[Tensor], recycle: RecycleMode) -> Result<Var<'g>> {
    if clip.len() < 2 {
        return Err(AaptError::Contract("diffusion step needs at least two latent frames".into()));
    }
    let g = b.graph();
    let tpf = b.cfg().tokens_per_frame();
    let mut noisy = Vec::with_capacity(clip.len() - 1);
    let mut targets = Vec::with_capacity(clip.len() - 1);
    for (k, e) in eps.iter().enumerate() {
        let x0 = &clip.frames[k + 1];
        noisy.push(g.constant(&make_noisy(x0, e, t)?));
        targets.push(g.constant(&velocity_target(x0, e)?));
    }
    let inputs = teacher_inputs(g, clip, &noisy, t, recycle);
    let out = b.forward_parallel(&inputs, clip.prompt_id)?.out;
    let pred = out.slice_rows(tpf, clip.len() * tpf);
    Ok(pred.mse(Var::concat_rows(&targets)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionRecord {
    pub loss: f32,
    /// The shifted timestep used by each clip of the batch.
    pub timesteps: Vec<f32>,
}

/// One optimizer step on the mean loss over `batch`; each clip draws one
/// timestep for all its frames.
pub fn diffusion_train_step(
    model: &mut Backbone,
    opt: &mut Optimizer,
    batch: &[&LatentClip],
    sched: &TimestepSchedule,
    recycle: RecycleMode,
    rng: &mut ChaCha8Rng,
) -> Result<DiffusionRecord> {
    if batch.is_empty() {
        return Err(AaptError::Contract("empty batch".into()));
    }
    let g = Graph::new();
    let b = model.bind(&g, 0);
    let mut total: Option<Var<'_>> = None;
    let mut timesteps = Vec::with_capacity(batch.len());
    for clip in batch {
        let t = sched.sample(rng);
        let eps = clip_noise(clip, rng);
        let l = diffusion_loss(&b, clip, t, &eps, recycle)?;
        timesteps.push(t);
        total = Some(total.map_or(l, |a| a.add(l)));
    }
    let loss = total.unwrap().scale(1.0 / batch.len() as f32);
    let lv = loss.item();
    if !lv.is_finite() {
        return Err(AaptError::NonFinite("diffusion loss".into()));
    }
    let grads = g.backward(loss)?;
    opt.step(&mut model.params, &grads)?;
    Ok(DiffusionRecord { loss: lv, timesteps })
}

/// Velocity MSE over `clips` with noise and timesteps fixed by `seed`,
/// `draws` per clip.
pub fn validation_velocity_mse(model: &Backbone, clips: &[LatentClip], sched: &TimestepSchedule, recycle: RecycleMode, draws: usize, seed: u64) -> Result<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for clip in clips {
        for _ in 0..draws {
            let t = sched.sample(&mut rng);
            let eps = clip_noise(clip, &mut rng);
            let g = Graph::no_grad();
            let b = model.bind_const(&g);
            sum += diffusion_loss(&b, clip, t, &eps, recycle)?.item() as f64;
            n += 1;
        }
    }
    Ok((sum / n.max(1) as f64) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::optim::OptimizerConfig;
    use crate::testutil::{tiny_backbone, toy_clip};

    #[test]
    fn shift_values() {
        assert_eq!(shift_timestep(0.0, 24.0).unwrap(), 0.0);
        assert_eq!(shift_timestep(1.0, 24.0).unwrap(), 1.0);
        assert!((shift_timestep(0.5, 24.0).unwrap() - 0.96).abs() < 1e-6);
        assert_eq!(shift_timestep(0.3, 1.0).unwrap(), 0.3);
        assert!(shift_timestep(1.5, 24.0).is_err());
    }

    #[test]
    fn interpolation_and_velocity() {
        let x0 = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let eps = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        assert_eq!(make_noisy(&x0, &eps, 0.0).unwrap(), x0);
        assert_eq!(make_noisy(&x0, &eps, 1.0).unwrap(), eps);
        assert_eq!(velocity_target(&x0, &eps).unwrap().data(), &[-1.0, -1.0]);
        let g = Graph::no_grad();
        let s = NoisySample::new(x0.clone(), eps.clone(), 0.3).unwrap();
        let v = velocity_target(&x0, &eps).unwrap();
        let back = x0_from_velocity(g.constant(&s.x_t), g.constant(&v), 0.3).value();
        assert!(back.max_abs_diff(&x0) < 1e-6);
    }

    fn cfg() -> BackboneConfig {
        tiny_backbone()
    }

    #[test]
    fn short_clip_rejected() {
        let c = cfg();
        let m = Backbone::new(c.clone(), 0).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-3, 0.0), 0).unwrap();
        let clip = toy_clip(&c, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m2 = m.clone();
        assert!(diffusion_train_step(&mut m2, &mut opt, &[&clip], &TimestepSchedule::default(), RecycleMode::Full, &mut rng).is_err());
    }

    #[test]
    fn one_timestep_per_clip_and_finite_loss() {
        let c = cfg();
        let mut m = Backbone::new(c.clone(), 0).unwrap();
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-3, 0.0), 0).unwrap();
        let clips: Vec<_> = (0..3).map(|s| toy_clip(&c, 4, s)).collect();
        let refs: Vec<_> = clips.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = diffusion_train_step(&mut m, &mut opt, &refs, &TimestepSchedule::default(), RecycleMode::Full, &mut rng).unwrap();
        assert_eq!(r.timesteps.len(), 3);
        assert!(r.loss.is_finite() && r.loss > 0.0);
    }

    #[test]
    fn targets_are_shifted_by_one_frame() {
        // A labelled clip whose frames are constant planes k: the velocity
        // target in row block k-1 of the prediction must be eps - k.
        let c = cfg();
        let tpf = c.tokens_per_frame();
        let clip = LatentClip {
            seed: 0,
            prompt_id: 0,
            frames: (0..4).map(|k| Tensor::full(&[tpf, 3], k as f32)).collect(),
            controls: Tensor::zeros(&[4, 4]),
        };
        let eps: Vec<Tensor> = (0..3).map(|_| Tensor::zeros(&[tpf, 3])).collect();
        for k in 1..4 {
            let v = velocity_target(&clip.frames[k], &eps[k - 1]).unwrap();
            assert!(v.data().iter().all(|&x| x == -(k as f32)));
        }
        let g = Graph::no_grad();
        let noisy: Vec<Var<'_>> = eps.iter().map(|e| g.constant(e)).collect();
        let inputs = teacher_inputs(&g, &clip, &noisy, 0.5, RecycleMode::Full);
        for (k, fi) in inputs.iter().enumerate().skip(1) {
            assert!(fi.recycled.value().data().iter().all(|&x| x == (k - 1) as f32));
        }
        let ablated = teacher_inputs(&g, &clip, &noisy, 0.5, RecycleMode::ZeroAfterFirst);
        assert!(ablated[2].recycled.value().data().iter().all(|&x| x == 0.0));
        assert!(inputs[2].recycled.value().data().iter().all(|&x| x == 1.0));
        assert!(ablated[3].recycled.value().data().iter().all(|&x| x == 0.0));
        assert!(inputs[0].noisy.value().data().iter().all(|&x| x == 0.0));
    }
}
