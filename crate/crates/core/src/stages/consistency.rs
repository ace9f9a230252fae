//! Stage 2: consistency distillation into a one-step generator.
//!
//! Teacher forcing is kept; there is no classifier-free guidance and no EMA
//! target network (the target is the student itself under stop-gradient).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::diffusion::{clip_noise, make_noisy, shift_timestep, x0_from_velocity};
use super::{teacher_inputs, RecycleMode};
use crate::autograd::{Graph, Var};
use crate::backbone::{Backbone, Bound};
use crate::data::LatentClip;
use crate::error::{AaptError, Result};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

/// The distillation path never evaluates an unconditional branch.
pub const USES_CFG: bool = false;

#[derive(Clone, Debug, PartialEq)]
pub struct StepGrid {
    pub timesteps: Vec<f32>,
}

impl StepGrid {
    pub fn k(&self) -> usize {
        self.timesteps.len()
    }
}

/// `K` points `shift(i / (K - 1), s)`, ascending from 0 to 1.
pub fn build_step_grid(k: usize, s: f32) -> Result<StepGrid> {
    if k < 2 {
        return Err(AaptError::Contract("step grid needs at least two points".into()));
    }
    let timesteps = (0..k).map(|i| shift_timestep(i as f32 / (k - 1) as f32, s)).collect::<Result<Vec<_>>>()?;
    Ok(StepGrid { timesteps })
}

/// Velocity prediction at every generated position of a teacher-forced clip.
fn velocities<'g>(b: &Bound<'g>, clip: &LatentClip, x_t: &[Var<'g>], t: f32, recycle: RecycleMode) -> Result<Var<'g>> {
    let tpf = b.cfg().tokens_per_frame();
    let inputs = teacher_inputs(b.graph(), clip, x_t, t, recycle);
    let out = b.forward_parallel(&inputs, clip.prompt_id)?.out;
    Ok(out.slice_rows(tpf, clip.len() * tpf))
}

fn split_rows<'g>(v: Var<'g>, parts: usize) -> Vec<Var<'g>> {
    let rows = v.shape()[0] / parts;
    (0..parts).map(|k| v.slice_rows(k * rows, (k + 1) * rows)).collect()
}

/// Flow-matching Euler step `x_lo = x_hi - (t_hi - t_lo) * v_teacher`.
pub fn teacher_euler_step(teacher: &Backbone, clip: &LatentClip, x_hi: &[Tensor], t_hi: f32, t_lo: f32, recycle: RecycleMode) -> Result<Vec<Tensor>> {
    if t_hi < t_lo {
        return Err(AaptError::Contract(format!("euler step must go down in time ({t_hi} -> {t_lo})")));
    }
    if t_hi == t_lo {
        return Ok(x_hi.to_vec());
    }
    let g = Graph::no_grad();
    let b = teacher.bind_const(&g);
    let xs: Vec<Var<'_>> = x_hi.iter().map(|x| g.constant(x)).collect();
    let v = velocities(&b, clip, &xs, t_hi, recycle)?;
    let dt = t_hi - t_lo;
    Ok(split_rows(v, x_hi.len()).into_iter().zip(xs).map(|(v, x)| x.sub(v.scale(dt)).value()).collect())
}

/// Consistency loss for grid pair `(n, n + 1)` with noise `eps`.
pub fn cd_loss<'g>(student: &Bound<'g>, teacher: &Backbone, clip: &LatentClip, grid: &StepGrid, n: usize, eps: &[Tensor], recycle: RecycleMode) -> Result<Var<'g>> {
    if n + 1 >= grid.k() {
        return Err(AaptError::Contract(format!("grid index {n} has no successor")));
    }
    let (t_lo, t_hi) = (grid.timesteps[n], grid.timesteps[n + 1]);
    let g = student.graph();
    let x_hi: Vec<Tensor> = clip.frames[1..].iter().zip(eps).map(|(x0, e)| make_noisy(x0, e, t_hi)).collect::<Result<_>>()?;
    let x_lo = teacher_euler_step(teacher, clip, &x_hi, t_hi, t_lo, recycle)?;
    let hi: Vec<Var<'g>> = x_hi.iter().map(|x| g.constant(x)).collect();
    let lo: Vec<Var<'g>> = x_lo.iter().map(|x| g.constant(x)).collect();
    let pred = x0_from_velocity(Var::concat_rows(&hi), velocities(student, clip, &hi, t_hi, recycle)?, t_hi);
    let target = x0_from_velocity(Var::concat_rows(&lo), velocities(student, clip, &lo, t_lo, recycle)?, t_lo).detach();
    Ok(pred.mse(target))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CdRecord {
    pub loss: f32,
    pub grid_index: usize,
}

pub fn cd_train_step(
    student: &mut Backbone,
    teacher: &Backbone,
    opt: &mut Optimizer,
    batch: &[&LatentClip],
    grid: &StepGrid,
    recycle: RecycleMode,
    rng: &mut ChaCha8Rng,
) -> Result<CdRecord> {
    if batch.is_empty() {
        return Err(AaptError::Contract("empty batch".into()));
    }
    if grid.k() < 2 {
        return Err(AaptError::Contract("grid too small".into()));
    }
    let n = rng.random_range(0..grid.k() - 1);
    let g = Graph::new();
    let b = student.bind(&g, 0);
    let mut total: Option<Var<'_>> = None;
    for clip in batch {
        let eps = clip_noise(clip, rng);
        let l = cd_loss(&b, teacher, clip, grid, n, &eps, recycle)?;
        total = Some(total.map_or(l, |a| a.add(l)));
    }
    let loss = total.unwrap().scale(1.0 / batch.len() as f32);
    let lv = loss.item();
    if !lv.is_finite() {
        return Err(AaptError::NonFinite("consistency loss".into()));
    }
    let grads = g.backward(loss)?;
    opt.step(&mut student.params, &grads)?;
    Ok(CdRecord { loss: lv, grid_index: n })
}

/// One forward from pure noise: `x0 = eps - v(eps, 1)` at every position.
pub fn one_step_parallel(model: &Backbone, clip: &LatentClip, eps: &[Tensor], recycle: RecycleMode) -> Result<Vec<Tensor>> {
    let g = Graph::no_grad();
    let b = model.bind_const(&g);
    let xs: Vec<Var<'_>> = eps.iter().map(|e| g.constant(e)).collect();
    let v = velocities(&b, clip, &xs, 1.0, recycle)?;
    Ok(split_rows(x0_from_velocity(Var::concat_rows(&xs), v, 1.0), eps.len()).into_iter().map(|x| x.value()).collect())
}

/// Euler integration down the whole grid.
pub fn multi_step_parallel(model: &Backbone, clip: &LatentClip, eps: &[Tensor], grid: &StepGrid, recycle: RecycleMode) -> Result<Vec<Tensor>> {
    let mut x = eps.to_vec();
    for n in (0..grid.k() - 1).rev() {
        x = teacher_euler_step(model, clip, &x, grid.timesteps[n + 1], grid.timesteps[n], recycle)?;
    }
    Ok(x)
}

/// Distances from the teacher's multi-step sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillationGap {
    pub student_one_step: f32,
    pub teacher_one_step: f32,
}

/// Mean latent MSE to the teacher's grid sample for the student's and the
/// teacher's own one-step samples, with shared noise.
pub fn distillation_gap(student: &Backbone, teacher: &Backbone, clips: &[LatentClip], grid: &StepGrid, recycle: RecycleMode, seed: u64) -> Result<DistillationGap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut s, mut t) = (0.0f64, 0.0f64);
    for clip in clips {
        let eps = clip_noise(clip, &mut rng);
        let reference = multi_step_parallel(teacher, clip, &eps, grid, recycle)?;
        let a = one_step_parallel(student, clip, &eps, recycle)?;
        let b = one_step_parallel(teacher, clip, &eps, recycle)?;
        for k in 0..eps.len() {
            s += a[k].mse(&reference[k]) as f64;
            t += b[k].mse(&reference[k]) as f64;
        }
    }
    let n = clips.iter().map(|c| c.len() - 1).sum::<usize>().max(1) as f64;
    Ok(DistillationGap { student_one_step: (s / n) as f32, teacher_one_step: (t / n) as f32 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use crate::testutil::{tiny_backbone, toy_clip};

    #[test]
    fn grid_values() {
        let g = build_step_grid(32, 24.0).unwrap();
        assert_eq!(g.timesteps[0], 0.0);
        assert_eq!(g.timesteps[31], 1.0);
        let want = 24.0 * (16.0 / 31.0) / (1.0 + 23.0 * (16.0 / 31.0));
        assert!((g.timesteps[16] - want).abs() < 1e-6);
        assert!((g.timesteps[16] - 0.96241).abs() < 1e-4);
        assert!(g.timesteps.windows(2).all(|w| w[0] < w[1]));
        assert!(build_step_grid(1, 24.0).is_err());
    }

    #[test]
    fn euler_identity_and_finite() {
        let cfg = tiny_backbone();
        let m = Backbone::new(cfg.clone(), 1).unwrap();
        let clip = toy_clip(&cfg, 3, 2);
        let x = clip.frames[1..].to_vec();
        assert_eq!(teacher_euler_step(&m, &clip, &x, 0.5, 0.5, RecycleMode::Full).unwrap(), x);
        let y = teacher_euler_step(&m, &clip, &x, 0.5, 0.2, RecycleMode::Full).unwrap();
        assert!(y.iter().all(|t| t.is_finite()));
        assert!(teacher_euler_step(&m, &clip, &x, 0.2, 0.5, RecycleMode::Full).is_err());
    }

    #[test]
    fn cd_step_keeps_target_equal_to_student() {
        let cfg = tiny_backbone();
        let teacher = Backbone::new(cfg.clone(), 1).unwrap();
        let mut student = teacher.clone();
        let grid = build_step_grid(8, 24.0).unwrap();
        let clip = toy_clip(&cfg, 3, 2);
        let mut opt = Optimizer::new(OptimizerConfig::adamw(1e-3, 0.0), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = cd_train_step(&mut student, &teacher, &mut opt, &[&clip], &grid, RecycleMode::Full, &mut rng).unwrap();
        assert!(r.loss.is_finite());
        assert!(!USES_CFG);
        let eps = clip_noise(&clip, &mut rng);
        let g = Graph::new();
        let b = student.bind(&g, 0);
        let loss = cd_loss(&b, &teacher, &clip, &grid, 3, &eps, RecycleMode::Full).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param_ids().count() > 0);
    }

    #[test]
    fn one_step_sample_is_deterministic() {
        let cfg = tiny_backbone();
        let m = Backbone::new(cfg.clone(), 1).unwrap();
        let clip = toy_clip(&cfg, 3, 2);
        let eps = clip_noise(&clip, &mut ChaCha8Rng::seed_from_u64(5));
        let a = one_step_parallel(&m, &clip, &eps, RecycleMode::Full).unwrap();
        let b = one_step_parallel(&m, &clip, &eps, RecycleMode::Full).unwrap();
        assert_eq!(a, b);
    }
}
