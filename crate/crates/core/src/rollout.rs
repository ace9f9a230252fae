//! One-step autoregressive generation against a KV cache. Training
//! rollouts and the streaming engine both go through [`rollout_step`], so
//! the two paths produce the same numbers for the same seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Graph, Var};
use crate::backbone::{Bound, FrameInput, KvCache, KvSnapshot, Provenance};
use crate::error::{AaptError, Result};
use crate::stages::context_input;
use crate::stages::diffusion::x0_from_velocity;
use crate::tensor::Tensor;

/// Gaussian noise for frame `frame_index` of a stream seeded by `seed`.
pub fn step_noise(seed: u64, frame_index: usize, shape: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// What reaches the recycled channel of a generated step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecycledInput {
    /// Previous output, cut from the gradient graph.
    Detached,
    /// Previous output with its gradient path.
    Attached,
    /// Zeros after the first generated frame, which still sees the given
    /// first frame (result-recycling ablation).
    Zeroed,
}

/// A live generation stream in one graph.
#[derive(Clone, Debug)]
pub struct RolloutState<'g> {
    pub cache: KvCache<'g>,
    pub prev: Var<'g>,
    pub next_index: usize,
    pub prompt_id: usize,
}

/// Graph-independent form of a [`RolloutState`]; resuming from it cuts every
/// gradient path into the past.
#[derive(Clone, Debug, PartialEq)]
pub struct Carry {
    pub cache: KvSnapshot,
    pub prev: Tensor,
    pub next_index: usize,
    pub prompt_id: usize,
}

impl<'g> RolloutState<'g> {
    pub fn carry(&self) -> Carry {
        Carry { cache: self.cache.snapshot(), prev: self.prev.value(), next_index: self.next_index, prompt_id: self.prompt_id }
    }
}

impl Carry {
    pub fn resume<'g>(&self, g: &'g Graph) -> RolloutState<'g> {
        RolloutState { cache: self.cache.attach(g), prev: g.constant(&self.prev), next_index: self.next_index, prompt_id: self.prompt_id }
    }
}

/// Caches the prompt and the clean first frame (one forward that is not a
/// generation step).
pub fn rollout_open<'g>(b: &Bound<'g>, first: Var<'g>, prompt_id: usize) -> Result<RolloutState<'g>> {
    let mut cache = b.prompt_cache(prompt_id)?;
    let ctx = context_input(b.graph(), first, b.cfg().control_channels);
    b.forward_step(&mut cache, &ctx, 0, Provenance::Context)?;
    cache.evict();
    Ok(RolloutState { cache, prev: first, next_index: 1, prompt_id })
}

/// Generates the next frame in one forward: `x0 = eps - v(eps, 1)`. The
/// cache is trimmed to the window after insertion.
pub fn rollout_step<'g>(b: &Bound<'g>, st: &mut RolloutState<'g>, control: Var<'g>, eps: &Tensor, recycled: RecycledInput) -> Result<Var<'g>> {
    let g = b.graph();
    let tpf = b.cfg().tokens_per_frame();
    if eps.shape() != [tpf, b.cfg().latent_channels] {
        return Err(AaptError::Shape(format!("noise shape {:?}", eps.shape())));
    }
    let noisy = g.constant(eps);
    let rec = match recycled {
        RecycledInput::Detached => st.prev.detach(),
        RecycledInput::Attached => st.prev,
        RecycledInput::Zeroed if st.next_index <= 1 => st.prev.detach(),
        RecycledInput::Zeroed => g.constant(&Tensor::zeros(eps.shape())),
    };
    let fi = FrameInput { noisy, recycled: rec, control, t: 1.0 };
    let out = b.forward_step(&mut st.cache, &fi, st.next_index, Provenance::Generated)?.out;
    st.cache.evict();
    let x0 = x0_from_velocity(noisy, out, 1.0);
    st.prev = x0;
    st.next_index += 1;
    Ok(x0)
}

/// Generates `controls.len()` frames after `first`; `controls[k]` is the
/// `[1, control_channels]` row of frame `k + 1`.
pub fn student_forcing_rollout<'g>(
    b: &Bound<'g>,
    first: Var<'g>,
    controls: &[Tensor],
    prompt_id: usize,
    noise_seed: u64,
    recycled: RecycledInput,
) -> Result<(Vec<Var<'g>>, RolloutState<'g>)> {
    if controls.is_empty() {
        return Err(AaptError::Contract("rollout needs at least one frame".into()));
    }
    let mut st = rollout_open(b, first, prompt_id)?;
    let frames = rollout_frames(b, &mut st, controls, noise_seed, recycled)?;
    Ok((frames, st))
}

/// Continues `st` for `controls.len()` frames.
pub fn rollout_frames<'g>(b: &Bound<'g>, st: &mut RolloutState<'g>, controls: &[Tensor], noise_seed: u64, recycled: RecycledInput) -> Result<Vec<Var<'g>>> {
    let g = b.graph();
    let shape = [b.cfg().tokens_per_frame(), b.cfg().latent_channels];
    let mut frames = Vec::with_capacity(controls.len());
    for c in controls {
        let eps = step_noise(noise_seed, st.next_index, &shape);
        frames.push(rollout_step(b, st, g.constant(c), &eps, recycled)?);
    }
    Ok(frames)
}
