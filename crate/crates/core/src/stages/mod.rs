//! The three post-training stages and the input plumbing they share.

pub mod adversarial;
pub mod consistency;
pub mod diffusion;

use crate::autograd::{Graph, Var};
use crate::backbone::FrameInput;
use crate::data::LatentClip;
use crate::tensor::Tensor;

/// How the previous frame reaches the recycled channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecycleMode {
    Full,
    /// Ablation: the recycled channel is zeros except at the first
    /// generated position, which still sees the given first frame.
    ZeroAfterFirst,
}

impl RecycleMode {
    pub fn name(&self) -> &'static str {
        match self {
            RecycleMode::Full => "full",
            RecycleMode::ZeroAfterFirst => "zero_after_first",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "full" => Some(RecycleMode::Full),
            "zero_after_first" => Some(RecycleMode::ZeroAfterFirst),
            _ => None,
        }
    }

    /// Whether position `k` (>= 1) receives the real previous frame.
    pub fn keeps(&self, k: usize) -> bool {
        matches!(self, RecycleMode::Full) || k <= 1
    }
}

/// The clean conditioning position 0.
pub fn context_input<'g>(g: &'g Graph, x0: Var<'g>, control_dim: usize) -> FrameInput<'g> {
    FrameInput { noisy: x0, recycled: x0, control: g.constant(&Tensor::zeros(&[1, control_dim])), t: 0.0 }
}

/// Teacher-forced inputs for every position of `clip`: position `k >= 1`
/// gets `noisy[k - 1]`, the ground-truth frame `k - 1` as recycled input and
/// control row `k`.
pub fn teacher_inputs<'g>(g: &'g Graph, clip: &LatentClip, noisy: &[Var<'g>], t: f32, recycle: RecycleMode) -> Vec<FrameInput<'g>> {
    assert_eq!(noisy.len() + 1, clip.len(), "one noisy frame per generated position");
    let cd = clip.controls.shape()[1];
    let frames: Vec<Var<'g>> = clip.frames.iter().map(|f| g.constant(f)).collect();
    let zeros = g.constant(&Tensor::zeros(clip.frames[0].shape()));
    let mut out = vec![context_input(g, frames[0], cd)];
    for k in 1..clip.len() {
        out.push(FrameInput {
            noisy: noisy[k - 1],
            recycled: if recycle.keeps(k) { frames[k - 1] } else { zeros },
            control: g.constant(&clip.control_row(k)),
            t,
        });
    }
    out
}
