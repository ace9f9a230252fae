//! Latent-space training clips assembled from the synthetic world.

use crate::backbone::grid_to_tokens;
use crate::codec::Codec;
use crate::error::{AaptError, Result};
use crate::tensor::Tensor;
use crate::world::{encode_camera, ScaleStats, TrainingClip};

/// One clip in generator space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    pub seed: u64,
    pub prompt_id: usize,
    /// Token-major latent frames, `[tokens, C]` each; frame 0 is the
    /// conditioning frame.
    pub frames: Vec<Tensor>,
    /// `[frames, control_dim]`; row 0 is zeros.
    pub controls: Tensor,
}

impl LatentClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn control_row(&self, k: usize) -> Tensor {
        let d = self.controls.shape()[1];
        Tensor::new(vec![1, d], self.controls.data()[k * d..(k + 1) * d].to_vec()).expect("control row")
    }

    /// Positions `start..end` as a clip of their own (the first becomes the
    /// conditioning frame).
    pub fn window(&self, start: usize, end: usize) -> LatentClip {
        let d = self.controls.shape()[1];
        let mut controls = self.controls.data()[start * d..end * d].to_vec();
        controls[..d].iter_mut().for_each(|v| *v = 0.0);
        LatentClip {
            seed: self.seed,
            prompt_id: self.prompt_id,
            frames: self.frames[start..end].to_vec(),
            controls: Tensor::new(vec![end - start, d], controls).expect("window controls"),
        }
    }
}

/// Encodes a pixel clip and its camera controls. Outliers are rejected.
pub fn latent_clip(codec: &Codec, clip: &TrainingClip, stats: &ScaleStats, outlier_threshold: f32) -> Result<LatentClip> {
    let video = clip.video()?;
    let z = codec.encode(&video)?;
    let controls = encode_camera(&clip.trajectory.controls, stats, codec.cfg.temporal_factor, outlier_threshold)?;
    let n = z.shape()[0];
    if controls.shape()[0] != n {
        return Err(AaptError::Shape(format!("{n} latent frames but {} control rows", controls.shape()[0])));
    }
    Ok(LatentClip {
        seed: clip.seed,
        prompt_id: clip.prompt_id(),
        frames: (0..n).map(|k| grid_to_tokens(&z.index0(k))).collect(),
        controls,
    })
}

/// Encodes a corpus, dropping rejected samples. Returns the kept clips and
/// the number dropped.
pub fn latent_corpus(codec: &Codec, clips: &[TrainingClip], stats: &ScaleStats, outlier_threshold: f32) -> Result<(Vec<LatentClip>, usize)> {
    let mut kept = Vec::with_capacity(clips.len());
    let mut dropped = 0;
    for c in clips {
        match latent_clip(codec, c, stats, outlier_threshold) {
            Ok(l) => kept.push(l),
            Err(AaptError::Rejected(_)) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, dropped))
}
