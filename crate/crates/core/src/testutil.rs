//! Small fixtures shared by unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneConfig;
use crate::data::LatentClip;
use crate::tensor::Tensor;

pub fn tiny_backbone() -> BackboneConfig {
    BackboneConfig {
        model_dim: 16,
        layers: 1,
        heads: 2,
        prompt_tokens: 2,
        latent_h: 2,
        latent_w: 2,
        window_n: 3,
        latent_channels: 3,
        control_channels: 4,
        mlp_ratio: 2,
        time_embed_dim: 8,
        ..BackboneConfig::desk()
    }
}

pub fn toy_clip(cfg: &BackboneConfig, len: usize, seed: u64) -> LatentClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tpf = cfg.tokens_per_frame();
    LatentClip {
        seed,
        prompt_id: (seed % 4) as usize,
        frames: (0..len).map(|_| Tensor::randn(&[tpf, cfg.latent_channels], 1.0, &mut rng)).collect(),
        controls: Tensor::from_fn(&[len, cfg.control_channels], |i| if i < cfg.control_channels { 0.0 } else { 0.5 }),
    }
}
