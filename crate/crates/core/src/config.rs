//! Flat `key = value` run configuration.
//!
//! One line per key, `#` starts a comment. Unknown keys are rejected. A
//! `preset = tiny` line anywhere in the file swaps the base defaults before
//! the other keys are applied; [`KEYS`] documents every key and its default.

use std::fmt;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::codec::CodecConfig;
use crate::error::{AaptError, Result};
use crate::stages::RecycleMode;
use crate::world::{control_dim, MotionProfile, SCENE_CLASSES};

/// Which pipeline stage produced a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Codec,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Codec => "codec",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        match s {
            "codec" => Some(Stage::Codec),
            "stage1" => Some(Stage::Stage1),
            "stage2" => Some(Stage::Stage2),
            "stage3" => Some(Stage::Stage3),
            _ => None,
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            Stage::Codec => 0,
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
        }
    }

    pub fn from_tag(t: u8) -> Option<Stage> {
        [Stage::Codec, Stage::Stage1, Stage::Stage2, Stage::Stage3].get(t as usize).copied()
    }

    /// The checkpoint a stage trains from.
    pub fn predecessor(&self) -> Option<Stage> {
        match self {
            Stage::Codec => None,
            Stage::Stage1 => Some(Stage::Codec),
            Stage::Stage2 => Some(Stage::Stage1),
            Stage::Stage3 => Some(Stage::Stage2),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage-3 training regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvMode {
    /// Student-forcing rollouts over one training clip.
    Student,
    /// Parallel teacher-forced generator (ablation).
    Teacher,
    /// Segmented long rollouts.
    Long,
}

impl AdvMode {
    pub fn name(&self) -> &'static str {
        match self {
            AdvMode::Student => "student",
            AdvMode::Teacher => "teacher",
            AdvMode::Long => "long",
        }
    }
}

trait Value: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl Value for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
from_str_value!(u64, usize, f32, bool, String);

impl Value for Vec<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}"))).collect()
    }
    fn render(&self) -> String {
        self.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

impl Value for Stage {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Stage::parse(s).ok_or_else(|| "expected codec|stage1|stage2|stage3".into())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for RecycleMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        RecycleMode::parse(s).ok_or_else(|| "expected full|zero_after_first".into())
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

impl Value for AdvMode {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        match s {
            "student" => Ok(AdvMode::Student),
            "teacher" => Ok(AdvMode::Teacher),
            "long" => Ok(AdvMode::Long),
            _ => Err("expected student|teacher|long".into()),
        }
    }
    fn render(&self) -> String {
        self.name().into()
    }
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $default:expr, $key:literal, $doc:literal;)*) => {
        /// Every knob of every stage. Defaults are the desk preset.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            pub preset: String,
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { preset: "desk".into(), $($field: $default,)* }
            }
        }

        /// `(key, desk default, description)` for every key except `preset`.
        pub fn keys() -> Vec<(&'static str, String, &'static str)> {
            let d = RunConfig::default();
            vec![$(($key, d.$field.render(), $doc),)*]
        }

        impl RunConfig {
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = <$ty as Value>::parse_value(value)
                            .map_err(|e| AaptError::Config(format!("{key} = {value:?}: {e}")))?;
                    })*
                    _ => return Err(AaptError::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    "preset" => Some(self.preset.clone()),
                    $($key => Some(self.$field.render()),)*
                    _ => None,
                }
            }

            /// The fully resolved config in file syntax.
            pub fn resolved(&self) -> String {
                let mut s = format!("preset = {}\n", self.preset);
                $(s.push_str(&format!("{} = {}\n", $key, self.$field.render()));)*
                s
            }
        }
    };
}

run_config! {
    seed: u64 = 0, "seed", "master seed for data, init and training";
    stage: Stage = Stage::Codec, "stage", "stage this run produces (set by the subcommand)";
    height: usize = 32, "data.height", "frame height in pixels";
    width: usize = 32, "data.width", "frame width in pixels";
    clip_frames: usize = 17, "data.clip_frames", "pixel frames per training clip, 1 + 4k";
    train_clips: usize = 64, "data.train_clips", "training episodes";
    val_clips: usize = 8, "data.val_clips", "validation episodes";
    profile: String = "default".into(), "data.profile", "camera motion profile: static|default|pan";
    outlier_threshold: f32 = 6.0, "data.outlier_threshold", "normalized control magnitude that rejects a sample";
    codec_latent_channels: usize = 8, "codec.latent_channels", "latent channels";
    codec_channels: Vec<usize> = vec![16, 32, 64, 64], "codec.channels", "codec widths from pixel to latent resolution";
    codec_res_blocks: usize = 2, "codec.res_blocks", "residual blocks per scale";
    codec_kl_weight: f32 = 1e-6, "codec.kl_weight", "KL weight of the codec objective";
    codec_steps: usize = 1000, "codec.steps", "codec optimizer steps";
    codec_lr: f32 = 3e-3, "codec.lr", "codec peak learning rate (cosine decay)";
    codec_batch: usize = 4, "codec.batch", "clips per codec step";
    model_dim: usize = 128, "model.dim", "transformer width";
    model_layers: usize = 4, "model.layers", "transformer blocks";
    model_heads: usize = 4, "model.heads", "attention heads";
    model_prompt_tokens: usize = 4, "model.prompt_tokens", "prompt tokens per scene class";
    model_window_n: usize = 8, "model.window_n", "attention window in latent frames";
    model_mlp_ratio: usize = 4, "model.mlp_ratio", "MLP hidden width over model width";
    model_time_embed_dim: usize = 64, "model.time_embed_dim", "sinusoidal timestep features";
    s1_steps: usize = 2000, "stage1.steps", "diffusion adaptation steps";
    s1_lr: f32 = 1e-3, "stage1.lr", "AdamW learning rate";
    s1_batch: usize = 4, "stage1.batch", "clips per step";
    s1_shift: f32 = 24.0, "stage1.shift", "timestep shift factor";
    s1_recycle: RecycleMode = RecycleMode::Full, "stage1.recycle", "recycled input: full|zero_after_first";
    s1_short_frames: usize = 9, "stage1.short_frames", "pixel frames per clip in the short curriculum phase";
    s1_short_fraction: f32 = 0.5, "stage1.short_fraction", "fraction of steps in the short phase";
    s1_val_every: usize = 100, "stage1.val_every", "validation interval in steps";
    s2_steps: usize = 1000, "stage2.steps", "consistency distillation steps";
    s2_lr: f32 = 3e-4, "stage2.lr", "AdamW learning rate";
    s2_batch: usize = 4, "stage2.batch", "clips per step";
    s2_grid: usize = 32, "stage2.grid", "fixed distillation timesteps";
    s3_rounds: usize = 200, "stage3.rounds", "adversarial rounds";
    s3_lr_g: f32 = 1e-4, "stage3.lr_g", "generator RMSProp learning rate";
    s3_lr_d: f32 = 1e-4, "stage3.lr_d", "discriminator RMSProp learning rate";
    s3_alpha: f32 = 0.9, "stage3.alpha", "RMSProp alpha";
    s3_batch: usize = 2, "stage3.batch", "clips per round";
    s3_sigma: f32 = 0.1, "stage3.sigma", "aR1/aR2 perturbation std";
    s3_lambda: f32 = 1000.0, "stage3.lambda", "aR1/aR2 weight";
    s3_mode: AdvMode = AdvMode::Student, "stage3.mode", "training regime: student|teacher|long";
    s3_segment: usize = 4, "stage3.segment", "latent frames per long-video segment";
    s3_overlap: usize = 1, "stage3.overlap", "latent frames shared by consecutive segments";
    s3_extensions: usize = 3, "stage3.extensions", "segments after the first";
    s3_detach_recycled: bool = true, "stage3.detach_recycled", "cut gradients through the recycled input";
    s3_recycle: RecycleMode = RecycleMode::Full, "stage3.recycle", "recycled input: full|zero_after_first";
    eval_clips: usize = 4, "eval.clips", "evaluation episodes";
    eval_horizon: usize = 8, "eval.horizon", "generated latent frames per evaluation episode";
    eval_seed: u64 = 1_000_000, "eval.seed", "first evaluation episode seed";
    serve_fps: f32 = 8.0, "serve.fps", "target latent frames per second per session";
    serve_port: usize = 8765, "serve.port", "listening port";
}

impl RunConfig {
    /// Small preset used by the automated checks.
    pub fn tiny() -> Self {
        RunConfig {
            preset: "tiny".into(),
            height: 16,
            width: 16,
            train_clips: 256,
            val_clips: 4,
            codec_channels: vec![8, 16, 32],
            codec_res_blocks: 1,
            codec_steps: 300,
            model_dim: 64,
            model_layers: 2,
            model_heads: 4,
            model_prompt_tokens: 2,
            model_window_n: 4,
            model_mlp_ratio: 2,
            model_time_embed_dim: 16,
            s1_steps: 3000,
            s1_short_fraction: 0.2,
            s2_steps: 500,
            s2_grid: 32,
            s3_rounds: 200,
            eval_clips: 4,
            ..RunConfig::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::default()),
            "tiny" => Ok(RunConfig::tiny()),
            other => Err(AaptError::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| AaptError::Config(format!("line {}: expected key = value", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => RunConfig::preset(v)?,
            None => RunConfig::default(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write_resolved(&self, dir: impl AsRef<Path>) -> Result<()> {
        std::fs::write(dir.as_ref().join("config.resolved"), self.resolved())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.codec()?.validate()?;
        self.backbone()?.validate()?;
        MotionProfile::named(&self.profile)?;
        let codec = self.codec()?;
        codec.latent_frames(self.clip_frames)?;
        codec.latent_frames(self.s1_short_frames)?;
        if self.s3_overlap >= self.s3_segment {
            return Err(AaptError::Config("stage3.overlap must be below stage3.segment".into()));
        }
        if self.train_clips == 0 || self.eval_clips == 0 || self.eval_horizon == 0 {
            return Err(AaptError::Config("clip counts and horizon must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.s1_short_fraction) || self.s1_shift < 1.0 {
            return Err(AaptError::Config("stage1.short_fraction must be in [0,1] and stage1.shift >= 1".into()));
        }
        if self.s2_grid < 2 || !(self.serve_fps > 0.0) || !(self.s3_sigma > 0.0) {
            return Err(AaptError::Config("stage2.grid >= 2, serve.fps > 0 and stage3.sigma > 0 required".into()));
        }
        Ok(())
    }

    pub fn codec(&self) -> Result<CodecConfig> {
        Ok(CodecConfig {
            latent_channels: self.codec_latent_channels,
            decoder_channels: self.codec_channels.clone(),
            residual_blocks_per_scale: self.codec_res_blocks,
            kl_weight: self.codec_kl_weight,
            height: self.height,
            width: self.width,
            ..CodecConfig::default()
        })
    }

    pub fn backbone(&self) -> Result<BackboneConfig> {
        let codec = CodecConfig { height: self.height, width: self.width, ..CodecConfig::default() };
        let (lh, lw) = codec.latent_hw();
        Ok(BackboneConfig {
            model_dim: self.model_dim,
            layers: self.model_layers,
            heads: self.model_heads,
            prompt_tokens: self.model_prompt_tokens,
            latent_h: lh,
            latent_w: lw,
            window_n: self.model_window_n,
            latent_channels: self.codec_latent_channels,
            control_channels: control_dim(codec.temporal_factor),
            spatial_rope_extent: lh.max(lw) as f32,
            mlp_ratio: self.model_mlp_ratio,
            time_embed_dim: self.model_time_embed_dim,
            scene_classes: SCENE_CLASSES,
            ..BackboneConfig::desk()
        })
    }

    /// Keys that fix tensor shapes; a checkpoint only loads under equal values.
    pub fn architecture_keys() -> &'static [&'static str] {
        &[
            "data.height",
            "data.width",
            "codec.latent_channels",
            "codec.channels",
            "codec.res_blocks",
            "model.dim",
            "model.layers",
            "model.heads",
            "model.prompt_tokens",
            "model.mlp_ratio",
            "model.time_embed_dim",
        ]
    }

    /// Copies the architecture keys from `other`.
    pub fn adopt_architecture(&mut self, other: &RunConfig) {
        for k in Self::architecture_keys() {
            self.set(k, &other.get(k).unwrap()).expect("architecture key");
        }
    }
}
