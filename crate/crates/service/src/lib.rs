//! Interactive streaming service: a client opens a session from a seed or
//! an image, streams controls, and receives each decoded frame as soon as
//! it is generated.

pub mod client;
pub mod protocol;
pub mod server;
pub mod session;

use std::sync::Arc;

use aapt_core::checkpoint::Checkpoint;
use aapt_core::backbone::Backbone;
use aapt_core::codec::Codec;
use aapt_core::config::{RunConfig, Stage};
use aapt_core::world::ScaleStats;
use aapt_core::pipeline::load_checkpoint;
use aapt_core::{AaptError, Result};

pub use client::{Client, Incoming, Received};
pub use protocol::{codes, FrameOut, SessionMessage, FRAME_MAGIC};
pub use server::{Server, ServerConfig, ServerHandle};
pub use session::{FirstFrame, ModelBundle, SessionCore, SessionRegistry, StepOutput};

impl ModelBundle {
    /// The one-step generator of a stage-2 or stage-3 checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if !matches!(ck.stage, Stage::Stage2 | Stage::Stage3) {
            return Err(AaptError::Provenance { expected: "stage2 or stage3".into(), found: ck.stage.name().into() });
        }
        let l = load_checkpoint(ck)?;
        let gen = l.gen.ok_or_else(|| AaptError::Format("checkpoint has no generator".into()))?;
        Ok(ModelBundle { gen: Arc::new(gen), codec: Arc::new(l.codec), stats: l.stats })
    }

    /// Randomly initialized weights of the shapes `cfg` implies; for
    /// plumbing tests and timing.
    pub fn untrained(cfg: &RunConfig, seed: u64) -> Result<Self> {
        Ok(ModelBundle {
            gen: Arc::new(Backbone::new(cfg.backbone()?, seed)?),
            codec: Arc::new(Codec::new(cfg.codec()?, seed ^ 0xc0dec)?),
            stats: ScaleStats::default(),
        })
    }
}
