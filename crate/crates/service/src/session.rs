//! One interactive session: a generation stream, a streaming decoder and
//! the pending control.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use aapt_core::backbone::{tokens_to_grid, Backbone};
use aapt_core::codec::{Codec, DecoderState, LatentFrame};
use aapt_core::stream::{control_row, FrameOut, GenSession};
use aapt_core::video::Video;
use aapt_core::world::{render_world, ControlSignal, ScaleStats, Trajectory, WorldState};
use aapt_core::{AaptError, Result};

/// Weights shared by every session of a service.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub gen: Arc<Backbone>,
    pub codec: Arc<Codec>,
    pub stats: ScaleStats,
}

pub enum FirstFrame {
    Seed(u64),
    Image(Video),
}

/// Output of one generation step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub frames: Vec<FrameOut>,
    pub latent_index: usize,
    /// Generation plus decode time.
    pub step_ms: f64,
    pub nfe: usize,
    /// The control that drove this step.
    pub control: ControlSignal,
}

pub struct SessionCore {
    pub id: u64,
    gen: GenSession,
    model: ModelBundle,
    decoder: DecoderState,
    pending: Option<ControlSignal>,
    next_frame_index: u32,
    closed: bool,
}

impl SessionCore {
    /// Opens a session and returns it with the decoded first frame.
    pub fn start(id: u64, model: &ModelBundle, first: FirstFrame, prompt_id: Option<usize>, noise_seed: u64) -> Result<(Self, FrameOut)> {
        let c = &model.codec.cfg;
        let (image, default_prompt) = match first {
            FirstFrame::Seed(s) => {
                let w = WorldState::from_seed(s);
                let p = w.prompt_id();
                (render_world(s, &Trajectory::still(w, 0), 1, c.height, c.width)?, p)
            }
            FirstFrame::Image(v) => (v, 0),
        };
        let prompt = prompt_id.unwrap_or(default_prompt);
        if prompt >= model.gen.cfg.scene_classes {
            return Err(AaptError::Contract(format!("prompt id {prompt} out of range")));
        }
        let gen = GenSession::open_image(model.gen.clone(), &model.codec, &image, prompt, noise_seed)?;
        let mut decoder = model.codec.new_decoder_state();
        let grid = model.codec.encode(&image)?.index0(0);
        let v = model.codec.decode_stream(&LatentFrame { grid }, &mut decoder)?;
        let frame = FrameOut::from_video(&v, 0, 0)?;
        Ok((SessionCore { id, gen, model: model.clone(), decoder, pending: None, next_frame_index: 1, closed: false }, frame))
    }

    /// Latest control wins until the next step consumes it.
    pub fn submit_control(&mut self, c: ControlSignal) -> Result<()> {
        if self.closed {
            return Err(AaptError::Session("session is closed".into()));
        }
        self.pending = Some(c);
        Ok(())
    }

    pub fn pending(&self) -> Option<ControlSignal> {
        self.pending
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn nfe(&self) -> usize {
        self.gen.nfe_counter()
    }

    /// Generates and decodes the next latent frame with the pending control,
    /// or a zero control when none arrived.
    pub fn step(&mut self) -> Result<StepOutput> {
        if self.closed {
            return Err(AaptError::Session("session is closed".into()));
        }
        let control = self.pending.take().unwrap_or_default();
        let tf = self.model.codec.cfg.temporal_factor;
        let row = control_row(&control, &self.model.stats, tf);
        let t0 = Instant::now();
        let latent = self.gen.generate_next(&row)?;
        let (h, w) = self.model.codec.cfg.latent_hw();
        let v = self.model.codec.decode_stream(&LatentFrame { grid: tokens_to_grid(&latent, h, w) }, &mut self.decoder)?;
        let mut frames = Vec::with_capacity(v.frames);
        for t in 0..v.frames {
            frames.push(FrameOut::from_video(&v, t, self.next_frame_index)?);
            self.next_frame_index += 1;
        }
        let step_ms = t0.elapsed().as_secs_f64() * 1e3;
        Ok(StepOutput { frames, latent_index: self.gen.frame_counter(), step_ms, nfe: self.gen.nfe_counter(), control })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionInfo {
    pub id: u64,
    pub latent_frames: usize,
}

/// Live sessions by id. Each session is driven by exactly one connection;
/// the registry only tracks them.
#[derive(Debug, Default)]
pub struct SessionRegistry {
    next: AtomicU64,
    live: Mutex<HashMap<u64, SessionInfo>>,
}

impl SessionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&self) -> u64 {
        self.next.fetch_add(1, Ordering::Relaxed) + 1
    }

    pub fn insert(&self, id: u64) {
        self.live.lock().unwrap().insert(id, SessionInfo { id, latent_frames: 0 });
    }

    pub fn update(&self, id: u64, latent_frames: usize) {
        if let Some(s) = self.live.lock().unwrap().get_mut(&id) {
            s.latent_frames = latent_frames;
        }
    }

    pub fn remove(&self, id: u64) {
        self.live.lock().unwrap().remove(&id);
    }

    pub fn len(&self) -> usize {
        self.live.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: u64) -> Option<SessionInfo> {
        self.live.lock().unwrap().get(&id).cloned()
    }
}
