//! Blocking scripted client, used by tests and the loopback check.

use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use aapt_core::video::Video;
use aapt_core::world::ControlSignal;
use aapt_core::{AaptError, Result};
use tungstenite::{Message, WebSocket};

use crate::protocol::{FrameOut, SessionMessage};

pub enum Incoming {
    Frame(FrameOut),
    Msg(SessionMessage),
}

pub struct Client {
    ws: WebSocket<TcpStream>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Started {
    pub session_id: u64,
    pub width: u16,
    pub height: u16,
    pub fps: f32,
    pub first: FrameOut,
}

/// Everything received while driving a control trace.
#[derive(Clone, Debug, Default)]
pub struct Received {
    pub frames: Vec<FrameOut>,
    /// `(frame_index, latent_index, step_ms, nfe)` per Stats message.
    pub stats: Vec<(u32, usize, f64, usize)>,
    pub errors: Vec<(String, String)>,
}

impl Received {
    pub fn video(&self) -> Result<Video> {
        Video::concat(&self.frames.iter().map(|f| f.to_video()).collect::<Result<Vec<_>>>()?)
    }
}

fn ws_err(e: tungstenite::Error) -> AaptError {
    AaptError::Session(format!("socket: {e}"))
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(Duration::from_secs(30)))?;
        let (ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).map_err(|e| AaptError::Session(format!("handshake: {e}")))?;
        Ok(Client { ws })
    }

    pub fn send(&mut self, m: &SessionMessage) -> Result<()> {
        self.ws.send(Message::text(m.to_json())).map_err(ws_err)
    }

    pub fn send_raw(&mut self, text: &str) -> Result<()> {
        self.ws.send(Message::text(text)).map_err(ws_err)
    }

    pub fn recv(&mut self) -> Result<Incoming> {
        loop {
            match self.ws.read().map_err(ws_err)? {
                Message::Binary(b) => return Ok(Incoming::Frame(FrameOut::decode(&b)?)),
                Message::Text(t) => return SessionMessage::from_json(t.as_str()).map(Incoming::Msg).map_err(|e| AaptError::Format(e.to_string())),
                Message::Close(_) => return Err(AaptError::Session("server closed the connection".into())),
                _ => {}
            }
        }
    }

    /// Next text message, skipping frames.
    pub fn recv_msg(&mut self) -> Result<SessionMessage> {
        loop {
            if let Incoming::Msg(m) = self.recv()? {
                return Ok(m);
            }
        }
    }

    pub fn start(&mut self, seed: Option<u64>, image: Option<String>, prompt_id: Option<usize>) -> Result<Started> {
        self.send(&SessionMessage::StartSession { seed, image, prompt_id })?;
        let (session_id, width, height, fps) = match self.recv_msg()? {
            SessionMessage::SessionStarted { session_id, width, height, fps } => (session_id, width, height, fps),
            SessionMessage::Error { code, text } => return Err(AaptError::Session(format!("{code}: {text}"))),
            m => return Err(AaptError::Session(format!("unexpected reply {m:?}"))),
        };
        match self.recv()? {
            Incoming::Frame(first) => Ok(Started { session_id, width, height, fps, first }),
            Incoming::Msg(m) => Err(AaptError::Session(format!("expected the first frame, got {m:?}"))),
        }
    }

    pub fn control(&mut self, c: &ControlSignal) -> Result<()> {
        self.send(&SessionMessage::Control { dx: c.dx, dy: c.dy, dzoom: c.dzoom, drot: c.drot })
    }

    pub fn end(&mut self) -> Result<()> {
        self.send(&SessionMessage::EndSession {})
    }

    /// Sends `controls[k]` as soon as the Stats of latent frame `k - 1`
    /// arrive and collects the frames of `controls.len()` latent frames.
    pub fn run_trace(&mut self, controls: &[ControlSignal]) -> Result<Received> {
        let mut out = Received::default();
        if let Some(c) = controls.first() {
            self.control(c)?;
        }
        while out.stats.len() < controls.len() {
            match self.recv()? {
                Incoming::Frame(f) => out.frames.push(f),
                Incoming::Msg(SessionMessage::Stats { frame_index, latent_index, step_ms, nfe }) => {
                    out.stats.push((frame_index, latent_index, step_ms, nfe));
                    if let Some(c) = controls.get(out.stats.len()) {
                        self.control(c)?;
                    }
                }
                Incoming::Msg(SessionMessage::Error { code, text }) => out.errors.push((code, text)),
                Incoming::Msg(_) => {}
            }
        }
        Ok(out)
    }

    pub fn close(mut self) {
        let _ = self.ws.close(None);
        let _ = self.ws.flush();
    }
}
