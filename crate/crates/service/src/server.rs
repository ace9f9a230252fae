//! Socket service: one thread per connection, at most one session per
//! connection, paced to a target latent-frame rate.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use aapt_core::video::Video;
use aapt_core::world::ControlSignal;
use aapt_core::{AaptError, Result};
use base64::Engine;
use tungstenite::{Message, WebSocket};

use crate::protocol::{codes, SessionMessage};
use crate::session::{FirstFrame, ModelBundle, SessionCore, SessionRegistry};

/// Socket read timeout of the connection loop; bounds pacing jitter.
const POLL: Duration = Duration::from_millis(2);

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub host: String,
    /// 0 picks an ephemeral port.
    pub port: u16,
    /// Target latent frames per second.
    pub fps: f32,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { host: "127.0.0.1".into(), port: 8765, fps: 8.0 }
    }
}

pub struct Server {
    listener: TcpListener,
    model: ModelBundle,
    fps: f32,
    registry: Arc<SessionRegistry>,
    stop: Arc<AtomicBool>,
}

/// A server running on a background thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    pub registry: Arc<SessionRegistry>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_and_join();
    }

    fn stop_and_join(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_and_join();
    }
}

impl Server {
    pub fn bind(model: ModelBundle, cfg: &ServerConfig) -> Result<Self> {
        if !(cfg.fps > 0.0 && cfg.fps.is_finite()) {
            return Err(AaptError::Config(format!("fps must be positive, got {}", cfg.fps)));
        }
        let listener = TcpListener::bind((cfg.host.as_str(), cfg.port))?;
        Ok(Server { listener, model, fps: cfg.fps, registry: Arc::new(SessionRegistry::new()), stop: Arc::new(AtomicBool::new(false)) })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn registry(&self) -> Arc<SessionRegistry> {
        self.registry.clone()
    }

    /// Accepts connections until stopped.
    pub fn serve_forever(&self) -> Result<()> {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        for stream in self.listener.incoming() {
            if self.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let (model, registry, stop, fps) = (self.model.clone(), self.registry.clone(), self.stop.clone(), self.fps);
            workers.retain(|w| !w.is_finished());
            workers.push(std::thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &model, &registry, &stop, fps) {
                    eprintln!("connection ended: {e}");
                }
            }));
        }
        for w in workers {
            let _ = w.join();
        }
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let (registry, stop) = (self.registry.clone(), self.stop.clone());
        let thread = std::thread::spawn(move || {
            if let Err(e) = self.serve_forever() {
                eprintln!("server stopped: {e}");
            }
        });
        Ok(ServerHandle { addr, registry, stop, thread: Some(thread) })
    }
}

fn ws_err(e: tungstenite::Error) -> AaptError {
    AaptError::Session(format!("socket: {e}"))
}

fn send(ws: &mut WebSocket<TcpStream>, m: &SessionMessage) -> Result<()> {
    ws.send(Message::text(m.to_json())).map_err(ws_err)
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Session state owned by one connection.
struct Conn<'a> {
    model: &'a ModelBundle,
    registry: &'a SessionRegistry,
    session: Option<SessionCore>,
    next_due: Instant,
    period: Duration,
}

impl Drop for Conn<'_> {
    fn drop(&mut self) {
        if let Some(s) = &self.session {
            self.registry.remove(s.id);
        }
    }
}

fn handle_connection(stream: TcpStream, model: &ModelBundle, registry: &SessionRegistry, stop: &AtomicBool, fps: f32) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| AaptError::Session(format!("handshake: {e}")))?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let period = Duration::from_secs_f64(1.0 / fps as f64);
    let mut conn = Conn { model, registry, session: None, next_due: Instant::now(), period };
    'outer: while !stop.load(Ordering::SeqCst) {
        if conn.session.as_ref().is_some_and(|s| !s.is_closed()) && Instant::now() >= conn.next_due {
            conn.step(&mut ws)?;
            // Apply everything that arrived during the step before the next one.
            loop {
                match pump(&mut conn, &mut ws, fps)? {
                    Polled::Handled => {}
                    Polled::Idle => break,
                    Polled::Closed => break 'outer,
                }
            }
            continue;
        }
        if let Polled::Closed = pump(&mut conn, &mut ws, fps)? {
            break;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

enum Polled {
    Handled,
    Idle,
    Closed,
}

/// Reads and handles at most one message, waiting up to the poll interval.
fn pump(conn: &mut Conn, ws: &mut WebSocket<TcpStream>, fps: f32) -> Result<Polled> {
    match ws.read() {
        Ok(Message::Text(t)) => conn.on_text(ws, t.as_str(), fps)?,
        Ok(Message::Binary(_)) => send(ws, &SessionMessage::error(codes::BAD_REQUEST, "binary messages are not accepted"))?,
        Ok(Message::Close(_)) => return Ok(Polled::Closed),
        Ok(_) => {}
        Err(e) if is_timeout(&e) => return Ok(Polled::Idle),
        Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(Polled::Closed),
        Err(e) => return Err(ws_err(e)),
    }
    Ok(Polled::Handled)
}

impl Conn<'_> {
    fn step(&mut self, ws: &mut WebSocket<TcpStream>) -> Result<()> {
        let s = self.session.as_mut().expect("open session");
        let out = s.step()?;
        for f in &out.frames {
            ws.send(Message::binary(f.encode())).map_err(ws_err)?;
        }
        let frame_index = out.frames.last().map_or(0, |f| f.frame_index);
        send(ws, &SessionMessage::Stats { frame_index, latent_index: out.latent_index, step_ms: out.step_ms, nfe: out.nfe })?;
        self.registry.update(s.id, out.latent_index);
        // A slow model drops to its own rate instead of accumulating debt.
        self.next_due = (self.next_due + self.period).max(Instant::now());
        Ok(())
    }

    fn on_text(&mut self, ws: &mut WebSocket<TcpStream>, text: &str, fps: f32) -> Result<()> {
        let msg = match SessionMessage::from_json(text) {
            Ok(m) => m,
            Err(e) => {
                send(ws, &SessionMessage::error(codes::BAD_REQUEST, format!("unparseable message: {e}")))?;
                return Ok(());
            }
        };
        match msg {
            SessionMessage::StartSession { seed, image, prompt_id } => {
                if self.session.is_some() {
                    send(ws, &SessionMessage::error(codes::ALREADY_STARTED, "this connection already hosts a session"))?;
                    return Ok(());
                }
                let first = match (seed, image) {
                    (_, Some(b64)) => match decode_image(&b64, self.model) {
                        Ok(v) => FirstFrame::Image(v),
                        Err(e) => {
                            send(ws, &SessionMessage::error(codes::BAD_REQUEST, e.to_string()))?;
                            return Ok(());
                        }
                    },
                    (Some(s), None) => FirstFrame::Seed(s),
                    (None, None) => {
                        send(ws, &SessionMessage::error(codes::BAD_REQUEST, "StartSession needs a seed or an image"))?;
                        return Ok(());
                    }
                };
                let id = self.registry.allocate();
                match SessionCore::start(id, self.model, first, prompt_id, seed.unwrap_or(id)) {
                    Ok((core, frame)) => {
                        let c = &self.model.codec.cfg;
                        send(ws, &SessionMessage::SessionStarted { session_id: id, width: c.width as u16, height: c.height as u16, fps })?;
                        ws.send(Message::binary(frame.encode())).map_err(ws_err)?;
                        self.registry.insert(id);
                        self.session = Some(core);
                        self.next_due = Instant::now() + self.period;
                    }
                    Err(e) => send(ws, &SessionMessage::error(codes::BAD_REQUEST, e.to_string()))?,
                }
            }
            SessionMessage::Control { dx, dy, dzoom, drot } => match &mut self.session {
                None => send(ws, &SessionMessage::error(codes::NOT_STARTED, "send StartSession first"))?,
                Some(s) if s.is_closed() => send(ws, &SessionMessage::error(codes::CLOSED, "session has ended"))?,
                Some(s) => {
                    let c = ControlSignal::new(dx, dy, dzoom, drot);
                    if c.as_array().iter().any(|v| !v.is_finite()) {
                        send(ws, &SessionMessage::error(codes::BAD_REQUEST, "control values must be finite"))?;
                    } else {
                        s.submit_control(c)?;
                    }
                }
            },
            SessionMessage::EndSession {} => match &mut self.session {
                None => send(ws, &SessionMessage::error(codes::NOT_STARTED, "no session to end"))?,
                Some(s) if s.is_closed() => send(ws, &SessionMessage::error(codes::CLOSED, "session has ended"))?,
                Some(s) => {
                    s.close();
                    self.registry.remove(s.id);
                }
            },
            other => send(ws, &SessionMessage::error(codes::BAD_REQUEST, format!("clients may not send {}", type_name(&other))))?,
        }
        Ok(())
    }
}

fn type_name(m: &SessionMessage) -> &'static str {
    match m {
        SessionMessage::StartSession { .. } => "StartSession",
        SessionMessage::SessionStarted { .. } => "SessionStarted",
        SessionMessage::Control { .. } => "Control",
        SessionMessage::Stats { .. } => "Stats",
        SessionMessage::Error { .. } => "Error",
        SessionMessage::EndSession {} => "EndSession",
    }
}

fn decode_image(b64: &str, model: &ModelBundle) -> Result<Video> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(b64).map_err(|e| AaptError::Format(format!("image is not base64: {e}")))?;
    let c = &model.codec.cfg;
    if bytes.len() != 3 * c.height * c.width {
        return Err(AaptError::Shape(format!("image has {} bytes, expected {}x{}x3", bytes.len(), c.height, c.width)));
    }
    Video::from_rgb8(1, c.height, c.width, &bytes)
}
