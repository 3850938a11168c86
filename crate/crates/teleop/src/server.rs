//! TCP session server.
//!
//! Each session is a single-writer tick loop on its own thread; the accept
//! loop and one thread per connection feed it messages over a channel. A
//! connection opening with `GET ` is upgraded to a WebSocket carrying one
//! protocol line per text frame; anything else speaks raw lines.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, TryRecvError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use blendnav_core::sim::{RunMetrics, SimConfig, SimError, Simulation};
use log::{error, info, warn};
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::protocol::{decode, encode, Body, ErrorBody, WireMessage};
use crate::session::{check_version, SessionState};

/// How often a connection thread checks for outbound messages.
const POLL: Duration = Duration::from_millis(2);
const HELLO_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_LINE: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub sim: SimConfig,
    pub seed: u64,
    /// Wall-clock duration of one tick.
    pub tick_period: Duration,
    /// End a tick as soon as a command arrives instead of waiting out the
    /// period (for scripted harnesses). The period still bounds each wait,
    /// so a silent console never stalls the session.
    pub lockstep: bool,
}

impl ServerConfig {
    /// Real-time cadence: one tick per planner step.
    pub fn realtime(sim: SimConfig, seed: u64) -> Self {
        let tick_period = Duration::from_secs_f64(sim.session.planner.dt);
        Self {
            sim,
            seed,
            tick_period,
            lockstep: false,
        }
    }
}

enum Event {
    Attach(u64, Sender<Vec<u8>>),
    Message(WireMessage),
    Detach(u64),
}

struct Slot {
    events: Sender<Event>,
    attached: Arc<AtomicBool>,
}

struct Shared {
    config: ServerConfig,
    sessions: Mutex<HashMap<String, Slot>>,
    finished: Mutex<HashMap<String, RunMetrics>>,
    next_session: AtomicU64,
    next_connection: AtomicU64,
}

pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
}

/// Query side of a running server.
#[derive(Clone)]
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, config: ServerConfig) -> Result<Self, ServerError> {
        Simulation::new(config.sim.clone(), config.seed)?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            shared: Arc::new(Shared {
                config,
                sessions: Mutex::new(HashMap::new()),
                finished: Mutex::new(HashMap::new()),
                next_session: AtomicU64::new(1),
                next_connection: AtomicU64::new(1),
            }),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn handle(&self) -> io::Result<ServerHandle> {
        Ok(ServerHandle {
            addr: self.local_addr()?,
            shared: Arc::clone(&self.shared),
        })
    }

    /// Accepts connections forever.
    pub fn run(self) -> io::Result<()> {
        info!("listening on {}", self.local_addr()?);
        for stream in self.listener.incoming() {
            match stream {
                Ok(stream) => {
                    let shared = Arc::clone(&self.shared);
                    thread::spawn(move || {
                        if let Err(e) = handle_connection(&shared, stream) {
                            warn!("connection ended: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept failed: {e}"),
            }
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let handle = self.handle()?;
        thread::spawn(move || self.run());
        Ok(handle)
    }
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn active_sessions(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.shared.sessions.lock().unwrap().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Metrics of a finished session.
    pub fn metrics(&self, session: &str) -> Option<RunMetrics> {
        self.shared.finished.lock().unwrap().get(session).cloned()
    }

    pub fn wait_for_metrics(&self, session: &str, timeout: Duration) -> Option<RunMetrics> {
        let end = Instant::now() + timeout;
        loop {
            if let Some(m) = self.metrics(session) {
                return Some(m);
            }
            if Instant::now() >= end {
                return None;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }
}

trait Transport {
    /// One complete line (newline included), or `None` if nothing is ready.
    fn read_line(&mut self) -> io::Result<Option<Vec<u8>>>;
    fn write_line(&mut self, line: &[u8]) -> io::Result<()>;
}

fn timed_out(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut | io::ErrorKind::Interrupted)
}

fn closed() -> io::Error {
    io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed the connection")
}

struct Lines {
    stream: TcpStream,
    buf: Vec<u8>,
}

impl Lines {
    fn take_line(&mut self) -> Option<Vec<u8>> {
        let i = self.buf.iter().position(|&b| b == b'\n')?;
        Some(self.buf.drain(..=i).collect())
    }
}

impl Transport for Lines {
    fn read_line(&mut self) -> io::Result<Option<Vec<u8>>> {
        if let Some(line) = self.take_line() {
            return Ok(Some(line));
        }
        let mut chunk = [0u8; 4096];
        match self.stream.read(&mut chunk) {
            // a partial line left in the buffer is a truncated packet: lost
            Ok(0) => Err(closed()),
            Ok(n) => {
                self.buf.extend_from_slice(&chunk[..n]);
                if self.buf.len() > MAX_LINE && !self.buf.contains(&b'\n') {
                    return Err(io::Error::new(io::ErrorKind::InvalidData, "line too long"));
                }
                Ok(self.take_line())
            }
            Err(e) if timed_out(&e) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn write_line(&mut self, line: &[u8]) -> io::Result<()> {
        self.stream.write_all(line)
    }
}

struct Ws(WebSocket<TcpStream>);

impl Transport for Ws {
    fn read_line(&mut self) -> io::Result<Option<Vec<u8>>> {
        let mut frame = match self.0.read() {
            Ok(Message::Text(t)) => t.as_bytes().to_vec(),
            Ok(Message::Binary(b)) => b.to_vec(),
            Ok(Message::Close(_)) => return Err(closed()),
            Ok(_) => return Ok(None),
            Err(tungstenite::Error::Io(e)) if timed_out(&e) => return Ok(None),
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Err(closed()),
            Err(e) => return Err(io::Error::other(e)),
        };
        // browsers may omit the newline inside a frame
        if frame.last() != Some(&b'\n') {
            frame.push(b'\n');
        }
        Ok(Some(frame))
    }

    fn write_line(&mut self, line: &[u8]) -> io::Result<()> {
        let text = String::from_utf8_lossy(line).into_owned();
        self.0.send(Message::text(text)).map_err(io::Error::other)
    }
}

fn is_websocket(stream: &TcpStream) -> io::Result<bool> {
    let mut head = [0u8; 4];
    let end = Instant::now() + HELLO_TIMEOUT;
    loop {
        let n = match stream.peek(&mut head) {
            Ok(0) => return Err(closed()),
            Ok(n) => n,
            Err(e) if timed_out(&e) => 0,
            Err(e) => return Err(e),
        };
        if head[..n] != b"GET "[..n] {
            return Ok(false);
        }
        if n == 4 {
            return Ok(true);
        }
        if Instant::now() >= end {
            return Err(io::Error::new(io::ErrorKind::TimedOut, "no data"));
        }
        thread::sleep(POLL);
    }
}

fn open_transport(stream: TcpStream) -> io::Result<Box<dyn Transport>> {
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(HELLO_TIMEOUT))?;
    let transport: Box<dyn Transport> = if is_websocket(&stream)? {
        let ws = tungstenite::accept(stream.try_clone()?).map_err(|e| io::Error::other(e.to_string()))?;
        Box::new(Ws(ws))
    } else {
        Box::new(Lines {
            stream: stream.try_clone()?,
            buf: Vec::new(),
        })
    };
    stream.set_read_timeout(Some(POLL))?;
    Ok(transport)
}

fn send_error(transport: &mut dyn Transport, code: &str, message: String) -> io::Result<()> {
    let body = Body::Error(ErrorBody {
        code: code.into(),
        message,
    });
    transport.write_line(&encode(&WireMessage::new(1, 0.0, body)).expect("finite"))
}

fn handle_connection(shared: &Arc<Shared>, stream: TcpStream) -> io::Result<()> {
    let peer = stream.peer_addr()?;
    let mut transport = open_transport(stream)?;
    let deadline = Instant::now() + HELLO_TIMEOUT;
    let hello = loop {
        match transport.read_line()? {
            Some(bytes) => match decode(&bytes) {
                Ok(m) => break m,
                Err(e) => send_error(transport.as_mut(), "protocol", e.to_string())?,
            },
            None if Instant::now() >= deadline => return Ok(()),
            None => {}
        }
    };
    let Body::Hello(h) = &hello.body else {
        return send_error(transport.as_mut(), "expected_hello", format!("first message was {}", hello.body.type_name()));
    };
    if let Err(ErrorBody { code, message }) = check_version(&h.version) {
        info!("{peer}: refused: {message}");
        return send_error(transport.as_mut(), &code, message);
    }

    let conn = shared.next_connection.fetch_add(1, Ordering::Relaxed);
    let (tx, rx) = mpsc::channel();
    let (id, events, attached) = match &h.session {
        None => match start_session(shared, conn, tx) {
            Ok(started) => started,
            Err(e) => return send_error(transport.as_mut(), "session_failed", e.to_string()),
        },
        Some(id) => {
            let sessions = shared.sessions.lock().unwrap();
            let Some(slot) = sessions.get(id) else {
                drop(sessions);
                return send_error(transport.as_mut(), "unknown_session", format!("no live session {id:?}"));
            };
            if slot.attached.swap(true, Ordering::SeqCst) {
                drop(sessions);
                return send_error(transport.as_mut(), "session_busy", format!("session {id:?} already has a console"));
            }
            let _ = slot.events.send(Event::Attach(conn, tx));
            (id.clone(), slot.events.clone(), Arc::clone(&slot.attached))
        }
    };
    info!("{peer}: attached to session {id}");
    let result = pump(transport.as_mut(), &events, &rx);
    let _ = events.send(Event::Detach(conn));
    attached.store(false, Ordering::SeqCst);
    info!("{peer}: detached from session {id}");
    result
}

/// Shuttles messages until the console leaves or the session ends.
fn pump(transport: &mut dyn Transport, events: &Sender<Event>, outbound: &Receiver<Vec<u8>>) -> io::Result<()> {
    loop {
        match transport.read_line() {
            Ok(Some(bytes)) => match decode(&bytes) {
                Ok(m) => {
                    let bye = matches!(m.body, Body::Bye(_));
                    let _ = events.send(Event::Message(m));
                    if bye {
                        return Ok(());
                    }
                }
                // a bad packet is a lost packet
                Err(e) => warn!("dropping malformed packet: {e}"),
            },
            Ok(None) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        loop {
            match outbound.try_recv() {
                Ok(line) => transport.write_line(&line)?,
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
    }
}

fn start_session(
    shared: &Arc<Shared>,
    conn: u64,
    writer: Sender<Vec<u8>>,
) -> Result<(String, Sender<Event>, Arc<AtomicBool>), SimError> {
    let n = shared.next_session.fetch_add(1, Ordering::Relaxed);
    let id = format!("s{n}");
    let mut state = SessionState::new(id.clone(), shared.config.sim.clone(), shared.config.seed)?;
    let greeting = state.connect();
    let (events, inbox) = mpsc::channel();
    let attached = Arc::new(AtomicBool::new(true));
    shared.sessions.lock().unwrap().insert(
        id.clone(),
        Slot {
            events: events.clone(),
            attached: Arc::clone(&attached),
        },
    );
    let mut out = Outbox(Some((conn, writer)));
    out.send(&greeting);
    let shared = Arc::clone(shared);
    thread::spawn(move || run_session(&shared, state, inbox, out));
    Ok((id, events, attached))
}

/// The attached console's outbound queue, if any.
struct Outbox(Option<(u64, Sender<Vec<u8>>)>);

impl Outbox {
    fn send(&mut self, msg: &WireMessage) {
        let Some((_, tx)) = &self.0 else { return };
        match encode(msg) {
            Ok(bytes) => {
                if tx.send(bytes).is_err() {
                    self.0 = None;
                }
            }
            Err(e) => warn!("not sending {}: {e}", msg.body.type_name()),
        }
    }
}

fn run_session(shared: &Shared, mut state: SessionState, inbox: Receiver<Event>, mut out: Outbox) {
    let config = &shared.config;
    let start = Instant::now();
    let mut ticks = 0u32;
    info!("session {} started", state.id());
    loop {
        match state.begin_tick() {
            Ok(msgs) => msgs.iter().for_each(|m| out.send(m)),
            Err(e) => {
                error!("session {}: {e}", state.id());
                break;
            }
        }
        let deadline = if config.lockstep {
            Instant::now() + config.tick_period
        } else {
            start + config.tick_period * (ticks + 1)
        };
        while let Some(left) = deadline.checked_duration_since(Instant::now()) {
            match inbox.recv_timeout(left) {
                Ok(Event::Message(m)) => {
                    let command = matches!(m.body, Body::Command(_));
                    if let Some(reply) = state.receive(&m) {
                        out.send(&reply);
                    }
                    if command && config.lockstep {
                        break;
                    }
                }
                Ok(Event::Attach(conn, tx)) => {
                    out = Outbox(Some((conn, tx)));
                    let greeting = state.connect();
                    out.send(&greeting);
                }
                Ok(Event::Detach(conn)) => {
                    if out.0.as_ref().is_some_and(|(c, _)| *c == conn) {
                        out = Outbox(None);
                        state.disconnect();
                    }
                }
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => break,
            }
        }
        if let Err(e) = state.finish_tick() {
            error!("session {}: {e}", state.id());
            break;
        }
        ticks += 1;
        if state.finished() {
            let bye = state.farewell();
            out.send(&bye);
            break;
        }
    }
    let id = state.id().to_owned();
    info!("session {id} finished after {ticks} ticks");
    shared.sessions.lock().unwrap().remove(&id);
    shared.finished.lock().unwrap().insert(id, state.into_metrics());
}
