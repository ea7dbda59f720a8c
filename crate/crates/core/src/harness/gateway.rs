//! Expert gateway: newline-delimited JSON over long-lived TCP connections.
//!
//! Two kinds of peers connect. Agents (a [`LiveExpert`] inside a running
//! episode) send `query` and `episode_update`; consoles send `ack_render` and
//! `response`. A connection becomes an agent the first time it sends a query;
//! everything else is a console. Queries fan out to every console and are
//! replayed to consoles that connect later. Responses are routed back to the
//! owning agent by query id, stamped with the gateway's clock.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::hfm::{ExpertBackend, ExpertResponse, ExpertTimeout, ImpasseContext, Query};

/// Milliseconds since the Unix epoch on the gateway's clock.
pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryContext {
    pub task: String,
    pub failures: Vec<String>,
    pub inventory: BTreeMap<String, u32>,
    pub transcript: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WireMessage {
    Query {
        id: String,
        question: String,
        context: QueryContext,
        /// How long the asking agent will wait; later responses are rejected.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timeout_ms: Option<u64>,
    },
    AckRender {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_review_start: Option<u64>,
    },
    Response {
        id: String,
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_submit: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        t_review_start: Option<u64>,
    },
    EpisodeUpdate {
        #[serde(default)]
        episode: String,
        #[serde(default)]
        metrics: serde_json::Value,
    },
    Error {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        id: Option<String>,
        code: String,
        message: String,
    },
}

pub const ALREADY_TIMED_OUT: &str = "already_timed_out";
pub const UNKNOWN_QUERY: &str = "unknown_query";
pub const BAD_MESSAGE: &str = "bad_message";

impl WireMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("wire messages always serialize");
        s.push('\n');
        s
    }

    fn error(id: Option<String>, code: &str, message: impl Into<String>) -> Self {
        WireMessage::Error { id, code: code.to_owned(), message: message.into() }
    }
}

struct Pending {
    query: WireMessage,
    agent: u64,
    deadline: Option<u64>,
    t_review_start: Option<u64>,
}

#[derive(Default)]
struct State {
    peers: BTreeMap<u64, Sender<WireMessage>>,
    agents: BTreeSet<u64>,
    pending: BTreeMap<String, Pending>,
    expired: BTreeSet<String>,
}

impl State {
    fn send(&self, peer: u64, msg: WireMessage) {
        if let Some(tx) = self.peers.get(&peer) {
            let _ = tx.send(msg);
        }
    }

    fn consoles(&self) -> impl Iterator<Item = u64> + '_ {
        self.peers.keys().copied().filter(|p| !self.agents.contains(p))
    }

    fn broadcast(&self, msg: &WireMessage) {
        for c in self.consoles() {
            self.send(c, msg.clone());
        }
    }

    fn expire(&mut self, now: u64) {
        let gone: Vec<String> =
            self.pending.iter().filter(|(_, p)| p.deadline.is_some_and(|d| now > d)).map(|(k, _)| k.clone()).collect();
        for id in gone {
            self.pending.remove(&id);
            self.expired.insert(id);
        }
    }

    fn handle(&mut self, peer: u64, msg: WireMessage) {
        let now = now_ms();
        self.expire(now);
        match msg {
            WireMessage::Query { ref id, timeout_ms, .. } => {
                self.agents.insert(peer);
                let id = id.clone();
                if self.pending.contains_key(&id) {
                    self.send(peer, WireMessage::error(Some(id), BAD_MESSAGE, "duplicate query id"));
                    return;
                }
                self.broadcast(&msg);
                self.pending.insert(id, Pending { query: msg, agent: peer, deadline: timeout_ms.map(|t| now + t), t_review_start: None });
            }
            WireMessage::AckRender { id, .. } => match self.pending.get_mut(&id) {
                Some(p) => {
                    p.t_review_start.get_or_insert(now);
                }
                None => self.reject(peer, id),
            },
            WireMessage::Response { id, text, .. } => match self.pending.remove(&id) {
                Some(p) => {
                    let start = p.t_review_start.unwrap_or(now);
                    let reply = WireMessage::Response { id, text, t_submit: Some(now.max(start)), t_review_start: Some(start) };
                    self.send(p.agent, reply);
                }
                None => self.reject(peer, id),
            },
            WireMessage::EpisodeUpdate { .. } => self.broadcast(&msg),
            WireMessage::Error { .. } => {}
        }
    }

    fn reject(&self, peer: u64, id: String) {
        let msg = if self.expired.contains(&id) {
            WireMessage::error(Some(id), ALREADY_TIMED_OUT, "the agent stopped waiting for this query")
        } else {
            WireMessage::error(Some(id), UNKNOWN_QUERY, "no such outstanding query")
        };
        self.send(peer, msg);
    }

    fn connect(&mut self, peer: u64, tx: Sender<WireMessage>) {
        self.expire(now_ms());
        for p in self.pending.values() {
            let _ = tx.send(p.query.clone());
        }
        self.peers.insert(peer, tx);
    }

    fn disconnect(&mut self, peer: u64) {
        self.peers.remove(&peer);
        if self.agents.remove(&peer) {
            let orphaned: Vec<String> =
                self.pending.iter().filter(|(_, p)| p.agent == peer).map(|(k, _)| k.clone()).collect();
            for id in orphaned {
                self.pending.remove(&id);
                self.expired.insert(id);
            }
        }
    }
}

struct Shared {
    state: Mutex<State>,
    streams: Mutex<BTreeMap<u64, TcpStream>>,
    next_peer: AtomicU64,
    stop: AtomicBool,
}

impl Shared {
    fn state(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Running gateway. Dropping the handle shuts it down.
pub struct GatewayHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

/// Binds and starts accepting connections. Port 0 picks a free port.
pub fn serve_expert_gateway(addr: impl ToSocketAddrs) -> std::io::Result<GatewayHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        state: Mutex::new(State::default()),
        streams: Mutex::new(BTreeMap::new()),
        next_peer: AtomicU64::new(0),
        stop: AtomicBool::new(false),
    });
    let sh = shared.clone();
    let acceptor = thread::spawn(move || {
        for stream in listener.incoming() {
            if sh.stop.load(Ordering::SeqCst) {
                break;
            }
            if let Ok(s) = stream {
                let _ = spawn_peer(&sh, s);
            }
        }
    });
    Ok(GatewayHandle { addr, shared, acceptor: Some(acceptor) })
}

fn spawn_peer(shared: &Arc<Shared>, stream: TcpStream) -> std::io::Result<()> {
    let _ = stream.set_nodelay(true);
    let peer = shared.next_peer.fetch_add(1, Ordering::SeqCst);
    let mut writer = stream.try_clone()?;
    shared.streams.lock().unwrap_or_else(|e| e.into_inner()).insert(peer, stream.try_clone()?);
    let (tx, rx) = mpsc::channel::<WireMessage>();
    shared.state().connect(peer, tx);
    thread::spawn(move || {
        for msg in rx {
            if writer.write_all(msg.to_line().as_bytes()).and_then(|_| writer.flush()).is_err() {
                break;
            }
        }
    });
    let sh = shared.clone();
    thread::spawn(move || {
        let reader = BufReader::new(stream);
        for line in reader.lines() {
            let Ok(line) = line else { break };
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<WireMessage>(&line) {
                Ok(msg) => sh.state().handle(peer, msg),
                Err(e) => sh.state().send(peer, WireMessage::error(None, BAD_MESSAGE, e.to_string())),
            }
        }
        sh.state().disconnect(peer);
        sh.streams.lock().unwrap_or_else(|e| e.into_inner()).remove(&peer);
    });
    Ok(())
}

impl GatewayHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Queries still waiting for a response.
    pub fn outstanding(&self) -> Vec<String> {
        self.shared.state().pending.keys().cloned().collect()
    }

    pub fn shutdown(&mut self) {
        if self.shared.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = TcpStream::connect(self.addr);
        for s in self.shared.streams.lock().unwrap_or_else(|e| e.into_inner()).values() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the acceptor exits.
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for GatewayHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Plain NDJSON client: one connection, a reader thread feeding a channel.
pub struct WireClient {
    stream: TcpStream,
    rx: Receiver<WireMessage>,
}

impl WireClient {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let _ = stream.set_nodelay(true);
        let reader = BufReader::new(stream.try_clone()?);
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in reader.lines() {
                let Ok(line) = line else { break };
                if let Ok(msg) = serde_json::from_str::<WireMessage>(&line) {
                    if tx.send(msg).is_err() {
                        break;
                    }
                }
            }
        });
        Ok(Self { stream, rx })
    }

    pub fn send(&mut self, msg: &WireMessage) -> std::io::Result<()> {
        self.stream.write_all(msg.to_line().as_bytes())?;
        self.stream.flush()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<WireMessage> {
        self.rx.recv_timeout(timeout).ok()
    }

    /// Closes both directions; the gateway sees a disconnect.
    pub fn close(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }
}

/// Expert backend that forwards queries to a gateway and waits for a
/// console's response.
pub struct LiveExpert {
    client: WireClient,
    ctx: ImpasseContext,
    episode: String,
}

impl LiveExpert {
    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(Self { client: WireClient::connect(addr)?, ctx: ImpasseContext::default(), episode: String::new() })
    }
}

impl ExpertBackend for LiveExpert {
    fn ask(&mut self, query: &Query, timeout: Duration) -> Result<ExpertResponse, ExpertTimeout> {
        let timed_out = || ExpertTimeout { query_id: query.id.clone() };
        let msg = WireMessage::Query {
            id: query.id.clone(),
            question: query.text.clone(),
            context: QueryContext {
                task: self.ctx.task.clone(),
                failures: self.ctx.failures.clone(),
                inventory: self.ctx.inventory.clone(),
                transcript: query.context_snapshot.clone(),
            },
            timeout_ms: Some(timeout.as_millis() as u64),
        };
        self.client.send(&msg).map_err(|_| timed_out())?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.client.rx.recv_timeout(left) {
                Ok(WireMessage::Response { id, text, t_submit: Some(t_submit), t_review_start: Some(t_review_start) })
                    if id == query.id =>
                {
                    return Ok(ExpertResponse { query_id: id, text, t_review_start, t_submit });
                }
                Ok(WireMessage::Error { id: Some(id), .. }) if id == query.id => return Err(timed_out()),
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => return Err(timed_out()),
            }
        }
    }

    fn begin_impasse(&mut self, ctx: &ImpasseContext) {
        self.episode = ctx.task.clone();
        self.ctx = ctx.clone();
    }

    fn episode_update(&mut self, snapshot: &serde_json::Value) {
        let episode = snapshot.get("episode").and_then(|v| v.as_str()).unwrap_or(&self.episode).to_owned();
        let _ = self.client.send(&WireMessage::EpisodeUpdate { episode, metrics: snapshot.clone() });
    }
}
