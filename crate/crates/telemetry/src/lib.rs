//! WebSocket telemetry: streams step-boundary snapshots of a running
//! simulation and queues control commands for the next step boundary.
//!
//! Wire protocol (JSON text messages, every server message carries
//! `"proto":1`):
//! - server → client: `snapshot` frames, `ack` for each applied command,
//!   `error` for commands that could not be parsed or applied;
//! - client → server: `{"type":"pause"}`, `{"type":"resume"}`,
//!   `{"type":"set_speed","value":<steps per second>}`,
//!   `{"type":"inject_failure","agv":<id>}`, `{"type":"step_once"}`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;
use tokio::time::{sleep_until, Instant};

use rmfs_core::engine::Event;
use rmfs_core::{AgvId, SimState};

pub const PROTO: u32 = 1;
/// Highest frame rate sent to clients; faster runs are decimated.
pub const MAX_FPS: f64 = 20.0;
pub const MAX_SPEED: f64 = 10_000.0;
/// While paused or finished the last frame is re-sent at this interval.
const IDLE_REFRESH: Duration = Duration::from_millis(500);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    Pause,
    Resume,
    SetSpeed { value: f64 },
    InjectFailure { agv: u32 },
    StepOnce,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::SetSpeed { .. } => "set_speed",
            Command::InjectFailure { .. } => "inject_failure",
            Command::StepOnce => "step_once",
        }
    }
}

pub fn parse_command(text: &str) -> Result<Command, String> {
    serde_json::from_str(text).map_err(|e| format!("malformed command: {e}"))
}

pub fn error_message(message: &str) -> Value {
    json!({"type": "error", "proto": PROTO, "message": message})
}

pub fn ack_message(cmd: &Command, step: u32) -> Value {
    json!({"type": "ack", "proto": PROTO, "command": cmd.name(), "step": step})
}

/// Full frame for the current state; `events` are those since the previous frame.
pub fn snapshot_frame(sim: &SimState, events: &[Event], paused: bool, speed: f64) -> Value {
    let mut v = serde_json::to_value(sim.snapshot()).expect("snapshot serializes");
    let obj = v.as_object_mut().expect("snapshot is an object");
    obj.insert("type".into(), json!("snapshot"));
    obj.insert("proto".into(), json!(PROTO));
    obj.insert("events".into(), serde_json::to_value(events).expect("events serialize"));
    obj.insert("paused".into(), json!(paused));
    obj.insert("speed".into(), json!(speed));
    v
}

#[derive(Clone, Debug)]
pub struct TelemetryOptions {
    /// Steps per wall-clock second.
    pub speed: f64,
    pub start_paused: bool,
    /// Stop the service once the run has finished.
    pub exit_when_finished: bool,
}

impl Default for TelemetryOptions {
    fn default() -> Self {
        Self {
            speed: 10.0,
            start_paused: false,
            exit_when_finished: false,
        }
    }
}

struct Request {
    cmd: Command,
    reply: mpsc::UnboundedSender<Value>,
}

#[derive(Clone)]
struct Shared {
    frames: watch::Receiver<Arc<Value>>,
    commands: mpsc::UnboundedSender<Request>,
    layout: Arc<Value>,
}

/// A running telemetry service.
pub struct TelemetryServer {
    addr: SocketAddr,
    driver: JoinHandle<SimState>,
    server: JoinHandle<()>,
    stop: Option<oneshot::Sender<()>>,
}

impl TelemetryServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Wait for the simulation driver to end (only happens with
    /// `exit_when_finished`) and shut the listener down.
    pub async fn finished(mut self) -> SimState {
        let sim = self.driver.await.expect("driver task panicked");
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = self.server.await;
        sim
    }
}

/// Bind `addr` and start driving `sim`. Port 0 picks a free port.
pub async fn start(mut sim: SimState, addr: SocketAddr, opts: TelemetryOptions) -> std::io::Result<TelemetryServer> {
    let listener = TcpListener::bind(addr).await?;
    let addr = listener.local_addr()?;
    sim.log.keep_recent = true;
    let layout: Value = serde_json::from_str(&sim.layout().to_json()).expect("layout json");
    let speed = opts.speed.clamp(f64::MIN_POSITIVE, MAX_SPEED);
    let recent = sim.log.drain_recent();
    let first = snapshot_frame(&sim, &recent, opts.start_paused, speed);
    let (frame_tx, frame_rx) = watch::channel(Arc::new(first));
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let shared = Shared {
        frames: frame_rx,
        commands: cmd_tx,
        layout: Arc::new(layout),
    };
    let app = Router::new()
        .route("/", get(index))
        .route("/layout", get(layout_route))
        .route("/ws", get(ws_route))
        .with_state(shared);
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let server = tokio::spawn(async move {
        let shutdown = async {
            let _ = stop_rx.await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            log::error!("telemetry server: {e}");
        }
    });
    let driver = tokio::spawn(drive(sim, cmd_rx, frame_tx, opts, speed));
    log::info!("telemetry listening on ws://{addr}/ws");
    Ok(TelemetryServer {
        addr,
        driver,
        server,
        stop: Some(stop_tx),
    })
}

async fn index() -> impl IntoResponse {
    Json(json!({"proto": PROTO, "ws": "/ws", "layout": "/layout"}))
}

async fn layout_route(State(s): State<Shared>) -> impl IntoResponse {
    Json((*s.layout).clone())
}

async fn ws_route(ws: WebSocketUpgrade, State(s): State<Shared>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, s))
}

async fn client(socket: WebSocket, mut s: Shared) {
    let (mut tx, mut rx) = socket.split();
    let (reply_tx, mut reply_rx) = mpsc::unbounded_channel::<Value>();
    // First message: the current frame plus the static layout.
    let mut first = (**s.frames.borrow_and_update()).clone();
    first["layout"] = (*s.layout).clone();
    if tx.send(Message::Text(first.to_string().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            changed = s.frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let frame = s.frames.borrow_and_update().clone();
                if tx.send(Message::Text(frame.to_string().into())).await.is_err() {
                    break;
                }
            }
            Some(reply) = reply_rx.recv() => {
                if tx.send(Message::Text(reply.to_string().into())).await.is_err() {
                    break;
                }
            }
            msg = rx.next() => {
                let text = match msg {
                    Some(Ok(Message::Text(t))) => t.to_string(),
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                };
                match parse_command(&text) {
                    Ok(cmd) => {
                        if s.commands.send(Request { cmd, reply: reply_tx.clone() }).is_err() {
                            let _ = reply_tx.send(error_message("simulation has stopped"));
                        }
                    }
                    Err(e) => {
                        let _ = reply_tx.send(error_message(&e));
                    }
                }
            }
        }
    }
}

struct Driver {
    sim: SimState,
    paused: bool,
    speed: f64,
    pending_events: Vec<Event>,
    last_frame: Instant,
    frames: watch::Sender<Arc<Value>>,
}

impl Driver {
    fn publish(&mut self) {
        self.pending_events.extend(self.sim.log.drain_recent());
        let frame = snapshot_frame(&self.sim, &self.pending_events, self.paused, self.speed);
        self.pending_events.clear();
        self.frames.send_replace(Arc::new(frame));
        self.last_frame = Instant::now();
    }

    fn step(&mut self) {
        self.sim.step();
        let due = self.speed <= MAX_FPS || self.last_frame.elapsed().as_secs_f64() >= 1.0 / MAX_FPS;
        if due || self.sim.is_finished() {
            self.publish();
        } else {
            self.pending_events.extend(self.sim.log.drain_recent());
        }
    }

    /// Apply at the current step boundary; returns the ack or error for the sender.
    fn apply(&mut self, cmd: &Command) -> Value {
        let step = self.sim.clock;
        match cmd {
            Command::Pause => self.paused = true,
            Command::Resume => self.paused = false,
            Command::SetSpeed { value } => {
                if !(value.is_finite() && *value > 0.0 && *value <= MAX_SPEED) {
                    return error_message(&format!("speed must be in (0, {MAX_SPEED}], got {value}"));
                }
                self.speed = *value;
            }
            Command::InjectFailure { agv } => {
                if self.sim.is_finished() {
                    return error_message("run has finished");
                }
                if let Err(e) = self.sim.inject_failure(AgvId(*agv)) {
                    return error_message(&e.to_string());
                }
            }
            Command::StepOnce => {
                if self.sim.is_finished() {
                    return error_message("run has finished");
                }
                self.paused = true;
                self.step();
                self.publish();
            }
        }
        if !matches!(cmd, Command::StepOnce) {
            self.publish();
        }
        ack_message(cmd, step)
    }
}

async fn drive(
    sim: SimState,
    mut commands: mpsc::UnboundedReceiver<Request>,
    frames: watch::Sender<Arc<Value>>,
    opts: TelemetryOptions,
    speed: f64,
) -> SimState {
    let mut d = Driver {
        sim,
        paused: opts.start_paused,
        speed,
        pending_events: Vec::new(),
        last_frame: Instant::now(),
        frames,
    };
    let mut next_tick = Instant::now();
    loop {
        if d.sim.is_finished() && opts.exit_when_finished {
            d.publish();
            break;
        }
        let running = !d.paused && !d.sim.is_finished();
        let wake = if running {
            next_tick
        } else {
            Instant::now() + IDLE_REFRESH
        };
        tokio::select! {
            req = commands.recv() => {
                let Some(req) = req else { break };
                let reply = d.apply(&req.cmd);
                let _ = req.reply.send(reply);
            }
            _ = sleep_until(wake) => {
                if running {
                    d.step();
                    next_tick = Instant::now().max(next_tick) + Duration::from_secs_f64(1.0 / d.speed);
                    // Do not build up a backlog if stepping is slower than the target rate.
                    if next_tick < Instant::now() {
                        next_tick = Instant::now();
                    }
                } else {
                    d.publish();
                }
            }
        }
    }
    let Driver { mut sim, .. } = d;
    sim.log.keep_recent = false;
    sim.log.drain_recent();
    sim
}

/// Run the service until the process is stopped (or, with
/// `exit_when_finished`, until the run ends).
pub async fn serve(sim: SimState, port: u16, opts: TelemetryOptions) -> std::io::Result<SimState> {
    let server = start(sim, SocketAddr::from(([0, 0, 0, 0], port)), opts).await?;
    Ok(server.finished().await)
}
