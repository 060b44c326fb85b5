//! Operator console service.
//!
//! WebSocket, JSON text frames. The control loop runs on its own thread at the
//! configured tick rate; clients talk to it only through:
//!
//! * the latched kill flag (set directly by the client thread, never queued),
//! * a bounded command queue drained between ticks,
//! * a snapshot slot the loop refreshes at `snapshot_rate_hz`.
//!
//! The first client to connect is the operator. Later clients are spectators:
//! they receive state but only their `kill` commands are honored.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::control::{ControlLoop, InputSource, LiveInput};
use super::trial::{plan_trials, Condition, RatingScale, Ratings, TrialPhase, TrialPlan, TrialRecord, TrialRun, TrialTiming};
use super::{SessionConfig, SessionError, SourceKind};
use crate::cueing::CueingMode;
use crate::safety::{KillEvent, KillLatch, KillState};
use crate::telemetry::{Mailbox, UdpReceiver};

const COMMAND_QUEUE_DEPTH: usize = 64;
const CLIENT_POLL: Duration = Duration::from_millis(2);
/// Idle log history kept between trials, in ticks.
const IDLE_LOG_CAP: usize = 60_000;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Kill,
    Arm,
    Engage,
    Release,
    Rearm,
    SetGain { gain: f64 },
    StartTrial,
    Rate { ratings: Ratings },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Kill => "kill",
            Command::Arm => "arm",
            Command::Engage => "engage",
            Command::Release => "release",
            Command::Rearm => "rearm",
            Command::SetGain { .. } => "set_gain",
            Command::StartTrial => "start_trial",
            Command::Rate { .. } => "rate",
        }
    }
}

/// Parses a client text frame: `{"type":"cmd","cmd":...}`.
pub fn parse_client_message(text: &str) -> Result<Command, String> {
    let v: serde_json::Value = serde_json::from_str(text).map_err(|e| format!("bad json: {e}"))?;
    if v.get("type").and_then(|t| t.as_str()) != Some("cmd") {
        return Err("expected type \"cmd\"".into());
    }
    serde_json::from_value(v).map_err(|e| format!("bad command: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Spectator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadFrame {
    pub pos: [f64; 3],
    /// x, y, z, w
    pub quat: [f64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialFrame {
    pub index: Option<usize>,
    pub phase: &'static str,
    pub condition: Option<Condition>,
    pub completed: usize,
    pub planned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TickFrame {
    pub mean_us: f64,
    pub max_us: f64,
    pub overruns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StateFrame {
    pub t: f64,
    pub force: [f64; 3],
    pub head: HeadFrame,
    pub safety: &'static str,
    pub trial: TrialFrame,
    pub gain: f64,
    pub max_gain: f64,
    pub tick: TickFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello { role: Role, scales: Vec<RatingScale>, force_limit: f64, max_gain: f64, tick_rate: f64, state_rate: f64 },
    State(StateFrame),
    Ack { cmd: &'static str, ok: bool, reason: Option<String> },
}

impl ServerMessage {
    fn ack(cmd: &'static str, result: Result<(), String>) -> Self {
        match result {
            Ok(()) => ServerMessage::Ack { cmd, ok: true, reason: None },
            Err(reason) => ServerMessage::Ack { cmd, ok: false, reason: Some(reason) },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

type Reply = Sender<ServerMessage>;

#[derive(Default)]
struct SnapshotSlot {
    seq: u64,
    frame: Option<StateFrame>,
}

struct Shared {
    stop: AtomicBool,
    operator_taken: AtomicBool,
    snapshot: Mutex<SnapshotSlot>,
    records: Mutex<Vec<TrialRecord>>,
}

/// Control-thread state for console-driven sessions.
struct ConsoleSession {
    ctl: ControlLoop,
    idle_source: InputSource,
    idle_mode: CueingMode,
    plan: TrialPlan,
    timing: TrialTiming,
    next_trial: usize,
    active: Option<TrialRun>,
    /// Finished records not yet handed to the shared list.
    done: Vec<TrialRecord>,
}

impl ConsoleSession {
    fn handle(&mut self, cmd: &Command) -> Result<(), String> {
        match cmd {
            Command::Kill => self.ctl.kill_latch().trigger(),
            Command::Arm => self.event(KillEvent::Arm, KillState::Armed)?,
            Command::Engage => self.event(KillEvent::Engage, KillState::Engaged)?,
            Command::Release => self.event(KillEvent::Release, KillState::Armed)?,
            Command::Rearm => self.event(KillEvent::Rearm, KillState::Disarmed)?,
            Command::SetGain { gain } => {
                if !gain.is_finite() {
                    return Err("gain must be finite".into());
                }
                let applied = self.ctl.set_gain(*gain);
                if applied != *gain {
                    return Err(format!("gain clamped to {applied}"));
                }
            }
            Command::StartTrial => {
                if self.active.is_some() {
                    return Err("trial already active".into());
                }
                if self.ctl.safety_state() != KillState::Engaged {
                    return Err(format!("kill switch is {}, must be ENGAGED", self.ctl.safety_state().as_str()));
                }
                let Some(&condition) = self.plan.order.get(self.next_trial) else {
                    return Err("plan complete".into());
                };
                // keep only this trial's ticks for the lean measurement
                self.ctl.take_log();
                self.ctl.settle_head();
                self.active = Some(TrialRun::start(self.next_trial, condition, &self.timing, self.ctl.dt(), self.ctl.now()));
                self.next_trial += 1;
            }
            Command::Rate { ratings } => {
                ratings.validate().map_err(|e| e.to_string())?;
                match self.active.as_mut() {
                    Some(run) if run.phase() == TrialPhase::Rating => {
                        let log = self.ctl.take_log();
                        let rec = run.finish(Some(*ratings), &log).map_err(|e| e.to_string())?;
                        self.active = None;
                        return self.store(rec);
                    }
                    _ => return Err("no trial awaiting ratings".into()),
                }
            }
        }
        Ok(())
    }

    fn event(&mut self, ev: KillEvent, expect: KillState) -> Result<(), String> {
        // commands are idempotent: already being in the target state is fine
        self.ctl.handle_event(ev);
        if self.ctl.safety_state() == expect {
            Ok(())
        } else {
            Err(format!("{ev:?} not allowed in state {}", self.ctl.safety_state().as_str()))
        }
    }

    fn store(&mut self, rec: TrialRecord) -> Result<(), String> {
        self.done.push(rec);
        Ok(())
    }

    fn tick(&mut self) -> Result<(), SessionError> {
        let now = self.ctl.now();
        let mut trial_input = None;
        if let Some(run) = &self.active {
            trial_input = run.next_input(now);
        }
        match trial_input {
            Some((mode, sample)) => {
                self.ctl.set_mode(mode);
                let res = self.ctl.tick(&sample, true);
                let run = self.active.as_mut().expect("active trial");
                if res.is_err() || self.ctl.safety_state() != KillState::Engaged {
                    run.cancel(now);
                    let log = self.ctl.take_log();
                    let rec = run.finish(None, &log)?;
                    self.active = None;
                    let _ = self.store(rec);
                    res?;
                } else {
                    run.after_tick(now);
                }
                if self.active.as_ref().is_some_and(|r| r.phase() == TrialPhase::Rating) {
                    self.ctl.set_mode(self.idle_mode);
                }
            }
            None => {
                self.ctl.set_mode(if self.active.is_some() { CueingMode::None } else { self.idle_mode });
                let (sample, live) = self.idle_source.sample(now);
                self.ctl.tick(&sample, live)?;
                if self.active.is_none() && self.ctl.log().len() > IDLE_LOG_CAP {
                    self.ctl.take_log();
                }
            }
        }
        Ok(())
    }

    fn frame(&self) -> StateFrame {
        let head = self.ctl.head();
        let q = head.orientation.quaternion();
        let force = self.ctl.safety().last_output();
        let stats = self.ctl.stats();
        StateFrame {
            t: self.ctl.now(),
            force: [force.x, force.y, force.z],
            head: HeadFrame { pos: [head.position.x, head.position.y, head.position.z], quat: [q.i, q.j, q.k, q.w] },
            safety: self.ctl.safety_state().as_str(),
            trial: TrialFrame {
                index: self.active.as_ref().map(|r| r.index()),
                phase: self.active.as_ref().map_or("idle", |r| r.phase().as_str()),
                condition: self.active.as_ref().map(|r| r.condition()),
                completed: self.next_trial - usize::from(self.active.is_some()),
                planned: self.plan.len(),
            },
            gain: self.ctl.gain(),
            max_gain: self.ctl.max_gain(),
            tick: TickFrame { mean_us: stats.mean_compute_us(), max_us: stats.max_compute_us, overruns: stats.overruns },
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServiceOptions {
    pub reps: usize,
    pub seed: u64,
}

impl Default for ServiceOptions {
    fn default() -> Self {
        Self { reps: 10, seed: 0 }
    }
}

/// Running console service. Dropping it stops all threads.
pub struct ServiceHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    latch: KillLatch,
    threads: Vec<JoinHandle<()>>,
    _telemetry: Option<UdpReceiver>,
}

impl ServiceHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn kill_latch(&self) -> KillLatch {
        self.latch.clone()
    }

    pub fn records(&self) -> Vec<TrialRecord> {
        self.shared.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn latest_frame(&self) -> Option<StateFrame> {
        self.shared.snapshot.lock().unwrap_or_else(|e| e.into_inner()).frame
    }

    /// Blocks until the service stops.
    pub fn wait(mut self) {
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for h in self.threads.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

/// Starts the control loop and the WebSocket listener on `bind`.
pub fn serve(cfg: &SessionConfig, bind: SocketAddr, opts: ServiceOptions) -> Result<ServiceHandle, SessionError> {
    let mut ctl = ControlLoop::new(cfg)?;
    ctl.set_pacing(super::Pacing::RealTime);
    let latch = ctl.kill_latch();

    let mut telemetry = None;
    let (idle_source, idle_mode) = if cfg.source == SourceKind::LiveUdp {
        let mailbox = Mailbox::new();
        let map = cfg.telemetry.channel_map().map_err(|e| SessionError::Config(e.to_string()))?;
        let addr = SocketAddr::from(([0, 0, 0, 0], cfg.telemetry.port));
        telemetry = Some(UdpReceiver::spawn(addr, map, mailbox.clone(), Instant::now())?);
        (InputSource::Live(LiveInput::new(mailbox, cfg.telemetry.staleness_timeout_s)), cfg.cueing.mode)
    } else {
        (InputSource::Zero, CueingMode::None)
    };

    let session = ConsoleSession {
        ctl,
        idle_source,
        idle_mode,
        plan: plan_trials(&Condition::ALL, opts.reps, opts.seed)?,
        timing: TrialTiming { pattern: cfg.stimulus, ..Default::default() },
        next_trial: 0,
        active: None,
        done: Vec::new(),
    };

    let listener = TcpListener::bind(bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        stop: AtomicBool::new(false),
        operator_taken: AtomicBool::new(false),
        snapshot: Mutex::new(SnapshotSlot::default()),
        records: Mutex::new(Vec::new()),
    });
    let (cmd_tx, cmd_rx) = bounded::<(Command, Reply)>(COMMAND_QUEUE_DEPTH);

    let decimation = (cfg.tick_rate_hz / cfg.snapshot_rate_hz).round().max(1.0) as u64;
    let control = {
        let shared = Arc::clone(&shared);
        thread::Builder::new().name("control".into()).spawn(move || control_thread(session, cmd_rx, shared, decimation))?
    };
    let hello = HelloInfo {
        force_limit: cfg.safety.force_limit_n,
        max_gain: cfg.max_gain(),
        tick_rate: cfg.tick_rate_hz,
        state_rate: cfg.snapshot_rate_hz,
    };
    let acceptor = {
        let shared = Arc::clone(&shared);
        let latch = latch.clone();
        thread::Builder::new().name("console-accept".into()).spawn(move || accept_thread(listener, shared, cmd_tx, latch, hello))?
    };
    log::info!("console service listening on ws://{addr}");
    Ok(ServiceHandle { addr, shared, latch, threads: vec![control, acceptor], _telemetry: telemetry })
}

fn control_thread(mut session: ConsoleSession, cmds: Receiver<(Command, Reply)>, shared: Arc<Shared>, decimation: u64) {
    let period = Duration::from_secs_f64(session.ctl.dt());
    let mut deadline = Instant::now();
    while !shared.stop.load(Ordering::Relaxed) {
        while let Ok((cmd, reply)) = cmds.try_recv() {
            let res = session.handle(&cmd);
            let _ = reply.send(ServerMessage::ack(cmd.name(), res));
        }
        if let Err(e) = session.tick() {
            log::error!("control loop: {e}");
        }
        if !session.done.is_empty() {
            shared.records.lock().unwrap_or_else(|e| e.into_inner()).append(&mut session.done);
        }
        if session.ctl.ticks().is_multiple_of(decimation) {
            let mut slot = shared.snapshot.lock().unwrap_or_else(|e| e.into_inner());
            slot.seq += 1;
            slot.frame = Some(session.frame());
        }
        deadline += period;
        let now = Instant::now();
        if now < deadline {
            thread::sleep(deadline - now);
        } else {
            session.ctl.count_overrun();
            if now - deadline > period * 100 {
                // far behind (debugger, suspended host): resynchronize
                deadline = now;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct HelloInfo {
    force_limit: f64,
    max_gain: f64,
    tick_rate: f64,
    state_rate: f64,
}

fn accept_thread(listener: TcpListener, shared: Arc<Shared>, cmds: Sender<(Command, Reply)>, latch: KillLatch, hello: HelloInfo) {
    let mut clients = Vec::new();
    while !shared.stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = Arc::clone(&shared);
                let cmds = cmds.clone();
                let latch = latch.clone();
                let spawn = thread::Builder::new().name(format!("console-{peer}")).spawn(move || {
                    if let Err(e) = client_thread(stream, &shared, &cmds, &latch, hello) {
                        log::debug!("client {peer}: {e}");
                    }
                });
                match spawn {
                    Ok(h) => clients.push(h),
                    Err(e) => log::warn!("cannot spawn client thread: {e}"),
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => log::warn!("accept: {e}"),
        }
        clients.retain(|h| !h.is_finished());
    }
    for h in clients {
        let _ = h.join();
    }
}

struct OperatorGuard<'a>(&'a AtomicBool);

impl Drop for OperatorGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

fn client_thread(
    stream: TcpStream,
    shared: &Shared,
    cmds: &Sender<(Command, Reply)>,
    latch: &KillLatch,
    hello: HelloInfo,
) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::Io(io::ErrorKind::WouldBlock.into()),
    })?;
    ws.get_mut().set_read_timeout(Some(CLIENT_POLL))?;

    let is_operator = shared.operator_taken.compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst).is_ok();
    let _guard = is_operator.then(|| OperatorGuard(&shared.operator_taken));
    let role = if is_operator { Role::Operator } else { Role::Spectator };
    send(
        &mut ws,
        &ServerMessage::Hello {
            role,
            scales: RatingScale::ALL.to_vec(),
            force_limit: hello.force_limit,
            max_gain: hello.max_gain,
            tick_rate: hello.tick_rate,
            state_rate: hello.state_rate,
        },
    )?;

    let (reply_tx, reply_rx) = bounded::<ServerMessage>(COMMAND_QUEUE_DEPTH);
    let mut last_seq = 0;
    while !shared.stop.load(Ordering::Relaxed) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let reply = match parse_client_message(text.as_str()) {
                    // kill bypasses the queue and is honored from any client
                    Ok(Command::Kill) => {
                        latch.trigger();
                        Some(ServerMessage::ack("kill", Ok(())))
                    }
                    Ok(cmd) if role == Role::Spectator => {
                        Some(ServerMessage::ack(cmd.name(), Err("spectator clients are read-only".into())))
                    }
                    Ok(cmd) => {
                        let name = cmd.name();
                        match cmds.try_send((cmd, reply_tx.clone())) {
                            Ok(()) => None,
                            Err(TrySendError::Full(_)) => Some(ServerMessage::ack(name, Err("command queue full".into()))),
                            Err(TrySendError::Disconnected(_)) => return Ok(()),
                        }
                    }
                    Err(reason) => Some(ServerMessage::Ack { cmd: "unknown", ok: false, reason: Some(reason) }),
                };
                if let Some(r) = reply {
                    send(&mut ws, &r)?;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        while let Ok(msg) = reply_rx.try_recv() {
            send(&mut ws, &msg)?;
        }
        let frame = {
            let slot = shared.snapshot.lock().unwrap_or_else(|e| e.into_inner());
            (slot.seq != last_seq).then(|| {
                last_seq = slot.seq;
                slot.frame
            })
        };
        if let Some(Some(frame)) = frame {
            send(&mut ws, &ServerMessage::State(frame))?;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    Ok(())
}

fn send(ws: &mut WebSocket<TcpStream>, msg: &ServerMessage) -> Result<(), tungstenite::Error> {
    ws.send(Message::text(msg.to_json()))
}
