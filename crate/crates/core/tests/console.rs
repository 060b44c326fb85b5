//! Console service over a real WebSocket connection.

use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use kinhmd::session::service::{serve, ServiceHandle, ServiceOptions};
use kinhmd::session::{SessionConfig, TrialOutcome};
use kinhmd::StimulusPattern;
use serde_json::{json, Value};
use tungstenite::{Message, WebSocket};

type Client = WebSocket<TcpStream>;

fn start(cfg: &SessionConfig) -> ServiceHandle {
    serve(cfg, SocketAddr::from(([127, 0, 0, 1], 0)), ServiceOptions { reps: 2, seed: 1 }).unwrap()
}

fn connect(addr: SocketAddr) -> (Client, Value) {
    let stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_millis(200))).unwrap();
    let (mut ws, _) = tungstenite::client(format!("ws://{addr}/"), stream).unwrap();
    let hello = next_where(&mut ws, |m| m["type"] == "hello");
    (ws, hello)
}

fn next_message(ws: &mut Client) -> Option<Value> {
    match ws.read() {
        Ok(Message::Text(t)) => Some(serde_json::from_str(t.as_str()).unwrap()),
        Ok(_) => None,
        Err(tungstenite::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => None,
        Err(e) => panic!("read: {e}"),
    }
}

fn next_where(ws: &mut Client, pred: impl Fn(&Value) -> bool) -> Value {
    let deadline = Instant::now() + Duration::from_secs(10);
    while Instant::now() < deadline {
        if let Some(m) = next_message(ws) {
            if pred(&m) {
                return m;
            }
        }
    }
    panic!("timed out waiting for message");
}

fn cmd(ws: &mut Client, body: Value) -> Value {
    let name = body["cmd"].as_str().unwrap().to_owned();
    let mut msg = body;
    msg["type"] = json!("cmd");
    ws.send(Message::text(msg.to_string())).unwrap();
    next_where(ws, |m| m["type"] == "ack" && m["cmd"] == name.as_str())
}

fn state(ws: &mut Client) -> Value {
    next_where(ws, |m| m["type"] == "state")
}

fn quick_config() -> SessionConfig {
    SessionConfig { stimulus: StimulusPattern::new(5.0, 0.2, 0.1).unwrap(), ..Default::default() }
}

#[test]
fn operator_session_flow() {
    let svc = start(&quick_config());
    let (mut op, hello) = connect(svc.local_addr());
    assert_eq!(hello["role"], "operator");
    assert_eq!(hello["scales"].as_array().unwrap().len(), 3);
    let (mut spec, hello) = connect(svc.local_addr());
    assert_eq!(hello["role"], "spectator");

    let ack = cmd(&mut op, json!({"cmd": "start_trial"}));
    assert_eq!(ack["ok"], false);
    assert!(ack["reason"].as_str().unwrap().contains("ENGAGED"));

    assert_eq!(cmd(&mut op, json!({"cmd": "arm"}))["ok"], true);
    assert_eq!(cmd(&mut spec, json!({"cmd": "engage"}))["ok"], false);
    assert_eq!(cmd(&mut op, json!({"cmd": "engage"}))["ok"], true);
    assert_eq!(cmd(&mut op, json!({"cmd": "set_gain", "gain": 1.2}))["ok"], true);
    let s = next_where(&mut op, |m| m["type"] == "state" && m["gain"] == 1.2);
    assert_eq!(s["safety"], "ENGAGED");

    assert_eq!(cmd(&mut op, json!({"cmd": "rate", "ratings": {"relative_motion": 0, "acceleration": 1, "comfort": 0}}))["ok"], false);

    assert_eq!(cmd(&mut op, json!({"cmd": "start_trial"}))["ok"], true);
    let again = cmd(&mut op, json!({"cmd": "start_trial"}));
    assert_eq!(again["ok"], false);
    assert_eq!(again["reason"], "trial already active");

    // target 1.5 s + 1 s stimulus, then the trial waits for ratings
    let s = next_where(&mut op, |m| m["type"] == "state" && m["trial"]["phase"] == "rating");
    assert_eq!(s["trial"]["index"], 0);
    let bad = cmd(&mut op, json!({"cmd": "rate", "ratings": {"relative_motion": 9, "acceleration": 1, "comfort": 0}}));
    assert_eq!(bad["ok"], false);
    let ok = cmd(&mut op, json!({"cmd": "rate", "ratings": {"relative_motion": 1, "acceleration": 2, "comfort": -1}}));
    assert_eq!(ok["ok"], true, "{ok}");
    let recs = svc.records();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].outcome, TrialOutcome::Completed);
    assert_eq!(recs[0].ratings.unwrap().comfort, -1);

    // a spectator kill mid-trial cancels it and zeroes the force
    assert_eq!(cmd(&mut op, json!({"cmd": "start_trial"}))["ok"], true);
    next_where(&mut spec, |m| m["type"] == "state" && m["trial"]["phase"] == "stimulus");
    assert_eq!(cmd(&mut spec, json!({"cmd": "kill"}))["ok"], true);
    let s = next_where(&mut op, |m| m["type"] == "state" && m["safety"] == "KILLED");
    assert_eq!(s["force"], json!([0.0, 0.0, 0.0]));
    assert_eq!(s["trial"]["phase"], "idle");
    let recs = svc.records();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].outcome, TrialOutcome::Cancelled);

    assert_eq!(cmd(&mut op, json!({"cmd": "engage"}))["ok"], false);
    assert_eq!(cmd(&mut op, json!({"cmd": "rearm"}))["ok"], true);
    assert_eq!(state(&mut op)["safety"], "DISARMED");
    svc.shutdown();
}

#[test]
fn state_rate_and_bad_messages() {
    let svc = start(&SessionConfig::default());
    let (mut ws, _) = connect(svc.local_addr());
    state(&mut ws);
    let t0 = Instant::now();
    let mut frames = Vec::new();
    while t0.elapsed() < Duration::from_secs(1) {
        if let Some(m) = next_message(&mut ws) {
            if m["type"] == "state" {
                frames.push(m["t"].as_f64().unwrap());
            }
        }
    }
    assert!((20..=40).contains(&frames.len()), "{} frames", frames.len());
    assert!(frames.windows(2).all(|w| w[1] > w[0]));

    ws.send(Message::text("{\"type\":\"cmd\",\"cmd\":\"explode\"}")).unwrap();
    let ack = next_where(&mut ws, |m| m["type"] == "ack");
    assert_eq!(ack["ok"], false);
    ws.send(Message::text("garbage")).unwrap();
    assert_eq!(next_where(&mut ws, |m| m["type"] == "ack")["ok"], false);
}

#[test]
fn operator_slot_frees_on_disconnect() {
    let svc = start(&SessionConfig::default());
    let (mut a, hello) = connect(svc.local_addr());
    assert_eq!(hello["role"], "operator");
    a.close(None).unwrap();
    let _ = a.flush();
    drop(a);
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let (_b, hello) = connect(svc.local_addr());
        if hello["role"] == "operator" {
            break;
        }
        assert!(Instant::now() < deadline, "operator slot never released");
        std::thread::sleep(Duration::from_millis(50));
    }
}
