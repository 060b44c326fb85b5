//! Live acceleration input over UDP.
//!
//! Datagrams use the X-Plane style `DATA` layout: a 5-byte `DATA\0` header
//! followed by 36-byte records, each a little-endian `u32` index and eight
//! little-endian `f32` values. Which record carries accelerations depends on
//! the simulator version, so it is always configured through [`ChannelMap`].

use std::io;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stimulus::AccelerationSample;
use crate::Vec3;

pub const HEADER: [u8; 5] = *b"DATA\0";
pub const RECORD_LEN: usize = 36;
pub const VALUES_PER_RECORD: usize = 8;
pub const DEFAULT_PORT: u16 = 49005;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PacketError {
    #[error("not a DATA packet")]
    NotDataPacket,
    #[error("malformed packet: truncated record at byte offset {offset}")]
    Malformed { offset: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct DataRecord {
    pub index: u32,
    pub values: [f32; VALUES_PER_RECORD],
}

// Bitwise equality so NaN payloads compare equal to themselves.
impl PartialEq for DataRecord {
    fn eq(&self, other: &Self) -> bool {
        self.index == other.index && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DataPacket {
    pub records: Vec<DataRecord>,
}

impl DataPacket {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER.len() + self.records.len() * RECORD_LEN);
        out.extend_from_slice(&HEADER);
        for r in &self.records {
            out.extend_from_slice(&r.index.to_le_bytes());
            for v in &r.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Total over arbitrary input: returns a packet or a typed error, never panics.
/// Record indices are not filtered.
pub fn parse_packet(bytes: &[u8]) -> Result<DataPacket, PacketError> {
    let Some(payload) = bytes.strip_prefix(&HEADER) else {
        return Err(PacketError::NotDataPacket);
    };
    let mut chunks = payload.chunks_exact(RECORD_LEN);
    let records = chunks
        .by_ref()
        .map(|rec| {
            let word = |i: usize| [rec[i], rec[i + 1], rec[i + 2], rec[i + 3]];
            let mut values = [0f32; VALUES_PER_RECORD];
            for (k, v) in values.iter_mut().enumerate() {
                *v = f32::from_le_bytes(word(4 + 4 * k));
            }
            DataRecord { index: u32::from_le_bytes(word(0)), values }
        })
        .collect::<Vec<_>>();
    if !chunks.remainder().is_empty() {
        return Err(PacketError::Malformed { offset: HEADER.len() + records.len() * RECORD_LEN });
    }
    Ok(DataPacket { records })
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChannelMapError {
    #[error("slot {0} out of range 0..8")]
    SlotOutOfRange(u8),
    #[error("slots must be distinct")]
    DuplicateSlot,
    #[error("scale must be finite and nonzero")]
    BadScale,
}

/// Which record and which value slots carry the x/y/z acceleration.
///
/// The defaults are an example configuration only: X-Plane's g-load record
/// with normal/axial/side slots, converted from g. Check them against the
/// simulator's data output screen before trusting them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub record_index: u32,
    pub slots: [u8; 3],
    pub scale: f64,
}

impl Default for ChannelMap {
    fn default() -> Self {
        Self { record_index: 4, slots: [5, 6, 4], scale: 9.81 }
    }
}

impl ChannelMap {
    pub fn new(record_index: u32, slots: [u8; 3], scale: f64) -> Result<Self, ChannelMapError> {
        let m = Self { record_index, slots, scale };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ChannelMapError> {
        for &s in &self.slots {
            if s as usize >= VALUES_PER_RECORD {
                return Err(ChannelMapError::SlotOutOfRange(s));
            }
        }
        let [a, b, c] = self.slots;
        if a == b || b == c || a == c {
            return Err(ChannelMapError::DuplicateSlot);
        }
        if !self.scale.is_finite() || self.scale == 0.0 {
            return Err(ChannelMapError::BadScale);
        }
        Ok(())
    }
}

/// Maps the configured record to a sample stamped `now`. If several records
/// match, the last one wins. Returns `None` when no record matches or the
/// mapped values are not finite.
pub fn extract_sample(pkt: &DataPacket, map: &ChannelMap, now: f64) -> Option<AccelerationSample> {
    let rec = pkt.records.iter().rev().find(|r| r.index == map.record_index)?;
    let ch = |i: usize| f64::from(rec.values[map.slots[i] as usize]) * map.scale;
    let accel = Vec3::new(ch(0), ch(1), ch(2));
    crate::is_finite_vec(&accel).then_some(AccelerationSample::new(now, accel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedState {
    NeverReceived,
    Live,
    Stale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedStatus {
    pub last_sample_time: Option<f64>,
    pub staleness_timeout: f64,
    pub state: FeedState,
}

impl FeedStatus {
    pub fn new(staleness_timeout: f64) -> Self {
        Self { last_sample_time: None, staleness_timeout, state: FeedState::NeverReceived }
    }

    /// Registers a sample. Only a sample newer than the last one refreshes the feed.
    pub fn record_sample(self, timestamp: f64) -> Self {
        match self.last_sample_time {
            Some(last) if timestamp <= last => self,
            _ => Self { last_sample_time: Some(timestamp), state: FeedState::Live, ..self },
        }
    }

    pub fn is_live(&self) -> bool {
        self.state == FeedState::Live
    }
}

pub fn check_staleness(status: FeedStatus, now: f64) -> FeedStatus {
    let state = match status.last_sample_time {
        None => FeedState::NeverReceived,
        Some(_) if status.state == FeedState::Stale => FeedState::Stale,
        Some(last) if now - last > status.staleness_timeout => FeedState::Stale,
        Some(_) => FeedState::Live,
    };
    FeedStatus { state, ..status }
}

/// Single-slot latest-sample mailbox. Writers replace, readers copy.
#[derive(Debug, Clone, Default)]
pub struct Mailbox {
    slot: Arc<Mutex<Option<AccelerationSample>>>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&self, sample: AccelerationSample) {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner()) = Some(sample);
    }

    pub fn latest(&self) -> Option<AccelerationSample> {
        *self.slot.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    pub port: u16,
    pub record_index: u32,
    pub slots: [u8; 3],
    pub scale: f64,
    pub staleness_timeout_s: f64,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        let map = ChannelMap::default();
        Self { port: DEFAULT_PORT, record_index: map.record_index, slots: map.slots, scale: map.scale, staleness_timeout_s: 0.2 }
    }
}

impl TelemetryConfig {
    pub fn channel_map(&self) -> Result<ChannelMap, ChannelMapError> {
        ChannelMap::new(self.record_index, self.slots, self.scale)
    }
}

/// Background UDP listener feeding a [`Mailbox`]. Samples are stamped with
/// seconds since `epoch`, the same clock the control loop uses.
pub struct UdpReceiver {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl UdpReceiver {
    pub fn spawn(bind: SocketAddr, map: ChannelMap, mailbox: Mailbox, epoch: Instant) -> io::Result<Self> {
        let socket = UdpSocket::bind(bind)?;
        socket.set_read_timeout(Some(Duration::from_millis(50)))?;
        let local_addr = socket.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stop_flag = Arc::clone(&stop);
        let handle = thread::Builder::new().name("telemetry-rx".into()).spawn(move || {
            let mut buf = [0u8; 2048];
            while !stop_flag.load(Ordering::Relaxed) {
                let n = match socket.recv(&mut buf) {
                    Ok(n) => n,
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => continue,
                    Err(e) => {
                        log::warn!("telemetry socket error: {e}");
                        continue;
                    }
                };
                let now = epoch.elapsed().as_secs_f64();
                match parse_packet(&buf[..n]) {
                    Ok(pkt) => {
                        if let Some(s) = extract_sample(&pkt, &map, now) {
                            mailbox.publish(s);
                        }
                    }
                    Err(e) => log::debug!("dropping datagram: {e}"),
                }
            }
        })?;
        Ok(Self { local_addr, stop, handle: Some(handle) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }
}

impl Drop for UdpReceiver {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
