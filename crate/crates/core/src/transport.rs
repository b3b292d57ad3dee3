//! UDP multicast publish/subscribe with single-datagram framing, fragment
//! reassembly for large payloads, and indexed channel logs with seek and
//! variable-speed playback.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, UdpSocket};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use log::{debug, warn};
use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use socket2::{Domain, Protocol, Socket, Type};
use thiserror::Error;

use crate::camera::ImageFrame;
use crate::geometry::Pose;

pub const WIRE_MAGIC: u32 = 0x4E54_424D;
pub const WIRE_VERSION: u8 = 1;
pub const MAX_CHANNEL_LEN: usize = 63;
/// Largest payload carried by one datagram.
pub const MAX_PAYLOAD: usize = 60 * 1024;
pub const LOG_MAGIC: &[u8; 8] = b"NAVLOG1\n";
pub const INDEX_MAGIC: &[u8; 4] = b"IDX1";
/// One index entry per this many logged messages.
pub const INDEX_STRIDE: usize = 100;
/// Fixed bytes of a wire frame besides the channel name and payload.
pub const FRAME_OVERHEAD: usize = 4 + 1 + 1 + 8 + 8 + 2 + 2 + 4;
pub const POSE_PAYLOAD_LEN: usize = 8 + 3 * 8 + 4 * 8;
const RECV_POLL: Duration = Duration::from_millis(20);
const TRAILER_LEN: usize = 8 + 4;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("payload of {len} bytes exceeds the {max}-byte datagram limit")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("invalid channel name {0:?}: must be 1-63 ASCII bytes")]
    InvalidChannel(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("{path}: corrupt log at byte {offset}: {message}")]
    Corrupt { path: String, offset: u64, message: String },
    #[error("log timestamps must not decrease: {t_us} after {last_us}")]
    NonMonotonic { t_us: i64, last_us: i64 },
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn validate_channel(channel: &str) -> Result<(), TransportError> {
    if channel.is_empty() || channel.len() > MAX_CHANNEL_LEN || !channel.is_ascii() {
        return Err(TransportError::InvalidChannel(channel.to_string()));
    }
    Ok(())
}

/// One logical message on a channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub channel: String,
    pub t_us: i64,
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// One encoded unit: a whole message or one fragment of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireFrame {
    pub channel: String,
    pub t_us: i64,
    pub seq: u64,
    pub fragment_index: u16,
    pub fragment_count: u16,
    pub payload: Vec<u8>,
}

impl WireFrame {
    pub fn whole(env: &MessageEnvelope) -> Self {
        Self {
            channel: env.channel.clone(),
            t_us: env.t_us,
            seq: env.seq,
            fragment_index: 0,
            fragment_count: 1,
            payload: env.payload.clone(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_OVERHEAD + self.channel.len() + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, TransportError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), TransportError> {
        validate_channel(&self.channel)?;
        if self.fragment_count == 0 || self.fragment_index >= self.fragment_count {
            return Err(TransportError::Malformed(format!(
                "fragment {} of {}",
                self.fragment_index, self.fragment_count
            )));
        }
        let len = u32::try_from(self.payload.len())
            .map_err(|_| TransportError::PayloadTooLarge { len: self.payload.len(), max: u32::MAX as usize })?;
        out.extend_from_slice(&WIRE_MAGIC.to_le_bytes());
        out.push(WIRE_VERSION);
        out.push(self.channel.len() as u8);
        out.extend_from_slice(self.channel.as_bytes());
        out.extend_from_slice(&self.t_us.to_le_bytes());
        out.extend_from_slice(&self.seq.to_le_bytes());
        out.extend_from_slice(&self.fragment_index.to_le_bytes());
        out.extend_from_slice(&self.fragment_count.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }

    /// Decodes one frame from the front of `buf`, returning it and the
    /// number of bytes consumed.
    pub fn decode(buf: &[u8]) -> Result<(Self, usize), TransportError> {
        let mut r = Cursor { buf, pos: 0 };
        let magic = u32::from_le_bytes(r.take::<4>()?);
        if magic != WIRE_MAGIC {
            return Err(TransportError::Malformed(format!("bad magic {magic:#010x}")));
        }
        let version = r.take::<1>()?[0];
        if version != WIRE_VERSION {
            return Err(TransportError::Malformed(format!("unsupported version {version}")));
        }
        let clen = r.take::<1>()?[0] as usize;
        let channel = std::str::from_utf8(r.slice(clen)?)
            .map_err(|_| TransportError::Malformed("channel is not ASCII".into()))?
            .to_string();
        validate_channel(&channel).map_err(|_| TransportError::Malformed(format!("channel {channel:?}")))?;
        let t_us = i64::from_le_bytes(r.take::<8>()?);
        let seq = u64::from_le_bytes(r.take::<8>()?);
        let fragment_index = u16::from_le_bytes(r.take::<2>()?);
        let fragment_count = u16::from_le_bytes(r.take::<2>()?);
        if fragment_count == 0 || fragment_index >= fragment_count {
            return Err(TransportError::Malformed(format!("fragment {fragment_index} of {fragment_count}")));
        }
        let len = u32::from_le_bytes(r.take::<4>()?) as usize;
        let payload = r.slice(len)?.to_vec();
        Ok((
            Self {
                channel,
                t_us,
                seq,
                fragment_index,
                fragment_count,
                payload,
            },
            r.pos,
        ))
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn slice(&mut self, n: usize) -> Result<&[u8], TransportError> {
        if self.buf.len() - self.pos < n {
            return Err(TransportError::Malformed(format!(
                "truncated: need {n} bytes at {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], TransportError> {
        Ok(self.slice(N)?.try_into().expect("length checked"))
    }
}

pub fn encode_message(env: &MessageEnvelope) -> Result<Vec<u8>, TransportError> {
    WireFrame::whole(env).encode()
}

/// Decodes a frame that carries a whole message.
pub fn decode_message(buf: &[u8]) -> Result<MessageEnvelope, TransportError> {
    let (f, used) = WireFrame::decode(buf)?;
    if used != buf.len() {
        return Err(TransportError::Malformed(format!("{} trailing bytes", buf.len() - used)));
    }
    if f.fragment_count != 1 {
        return Err(TransportError::Malformed("fragmented frame".into()));
    }
    Ok(MessageEnvelope {
        channel: f.channel,
        t_us: f.t_us,
        seq: f.seq,
        payload: f.payload,
    })
}

/// Exact channel name, or a prefix followed by a trailing `*`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChannelPattern {
    Exact(String),
    Prefix(String),
}

impl ChannelPattern {
    pub fn parse(s: &str) -> Result<Self, TransportError> {
        if let Some(prefix) = s.strip_suffix('*') {
            if prefix.contains('*') || prefix.len() > MAX_CHANNEL_LEN || !prefix.is_ascii() {
                return Err(TransportError::InvalidChannel(s.to_string()));
            }
            Ok(Self::Prefix(prefix.to_string()))
        } else {
            if s.contains('*') {
                return Err(TransportError::InvalidChannel(s.to_string()));
            }
            validate_channel(s)?;
            Ok(Self::Exact(s.to_string()))
        }
    }

    pub fn matches(&self, channel: &str) -> bool {
        match self {
            Self::Exact(c) => c == channel,
            Self::Prefix(p) => channel.starts_with(p.as_str()),
        }
    }
}

pub fn matches_any(patterns: &[ChannelPattern], channel: &str) -> bool {
    patterns.iter().any(|p| p.matches(channel))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    /// Multicast group, or a unicast address for single-subscriber links.
    pub group: Ipv4Addr,
    pub port: u16,
    /// Local interface for sending and joining.
    pub interface: Ipv4Addr,
    pub ttl: u32,
    pub recv_buffer_bytes: usize,
}

impl Default for TransportConfig {
    fn default() -> Self {
        Self {
            group: Ipv4Addr::new(239, 255, 76, 67),
            port: 7667,
            interface: Ipv4Addr::LOCALHOST,
            ttl: 1,
            recv_buffer_bytes: 4 << 20,
        }
    }
}

impl TransportConfig {
    pub fn with_port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    fn dest(&self) -> SocketAddr {
        SocketAddr::V4(SocketAddrV4::new(self.group, self.port))
    }
}

/// Sender side. Sequence numbers are per channel and shared by all threads
/// publishing through the same instance.
pub struct Publisher {
    socket: UdpSocket,
    dest: SocketAddr,
    seqs: Mutex<HashMap<String, u64>>,
}

impl Publisher {
    pub fn new(cfg: &TransportConfig) -> Result<Self, TransportError> {
        let s = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
        s.bind(&SocketAddr::V4(SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, 0)).into())?;
        if cfg.group.is_multicast() {
            s.set_multicast_if_v4(&cfg.interface)?;
            s.set_multicast_loop_v4(true)?;
            s.set_multicast_ttl_v4(cfg.ttl)?;
        }
        s.set_send_buffer_size(cfg.recv_buffer_bytes)?;
        Ok(Self {
            socket: s.into(),
            dest: cfg.dest(),
            seqs: Mutex::new(HashMap::new()),
        })
    }

    fn send_frames(&self, channel: &str, t_us: i64, payload: &[u8], chunk: usize) -> Result<u64, TransportError> {
        validate_channel(channel)?;
        let count = payload.len().div_ceil(chunk).max(1);
        let count = u16::try_from(count)
            .map_err(|_| TransportError::PayloadTooLarge { len: payload.len(), max: chunk * u16::MAX as usize })?;
        let mut seqs = self.seqs.lock().expect("sequence table");
        let slot = seqs.entry(channel.to_string()).or_insert(0);
        let seq = *slot;
        let mut buf = Vec::with_capacity(FRAME_OVERHEAD + channel.len() + chunk.min(payload.len()));
        for i in 0..count {
            let lo = i as usize * chunk;
            let hi = (lo + chunk).min(payload.len());
            buf.clear();
            WireFrame {
                channel: channel.to_string(),
                t_us,
                seq,
                fragment_index: i,
                fragment_count: count,
                payload: payload[lo.min(hi)..hi].to_vec(),
            }
            .encode_into(&mut buf)?;
            self.socket.send_to(&buf, self.dest)?;
        }
        *slot += 1;
        Ok(seq)
    }

    /// Sends one datagram and returns its sequence number.
    pub fn publish(&self, channel: &str, t_us: i64, payload: &[u8]) -> Result<u64, TransportError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(TransportError::PayloadTooLarge {
                len: payload.len(),
                max: MAX_PAYLOAD,
            });
        }
        self.send_frames(channel, t_us, payload, MAX_PAYLOAD)
    }

    /// Splits `payload` into datagram-sized fragments sharing one sequence
    /// number. Subscribers drop the message if any fragment is lost.
    pub fn publish_fragmented(&self, channel: &str, t_us: i64, payload: &[u8]) -> Result<u64, TransportError> {
        self.send_frames(channel, t_us, payload, MAX_PAYLOAD)
    }

    pub fn publish_envelope(&self, env: &MessageEnvelope) -> Result<u64, TransportError> {
        self.publish_fragmented(&env.channel, env.t_us, &env.payload)
    }
}

#[derive(Debug, Default)]
pub struct SubscriberStats {
    pub datagrams: AtomicU64,
    pub delivered: AtomicU64,
    pub malformed: AtomicU64,
    /// Messages discarded because a fragment never arrived.
    pub incomplete: AtomicU64,
}

struct Partial {
    seq: u64,
    t_us: i64,
    parts: Vec<Option<Vec<u8>>>,
    have: usize,
}

/// Reassembles fragments per channel. A newer sequence number on a channel
/// discards any unfinished older message.
#[derive(Default)]
pub struct Reassembler {
    pending: HashMap<String, Partial>,
    pub incomplete: u64,
}

impl Reassembler {
    pub fn push(&mut self, f: WireFrame) -> Option<MessageEnvelope> {
        if f.fragment_count == 1 {
            return Some(MessageEnvelope {
                channel: f.channel,
                t_us: f.t_us,
                seq: f.seq,
                payload: f.payload,
            });
        }
        let n = f.fragment_count as usize;
        let fresh = || Partial {
            seq: f.seq,
            t_us: f.t_us,
            parts: vec![None; n],
            have: 0,
        };
        let entry = match self.pending.get_mut(&f.channel) {
            Some(p) if p.seq == f.seq && p.parts.len() == n => p,
            Some(p) if f.seq < p.seq => return None,
            Some(p) => {
                *p = fresh();
                self.incomplete += 1;
                p
            }
            None => self.pending.entry(f.channel.clone()).or_insert_with(fresh),
        };
        let slot = &mut entry.parts[f.fragment_index as usize];
        if slot.is_none() {
            *slot = Some(f.payload);
            entry.have += 1;
        }
        if entry.have < n {
            return None;
        }
        let p = self.pending.remove(&f.channel).expect("pending entry");
        Some(MessageEnvelope {
            channel: f.channel,
            t_us: p.t_us,
            seq: p.seq,
            payload: p.parts.into_iter().flatten().flatten().collect(),
        })
    }
}

fn open_receiver(cfg: &TransportConfig) -> Result<UdpSocket, TransportError> {
    let s = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    s.set_reuse_address(true)?;
    #[cfg(unix)]
    s.set_reuse_port(true)?;
    if let Err(e) = s.set_recv_buffer_size(cfg.recv_buffer_bytes) {
        warn!("could not set receive buffer to {} bytes: {e}", cfg.recv_buffer_bytes);
    }
    s.bind(&cfg.dest().into())?;
    if cfg.group.is_multicast() {
        s.join_multicast_v4(&cfg.group, &cfg.interface)?;
    }
    s.set_read_timeout(Some(RECV_POLL))?;
    Ok(s.into())
}

/// Receiving side. Matching messages are handed to a callback on a
/// dedicated thread in arrival order; sequence gaps are left visible.
pub struct Subscriber {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    stats: Arc<SubscriberStats>,
}

impl Subscriber {
    /// The callback must return within one frame interval.
    pub fn spawn<F>(cfg: &TransportConfig, patterns: Vec<ChannelPattern>, mut callback: F) -> Result<Self, TransportError>
    where
        F: FnMut(MessageEnvelope) + Send + 'static,
    {
        let socket = open_receiver(cfg)?;
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(SubscriberStats::default());
        let (stop2, stats2) = (stop.clone(), stats.clone());
        let handle = std::thread::Builder::new()
            .name("subscriber".into())
            .spawn(move || {
                let mut buf = vec![0u8; 65536];
                let mut asm = Reassembler::default();
                while !stop2.load(Ordering::Relaxed) {
                    let n = match socket.recv(&mut buf) {
                        Ok(n) => n,
                        Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                            continue
                        }
                        Err(e) => {
                            warn!("subscriber receive failed: {e}");
                            break;
                        }
                    };
                    stats2.datagrams.fetch_add(1, Ordering::Relaxed);
                    let frame = match WireFrame::decode(&buf[..n]) {
                        Ok((f, used)) if used == n => f,
                        _ => {
                            stats2.malformed.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    };
                    if !matches_any(&patterns, &frame.channel) {
                        continue;
                    }
                    if let Some(env) = asm.push(frame) {
                        stats2.delivered.fetch_add(1, Ordering::Relaxed);
                        callback(env);
                    }
                    stats2.incomplete.store(asm.incomplete, Ordering::Relaxed);
                }
            })?;
        Ok(Self {
            stop,
            handle: Some(handle),
            stats,
        })
    }

    /// Subscription that forwards messages into a channel.
    pub fn channel(
        cfg: &TransportConfig,
        patterns: Vec<ChannelPattern>,
    ) -> Result<(Self, mpsc::Receiver<MessageEnvelope>), TransportError> {
        let (tx, rx) = mpsc::channel();
        let sub = Self::spawn(cfg, patterns, move |m| {
            let _ = tx.send(m);
        })?;
        Ok((sub, rx))
    }

    pub fn stats(&self) -> &SubscriberStats {
        &self.stats
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Subscriber {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Writes whole messages as back-to-back wire frames followed by an index
/// footer: entry count u32, `(t_us i64, offset u64)` per entry, footer
/// offset u64, `IDX1`.
pub struct LogWriter {
    out: BufWriter<File>,
    path: PathBuf,
    offset: u64,
    count: usize,
    last_t_us: Option<i64>,
    index: Vec<(i64, u64)>,
    buf: Vec<u8>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, TransportError> {
        let file = File::create(path).map_err(|source| TransportError::File {
            path: path.display().to_string(),
            source,
        })?;
        let mut out = BufWriter::new(file);
        out.write_all(LOG_MAGIC)?;
        Ok(Self {
            out,
            path: path.to_path_buf(),
            offset: LOG_MAGIC.len() as u64,
            count: 0,
            last_t_us: None,
            index: Vec::new(),
            buf: Vec::new(),
        })
    }

    pub fn append(&mut self, env: &MessageEnvelope) -> Result<(), TransportError> {
        if let Some(last) = self.last_t_us {
            if env.t_us < last {
                return Err(TransportError::NonMonotonic { t_us: env.t_us, last_us: last });
            }
        }
        self.buf.clear();
        WireFrame::whole(env).encode_into(&mut self.buf)?;
        if self.count.is_multiple_of(INDEX_STRIDE) {
            self.index.push((env.t_us, self.offset));
        }
        self.out.write_all(&self.buf)?;
        self.offset += self.buf.len() as u64;
        self.count += 1;
        self.last_t_us = Some(env.t_us);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn finish(mut self) -> Result<PathBuf, TransportError> {
        let footer = self.offset;
        self.out.write_all(&(self.index.len() as u32).to_le_bytes())?;
        for (t, off) in &self.index {
            self.out.write_all(&t.to_le_bytes())?;
            self.out.write_all(&off.to_le_bytes())?;
        }
        self.out.write_all(&footer.to_le_bytes())?;
        self.out.write_all(INDEX_MAGIC)?;
        self.out.flush()?;
        Ok(self.path)
    }
}

/// Read access to a finished log.
pub struct LogReader {
    path: PathBuf,
    data: Vec<u8>,
    /// End of the message region.
    end: usize,
    index: Vec<(i64, u64)>,
}

impl LogReader {
    pub fn open(path: &Path) -> Result<Self, TransportError> {
        let p = path.display().to_string();
        let mut data = Vec::new();
        File::open(path)
            .and_then(|f| BufReader::new(f).read_to_end(&mut data))
            .map_err(|source| TransportError::File { path: p.clone(), source })?;
        let corrupt = |offset: usize, message: &str| TransportError::Corrupt {
            path: p.clone(),
            offset: offset as u64,
            message: message.to_string(),
        };
        if data.len() < LOG_MAGIC.len() || &data[..LOG_MAGIC.len()] != LOG_MAGIC {
            return Err(corrupt(0, "missing log magic"));
        }
        let n = data.len();
        if n < LOG_MAGIC.len() + 4 + TRAILER_LEN || &data[n - 4..] != INDEX_MAGIC {
            return Err(corrupt(n, "missing index trailer"));
        }
        let footer = u64::from_le_bytes(data[n - TRAILER_LEN..n - 4].try_into().unwrap()) as usize;
        if footer < LOG_MAGIC.len() || footer + 4 > n - TRAILER_LEN {
            return Err(corrupt(n - TRAILER_LEN, "index offset out of range"));
        }
        let count = u32::from_le_bytes(data[footer..footer + 4].try_into().unwrap()) as usize;
        if footer + 4 + 16 * count != n - TRAILER_LEN {
            return Err(corrupt(footer, "index size does not match trailer"));
        }
        let mut index = Vec::with_capacity(count);
        for k in 0..count {
            let at = footer + 4 + 16 * k;
            let t = i64::from_le_bytes(data[at..at + 8].try_into().unwrap());
            let off = u64::from_le_bytes(data[at + 8..at + 16].try_into().unwrap());
            if (off as usize) < LOG_MAGIC.len() || off as usize >= footer {
                return Err(corrupt(at, "index entry points outside the message region"));
            }
            index.push((t, off));
        }
        let reader = Self {
            path: path.to_path_buf(),
            data,
            end: footer,
            index,
        };
        for &(t, off) in &reader.index {
            match reader.read_at(off as usize)? {
                Some((m, _)) if m.t_us == t => {}
                _ => return Err(corrupt(off as usize, "index entry is not a message boundary")),
            }
        }
        Ok(reader)
    }

    fn read_at(&self, offset: usize) -> Result<Option<(MessageEnvelope, usize)>, TransportError> {
        if offset >= self.end {
            return Ok(None);
        }
        let (f, used) = WireFrame::decode(&self.data[offset..self.end]).map_err(|e| TransportError::Corrupt {
            path: self.path.display().to_string(),
            offset: offset as u64,
            message: e.to_string(),
        })?;
        Ok(Some((
            MessageEnvelope {
                channel: f.channel,
                t_us: f.t_us,
                seq: f.seq,
                payload: f.payload,
            },
            offset + used,
        )))
    }

    pub fn index(&self) -> &[(i64, u64)] {
        &self.index
    }

    /// Messages starting at byte `offset`, which must be a message boundary.
    pub fn iter_from(&self, offset: u64) -> LogIter<'_> {
        LogIter {
            reader: self,
            offset: offset as usize,
            failed: false,
        }
    }

    pub fn iter(&self) -> LogIter<'_> {
        self.iter_from(LOG_MAGIC.len() as u64)
    }

    /// Offset of the first message with `t_us ≥ t`, found from the index.
    pub fn seek(&self, t_us: i64) -> Result<Option<u64>, TransportError> {
        let k = self.index.partition_point(|&(t, _)| t < t_us);
        let mut offset = if k == 0 {
            LOG_MAGIC.len()
        } else {
            self.index[k - 1].1 as usize
        };
        while let Some((m, next)) = self.read_at(offset)? {
            if m.t_us >= t_us {
                return Ok(Some(offset as u64));
            }
            offset = next;
        }
        Ok(None)
    }
}

pub struct LogIter<'a> {
    reader: &'a LogReader,
    offset: usize,
    failed: bool,
}

impl Iterator for LogIter<'_> {
    type Item = Result<(u64, MessageEnvelope), TransportError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        match self.reader.read_at(self.offset) {
            Ok(Some((m, next))) => {
                let at = self.offset as u64;
                self.offset = next;
                Some(Ok((at, m)))
            }
            Ok(None) => None,
            Err(e) => {
                self.failed = true;
                Some(Err(e))
            }
        }
    }
}

/// Copies matching messages from a subscription into a log until stopped.
pub struct Recorder {
    sub: Subscriber,
    worker: JoinHandle<Result<LogWriter, TransportError>>,
}

impl Recorder {
    pub fn start(cfg: &TransportConfig, patterns: Vec<ChannelPattern>, path: &Path) -> Result<Self, TransportError> {
        let mut writer = LogWriter::create(path)?;
        let (sub, rx) = Subscriber::channel(cfg, patterns)?;
        let worker = std::thread::Builder::new().name("recorder".into()).spawn(move || {
            for m in rx {
                writer.append(&m)?;
            }
            Ok(writer)
        })?;
        Ok(Self { sub, worker })
    }

    pub fn subscriber_stats(&self) -> &SubscriberStats {
        self.sub.stats()
    }

    /// Stops receiving, writes the index and returns the message count.
    pub fn finish(self) -> Result<usize, TransportError> {
        self.sub.stop();
        let writer = self
            .worker
            .join()
            .map_err(|_| TransportError::InvalidArgument("recorder thread panicked".into()))??;
        let n = writer.len();
        writer.finish()?;
        Ok(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaybackStats {
    pub delivered: usize,
    pub first_t_us: Option<i64>,
    pub last_t_us: Option<i64>,
    pub wall: Duration,
}

/// Replays a log from the first message with `t_us ≥ seek_t_us`, pacing
/// deliveries so wall-clock gaps equal recorded gaps divided by `speed`.
pub fn playback<F>(path: &Path, speed: f64, seek_t_us: Option<i64>, mut sink: F) -> Result<PlaybackStats, TransportError>
where
    F: FnMut(&MessageEnvelope) -> Result<(), TransportError>,
{
    if !(speed > 0.0) || !speed.is_finite() {
        return Err(TransportError::InvalidArgument(format!("playback speed must be positive, got {speed}")));
    }
    let reader = LogReader::open(path)?;
    let start = match seek_t_us {
        Some(t) => reader.seek(t)?,
        None => Some(LOG_MAGIC.len() as u64),
    };
    let mut stats = PlaybackStats {
        delivered: 0,
        first_t_us: None,
        last_t_us: None,
        wall: Duration::ZERO,
    };
    let Some(start) = start else {
        return Ok(stats);
    };
    let t0 = Instant::now();
    for item in reader.iter_from(start) {
        let (_, m) = item?;
        let first = *stats.first_t_us.get_or_insert(m.t_us);
        let due = Duration::from_secs_f64((m.t_us - first).max(0) as f64 * 1e-6 / speed);
        let now = t0.elapsed();
        if due > now {
            std::thread::sleep(due - now);
        }
        sink(&m)?;
        stats.delivered += 1;
        stats.last_t_us = Some(m.t_us);
    }
    stats.wall = t0.elapsed();
    debug!("played {} messages in {:?}", stats.delivered, stats.wall);
    Ok(stats)
}

/// Writes a whole log from in-memory messages.
pub fn write_log(path: &Path, messages: &[MessageEnvelope]) -> Result<(), TransportError> {
    let mut w = LogWriter::create(path)?;
    for m in messages {
        w.append(m)?;
    }
    w.finish()?;
    Ok(())
}

pub fn encode_pose(p: &Pose) -> Vec<u8> {
    let mut out = Vec::with_capacity(POSE_PAYLOAD_LEN);
    out.extend_from_slice(&p.t_us.to_le_bytes());
    for v in p.translation.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let q = p.rotation.quaternion();
    for v in [q.w, q.i, q.j, q.k] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_pose(buf: &[u8]) -> Result<Pose, TransportError> {
    if buf.len() != POSE_PAYLOAD_LEN {
        return Err(TransportError::Malformed(format!("pose payload of {} bytes", buf.len())));
    }
    let f = |k: usize| f64::from_le_bytes(buf[8 + 8 * k..16 + 8 * k].try_into().unwrap());
    let t_us = i64::from_le_bytes(buf[..8].try_into().unwrap());
    let q = Quaternion::new(f(3), f(4), f(5), f(6));
    if !(q.norm() > 0.0) {
        return Err(TransportError::Malformed("zero quaternion".into()));
    }
    Ok(Pose::new(t_us, UnitQuaternion::new_unchecked(q), Vector3::new(f(0), f(1), f(2))))
}

pub fn encode_image(frame: &ImageFrame) -> Result<Vec<u8>, TransportError> {
    let w = u16::try_from(frame.width).map_err(|_| TransportError::InvalidArgument("image too wide".into()))?;
    let h = u16::try_from(frame.height).map_err(|_| TransportError::InvalidArgument("image too tall".into()))?;
    let mut out = Vec::with_capacity(12 + frame.pixels.len());
    out.extend_from_slice(&w.to_le_bytes());
    out.extend_from_slice(&h.to_le_bytes());
    out.extend_from_slice(&frame.t_us.to_le_bytes());
    out.extend_from_slice(&frame.pixels);
    Ok(out)
}

pub fn decode_image(buf: &[u8], frame_id: u64) -> Result<ImageFrame, TransportError> {
    if buf.len() < 12 {
        return Err(TransportError::Malformed("image payload shorter than its header".into()));
    }
    let w = u16::from_le_bytes([buf[0], buf[1]]) as u32;
    let h = u16::from_le_bytes([buf[2], buf[3]]) as u32;
    let t_us = i64::from_le_bytes(buf[4..12].try_into().unwrap());
    let pixels = &buf[12..];
    if pixels.len() != (w * h) as usize {
        return Err(TransportError::Malformed(format!(
            "image {w}×{h} with {} pixel bytes",
            pixels.len()
        )));
    }
    Ok(ImageFrame {
        width: w,
        height: h,
        t_us,
        frame_id,
        pixels: pixels.to_vec(),
    })
}
