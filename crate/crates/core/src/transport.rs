//! Framed point-to-point messaging between pipeline stages.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! "CFDT" | proto u8 = 1 | msg_type u8 | batch_id u32 | version u32 | count u16
//!   count × ( rank u8 | dims u32 × rank | precision u8 (4|8) | scalars )
//! crc32 u32   -- over every preceding byte of the frame
//! ```
//!
//! Frames are self-delimiting, so a byte stream of concatenated frames can be
//! split without any outer length prefix.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::time::Duration;

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const MAGIC: [u8; 4] = *b"CFDT";
pub const PROTOCOL_VERSION: u8 = 1;
/// Fixed header: magic, protocol, type, batch id, version, tensor count.
pub const HEADER_LEN: usize = 4 + 1 + 1 + 4 + 4 + 2;
pub const CRC_LEN: usize = 4;
/// Largest payload accepted for a single tensor.
pub const MAX_TENSOR_BYTES: u64 = 1 << 31;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("link closed")]
    TransportClosed,
    #[error("receive timed out")]
    Timeout,
    #[error("crc mismatch: frame says {expected:#010x}, computed {actual:#010x}")]
    CrcMismatch { expected: u32, actual: u32 },
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown message type {0}")]
    UnknownMsgType(u8),
    #[error("bad tensor precision {0}")]
    BadPrecision(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("payload too large: {0}")]
    Oversize(String),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TransportError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Activation = 1,
    Gradient = 2,
    Control = 3,
    Weights = 4,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => MsgType::Activation,
            2 => MsgType::Gradient,
            3 => MsgType::Control,
            4 => MsgType::Weights,
            other => return Err(TransportError::UnknownMsgType(other)),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl WireData {
    pub fn len(&self) -> usize {
        match self {
            WireData::F32(v) => v.len(),
            WireData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn precision(&self) -> u8 {
        match self {
            WireData::F32(_) => 4,
            WireData::F64(_) => 8,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            WireData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            WireData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireTensor {
    pub shape: Vec<u32>,
    pub data: WireData,
}

impl WireTensor {
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        let shape = t.shape().iter().map(|&d| d as u32).collect();
        let data = if T::BYTES == 4 {
            WireData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect())
        } else {
            WireData::F64(t.data().iter().map(|v| v.as_f64()).collect())
        };
        Self { shape, data }
    }

    /// Converts to a leaf tensor of precision `T`; precision must match.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.data.precision() as usize != T::BYTES {
            return Err(TransportError::Malformed(format!(
                "tensor precision {} but {} requested",
                self.data.precision(),
                T::BYTES
            )));
        }
        let shape: Vec<usize> = self.shape.iter().map(|&d| d as usize).collect();
        let data = self.data.to_f64().into_iter().map(T::lit).collect();
        Tensor::new(shape, data).map_err(|e| TransportError::Malformed(e.to_string()))
    }

    pub fn f64_vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len() as u32],
            data: WireData::F64(values),
        }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&d| d as u64).product()
    }

    fn payload_bytes(&self) -> u64 {
        self.numel() * self.data.precision() as u64
    }

    fn encoded_len(&self) -> usize {
        1 + 4 * self.shape.len() + 1 + self.payload_bytes() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipeMessage {
    pub msg_type: MsgType,
    pub batch_id: u32,
    pub version: u32,
    pub tensors: Vec<WireTensor>,
}

/// Control codes carried in the `batch_id` field of CONTROL frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ControlKind {
    Start = 0,
    Stop = 1,
    Partition = 2,
    Plan = 3,
    Metrics = 4,
}

impl ControlKind {
    pub fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => ControlKind::Start,
            1 => ControlKind::Stop,
            2 => ControlKind::Partition,
            3 => ControlKind::Plan,
            4 => ControlKind::Metrics,
            _ => return None,
        })
    }
}

impl PipeMessage {
    pub fn new(msg_type: MsgType, batch_id: u32, version: u32, tensors: Vec<WireTensor>) -> Self {
        Self {
            msg_type,
            batch_id,
            version,
            tensors,
        }
    }

    /// CONTROL frame; an optional document (e.g. JSON) travels as one byte
    /// per element of a rank-1 f64 tensor.
    pub fn control(kind: ControlKind, document: Option<&str>) -> Self {
        let tensors = document
            .map(|d| vec![WireTensor::f64_vector(d.bytes().map(f64::from).collect())])
            .unwrap_or_default();
        Self::new(MsgType::Control, kind as u32, 0, tensors)
    }

    pub fn control_kind(&self) -> Option<ControlKind> {
        (self.msg_type == MsgType::Control)
            .then(|| ControlKind::from_u32(self.batch_id))
            .flatten()
    }

    pub fn control_document(&self) -> Result<Option<String>> {
        let Some(t) = self.tensors.first() else {
            return Ok(None);
        };
        let bytes = t
            .data
            .to_f64()
            .into_iter()
            .map(|v| {
                if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                    Ok(v as u8)
                } else {
                    Err(TransportError::Malformed(format!("control byte {v}")))
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        String::from_utf8(bytes)
            .map(Some)
            .map_err(|e| TransportError::Malformed(e.to_string()))
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.tensors.iter().map(WireTensor::encoded_len).sum::<usize>() + CRC_LEN
    }
}

pub fn encode(m: &PipeMessage) -> Result<Vec<u8>> {
    if m.tensors.len() > u16::MAX as usize {
        return Err(TransportError::Oversize(format!("{} tensors", m.tensors.len())));
    }
    for t in &m.tensors {
        if t.shape.len() > u8::MAX as usize {
            return Err(TransportError::Oversize(format!("rank {}", t.shape.len())));
        }
        if t.payload_bytes() > MAX_TENSOR_BYTES {
            return Err(TransportError::Oversize(format!("{} payload bytes", t.payload_bytes())));
        }
        if t.numel() != t.data.len() as u64 {
            return Err(TransportError::Malformed(format!(
                "shape {:?} does not match {} scalars",
                t.shape,
                t.data.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(m.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(PROTOCOL_VERSION);
    out.push(m.msg_type as u8);
    out.extend_from_slice(&m.batch_id.to_le_bytes());
    out.extend_from_slice(&m.version.to_le_bytes());
    out.extend_from_slice(&(m.tensors.len() as u16).to_le_bytes());
    for t in &m.tensors {
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        out.push(t.data.precision());
        match &t.data {
            WireData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            WireData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Reads exactly `n` bytes, appending them to `frame`. EOF before the first
/// byte of a frame is `TransportClosed`; EOF inside a frame is `Truncated`.
fn take<R: Read>(r: &mut R, frame: &mut Vec<u8>, n: usize) -> Result<()> {
    let start = frame.len();
    frame.resize(start + n, 0);
    let mut filled = 0;
    while filled < n {
        match r.read(&mut frame[start + filled..]) {
            Ok(0) if start == 0 && filled == 0 => return Err(TransportError::TransportClosed),
            Ok(0) => return Err(TransportError::Truncated),
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                return Err(if start == 0 && filled == 0 {
                    TransportError::Timeout
                } else {
                    TransportError::Io(e)
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Reads one frame from a byte stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<PipeMessage> {
    let mut frame = Vec::with_capacity(64);
    take(r, &mut frame, HEADER_LEN)?;
    let magic: [u8; 4] = frame[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(TransportError::BadMagic(magic));
    }
    if frame[4] != PROTOCOL_VERSION {
        return Err(TransportError::UnsupportedVersion(frame[4]));
    }
    let msg_type = MsgType::from_u8(frame[5])?;
    let batch_id = u32_at(&frame, 6);
    let version = u32_at(&frame, 10);
    let count = u16::from_le_bytes([frame[14], frame[15]]) as usize;

    let mut layout = Vec::with_capacity(count);
    for _ in 0..count {
        let at = frame.len();
        take(r, &mut frame, 1)?;
        let rank = frame[at] as usize;
        let at = frame.len();
        take(r, &mut frame, 4 * rank + 1)?;
        let shape: Vec<u32> = (0..rank).map(|i| u32_at(&frame, at + 4 * i)).collect();
        let precision = frame[at + 4 * rank];
        if precision != 4 && precision != 8 {
            return Err(TransportError::BadPrecision(precision));
        }
        let numel: u64 = shape.iter().map(|&d| d as u64).product();
        let bytes = numel
            .checked_mul(precision as u64)
            .filter(|&b| b <= MAX_TENSOR_BYTES)
            .ok_or_else(|| TransportError::Oversize(format!("tensor {shape:?}")))?;
        let data_at = frame.len();
        take(r, &mut frame, bytes as usize)?;
        layout.push((shape, precision, data_at, bytes as usize));
    }
    let body_len = frame.len();
    take(r, &mut frame, CRC_LEN)?;
    let expected = u32_at(&frame, body_len);
    let actual = crc32fast::hash(&frame[..body_len]);
    if expected != actual {
        return Err(TransportError::CrcMismatch { expected, actual });
    }

    let tensors = layout
        .into_iter()
        .map(|(shape, precision, at, len)| {
            let raw = &frame[at..at + len];
            let data = if precision == 4 {
                WireData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )
            } else {
                WireData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )
            };
            WireTensor { shape, data }
        })
        .collect();
    Ok(PipeMessage {
        msg_type,
        batch_id,
        version,
        tensors,
    })
}

/// Decodes the first frame of `bytes`, returning it and its length.
pub fn decode_prefix(bytes: &[u8]) -> Result<(PipeMessage, usize)> {
    let mut cursor = io::Cursor::new(bytes);
    let m = match read_frame(&mut cursor) {
        Err(TransportError::TransportClosed) => return Err(TransportError::Truncated),
        other => other?,
    };
    Ok((m, cursor.position() as usize))
}

/// Decodes a buffer holding exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<PipeMessage> {
    let (m, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(TransportError::TrailingBytes(bytes.len() - used));
    }
    Ok(m)
}

/// Splits a buffer of concatenated frames.
pub fn decode_stream(mut bytes: &[u8]) -> Result<Vec<PipeMessage>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (m, used) = decode_prefix(bytes)?;
        out.push(m);
        bytes = &bytes[used..];
    }
    Ok(out)
}

/// One end of a bidirectional, ordered, reliable message link.
pub trait Link: Send {
    fn send(&mut self, m: &PipeMessage) -> Result<()>;

    fn recv(&mut self) -> Result<PipeMessage>;

    /// `None` blocks indefinitely.
    fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<()>;
}

/// In-process link over channels carrying encoded frames.
pub struct LoopbackLink {
    tx: Option<Sender<Vec<u8>>>,
    rx: Receiver<Vec<u8>>,
    timeout: Option<Duration>,
}

pub fn loopback_pair() -> (LoopbackLink, LoopbackLink) {
    let (a_tx, b_rx) = unbounded();
    let (b_tx, a_rx) = unbounded();
    (
        LoopbackLink {
            tx: Some(a_tx),
            rx: a_rx,
            timeout: None,
        },
        LoopbackLink {
            tx: Some(b_tx),
            rx: b_rx,
            timeout: None,
        },
    )
}

impl LoopbackLink {
    /// Pushes raw bytes as one frame (fault injection in tests).
    pub fn send_raw(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx
            .as_ref()
            .ok_or(TransportError::TransportClosed)?
            .send(frame)
            .map_err(|_| TransportError::TransportClosed)
    }

    /// Closes the sending half; the peer sees `TransportClosed` once drained.
    pub fn close(&mut self) {
        self.tx = None;
    }
}

impl Link for LoopbackLink {
    fn send(&mut self, m: &PipeMessage) -> Result<()> {
        let frame = encode(m)?;
        self.send_raw(frame)
    }

    fn recv(&mut self) -> Result<PipeMessage> {
        let frame = match self.timeout {
            None => self.rx.recv().map_err(|_| TransportError::TransportClosed)?,
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::TransportClosed,
            })?,
        };
        decode(&frame)
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<()> {
        self.timeout = timeout;
        Ok(())
    }
}

/// Link over a TCP stream.
pub struct StreamLink {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl StreamLink {
    pub fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            reader,
            writer: BufWriter::new(stream),
        })
    }

    /// Connects, retrying until `deadline` elapses (peers start in any order).
    pub fn connect(addr: &str, deadline: Duration) -> Result<Self> {
        let start = std::time::Instant::now();
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => return Self::new(s),
                Err(e) if start.elapsed() < deadline => {
                    log::debug!("connect {addr}: {e}; retrying");
                    std::thread::sleep(Duration::from_millis(50));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    pub fn accept(listener: &std::net::TcpListener) -> Result<Self> {
        let (s, _) = listener.accept()?;
        Self::new(s)
    }

    /// Accepts one peer, giving up with `Timeout` after `deadline`.
    pub fn accept_timeout(listener: &std::net::TcpListener, deadline: Duration) -> Result<Self> {
        let start = std::time::Instant::now();
        listener.set_nonblocking(true)?;
        let accepted = loop {
            match listener.accept() {
                Ok((s, _)) => break Ok(s),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if start.elapsed() >= deadline {
                        break Err(TransportError::Timeout);
                    }
                    std::thread::sleep(Duration::from_millis(20));
                }
                Err(e) => break Err(e.into()),
            }
        };
        listener.set_nonblocking(false)?;
        let s = accepted?;
        s.set_nonblocking(false)?;
        Self::new(s)
    }
}

impl Link for StreamLink {
    fn send(&mut self, m: &PipeMessage) -> Result<()> {
        let frame = encode(m)?;
        self.writer.write_all(&frame).map_err(map_write_err)?;
        self.writer.flush().map_err(map_write_err)
    }

    fn recv(&mut self) -> Result<PipeMessage> {
        read_frame(&mut self.reader)
    }

    fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<()> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }
}

fn map_write_err(e: io::Error) -> TransportError {
    match e.kind() {
        io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset | io::ErrorKind::ConnectionAborted => {
            TransportError::TransportClosed
        }
        _ => e.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act_2x2() -> PipeMessage {
        PipeMessage::new(
            MsgType::Activation,
            7,
            3,
            vec![WireTensor {
                shape: vec![2, 2],
                data: WireData::F32(vec![1.0, -2.0, 3.5, 0.25]),
            }],
        )
    }

    #[test]
    fn empty_control_frame_is_header_plus_crc() {
        let f = encode(&PipeMessage::control(ControlKind::Start, None)).unwrap();
        assert_eq!(f.len(), 20);
        assert_eq!(&f[..4], b"CFDT");
        assert_eq!(f[4], 1);
        assert_eq!(f[5], MsgType::Control as u8);
    }

    #[test]
    fn activation_frame_layout() {
        let f = encode(&act_2x2()).unwrap();
        assert_eq!(f.len(), HEADER_LEN + (1 + 2 * 4 + 1 + 16) + CRC_LEN);
        assert_eq!(u32_at(&f, 6), 7);
        assert_eq!(u32_at(&f, 10), 3);
        assert_eq!(&f[14..16], &[1, 0]);
        assert_eq!(f[16], 2);
        assert_eq!(u32_at(&f, 17), 2);
        assert_eq!(f[25], 4);
        assert_eq!(&f[26..30], &1.0f32.to_le_bytes());
        assert_eq!(decode(&f).unwrap(), act_2x2());
    }

    #[test]
    fn unknown_type_rejected() {
        let mut f = encode(&act_2x2()).unwrap();
        f[5] = 9;
        assert!(matches!(decode(&f), Err(TransportError::UnknownMsgType(9))));
    }

    #[test]
    fn crc_byte_corruption_detected() {
        let mut f = encode(&act_2x2()).unwrap();
        let n = f.len();
        f[n - 1] ^= 0x40;
        assert!(matches!(decode(&f), Err(TransportError::CrcMismatch { .. })));
    }

    #[test]
    fn control_document_round_trip() {
        let m = PipeMessage::control(ControlKind::Partition, Some(r#"{"ranges":[[0,2]]}"#));
        let d = decode(&encode(&m).unwrap()).unwrap();
        assert_eq!(d.control_kind(), Some(ControlKind::Partition));
        assert_eq!(d.control_document().unwrap().as_deref(), Some(r#"{"ranges":[[0,2]]}"#));
    }

    #[test]
    fn loopback_send_recv_and_close() {
        let (mut a, mut b) = loopback_pair();
        a.send(&act_2x2()).unwrap();
        assert_eq!(b.recv().unwrap(), act_2x2());
        drop(a);
        assert!(matches!(b.recv(), Err(TransportError::TransportClosed)));
    }

    #[test]
    fn loopback_timeout() {
        let (_a, mut b) = loopback_pair();
        b.set_timeout(Some(Duration::from_millis(10))).unwrap();
        assert!(matches!(b.recv(), Err(TransportError::Timeout)));
    }

    #[test]
    fn loopback_surfaces_corruption() {
        let (mut a, mut b) = loopback_pair();
        let mut f = encode(&act_2x2()).unwrap();
        f[28] ^= 1;
        a.send_raw(f).unwrap();
        assert!(matches!(b.recv(), Err(TransportError::CrcMismatch { .. })));
        a.send(&act_2x2()).unwrap();
        assert_eq!(b.recv().unwrap(), act_2x2());
    }

    #[test]
    fn truncated_and_trailing() {
        let f = encode(&act_2x2()).unwrap();
        assert!(matches!(decode(&f[..f.len() - 1]), Err(TransportError::Truncated)));
        let mut g = f.clone();
        g.push(0);
        assert!(matches!(decode(&g), Err(TransportError::TrailingBytes(1))));
    }

    #[test]
    fn oversize_rejected_before_allocation() {
        let mut f = encode(&act_2x2()).unwrap();
        // dims 2×2 → 65535×65535 f32 = 16 GiB
        f[17..21].copy_from_slice(&65535u32.to_le_bytes());
        f[21..25].copy_from_slice(&65535u32.to_le_bytes());
        assert!(matches!(decode(&f), Err(TransportError::Oversize(_))));
    }

    #[test]
    fn tcp_stream_round_trip_and_fifo() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let server = std::thread::spawn(move || {
            let mut link = StreamLink::accept(&listener).unwrap();
            let mut got = vec![];
            for _ in 0..3 {
                got.push(link.recv().unwrap());
            }
            link.send(&PipeMessage::control(ControlKind::Stop, None)).unwrap();
            got
        });
        let mut c = StreamLink::connect(&addr, Duration::from_secs(5)).unwrap();
        let mut sent = vec![];
        for i in 0..3 {
            let mut m = act_2x2();
            m.batch_id = i;
            c.send(&m).unwrap();
            sent.push(m);
        }
        assert_eq!(c.recv().unwrap().control_kind(), Some(ControlKind::Stop));
        assert_eq!(server.join().unwrap(), sent);
        assert!(matches!(c.recv(), Err(TransportError::TransportClosed)));
    }
}
