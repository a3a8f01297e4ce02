//! Client side of the out-of-process denoiser protocol.
//!
//! Every message is a 13-byte header followed by a JSON body and a binary
//! payload:
//!
//! ```text
//! u8 msg_type | u32 LE json_len | u64 LE payload_len | json | payload
//! ```
//!
//! Tensor payloads are row-major `(K, C, H, W)` little-endian `f32`.
//! A small reference server is included for loopback testing.

use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{validate_prediction, DenoiseRequest, Denoiser, DenoiserCapabilities};
use crate::clip_maps::PathKind;
use crate::error::{Error, Result};
use crate::latent::{LatentShape, LatentVideo};
use crate::schedule::DenoisePrediction;

pub const PROTOCOL_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 13;
pub const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Hello = 1,
    DenoiseReq = 2,
    DenoiseResp = 3,
    Error = 4,
    Bye = 5,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            1 => MsgType::Hello,
            2 => MsgType::DenoiseReq,
            3 => MsgType::DenoiseResp,
            4 => MsgType::Error,
            5 => MsgType::Bye,
            _ => return Err(Error::Protocol(format!("unknown message type {v}"))),
        })
    }
}

/// Upper bounds enforced while reading a frame, so a corrupt header cannot
/// trigger an unbounded allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLimits {
    pub max_json: u32,
    pub max_payload: u64,
}

impl Default for FrameLimits {
    fn default() -> Self {
        FrameLimits { max_json: 1 << 20, max_payload: 1 << 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub json: Value,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, json: Value) -> Self {
        Frame { msg_type, json, payload: Vec::new() }
    }

    pub fn with_payload(mut self, payload: Vec<u8>) -> Self {
        self.payload = payload;
        self
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        Frame::new(MsgType::Error, json!({ "code": code, "message": message.into() }))
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> Result<()> {
    let body = serde_json::to_vec(&frame.json).map_err(|e| Error::Protocol(e.to_string()))?;
    let json_len = u32::try_from(body.len()).map_err(|_| Error::Protocol("json body too large".into()))?;
    // One write per frame: split writes stall on Nagle + delayed ACK.
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + frame.payload.len());
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&json_len.to_le_bytes());
    out.extend_from_slice(&(frame.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&frame.payload);
    w.write_all(&out)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame<R: Read>(r: &mut R, limits: &FrameLimits) -> Result<Frame> {
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)?;
    let msg_type = MsgType::from_u8(header[0])?;
    let json_len = u32::from_le_bytes(header[1..5].try_into().unwrap());
    let payload_len = u64::from_le_bytes(header[5..13].try_into().unwrap());
    if json_len > limits.max_json {
        return Err(Error::Protocol(format!("json length {json_len} exceeds limit {}", limits.max_json)));
    }
    if payload_len > limits.max_payload {
        return Err(Error::Protocol(format!("payload length {payload_len} exceeds limit {}", limits.max_payload)));
    }
    let mut body = vec![0u8; json_len as usize];
    r.read_exact(&mut body)?;
    let json = if body.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&body).map_err(|e| Error::Protocol(format!("malformed json body: {e}")))?
    };
    let mut payload = vec![0u8; payload_len as usize];
    r.read_exact(&mut payload)?;
    Ok(Frame { msg_type, json, payload })
}

pub fn encode_tensor(z: &LatentVideo) -> Vec<u8> {
    let mut out = Vec::with_capacity(z.data().len() * 4);
    for v in z.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(shape: LatentShape, bytes: &[u8]) -> Result<LatentVideo> {
    if bytes.len() != shape.len() * 4 {
        return Err(Error::Protocol(format!(
            "payload of {} bytes does not match shape {:?}",
            bytes.len(),
            shape.as_array()
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    LatentVideo::new(shape, data)
}

/// JSON body of a tensor-carrying message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: [usize; 4],
    pub dtype: String,
    pub timestep: usize,
    #[serde(default)]
    pub conditioning: String,
    #[serde(default)]
    pub clip_id: usize,
    #[serde(default)]
    pub path: Option<PathKind>,
}

impl TensorHeader {
    fn latent_shape(&self) -> Result<LatentShape> {
        if self.dtype != DTYPE {
            return Err(Error::Protocol(format!("unsupported dtype `{}`", self.dtype)));
        }
        let [k, c, h, w] = self.shape;
        LatentShape::new(k, c, h, w).map_err(|e| Error::Protocol(e.to_string()))
    }
}

/// What the server declares in its HELLO reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeCapabilities {
    pub protocol: u32,
    #[serde(default)]
    pub model: String,
    /// Largest accepted `(K, C, H, W)`; `None` means unbounded.
    #[serde(default)]
    pub max_shape: Option<[usize; 4]>,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default)]
    pub concurrent_safe: bool,
}

impl BridgeCapabilities {
    pub fn accepts(&self, shape: LatentShape) -> bool {
        match self.max_shape {
            Some(max) => shape.as_array().iter().zip(max).all(|(&s, m)| s <= m),
            None => true,
        }
    }
}

fn remote_error(frame: &Frame) -> String {
    let code = frame.json.get("code").and_then(Value::as_str).unwrap_or("UNKNOWN");
    let message = frame.json.get("message").and_then(Value::as_str).unwrap_or("");
    match frame.json.get("traceback").and_then(Value::as_str) {
        Some(tb) if !tb.is_empty() => format!("remote {code}: {message}\n{tb}"),
        _ => format!("remote {code}: {message}"),
    }
}

/// Sends HELLO and parses the server's reply.
pub fn handshake<S: Read + Write>(stream: &mut S, limits: &FrameLimits) -> Result<BridgeCapabilities> {
    write_frame(stream, &Frame::new(MsgType::Hello, json!({ "protocol": PROTOCOL_VERSION, "client": "glcd" })))?;
    let reply = read_frame(stream, limits)?;
    match reply.msg_type {
        MsgType::Hello => {
            let caps: BridgeCapabilities = serde_json::from_value(reply.json)
                .map_err(|e| Error::Protocol(format!("malformed HELLO reply: {e}")))?;
            if caps.protocol != PROTOCOL_VERSION {
                return Err(Error::Protocol(format!(
                    "server speaks protocol {}, client speaks {PROTOCOL_VERSION}",
                    caps.protocol
                )));
            }
            Ok(caps)
        }
        MsgType::Error => Err(Error::Protocol(remote_error(&reply))),
        other => Err(Error::Protocol(format!("expected HELLO, got {other:?}"))),
    }
}

/// A byte stream the client can own: anything readable and writable.
pub trait Transport: Read + Write + Send {}
impl<T: Read + Write + Send> Transport for T {}

/// Stdio pipes of a spawned server process.
pub struct ChildTransport {
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ChildTransport {
    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ChildTransport { child, stdin, stdout })
    }
}

impl Read for ChildTransport {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.stdout.read(buf)
    }
}

impl Write for ChildTransport {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.stdin.write(buf)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.stdin.flush()
    }
}

impl Drop for ChildTransport {
    fn drop(&mut self) {
        let _ = self.child.wait();
    }
}

/// Denoiser backed by a remote server. Requests on one connection are
/// serialized; the connection is closed with BYE on drop.
pub struct BridgeDenoiser {
    stream: Mutex<Option<Box<dyn Transport>>>,
    caps: BridgeCapabilities,
    limits: FrameLimits,
}

impl BridgeDenoiser {
    pub fn connect<S: Transport + 'static>(mut stream: S, limits: FrameLimits) -> Result<Self> {
        let caps = handshake(&mut stream, &limits)?;
        Ok(BridgeDenoiser { stream: Mutex::new(Some(Box::new(stream))), caps, limits })
    }

    pub fn connect_tcp(addr: &str, timeout: Option<Duration>) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(timeout)?;
        stream.set_nodelay(true)?;
        BridgeDenoiser::connect(stream, FrameLimits::default())
    }

    pub fn spawn(program: &str, args: &[String]) -> Result<Self> {
        BridgeDenoiser::connect(ChildTransport::spawn(program, args)?, FrameLimits::default())
    }

    pub fn bridge_capabilities(&self) -> &BridgeCapabilities {
        &self.caps
    }

    /// Sends BYE and drops the connection. Later calls fail.
    pub fn close(&self) -> Result<()> {
        let mut guard = self.stream.lock().map_err(|_| Error::Protocol("connection lock poisoned".into()))?;
        if let Some(mut s) = guard.take() {
            write_frame(&mut s, &Frame::new(MsgType::Bye, Value::Null))?;
        }
        Ok(())
    }

    fn exchange(&self, req: &DenoiseRequest) -> Result<Frame> {
        let header = TensorHeader {
            shape: req.clip.shape().as_array(),
            dtype: DTYPE.to_string(),
            timestep: req.t,
            conditioning: req.conditioning.to_string(),
            clip_id: req.clip_id,
            path: Some(req.path),
        };
        let body = serde_json::to_value(&header).map_err(|e| Error::Protocol(e.to_string()))?;
        let frame = Frame::new(MsgType::DenoiseReq, body).with_payload(encode_tensor(&req.clip));
        let mut guard = self.stream.lock().map_err(|_| Error::Protocol("connection lock poisoned".into()))?;
        let stream = guard.as_mut().ok_or_else(|| Error::Protocol("connection closed".into()))?;
        let result = write_frame(stream, &frame).and_then(|_| read_frame(stream, &self.limits));
        if result.is_err() {
            // Frame sync is lost; never reuse this connection.
            guard.take();
        }
        result
    }
}

impl Drop for BridgeDenoiser {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

impl Denoiser for BridgeDenoiser {
    fn name(&self) -> &str {
        "bridge"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        // One connection serializes requests, so concurrent calls gain nothing.
        DenoiserCapabilities {
            concurrent_safe: false,
            deterministic: self.caps.deterministic,
            exposes_attention: false,
        }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        if !self.caps.accepts(req.clip.shape()) {
            return Err(req.error(format!(
                "clip shape {:?} exceeds server limit {:?}",
                req.clip.shape().as_array(),
                self.caps.max_shape
            )));
        }
        let reply = self.exchange(req).map_err(|e| req.error(e.to_string()))?;
        match reply.msg_type {
            MsgType::DenoiseResp => {
                let header: TensorHeader = serde_json::from_value(reply.json)
                    .map_err(|e| req.error(format!("malformed response header: {e}")))?;
                let shape = header.latent_shape().map_err(|e| req.error(e.to_string()))?;
                let eps = decode_tensor(shape, &reply.payload).map_err(|e| req.error(e.to_string()))?;
                let pred = DenoisePrediction::new(eps, req.t);
                validate_prediction(req, &pred)?;
                Ok(pred)
            }
            MsgType::Error => Err(req.error(remote_error(&reply))),
            other => Err(req.error(format!("unexpected {other:?} reply"))),
        }
    }
}

/// Serves one connection with an in-process denoiser until BYE or EOF.
/// Returns the number of requests answered.
pub fn serve_connection<S: Read + Write>(
    stream: &mut S,
    denoiser: &dyn Denoiser,
    max_shape: Option<[usize; 4]>,
    limits: &FrameLimits,
) -> Result<usize> {
    let hello = read_frame(stream, limits)?;
    if hello.msg_type != MsgType::Hello {
        write_frame(stream, &Frame::error("PROTOCOL", "expected HELLO"))?;
        return Err(Error::Protocol(format!("expected HELLO, got {:?}", hello.msg_type)));
    }
    let version = hello.json.get("protocol").and_then(Value::as_u64);
    if version != Some(PROTOCOL_VERSION as u64) {
        write_frame(stream, &Frame::error("VERSION", format!("unsupported protocol {version:?}")))?;
        return Err(Error::Protocol(format!("client protocol {version:?} refused")));
    }
    let dc = denoiser.capabilities();
    let caps = BridgeCapabilities {
        protocol: PROTOCOL_VERSION,
        model: denoiser.name().to_string(),
        max_shape,
        deterministic: dc.deterministic,
        concurrent_safe: dc.concurrent_safe,
    };
    write_frame(stream, &Frame::new(MsgType::Hello, serde_json::to_value(&caps).unwrap()))?;

    let mut served = 0;
    loop {
        let frame = match read_frame(stream, limits) {
            Ok(f) => f,
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(served),
            Err(e) => {
                let _ = write_frame(stream, &Frame::error("MALFORMED", e.to_string()));
                return Err(e);
            }
        };
        match frame.msg_type {
            MsgType::Bye => return Ok(served),
            MsgType::DenoiseReq => {
                let reply = answer(&frame, denoiser, &caps);
                write_frame(stream, &reply)?;
                served += 1;
            }
            other => {
                write_frame(stream, &Frame::error("PROTOCOL", format!("unexpected {other:?}")))?;
                return Err(Error::Protocol(format!("unexpected {other:?} from client")));
            }
        }
    }
}

fn answer(frame: &Frame, denoiser: &dyn Denoiser, caps: &BridgeCapabilities) -> Frame {
    let header: TensorHeader = match serde_json::from_value(frame.json.clone()) {
        Ok(h) => h,
        Err(e) => return Frame::error("MALFORMED", e.to_string()),
    };
    let shape = match header.latent_shape() {
        Ok(s) => s,
        Err(e) => return Frame::error("MALFORMED", e.to_string()),
    };
    if !caps.accepts(shape) {
        return Frame::error("SHAPE", format!("shape {:?} exceeds {:?}", shape.as_array(), caps.max_shape));
    }
    let clip = match decode_tensor(shape, &frame.payload) {
        Ok(c) => c,
        Err(e) => return Frame::error("MALFORMED", e.to_string()),
    };
    let req = DenoiseRequest::new(clip, header.timestep)
        .with_clip_id(header.clip_id, header.path.unwrap_or(PathKind::Local))
        .with_conditioning(header.conditioning.as_str().into());
    match denoiser.denoise(&req) {
        Ok(pred) => {
            let out = TensorHeader { conditioning: String::new(), ..header };
            Frame::new(MsgType::DenoiseResp, serde_json::to_value(&out).unwrap()).with_payload(encode_tensor(&pred.eps))
        }
        Err(e) => Frame::error("REMOTE", e.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        let f = Frame::new(MsgType::DenoiseReq, json!({"a": 1})).with_payload(vec![9; 8]);
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(buf[0], 2);
        assert_eq!(u32::from_le_bytes(buf[1..5].try_into().unwrap()), 7);
        assert_eq!(u64::from_le_bytes(buf[5..13].try_into().unwrap()), 8);
        assert_eq!(buf.len(), HEADER_LEN + 7 + 8);
        assert_eq!(read_frame(&mut Cursor::new(buf), &FrameLimits::default()).unwrap(), f);
    }

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let shape = LatentShape::new(2, 1, 1, 3).unwrap();
        let vals = vec![0.0, -0.0, f32::MIN_POSITIVE, 1e-45, -3.25, f32::MAX];
        let z = LatentVideo::new(shape, vals.clone()).unwrap();
        let back = decode_tensor(shape, &encode_tensor(&z)).unwrap();
        for (a, b) in back.data().iter().zip(&vals) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(decode_tensor(shape, &[0u8; 5]).is_err());
    }

    #[test]
    fn limits_and_bad_type_rejected() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::new(MsgType::Hello, json!({})).with_payload(vec![0; 64])).unwrap();
        let tight = FrameLimits { max_json: 1 << 10, max_payload: 16 };
        assert!(matches!(read_frame(&mut Cursor::new(buf.clone()), &tight), Err(Error::Protocol(_))));
        buf[0] = 77;
        assert!(matches!(read_frame(&mut Cursor::new(buf), &FrameLimits::default()), Err(Error::Protocol(_))));
    }

    #[test]
    fn truncated_frame_is_io_error() {
        let mut buf = Vec::new();
        write_frame(&mut buf, &Frame::new(MsgType::Bye, Value::Null).with_payload(vec![1; 10])).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_frame(&mut Cursor::new(buf), &FrameLimits::default()), Err(Error::Io(_))));
    }
}
