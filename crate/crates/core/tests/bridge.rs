use std::net::{TcpListener, TcpStream};
use std::thread::JoinHandle;
use std::time::Duration;

use glcd_core::clip_maps::PathKind;
use glcd_core::config::PipelineConfig;
use glcd_core::denoiser::bridge::{
    read_frame, serve_connection, write_frame, BridgeDenoiser, Frame, FrameLimits, MsgType, TensorHeader, DTYPE,
    PROTOCOL_VERSION,
};
use glcd_core::denoiser::{DenoiseRequest, Denoiser, DenoiserCapabilities, ZeroDenoiser};
use glcd_core::pipeline::Pipeline;
use glcd_core::rng::{standard_normal, stream_rng, Stream};
use glcd_core::schedule::DenoisePrediction;
use glcd_core::{Error, LatentShape, LatentVideo, Result};
use serde_json::json;

/// Returns the clip itself as the noise prediction.
struct Echo;

impl Denoiser for Echo {
    fn name(&self) -> &str {
        "echo"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: false }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        Ok(DenoisePrediction::new(req.clip.clone(), req.t))
    }
}

struct Broken;

impl Denoiser for Broken {
    fn name(&self) -> &str {
        "broken"
    }

    fn capabilities(&self) -> DenoiserCapabilities {
        DenoiserCapabilities { concurrent_safe: true, deterministic: true, exposes_attention: false }
    }

    fn denoise(&self, req: &DenoiseRequest) -> Result<DenoisePrediction> {
        Err(req.error("out of memory"))
    }
}

/// Serves one connection on a loopback port; the handle yields the number
/// of requests answered.
fn serve<D: Denoiser + 'static>(denoiser: D, max_shape: Option<[usize; 4]>) -> (String, JoinHandle<Result<usize>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = std::thread::spawn(move || {
        let (mut stream, _) = listener.accept()?;
        serve_connection(&mut stream, &denoiser, max_shape, &FrameLimits::default())
    });
    (addr, handle)
}

fn connect(addr: &str) -> BridgeDenoiser {
    BridgeDenoiser::connect_tcp(addr, Some(Duration::from_secs(30))).unwrap()
}

fn clip(shape: [usize; 4], seed: u64) -> LatentVideo {
    let [k, c, h, w] = shape;
    standard_normal(LatentShape::new(k, c, h, w).unwrap(), &mut stream_rng(seed, Stream::Denoiser, 3))
}

#[test]
fn echo_is_bit_identical() {
    let (addr, server) = serve(Echo, None);
    let bridge = connect(&addr);
    assert_eq!(bridge.bridge_capabilities().model, "echo");
    assert_eq!(bridge.bridge_capabilities().protocol, PROTOCOL_VERSION);
    let z = clip([4, 3, 5, 2], 1);
    let req = DenoiseRequest::new(z.clone(), 321).with_clip_id(7, PathKind::Global);
    let eps = bridge.denoise(&req).unwrap().eps;
    assert!(eps.data().iter().zip(z.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    bridge.close().unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 1);
}

#[test]
fn pipeline_over_bridge_matches_in_process() {
    let mut cfg = PipelineConfig::default();
    cfg.video.frames = 12;
    cfg.video.clip_len = 4;
    cfg.video.channels = 2;
    cfg.video.height = 3;
    cfg.video.width = 4;
    cfg.schedule.steps = 5;
    cfg.run.seed = 11;
    let pipeline = Pipeline::new(cfg).unwrap();
    let local = pipeline.run(&ZeroDenoiser).unwrap();

    let (addr, server) = serve(ZeroDenoiser, None);
    let bridge = connect(&addr);
    let remote = pipeline.run(&bridge).unwrap();
    bridge.close().unwrap();
    let served = server.join().unwrap().unwrap();

    assert!(served > 0);
    assert_eq!(remote.reports.len(), local.reports.len());
    assert!(remote.z0.data().iter().zip(local.z0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn soak_keeps_frame_sync() {
    let (addr, server) = serve(Echo, None);
    let bridge = connect(&addr);
    for i in 0..1000u64 {
        let shape = [1 + (i % 5) as usize, 1 + (i % 3) as usize, 2, 1 + (i % 4) as usize];
        let z = clip(shape, i);
        let req = DenoiseRequest::new(z.clone(), (i % 1000) as usize).with_clip_id(i as usize, PathKind::Local);
        let eps = bridge.denoise(&req).unwrap().eps;
        assert_eq!(eps, z, "request {i}");
    }
    bridge.close().unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 1000);
}

#[test]
fn remote_failure_is_reported_and_connection_survives() {
    let (addr, server) = serve(Broken, None);
    let bridge = connect(&addr);
    let req = DenoiseRequest::new(clip([2, 1, 1, 1], 0), 10).with_clip_id(3, PathKind::Local);
    for _ in 0..2 {
        match bridge.denoise(&req) {
            Err(Error::Denoiser { clip_id, t, message }) => {
                assert_eq!((clip_id, t), (3, 10));
                assert!(message.contains("REMOTE") && message.contains("out of memory"), "{message}");
            }
            other => panic!("expected denoiser error, got {other:?}"),
        }
    }
    bridge.close().unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 2);
}

#[test]
fn oversized_clip_is_refused() {
    let (addr, server) = serve(Echo, Some([4, 4, 8, 8]));
    let bridge = connect(&addr);
    let err = bridge.denoise(&DenoiseRequest::new(clip([5, 1, 1, 1], 0), 1)).unwrap_err();
    assert!(err.to_string().contains("exceeds"), "{err}");
    bridge.close().unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 0);

    // A client that ignores the advertised limit gets SHAPE back.
    let (addr, server) = serve(Echo, Some([4, 4, 8, 8]));
    let mut raw = TcpStream::connect(&addr).unwrap();
    let limits = FrameLimits::default();
    write_frame(&mut raw, &Frame::new(MsgType::Hello, json!({ "protocol": PROTOCOL_VERSION }))).unwrap();
    assert_eq!(read_frame(&mut raw, &limits).unwrap().msg_type, MsgType::Hello);
    let header = TensorHeader {
        shape: [9, 1, 1, 1],
        dtype: DTYPE.into(),
        timestep: 1,
        conditioning: String::new(),
        clip_id: 0,
        path: None,
    };
    let req = Frame::new(MsgType::DenoiseReq, serde_json::to_value(&header).unwrap()).with_payload(vec![0; 36]);
    write_frame(&mut raw, &req).unwrap();
    let reply = read_frame(&mut raw, &limits).unwrap();
    assert_eq!(reply.msg_type, MsgType::Error);
    assert_eq!(reply.json["code"], "SHAPE");
    write_frame(&mut raw, &Frame::new(MsgType::Bye, serde_json::Value::Null)).unwrap();
    assert_eq!(server.join().unwrap().unwrap(), 1);
}

#[test]
fn version_mismatch_both_directions() {
    let (addr, server) = serve(Echo, None);
    let mut raw = TcpStream::connect(&addr).unwrap();
    write_frame(&mut raw, &Frame::new(MsgType::Hello, json!({ "protocol": PROTOCOL_VERSION + 1 }))).unwrap();
    let reply = read_frame(&mut raw, &FrameLimits::default()).unwrap();
    assert_eq!(reply.msg_type, MsgType::Error);
    assert_eq!(reply.json["code"], "VERSION");
    assert!(server.join().unwrap().is_err());

    // A server from the future is refused by the client.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let fake = std::thread::spawn(move || {
        let (mut s, _) = listener.accept().unwrap();
        read_frame(&mut s, &FrameLimits::default()).unwrap();
        write_frame(&mut s, &Frame::new(MsgType::Hello, json!({ "protocol": PROTOCOL_VERSION + 1 }))).unwrap();
    });
    match BridgeDenoiser::connect_tcp(&addr, Some(Duration::from_secs(5))) {
        Err(Error::Protocol(m)) => assert!(m.contains("protocol"), "{m}"),
        Err(other) => panic!("expected protocol error, got {other:?}"),
        Ok(_) => panic!("expected protocol error, got a connection"),
    }
    fake.join().unwrap();
}

#[test]
fn malformed_request_gets_malformed() {
    let (addr, server) = serve(Echo, None);
    let mut raw = TcpStream::connect(&addr).unwrap();
    let limits = FrameLimits::default();
    write_frame(&mut raw, &Frame::new(MsgType::Hello, json!({ "protocol": PROTOCOL_VERSION }))).unwrap();
    read_frame(&mut raw, &limits).unwrap();
    let bad = Frame::new(MsgType::DenoiseReq, json!({ "shape": [1, 1, 1, 1], "dtype": "f16", "timestep": 1 }))
        .with_payload(vec![0; 2]);
    write_frame(&mut raw, &bad).unwrap();
    let reply = read_frame(&mut raw, &limits).unwrap();
    assert_eq!(reply.json["code"], "MALFORMED");
    drop(raw);
    assert_eq!(server.join().unwrap().unwrap(), 1);
}
