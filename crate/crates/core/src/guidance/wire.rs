//! Binary guidance protocol over any reliable byte stream.
//!
//! Request and response frames: `"SGDG"`, u32 version, u32 metadata length,
//! UTF-8 `key=value` metadata lines, then little-endian f32 tensors in planar
//! row-major layout, in the order listed by the `tensors` key. Errors travel
//! as `"SGDE"`, u32 length, UTF-8 message.
//!
//! The `rendered` tensor of a request already carries the noise for level `t`.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::{GuidanceError, GuidanceProvider, GuidanceRequest, GuidanceResponse};
use crate::geometry::{CameraView, Intrinsics, Pose};
use crate::lidar::DepthMap;
use crate::pixels::Image;

pub const FRAME_MAGIC: &[u8; 4] = b"SGDG";
pub const ERROR_MAGIC: &[u8; 4] = b"SGDE";
pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_METADATA: u32 = 1 << 20;
const MAX_TENSOR_FLOATS: usize = 1 << 28;

const REQUEST_TENSORS: [(&str, usize); 6] =
    [("rendered", 3), ("ref_prev", 3), ("ref_next", 3), ("depth_target", 1), ("depth_prev", 1), ("depth_next", 1)];
const RESPONSE_TENSORS: [(&str, usize); 1] = [("guidance", 3)];

/// A decoded frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Frame {
    Request(GuidanceRequest),
    Response { request_id: u64, response: GuidanceResponse },
    Error(String),
}

fn protocol(msg: impl Into<String>) -> GuidanceError {
    GuidanceError::Protocol(msg.into())
}

fn manifest(tensors: &[(&str, usize)]) -> String {
    tensors.iter().map(|(n, c)| format!("{n}:{c}")).collect::<Vec<_>>().join(",")
}

fn push_planar(out: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn frame(meta: &BTreeMap<&str, String>, payload: &[u8]) -> Vec<u8> {
    let text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    let mut out = Vec::with_capacity(12 + text.len() + payload.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(payload);
    out
}

fn view_to_text(v: &CameraView) -> String {
    let k = &v.intrinsics;
    let q = v.pose.rotation.quaternion();
    let t = v.pose.translation;
    [k.fx, k.fy, k.cx, k.cy, k.width as f64, k.height as f64, q.w, q.i, q.j, q.k, t.x, t.y, t.z]
        .iter()
        .map(|x| format!("{x:e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn view_from_text(s: &str) -> Result<CameraView, GuidanceError> {
    let v: Vec<f64> = s.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(|e| protocol(format!("view: {e}")))?;
    if v.len() != 13 {
        return Err(protocol("view needs 13 numbers"));
    }
    let k = Intrinsics::new(v[0], v[1], v[2], v[3], v[4] as usize, v[5] as usize).map_err(|e| protocol(e.to_string()))?;
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[7], v[8], v[9]));
    CameraView::new(k, Pose::new(rot, Vector3::new(v[10], v[11], v[12]))).map_err(|e| protocol(e.to_string()))
}

pub fn encode_request(req: &GuidanceRequest) -> Vec<u8> {
    let (w, h) = req.dims();
    let mut meta = BTreeMap::new();
    meta.insert("request_id", req.request_id.to_string());
    meta.insert("width", w.to_string());
    meta.insert("height", h.to_string());
    meta.insert("strength", format!("{:e}", req.strength));
    meta.insert("t", req.t.to_string());
    meta.insert("t_max", req.t_max.to_string());
    meta.insert("seed", req.seed.to_string());
    meta.insert("depth_mask_rows", req.depth_target.top_mask_rows().to_string());
    meta.insert("tensors", manifest(&REQUEST_TENSORS));
    if let Some(v) = &req.view {
        meta.insert("view", view_to_text(v));
    }
    let mut payload = Vec::new();
    for img in [&req.rendered, &req.ref_prev, &req.ref_next] {
        push_planar(&mut payload, img.to_planar());
    }
    for d in [&req.depth_target, &req.depth_prev, &req.depth_next] {
        push_planar(&mut payload, d.values_or_zero().iter().copied());
    }
    frame(&meta, &payload)
}

pub fn encode_response(request_id: u64, resp: &GuidanceResponse) -> Vec<u8> {
    let (w, h) = resp.guidance.dims();
    let mut meta = BTreeMap::new();
    meta.insert("request_id", request_id.to_string());
    meta.insert("width", w.to_string());
    meta.insert("height", h.to_string());
    meta.insert("provider_id", resp.provider_id.replace('\n', " "));
    meta.insert("t", resp.noise_level_used.to_string());
    meta.insert("tensors", manifest(&RESPONSE_TENSORS));
    let mut payload = Vec::new();
    push_planar(&mut payload, resp.guidance.to_planar());
    frame(&meta, &payload)
}

pub fn encode_error(message: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + message.len());
    out.extend_from_slice(ERROR_MAGIC);
    out.extend_from_slice(&(message.len() as u32).to_le_bytes());
    out.extend_from_slice(message.as_bytes());
    out
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), GuidanceError> {
    r.read_exact(buf).map_err(io_error)
}

fn io_error(e: io::Error) -> GuidanceError {
    match e.kind() {
        io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => GuidanceError::ProviderTimeout(DEFAULT_TIMEOUT.as_secs_f64()),
        io::ErrorKind::UnexpectedEof => protocol("stream ended inside a frame"),
        _ => GuidanceError::ProviderUnavailable(e.to_string()),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, GuidanceError> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn parse_meta(text: &str) -> Result<BTreeMap<String, String>, GuidanceError> {
    let mut meta = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| protocol(format!("metadata line without '=': {line:?}")))?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(meta)
}

fn get<T: std::str::FromStr>(meta: &BTreeMap<String, String>, key: &str) -> Result<T, GuidanceError> {
    meta.get(key)
        .ok_or_else(|| protocol(format!("missing metadata key {key:?}")))?
        .parse()
        .map_err(|_| protocol(format!("bad value for {key:?}")))
}

fn parse_manifest(s: &str) -> Result<Vec<(String, usize)>, GuidanceError> {
    s.split(',')
        .map(|item| {
            let (n, c) = item.split_once(':').ok_or_else(|| protocol(format!("bad tensor entry {item:?}")))?;
            let c: usize = c.parse().map_err(|_| protocol(format!("bad channel count in {item:?}")))?;
            Ok((n.to_string(), c))
        })
        .collect()
}

/// Reads one frame from `r`.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame, GuidanceError> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic)?;
    if &magic == ERROR_MAGIC {
        let n = read_u32(r)?;
        if n > MAX_METADATA {
            return Err(protocol("error message too long"));
        }
        let mut msg = vec![0u8; n as usize];
        read_exact_or(r, &mut msg)?;
        return Ok(Frame::Error(String::from_utf8_lossy(&msg).into_owned()));
    }
    if &magic != FRAME_MAGIC {
        return Err(protocol(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r)?;
    if version != PROTOCOL_VERSION {
        return Err(protocol(format!("unsupported protocol version {version}")));
    }
    let n = read_u32(r)?;
    if n > MAX_METADATA {
        return Err(protocol("metadata too long"));
    }
    let mut text = vec![0u8; n as usize];
    read_exact_or(r, &mut text)?;
    let meta = parse_meta(std::str::from_utf8(&text).map_err(|_| protocol("metadata is not UTF-8"))?)?;
    let w: usize = get(&meta, "width")?;
    let h: usize = get(&meta, "height")?;
    let tensors = parse_manifest(meta.get("tensors").ok_or_else(|| protocol("missing tensors"))?)?;
    let floats: usize = tensors.iter().map(|(_, c)| c).sum::<usize>().saturating_mul(w).saturating_mul(h);
    if floats > MAX_TENSOR_FLOATS {
        return Err(protocol("tensor payload too large"));
    }
    let mut bytes = vec![0u8; floats * 4];
    read_exact_or(r, &mut bytes)?;
    let values: Vec<f64> =
        bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect();
    let names: Vec<(&str, usize)> = tensors.iter().map(|(n, c)| (n.as_str(), *c)).collect();
    let request_id: u64 = get(&meta, "request_id")?;
    let plane = w * h;
    if names == REQUEST_TENSORS {
        let img = |k: usize| Image::from_planar(w, h, &values[k * plane..(k + 3) * plane]);
        let mask: usize = get(&meta, "depth_mask_rows")?;
        let depth = |k: usize| DepthMap::from_values(w, h, values[k * plane..(k + 1) * plane].to_vec(), mask);
        let view = meta.get("view").map(|s| view_from_text(s)).transpose()?;
        Ok(Frame::Request(GuidanceRequest {
            request_id,
            rendered: img(0),
            ref_prev: img(3),
            ref_next: img(6),
            depth_target: depth(9),
            depth_prev: depth(10),
            depth_next: depth(11),
            strength: get(&meta, "strength")?,
            t: get(&meta, "t")?,
            t_max: get(&meta, "t_max")?,
            seed: get(&meta, "seed")?,
            view,
        }))
    } else if names == RESPONSE_TENSORS {
        Ok(Frame::Response {
            request_id,
            response: GuidanceResponse {
                guidance: Image::from_planar(w, h, &values),
                provider_id: meta.get("provider_id").cloned().unwrap_or_default(),
                noise_level_used: get(&meta, "t")?,
            },
        })
    } else {
        Err(protocol(format!("unexpected tensor manifest {names:?}")))
    }
}

/// Forwards requests to a guidance service over TCP, one connection per
/// request.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    pub address: String,
    pub timeout: Duration,
}

impl RemoteProvider {
    pub fn new(address: impl Into<String>) -> Self {
        Self { address: address.into(), timeout: DEFAULT_TIMEOUT }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn connect(&self) -> Result<TcpStream, GuidanceError> {
        let addrs: Vec<_> = self
            .address
            .to_socket_addrs()
            .map_err(|e| GuidanceError::ProviderUnavailable(format!("{}: {e}", self.address)))?
            .collect();
        let mut last = None;
        for a in addrs {
            match TcpStream::connect_timeout(&a, self.timeout) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
        }
        Err(match last {
            Some(e) if e.kind() == io::ErrorKind::TimedOut => GuidanceError::ProviderTimeout(self.timeout.as_secs_f64()),
            Some(e) => GuidanceError::ProviderUnavailable(format!("{}: {e}", self.address)),
            None => GuidanceError::ProviderUnavailable(format!("{}: no address", self.address)),
        })
    }

    /// Sends a request whose `rendered` field is already noised and returns
    /// the service response.
    pub fn round_trip(&self, req: &GuidanceRequest) -> Result<GuidanceResponse, GuidanceError> {
        let mut stream = self.connect()?;
        stream.set_read_timeout(Some(self.timeout)).map_err(io_error)?;
        stream.set_write_timeout(Some(self.timeout)).map_err(io_error)?;
        let timed = |e: GuidanceError| match e {
            GuidanceError::ProviderTimeout(_) => GuidanceError::ProviderTimeout(self.timeout.as_secs_f64()),
            other => other,
        };
        stream.write_all(&encode_request(req)).map_err(io_error).map_err(timed)?;
        stream.flush().map_err(io_error).map_err(timed)?;
        match read_frame(&mut stream).map_err(timed)? {
            Frame::Response { request_id, response } if request_id == req.request_id => Ok(response),
            Frame::Response { request_id, .. } => {
                Err(protocol(format!("response for request {request_id}, expected {}", req.request_id)))
            }
            Frame::Error(msg) => Err(GuidanceError::Remote(msg)),
            Frame::Request(_) => Err(protocol("service answered with a request frame")),
        }
    }
}

impl GuidanceProvider for RemoteProvider {
    fn id(&self) -> String {
        format!("remote:{}", self.address)
    }

    fn denoise(&self, noisy: &Image, t: u32, req: &GuidanceRequest) -> Result<Image, GuidanceError> {
        let mut sent = req.clone();
        sent.rendered = noisy.clone();
        sent.t = t;
        Ok(self.round_trip(&sent)?.guidance)
    }
}

/// Answers request frames on one connection until the peer closes it.
/// Malformed frames get an error frame. With `echo`, the guidance is the
/// received `rendered` tensor unchanged.
pub fn serve_connection(stream: &mut TcpStream, provider: &dyn GuidanceProvider, echo: bool) -> io::Result<()> {
    loop {
        let reply = match read_frame(stream) {
            Ok(Frame::Request(req)) => {
                let result = if echo {
                    Ok(req.rendered.clone())
                } else {
                    req.validate().and_then(|_| provider.denoise(&req.rendered, req.t, &req))
                };
                match result {
                    Ok(img) => encode_response(
                        req.request_id,
                        &GuidanceResponse {
                            guidance: if echo { img } else { img.clamped() },
                            provider_id: if echo { "echo".into() } else { provider.id() },
                            noise_level_used: req.t,
                        },
                    ),
                    Err(e) => encode_error(&e.to_string()),
                }
            }
            Ok(_) => encode_error("expected a request frame"),
            Err(GuidanceError::Protocol(m)) if m == "stream ended inside a frame" => return Ok(()),
            Err(GuidanceError::ProviderUnavailable(_)) | Err(GuidanceError::ProviderTimeout(_)) => return Ok(()),
            Err(e) => encode_error(&e.to_string()),
        };
        stream.write_all(&reply)?;
        stream.flush()?;
    }
}

/// Serves connections sequentially, forever (or until `max_connections`).
pub fn serve(listener: &TcpListener, provider: &dyn GuidanceProvider, echo: bool, max_connections: Option<usize>) -> io::Result<()> {
    let mut served = 0;
    for stream in listener.incoming() {
        let mut stream = stream?;
        if let Err(e) = serve_connection(&mut stream, provider, echo) {
            log::warn!("guidance connection ended: {e}");
        }
        served += 1;
        if max_connections.is_some_and(|m| served >= m) {
            break;
        }
    }
    Ok(())
}
