//! Length-prefixed frame protocol for out-of-process predictors.
//!
//! A frame is a 4-byte little-endian length `n`, then `n` bytes of JSON
//! header, then a raw payload whose size the header determines:
//!
//! * `hello` request: `{"op":"hello","version":1}`, no payload; reply
//!   `{"ok":true,"version":1}`.
//! * `predict` request: `{"op":"predict","t":..,"cond":..,"shape":[c,h,w],
//!   "payload_bytes":..,"want_attention":..}` followed by `payload_bytes`
//!   bytes of little-endian `f32`.
//! * `predict` reply: `{"ok":..,"shape":[c,h,w]|null,"attention_shape":[1,h,w]|null,
//!   "error":..|null}` followed by the ε floats, then the attention floats.
//!   Error replies carry no payload.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Condition, PredictorError, Result};
use crate::tensor::{Shape, Tensor};

pub const PROTOCOL_VERSION: u32 = 1;

/// Upper bound on a JSON header; anything larger is treated as garbage.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloRequest {
    pub op: String,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HelloResponse {
    pub ok: bool,
    pub version: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictRequestHeader {
    pub op: String,
    pub t: u64,
    pub cond: Option<String>,
    pub shape: [usize; 3],
    pub payload_bytes: u64,
    pub want_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictResponseHeader {
    pub ok: bool,
    pub shape: Option<[usize; 3]>,
    pub attention_shape: Option<[usize; 3]>,
    pub error: Option<String>,
}

pub fn f32s_to_bytes(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(PredictorError::Protocol(format!(
            "payload of {} bytes is not a whole number of f32",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_frame<H: Serialize>(header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| PredictorError::Protocol(e.to_string()))?;
    let mut out = Vec::with_capacity(4 + json.len() + payload.len());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn write_frame<W: Write + ?Sized, H: Serialize>(w: &mut W, header: &H, payload: &[u8]) -> Result<()> {
    w.write_all(&encode_frame(header, payload)?)?;
    w.flush()?;
    Ok(())
}

/// Reads one length-prefixed JSON header.
pub fn read_header<R: Read + ?Sized>(r: &mut R) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_HEADER_BYTES {
        return Err(PredictorError::Protocol(format!("header length {len} exceeds limit")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn read_payload<R: Read + ?Sized>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn parse_header<'a, H: Deserialize<'a>>(bytes: &'a [u8]) -> Result<H> {
    serde_json::from_slice(bytes).map_err(|e| PredictorError::Protocol(format!("bad header: {e}")))
}

pub fn hello_request() -> HelloRequest {
    HelloRequest {
        op: "hello".into(),
        version: PROTOCOL_VERSION,
    }
}

pub fn predict_request_header(x_t: &Tensor, t: usize, cond: &Condition, want_attention: bool) -> PredictRequestHeader {
    PredictRequestHeader {
        op: "predict".into(),
        t: t as u64,
        cond: cond.0.clone(),
        shape: x_t.shape().dims(),
        payload_bytes: 4 * x_t.len() as u64,
        want_attention,
    }
}

/// Full request frame bytes for a predict call.
pub fn encode_predict_request(x_t: &Tensor, t: usize, cond: &Condition, want_attention: bool) -> Result<Vec<u8>> {
    encode_frame(
        &predict_request_header(x_t, t, cond, want_attention),
        &f32s_to_bytes(x_t.data()),
    )
}

/// A decoded request, as a server sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerRequest {
    Hello {
        version: u32,
    },
    Predict {
        t: usize,
        cond: Condition,
        latent: Tensor,
        want_attention: bool,
    },
}

/// Reads one request. Content errors (bad JSON, payload size disagreeing with
/// the shape) consume the whole frame and come back as `Ok(Err(msg))` so the
/// caller can answer `ok:false` and keep the connection.
pub fn read_request<R: Read + ?Sized>(r: &mut R) -> Result<std::result::Result<ServerRequest, String>> {
    let header = read_header(r)?;
    let value: serde_json::Value = match serde_json::from_slice(&header) {
        Ok(v) => v,
        Err(e) => return Ok(Err(format!("malformed header: {e}"))),
    };
    match value.get("op").and_then(|v| v.as_str()) {
        Some("hello") => match serde_json::from_value::<HelloRequest>(value) {
            Ok(h) => Ok(Ok(ServerRequest::Hello { version: h.version })),
            Err(e) => Ok(Err(format!("malformed hello: {e}"))),
        },
        Some("predict") => {
            let Some(n) = value.get("payload_bytes").and_then(|v| v.as_u64()) else {
                return Ok(Err("predict header lacks payload_bytes".into()));
            };
            let payload = read_payload(r, n as usize)?;
            let h: PredictRequestHeader = match serde_json::from_value(value) {
                Ok(h) => h,
                Err(e) => return Ok(Err(format!("malformed predict header: {e}"))),
            };
            let shape = match Shape::from_dims(h.shape) {
                Ok(s) => s,
                Err(e) => return Ok(Err(e.to_string())),
            };
            if payload.len() != 4 * shape.len() {
                return Ok(Err(format!(
                    "payload has {} bytes but shape {shape} needs {}",
                    payload.len(),
                    4 * shape.len()
                )));
            }
            let latent = match Tensor::from_vec(shape, bytes_to_f32s(&payload)?) {
                Ok(t) => t,
                Err(e) => return Ok(Err(format!("payload: {e}"))),
            };
            Ok(Ok(ServerRequest::Predict {
                t: h.t as usize,
                cond: Condition(h.cond),
                latent,
                want_attention: h.want_attention,
            }))
        }
        Some(other) => Ok(Err(format!("unknown op {other:?}"))),
        None => Ok(Err("header lacks op".into())),
    }
}

pub fn write_hello_response<W: Write + ?Sized>(w: &mut W) -> Result<()> {
    write_frame(
        w,
        &HelloResponse {
            ok: true,
            version: PROTOCOL_VERSION,
        },
        &[],
    )
}

pub fn write_predict_response<W: Write + ?Sized>(w: &mut W, eps: &Tensor, attention: Option<&Tensor>) -> Result<()> {
    let header = PredictResponseHeader {
        ok: true,
        shape: Some(eps.shape().dims()),
        attention_shape: attention.map(|a| a.shape().dims()),
        error: None,
    };
    let mut payload = f32s_to_bytes(eps.data());
    if let Some(a) = attention {
        payload.extend(f32s_to_bytes(a.data()));
    }
    write_frame(w, &header, &payload)
}

pub fn write_error_response<W: Write + ?Sized>(w: &mut W, message: &str) -> Result<()> {
    write_frame(
        w,
        &PredictResponseHeader {
            ok: false,
            shape: None,
            attention_shape: None,
            error: Some(message.to_string()),
        },
        &[],
    )
}
