use std::io::{ErrorKind, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MVD1";
pub const PROTOCOL_VERSION: &str = "MVD1";
/// Frames larger than this are rejected before allocation.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Request = 1,
    Response = 2,
    Error = 3,
    Hello = 4,
}

impl MessageKind {
    pub fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            1 => Self::Request,
            2 => Self::Response,
            3 => Self::Error,
            4 => Self::Hello,
            _ => return None,
        })
    }
}

/// Raw frame: kind byte and payload, magic and length already checked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + self.payload.len());
        out.extend_from_slice(MAGIC);
        out.push(self.kind);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame(w: &mut dyn Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.to_bytes())?;
    w.flush()?;
    Ok(())
}

/// Reads until `buf` is full. Returns the number of bytes read, short only at
/// end of stream.
fn read_full(r: &mut dyn Read, buf: &mut [u8]) -> Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(n)
}

/// Next frame, or `None` on a clean end of stream between frames.
///
/// A stream ending inside a frame gives a "short payload" protocol error.
pub fn read_frame(r: &mut dyn Read) -> Result<Option<Frame>> {
    let mut head = [0u8; 9];
    let n = read_full(r, &mut head)?;
    if n == 0 {
        return Ok(None);
    }
    if n < head.len() {
        return Err(Error::Protocol(
            "short payload: stream ended inside a frame header".into(),
        ));
    }
    if &head[..4] != MAGIC {
        return Err(Error::Protocol(format!("bad magic {:02x?}", &head[..4])));
    }
    let len = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!(
            "payload of {len} bytes exceeds the limit"
        )));
    }
    // grow with the data actually received rather than trusting the length
    let mut payload = Vec::with_capacity(len.min(1 << 20));
    r.take(len as u64).read_to_end(&mut payload)?;
    let got = payload.len();
    if got < len {
        return Err(Error::Protocol(format!(
            "short payload: got {got} of {len} bytes"
        )));
    }
    Ok(Some(Frame {
        kind: head[4],
        payload,
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Named dense tensor, row-major with the channel axis first.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let t = Self {
            name: name.into(),
            dims,
            data,
        };
        if element_count(&t.dims) != Some(t.data.len()) {
            return Err(Error::Protocol(format!(
                "tensor {:?}: {} values for dims {:?}",
                t.name,
                t.data.len(),
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn from_array(name: impl Into<String>, a: &ndarray::Array3<f64>) -> Self {
        let (c, h, w) = a.dim();
        Self {
            name: name.into(),
            dims: vec![c, h, w],
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array3(&self) -> Result<ndarray::Array3<f64>> {
        match self.dims[..] {
            [c, h, w] => ndarray::Array3::from_shape_vec((c, h, w), self.data.clone())
                .map_err(|e| Error::Protocol(e.to_string())),
            _ => Err(Error::Protocol(format!(
                "tensor {:?} must have 3 dims, got {:?}",
                self.name, self.dims
            ))),
        }
    }
}

fn element_count(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    Hello {
        version: String,
        /// `alpha_bar[0..=T]` of the sender's schedule; empty in replies.
        alpha_bar: Vec<f64>,
    },
    Request {
        view_id: usize,
        timestep: usize,
        dtype: Dtype,
        latent: Tensor,
        conditions: Vec<Tensor>,
        prompt: Option<String>,
    },
    Response {
        view_id: usize,
        timestep: usize,
        dtype: Dtype,
        eps: Tensor,
    },
    Error {
        reason: String,
        view_id: Option<usize>,
        timestep: Option<usize>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HelloHeader {
    version: String,
    alpha_bar: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMessageHeader {
    view_id: usize,
    timestep: usize,
    dtype: Dtype,
    tensors: Vec<TensorHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorHeader {
    reason: String,
    view_id: Option<usize>,
    timestep: Option<usize>,
}

fn payload(header: &impl Serialize, tensors: &[&Tensor], dtype: Dtype) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let body: usize = tensors.iter().map(|t| t.data.len() * dtype.size()).sum();
    let mut out = Vec::with_capacity(4 + json.len() + body);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for &v in &t.data {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

fn tensor_headers(tensors: &[&Tensor]) -> Vec<TensorHeader> {
    tensors
        .iter()
        .map(|t| TensorHeader {
            name: t.name.clone(),
            dims: t.dims.clone(),
        })
        .collect()
}

impl WireMessage {
    pub fn kind(&self) -> MessageKind {
        match self {
            WireMessage::Hello { .. } => MessageKind::Hello,
            WireMessage::Request { .. } => MessageKind::Request,
            WireMessage::Response { .. } => MessageKind::Response,
            WireMessage::Error { .. } => MessageKind::Error,
        }
    }

    pub fn error(
        reason: impl Into<String>,
        view_id: Option<usize>,
        timestep: Option<usize>,
    ) -> Self {
        WireMessage::Error {
            reason: reason.into(),
            view_id,
            timestep,
        }
    }

    pub fn to_frame(&self) -> Result<Frame> {
        let payload = match self {
            WireMessage::Hello { version, alpha_bar } => payload(
                &HelloHeader {
                    version: version.clone(),
                    alpha_bar: alpha_bar.clone(),
                },
                &[],
                Dtype::F32,
            )?,
            WireMessage::Request {
                view_id,
                timestep,
                dtype,
                latent,
                conditions,
                prompt,
            } => {
                let mut tensors = vec![latent];
                tensors.extend(conditions.iter());
                payload(
                    &TensorMessageHeader {
                        view_id: *view_id,
                        timestep: *timestep,
                        dtype: *dtype,
                        tensors: tensor_headers(&tensors),
                        prompt: prompt.clone(),
                    },
                    &tensors,
                    *dtype,
                )?
            }
            WireMessage::Response {
                view_id,
                timestep,
                dtype,
                eps,
            } => payload(
                &TensorMessageHeader {
                    view_id: *view_id,
                    timestep: *timestep,
                    dtype: *dtype,
                    tensors: tensor_headers(&[eps]),
                    prompt: None,
                },
                &[eps],
                *dtype,
            )?,
            WireMessage::Error {
                reason,
                view_id,
                timestep,
            } => payload(
                &ErrorHeader {
                    reason: reason.clone(),
                    view_id: *view_id,
                    timestep: *timestep,
                },
                &[],
                Dtype::F32,
            )?,
        };
        if payload.len() > MAX_PAYLOAD {
            return Err(Error::Protocol("message exceeds the payload limit".into()));
        }
        Ok(Frame {
            kind: self.kind() as u8,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_frame()?.to_bytes())
    }

    pub fn from_frame(frame: &Frame) -> Result<Self> {
        let kind = MessageKind::from_byte(frame.kind)
            .ok_or_else(|| Error::Protocol(format!("unknown message kind {}", frame.kind)))?;
        let p = &frame.payload;
        if p.len() < 4 {
            return Err(Error::Protocol(
                "short payload: missing header length".into(),
            ));
        }
        let hlen = u32::from_le_bytes(p[..4].try_into().expect("4 bytes")) as usize;
        let json = p.get(4..4usize.saturating_add(hlen)).ok_or_else(|| {
            Error::Protocol(format!("short payload: header of {hlen} bytes truncated"))
        })?;
        let body = &p[4 + hlen..];
        let bad_header = |e: serde_json::Error| Error::Protocol(format!("malformed header: {e}"));
        match kind {
            MessageKind::Hello => {
                let h: HelloHeader = serde_json::from_slice(json).map_err(bad_header)?;
                expect_body(body, 0)?;
                Ok(WireMessage::Hello {
                    version: h.version,
                    alpha_bar: h.alpha_bar,
                })
            }
            MessageKind::Error => {
                let h: ErrorHeader = serde_json::from_slice(json).map_err(bad_header)?;
                expect_body(body, 0)?;
                Ok(WireMessage::Error {
                    reason: h.reason,
                    view_id: h.view_id,
                    timestep: h.timestep,
                })
            }
            MessageKind::Request | MessageKind::Response => {
                let h: TensorMessageHeader = serde_json::from_slice(json).map_err(bad_header)?;
                let mut tensors = read_tensors(&h.tensors, body, h.dtype)?;
                if tensors.is_empty() {
                    return Err(Error::Protocol("message carries no tensor".into()));
                }
                if tensors[0].dims.len() != 3 {
                    return Err(Error::Protocol(format!(
                        "first tensor must have 3 dims, got {:?}",
                        tensors[0].dims
                    )));
                }
                let first = tensors.remove(0);
                if kind == MessageKind::Request {
                    Ok(WireMessage::Request {
                        view_id: h.view_id,
                        timestep: h.timestep,
                        dtype: h.dtype,
                        latent: first,
                        conditions: tensors,
                        prompt: h.prompt,
                    })
                } else {
                    if !tensors.is_empty() || h.prompt.is_some() {
                        return Err(Error::Protocol("response carries extra fields".into()));
                    }
                    Ok(WireMessage::Response {
                        view_id: h.view_id,
                        timestep: h.timestep,
                        dtype: h.dtype,
                        eps: first,
                    })
                }
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let frame = read_frame(&mut r)?
            .ok_or_else(|| Error::Protocol("short payload: empty input".into()))?;
        if !r.is_empty() {
            return Err(Error::Protocol(format!(
                "{} bytes after the frame",
                r.len()
            )));
        }
        Self::from_frame(&frame)
    }
}

fn expect_body(body: &[u8], need: usize) -> Result<()> {
    match body.len().cmp(&need) {
        std::cmp::Ordering::Less => Err(Error::Protocol(format!(
            "short payload: {} tensor bytes, header declares {need}",
            body.len()
        ))),
        std::cmp::Ordering::Greater => Err(Error::Protocol(format!(
            "payload length mismatch: {} tensor bytes, header declares {need}",
            body.len()
        ))),
        std::cmp::Ordering::Equal => Ok(()),
    }
}

fn read_tensors(headers: &[TensorHeader], body: &[u8], dtype: Dtype) -> Result<Vec<Tensor>> {
    let mut need = 0usize;
    let mut counts = Vec::with_capacity(headers.len());
    for h in headers {
        let n = element_count(&h.dims)
            .and_then(|n| n.checked_mul(dtype.size()))
            .filter(|&b| b <= MAX_PAYLOAD)
            .ok_or_else(|| Error::Protocol(format!("tensor {:?} is too large", h.name)))?;
        counts.push(n / dtype.size());
        need = need.saturating_add(n);
    }
    expect_body(body, need)?;
    let mut chunks: Box<dyn Iterator<Item = f64>> = match dtype {
        Dtype::F32 => Box::new(
            body.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64),
        ),
        Dtype::F64 => Box::new(
            body.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))),
        ),
    };
    Ok(headers
        .iter()
        .zip(counts)
        .map(|(h, n)| Tensor {
            name: h.name.clone(),
            dims: h.dims.clone(),
            data: chunks.by_ref().take(n).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request() -> WireMessage {
        WireMessage::Request {
            view_id: 3,
            timestep: 17,
            dtype: Dtype::F32,
            latent: Tensor::new("latent", vec![1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap(),
            conditions: vec![
                Tensor::new("depth", vec![1, 1, 2], vec![0.1f32 as f64, 0.0]).unwrap(),
            ],
            prompt: Some("a person".into()),
        }
    }

    #[test]
    fn frame_layout() {
        let bytes = request().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MVD1");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(len, bytes.len() - 9);
        let hlen = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        // 4 + 2 floats of tensor data
        assert_eq!(len, 4 + hlen + 6 * 4);
        let header: serde_json::Value = serde_json::from_slice(&bytes[13..13 + hlen]).unwrap();
        assert_eq!(header["view_id"], 3);
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["tensors"][1]["name"], "depth");
        // little-endian f32 payload
        assert_eq!(&bytes[13 + hlen..13 + hlen + 4], &0.5f32.to_le_bytes());
    }

    #[test]
    fn round_trip_each_kind() {
        let msgs = [
            request(),
            WireMessage::Response {
                view_id: 1,
                timestep: 2,
                dtype: Dtype::F64,
                eps: Tensor::new("eps", vec![1, 1, 3], vec![0.1, 0.2, 1e-300]).unwrap(),
            },
            WireMessage::Hello {
                version: PROTOCOL_VERSION.into(),
                alpha_bar: vec![1.0, 0.9991500000000001, 0.5],
            },
            WireMessage::error("boom", Some(2), None),
        ];
        for m in msgs {
            let bytes = m.to_bytes().unwrap();
            let back = WireMessage::from_bytes(&bytes).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn truncated_tensor_bytes_are_a_short_payload() {
        let mut frame = request().to_frame().unwrap();
        frame.payload.truncate(frame.payload.len() - 3);
        let err = WireMessage::from_frame(&frame).unwrap_err();
        assert!(err.to_string().contains("short payload"), "{err}");
    }

    #[test]
    fn stream_ending_mid_frame_is_a_short_payload() {
        let bytes = request().to_bytes().unwrap();
        let mut r = &bytes[..bytes.len() - 1];
        let err = read_frame(&mut r).unwrap_err();
        assert!(err.to_string().contains("short payload"), "{err}");
        let mut empty: &[u8] = &[];
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut frame = request().to_frame().unwrap();
        frame.payload.extend_from_slice(&[0, 0, 0, 0]);
        let err = WireMessage::from_frame(&frame).unwrap_err();
        assert!(err.to_string().contains("mismatch"), "{err}");
    }

    #[test]
    fn tensor_bytes_are_little_endian() {
        let m = WireMessage::Response {
            view_id: 0,
            timestep: 1,
            dtype: Dtype::F32,
            eps: Tensor::new("eps", vec![1, 1, 1], vec![1.0]).unwrap(),
        };
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[0x00, 0x00, 0x80, 0x3f]);
    }
}
