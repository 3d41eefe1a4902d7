//! Wire protocol for out-of-process denoiser backends.
//!
//! A frame is the magic `MVD1`, a kind byte (request 1, response 2, error 3,
//! hello 4) and a little-endian `u32` payload length. The payload is a
//! little-endian `u32` header length, a JSON header, then the raw tensors in
//! header order (little-endian, row-major, channel first). Tensors are `f32`
//! unless the header says `"dtype": "f64"`.

mod remote;
mod server;
mod wire;

pub use remote::{Endpoint, RemoteDenoiser, RemoteOptions};
pub use server::{serve_requests, serve_stdio, serve_tcp, ServeOptions, ServeStats};
pub use wire::{
    read_frame, write_frame, Dtype, Frame, MessageKind, Tensor, WireMessage, MAGIC, MAX_PAYLOAD,
    PROTOCOL_VERSION,
};
