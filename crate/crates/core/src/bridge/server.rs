use std::io::{Read, Write};
use std::net::TcpListener;
use std::sync::Arc;

use crate::denoise::{Conditions, Denoiser, DenoiserRequest};
use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::Schedule;

use super::wire::{read_frame, write_frame, Tensor, WireMessage, PROTOCOL_VERSION};

/// Counters of one served connection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub errors: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ServeOptions {
    /// Close the connection without answering once this many requests have
    /// been answered. Used to simulate a crashing backend.
    pub exit_after: Option<usize>,
}

fn send(w: &mut dyn Write, msg: &WireMessage) -> Result<()> {
    write_frame(w, &msg.to_frame()?)
}

fn answer(
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    view_id: usize,
    timestep: usize,
    latent: &Tensor,
    conditions: &[Tensor],
    prompt: Option<&str>,
) -> Result<Tensor> {
    let x = LatentField::try_new(latent.to_array3()?, crate::field::Space::Latent)?;
    if timestep < 1 || timestep > schedule.num_steps() {
        return Err(Error::contract(format!(
            "timestep {timestep} outside 1..={}",
            schedule.num_steps()
        )));
    }
    let mut conds = Conditions::new();
    for c in conditions {
        conds.insert(c.name.clone(), c.to_array3()?);
    }
    let req = DenoiserRequest::new(view_id, timestep, &x)
        .with_conditions(&conds)
        .with_prompt(prompt);
    let resp = denoiser.denoise(&req, schedule)?;
    crate::denoise::check_response(&req, &resp)?;
    Ok(Tensor::from_array("eps", resp.eps.data()))
}

/// Serves one connection until the peer closes it.
///
/// The first message must be a hello carrying the protocol version and the
/// peer's `alpha_bar` table; a version mismatch is answered with an error and
/// the connection is closed. Malformed frames are answered with an error
/// message and the connection stays usable as long as framing is intact.
pub fn serve_requests(
    reader: &mut dyn Read,
    writer: &mut dyn Write,
    denoiser: &dyn Denoiser,
    opts: ServeOptions,
) -> Result<ServeStats> {
    let mut stats = ServeStats::default();
    let mut schedule: Option<Schedule> = None;
    loop {
        let frame = match read_frame(reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(stats),
            Err(Error::Protocol(reason)) => {
                // framing is lost: report and close
                stats.errors += 1;
                let _ = send(writer, &WireMessage::error(reason, None, None));
                return Ok(stats);
            }
            Err(e) => return Err(e),
        };
        let msg = match WireMessage::from_frame(&frame) {
            Ok(m) => m,
            Err(e) => {
                stats.errors += 1;
                let reason = match e {
                    Error::Protocol(r) => r,
                    other => other.to_string(),
                };
                send(writer, &WireMessage::error(reason, None, None))?;
                continue;
            }
        };
        match msg {
            WireMessage::Hello { version, alpha_bar } => {
                if version != PROTOCOL_VERSION {
                    stats.errors += 1;
                    let reason =
                        format!("version mismatch: expected {PROTOCOL_VERSION}, got {version:?}");
                    send(writer, &WireMessage::error(reason, None, None))?;
                    return Ok(stats);
                }
                match Schedule::from_alpha_bar(alpha_bar) {
                    Ok(s) => {
                        schedule = Some(s);
                        send(
                            writer,
                            &WireMessage::Hello {
                                version: PROTOCOL_VERSION.into(),
                                alpha_bar: Vec::new(),
                            },
                        )?;
                    }
                    Err(e) => {
                        stats.errors += 1;
                        send(
                            writer,
                            &WireMessage::error(format!("invalid schedule: {e}"), None, None),
                        )?;
                        return Ok(stats);
                    }
                }
            }
            WireMessage::Request {
                view_id,
                timestep,
                dtype,
                latent,
                conditions,
                prompt,
            } => {
                if opts.exit_after.is_some_and(|n| stats.requests >= n) {
                    return Ok(stats);
                }
                let Some(s) = schedule.as_ref() else {
                    stats.errors += 1;
                    send(
                        writer,
                        &WireMessage::error(
                            "hello required before requests",
                            Some(view_id),
                            Some(timestep),
                        ),
                    )?;
                    continue;
                };
                let reply = match answer(
                    denoiser,
                    s,
                    view_id,
                    timestep,
                    &latent,
                    &conditions,
                    prompt.as_deref(),
                ) {
                    Ok(eps) => WireMessage::Response {
                        view_id,
                        timestep,
                        dtype,
                        eps,
                    },
                    Err(e) => {
                        stats.errors += 1;
                        WireMessage::error(e.to_string(), Some(view_id), Some(timestep))
                    }
                };
                stats.requests += 1;
                send(writer, &reply)?;
            }
            WireMessage::Response {
                view_id, timestep, ..
            } => {
                stats.errors += 1;
                send(
                    writer,
                    &WireMessage::error(
                        "unexpected response message",
                        Some(view_id),
                        Some(timestep),
                    ),
                )?;
            }
            WireMessage::Error { .. } => {
                stats.errors += 1;
                send(
                    writer,
                    &WireMessage::error("unexpected error message", None, None),
                )?;
            }
        }
    }
}

/// Serves requests over stdin/stdout.
pub fn serve_stdio(denoiser: &dyn Denoiser, opts: ServeOptions) -> Result<ServeStats> {
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut r = stdin.lock();
    let mut w = stdout.lock();
    serve_requests(&mut r, &mut w, denoiser, opts)
}

/// Accepts TCP connections and serves each on its own thread. Returns after
/// `max_connections` connections have been accepted, or never.
pub fn serve_tcp(
    listener: TcpListener,
    denoiser: Arc<dyn Denoiser>,
    opts: ServeOptions,
    max_connections: Option<usize>,
) -> Result<()> {
    let mut handles = Vec::new();
    for (k, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let d = Arc::clone(&denoiser);
        handles.push(std::thread::spawn(move || -> Result<ServeStats> {
            let mut r = stream.try_clone()?;
            let mut w = stream;
            serve_requests(&mut r, &mut w, &*d, opts)
        }));
        if max_connections.is_some_and(|m| k + 1 >= m) {
            break;
        }
    }
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
