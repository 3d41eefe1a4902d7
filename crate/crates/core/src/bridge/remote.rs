use std::io::{Read, Write};
use std::net::{Shutdown, TcpStream};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crate::denoise::{Concurrency, Denoiser, DenoiserRequest, DenoiserResponse};
use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::Schedule;

use super::server::{serve_requests, ServeOptions};
use super::wire::{read_frame, write_frame, Dtype, Frame, Tensor, WireMessage, PROTOCOL_VERSION};

/// Where a remote backend lives.
#[derive(Clone)]
pub enum Endpoint {
    /// Shell command spawned once per connection, speaking over its stdio.
    Command(String),
    /// `host:port` of a listening backend.
    Tcp(String),
    /// In-process backend on a socket pair, served by a background thread.
    Loopback(Arc<dyn Denoiser>),
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Command(c) => write!(f, "Command({c:?})"),
            Endpoint::Tcp(a) => write!(f, "Tcp({a:?})"),
            Endpoint::Loopback(_) => write!(f, "Loopback"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RemoteOptions {
    pub timeout: Duration,
    pub connections: usize,
    pub dtype: Dtype,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            connections: 1,
            dtype: Dtype::F32,
        }
    }
}

enum Link {
    Child(Child),
    Tcp(TcpStream),
    #[cfg(unix)]
    Unix(std::os::unix::net::UnixStream, Option<JoinHandle<()>>),
}

struct Connection {
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame>>,
    link: Link,
    broken: Option<String>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        match &mut self.link {
            Link::Child(child) => {
                // closing stdin asks the backend to exit
                self.writer = Box::new(std::io::sink());
                let _ = child.kill();
                let _ = child.wait();
            }
            Link::Tcp(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            #[cfg(unix)]
            Link::Unix(s, server) => {
                let _ = s.shutdown(Shutdown::Both);
                if let Some(h) = server.take() {
                    let _ = h.join();
                }
            }
        }
    }
}

fn spawn_reader(mut r: Box<dyn Read + Send>) -> Receiver<Result<Frame>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || loop {
        match read_frame(&mut *r) {
            Ok(Some(f)) => {
                if tx.send(Ok(f)).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                let _ = tx.send(Err(e));
                return;
            }
        }
    });
    rx
}

impl Connection {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        let (reader, writer, link): (Box<dyn Read + Send>, Box<dyn Write + Send>, Link) =
            match endpoint {
                Endpoint::Command(cmd) => {
                    let mut child = shell(cmd)
                        .stdin(Stdio::piped())
                        .stdout(Stdio::piped())
                        .stderr(Stdio::inherit())
                        .spawn()
                        .map_err(|e| {
                            Error::Io(std::io::Error::new(
                                e.kind(),
                                format!("cannot spawn {cmd:?}: {e}"),
                            ))
                        })?;
                    let stdin = child.stdin.take().expect("piped stdin");
                    let stdout = child.stdout.take().expect("piped stdout");
                    (Box::new(stdout), Box::new(stdin), Link::Child(child))
                }
                Endpoint::Tcp(addr) => {
                    let s = TcpStream::connect(addr).map_err(|e| {
                        Error::Io(std::io::Error::new(
                            e.kind(),
                            format!("cannot connect to {addr}: {e}"),
                        ))
                    })?;
                    s.set_nodelay(true)?;
                    (
                        Box::new(s.try_clone()?),
                        Box::new(s.try_clone()?),
                        Link::Tcp(s),
                    )
                }
                #[cfg(unix)]
                Endpoint::Loopback(d) => {
                    let (ours, theirs) = std::os::unix::net::UnixStream::pair()?;
                    let d = Arc::clone(d);
                    let server = std::thread::spawn(move || {
                        let Ok(mut r) = theirs.try_clone() else {
                            return;
                        };
                        let mut w = theirs;
                        let _ = serve_requests(&mut r, &mut w, &*d, ServeOptions::default());
                    });
                    (
                        Box::new(ours.try_clone()?),
                        Box::new(ours.try_clone()?),
                        Link::Unix(ours, Some(server)),
                    )
                }
                #[cfg(not(unix))]
                Endpoint::Loopback(_) => {
                    return Err(Error::config(
                        "denoiser",
                        "loopback transport needs a unix platform",
                    ));
                }
            };
        Ok(Self {
            writer,
            frames: spawn_reader(reader),
            link,
            broken: None,
        })
    }

    fn exchange(&mut self, msg: &WireMessage, timeout: Duration) -> Result<WireMessage> {
        if let Some(reason) = &self.broken {
            return Err(Error::Protocol(format!("connection unusable: {reason}")));
        }
        let r = self.exchange_inner(msg, timeout);
        if let Err(e) = &r {
            // a late reply would desynchronize the stream
            self.broken = Some(e.to_string());
        }
        r
    }

    fn exchange_inner(&mut self, msg: &WireMessage, timeout: Duration) -> Result<WireMessage> {
        write_frame(&mut *self.writer, &msg.to_frame()?)
            .map_err(|e| Error::Protocol(format!("backend disconnected: {e}")))?;
        let frame = match self.frames.recv_timeout(timeout) {
            Ok(f) => f?,
            Err(RecvTimeoutError::Timeout) => {
                return Err(Error::Protocol(format!(
                    "backend timed out after {:.1} s",
                    timeout.as_secs_f64()
                )))
            }
            Err(RecvTimeoutError::Disconnected) => {
                return Err(Error::Protocol("backend disconnected".into()))
            }
        };
        WireMessage::from_frame(&frame)
    }
}

fn shell(cmd: &str) -> Command {
    if cfg!(windows) {
        let mut c = Command::new("cmd");
        c.args(["/C", cmd]);
        c
    } else {
        let mut c = Command::new("sh");
        c.args(["-c", cmd]);
        c
    }
}

/// Denoiser served by an out-of-process backend.
///
/// Holds a pool of connections, each with at most one request in flight.
/// With a single connection the denoiser is serial-only; with several,
/// concurrent calls use distinct connections.
pub struct RemoteDenoiser {
    pool: Mutex<Vec<Connection>>,
    available: Condvar,
    connections: usize,
    timeout: Duration,
    dtype: Dtype,
    alpha_bar: Vec<f64>,
}

impl std::fmt::Debug for RemoteDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteDenoiser")
            .field("connections", &self.connections)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl RemoteDenoiser {
    /// Opens `opts.connections` connections and exchanges hellos carrying
    /// the schedule.
    pub fn connect(endpoint: &Endpoint, schedule: &Schedule, opts: RemoteOptions) -> Result<Self> {
        if opts.connections < 1 {
            return Err(Error::config("denoiser.connections", "must be >= 1"));
        }
        let hello = WireMessage::Hello {
            version: PROTOCOL_VERSION.into(),
            alpha_bar: schedule.alpha_bars().to_vec(),
        };
        let mut pool = Vec::with_capacity(opts.connections);
        for _ in 0..opts.connections {
            let mut c = Connection::open(endpoint)?;
            match c.exchange(&hello, opts.timeout)? {
                WireMessage::Hello { version, .. } if version == PROTOCOL_VERSION => {}
                WireMessage::Hello { version, .. } => {
                    return Err(Error::Protocol(format!("backend speaks {version:?}")));
                }
                WireMessage::Error { reason, .. } => {
                    return Err(Error::Protocol(format!("backend refused hello: {reason}")));
                }
                other => {
                    return Err(Error::Protocol(format!(
                        "unexpected hello reply {:?}",
                        other.kind()
                    )))
                }
            }
            pool.push(c);
        }
        Ok(Self {
            pool: Mutex::new(pool),
            available: Condvar::new(),
            connections: opts.connections,
            timeout: opts.timeout,
            dtype: opts.dtype,
            alpha_bar: schedule.alpha_bars().to_vec(),
        })
    }

    pub fn connections(&self) -> usize {
        self.connections
    }

    fn checkout(&self) -> Connection {
        let mut pool = self.pool.lock().unwrap_or_else(|p| p.into_inner());
        loop {
            if let Some(c) = pool.pop() {
                return c;
            }
            pool = self.available.wait(pool).unwrap_or_else(|p| p.into_inner());
        }
    }

    fn checkin(&self, c: Connection) {
        self.pool.lock().unwrap_or_else(|p| p.into_inner()).push(c);
        self.available.notify_one();
    }

    fn call(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<LatentField> {
        if schedule.alpha_bars() != self.alpha_bar.as_slice() {
            return Err(Error::contract(
                "schedule differs from the one sent in hello",
            ));
        }
        let msg = WireMessage::Request {
            view_id: req.view_id,
            timestep: req.timestep,
            dtype: self.dtype,
            latent: Tensor::from_array("latent", req.latent.data()),
            conditions: req
                .conditions
                .iter()
                .map(|(k, v)| Tensor::from_array(k.clone(), v))
                .collect(),
            prompt: req.prompt.map(str::to_owned),
        };
        let mut conn = self.checkout();
        let reply = conn.exchange(&msg, self.timeout);
        self.checkin(conn);
        match reply? {
            WireMessage::Response {
                view_id,
                timestep,
                eps,
                ..
            } => {
                if view_id != req.view_id || timestep != req.timestep {
                    return Err(Error::Protocol(format!(
                        "response for view {view_id} t={timestep} answers view {} t={}",
                        req.view_id, req.timestep
                    )));
                }
                let eps = eps.to_array3()?;
                if eps.dim() != req.latent.shape() {
                    return Err(Error::Protocol(format!(
                        "response dims {:?} differ from latent dims {:?}",
                        eps.dim(),
                        req.latent.shape()
                    )));
                }
                Ok(LatentField::new(eps, req.latent.space()))
            }
            WireMessage::Error { reason, .. } => {
                Err(Error::Protocol(format!("backend error: {reason}")))
            }
            other => Err(Error::Protocol(format!(
                "unexpected reply {:?}",
                other.kind()
            ))),
        }
    }
}

impl Denoiser for RemoteDenoiser {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        self.call(req, schedule)
            .map(|eps| DenoiserResponse { eps })
            .map_err(|e| Error::Denoiser {
                view_id: req.view_id,
                timestep: req.timestep,
                reason: e.to_string(),
            })
    }

    fn concurrency(&self) -> Concurrency {
        if self.connections > 1 {
            Concurrency::ConcurrentSafe
        } else {
            Concurrency::SerialOnly
        }
    }
}
