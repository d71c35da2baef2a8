//! Device gateway: one serialized command channel per robot, backed either
//! by the built-in simulator or by any external byte stream speaking the
//! line protocol in [`protocol`].

pub mod protocol;
pub mod sim;

use std::fmt;
use std::io::{self, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use protocol::{
    read_frame, CommandKind, DeviceCommand, DeviceReply, Frame, ProtocolError, ReplyPayload,
};
pub use sim::{
    sim_launch, sim_move_arm, sim_read_fruit, FruitKind, Rig, SimWorld, Simulator, SimulatorConfig,
    REFERENCE_DISPLACEMENTS,
};

const EXTERNAL_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DeviceError {
    #[error("device unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("device reported {code}: {message}")]
    Remote { code: String, message: String },
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendStatus {
    Connected,
    Disconnected,
    Reconnecting,
}

/// A bidirectional line transport: send one frame, receive one frame.
pub trait Link: Send {
    fn exchange(&mut self, frame: &[u8]) -> io::Result<Vec<u8>>;
}

/// Opens (and re-opens) links for a device.
pub trait Connector: Send {
    fn connect(&mut self) -> io::Result<Box<dyn Link>>;
    fn describe(&self) -> String;
}

/// In-process link that runs every frame through the simulator.
struct SimLink {
    world: SimWorld,
}

impl Link for SimLink {
    fn exchange(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        if self.world.is_link_down() {
            return Err(io::Error::new(
                io::ErrorKind::BrokenPipe,
                "simulated link lost",
            ));
        }
        let cmd = DeviceCommand::decode(frame)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok(self.world.lock().handle(&cmd).encode())
    }
}

struct SimConnector {
    world: SimWorld,
}

impl Connector for SimConnector {
    fn connect(&mut self) -> io::Result<Box<dyn Link>> {
        if self.world.is_link_down() {
            return Err(io::Error::new(
                io::ErrorKind::NotConnected,
                "simulated hub offline",
            ));
        }
        Ok(Box::new(SimLink {
            world: self.world.clone(),
        }))
    }

    fn describe(&self) -> String {
        "sim".into()
    }
}

/// Link over any byte stream, e.g. a TCP socket or a serial bridge.
pub struct StreamLink {
    reader: BufReader<Box<dyn Read + Send>>,
    writer: Box<dyn Write + Send>,
}

impl StreamLink {
    pub fn new(reader: impl Read + Send + 'static, writer: impl Write + Send + 'static) -> Self {
        Self {
            reader: BufReader::new(Box::new(reader)),
            writer: Box::new(writer),
        }
    }
}

impl Link for StreamLink {
    fn exchange(&mut self, frame: &[u8]) -> io::Result<Vec<u8>> {
        self.writer.write_all(frame)?;
        self.writer.flush()?;
        read_frame(&mut self.reader)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "hub closed the stream"))
    }
}

struct TcpConnector {
    endpoint: String,
}

impl Connector for TcpConnector {
    fn connect(&mut self) -> io::Result<Box<dyn Link>> {
        let addr =
            self.endpoint.to_socket_addrs()?.next().ok_or_else(|| {
                io::Error::new(io::ErrorKind::NotFound, "endpoint did not resolve")
            })?;
        let stream = TcpStream::connect_timeout(&addr, EXTERNAL_TIMEOUT)?;
        stream.set_read_timeout(Some(EXTERNAL_TIMEOUT))?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Ok(Box::new(StreamLink::new(reader, stream)))
    }

    fn describe(&self) -> String {
        format!("external:{}", self.endpoint)
    }
}

/// Selects the backend behind a device handle.
pub enum BackendDescriptor {
    Sim {
        config: SimulatorConfig,
        rig: Rig,
    },
    /// TCP endpoint (`host:port`) of a hub adapter speaking the line protocol.
    External {
        endpoint: String,
    },
    /// Any other transport.
    Custom(Box<dyn Connector>),
}

impl fmt::Debug for BackendDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendDescriptor::Sim { rig, .. } => write!(f, "Sim({rig:?})"),
            BackendDescriptor::External { endpoint } => write!(f, "External({endpoint})"),
            BackendDescriptor::Custom(c) => write!(f, "Custom({})", c.describe()),
        }
    }
}

impl BackendDescriptor {
    /// Parses `"sim"` or `"external"` (which needs `endpoint`).
    pub fn parse(
        kind: &str,
        endpoint: Option<&str>,
        config: SimulatorConfig,
        rig: Rig,
    ) -> Result<Self, DeviceError> {
        match kind {
            "sim" => Ok(BackendDescriptor::Sim { config, rig }),
            "external" => match endpoint {
                Some(ep) if !ep.trim().is_empty() => Ok(BackendDescriptor::External {
                    endpoint: ep.trim().trim_start_matches("tcp://").to_owned(),
                }),
                _ => Err(DeviceError::Config(
                    "external backend needs an endpoint".into(),
                )),
            },
            other => Err(DeviceError::Config(format!("unknown backend `{other}`"))),
        }
    }
}

struct Channel {
    connector: Box<dyn Connector>,
    link: Option<Box<dyn Link>>,
    next_id: u64,
}

/// Handle to one robot. Commands are serialized: at most one is in flight.
pub struct DeviceHandle {
    channel: Mutex<Channel>,
    status: Mutex<BackendStatus>,
    observers: Mutex<Vec<mpsc::Sender<BackendStatus>>>,
    sim: Option<SimWorld>,
    label: String,
}

impl fmt::Debug for DeviceHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceHandle")
            .field("backend", &self.label)
            .field("status", &self.status())
            .finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl DeviceHandle {
    /// Builds a handle and tries to open the link once. A backend that cannot
    /// be reached yet starts out `Reconnecting`; only configuration problems
    /// are errors.
    pub fn connect(descriptor: BackendDescriptor) -> Result<Self, DeviceError> {
        let (connector, sim): (Box<dyn Connector>, Option<SimWorld>) = match descriptor {
            BackendDescriptor::Sim { config, rig } => {
                config.validate()?;
                let world = SimWorld::new(Simulator::new(config, rig));
                (
                    Box::new(SimConnector {
                        world: world.clone(),
                    }),
                    Some(world),
                )
            }
            BackendDescriptor::External { endpoint } => (Box::new(TcpConnector { endpoint }), None),
            BackendDescriptor::Custom(c) => (c, None),
        };
        let label = connector.describe();
        let handle = Self {
            channel: Mutex::new(Channel {
                connector,
                link: None,
                next_id: 1,
            }),
            status: Mutex::new(BackendStatus::Reconnecting),
            observers: Mutex::new(Vec::new()),
            sim,
            label,
        };
        {
            let mut ch = lock(&handle.channel);
            if let Err(e) = handle.open(&mut ch) {
                warn!(backend = %handle.label, "initial connect failed: {e}");
            }
        }
        Ok(handle)
    }

    pub fn backend(&self) -> &str {
        &self.label
    }

    pub fn status(&self) -> BackendStatus {
        *lock(&self.status)
    }

    /// Simulator controls, when the backend is the simulator.
    pub fn sim(&self) -> Option<&SimWorld> {
        self.sim.as_ref()
    }

    /// Receives every status change from now on.
    pub fn subscribe(&self) -> mpsc::Receiver<BackendStatus> {
        let (tx, rx) = mpsc::channel();
        lock(&self.observers).push(tx);
        rx
    }

    fn set_status(&self, next: BackendStatus) {
        let mut status = lock(&self.status);
        if *status == next {
            return;
        }
        debug!(backend = %self.label, from = ?*status, to = ?next, "device status");
        *status = next;
        drop(status);
        lock(&self.observers).retain(|tx| tx.send(next).is_ok());
    }

    fn open(&self, ch: &mut Channel) -> Result<(), DeviceError> {
        match ch.connector.connect() {
            Ok(link) => {
                ch.link = Some(link);
                self.set_status(BackendStatus::Connected);
                Ok(())
            }
            Err(e) => {
                ch.link = None;
                self.set_status(BackendStatus::Reconnecting);
                Err(DeviceError::Unavailable(e.to_string()))
            }
        }
    }

    /// Drops the link on purpose. Commands fail until [`reconnect`](Self::reconnect).
    pub fn disconnect(&self) {
        let mut ch = lock(&self.channel);
        ch.link = None;
        self.set_status(BackendStatus::Disconnected);
    }

    pub fn reconnect(&self) -> Result<(), DeviceError> {
        let mut ch = lock(&self.channel);
        ch.link = None;
        self.open(&mut ch)
    }

    /// Sends one command and waits for its reply.
    ///
    /// A lost transport moves the handle to `Reconnecting`; the next request
    /// tries to reopen the link before sending.
    pub fn request(&self, kind: CommandKind) -> Result<ReplyPayload, DeviceError> {
        let mut ch = lock(&self.channel);
        if self.status() == BackendStatus::Disconnected {
            return Err(DeviceError::Unavailable("device is disconnected".into()));
        }
        if ch.link.is_none() {
            self.open(&mut ch)?;
        }
        let id = ch.next_id;
        ch.next_id += 1;
        let cmd = DeviceCommand {
            id,
            kind,
            issued_at: now_ms(),
        };
        let frame = cmd.encode();
        let link = ch.link.as_mut().expect("link opened above");
        let raw = match link.exchange(&frame) {
            Ok(raw) => raw,
            Err(e) => {
                ch.link = None;
                self.set_status(BackendStatus::Reconnecting);
                return Err(DeviceError::Unavailable(e.to_string()));
            }
        };
        let reply = match DeviceReply::decode(&raw) {
            Ok(r) if r.id == id && r.payload.answers(&cmd.kind) => r,
            other => {
                // the stream is out of step; start over on a fresh link
                ch.link = None;
                self.set_status(BackendStatus::Reconnecting);
                return Err(match other {
                    Err(e) => DeviceError::Protocol(e),
                    Ok(r) => DeviceError::Protocol(ProtocolError {
                        offset: 0,
                        message: format!(
                            "reply {} `{}` does not answer command {} `{}`",
                            r.id,
                            r.payload.tag(),
                            id,
                            cmd.kind.tag()
                        ),
                    }),
                });
            }
        };
        match reply.payload {
            ReplyPayload::Error { code, message } => Err(DeviceError::Remote { code, message }),
            payload => Ok(payload),
        }
    }
}

/// Serves a simulator over a byte stream until the peer hangs up. Useful as
/// a stand-in hub for the external backend.
pub fn serve_simulator(
    world: &SimWorld,
    reader: impl Read,
    mut writer: impl Write,
) -> io::Result<()> {
    let mut reader = BufReader::new(reader);
    while let Some(frame) = read_frame(&mut reader)? {
        let reply = match DeviceCommand::decode(&frame) {
            Ok(cmd) => world.lock().handle(&cmd),
            Err(e) => DeviceReply {
                id: 0,
                payload: ReplyPayload::Error {
                    code: "protocol".into(),
                    message: e.to_string(),
                },
            },
        };
        writer.write_all(&reply.encode())?;
        writer.flush()?;
    }
    Ok(())
}
