//! One writer thread per session.
//!
//! Commands arrive on a queue and run strictly in order. Each successful
//! command is appended to the event log (and fsynced) before its reply is
//! sent and before its events are broadcast to subscribers.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use bricks_core::devices::DeviceHandle;
use bricks_core::sessions::{
    Command, EventKind, Outcome, RunState, Session, SessionEvent, SessionState, Snapshot,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, oneshot, watch};
use tracing::{debug, warn};

use crate::error::ServiceError;
use crate::store::{SessionDescriptor, Store};

const EVENT_BUFFER: usize = 1024;

/// Sequence number and kind of an event produced by a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRef {
    pub seq: u64,
    pub kind: EventKind,
}

/// Successful reply to a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandReply {
    pub outcome: Outcome,
    pub events: Vec<EventRef>,
    pub snapshot: Snapshot,
}

enum Request {
    Execute {
        command: Command,
        reply: oneshot::Sender<Result<CommandReply, ServiceError>>,
    },
    Tick,
    Shutdown,
}

struct Worker {
    id: String,
    session: Session,
    device: Arc<DeviceHandle>,
    store: Store,
    events: broadcast::Sender<Arc<SessionEvent>>,
    snapshot: watch::Sender<Arc<Snapshot>>,
    tick_pending: Arc<AtomicBool>,
}

impl Worker {
    fn run(mut self, rx: mpsc::Receiver<Request>) {
        while let Ok(req) = rx.recv() {
            match req {
                Request::Execute { command, reply } => {
                    let _ = reply.send(self.execute(command));
                }
                Request::Tick => {
                    self.tick_pending.store(false, Ordering::Release);
                    if self.running() {
                        if let Err(e) = self.execute(Command::CrawlerStep) {
                            debug!(session = %self.id, error = %e, "tick skipped");
                        }
                    }
                }
                Request::Shutdown => break,
            }
        }
        debug!(session = %self.id, "worker stopped");
    }

    fn running(&self) -> bool {
        matches!(
            self.session.state(),
            SessionState::Crawler(c) if c.run_state == RunState::Running
        )
    }

    fn execute(&mut self, command: Command) -> Result<CommandReply, ServiceError> {
        let before = self.session.clone();
        let done = self.session.execute(command, &self.device)?;
        if let Err(e) = self.store.append(&self.id, &done.events) {
            self.session = before;
            return Err(e);
        }
        let snapshot = self.session.snapshot();
        if let Err(e) = self.store.write_snapshot(&self.id, &snapshot) {
            // The log already holds the events; the snapshot is rebuilt on restart.
            warn!(session = %self.id, error = %e, "snapshot write failed");
        }
        self.snapshot.send_replace(Arc::new(snapshot.clone()));
        let refs = done
            .events
            .iter()
            .map(|e| EventRef {
                seq: e.seq,
                kind: e.kind,
            })
            .collect();
        for e in done.events {
            let _ = self.events.send(Arc::new(e));
        }
        Ok(CommandReply {
            outcome: done.outcome,
            events: refs,
            snapshot,
        })
    }
}

/// Shared front of a running session.
pub struct SessionHandle {
    descriptor: SessionDescriptor,
    device: Arc<DeviceHandle>,
    tx: mpsc::Sender<Request>,
    events: broadcast::Sender<Arc<SessionEvent>>,
    snapshot: watch::Receiver<Arc<Snapshot>>,
    tick_pending: Arc<AtomicBool>,
    thread: std::sync::Mutex<Option<JoinHandle<()>>>,
}

impl SessionHandle {
    pub(crate) fn spawn(
        descriptor: SessionDescriptor,
        session: Session,
        device: DeviceHandle,
        store: Store,
    ) -> Arc<Self> {
        let device = Arc::new(device);
        let (tx, rx) = mpsc::channel();
        let (events, _) = broadcast::channel(EVENT_BUFFER);
        let (snap_tx, snap_rx) = watch::channel(Arc::new(session.snapshot()));
        let tick_pending = Arc::new(AtomicBool::new(false));
        let worker = Worker {
            id: descriptor.id.clone(),
            session,
            device: device.clone(),
            store,
            events: events.clone(),
            snapshot: snap_tx,
            tick_pending: tick_pending.clone(),
        };
        let thread = thread::Builder::new()
            .name(format!("session-{}", descriptor.id))
            .spawn(move || worker.run(rx))
            .expect("spawn session worker");
        Arc::new(Self {
            descriptor,
            device,
            tx,
            events,
            snapshot: snap_rx,
            tick_pending,
            thread: std::sync::Mutex::new(Some(thread)),
        })
    }

    pub fn descriptor(&self) -> &SessionDescriptor {
        &self.descriptor
    }

    pub fn id(&self) -> &str {
        &self.descriptor.id
    }

    pub fn device(&self) -> &DeviceHandle {
        &self.device
    }

    /// Latest committed state.
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.borrow().clone()
    }

    /// Live events from now on.
    pub fn subscribe(&self) -> broadcast::Receiver<Arc<SessionEvent>> {
        self.events.subscribe()
    }

    pub async fn execute(&self, command: Command) -> Result<CommandReply, ServiceError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Request::Execute { command, reply })
            .map_err(|_| ServiceError::WorkerGone(self.id().to_owned()))?;
        rx.await
            .map_err(|_| ServiceError::WorkerGone(self.id().to_owned()))?
    }

    /// Queues a crawler step unless one is already waiting.
    fn tick(&self) -> bool {
        if !self.tick_pending.swap(true, Ordering::AcqRel) {
            return self.tx.send(Request::Tick).is_ok();
        }
        true
    }

    /// Steps a running crawler at `hz` until the session shuts down.
    pub(crate) fn start_ticker(self: &Arc<Self>, hz: f64) {
        if !(hz.is_finite() && hz > 0.0) {
            return;
        }
        let weak = Arc::downgrade(self);
        let period = Duration::from_secs_f64(1.0 / hz);
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            interval.tick().await;
            loop {
                interval.tick().await;
                let Some(handle) = weak.upgrade() else { break };
                let running = matches!(
                    &handle.snapshot().state,
                    SessionState::Crawler(c) if c.run_state == RunState::Running
                );
                if running && !handle.tick() {
                    break;
                }
            }
        });
    }

    /// Stops the worker after the commands already queued.
    pub(crate) fn shutdown(&self) {
        let _ = self.tx.send(Request::Shutdown);
        let thread = self.thread.lock().unwrap_or_else(|e| e.into_inner()).take();
        if let Some(t) = thread {
            let _ = t.join();
        }
    }
}
