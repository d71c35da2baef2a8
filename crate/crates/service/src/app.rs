use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use bricks_core::devices::{BackendDescriptor, DeviceError, DeviceHandle, SimulatorConfig};
use bricks_core::mlcore::{decision_boundary, BoundaryGrid, DEFAULT_BOUNDARY_RESOLUTION};
use bricks_core::sessions::{Command, Experiment, Session, SessionEvent, SessionState};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;
use tracing::{error, info};

use crate::error::ServiceError;
use crate::store::{BackendKind, SessionDescriptor, Store};
use crate::worker::{CommandReply, SessionHandle};

/// Runtime settings of the service.
#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub default_backend: BackendKind,
    /// Endpoint used by external-backend sessions that do not name one.
    pub default_endpoint: Option<String>,
    /// Seed given to sessions created without one.
    pub seed: u64,
    /// Allowed browser origin; `None` allows any origin.
    pub cors_origin: Option<String>,
    /// Crawler steps per second while a session runs; 0 disables ticking.
    pub tick_hz: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            data_dir: PathBuf::from("data"),
            default_backend: BackendKind::Sim,
            default_endpoint: None,
            seed: 0,
            cors_origin: None,
            tick_hz: 2.0,
        }
    }
}

/// Body of `POST /sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub experiment: Experiment,
    #[serde(default)]
    pub backend: Option<BackendKind>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Simulator settings; the seed defaults to the session seed.
    #[serde(default)]
    pub sim: Option<SimulatorConfig>,
}

impl CreateSession {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            experiment,
            backend: None,
            endpoint: None,
            seed: None,
            sim: None,
        }
    }
}

/// Registry of live sessions backed by the store.
#[derive(Clone)]
pub struct App {
    inner: Arc<Inner>,
}

struct Inner {
    config: ServiceConfig,
    store: Store,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    closing: watch::Sender<bool>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn connect(descriptor: &SessionDescriptor) -> Result<DeviceHandle, DeviceError> {
    let backend = match descriptor.backend {
        BackendKind::Sim => BackendDescriptor::Sim {
            config: descriptor.sim.clone(),
            rig: descriptor.experiment.rig(),
        },
        BackendKind::External => BackendDescriptor::parse(
            "external",
            descriptor.endpoint.as_deref(),
            SimulatorConfig::default(),
            descriptor.experiment.rig(),
        )?,
    };
    DeviceHandle::connect(backend)
}

impl App {
    /// Opens the data directory and restarts every stored session.
    /// Must run inside a Tokio runtime (crawler tickers are tasks).
    pub fn open(config: ServiceConfig) -> Result<Self, ServiceError> {
        let store = Store::open(&config.data_dir)?;
        let app = Self {
            inner: Arc::new(Inner {
                config,
                store,
                sessions: RwLock::new(HashMap::new()),
                closing: watch::channel(false).0,
            }),
        };
        for id in app.inner.store.list()? {
            match app.restore(&id) {
                Ok(()) => {}
                Err(e) => error!(session = %id, error = %e, "cannot restore session"),
            }
        }
        Ok(app)
    }

    fn restore(&self, id: &str) -> Result<(), ServiceError> {
        let restored = self.inner.store.restore(id)?;
        let device = connect(&restored.descriptor)?;
        if let (Some(sim), SessionState::Crawler(c)) = (device.sim(), restored.session.state()) {
            sim.set_arm(c.current);
        }
        info!(
            session = id,
            seq = restored.session.seq(),
            "restored session"
        );
        self.install(restored.descriptor, restored.session, device);
        Ok(())
    }

    fn install(&self, descriptor: SessionDescriptor, session: Session, device: DeviceHandle) {
        let crawler = descriptor.experiment == Experiment::Crawler;
        let id = descriptor.id.clone();
        let handle = SessionHandle::spawn(descriptor, session, device, self.inner.store.clone());
        if crawler {
            handle.start_ticker(self.inner.config.tick_hz);
        }
        self.inner
            .sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id, handle);
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.inner.config
    }

    pub fn store(&self) -> &Store {
        &self.inner.store
    }

    pub fn create(&self, req: CreateSession) -> Result<SessionDescriptor, ServiceError> {
        let experiment = req.experiment;
        let config = &self.inner.config;
        let backend = req.backend.unwrap_or(config.default_backend);
        let seed = req.seed.unwrap_or(config.seed);
        let endpoint = match backend {
            BackendKind::Sim => None,
            BackendKind::External => req.endpoint.or_else(|| config.default_endpoint.clone()),
        };
        let sim = match req.sim {
            Some(sim) => sim,
            None => SimulatorConfig::default().with_seed(seed),
        };
        sim.validate()?;
        let descriptor = SessionDescriptor {
            id: uuid::Uuid::new_v4().simple().to_string(),
            experiment,
            backend,
            endpoint,
            created_at: now_ms(),
            seed,
            sim,
        };
        let device = connect(&descriptor)?;
        let session = Session::new(experiment, seed);
        self.inner.store.create(&descriptor, &session.snapshot())?;
        info!(session = %descriptor.id, %experiment, "created session");
        self.install(descriptor.clone(), session, device);
        Ok(descriptor)
    }

    pub fn list(&self) -> Vec<SessionDescriptor> {
        let sessions = self
            .inner
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner());
        let mut list: Vec<_> = sessions.values().map(|h| h.descriptor().clone()).collect();
        list.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
        list
    }

    pub fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ServiceError> {
        self.inner
            .sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_owned()))
    }

    /// Stops the session and removes its files.
    pub async fn delete(&self, id: &str) -> Result<(), ServiceError> {
        let handle = self
            .inner
            .sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .remove(id)
            .ok_or_else(|| ServiceError::SessionNotFound(id.to_owned()))?;
        let store = self.inner.store.clone();
        let id = id.to_owned();
        tokio::task::spawn_blocking(move || {
            handle.shutdown();
            store.delete(&id)
        })
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
    }

    pub async fn execute(&self, id: &str, command: Command) -> Result<CommandReply, ServiceError> {
        self.get(id)?.execute(command).await
    }

    /// Logged events with `seq > after`.
    pub async fn events_after(
        &self,
        id: &str,
        after: u64,
    ) -> Result<Vec<SessionEvent>, ServiceError> {
        self.get(id)?;
        let store = self.inner.store.clone();
        let id = id.to_owned();
        tokio::task::spawn_blocking(move || store.read_events(&id, after))
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))?
    }

    /// Decision regions of a fruit session with its current K.
    pub fn boundary(
        &self,
        id: &str,
        resolution: Option<usize>,
    ) -> Result<BoundaryGrid, ServiceError> {
        let snapshot = self.get(id)?.snapshot();
        let SessionState::Fruit(fruit) = &snapshot.state else {
            return Err(ServiceError::Malformed(
                "decision boundaries exist only for fruit sessions".into(),
            ));
        };
        let resolution = resolution.unwrap_or(DEFAULT_BOUNDARY_RESOLUTION);
        if resolution > 1000 {
            return Err(ServiceError::Malformed(format!(
                "resolution {resolution} exceeds 1000"
            )));
        }
        Ok(decision_boundary(
            &fruit.samples,
            fruit.effective_k(),
            resolution,
        )?)
    }

    /// Flips to `true` when the server starts shutting down.
    pub fn closing(&self) -> watch::Receiver<bool> {
        self.inner.closing.subscribe()
    }

    pub fn begin_shutdown(&self) {
        self.inner.closing.send_replace(true);
    }

    /// Stops every worker; queued commands finish first.
    pub fn shutdown(&self) {
        let handles: Vec<_> = self
            .inner
            .sessions
            .write()
            .unwrap_or_else(|e| e.into_inner())
            .drain()
            .map(|(_, h)| h)
            .collect();
        for h in handles {
            h.shutdown();
        }
    }
}
