//! File-backed session persistence.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<id>/descriptor.json   immutable session metadata
//! sessions/<id>/events.jsonl      append-only event log, one event per line
//! sessions/<id>/snapshot.json     latest state, rewritten after every command
//! ```
//!
//! The log is the source of truth. Appends are fsynced before a command is
//! acknowledged; the snapshot is a cache that is rebuilt from the log when
//! it is missing or behind.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use bricks_core::devices::SimulatorConfig;
use bricks_core::sessions::{Experiment, Session, SessionEvent, Snapshot};
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::ServiceError;

const DESCRIPTOR: &str = "descriptor.json";
const SNAPSHOT: &str = "snapshot.json";
const EVENTS: &str = "events.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Sim,
    External,
}

/// Immutable metadata of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionDescriptor {
    pub id: String,
    pub experiment: Experiment,
    pub backend: BackendKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Milliseconds since the Unix epoch.
    pub created_at: u64,
    /// Seed for the crawler's exploration draws.
    pub seed: u64,
    /// Simulator settings; only meaningful for the sim backend.
    #[serde(default)]
    pub sim: SimulatorConfig,
}

/// A session rebuilt from disk.
#[derive(Debug)]
pub struct Restored {
    pub descriptor: SessionDescriptor,
    pub session: Session,
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    sync_dir(path.parent().unwrap_or(Path::new(".")))
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directories cannot be opened for syncing on every platform.
    match File::open(dir) {
        Ok(d) => d.sync_all().or(Ok(())),
        Err(_) => Ok(()),
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 64
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Store {
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = data_dir.into().join("sessions");
        fs::create_dir_all(&root).map_err(|e| ServiceError::io(&root, e))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn dir(&self, id: &str) -> Result<PathBuf, ServiceError> {
        if !valid_id(id) {
            return Err(ServiceError::SessionNotFound(id.to_owned()));
        }
        Ok(self.root.join(id))
    }

    pub fn create(
        &self,
        descriptor: &SessionDescriptor,
        snapshot: &Snapshot,
    ) -> Result<(), ServiceError> {
        let dir = self.dir(&descriptor.id)?;
        fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        let events = dir.join(EVENTS);
        File::create(&events)
            .and_then(|f| f.sync_all())
            .map_err(|e| ServiceError::io(&events, e))?;
        self.write_snapshot(&descriptor.id, snapshot)?;
        let path = dir.join(DESCRIPTOR);
        let json = serde_json::to_vec_pretty(descriptor).map_err(ServiceError::Encode)?;
        write_atomic(&path, &json).map_err(|e| ServiceError::io(&path, e))?;
        sync_dir(&self.root).map_err(|e| ServiceError::io(&self.root, e))
    }

    /// Appends events and waits until they are on disk.
    pub fn append(&self, id: &str, events: &[SessionEvent]) -> Result<(), ServiceError> {
        if events.is_empty() {
            return Ok(());
        }
        let path = self.dir(id)?.join(EVENTS);
        let mut buf = Vec::new();
        for e in events {
            serde_json::to_writer(&mut buf, e).map_err(ServiceError::Encode)?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| ServiceError::io(&path, e))?;
        let len = f.metadata().map_err(|e| ServiceError::io(&path, e))?.len();
        if let Err(e) = f.write_all(&buf).and_then(|_| f.sync_data()) {
            // Leave no half-written line behind for the next append.
            let _ = f.set_len(len);
            return Err(ServiceError::io(&path, e));
        }
        Ok(())
    }

    pub fn write_snapshot(&self, id: &str, snapshot: &Snapshot) -> Result<(), ServiceError> {
        let path = self.dir(id)?.join(SNAPSHOT);
        let json = serde_json::to_vec(snapshot).map_err(ServiceError::Encode)?;
        write_atomic(&path, &json).map_err(|e| ServiceError::io(&path, e))
    }

    pub fn read_snapshot(&self, id: &str) -> Result<Option<Snapshot>, ServiceError> {
        let path = self.dir(id)?.join(SNAPSHOT);
        match fs::read(&path) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes).ok()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(ServiceError::io(&path, e)),
        }
    }

    pub fn read_descriptor(&self, id: &str) -> Result<SessionDescriptor, ServiceError> {
        let path = self.dir(id)?.join(DESCRIPTOR);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ServiceError::SessionNotFound(id.to_owned()),
            _ => ServiceError::io(&path, e),
        })?;
        serde_json::from_slice(&bytes).map_err(|e| ServiceError::Corrupt {
            path,
            message: e.to_string(),
        })
    }

    /// Events with `seq > after`, in order. A torn final line (a crash in
    /// the middle of an append) is skipped; a bad line elsewhere is an error.
    pub fn read_events(&self, id: &str, after: u64) -> Result<Vec<SessionEvent>, ServiceError> {
        Ok(self
            .scan_events(id)?
            .0
            .into_iter()
            .filter(|e| e.seq > after)
            .collect())
    }

    /// All complete events plus the byte length of the well-formed prefix.
    fn scan_events(&self, id: &str) -> Result<(Vec<SessionEvent>, u64), ServiceError> {
        let path = self.dir(id)?.join(EVENTS);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(ServiceError::SessionNotFound(id.to_owned()))
            }
            Err(e) => return Err(ServiceError::io(&path, e)),
        };
        let mut reader = BufReader::new(file);
        let mut events = Vec::new();
        let mut good = 0u64;
        let mut line = Vec::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader
                .read_until(b'\n', &mut line)
                .map_err(|e| ServiceError::io(&path, e))?;
            if n == 0 {
                break;
            }
            lineno += 1;
            let complete = line.last() == Some(&b'\n');
            match serde_json::from_slice::<SessionEvent>(&line) {
                Ok(e) if complete => {
                    events.push(e);
                    good += n as u64;
                }
                Ok(_) => break,
                Err(_) if !complete => break,
                Err(err) => {
                    return Err(ServiceError::Corrupt {
                        path,
                        message: format!("line {lineno}: {err}"),
                    })
                }
            }
        }
        Ok((events, good))
    }

    pub fn list(&self) -> Result<Vec<String>, ServiceError> {
        let mut ids = Vec::new();
        let entries = fs::read_dir(&self.root).map_err(|e| ServiceError::io(&self.root, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| ServiceError::io(&self.root, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if valid_id(&name) && entry.path().join(DESCRIPTOR).is_file() {
                ids.push(name);
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Rebuilds a session from its log. A torn tail is cut off and a stale
    /// or missing snapshot is rewritten, so the files agree afterwards.
    pub fn restore(&self, id: &str) -> Result<Restored, ServiceError> {
        let descriptor = self.read_descriptor(id)?;
        let (events, good) = self.scan_events(id)?;
        let path = self.dir(id)?.join(EVENTS);
        let len = fs::metadata(&path)
            .map_err(|e| ServiceError::io(&path, e))?
            .len();
        if len > good {
            warn!(
                session = id,
                bytes = len - good,
                "dropping torn event log tail"
            );
            let f = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(|e| ServiceError::io(&path, e))?;
            f.set_len(good)
                .and_then(|_| f.sync_all())
                .map_err(|e| ServiceError::io(&path, e))?;
        }
        let session = Session::replay(descriptor.experiment, descriptor.seed, events.iter())
            .map_err(|e| ServiceError::Corrupt {
                path: path.clone(),
                message: e.to_string(),
            })?;
        let snapshot = session.snapshot();
        if self.read_snapshot(id)?.as_ref() != Some(&snapshot) {
            warn!(
                session = id,
                seq = snapshot.seq,
                "rewriting snapshot from event log"
            );
            self.write_snapshot(id, &snapshot)?;
        }
        Ok(Restored {
            descriptor,
            session,
        })
    }

    pub fn delete(&self, id: &str) -> Result<(), ServiceError> {
        let dir = self.dir(id)?;
        match fs::remove_dir_all(&dir) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                Err(ServiceError::SessionNotFound(id.to_owned()))
            }
            Err(e) => Err(ServiceError::io(&dir, e)),
        }
    }
}
