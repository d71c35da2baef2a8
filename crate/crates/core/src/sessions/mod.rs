//! Experiment sessions: one state machine per experiment page.
//!
//! A session only changes through [`Change`] values. Executing a command
//! talks to the device, decides which changes happened and commits them;
//! each commit bumps the sequence number and yields one [`SessionEvent`].
//! Replaying the events onto a fresh session reproduces its state exactly.

mod crawler;
mod fruit;
mod pitcher;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{DeviceError, DeviceHandle, Rig};
use crate::mlcore::{
    ActionMode, Classification, CrawlerAction, CrawlerState, FeaturePoint, FruitLabel, LaunchPoint,
    LineModel, MlError, Sample, SampleId,
};

pub use crawler::{CrawlerSession, RunState, DEFAULT_EPSILON};
pub use fruit::{FruitSession, LastClassification, DEFAULT_K};
pub use pitcher::{PitcherSession, ShotResult, DEFAULT_SPEED};

/// Version of the snapshot and event-log JSON layout.
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Fruit,
    Pitcher,
    Crawler,
}

impl Experiment {
    pub fn rig(self) -> Rig {
        match self {
            Experiment::Fruit => Rig::FruitDetector,
            Experiment::Pitcher => Rig::Pitcher,
            Experiment::Crawler => Rig::Crawler,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Experiment::Fruit => "fruit",
            Experiment::Pitcher => "pitcher",
            Experiment::Crawler => "crawler",
        })
    }
}

impl std::str::FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fruit" => Ok(Experiment::Fruit),
            "pitcher" => Ok(Experiment::Pitcher),
            "crawler" => Ok(Experiment::Crawler),
            other => Err(format!("unknown experiment `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Training,
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Resume,
    Reset,
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("not allowed in {current:?} mode")]
    WrongMode { current: Mode },
    #[error("cannot {action} while {current:?}")]
    WrongRunState { current: RunState, action: String },
    #[error("{0} not found")]
    NotFound(String),
    #[error("`{command}` does not apply to a {experiment} session")]
    WrongExperiment {
        command: &'static str,
        experiment: Experiment,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Ml(#[from] MlError),
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("event log does not fit this session: {0}")]
    Replay(String),
}

/// Every operation a client can ask a session to perform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    SetMode {
        mode: Mode,
    },
    FruitRecord {
        label: FruitLabel,
    },
    FruitEditLabel {
        id: SampleId,
        label: FruitLabel,
    },
    FruitDelete {
        id: SampleId,
    },
    FruitClassify,
    /// Classifies a hand-placed point without reading the sensors.
    FruitClassifyPoint {
        color: f64,
        length: f64,
    },
    FruitSetK {
        k: usize,
    },
    FruitShowBoundary {
        visible: bool,
    },
    PitcherSetSpeed {
        speed: f64,
    },
    PitcherLaunchAndMeasure,
    PitcherDeletePoint {
        index: usize,
    },
    PitcherSetLine {
        slope: f64,
        intercept: f64,
    },
    PitcherAutofit,
    PitcherTargetShot {
        target: f64,
    },
    CrawlerStep,
    CrawlerControl {
        action: ControlAction,
    },
    CrawlerSetParams {
        #[serde(default)]
        epsilon: Option<f64>,
        #[serde(default)]
        discount: Option<bool>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SetMode { .. } => "set_mode",
            Command::FruitRecord { .. } => "fruit_record",
            Command::FruitEditLabel { .. } => "fruit_edit_label",
            Command::FruitDelete { .. } => "fruit_delete",
            Command::FruitClassify => "fruit_classify",
            Command::FruitClassifyPoint { .. } => "fruit_classify_point",
            Command::FruitSetK { .. } => "fruit_set_k",
            Command::FruitShowBoundary { .. } => "fruit_show_boundary",
            Command::PitcherSetSpeed { .. } => "pitcher_set_speed",
            Command::PitcherLaunchAndMeasure => "pitcher_launch_and_measure",
            Command::PitcherDeletePoint { .. } => "pitcher_delete_point",
            Command::PitcherSetLine { .. } => "pitcher_set_line",
            Command::PitcherAutofit => "pitcher_autofit",
            Command::PitcherTargetShot { .. } => "pitcher_target_shot",
            Command::CrawlerStep => "crawler_step",
            Command::CrawlerControl { .. } => "crawler_control",
            Command::CrawlerSetParams { .. } => "crawler_set_params",
        }
    }
}

/// What a command returned to its caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Done,
    Recorded {
        sample: Sample,
    },
    Classified {
        result: Classification,
    },
    Measured {
        point: LaunchPoint,
    },
    Loss {
        loss: f64,
    },
    Fitted {
        line: LineModel,
        loss: f64,
    },
    Shot {
        shot: ShotResult,
    },
    Stepped {
        action: CrawlerAction,
        mode: ActionMode,
        reward: f64,
        next: CrawlerState,
    },
    RunState {
        state: RunState,
    },
}

/// A single state transition of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum Change {
    ModeChanged {
        mode: Mode,
    },
    FruitSampleAdded {
        sample: Sample,
    },
    FruitSampleEdited {
        id: SampleId,
        label: FruitLabel,
    },
    FruitSampleDeleted {
        id: SampleId,
    },
    FruitSettings {
        k: usize,
        boundary_visible: bool,
    },
    FruitClassified {
        query: FeaturePoint,
        result: Classification,
    },
    PitcherSpeedSet {
        speed: f64,
    },
    PitcherPointAdded {
        point: LaunchPoint,
    },
    PitcherPointDeleted {
        index: usize,
    },
    PitcherLineSet {
        line: LineModel,
    },
    PitcherFitComputed {
        line: LineModel,
    },
    PitcherShotFired {
        shot: ShotResult,
    },
    CrawlerQUpdated {
        state: CrawlerState,
        action: CrawlerAction,
        value: f64,
    },
    CrawlerStepTaken {
        from: CrawlerState,
        action: CrawlerAction,
        mode: ActionMode,
        reward: f64,
        to: CrawlerState,
    },
    CrawlerRunState {
        state: RunState,
    },
    CrawlerReset,
    CrawlerParams {
        epsilon: f64,
        gamma: f64,
    },
}

/// Coarse event category, as shown to stream consumers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    SampleAdded,
    SampleEdited,
    SampleDeleted,
    ModeChanged,
    ParamsChanged,
    Classified,
    LineChanged,
    FitComputed,
    ShotFired,
    QUpdated,
    StepTaken,
    StatusChanged,
}

impl Change {
    pub fn kind(&self) -> EventKind {
        match self {
            Change::ModeChanged { .. } => EventKind::ModeChanged,
            Change::FruitSampleAdded { .. } | Change::PitcherPointAdded { .. } => {
                EventKind::SampleAdded
            }
            Change::FruitSampleEdited { .. } => EventKind::SampleEdited,
            Change::FruitSampleDeleted { .. } | Change::PitcherPointDeleted { .. } => {
                EventKind::SampleDeleted
            }
            Change::FruitSettings { .. }
            | Change::PitcherSpeedSet { .. }
            | Change::CrawlerParams { .. } => EventKind::ParamsChanged,
            Change::FruitClassified { .. } => EventKind::Classified,
            Change::PitcherLineSet { .. } => EventKind::LineChanged,
            Change::PitcherFitComputed { .. } => EventKind::FitComputed,
            Change::PitcherShotFired { .. } => EventKind::ShotFired,
            Change::CrawlerQUpdated { .. } => EventKind::QUpdated,
            Change::CrawlerStepTaken { .. } => EventKind::StepTaken,
            Change::CrawlerRunState { .. } | Change::CrawlerReset => EventKind::StatusChanged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "lowercase")]
pub enum SessionState {
    Fruit(FruitSession),
    Pitcher(PitcherSession),
    Crawler(CrawlerSession),
}

impl SessionState {
    pub fn experiment(&self) -> Experiment {
        match self {
            SessionState::Fruit(_) => Experiment::Fruit,
            SessionState::Pitcher(_) => Experiment::Pitcher,
            SessionState::Crawler(_) => Experiment::Crawler,
        }
    }

    fn apply(&mut self, change: &Change) -> Result<(), SessionError> {
        let applied = match self {
            SessionState::Fruit(s) => s.apply(change),
            SessionState::Pitcher(s) => s.apply(change),
            SessionState::Crawler(s) => s.apply(change),
        };
        if applied {
            Ok(())
        } else {
            Err(SessionError::Replay(format!(
                "{:?} cannot be applied to a {} session",
                change.kind(),
                self.experiment()
            )))
        }
    }
}

/// One committed change, numbered, with the state it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub seq: u64,
    pub kind: EventKind,
    pub change: Change,
    pub snapshot: SessionState,
}

/// Serialized form of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub seq: u64,
    pub state: SessionState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Executed {
    pub outcome: Outcome,
    pub events: Vec<SessionEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    seq: u64,
    state: SessionState,
}

impl Session {
    /// A fresh session with default settings. `seed` drives the crawler's
    /// exploration draws.
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        let state = match experiment {
            Experiment::Fruit => SessionState::Fruit(FruitSession::default()),
            Experiment::Pitcher => SessionState::Pitcher(PitcherSession::default()),
            Experiment::Crawler => SessionState::Crawler(CrawlerSession::new(seed)),
        };
        Self { seq: 0, state }
    }

    pub fn from_snapshot(snapshot: Snapshot) -> Result<Self, SessionError> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(SessionError::Replay(format!(
                "unsupported snapshot version {}",
                snapshot.version
            )));
        }
        Ok(Self {
            seq: snapshot.seq,
            state: snapshot.state,
        })
    }

    pub fn experiment(&self) -> Experiment {
        self.state.experiment()
    }

    /// Sequence number of the last committed event (0 when none).
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            version: SNAPSHOT_VERSION,
            seq: self.seq,
            state: self.state.clone(),
        }
    }

    fn commit(&mut self, change: Change) -> Result<SessionEvent, SessionError> {
        self.state.apply(&change)?;
        self.seq += 1;
        Ok(SessionEvent {
            seq: self.seq,
            kind: change.kind(),
            change,
            snapshot: self.state.clone(),
        })
    }

    /// Applies a logged event during replay.
    pub fn apply(&mut self, event: &SessionEvent) -> Result<(), SessionError> {
        if event.seq != self.seq + 1 {
            return Err(SessionError::Replay(format!(
                "expected event {}, got {}",
                self.seq + 1,
                event.seq
            )));
        }
        self.commit(event.change.clone()).map(|_| ())
    }

    /// Folds an event log onto a fresh session.
    pub fn replay<'a>(
        experiment: Experiment,
        seed: u64,
        events: impl IntoIterator<Item = &'a SessionEvent>,
    ) -> Result<Self, SessionError> {
        let mut session = Session::new(experiment, seed);
        for e in events {
            session.apply(e)?;
        }
        Ok(session)
    }

    /// Runs one command against `device`. On error nothing is committed.
    pub fn execute(
        &mut self,
        command: Command,
        device: &DeviceHandle,
    ) -> Result<Executed, SessionError> {
        let name = command.name();
        let (outcome, changes) = match (&self.state, command) {
            (SessionState::Fruit(s), cmd) => s.decide(cmd, device)?,
            (SessionState::Pitcher(s), cmd) => s.decide(cmd, device)?,
            (SessionState::Crawler(s), cmd) => s.decide(cmd, device)?,
        }
        .ok_or(SessionError::WrongExperiment {
            command: name,
            experiment: self.experiment(),
        })?;
        let mut events = Vec::with_capacity(changes.len());
        for change in changes {
            events.push(self.commit(change)?);
        }
        Ok(Executed { outcome, events })
    }
}

/// `None` when the command belongs to another experiment.
pub(crate) type Decision = Option<(Outcome, Vec<Change>)>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_json_shape() {
        let cmd: Command =
            serde_json::from_str(r#"{"command":"fruit_record","label":"Apple"}"#).unwrap();
        assert_eq!(
            cmd,
            Command::FruitRecord {
                label: FruitLabel::Apple
            }
        );
        let cmd: Command =
            serde_json::from_str(r#"{"command":"crawler_set_params","epsilon":0.2}"#).unwrap();
        assert_eq!(
            cmd,
            Command::CrawlerSetParams {
                epsilon: Some(0.2),
                discount: None
            }
        );
        assert!(serde_json::from_str::<Command>(r#"{"command":"fly"}"#).is_err());
        assert!(
            serde_json::from_str::<Command>(r#"{"command":"fruit_set_k","k":1,"x":1}"#).is_err()
        );
    }

    #[test]
    fn snapshot_has_version_field() {
        let snap = Session::new(Experiment::Fruit, 0).snapshot();
        let v: serde_json::Value = serde_json::to_value(&snap).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["state"]["experiment"], "fruit");
    }

    #[test]
    fn replay_rejects_gaps() {
        let mut s = Session::new(Experiment::Pitcher, 0);
        let event = SessionEvent {
            seq: 2,
            kind: EventKind::ParamsChanged,
            change: Change::PitcherSpeedSet { speed: 10.0 },
            snapshot: s.state().clone(),
        };
        assert!(matches!(s.apply(&event), Err(SessionError::Replay(_))));
    }

    #[test]
    fn replay_rejects_foreign_changes() {
        let mut s = Session::new(Experiment::Pitcher, 0);
        let event = SessionEvent {
            seq: 1,
            kind: EventKind::StatusChanged,
            change: Change::CrawlerReset,
            snapshot: s.state().clone(),
        };
        assert!(matches!(s.apply(&event), Err(SessionError::Replay(_))));
        assert_eq!(s.seq(), 0);
    }
}
