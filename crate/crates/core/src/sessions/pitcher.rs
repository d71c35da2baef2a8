use serde::{Deserialize, Serialize};

use super::{Change, Command, Decision, Mode, Outcome, SessionError};
use crate::devices::protocol::{CommandKind, ReplyPayload};
use crate::devices::{DeviceError, DeviceHandle};
use crate::mlcore::{fit_line, invert_line, loss, LaunchPoint, LineModel, MlError};

pub const DEFAULT_SPEED: f64 = 50.0;

/// A launch aimed at a target using the current line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShotResult {
    pub target: f64,
    pub speed: f64,
    pub clamped: bool,
    pub landed: f64,
}

/// Pitcher page: launch measurements and the student's line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PitcherSession {
    pub mode: Mode,
    pub points: Vec<LaunchPoint>,
    pub current_speed: f64,
    pub line: LineModel,
    /// Mean squared error of `line` over `points`; `None` without points.
    pub last_loss: Option<f64>,
    pub last_shot: Option<ShotResult>,
}

impl Default for PitcherSession {
    fn default() -> Self {
        Self {
            mode: Mode::Training,
            points: Vec::new(),
            current_speed: DEFAULT_SPEED,
            line: LineModel::default(),
            last_loss: None,
            last_shot: None,
        }
    }
}

/// Launch at `speed`, then read where the ball landed (cm).
fn launch_and_read(device: &DeviceHandle, speed: f64) -> Result<f64, SessionError> {
    let bad = |payload: ReplyPayload| {
        SessionError::Device(DeviceError::Remote {
            code: "unexpected_reply".into(),
            message: format!("unexpected `{}` reply", payload.tag()),
        })
    };
    match device.request(CommandKind::Launch { speed })? {
        ReplyPayload::LaunchDone => {}
        other => return Err(bad(other)),
    }
    match device.request(CommandKind::ReadDistance)? {
        ReplyPayload::DistanceMm { value } => Ok(value / 10.0),
        other => Err(bad(other)),
    }
}

impl PitcherSession {
    fn require(&self, mode: Mode) -> Result<(), SessionError> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(SessionError::WrongMode { current: self.mode })
        }
    }

    pub(crate) fn decide(
        &self,
        command: Command,
        device: &DeviceHandle,
    ) -> Result<Decision, SessionError> {
        let decision = match command {
            Command::SetMode { mode } => (Outcome::Done, vec![Change::ModeChanged { mode }]),
            Command::PitcherSetSpeed { speed } => {
                self.require(Mode::Training)?;
                if !(0.0..=100.0).contains(&speed) {
                    return Err(MlError::OutOfRange {
                        field: "speed",
                        value: speed,
                    }
                    .into());
                }
                (Outcome::Done, vec![Change::PitcherSpeedSet { speed }])
            }
            Command::PitcherLaunchAndMeasure => {
                self.require(Mode::Training)?;
                let distance = launch_and_read(device, self.current_speed)?;
                let point = LaunchPoint::new(self.current_speed, distance)?;
                (
                    Outcome::Measured { point },
                    vec![Change::PitcherPointAdded { point }],
                )
            }
            Command::PitcherDeletePoint { index } => {
                if index >= self.points.len() {
                    return Err(SessionError::NotFound(format!("point {index}")));
                }
                (Outcome::Done, vec![Change::PitcherPointDeleted { index }])
            }
            Command::PitcherSetLine { slope, intercept } => {
                self.require(Mode::Inference)?;
                let line = LineModel::new(slope, intercept)?;
                let l = loss(&self.points, &line)?;
                (
                    Outcome::Loss { loss: l },
                    vec![Change::PitcherLineSet { line }],
                )
            }
            Command::PitcherAutofit => {
                self.require(Mode::Inference)?;
                let line = fit_line(&self.points)?;
                let l = loss(&self.points, &line)?;
                (
                    Outcome::Fitted { line, loss: l },
                    vec![Change::PitcherFitComputed { line }],
                )
            }
            Command::PitcherTargetShot { target } => {
                self.require(Mode::Inference)?;
                let inv = invert_line(&self.line, target)?;
                let landed = launch_and_read(device, inv.speed)?;
                let shot = ShotResult {
                    target,
                    speed: inv.speed,
                    clamped: inv.clamped,
                    landed,
                };
                (
                    Outcome::Shot { shot },
                    vec![Change::PitcherShotFired { shot }],
                )
            }
            _ => return Ok(None),
        };
        Ok(Some(decision))
    }

    fn refresh_loss(&mut self) {
        self.last_loss = loss(&self.points, &self.line).ok();
    }

    pub(crate) fn apply(&mut self, change: &Change) -> bool {
        match change {
            Change::ModeChanged { mode } => self.mode = *mode,
            Change::PitcherSpeedSet { speed } => self.current_speed = *speed,
            Change::PitcherPointAdded { point } => {
                self.points.push(*point);
                self.refresh_loss();
            }
            Change::PitcherPointDeleted { index } => {
                if *index < self.points.len() {
                    self.points.remove(*index);
                }
                self.refresh_loss();
            }
            Change::PitcherLineSet { line } | Change::PitcherFitComputed { line } => {
                self.line = *line;
                self.refresh_loss();
            }
            Change::PitcherShotFired { shot } => self.last_shot = Some(*shot),
            _ => return false,
        }
        true
    }
}
