use serde::{Deserialize, Serialize};

use super::{Change, Command, ControlAction, Decision, Outcome, SessionError};
use crate::derive_seed;
use crate::devices::protocol::{CommandKind, ReplyPayload};
use crate::devices::{DeviceError, DeviceHandle};
use crate::mlcore::{
    q_update, select_action, ActionMode, CrawlerAction, CrawlerState, QParams, QTable,
};

pub const DEFAULT_EPSILON: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunState {
    Idle,
    Running,
    Paused,
}

/// Crawler page: Q-table, training controls and counters.
///
/// Stepping is driven by the caller; the session has no clock of its own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlerSession {
    pub run_state: RunState,
    pub q: QTable,
    pub params: QParams,
    pub current: CrawlerState,
    pub step_count: u64,
    /// Sum of all step rewards since the last reset, in mm.
    pub cumulative_displacement: f64,
    pub last_action_mode: Option<ActionMode>,
    /// Last displacement seen for each transition, `[state][action]`.
    pub observed_rewards: [[Option<f64>; 2]; 4],
    pub seed: u64,
    /// Exploration draws consumed so far.
    pub draws: u64,
}

impl CrawlerSession {
    pub fn new(seed: u64) -> Self {
        Self {
            run_state: RunState::Idle,
            q: QTable::zeros(),
            params: QParams::new(DEFAULT_EPSILON, false).expect("default parameters are valid"),
            current: CrawlerState::ALL[0],
            step_count: 0,
            cumulative_displacement: 0.0,
            last_action_mode: None,
            observed_rewards: [[None; 2]; 4],
            seed,
            draws: 0,
        }
    }

    fn wrong(&self, action: &str) -> SessionError {
        SessionError::WrongRunState {
            current: self.run_state,
            action: action.to_owned(),
        }
    }

    fn move_arm(
        device: &DeviceHandle,
        target: CrawlerState,
    ) -> Result<(CrawlerState, f64), SessionError> {
        match device.request(CommandKind::MoveArm { target })? {
            ReplyPayload::ArmMoved {
                state,
                displacement_mm,
            } => Ok((state, displacement_mm)),
            other => Err(SessionError::Device(DeviceError::Remote {
                code: "unexpected_reply".into(),
                message: format!("unexpected `{}` reply", other.tag()),
            })),
        }
    }

    fn step(&self, device: &DeviceHandle) -> Result<(Outcome, Vec<Change>), SessionError> {
        if self.run_state != RunState::Running {
            return Err(self.wrong("step"));
        }
        let from = self.current;
        let seed = derive_seed(self.seed, self.draws);
        let (action, mode) = select_action(&self.q, from, self.params.epsilon, seed);
        let (to, reward) = Self::move_arm(device, from.step(action))?;
        let q = q_update(&self.q, from, action, reward, to, &self.params);
        Ok((
            Outcome::Stepped {
                action,
                mode,
                reward,
                next: to,
            },
            vec![
                Change::CrawlerQUpdated {
                    state: from,
                    action,
                    value: q.get(from, action),
                },
                Change::CrawlerStepTaken {
                    from,
                    action,
                    mode,
                    reward,
                    to,
                },
            ],
        ))
    }

    fn control(
        &self,
        action: ControlAction,
        device: &DeviceHandle,
    ) -> Result<(Outcome, Vec<Change>), SessionError> {
        let next = match (action, self.run_state) {
            (ControlAction::Start, RunState::Idle) => RunState::Running,
            (ControlAction::Pause, RunState::Running) => RunState::Paused,
            (ControlAction::Resume, RunState::Paused) => RunState::Running,
            (ControlAction::Reset, _) => {
                let home = CrawlerState::ALL[0];
                if self.current != home {
                    Self::move_arm(device, home)?;
                }
                return Ok((
                    Outcome::RunState {
                        state: RunState::Idle,
                    },
                    vec![Change::CrawlerReset],
                ));
            }
            (a, _) => return Err(self.wrong(&format!("{a:?}").to_lowercase())),
        };
        Ok((
            Outcome::RunState { state: next },
            vec![Change::CrawlerRunState { state: next }],
        ))
    }

    pub(crate) fn decide(
        &self,
        command: Command,
        device: &DeviceHandle,
    ) -> Result<Decision, SessionError> {
        let decision = match command {
            Command::CrawlerStep => self.step(device)?,
            Command::CrawlerControl { action } => self.control(action, device)?,
            Command::CrawlerSetParams { epsilon, discount } => {
                let mut params = self.params;
                if let Some(e) = epsilon {
                    params.epsilon = e;
                }
                if let Some(d) = discount {
                    params.gamma = if d { 1.0 } else { 0.0 };
                }
                params.validate()?;
                (
                    Outcome::Done,
                    vec![Change::CrawlerParams {
                        epsilon: params.epsilon,
                        gamma: params.gamma,
                    }],
                )
            }
            _ => return Ok(None),
        };
        Ok(Some(decision))
    }

    pub(crate) fn apply(&mut self, change: &Change) -> bool {
        match change {
            Change::CrawlerQUpdated {
                state,
                action,
                value,
            } => self.q.set(*state, *action, *value),
            Change::CrawlerStepTaken {
                from,
                action,
                mode,
                reward,
                to,
            } => {
                self.current = *to;
                self.step_count += 1;
                self.cumulative_displacement += reward;
                self.last_action_mode = Some(*mode);
                self.observed_rewards[from.index()][action.index()] = Some(*reward);
                self.draws += 1;
            }
            Change::CrawlerRunState { state } => self.run_state = *state,
            Change::CrawlerReset => {
                self.run_state = RunState::Idle;
                self.q = QTable::zeros();
                self.current = CrawlerState::ALL[0];
                self.step_count = 0;
                self.cumulative_displacement = 0.0;
                self.last_action_mode = None;
                self.observed_rewards = [[None; 2]; 4];
            }
            Change::CrawlerParams { epsilon, gamma } => {
                self.params.epsilon = *epsilon;
                self.params.gamma = *gamma;
            }
            _ => return false,
        }
        true
    }

    pub fn greedy_action(&self, s: CrawlerState) -> CrawlerAction {
        self.q.argmax(s)
    }
}
