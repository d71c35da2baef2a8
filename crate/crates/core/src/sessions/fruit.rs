use serde::{Deserialize, Serialize};

use super::{Change, Command, Decision, Mode, Outcome, SessionError};
use crate::devices::protocol::{CommandKind, ReplyPayload};
use crate::devices::{DeviceError, DeviceHandle};
use crate::mlcore::{
    knn_classify, Classification, FeaturePoint, MlError, Sample, SampleId, MAX_COLOR, MAX_LENGTH_MM,
};

pub const DEFAULT_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LastClassification {
    pub query: FeaturePoint,
    pub label: crate::mlcore::FruitLabel,
    pub neighbors: Vec<SampleId>,
}

/// Fruit detector page: recorded samples and the KNN settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FruitSession {
    pub mode: Mode,
    pub samples: Vec<Sample>,
    pub next_id: u64,
    pub k: usize,
    pub boundary_visible: bool,
    pub last_classification: Option<LastClassification>,
}

impl Default for FruitSession {
    fn default() -> Self {
        Self {
            mode: Mode::Training,
            samples: Vec::new(),
            next_id: 0,
            k: DEFAULT_K,
            boundary_visible: false,
            last_classification: None,
        }
    }
}

fn unexpected(payload: ReplyPayload) -> SessionError {
    SessionError::Device(DeviceError::Remote {
        code: "unexpected_reply".into(),
        message: format!("unexpected `{}` reply", payload.tag()),
    })
}

/// ReadColor then ReadDistance, clamped to the plot ranges.
pub(crate) fn read_specimen(device: &DeviceHandle) -> Result<FeaturePoint, SessionError> {
    let color = match device.request(CommandKind::ReadColor)? {
        ReplyPayload::Green { value } => f64::from(value),
        other => return Err(unexpected(other)),
    };
    let length = match device.request(CommandKind::ReadDistance)? {
        ReplyPayload::DistanceMm { value } => value,
        other => return Err(unexpected(other)),
    };
    Ok(FeaturePoint {
        color: color.clamp(0.0, MAX_COLOR),
        length: length.clamp(0.0, MAX_LENGTH_MM),
    })
}

impl FruitSession {
    /// K actually used for voting: never more than the number of samples.
    pub fn effective_k(&self) -> usize {
        self.k.min(self.samples.len()).max(1)
    }

    pub fn sample(&self, id: SampleId) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn classify(&self, query: FeaturePoint) -> Result<Classification, MlError> {
        knn_classify(&self.samples, query, self.effective_k())
    }

    fn require(&self, mode: Mode) -> Result<(), SessionError> {
        if self.mode == mode {
            Ok(())
        } else {
            Err(SessionError::WrongMode { current: self.mode })
        }
    }

    fn require_sample(&self, id: SampleId) -> Result<(), SessionError> {
        self.sample(id)
            .map(|_| ())
            .ok_or_else(|| SessionError::NotFound(format!("sample {id}")))
    }

    fn classified(query: FeaturePoint, result: Classification) -> (Outcome, Vec<Change>) {
        (
            Outcome::Classified {
                result: result.clone(),
            },
            vec![Change::FruitClassified { query, result }],
        )
    }

    pub(crate) fn decide(
        &self,
        command: Command,
        device: &DeviceHandle,
    ) -> Result<Decision, SessionError> {
        let decision = match command {
            Command::SetMode { mode } => (Outcome::Done, vec![Change::ModeChanged { mode }]),
            Command::FruitRecord { label } => {
                self.require(Mode::Training)?;
                let point = read_specimen(device)?;
                let sample = Sample {
                    id: SampleId(self.next_id),
                    point,
                    label,
                };
                (
                    Outcome::Recorded { sample },
                    vec![Change::FruitSampleAdded { sample }],
                )
            }
            Command::FruitEditLabel { id, label } => {
                self.require_sample(id)?;
                (Outcome::Done, vec![Change::FruitSampleEdited { id, label }])
            }
            Command::FruitDelete { id } => {
                self.require_sample(id)?;
                (Outcome::Done, vec![Change::FruitSampleDeleted { id }])
            }
            Command::FruitClassify => {
                self.require(Mode::Inference)?;
                if self.samples.is_empty() {
                    return Err(MlError::NoTrainingData.into());
                }
                let query = read_specimen(device)?;
                Self::classified(query, self.classify(query)?)
            }
            Command::FruitClassifyPoint { color, length } => {
                self.require(Mode::Inference)?;
                let query = FeaturePoint::new(color, length)?;
                Self::classified(query, self.classify(query)?)
            }
            Command::FruitSetK { k } => {
                let max = self.samples.len().max(1);
                if k == 0 || k > max {
                    return Err(MlError::InvalidK { k, max }.into());
                }
                (
                    Outcome::Done,
                    vec![Change::FruitSettings {
                        k,
                        boundary_visible: self.boundary_visible,
                    }],
                )
            }
            Command::FruitShowBoundary { visible } => (
                Outcome::Done,
                vec![Change::FruitSettings {
                    k: self.k,
                    boundary_visible: visible,
                }],
            ),
            _ => return Ok(None),
        };
        Ok(Some(decision))
    }

    /// Recomputes a shown classification after the data or K changed.
    fn refresh_classification(&mut self) {
        if let Some(last) = self.last_classification.take() {
            self.last_classification = self.classify(last.query).ok().map(|c| LastClassification {
                query: last.query,
                label: c.label,
                neighbors: c.neighbors,
            });
        }
    }

    pub(crate) fn apply(&mut self, change: &Change) -> bool {
        match change {
            Change::ModeChanged { mode } => {
                self.mode = *mode;
                if *mode == Mode::Training {
                    self.last_classification = None;
                }
            }
            Change::FruitSampleAdded { sample } => {
                self.samples.push(*sample);
                self.next_id = self.next_id.max(sample.id.0 + 1);
                self.refresh_classification();
            }
            Change::FruitSampleEdited { id, label } => {
                if let Some(s) = self.samples.iter_mut().find(|s| s.id == *id) {
                    s.label = *label;
                }
                self.refresh_classification();
            }
            Change::FruitSampleDeleted { id } => {
                self.samples.retain(|s| s.id != *id);
                if self.k > self.samples.len() {
                    self.k = self.samples.len().max(1);
                }
                self.refresh_classification();
            }
            Change::FruitSettings {
                k,
                boundary_visible,
            } => {
                self.k = *k;
                self.boundary_visible = *boundary_visible;
                self.refresh_classification();
            }
            Change::FruitClassified { query, result } => {
                self.last_classification = Some(LastClassification {
                    query: *query,
                    label: result.label,
                    neighbors: result.neighbors.clone(),
                });
            }
            _ => return false,
        }
        true
    }
}
