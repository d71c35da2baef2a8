//! Deterministic stand-in for the three robots.
//!
//! The numeric parameters below are classroom-scale constants chosen so the
//! experiments behave like the real builds: two well separated fruit
//! clusters, a linear launch curve with visible scatter, and an arm whose
//! greedy one-step policy gets stuck.

use std::sync::{Arc, Mutex, MutexGuard};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::protocol::{CommandKind, DeviceCommand, DeviceReply, ReplyPayload};
use super::DeviceError;
use crate::derive_seed;
use crate::mlcore::{
    CrawlerAction, CrawlerState, DisplacementTable, FeaturePoint, MAX_COLOR, MAX_LENGTH_MM,
};

/// Crawler displacement in mm, `[state][Forward, Backward]`.
///
/// Forward: s0->s1 0, s1->s2 -1, s2->s3 +5, s3->s0 0.
/// Backward is the exact reverse of each forward move.
pub const REFERENCE_DISPLACEMENTS: DisplacementTable =
    DisplacementTable::new([[0.0, 0.0], [-1.0, 0.0], [5.0, 1.0], [0.0, -5.0]]);

/// Distance from the reference wall when the simulated crawler starts.
const CRAWLER_START_MM: f64 = 200.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FruitKind {
    Apple,
    Banana,
    Orange,
}

impl std::str::FromStr for FruitKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "apple" => Ok(FruitKind::Apple),
            "banana" => Ok(FruitKind::Banana),
            "orange" => Ok(FruitKind::Orange),
            other => Err(format!("unknown fruit `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FruitGaussian {
    pub color_mean: f64,
    pub color_sigma: f64,
    pub length_mean: f64,
    pub length_sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FruitParams {
    pub apple: FruitGaussian,
    pub banana: FruitGaussian,
    pub orange: FruitGaussian,
}

impl FruitParams {
    pub fn get(&self, kind: FruitKind) -> &FruitGaussian {
        match kind {
            FruitKind::Apple => &self.apple,
            FruitKind::Banana => &self.banana,
            FruitKind::Orange => &self.orange,
        }
    }
}

impl Default for FruitParams {
    fn default() -> Self {
        Self {
            apple: FruitGaussian {
                color_mean: 100.0,
                color_sigma: 15.0,
                length_mean: 75.0,
                length_sigma: 8.0,
            },
            banana: FruitGaussian {
                color_mean: 200.0,
                color_sigma: 20.0,
                length_mean: 180.0,
                length_sigma: 15.0,
            },
            orange: FruitGaussian {
                color_mean: 130.0,
                color_sigma: 10.0,
                length_mean: 70.0,
                length_sigma: 5.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulatorConfig {
    /// cm per speed percent
    pub pitcher_slope: f64,
    /// cm
    pub pitcher_intercept: f64,
    /// cm
    pub pitcher_noise_sigma: f64,
    pub fruit: FruitParams,
    pub crawler_displacements: DisplacementTable,
    pub seed: u64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            pitcher_slope: 2.0,
            pitcher_intercept: -30.0,
            pitcher_noise_sigma: 3.0,
            fruit: FruitParams::default(),
            crawler_displacements: REFERENCE_DISPLACEMENTS,
            seed: 0,
        }
    }
}

impl SimulatorConfig {
    pub fn noiseless() -> Self {
        Self {
            pitcher_noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), DeviceError> {
        let fail = |msg: String| Err(DeviceError::Config(msg));
        if !self.pitcher_slope.is_finite() || !self.pitcher_intercept.is_finite() {
            return fail("pitcher line must be finite".into());
        }
        if !(self.pitcher_noise_sigma >= 0.0 && self.pitcher_noise_sigma.is_finite()) {
            return fail(format!(
                "pitcher sigma {} must be >= 0",
                self.pitcher_noise_sigma
            ));
        }
        for (name, g) in [
            ("apple", &self.fruit.apple),
            ("banana", &self.fruit.banana),
            ("orange", &self.fruit.orange),
        ] {
            let ok = [g.color_mean, g.length_mean].iter().all(|v| v.is_finite())
                && [g.color_sigma, g.length_sigma]
                    .iter()
                    .all(|v| v.is_finite() && *v >= 0.0);
            if !ok {
                return fail(format!("{name} parameters must be finite with sigma >= 0"));
            }
        }
        if self
            .crawler_displacements
            .values()
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return fail("crawler displacements must be finite".into());
        }
        if !self.crawler_displacements.is_antisymmetric() {
            return fail("crawler displacement table must be antisymmetric".into());
        }
        Ok(())
    }
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draws one specimen of `kind` from its class Gaussian, clamped to the
/// sensor ranges.
pub fn sim_read_fruit(kind: FruitKind, config: &SimulatorConfig, seed: u64) -> FeaturePoint {
    let g = config.fruit.get(kind);
    let mut rng = rng_for(seed);
    let color = g.color_mean + g.color_sigma * normal(&mut rng);
    let length = g.length_mean + g.length_sigma * normal(&mut rng);
    FeaturePoint {
        color: color.clamp(0.0, MAX_COLOR),
        length: length.clamp(0.0, MAX_LENGTH_MM),
    }
}

/// Landing distance in cm for a launch at `speed` percent.
pub fn sim_launch(speed: f64, config: &SimulatorConfig, seed: u64) -> f64 {
    let mut distance = config.pitcher_slope * speed + config.pitcher_intercept;
    if config.pitcher_noise_sigma > 0.0 {
        distance += config.pitcher_noise_sigma * normal(&mut rng_for(seed));
    }
    distance.max(0.0)
}

pub fn sim_move_arm(
    current: CrawlerState,
    action: CrawlerAction,
    config: &SimulatorConfig,
) -> (CrawlerState, f64) {
    (
        current.step(action),
        config.crawler_displacements.get(current, action),
    )
}

/// Which physical build the simulator plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rig {
    FruitDetector,
    Pitcher,
    Crawler,
}

/// A simulated hub answering wire commands.
///
/// Fruit measurements follow the hub sequence: `ReadColor` starts a new
/// specimen of the fruit currently on the sensor and `ReadDistance` reports
/// that specimen's length.
#[derive(Debug, Clone)]
pub struct Simulator {
    config: SimulatorConfig,
    rig: Rig,
    draws: u64,
    fruit_on_sensor: FruitKind,
    specimen: Option<FeaturePoint>,
    last_landing_cm: Option<f64>,
    arm: CrawlerState,
    position_mm: f64,
}

impl Simulator {
    pub fn new(config: SimulatorConfig, rig: Rig) -> Self {
        Self {
            config,
            rig,
            draws: 0,
            fruit_on_sensor: FruitKind::Apple,
            specimen: None,
            last_landing_cm: None,
            arm: CrawlerState::ALL[0],
            position_mm: CRAWLER_START_MM,
        }
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn rig(&self) -> Rig {
        self.rig
    }

    pub fn arm(&self) -> CrawlerState {
        self.arm
    }

    pub fn place_fruit(&mut self, kind: FruitKind) {
        self.fruit_on_sensor = kind;
        self.specimen = None;
    }

    pub fn fruit_on_sensor(&self) -> FruitKind {
        self.fruit_on_sensor
    }

    /// Puts the arm in a known position without moving the crawler.
    pub fn set_arm(&mut self, state: CrawlerState) {
        self.arm = state;
    }

    fn next_seed(&mut self) -> u64 {
        let seed = derive_seed(self.config.seed, self.draws);
        self.draws += 1;
        seed
    }

    fn error(code: &str, message: impl Into<String>) -> ReplyPayload {
        ReplyPayload::Error {
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn handle(&mut self, cmd: &DeviceCommand) -> DeviceReply {
        let payload = match (&cmd.kind, self.rig) {
            (CommandKind::Ping, _) => ReplyPayload::Pong,
            (CommandKind::ReadColor, Rig::FruitDetector) => {
                let seed = self.next_seed();
                let specimen = sim_read_fruit(self.fruit_on_sensor, &self.config, seed);
                self.specimen = Some(specimen);
                ReplyPayload::Green {
                    value: specimen.color.round() as u8,
                }
            }
            (CommandKind::ReadDistance, Rig::FruitDetector) => match self.specimen {
                Some(s) => ReplyPayload::DistanceMm { value: s.length },
                None => Self::error("no_specimen", "read the color first"),
            },
            (CommandKind::Launch { speed }, Rig::Pitcher) => {
                if (0.0..=100.0).contains(speed) {
                    let seed = self.next_seed();
                    self.last_landing_cm = Some(sim_launch(*speed, &self.config, seed));
                    ReplyPayload::LaunchDone
                } else {
                    Self::error("bad_speed", format!("speed {speed} out of range"))
                }
            }
            (CommandKind::ReadDistance, Rig::Pitcher) => ReplyPayload::DistanceMm {
                value: self.last_landing_cm.unwrap_or(0.0) * 10.0,
            },
            (CommandKind::MoveArm { target }, Rig::Crawler) => {
                let mut moved = 0.0;
                while self.arm != *target {
                    let action = self
                        .arm
                        .action_towards(*target)
                        .unwrap_or(CrawlerAction::Forward);
                    let (next, d) = sim_move_arm(self.arm, action, &self.config);
                    self.arm = next;
                    moved += d;
                }
                self.position_mm += moved;
                ReplyPayload::ArmMoved {
                    state: self.arm,
                    displacement_mm: moved,
                }
            }
            (CommandKind::ReadDistance, Rig::Crawler) => ReplyPayload::DistanceMm {
                value: self.position_mm.max(0.0),
            },
            (kind, rig) => Self::error(
                "unsupported",
                format!("{} is not available on the {rig:?} rig", kind.tag()),
            ),
        };
        DeviceReply {
            id: cmd.id,
            payload,
        }
    }
}

/// Shared handle to a simulator plus a switch for injecting link failures.
#[derive(Debug, Clone)]
pub struct SimWorld {
    sim: Arc<Mutex<Simulator>>,
    link_down: Arc<std::sync::atomic::AtomicBool>,
}

impl SimWorld {
    pub fn new(sim: Simulator) -> Self {
        Self {
            sim: Arc::new(Mutex::new(sim)),
            link_down: Arc::default(),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, Simulator> {
        self.sim.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn place_fruit(&self, kind: FruitKind) {
        self.lock().place_fruit(kind);
    }

    pub fn set_arm(&self, state: CrawlerState) {
        self.lock().set_arm(state);
    }

    /// While down, every exchange and connection attempt fails.
    pub fn set_link_down(&self, down: bool) {
        self.link_down
            .store(down, std::sync::atomic::Ordering::SeqCst);
    }

    pub fn is_link_down(&self) -> bool {
        self.link_down.load(std::sync::atomic::Ordering::SeqCst)
    }
}
