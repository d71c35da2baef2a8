//! Scripted classroom flows run end-to-end against an in-process service
//! with simulated robots.
//!
//! Transcripts hold only commands and their outcomes (no session ids or
//! clock readings), so equal seeds give byte-identical transcripts.

use std::fmt;

use bricks_core::devices::{FruitKind, SimulatorConfig, REFERENCE_DISPLACEMENTS};
use bricks_core::mlcore::{
    greedy_policy, policy_average_displacement, BoundaryGrid, FruitLabel, Policy,
};
use bricks_core::sessions::{
    Command, ControlAction, CrawlerSession, Experiment, Mode, Outcome, SessionState,
};
use bricks_service::{App, CommandReply, CreateSession, ServiceConfig, ServiceError};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::CliError;
use crate::train::optimal_average_displacement;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    FruitPoisoning,
    FruitOrange,
    PitcherTarget,
    CrawlerTwoPhase,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 4] = [
        ScenarioName::FruitPoisoning,
        ScenarioName::FruitOrange,
        ScenarioName::PitcherTarget,
        ScenarioName::CrawlerTwoPhase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioName::FruitPoisoning => "fruit-poisoning",
            ScenarioName::FruitOrange => "fruit-orange",
            ScenarioName::PitcherTarget => "pitcher-target",
            ScenarioName::CrawlerTwoPhase => "crawler-two-phase",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One machine-checked assertion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: ScenarioName,
    pub seed: u64,
    pub checks: Vec<Check>,
    /// JSON lines: one per command or observation.
    pub transcript: Vec<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn transcript_text(&self) -> String {
        let mut s = self.transcript.join("\n");
        s.push('\n');
        s
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct Script {
    app: App,
    id: String,
    steps: u64,
    transcript: Vec<String>,
    checks: Vec<Check>,
}

impl Script {
    fn start(
        app: &App,
        experiment: Experiment,
        seed: u64,
        sim: SimulatorConfig,
    ) -> Result<Self, CliError> {
        let descriptor = app
            .create(CreateSession {
                seed: Some(seed),
                sim: Some(sim),
                ..CreateSession::new(experiment)
            })
            .map_err(runtime)?;
        let mut script = Self {
            app: app.clone(),
            id: descriptor.id,
            steps: 0,
            transcript: Vec::new(),
            checks: Vec::new(),
        };
        script.note(json!({ "session": experiment, "seed": seed }));
        Ok(script)
    }

    fn note(&mut self, value: serde_json::Value) {
        self.steps += 1;
        let line = json!({ "step": self.steps, "note": value });
        self.transcript.push(line.to_string());
    }

    async fn try_run(&mut self, command: Command) -> Result<CommandReply, ServiceError> {
        self.steps += 1;
        let result = self.app.execute(&self.id, command.clone()).await;
        let line = match &result {
            Ok(reply) => json!({
                "step": self.steps,
                "command": command,
                "outcome": reply.outcome,
                "seq": reply.snapshot.seq,
            }),
            Err(e) => json!({
                "step": self.steps,
                "command": command,
                "error": { "code": e.status_and_code().1, "message": e.to_string() },
            }),
        };
        self.transcript.push(line.to_string());
        result
    }

    async fn run(&mut self, command: Command) -> Result<Outcome, CliError> {
        self.try_run(command)
            .await
            .map(|r| r.outcome)
            .map_err(runtime)
    }

    fn state(&self) -> Result<SessionState, CliError> {
        Ok(self
            .app
            .get(&self.id)
            .map_err(runtime)?
            .snapshot()
            .state
            .clone())
    }

    fn place(&mut self, kind: FruitKind) -> Result<(), CliError> {
        let handle = self.app.get(&self.id).map_err(runtime)?;
        let sim = handle
            .device()
            .sim()
            .ok_or_else(|| CliError::Runtime("scenario needs a simulator".into()))?;
        sim.place_fruit(kind);
        self.note(json!({ "place_fruit": kind }));
        Ok(())
    }

    fn check(&mut self, name: &str, passed: bool, detail: String) {
        self.transcript
            .push(json!({ "check": name, "passed": passed, "detail": detail }).to_string());
        self.checks.push(Check {
            name: name.to_owned(),
            passed,
            detail,
        });
    }

    fn finish(self, name: ScenarioName, seed: u64) -> ScenarioReport {
        ScenarioReport {
            name,
            seed,
            checks: self.checks,
            transcript: self.transcript,
        }
    }
}

/// Runs `name` in a throwaway data directory.
pub async fn run_scenario(name: ScenarioName, seed: u64) -> Result<ScenarioReport, CliError> {
    let dir = tempfile::tempdir().map_err(runtime)?;
    let app = App::open(ServiceConfig {
        data_dir: dir.path().to_owned(),
        tick_hz: 0.0,
        seed,
        ..ServiceConfig::default()
    })
    .map_err(runtime)?;
    let report = match name {
        ScenarioName::FruitPoisoning => fruit_poisoning(&app, seed).await,
        ScenarioName::FruitOrange => fruit_orange(&app, seed).await,
        ScenarioName::PitcherTarget => pitcher_target(&app, seed).await,
        ScenarioName::CrawlerTwoPhase => crawler_two_phase(&app, seed).await,
    };
    let closing = app.clone();
    tokio::task::spawn_blocking(move || closing.shutdown())
        .await
        .map_err(runtime)?;
    report
}

const SAMPLES_PER_CLASS: usize = 6;

async fn train_fruit(script: &mut Script) -> Result<(), CliError> {
    for (kind, label) in [
        (FruitKind::Apple, FruitLabel::Apple),
        (FruitKind::Banana, FruitLabel::Banana),
    ] {
        script.place(kind)?;
        for _ in 0..SAMPLES_PER_CLASS {
            script.run(Command::FruitRecord { label }).await?;
        }
    }
    Ok(())
}

fn fruit(state: &SessionState) -> Result<&bricks_core::sessions::FruitSession, CliError> {
    match state {
        SessionState::Fruit(f) => Ok(f),
        _ => Err(CliError::Runtime("expected a fruit session".into())),
    }
}

const BOUNDARY_RESOLUTION: usize = 50;

fn boundary(script: &mut Script) -> Result<BoundaryGrid, CliError> {
    let grid = script
        .app
        .boundary(&script.id, Some(BOUNDARY_RESOLUTION))
        .map_err(runtime)?;
    let counts = grid
        .labels
        .iter()
        .flatten()
        .filter(|l| **l == FruitLabel::Apple)
        .count();
    script.note(json!({ "boundary": { "resolution": grid.resolution, "apple_cells": counts } }));
    Ok(grid)
}

async fn fruit_poisoning(app: &App, seed: u64) -> Result<ScenarioReport, CliError> {
    let mut s = Script::start(
        app,
        Experiment::Fruit,
        seed,
        SimulatorConfig::default().with_seed(seed),
    )?;
    train_fruit(&mut s).await?;
    s.run(Command::FruitSetK { k: 1 }).await?;
    s.run(Command::FruitShowBoundary { visible: true }).await?;
    let before = boundary(&mut s)?;

    // Relabel the first apple as a banana.
    let state = s.state()?;
    let victim = fruit(&state)?
        .samples
        .iter()
        .find(|x| x.label == FruitLabel::Apple)
        .copied()
        .ok_or_else(|| CliError::Runtime("no apple sample recorded".into()))?;
    s.run(Command::FruitEditLabel {
        id: victim.id,
        label: FruitLabel::Banana,
    })
    .await?;
    let after = boundary(&mut s)?;
    let changed = before.changed_cells(&after);
    s.check(
        "boundary_changed",
        changed >= 1,
        format!(
            "{changed} of {} cells changed ({:.2}%)",
            BOUNDARY_RESOLUTION * BOUNDARY_RESOLUTION,
            100.0 * before.changed_fraction(&after)
        ),
    );

    s.run(Command::SetMode {
        mode: Mode::Inference,
    })
    .await?;
    let outcome = s
        .run(Command::FruitClassifyPoint {
            color: victim.point.color,
            length: victim.point.length,
        })
        .await?;
    let label = match outcome {
        Outcome::Classified { result } => Some(result.label),
        _ => None,
    };
    s.check(
        "poisoned_point_follows_new_label",
        label == Some(FruitLabel::Banana),
        format!("query at sample {} classified as {label:?}", victim.id),
    );
    Ok(s.finish(ScenarioName::FruitPoisoning, seed))
}

async fn fruit_orange(app: &App, seed: u64) -> Result<ScenarioReport, CliError> {
    let mut s = Script::start(
        app,
        Experiment::Fruit,
        seed,
        SimulatorConfig::default().with_seed(seed),
    )?;
    train_fruit(&mut s).await?;
    s.run(Command::SetMode {
        mode: Mode::Inference,
    })
    .await?;
    s.place(FruitKind::Orange)?;
    let mut apples = 0;
    let mut bananas = 0;
    for _ in 0..10 {
        if let Outcome::Classified { result } = s.run(Command::FruitClassify).await? {
            match result.label {
                FruitLabel::Apple => apples += 1,
                FruitLabel::Banana => bananas += 1,
            }
        }
    }
    s.check(
        "orange_gets_a_trained_label",
        apples + bananas == 10,
        format!("10 oranges classified as {apples} Apple, {bananas} Banana"),
    );
    let state = s.state()?;
    let f = fruit(&state)?;
    s.check(
        "dataset_unchanged_by_inference",
        f.samples.len() == 2 * SAMPLES_PER_CLASS,
        format!("{} samples stored", f.samples.len()),
    );
    Ok(s.finish(ScenarioName::FruitOrange, seed))
}

async fn pitcher_target(app: &App, seed: u64) -> Result<ScenarioReport, CliError> {
    let sim = SimulatorConfig::noiseless().with_seed(seed);
    let mut s = Script::start(app, Experiment::Pitcher, seed, sim.clone())?;
    for speed in [40.0, 60.0, 80.0] {
        s.run(Command::PitcherSetSpeed { speed }).await?;
        s.run(Command::PitcherLaunchAndMeasure).await?;
    }
    s.run(Command::SetMode {
        mode: Mode::Inference,
    })
    .await?;
    if let Outcome::Fitted { line, loss } = s.run(Command::PitcherAutofit).await? {
        s.check(
            "autofit_recovers_sim_line",
            line.slope == sim.pitcher_slope
                && line.intercept == sim.pitcher_intercept
                && loss == 0.0,
            format!(
                "fitted distance = {} * speed + {} (loss {loss})",
                line.slope, line.intercept
            ),
        );
    }
    for target in [100.0, 150.0] {
        if let Outcome::Shot { shot } = s.run(Command::PitcherTargetShot { target }).await? {
            let error = shot.landed - target;
            s.check(
                &format!("target_{target}_hit_exactly"),
                error == 0.0,
                format!(
                    "speed {} landed at {} cm, error {error} cm",
                    shot.speed, shot.landed
                ),
            );
        }
    }
    Ok(s.finish(ScenarioName::PitcherTarget, seed))
}

pub const PHASE_STEPS: usize = 2000;
pub const PHASE_EPSILON: f64 = 0.8;

fn crawler_state(state: &SessionState) -> Result<&CrawlerSession, CliError> {
    match state {
        SessionState::Crawler(c) => Ok(c),
        _ => Err(CliError::Runtime("expected a crawler session".into())),
    }
}

/// Trains from a reset table, then switches exploration off.
async fn phase(s: &mut Script, discount: bool) -> Result<Policy, CliError> {
    s.run(Command::CrawlerControl {
        action: ControlAction::Reset,
    })
    .await?;
    s.run(Command::CrawlerSetParams {
        epsilon: Some(PHASE_EPSILON),
        discount: Some(discount),
    })
    .await?;
    s.run(Command::CrawlerControl {
        action: ControlAction::Start,
    })
    .await?;
    for _ in 0..PHASE_STEPS {
        s.run(Command::CrawlerStep).await?;
    }
    s.run(Command::CrawlerSetParams {
        epsilon: Some(0.0),
        discount: None,
    })
    .await?;
    let state = s.state()?;
    Ok(greedy_policy(&crawler_state(&state)?.q))
}

async fn crawler_two_phase(app: &App, seed: u64) -> Result<ScenarioReport, CliError> {
    let mut s = Script::start(
        app,
        Experiment::Crawler,
        seed,
        SimulatorConfig::default().with_seed(seed),
    )?;
    let optimal = optimal_average_displacement();

    let a = phase(&mut s, false).await?;
    let avg_a = policy_average_displacement(&a, &REFERENCE_DISPLACEMENTS);
    s.check(
        "phase_a_suboptimal",
        avg_a <= 0.0,
        format!("without discount the greedy policy [{a}] averages {avg_a} mm/step"),
    );

    let b = phase(&mut s, true).await?;
    let avg_b = policy_average_displacement(&b, &REFERENCE_DISPLACEMENTS);
    s.check(
        "phase_b_optimal",
        b == Policy::all_forward() && avg_b == 1.0 && avg_b == optimal,
        format!("with discount the greedy policy [{b}] averages {avg_b} mm/step (best {optimal})"),
    );

    let start = crawler_state(&s.state()?)?.cumulative_displacement;
    for _ in 0..100 {
        s.run(Command::CrawlerStep).await?;
    }
    let moved = crawler_state(&s.state()?)?.cumulative_displacement - start;
    s.check(
        "phase_b_walks_forward",
        moved == 100.0,
        format!("100 greedy steps moved {moved} mm"),
    );
    Ok(s.finish(ScenarioName::CrawlerTwoPhase, seed))
}
