//! Batch crawler training with a linear exploration schedule.

use std::fmt::Write as _;

use bricks_core::devices::{
    BackendDescriptor, DeviceHandle, Rig, SimulatorConfig, REFERENCE_DISPLACEMENTS,
};
use bricks_core::mlcore::{
    greedy_policy, policy_average_displacement, ActionMode, CrawlerAction, CrawlerState, Policy,
};
use bricks_core::sessions::{
    Command, ControlAction, CrawlerSession, Experiment, Outcome, Session, SessionState,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub discount: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.steps == 0 {
            return Err(CliError::Usage("--steps must be at least 1".into()));
        }
        for (name, e) in [
            ("--epsilon", self.epsilon_start),
            ("--epsilon-end", self.epsilon_end),
        ] {
            if !(0.0..=1.0).contains(&e) {
                return Err(CliError::Usage(format!(
                    "{name} must lie in [0, 1], got {e}"
                )));
            }
        }
        Ok(())
    }

    /// Exploration rate for step `t` (0-based): linear from start to end.
    pub fn epsilon_at(&self, t: u64) -> f64 {
        if self.steps <= 1 {
            return self.epsilon_start;
        }
        let frac = t as f64 / (self.steps - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub gamma: f64,
    /// `q_table[state][action]`, actions ordered Forward, Backward.
    pub q_table: [[f64; 2]; 4],
    pub greedy_policy: Policy,
    /// Average displacement per step of the greedy policy on the reference table (mm).
    pub greedy_average_displacement: f64,
    /// Best average over all deterministic policies (mm).
    pub optimal_average_displacement: f64,
    pub greedy_is_optimal: bool,
    /// Mean reward over the last (up to) 100 training steps (mm).
    pub final_100_average_displacement: f64,
    pub cumulative_displacement: f64,
    pub exploratory_steps: u64,
}

pub fn optimal_average_displacement() -> f64 {
    Policy::enumerate()
        .map(|p| policy_average_displacement(&p, &REFERENCE_DISPLACEMENTS))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn crawler(session: &Session) -> &CrawlerSession {
    match session.state() {
        SessionState::Crawler(c) => c,
        _ => unreachable!("training runs a crawler session"),
    }
}

fn exec(session: &mut Session, device: &DeviceHandle, cmd: Command) -> Result<Outcome, CliError> {
    session
        .execute(cmd, device)
        .map(|done| done.outcome)
        .map_err(|e| CliError::Runtime(e.to_string()))
}

/// Trains a fresh crawler session against the simulator.
pub fn train(config: &TrainConfig) -> Result<TrainReport, CliError> {
    config.validate()?;
    let device = DeviceHandle::connect(BackendDescriptor::Sim {
        config: SimulatorConfig::default().with_seed(config.seed),
        rig: Rig::Crawler,
    })
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut session = Session::new(Experiment::Crawler, config.seed);
    exec(
        &mut session,
        &device,
        Command::CrawlerSetParams {
            epsilon: Some(config.epsilon_at(0)),
            discount: Some(config.discount),
        },
    )?;
    exec(
        &mut session,
        &device,
        Command::CrawlerControl {
            action: ControlAction::Start,
        },
    )?;

    let mut rewards = Vec::with_capacity(config.steps as usize);
    let mut exploratory = 0;
    for t in 0..config.steps {
        let eps = config.epsilon_at(t);
        if crawler(&session).params.epsilon != eps {
            exec(
                &mut session,
                &device,
                Command::CrawlerSetParams {
                    epsilon: Some(eps),
                    discount: None,
                },
            )?;
        }
        if let Outcome::Stepped { reward, mode, .. } =
            exec(&mut session, &device, Command::CrawlerStep)?
        {
            rewards.push(reward);
            exploratory += u64::from(mode == ActionMode::Exploratory);
        }
    }

    let c = crawler(&session);
    let policy = greedy_policy(&c.q);
    let greedy = policy_average_displacement(&policy, &REFERENCE_DISPLACEMENTS);
    let optimal = optimal_average_displacement();
    let tail = &rewards[rewards.len().saturating_sub(100)..];
    Ok(TrainReport {
        config: *config,
        gamma: c.params.gamma,
        q_table: *c.q.values(),
        greedy_policy: policy,
        greedy_average_displacement: greedy,
        optimal_average_displacement: optimal,
        greedy_is_optimal: greedy == optimal,
        final_100_average_displacement: tail.iter().sum::<f64>() / tail.len().max(1) as f64,
        cumulative_displacement: c.cumulative_displacement,
        exploratory_steps: exploratory,
    })
}

/// Human-readable summary.
pub fn render(report: &TrainReport) -> String {
    let mut out = String::new();
    let c = &report.config;
    let _ = writeln!(
        out,
        "crawler-train: {} steps, epsilon {} -> {}, gamma {}, seed {}",
        c.steps, c.epsilon_start, c.epsilon_end, report.gamma, c.seed
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "state   Q(Forward)   Q(Backward)   greedy");
    for s in CrawlerState::ALL {
        let row = report.q_table[s.index()];
        let action = match report.greedy_policy.action(s) {
            CrawlerAction::Forward => "Forward",
            CrawlerAction::Backward => "Backward",
        };
        let _ = writeln!(
            out,
            "{:<5} {:>12.4} {:>13.4}   {}",
            s.to_string(),
            row[0],
            row[1],
            action
        );
    }
    let _ = writeln!(out);
    let rows = [
        (
            "greedy avg displacement (mm/step)",
            format!("{:.4}", report.greedy_average_displacement),
        ),
        (
            "optimal avg displacement (mm/step)",
            format!("{:.4}", report.optimal_average_displacement),
        ),
        (
            "greedy policy optimal",
            report.greedy_is_optimal.to_string(),
        ),
        (
            "avg displacement, last 100 steps",
            format!("{:.4}", report.final_100_average_displacement),
        ),
        (
            "cumulative displacement (mm)",
            format!("{:.1}", report.cumulative_displacement),
        ),
        ("exploratory steps", report.exploratory_steps.to_string()),
    ];
    for (k, v) in rows {
        let _ = writeln!(out, "{k:<36} {v}");
    }
    out
}
