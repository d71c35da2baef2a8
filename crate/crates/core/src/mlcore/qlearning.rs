//! Tabular Q-learning for the four-position crawler arm.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MlError;

/// Learning rate used by crawler sessions.
pub const DEFAULT_ALPHA: f64 = 0.5;

const STATES: usize = 4;

/// One of the four arm positions, visited in cyclic order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CrawlerState(u8);

impl CrawlerState {
    pub const ALL: [CrawlerState; STATES] = [
        CrawlerState(0),
        CrawlerState(1),
        CrawlerState(2),
        CrawlerState(3),
    ];

    pub fn new(index: u8) -> Result<Self, MlError> {
        if (index as usize) < STATES {
            Ok(Self(index))
        } else {
            Err(MlError::OutOfRange {
                field: "crawler state",
                value: index as f64,
            })
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Position reached by taking `action` from here.
    pub fn step(self, action: CrawlerAction) -> CrawlerState {
        let n = STATES as u8;
        match action {
            CrawlerAction::Forward => CrawlerState((self.0 + 1) % n),
            CrawlerAction::Backward => CrawlerState((self.0 + n - 1) % n),
        }
    }

    /// The action that moves from `self` to `target`, if they are adjacent.
    pub fn action_towards(self, target: CrawlerState) -> Option<CrawlerAction> {
        CrawlerAction::ALL
            .into_iter()
            .find(|a| self.step(*a) == target)
    }
}

impl TryFrom<u8> for CrawlerState {
    type Error = MlError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        CrawlerState::new(value)
    }
}

impl From<CrawlerState> for u8 {
    fn from(s: CrawlerState) -> u8 {
        s.0
    }
}

impl fmt::Display for CrawlerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CrawlerAction {
    Forward,
    Backward,
}

impl CrawlerAction {
    pub const ALL: [CrawlerAction; 2] = [CrawlerAction::Forward, CrawlerAction::Backward];

    pub fn index(self) -> usize {
        match self {
            CrawlerAction::Forward => 0,
            CrawlerAction::Backward => 1,
        }
    }
}

impl fmt::Display for CrawlerAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CrawlerAction::Forward => f.write_str("Forward"),
            CrawlerAction::Backward => f.write_str("Backward"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    Exploratory,
    Exploitative,
}

/// Action values, indexed `[state][action]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QTable {
    values: [[f64; 2]; STATES],
}

impl QTable {
    pub fn zeros() -> Self {
        Self::default()
    }

    pub fn from_values(values: [[f64; 2]; STATES]) -> Result<Self, MlError> {
        if let Some(v) = values.iter().flatten().find(|v| !v.is_finite()) {
            return Err(MlError::OutOfRange {
                field: "q value",
                value: *v,
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[[f64; 2]; STATES] {
        &self.values
    }

    pub fn get(&self, s: CrawlerState, a: CrawlerAction) -> f64 {
        self.values[s.index()][a.index()]
    }

    pub fn set(&mut self, s: CrawlerState, a: CrawlerAction, value: f64) {
        self.values[s.index()][a.index()] = value;
    }

    pub fn max_value(&self, s: CrawlerState) -> f64 {
        let row = self.values[s.index()];
        row[0].max(row[1])
    }

    /// Greedy action; ties go to `Forward`.
    pub fn argmax(&self, s: CrawlerState) -> CrawlerAction {
        let row = self.values[s.index()];
        if row[1] > row[0] {
            CrawlerAction::Backward
        } else {
            CrawlerAction::Forward
        }
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().all(|v| *v == 0.0)
    }
}

/// Exploration rate, discount toggle and learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha: f64,
}

impl QParams {
    pub fn new(epsilon: f64, discount: bool) -> Result<Self, MlError> {
        let params = Self {
            epsilon,
            gamma: if discount { 1.0 } else { 0.0 },
            alpha: DEFAULT_ALPHA,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), MlError> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(MlError::OutOfRange {
                field: "epsilon",
                value: self.epsilon,
            });
        }
        if self.gamma != 0.0 && self.gamma != 1.0 {
            return Err(MlError::OutOfRange {
                field: "gamma",
                value: self.gamma,
            });
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(MlError::OutOfRange {
                field: "alpha",
                value: self.alpha,
            });
        }
        Ok(())
    }

    pub fn discount_enabled(&self) -> bool {
        self.gamma == 1.0
    }
}

/// `Q(s,a) += alpha * (reward + gamma * max_a' Q(s',a') - Q(s,a))`
pub fn q_update(
    q: &QTable,
    s: CrawlerState,
    a: CrawlerAction,
    reward: f64,
    s_next: CrawlerState,
    params: &QParams,
) -> QTable {
    let current = q.get(s, a);
    let target = reward + params.gamma * q.max_value(s_next);
    let mut next = *q;
    next.set(s, a, current + params.alpha * (target - current));
    next
}

/// Epsilon-greedy choice from a seeded generator.
///
/// With probability `epsilon` a uniformly random action is returned and
/// flagged exploratory; otherwise the greedy action (ties to `Forward`).
pub fn select_action(
    q: &QTable,
    s: CrawlerState,
    epsilon: f64,
    seed: u64,
) -> (CrawlerAction, ActionMode) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        let action = if rng.random_bool(0.5) {
            CrawlerAction::Forward
        } else {
            CrawlerAction::Backward
        };
        (action, ActionMode::Exploratory)
    } else {
        (q.argmax(s), ActionMode::Exploitative)
    }
}

/// Signed displacement in mm for every (state, action) transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisplacementTable {
    mm: [[f64; 2]; STATES],
}

impl DisplacementTable {
    pub const fn new(mm: [[f64; 2]; STATES]) -> Self {
        Self { mm }
    }

    pub fn get(&self, s: CrawlerState, a: CrawlerAction) -> f64 {
        self.mm[s.index()][a.index()]
    }

    pub fn values(&self) -> &[[f64; 2]; STATES] {
        &self.mm
    }

    pub fn negated(&self) -> Self {
        let mut mm = self.mm;
        mm.iter_mut().flatten().for_each(|v| *v = -*v);
        Self { mm }
    }

    /// Reversing a transition exactly undoes its displacement.
    pub fn is_antisymmetric(&self) -> bool {
        CrawlerState::ALL.iter().all(|&s| {
            CrawlerAction::ALL.iter().all(|&a| {
                let next = s.step(a);
                let back = next.action_towards(s).expect("neighbours are adjacent");
                self.get(s, a) == -self.get(next, back)
            })
        })
    }
}

/// A deterministic action choice for every state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Policy(pub [CrawlerAction; STATES]);

impl Policy {
    pub fn action(&self, s: CrawlerState) -> CrawlerAction {
        self.0[s.index()]
    }

    /// All 16 deterministic policies.
    pub fn enumerate() -> impl Iterator<Item = Policy> {
        (0..1u8 << STATES).map(|bits| {
            let mut actions = [CrawlerAction::Forward; STATES];
            for (i, slot) in actions.iter_mut().enumerate() {
                if bits & (1 << i) != 0 {
                    *slot = CrawlerAction::Backward;
                }
            }
            Policy(actions)
        })
    }

    pub fn all_forward() -> Policy {
        Policy([CrawlerAction::Forward; STATES])
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            let c = match a {
                CrawlerAction::Forward => 'F',
                CrawlerAction::Backward => 'B',
            };
            write!(f, "s{i}:{c}")?;
        }
        Ok(())
    }
}

pub fn greedy_policy(q: &QTable) -> Policy {
    let mut actions = [CrawlerAction::Forward; STATES];
    for s in CrawlerState::ALL {
        actions[s.index()] = q.argmax(s);
    }
    Policy(actions)
}

/// Mean displacement per step on the limit cycle reached by following
/// `policy` from state 0.
pub fn policy_average_displacement(policy: &Policy, table: &DisplacementTable) -> f64 {
    let mut first_visit = [None::<usize>; STATES];
    let mut path = Vec::with_capacity(STATES + 1);
    let mut s = CrawlerState::ALL[0];
    while first_visit[s.index()].is_none() {
        first_visit[s.index()] = Some(path.len());
        path.push(s);
        s = s.step(policy.action(s));
    }
    let cycle = &path[first_visit[s.index()].unwrap_or(0)..];
    let total: f64 = cycle.iter().map(|&c| table.get(c, policy.action(c))).sum();
    total / cycle.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devices::REFERENCE_DISPLACEMENTS;
    use CrawlerAction::{Backward, Forward};

    fn s(i: u8) -> CrawlerState {
        CrawlerState::new(i).unwrap()
    }

    fn params(alpha: f64, gamma: f64) -> QParams {
        QParams {
            epsilon: 0.0,
            gamma,
            alpha,
        }
    }

    #[test]
    fn update_with_zero_bootstrap() {
        let q = q_update(
            &QTable::zeros(),
            s(1),
            Forward,
            5.0,
            s(2),
            &params(0.5, 0.0),
        );
        assert_eq!(q.get(s(1), Forward), 2.5);
        let others = q.values().iter().flatten().filter(|v| **v != 0.0).count();
        assert_eq!(others, 1);
    }

    #[test]
    fn update_with_bootstrap() {
        let mut q = QTable::zeros();
        q.set(s(3), Backward, 10.0);
        let q = q_update(&q, s(0), Backward, -1.0, s(3), &params(0.5, 1.0));
        // 0 + 0.5 * (-1 + 1 * 10 - 0)
        assert_eq!(q.get(s(0), Backward), 4.5);
    }

    #[test]
    fn alpha_one_overwrites() {
        let mut q = QTable::zeros();
        q.set(s(2), Forward, -7.25);
        for _ in 0..3 {
            q = q_update(&q, s(2), Forward, 3.0, s(3), &params(1.0, 0.0));
            assert_eq!(q.get(s(2), Forward), 3.0);
        }
    }

    #[test]
    fn greedy_selection_and_ties() {
        let mut q = QTable::zeros();
        assert_eq!(
            select_action(&q, s(0), 0.0, 9),
            (Forward, ActionMode::Exploitative)
        );
        q.set(s(0), Forward, 1.0);
        assert_eq!(
            select_action(&q, s(0), 0.0, 1),
            (Forward, ActionMode::Exploitative)
        );
        q.set(s(0), Backward, 2.0);
        assert_eq!(
            select_action(&q, s(0), 0.0, 1),
            (Backward, ActionMode::Exploitative)
        );
    }

    #[test]
    fn full_exploration_is_fair() {
        let q = QTable::zeros();
        let mut forward = 0;
        for seed in 0..10_000u64 {
            let (a, mode) = select_action(&q, s(0), 1.0, seed);
            assert_eq!(mode, ActionMode::Exploratory);
            if a == Forward {
                forward += 1;
            }
        }
        let share = forward as f64 / 10_000.0;
        assert!((share - 0.5).abs() <= 0.03, "forward share {share}");
    }

    #[test]
    fn params_validation() {
        assert!(QParams::new(0.5, true).is_ok());
        assert!(QParams::new(1.5, false).is_err());
        let mut p = QParams::new(0.5, false).unwrap();
        p.gamma = 0.9;
        assert!(p.validate().is_err());
        p.gamma = 0.0;
        p.alpha = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn state_bounds_and_serde() {
        assert!(CrawlerState::new(4).is_err());
        assert_eq!(s(3).step(Forward), s(0));
        assert_eq!(s(0).step(Backward), s(3));
        assert_eq!(s(1).action_towards(s(3)), None);
        assert_eq!(serde_json::to_string(&s(2)).unwrap(), "2");
        assert!(serde_json::from_str::<CrawlerState>("7").is_err());
    }

    #[test]
    fn all_forward_gait() {
        let avg = policy_average_displacement(&Policy::all_forward(), &REFERENCE_DISPLACEMENTS);
        // (0 - 1 + 5 + 0) / 4
        assert_eq!(avg, 1.0);
    }

    #[test]
    fn oscillation_between_first_two_positions() {
        for tail in Policy::enumerate() {
            let mut p = tail;
            p.0[0] = Forward;
            p.0[1] = Backward;
            assert_eq!(
                policy_average_displacement(&p, &REFERENCE_DISPLACEMENTS),
                0.0
            );
        }
    }

    #[test]
    fn negated_table_negates_average() {
        let neg = REFERENCE_DISPLACEMENTS.negated();
        for p in Policy::enumerate() {
            let a = policy_average_displacement(&p, &REFERENCE_DISPLACEMENTS);
            let b = policy_average_displacement(&p, &neg);
            assert_eq!(a, -b, "{p}");
        }
    }

    #[test]
    fn policy_enumeration_is_complete() {
        let all: std::collections::HashSet<_> = Policy::enumerate().collect();
        assert_eq!(all.len(), 16);
    }
}
