//! Discrete-event tote-handling simulator.
//!
//! Each decision epoch offers order-assign, tote-match and robot-schedule
//! decision points in that order until every subject has been decided or
//! deferred; robots holding a plan then depart and the clock jumps to the
//! next event.

mod event;
mod state;
mod types;

pub use state::{global_reward, OrderStatus, SimError, Step, WarehouseState};
pub use types::*;

use crate::domain::{MetricsReport, WarehouseInstance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy transport failed: {0}")]
    Transport(String),
    #[error("policy returned candidate {index} of {len}")]
    BadIndex { index: usize, len: usize },
}

/// Chooses among the candidates of one decision point.
pub trait Policy {
    fn name(&self) -> &str;

    /// Called once before an episode starts.
    fn reset(&mut self, _seed: u64) {}

    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError>;

    /// Called once when the episode terminates.
    fn finish(&mut self, _metrics: &MetricsReport) -> Result<(), PolicyError> {
        Ok(())
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn reset(&mut self, seed: u64) {
        (**self).reset(seed)
    }
    fn decide(&mut self, dp: &DecisionPoint, state: &WarehouseState) -> Result<Action, PolicyError> {
        (**self).decide(dp, state)
    }
    fn finish(&mut self, metrics: &MetricsReport) -> Result<(), PolicyError> {
        (**self).finish(metrics)
    }
}

/// Uniform over feasible non-defer candidates, deferring with a fixed probability.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    rng: ChaCha8Rng,
    pub defer_prob: f64,
}

impl RandomPolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), defer_prob: 0.0 }
    }

    pub fn with_defer_prob(mut self, p: f64) -> Self {
        self.defer_prob = p;
        self
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    fn decide(&mut self, dp: &DecisionPoint, _state: &WarehouseState) -> Result<Action, PolicyError> {
        let options: Vec<Action> = dp.feasible().map(|(_, a)| a).collect();
        if options.is_empty() || self.rng.gen_bool(self.defer_prob) {
            return Ok(Action::Defer);
        }
        Ok(options[self.rng.gen_range(0..options.len())])
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub metrics: MetricsReport,
    pub actions: Vec<ActionRecord>,
    pub log: Vec<LogRecord>,
    /// Wall-clock seconds spent inside `Policy::decide`, one entry per decision.
    pub decision_latency: Vec<f64>,
}

/// Drives `state` to termination under `policy`.
pub fn run_state(mut state: WarehouseState, policy: &mut dyn Policy) -> Result<(Episode, WarehouseState), EpisodeError> {
    let started = Instant::now();
    let mut actions = Vec::new();
    let mut log = Vec::new();
    let mut decision_latency = Vec::new();
    loop {
        match state.next_decision()? {
            Step::Terminal(mut metrics) => {
                metrics.runtime = started.elapsed().as_secs_f64();
                policy.finish(&metrics)?;
                let ep = Episode { metrics, actions, log, decision_latency };
                return Ok((ep, state));
            }
            Step::Decision(dp) => {
                let t0 = Instant::now();
                let action = policy.decide(&dp, &state)?;
                decision_latency.push(t0.elapsed().as_secs_f64());
                state.apply_action(action)?;
                actions.push(ActionRecord { stage: dp.stage, subject: dp.subject.raw(), action, clock: dp.clock });
                log.push(LogRecord {
                    clock: dp.clock,
                    stage: dp.stage,
                    subject: dp.subject.raw(),
                    action,
                    z_retrievals: state.z_retrievals(),
                    z_returns: state.z_returns(),
                });
            }
        }
    }
}

/// Resets a fresh episode on `inst` and runs it under `policy`.
pub fn run_episode(inst: WarehouseInstance, policy: &mut dyn Policy, seed: u64) -> Result<Episode, EpisodeError> {
    policy.reset(seed);
    let state = WarehouseState::reset(inst)?;
    run_state(state, policy).map(|(ep, _)| ep)
}
