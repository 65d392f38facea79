//! Plan selection for streaming populations.
//!
//! A throttled stream drops to a codec rate, so only the finitely many codec
//! rates are candidate throttle rates. For each codec the threshold that uses
//! the whole capacity is found by bisection; the plan is the candidate with the
//! smallest aggregate regret.

use crate::allocation::{consumption, solve_threshold_with, Mode, Plan, Policy, Solve};
use crate::error::{invalid, Error, Result};
use crate::population::UserProfile;
use crate::regret::{aggregate_regret, RegretParams};

/// Ascending, distinct, nonnegative codec rates.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecSet(Vec<f64>);

impl CodecSet {
    pub fn new(rates: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut rates: Vec<f64> = rates.into_iter().collect();
        if rates.is_empty() {
            return Err(invalid("codecs", "codec set is empty"));
        }
        if let Some(bad) = rates.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(invalid("codecs", format!("codec rates must be nonnegative, got {bad}")));
        }
        rates.sort_by(f64::total_cmp);
        rates.dedup();
        Ok(CodecSet(rates))
    }

    pub fn rates(&self) -> &[f64] {
        &self.0
    }

    /// Largest codec not above `r`.
    pub fn snap(&self, r: f64) -> Option<f64> {
        self.0.iter().rev().copied().find(|&v| v <= r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub rate: f64,
    pub threshold: f64,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSolution {
    pub plan: Plan,
    pub regret: f64,
    /// Every feasible codec, ascending by rate.
    pub candidates: Vec<Candidate>,
    /// Codecs for which no threshold in `[0, T̂]` meets the capacity.
    pub infeasible: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamOutcome {
    Unlimited,
    Throttled(StreamSolution),
}

impl StreamOutcome {
    pub fn policy(&self) -> Policy {
        match self {
            StreamOutcome::Unlimited => Policy::Unlimited,
            StreamOutcome::Throttled(s) => Policy::Throttled(s.plan),
        }
    }

    pub fn regret(&self) -> f64 {
        match self {
            StreamOutcome::Unlimited => 0.0,
            StreamOutcome::Throttled(s) => s.regret,
        }
    }
}

/// Threshold meeting `capacity` when throttled streams run at codec rate `r`.
pub fn solve_threshold(users: &[UserProfile], capacity: f64, r: f64, epsilon: f64) -> Result<Solve> {
    solve_threshold_with(users, capacity, r, Mode::Streaming, epsilon)
}

pub fn optimize_streaming(
    users: &[UserProfile],
    capacity: f64,
    codecs: &CodecSet,
    params: &RegretParams,
) -> Result<StreamOutcome> {
    params.validate()?;
    let epsilon = crate::allocation::default_epsilon(capacity);
    let mut candidates = Vec::new();
    let mut infeasible = Vec::new();
    for &r in codecs.rates() {
        match solve_threshold(users, capacity, r, epsilon)? {
            Solve::Unlimited => return Ok(StreamOutcome::Unlimited),
            Solve::Infeasible => infeasible.push(r),
            Solve::Value(t) => {
                let plan = Plan::new(t, r, Mode::Streaming);
                candidates.push(Candidate {
                    rate: r,
                    threshold: t,
                    regret: aggregate_regret(users, &plan, params),
                });
            }
        }
    }
    // Ties go to the larger codec rate.
    let best = candidates
        .iter()
        .rev()
        .copied()
        .reduce(|best, c| if c.regret < best.regret { c } else { best })
        .ok_or_else(|| {
            let demand: f64 = users.iter().map(UserProfile::demand).sum();
            let floor = codecs.rates()[0];
            Error::NoFeasibleCandidate(format!(
                "capacity {capacity} is below consumption {} at T = 0 with the smallest codec {floor} (demand {demand})",
                consumption(users, &Plan::new(0.0, floor, Mode::Streaming)),
            ))
        })?;
    Ok(StreamOutcome::Throttled(StreamSolution {
        plan: Plan::new(best.threshold, best.rate, Mode::Streaming),
        regret: best.regret,
        candidates,
        infeasible,
    }))
}

/// Largest codec usable at threshold `t` without exceeding `capacity`, with
/// its regret. This is the step curve `r(T)` and its regret, used for plots
/// and as a brute-force check of [`optimize_streaming`].
pub fn best_codec_at(
    users: &[UserProfile],
    capacity: f64,
    codecs: &CodecSet,
    t: f64,
    params: &RegretParams,
) -> Option<(f64, f64)> {
    codecs.rates().iter().rev().find_map(|&r| {
        let plan = Plan::new(t, r, Mode::Streaming);
        (consumption(users, &plan) <= capacity * (1.0 + 1e-12)).then(|| (r, aggregate_regret(users, &plan, params)))
    })
}
