//! User and aggregate regret.
//!
//! A throttled user's regret multiplies the relative rate loss by the
//! fraction of the cycle spent throttled, each raised to its own exponent.
//! Unthrottled users have zero throttling regret. Tiered variants add a price
//! term `kappa * price`.

use crate::allocation::{is_throttled, post_throttle_activity, Mode, Plan};
use crate::error::{invalid, Error, Result};
use crate::population::UserProfile;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegretParams {
    /// Exponent of the rate-loss factor.
    pub rho: f64,
    /// Exponent of the throttled-time factor.
    pub tau: f64,
    /// Weight of the tier price in a user's regret.
    pub kappa: f64,
}

impl Default for RegretParams {
    fn default() -> Self {
        RegretParams {
            rho: 2.0,
            tau: 2.0,
            kappa: 0.01,
        }
    }
}

impl RegretParams {
    /// `rho = tau = exponent`, default price weight.
    pub fn symmetric(exponent: f64) -> Self {
        RegretParams {
            rho: exponent,
            tau: exponent,
            ..Default::default()
        }
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = kappa;
        self
    }

    /// The download optimizer's closed form needs `rho = tau >= 2`.
    pub fn check_download(&self) -> Result<()> {
        if self.rho == self.tau && self.rho >= 2.0 && self.rho.is_finite() {
            Ok(())
        } else {
            Err(Error::UnsupportedExponent {
                rho: self.rho,
                tau: self.tau,
            })
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho >= 1.0 && self.tau >= 1.0) {
            return Err(invalid(
                "rho",
                format!("exponents must be >= 1, got rho = {}, tau = {}", self.rho, self.tau),
            ));
        }
        if !(self.kappa >= 0.0) {
            return Err(invalid("kappa", format!("must be nonnegative, got {}", self.kappa)));
        }
        Ok(())
    }
}

pub fn user_regret(user: &UserProfile, plan: &Plan, params: &RegretParams) -> f64 {
    if !is_throttled(user, plan) {
        return 0.0;
    }
    let d = user.demand();
    let rate_loss = match plan.mode {
        // the delivered stream runs at the throttled codec rate
        Mode::Streaming => 1.0 - plan.throttle_rate / user.rate,
        Mode::Download => {
            1.0 - plan.throttle_rate * post_throttle_activity(user, plan.throttle_rate, Mode::Download) / d
        }
    };
    let time_loss = 1.0 - plan.threshold / d;
    rate_loss.max(0.0).powf(params.rho) * time_loss.max(0.0).powf(params.tau)
}

pub fn aggregate_regret(users: &[UserProfile], plan: &Plan, params: &RegretParams) -> f64 {
    users.iter().map(|u| user_regret(u, plan, params)).sum()
}

pub fn tiered_user_regret(user: &UserProfile, tier_plan: &Plan, price: f64, params: &RegretParams) -> f64 {
    params.kappa * price + user_regret(user, tier_plan, params)
}

/// One tier as seen by the aggregate: its plan, price and member indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TierMembers {
    pub plan: Plan,
    pub price: f64,
    pub members: Vec<usize>,
}

/// Sum over tiers of member throttling regrets plus `kappa * price` per member.
///
/// The member lists must partition `0..users.len()`.
pub fn tiered_aggregate_regret(users: &[UserProfile], tiers: &[TierMembers], params: &RegretParams) -> Result<f64> {
    let mut seen = vec![false; users.len()];
    let mut total = 0.0;
    for tier in tiers {
        for &i in &tier.members {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::InvalidAssignment(format!("user {i} is in more than one tier"))),
                None => return Err(Error::InvalidAssignment(format!("user index {i} out of range"))),
            }
            total += tiered_user_regret(&users[i], &tier.plan, tier.price, params);
        }
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::InvalidAssignment(format!("user {missing} has no tier")));
    }
    Ok(total)
}
