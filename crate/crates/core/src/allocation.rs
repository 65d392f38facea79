//! Capacity accounting for a threshold/rate plan.
//!
//! A user whose per-cycle demand `d = rate * activity` exceeds the threshold
//! `T` crosses it at fraction `T / d` of the cycle and is then limited to rate
//! `r`. Users are split into the throttled set `H`, the low-demand set `L_D`
//! (`d <= T`) and the low-rate set `L_R` (crossed the threshold, but `r` is
//! no real limit for them).

use crate::error::{invalid, Error, Result};
use crate::population::UserProfile;

/// Iteration cap of the fixed-point bisections.
pub const MAX_BISECTION_STEPS: usize = 200;

/// How users respond to a reduced rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Watches for the same fraction of time at a lower quality (`y = x`).
    Streaming,
    /// Stays active longer to recover lost bytes (`y = min(d / r, 1)`).
    Download,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plan {
    /// Bytes per cycle a user may consume at its own rate.
    pub threshold: f64,
    /// Rate after the threshold is reached, in bits per cycle.
    pub throttle_rate: f64,
    pub mode: Mode,
}

impl Plan {
    pub fn new(threshold: f64, throttle_rate: f64, mode: Mode) -> Self {
        Plan {
            threshold,
            throttle_rate,
            mode,
        }
    }
}

/// Result of planning a single capacity: either a throttling plan or the
/// explicit "capacity covers all demand" outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Policy {
    Unlimited,
    Throttled(Plan),
}

impl Policy {
    pub fn plan(&self) -> Option<&Plan> {
        match self {
            Policy::Unlimited => None,
            Policy::Throttled(plan) => Some(plan),
        }
    }
}

/// Outcome of inverting the capacity equality for one variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Solve {
    Value(f64),
    /// Capacity covers total demand; no throttling is needed.
    Unlimited,
    /// No value in the admissible range meets the capacity.
    Infeasible,
}

impl Solve {
    pub fn value(self) -> Option<f64> {
        match self {
            Solve::Value(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UserClass {
    Throttled,
    LowDemand,
    LowRate,
}

/// Indices (into the user slice) of each class.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Partition {
    pub throttled: Vec<usize>,
    pub low_demand: Vec<usize>,
    pub low_rate: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdBound {
    /// Largest feasible threshold, reached at `r = 0`.
    pub t_hat: f64,
    /// Users still throttled at `t_hat`.
    pub h_hat: Vec<usize>,
}

/// Fraction of the cycle a throttled user stays active after the threshold.
pub fn post_throttle_activity(user: &UserProfile, r: f64, mode: Mode) -> f64 {
    match mode {
        Mode::Streaming => user.activity,
        Mode::Download if r <= 0.0 => 1.0,
        Mode::Download => (user.demand() / r).min(1.0),
    }
}

pub fn classify(user: &UserProfile, plan: &Plan) -> UserClass {
    let d = user.demand();
    let t = plan.threshold;
    let r = plan.throttle_rate;
    if d <= t {
        return UserClass::LowDemand;
    }
    let throttled = match plan.mode {
        Mode::Download => d > r,
        Mode::Streaming => user.rate > r,
    };
    if throttled {
        UserClass::Throttled
    } else {
        UserClass::LowRate
    }
}

#[inline]
pub fn is_throttled(user: &UserProfile, plan: &Plan) -> bool {
    classify(user, plan) == UserClass::Throttled
}

pub fn partition(users: &[UserProfile], plan: &Plan) -> Partition {
    let mut out = Partition::default();
    for (i, user) in users.iter().enumerate() {
        match classify(user, plan) {
            UserClass::Throttled => out.throttled.push(i),
            UserClass::LowDemand => out.low_demand.push(i),
            UserClass::LowRate => out.low_rate.push(i),
        }
    }
    out
}

/// Bits per cycle the user receives under `plan`.
pub fn allocation(user: &UserProfile, plan: &Plan) -> f64 {
    if is_throttled(user, plan) {
        let d = user.demand();
        let y = post_throttle_activity(user, plan.throttle_rate, plan.mode);
        plan.threshold + plan.throttle_rate * y * (1.0 - plan.threshold / d)
    } else {
        user.demand()
    }
}

pub fn consumption(users: &[UserProfile], plan: &Plan) -> f64 {
    users.iter().map(|u| allocation(u, plan)).sum()
}

fn total_demand(users: &[UserProfile]) -> f64 {
    users.iter().map(UserProfile::demand).sum()
}

/// Maximum threshold `T̂` and its throttled set, or `None` when capacity
/// covers the total demand.
pub fn max_threshold(users: &[UserProfile], capacity: f64) -> Option<ThresholdBound> {
    if users.is_empty() || capacity >= total_demand(users) {
        return None;
    }
    let capacity = capacity.max(0.0);
    let mut order: Vec<usize> = (0..users.len()).collect();
    order.sort_by(|&a, &b| users[a].demand().total_cmp(&users[b].demand()));
    let n = users.len();
    // Move users from H to L smallest-first until the membership is consistent.
    let mut low_sum = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        let t_hat = (capacity - low_sum) / (n - k) as f64;
        if t_hat < users[idx].demand() {
            let mut h_hat = order[k..].to_vec();
            h_hat.sort_unstable();
            return Some(ThresholdBound { t_hat, h_hat });
        }
        low_sum += users[idx].demand();
    }
    unreachable!("capacity below total demand always leaves the largest user throttled")
}

/// Root of the capacity equality in `T` with membership frozen at `(probe, r)`.
fn frozen_threshold(users: &[UserProfile], capacity: f64, r: f64, mode: Mode, probe: f64) -> Option<f64> {
    let plan = Plan::new(probe, r, mode);
    let mut free = capacity;
    let mut slope = 0.0;
    let mut throttled = 0usize;
    for user in users {
        let d = user.demand();
        if is_throttled(user, &plan) {
            let ry = r * post_throttle_activity(user, r, mode);
            free -= ry;
            slope += 1.0 - ry / d;
            throttled += 1;
        } else {
            free -= d;
        }
    }
    (throttled > 0).then(|| free / slope)
}

/// Root of the capacity equality in `r` with membership frozen at `(t, probe)`.
fn frozen_rate(users: &[UserProfile], capacity: f64, t: f64, mode: Mode, probe: f64) -> Option<f64> {
    let plan = Plan::new(t, probe, mode);
    let mut free = capacity;
    let mut slope = 0.0;
    let mut throttled = 0usize;
    for user in users {
        let d = user.demand();
        if is_throttled(user, &plan) {
            let y = match mode {
                Mode::Streaming => user.activity,
                Mode::Download => 1.0,
            };
            free -= t;
            slope += y * (1.0 - t / d);
            throttled += 1;
        } else {
            free -= d;
        }
    }
    (throttled > 0 && slope > 0.0).then(|| free / slope)
}

/// Bisection for the self-consistent root of a piecewise-linear monotone
/// equation. `frozen(mid)` solves the equation with membership frozen at
/// `mid`; `None` means nobody is throttled at `mid`, i.e. `mid` is too large.
fn bisect_fixed_point(
    mut lo: f64,
    mut hi: f64,
    epsilon: f64,
    frozen: impl Fn(f64) -> Option<f64>,
    residual: impl Fn(f64) -> f64,
) -> Result<f64> {
    let (lo0, hi0) = (lo, hi);
    // One extra frozen solve at the candidate settles roots sitting next to a
    // membership change.
    let polish = |t: f64| {
        let t = t.clamp(lo0, hi0);
        match frozen(t) {
            Some(t2) if residual(t2.clamp(lo0, hi0)).abs() < residual(t).abs() => t2.clamp(lo0, hi0),
            _ => t,
        }
    };
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        match frozen(mid) {
            None => hi = mid,
            Some(t) => {
                if (mid - t).abs() < epsilon {
                    return Ok(polish(t));
                }
                if mid < t {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
            return Ok(polish(0.5 * (lo + hi)));
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_BISECTION_STEPS,
        gap: hi - lo,
    })
}

/// Default bisection tolerance for a given capacity.
pub fn default_epsilon(capacity: f64) -> f64 {
    1e-9 * capacity.max(1.0)
}

/// Threshold `T` meeting `capacity` at throttle rate `r`, with the throttled
/// set consistent with `T`.
pub fn threshold_for_rate(users: &[UserProfile], capacity: f64, r: f64, mode: Mode) -> Result<Solve> {
    solve_threshold_with(users, capacity, r, mode, default_epsilon(capacity))
}

pub fn solve_threshold_with(users: &[UserProfile], capacity: f64, r: f64, mode: Mode, epsilon: f64) -> Result<Solve> {
    if !(r >= 0.0) {
        return Err(invalid("r", format!("throttle rate must be nonnegative, got {r}")));
    }
    if !(epsilon > 0.0) {
        return Err(invalid("epsilon", format!("must be positive, got {epsilon}")));
    }
    let Some(bound) = max_threshold(users, capacity) else {
        return Ok(Solve::Unlimited);
    };
    if consumption(users, &Plan::new(0.0, r, mode)) > capacity {
        return Ok(Solve::Infeasible);
    }
    let t = bisect_fixed_point(
        0.0,
        bound.t_hat,
        epsilon,
        |probe| frozen_threshold(users, capacity, r, mode, probe),
        |t| consumption(users, &Plan::new(t, r, mode)) - capacity,
    )?;
    Ok(Solve::Value(t))
}

/// Throttle rate `r` meeting `capacity` at threshold `t`.
pub fn rate_for_threshold(users: &[UserProfile], capacity: f64, t: f64, mode: Mode) -> Result<Solve> {
    if !(t >= 0.0) {
        return Err(invalid("t", format!("threshold must be nonnegative, got {t}")));
    }
    let Some(bound) = max_threshold(users, capacity) else {
        return Ok(Solve::Unlimited);
    };
    if t > bound.t_hat {
        return Ok(Solve::Infeasible);
    }
    let r_hi = users.iter().map(|u| u.rate).fold(0.0, f64::max);
    let r = bisect_fixed_point(
        0.0,
        r_hi,
        default_epsilon(capacity),
        |probe| frozen_rate(users, capacity, t, mode, probe),
        |r| consumption(users, &Plan::new(t, r, mode)) - capacity,
    )?;
    Ok(Solve::Value(r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Population;
    use approx::assert_abs_diff_eq;

    fn four() -> Population {
        Population::from_rates(&[0.3, 0.45, 0.5, 1.0]).unwrap()
    }

    fn stream3() -> Population {
        Population::new(vec![
            UserProfile::new(0, 1.0, 0.5).unwrap(),
            UserProfile::new(1, 0.8, 0.5).unwrap(),
            UserProfile::new(2, 0.4, 0.5).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn download_activity() {
        let u = UserProfile::new(0, 0.8, 1.0).unwrap();
        assert_eq!(post_throttle_activity(&u, 0.4, Mode::Download), 1.0);
        assert_abs_diff_eq!(post_throttle_activity(&u, 1.0, Mode::Download), 0.8, epsilon = 1e-15);
        assert_eq!(post_throttle_activity(&u, 0.8, Mode::Download), 1.0);
        assert_eq!(post_throttle_activity(&u, 0.0, Mode::Download), 1.0);
        let s = UserProfile::new(0, 0.8, 0.3).unwrap();
        assert_eq!(post_throttle_activity(&s, 0.1, Mode::Streaming), 0.3);
    }

    #[test]
    fn partition_at_optimum() {
        let pop = four();
        let plan = Plan::new(0.36764, 0.36764, Mode::Download);
        let p = partition(&pop, &plan);
        assert_eq!(p.throttled, vec![1, 2, 3]);
        assert_eq!(p.low_demand, vec![0]);
        assert!(p.low_rate.is_empty());
        let p = partition(&pop, &Plan::new(1.0, 0.1, Mode::Download));
        assert!(p.throttled.is_empty());
    }

    #[test]
    fn streaming_rate_boundary_is_low_rate() {
        let u = UserProfile::new(0, 0.6, 0.5).unwrap();
        let plan = Plan::new(0.25, 0.6, Mode::Streaming);
        assert_eq!(classify(&u, &plan), UserClass::LowRate);
    }

    #[test]
    fn consumption_examples() {
        let pop = four();
        let plan = Plan::new(0.36764, 0.36764, Mode::Download);
        assert_abs_diff_eq!(consumption(&pop, &plan), 1.8, epsilon = 1e-4);
        assert_abs_diff_eq!(
            consumption(&pop, &Plan::new(5.0, 0.0, Mode::Download)),
            2.25,
            epsilon = 1e-12
        );
        let s = stream3();
        let plan = Plan::new(0.27273, 0.4, Mode::Streaming);
        assert_abs_diff_eq!(consumption(&s, &plan), 0.9, epsilon = 1e-4);
    }

    #[test]
    fn allocation_examples() {
        let big = UserProfile::new(0, 1.0, 1.0).unwrap();
        let plan = Plan::new(0.36764, 0.36764, Mode::Download);
        assert_abs_diff_eq!(allocation(&big, &plan), 0.36764 + 0.36764 * 0.63236, epsilon = 1e-9);
        let small = UserProfile::new(1, 0.3, 1.0).unwrap();
        assert_eq!(allocation(&small, &plan), 0.3);
        let zero_t = Plan::new(0.0, 0.2, Mode::Download);
        assert_abs_diff_eq!(allocation(&big, &zero_t), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn threshold_for_rate_examples() {
        let pop = four();
        let t = threshold_for_rate(&pop, 1.8, 0.5, Mode::Download)
            .unwrap()
            .value()
            .unwrap();
        assert_abs_diff_eq!(t, 0.1, epsilon = 1e-12);
        let t = threshold_for_rate(&pop, 1.8, 0.45, Mode::Download)
            .unwrap()
            .value()
            .unwrap();
        assert_abs_diff_eq!(t, 0.15 / 0.65, epsilon = 1e-12);
        let t = threshold_for_rate(&pop, 1.8, 0.0, Mode::Download)
            .unwrap()
            .value()
            .unwrap();
        assert_abs_diff_eq!(t, 0.55, epsilon = 1e-12);
        assert_eq!(
            threshold_for_rate(&pop, 1.8, 1.0, Mode::Download).unwrap(),
            Solve::Infeasible
        );
        assert_eq!(
            threshold_for_rate(&pop, 3.0, 0.2, Mode::Download).unwrap(),
            Solve::Unlimited
        );
    }

    #[test]
    fn max_threshold_examples() {
        let bound = max_threshold(&four(), 1.8).unwrap();
        assert_abs_diff_eq!(bound.t_hat, 0.55, epsilon = 1e-12);
        assert_eq!(bound.h_hat, vec![3]);
        let one = Population::from_rates(&[1.0]).unwrap();
        assert_abs_diff_eq!(max_threshold(&one, 0.5).unwrap().t_hat, 0.5);
        assert!(max_threshold(&four(), 2.25).is_none());
    }

    #[test]
    fn rate_for_threshold_inverts() {
        let pop = four();
        let r = rate_for_threshold(&pop, 1.8, 0.1, Mode::Download)
            .unwrap()
            .value()
            .unwrap();
        assert_abs_diff_eq!(r, 0.5, epsilon = 1e-12);
        let r = rate_for_threshold(&pop, 1.8, 0.45, Mode::Download)
            .unwrap()
            .value()
            .unwrap();
        assert_abs_diff_eq!(r, 0.15 / 0.65, epsilon = 1e-12);
        assert_eq!(
            rate_for_threshold(&pop, 1.8, 0.6, Mode::Download).unwrap(),
            Solve::Infeasible
        );
    }

    #[test]
    fn threshold_decreases_in_rate() {
        let pop = crate::population::generate_lognormal(200, 1.0, 0.25, 5).unwrap();
        let c = 0.85 * pop.total_demand();
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let r = 0.05 * k as f64;
            match threshold_for_rate(&pop, c, r, Mode::Download).unwrap() {
                Solve::Value(t) => {
                    assert!(t < prev, "r = {r}: {t} !< {prev}");
                    let residual = consumption(&pop, &Plan::new(t, r, Mode::Download)) - c;
                    assert!(residual.abs() <= 1e-9 * c);
                    prev = t;
                }
                Solve::Infeasible => break,
                Solve::Unlimited => unreachable!(),
            }
        }
    }
}
