//! Plan selection for file-download populations.
//!
//! With `r` tied to `T` through the capacity equality, the throttled set only
//! changes at finitely many thresholds: a user kicks in when `r(T)` drops
//! below its demand and kicks out when `T` reaches it. Between consecutive
//! events the regret is symmetric under swapping `r` and `T`, so `r(T) = T`
//! (the smaller root of a quadratic) is always stationary. It is the interval
//! minimum unless capacity is very tight, where it can turn into a local
//! maximum between two mirror-image minima; each interval therefore also
//! checks its endpoints and searches both sides of the root.

use crate::allocation::{max_threshold, rate_for_threshold, Mode, Plan, Policy, Solve};
use crate::error::{invalid, Result};
use crate::population::UserProfile;
use crate::regret::{aggregate_regret, RegretParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KickKind {
    KickIn,
    KickOut,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KickEvent {
    pub t: f64,
    pub kind: KickKind,
    /// Index into the user slice.
    pub user: usize,
}

/// One interval of constant throttled set and its best threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalReport {
    pub lo: f64,
    pub hi: f64,
    pub throttled: Vec<usize>,
    pub local_t: f64,
    pub local_regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownloadSolution {
    pub plan: Plan,
    pub regret: f64,
    pub intervals: Vec<IntervalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DownloadOutcome {
    Unlimited,
    Throttled(DownloadSolution),
}

impl DownloadOutcome {
    pub fn policy(&self) -> Policy {
        match self {
            DownloadOutcome::Unlimited => Policy::Unlimited,
            DownloadOutcome::Throttled(s) => Policy::Throttled(s.plan),
        }
    }

    pub fn regret(&self) -> f64 {
        match self {
            DownloadOutcome::Unlimited => 0.0,
            DownloadOutcome::Throttled(s) => s.regret,
        }
    }

    pub fn solution(&self) -> Option<&DownloadSolution> {
        match self {
            DownloadOutcome::Unlimited => None,
            DownloadOutcome::Throttled(s) => Some(s),
        }
    }
}

fn check_capacity(capacity: f64) -> Result<()> {
    if capacity >= 0.0 && capacity.is_finite() {
        Ok(())
    } else {
        Err(invalid(
            "capacity",
            format!("must be finite and nonnegative, got {capacity}"),
        ))
    }
}

/// Demands sorted ascending with prefix sums. For downloads the throttled set
/// is always the users above `max(T, r)`, a suffix of this order, so `r(T)`
/// and the kick points have closed forms.
struct DemandTable {
    demand: Vec<f64>,
    /// `order[k]` is the index into the user slice of the `k`-th smallest demand.
    order: Vec<usize>,
    /// `prefix[k]` is the sum of the `k` smallest demands.
    prefix: Vec<f64>,
    /// `inv_suffix[k]` is the sum of `1/d` over all but the `k` smallest demands.
    inv_suffix: Vec<f64>,
    capacity: f64,
    rho: f64,
}

impl DemandTable {
    fn new(users: &[UserProfile], capacity: f64, rho: f64) -> Self {
        let mut order: Vec<usize> = (0..users.len()).collect();
        order.sort_by(|&a, &b| users[a].demand().total_cmp(&users[b].demand()).then(a.cmp(&b)));
        let demand: Vec<f64> = order.iter().map(|&i| users[i].demand()).collect();
        let mut prefix = vec![0.0; demand.len() + 1];
        for (k, d) in demand.iter().enumerate() {
            prefix[k + 1] = prefix[k] + d;
        }
        let mut inv_suffix = vec![0.0; demand.len() + 1];
        for k in (0..demand.len()).rev() {
            inv_suffix[k] = inv_suffix[k + 1] + 1.0 / demand[k];
        }
        DemandTable {
            demand,
            order,
            prefix,
            inv_suffix,
            capacity,
            rho,
        }
    }

    fn len(&self) -> usize {
        self.demand.len()
    }

    /// Number of users with demand at most `m`.
    fn cut(&self, m: f64) -> usize {
        self.demand.partition_point(|&d| d <= m)
    }

    fn frozen(&self, k: usize) -> Frozen<'_> {
        Frozen {
            throttled: &self.demand[k..],
            free: self.capacity - self.prefix[k],
            inv_sum: self.inv_suffix[k],
            rho: self.rho,
        }
    }

    fn consumption(&self, t: f64, r: f64) -> f64 {
        let k = self.cut(t.max(r));
        let h = (self.len() - k) as f64;
        self.prefix[k] + h * t + r * (h - t * self.inv_suffix[k])
    }

    /// Capacity-consistent rate at threshold `t <= T̂` and the size of the
    /// unthrottled prefix.
    fn rate(&self, t: f64) -> (f64, usize) {
        let j = self
            .demand
            .partition_point(|&d| self.consumption(t, d) < self.capacity)
            .min(self.len() - 1);
        let k = self.cut(t).max(j);
        (self.frozen(k).rate(t), k)
    }

    fn regret(&self, t: f64) -> f64 {
        let (r, k) = self.rate(t);
        self.frozen(k).regret_at(t, r)
    }

    fn throttled_users(&self, k: usize) -> Vec<usize> {
        let mut ids = self.order[k..].to_vec();
        ids.sort_unstable();
        ids
    }
}

/// One throttled suffix with the rest of the capacity left for it.
struct Frozen<'a> {
    throttled: &'a [f64],
    free: f64,
    inv_sum: f64,
    rho: f64,
}

impl Frozen<'_> {
    fn rate(&self, t: f64) -> f64 {
        let h = self.throttled.len() as f64;
        if h == 0.0 {
            return 0.0;
        }
        ((self.free - h * t) / (h - t * self.inv_sum)).max(0.0)
    }

    fn regret_at(&self, t: f64, r: f64) -> f64 {
        let loss = self
            .throttled
            .iter()
            .map(|d| (1.0 - r / d).max(0.0) * (1.0 - t / d).max(0.0));
        if self.rho.fract() == 0.0 && self.rho <= 64.0 {
            let n = self.rho as i32;
            loss.map(|x| x.powi(n)).sum()
        } else {
            loss.map(|x| x.powf(self.rho)).sum()
        }
    }

    fn regret(&self, t: f64) -> f64 {
        self.regret_at(t, self.rate(t))
    }

    fn equal_rate_root(&self) -> Option<f64> {
        smaller_root(self.throttled.len() as f64, self.free, self.inv_sum)
    }
}

fn smaller_root(h: f64, free: f64, inv_sum: f64) -> Option<f64> {
    if h == 0.0 {
        return None;
    }
    let disc = h * h - free * inv_sum;
    // The smaller root, written to avoid cancellation when `free` is small.
    (disc >= 0.0).then(|| free / (h + disc.sqrt()))
}

fn table_kick_points(table: &DemandTable, t_hat: f64) -> Vec<KickEvent> {
    let mut events = Vec::with_capacity(2 * table.len());
    for (pos, &d) in table.demand.iter().enumerate() {
        let user = table.order[pos];
        if d < t_hat {
            events.push(KickEvent {
                t: d,
                kind: KickKind::KickOut,
                user,
            });
        }
        // At r = d the throttled set is everyone above d.
        let k = table.cut(d);
        let h = (table.len() - k) as f64;
        if h > 0.0 {
            let t = (table.capacity - table.prefix[k] - h * d) / (h - d * table.inv_suffix[k]);
            if t >= 0.0 && t < t_hat.min(d) {
                events.push(KickEvent {
                    t,
                    kind: KickKind::KickIn,
                    user,
                });
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.kind.cmp(&b.kind)).then(a.user.cmp(&b.user)));
    events
}

/// Kick-in and kick-out thresholds below `T̂`, sorted by `(t, kind, user)`.
/// Empty when the capacity covers all demand.
pub fn kick_points(users: &[UserProfile], capacity: f64) -> Result<Vec<KickEvent>> {
    check_capacity(capacity)?;
    let Some(bound) = max_threshold(users, capacity) else {
        return Ok(Vec::new());
    };
    Ok(table_kick_points(&DemandTable::new(users, capacity, 2.0), bound.t_hat))
}

/// Threshold where `r(T) = T` for a fixed throttled set: the smaller root of
/// `sum_H(1/d) T^2 - 2|H| T + (C - sum_L d) = 0`. `None` when the
/// discriminant is negative or `H` is empty.
pub fn interval_minimizer(throttled: &[f64], unthrottled: &[f64], capacity: f64) -> Option<f64> {
    smaller_root(
        throttled.len() as f64,
        capacity - unthrottled.iter().sum::<f64>(),
        throttled.iter().map(|d| 1.0 / d).sum(),
    )
}

/// Regret of the capacity-consistent plan at threshold `t`, solved by the
/// general fixed-point bisection.
fn regret_at(users: &[UserProfile], capacity: f64, t: f64, params: &RegretParams) -> Result<(Plan, f64)> {
    let r = match rate_for_threshold(users, capacity, t, Mode::Download)? {
        Solve::Value(r) => r,
        // Only reachable through rounding right at `T̂`, where `r = 0`.
        Solve::Infeasible | Solve::Unlimited => 0.0,
    };
    let plan = Plan::new(t, r, Mode::Download);
    Ok((plan, aggregate_regret(users, &plan, params)))
}

fn better(candidate: f64, incumbent: f64) -> bool {
    candidate < incumbent - 1e-12 * incumbent.abs().max(1.0)
}

fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..120 {
        if hi - lo <= 1e-13 * hi.abs().max(1e-300) {
            break;
        }
        if f1 <= f2 {
            hi = x2;
            (x2, f2) = (x1, f1);
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            (x1, f1) = (x2, f2);
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Whether `f` dips below both ends of `[lo, hi]`, judged from the slopes
/// just inside each end. Neither end may be a stationary point.
fn dips_inside(f: &impl Fn(f64) -> f64, lo: f64, hi: f64) -> bool {
    let step = 1e-6 * (hi - lo);
    f(lo + step) < f(lo) && f(hi - step) < f(hi)
}

pub fn optimize_download(users: &[UserProfile], capacity: f64, params: &RegretParams) -> Result<DownloadOutcome> {
    params.check_download()?;
    check_capacity(capacity)?;
    let Some(bound) = max_threshold(users, capacity) else {
        return Ok(DownloadOutcome::Unlimited);
    };
    let t_hat = bound.t_hat;
    let table = DemandTable::new(users, capacity, params.rho);

    let mut cuts: Vec<f64> = vec![0.0];
    cuts.extend(table_kick_points(&table, t_hat).iter().map(|e| e.t));
    cuts.push(t_hat);
    cuts.dedup_by(|b, a| *b <= *a);
    let cut_regret: Vec<f64> = cuts.iter().map(|&t| table.regret(t)).collect();

    let mut intervals = Vec::with_capacity(cuts.len());
    let mut at_root = Vec::with_capacity(cuts.len());
    for (k, w) in cuts.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        let (_, unthrottled) = table.rate(0.5 * (a + b));
        let frozen = table.frozen(unthrottled);
        let f = |t: f64| frozen.regret(t);

        let root = frozen.equal_rate_root().filter(|t| a < *t && *t < b);
        let mut best = match root {
            Some(t) => (t, table.regret(t)),
            None => (a, cut_regret[k]),
        };
        let mut offer = |t: f64, regret: f64| {
            if better(regret, best.1) || (!better(best.1, regret) && root.is_none() && t < best.0) {
                best = (t, regret);
            }
        };
        offer(a, cut_regret[k]);
        offer(b, cut_regret[k + 1]);
        // When capacity is tight the stationary point can be a local maximum
        // flanked by two mirror-image minima, one on each side.
        let segments = match root {
            Some(t) => vec![(a, t), (t, b)],
            None if dips_inside(&f, a, b) => vec![(a, b)],
            None => Vec::new(),
        };
        for (lo, hi) in segments {
            let t = golden_section(f, lo, hi);
            offer(t, table.regret(t));
        }
        let (local_t, local_regret) = best;
        at_root.push(root == Some(local_t));
        intervals.push(IntervalReport {
            lo: a,
            hi: b,
            throttled: table.throttled_users(unthrottled),
            local_t,
            local_regret,
        });
    }

    // Ties prefer a point with r = T, then the smaller threshold.
    let (mut best_t, mut best_regret, mut best_equal) = (t_hat, table.regret(t_hat), false);
    for (iv, &equal) in intervals.iter().zip(&at_root).rev() {
        let tie = !better(best_regret, iv.local_regret);
        if tie && (better(iv.local_regret, best_regret) || equal || !best_equal) {
            (best_t, best_regret, best_equal) = (iv.local_t, iv.local_regret, equal);
        }
    }
    let plan = Plan::new(best_t, table.rate(best_t).0, Mode::Download);
    let regret = aggregate_regret(users, &plan, params);
    Ok(DownloadOutcome::Throttled(DownloadSolution {
        plan,
        regret,
        intervals,
    }))
}

/// Brute-force minimum over `T = 0, step, 2 step, ... <= T̂`.
pub fn grid_oracle(users: &[UserProfile], capacity: f64, params: &RegretParams, step: f64) -> Result<DownloadOutcome> {
    check_capacity(capacity)?;
    if !(step > 0.0) {
        return Err(invalid("step", format!("must be positive, got {step}")));
    }
    let Some(bound) = max_threshold(users, capacity) else {
        return Ok(DownloadOutcome::Unlimited);
    };
    let mut best = regret_at(users, capacity, 0.0, params)?;
    let mut k = 1u64;
    loop {
        let t = step * k as f64;
        if t > bound.t_hat {
            break;
        }
        let here = regret_at(users, capacity, t, params)?;
        if here.1 < best.1 {
            best = here;
        }
        k += 1;
    }
    Ok(DownloadOutcome::Throttled(DownloadSolution {
        plan: best.0,
        regret: best.1,
        intervals: Vec::new(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::Population;
    use approx::assert_abs_diff_eq;

    fn four() -> Population {
        Population::from_rates(&[0.3, 0.45, 0.5, 1.0]).unwrap()
    }

    #[test]
    fn kick_events_of_four_user_instance() {
        let events = kick_points(&four(), 1.8).unwrap();
        let kickins: Vec<(f64, usize)> = events
            .iter()
            .filter(|e| e.kind == KickKind::KickIn)
            .map(|e| (e.t, e.user))
            .collect();
        let kickouts: Vec<(f64, usize)> = events
            .iter()
            .filter(|e| e.kind == KickKind::KickOut)
            .map(|e| (e.t, e.user))
            .collect();
        assert_eq!(kickins.len(), 2);
        assert_abs_diff_eq!(kickins[0].0, 0.1, epsilon = 1e-9);
        assert_eq!(kickins[0].1, 2);
        assert_abs_diff_eq!(kickins[1].0, 0.3 / 1.3, epsilon = 1e-9);
        assert_eq!(kickins[1].1, 1);
        assert_eq!(kickouts, vec![(0.3, 0), (0.45, 1), (0.5, 2)]);
        assert!(events.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn single_user_has_no_events() {
        let pop = Population::from_rates(&[1.0]).unwrap();
        assert!(kick_points(&pop, 0.5).unwrap().is_empty());
        let sol = optimize_download(&pop, 0.5, &RegretParams::default()).unwrap();
        assert_eq!(sol.solution().unwrap().intervals.len(), 1);
    }

    #[test]
    fn quadratic_root_examples() {
        assert_abs_diff_eq!(
            interval_minimizer(&[0.45, 0.5, 1.0], &[0.3], 1.8).unwrap(),
            (3.0 - (7.0f64 / 6.0).sqrt()) / (47.0 / 9.0),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            interval_minimizer(&[0.45, 0.5, 1.0], &[0.3], 1.8).unwrap(),
            0.36764,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            interval_minimizer(&[0.5, 1.0], &[0.3, 0.45], 1.8).unwrap(),
            0.35935,
            epsilon = 1e-5
        );
        assert_abs_diff_eq!(
            interval_minimizer(&[1.0], &[0.3, 0.45, 0.5], 1.8).unwrap(),
            1.0 - 0.45f64.sqrt(),
            epsilon = 1e-12
        );
        assert_eq!(interval_minimizer(&[], &[1.0], 1.0), None);
        assert_eq!(interval_minimizer(&[1.0], &[], 2.0), None);
    }

    #[test]
    fn four_user_optimum() {
        let out = optimize_download(&four(), 1.8, &RegretParams::default()).unwrap();
        let sol = out.solution().unwrap();
        assert_abs_diff_eq!(sol.plan.threshold, 0.36764, epsilon = 1e-5);
        assert!((sol.plan.throttle_rate - sol.plan.threshold).abs() <= 1e-9);
        assert_abs_diff_eq!(sol.regret, 0.16593, epsilon = 1e-4);

        let at = |t: f64| sol.intervals.iter().find(|iv| iv.lo <= t && t < iv.hi).unwrap();
        assert_abs_diff_eq!(at(0.05).local_regret, 0.2025, epsilon = 1e-9);
        assert_abs_diff_eq!(at(0.3).local_t, sol.plan.threshold, epsilon = 1e-12);
        assert_abs_diff_eq!(at(0.47).local_t, 0.45, epsilon = 1e-12);
        assert_abs_diff_eq!(at(0.47).local_regret, 0.18189, epsilon = 1e-5);
        assert_abs_diff_eq!(at(0.52).local_regret, 0.2025, epsilon = 1e-9);
        assert_abs_diff_eq!(at(0.15).local_t, 0.3 / 1.3, epsilon = 1e-12);
    }

    #[test]
    fn exponent_does_not_move_the_optimum() {
        let t = |rho: f64| {
            optimize_download(&four(), 1.8, &RegretParams::symmetric(rho))
                .unwrap()
                .solution()
                .unwrap()
                .plan
                .threshold
        };
        assert_abs_diff_eq!(t(3.0), t(2.0), epsilon = 1e-9);
        assert_abs_diff_eq!(t(4.0), t(2.0), epsilon = 1e-9);
        assert!(optimize_download(&four(), 1.8, &RegretParams::symmetric(1.5)).is_err());
    }

    #[test]
    fn unlimited_and_zero_capacity() {
        assert_eq!(
            optimize_download(&four(), 2.25, &RegretParams::default()).unwrap(),
            DownloadOutcome::Unlimited
        );
        let out = optimize_download(&four(), 0.0, &RegretParams::default()).unwrap();
        let sol = out.solution().unwrap();
        assert_eq!(sol.plan.threshold, 0.0);
        assert_eq!(sol.plan.throttle_rate, 0.0);
        assert_abs_diff_eq!(sol.regret, 4.0);
        assert!(optimize_download(&four(), -1.0, &RegretParams::default()).is_err());
    }

    #[test]
    fn closed_forms_match_fixed_point_solvers() {
        use crate::allocation::{partition, threshold_for_rate};
        let pop = crate::population::generate_lognormal(60, 1.0, 0.4, 3).unwrap();
        for frac in [0.3, 0.6, 0.9] {
            let c = frac * pop.total_demand();
            let t_hat = max_threshold(&pop, c).unwrap().t_hat;
            let table = DemandTable::new(&pop, c, 2.0);
            for k in 0..=50 {
                let t = t_hat * k as f64 / 50.0;
                let (r, unthrottled) = table.rate(t);
                let slow = rate_for_threshold(&pop, c, t, Mode::Download).unwrap().value().unwrap();
                assert_abs_diff_eq!(r, slow, epsilon = 1e-8);
                let plan = Plan::new(t, r, Mode::Download);
                assert_eq!(table.throttled_users(unthrottled), partition(&pop, &plan).throttled);
                assert_abs_diff_eq!(
                    table.regret(t),
                    aggregate_regret(&pop, &plan, &RegretParams::default()),
                    epsilon = 1e-9
                );
            }
            for e in kick_points(&pop, c)
                .unwrap()
                .iter()
                .filter(|e| e.kind == KickKind::KickIn)
            {
                let slow = threshold_for_rate(&pop, c, pop[e.user].demand(), Mode::Download)
                    .unwrap()
                    .value()
                    .unwrap();
                assert_abs_diff_eq!(e.t, slow, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn grid_oracle_agrees() {
        let opt = optimize_download(&four(), 1.8, &RegretParams::default())
            .unwrap()
            .regret();
        let grid = grid_oracle(&four(), 1.8, &RegretParams::default(), 1e-4)
            .unwrap()
            .regret();
        assert!(grid >= opt - 1e-9);
        assert!(grid - opt < 1e-5);
        let coarse = grid_oracle(&four(), 1.8, &RegretParams::default(), 1.0).unwrap();
        assert_eq!(coarse.solution().unwrap().plan.threshold, 0.0);
    }
}
