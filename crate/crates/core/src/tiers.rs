//! Priced tiers and the games users and the ISP play over them.
//!
//! Each tier has a price and a capacity share and runs its own single-tier
//! plan over its members. A user's regret in a tier is its throttling regret
//! plus `kappa * price`. Users move to a tier when doing so strictly lowers
//! their regret, anticipating that both tiers re-plan for the new membership
//! at unchanged shares.
//!
//! Two tiers are small enough to enumerate every assignment for a given
//! split. For more tiers the ISP instead picks thresholds directly (with
//! `r = T`) so that the tiers together use the whole capacity, and users
//! best-respond in turn until nobody moves.

use std::collections::HashMap;

use crate::allocation::{Mode, Plan};
use crate::download::optimize_download;
use crate::error::{invalid, Error, Result};
use crate::population::{assign_tiers_binomial, Population, UserProfile};
use crate::regret::{tiered_aggregate_regret, tiered_user_regret, RegretParams, TierMembers};
use crate::stream::{optimize_streaming, CodecSet};

/// Largest population for which every two-tier assignment is checked.
pub const ENUMERATION_CAP: usize = 20;
pub const DEFAULT_SPLIT_STEP: f64 = 0.01;
pub const DEFAULT_MAX_ITERS: usize = 100;
/// A move must lower a user's regret by more than this.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-12;
/// Leader solutions closer than this (max-norm) count as unchanged.
pub const LEADER_TOLERANCE: f64 = 1e-9;

/// How every tier plans for its members.
#[derive(Debug, Clone, PartialEq)]
pub enum TierKind {
    Download,
    Streaming(CodecSet),
}

impl TierKind {
    pub fn mode(&self) -> Mode {
        match self {
            TierKind::Download => Mode::Download,
            TierKind::Streaming(_) => Mode::Streaming,
        }
    }
}

/// Best plan for one tier's members at capacity `share`.
///
/// An empty tier gets the all-zero plan. A tier whose share covers its
/// members' demand needs no throttling and reports `T = r = share`.
pub fn optimize_tier(members: &[UserProfile], share: f64, kind: &TierKind, params: &RegretParams) -> Result<Plan> {
    if !(share >= 0.0 && share.is_finite()) {
        return Err(invalid("share", format!("must be finite and nonnegative, got {share}")));
    }
    let mode = kind.mode();
    if members.is_empty() {
        return Ok(Plan::new(0.0, 0.0, mode));
    }
    let unthrottled = Plan::new(share, share, mode);
    let policy = match kind {
        TierKind::Download => optimize_download(members, share, params)?.policy(),
        TierKind::Streaming(codecs) => optimize_streaming(members, share, codecs, params)?.policy(),
    };
    Ok(policy.plan().copied().unwrap_or(unthrottled))
}

/// Tier index per user; users are indexed in rate order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    tier_of: Vec<usize>,
    n_tiers: usize,
}

impl Assignment {
    pub fn new(tier_of: Vec<usize>, n_tiers: usize) -> Result<Self> {
        if n_tiers == 0 || n_tiers > 36 {
            return Err(invalid("n_tiers", format!("need 1 to 36 tiers, got {n_tiers}")));
        }
        if let Some((user, &t)) = tier_of.iter().enumerate().find(|(_, &t)| t >= n_tiers) {
            return Err(Error::InvalidAssignment(format!(
                "user {user} is in tier {t} of {n_tiers}"
            )));
        }
        Ok(Assignment { tier_of, n_tiers })
    }

    /// Two-tier assignment where bit `i` of `mask` puts user `i` in the upper tier.
    pub fn from_mask(mask: u64, n_users: usize) -> Self {
        Assignment {
            tier_of: (0..n_users).map(|i| ((mask >> i) & 1) as usize).collect(),
            n_tiers: 2,
        }
    }

    /// Inverse of [`Assignment::class_id`].
    pub fn from_class_id(id: &str, n_tiers: usize) -> Result<Self> {
        let tier_of = id
            .chars()
            .map(|c| {
                c.to_digit(36)
                    .map(|t| t as usize)
                    .ok_or_else(|| Error::InvalidAssignment(format!("bad class digit {c:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Assignment::new(tier_of, n_tiers)
    }

    pub fn len(&self) -> usize {
        self.tier_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tier_of.is_empty()
    }

    pub fn n_tiers(&self) -> usize {
        self.n_tiers
    }

    pub fn tier_of(&self) -> &[usize] {
        &self.tier_of
    }

    pub fn tier(&self, user: usize) -> usize {
        self.tier_of[user]
    }

    pub fn members(&self, tier: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tier_of[i] == tier).collect()
    }

    /// One digit per user: digit `i` is user `i`'s tier, `0` the cheapest.
    pub fn class_id(&self) -> String {
        self.tier_of
            .iter()
            .map(|&t| char::from_digit(t as u32, 36).expect("at most 36 tiers"))
            .collect()
    }

    pub fn with_move(&self, user: usize, tier: usize) -> Self {
        let mut next = self.clone();
        next.tier_of[user] = tier;
        next
    }
}

/// A strictly improving unilateral move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    pub user: usize,
    pub tier: usize,
    /// Regret saved by moving; always positive.
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumCheck {
    pub is_nash: bool,
    pub improving: Vec<Deviation>,
}

/// A Nash assignment at one capacity split.
#[derive(Debug, Clone, PartialEq)]
pub struct Equilibrium {
    pub assignment: Assignment,
    pub tier_plans: Vec<Plan>,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitRow {
    /// Fraction of capacity given to the cheaper tier.
    pub split: f64,
    pub equilibria: Vec<Equilibrium>,
}

impl SplitRow {
    /// `(min, avg, max)` aggregate regret over the equilibria, if any.
    pub fn stats(&self) -> Option<(f64, f64, f64)> {
        let regrets = self.equilibria.iter().map(|e| e.regret);
        let n = self.equilibria.len();
        (n > 0).then(|| {
            let min = regrets.clone().fold(f64::INFINITY, f64::min);
            let max = regrets.clone().fold(f64::NEG_INFINITY, f64::max);
            let avg = (regrets.sum::<f64>() / n as f64).clamp(min, max);
            (min, avg, max)
        })
    }
}

/// Splits `0, step, 2 step, ..., 1`.
pub fn split_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step < 1.0) {
        return Err(invalid("step", format!("must lie in (0, 1), got {step}")));
    }
    let n = (1.0 / step).round() as usize;
    Ok((0..=n)
        .map(|k| (k as f64 * step).min(1.0))
        .chain((n as f64 * step < 1.0).then_some(1.0))
        .collect())
}

/// Thresholds chosen by the ISP for a fixed membership.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTierSolution {
    /// `T_j = r_j` per tier.
    pub thresholds: Vec<f64>,
    /// Capacity each tier consumes at its threshold.
    pub shares: Vec<f64>,
    /// Summed throttling and price regret.
    pub objective: f64,
    /// Capacity minus the summed shares.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    pub moves: usize,
    pub regret: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumReport {
    pub converged: bool,
    pub iterations: usize,
    pub assignment: Assignment,
    pub shares: Vec<f64>,
    pub tier_plans: Vec<Plan>,
    pub user_regrets: Vec<f64>,
    pub regret: f64,
    pub log: Vec<IterationLog>,
}

/// Users, tier prices and regret parameters of a tier game.
#[derive(Debug, Clone)]
pub struct TierGame<'a> {
    users: &'a [UserProfile],
    prices: Vec<f64>,
    kind: TierKind,
    params: RegretParams,
}

impl<'a> TierGame<'a> {
    /// `users` must be in rate order (as a [`Population`] is); prices must be
    /// nondecreasing so tier 0 is the cheapest.
    pub fn new(users: &'a [UserProfile], prices: &[f64], kind: TierKind, params: RegretParams) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        if prices.is_empty() || prices.len() > 36 {
            return Err(invalid("prices", format!("need 1 to 36 tiers, got {}", prices.len())));
        }
        if prices.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(invalid("prices", "prices must be finite and nonnegative"));
        }
        if prices.windows(2).any(|w| w[1] < w[0]) {
            return Err(invalid("prices", "prices must be in ascending order"));
        }
        params.validate()?;
        if kind == TierKind::Download {
            params.check_download()?;
        }
        Ok(TierGame {
            users,
            prices: prices.to_vec(),
            kind,
            params,
        })
    }

    pub fn users(&self) -> &[UserProfile] {
        self.users
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn n_tiers(&self) -> usize {
        self.prices.len()
    }

    pub fn params(&self) -> &RegretParams {
        &self.params
    }

    fn check_assignment(&self, assignment: &Assignment) -> Result<()> {
        if assignment.len() != self.users.len() || assignment.n_tiers() != self.n_tiers() {
            return Err(Error::InvalidAssignment(format!(
                "assignment covers {} users in {} tiers, game has {} users in {} tiers",
                assignment.len(),
                assignment.n_tiers(),
                self.users.len(),
                self.n_tiers()
            )));
        }
        Ok(())
    }

    fn check_shares(&self, shares: &[f64]) -> Result<()> {
        if shares.len() != self.n_tiers() {
            return Err(invalid(
                "shares",
                format!("need {} shares, got {}", self.n_tiers(), shares.len()),
            ));
        }
        if shares.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(invalid("shares", "shares must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Shares `(split * C, (1 - split) * C)` of a two-tier game.
    pub fn two_tier_shares(&self, capacity: f64, split: f64) -> Result<[f64; 2]> {
        if self.n_tiers() != 2 {
            return Err(invalid(
                "prices",
                format!("split sweeps need 2 tiers, got {}", self.n_tiers()),
            ));
        }
        if !(0.0..=1.0).contains(&split) {
            return Err(invalid("split", format!("must lie in [0, 1], got {split}")));
        }
        Ok([split * capacity, (1.0 - split) * capacity])
    }

    pub fn tier_plan(&self, members: &[usize], share: f64) -> Result<Plan> {
        let subset: Vec<UserProfile> = members.iter().map(|&i| self.users[i]).collect();
        optimize_tier(&subset, share, &self.kind, &self.params)
    }

    pub fn tier_plans(&self, assignment: &Assignment, shares: &[f64]) -> Result<Vec<Plan>> {
        self.check_assignment(assignment)?;
        self.check_shares(shares)?;
        (0..self.n_tiers())
            .map(|j| self.tier_plan(&assignment.members(j), shares[j]))
            .collect()
    }

    /// Whether moving to `tier` can beat `current` at all: the price term
    /// alone bounds the regret there from below.
    fn could_improve(&self, current: f64, tier: usize) -> bool {
        self.params.kappa * self.prices[tier] < current - IMPROVEMENT_TOLERANCE
    }

    pub fn user_regret(&self, user: usize, tier: usize, plan: &Plan) -> f64 {
        tiered_user_regret(&self.users[user], plan, self.prices[tier], &self.params)
    }

    /// Summed regret of an assignment under the given tier plans.
    pub fn aggregate_regret(&self, assignment: &Assignment, plans: &[Plan]) -> Result<f64> {
        self.check_assignment(assignment)?;
        let tiers: Vec<TierMembers> = plans
            .iter()
            .enumerate()
            .map(|(j, plan)| TierMembers {
                plan: *plan,
                price: self.prices[j],
                members: assignment.members(j),
            })
            .collect();
        tiered_aggregate_regret(self.users, &tiers, &self.params)
    }

    /// Regret `user` would have in `target` after moving there, with the
    /// target tier re-planned for its new membership at its current share.
    pub fn deviation_regret(&self, assignment: &Assignment, shares: &[f64], user: usize, target: usize) -> Result<f64> {
        self.check_assignment(assignment)?;
        self.check_shares(shares)?;
        let moved = assignment.with_move(user, target);
        let plan = self.tier_plan(&moved.members(target), shares[target])?;
        Ok(self.user_regret(user, target, &plan))
    }

    pub fn check_equilibrium(&self, assignment: &Assignment, shares: &[f64]) -> Result<EquilibriumCheck> {
        self.check_assignment(assignment)?;
        self.check_shares(shares)?;
        self.check_with(assignment, &mut |tier, members| self.tier_plan(members, shares[tier]))
    }

    /// Nash check with tier plans supplied by `plan_of(tier, members)`.
    fn check_with(
        &self,
        assignment: &Assignment,
        plan_of: &mut dyn FnMut(usize, &[usize]) -> Result<Plan>,
    ) -> Result<EquilibriumCheck> {
        let members: Vec<Vec<usize>> = (0..self.n_tiers()).map(|j| assignment.members(j)).collect();
        let plans = (0..self.n_tiers())
            .map(|j| plan_of(j, &members[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut improving = Vec::new();
        for user in 0..self.users.len() {
            let here = assignment.tier(user);
            let stay = self.user_regret(user, here, &plans[here]);
            for target in (0..self.n_tiers()).filter(|&t| t != here && self.could_improve(stay, t)) {
                let mut joined = members[target].clone();
                let at = joined.partition_point(|&i| i < user);
                joined.insert(at, user);
                let moved = self.user_regret(user, target, &plan_of(target, &joined)?);
                if moved < stay - IMPROVEMENT_TOLERANCE {
                    improving.push(Deviation {
                        user,
                        tier: target,
                        gain: stay - moved,
                    });
                }
            }
        }
        Ok(EquilibriumCheck {
            is_nash: improving.is_empty(),
            improving,
        })
    }

    /// Every Nash assignment of a two-tier game at one capacity split.
    pub fn enumerate_equilibria(&self, capacity: f64, split: f64) -> Result<Vec<Equilibrium>> {
        let shares = self.two_tier_shares(capacity, split)?;
        let n = self.users.len();
        if n > ENUMERATION_CAP {
            return Err(Error::EnumerationCap {
                users: n,
                cap: ENUMERATION_CAP,
            });
        }
        let mut memo: HashMap<(usize, u64), Plan> = HashMap::new();
        let mut plan_of = |tier: usize, members: &[usize]| -> Result<Plan> {
            let mask = members.iter().fold(0u64, |m, &i| m | (1 << i));
            if let Some(plan) = memo.get(&(tier, mask)) {
                return Ok(*plan);
            }
            let plan = self.tier_plan(members, shares[tier])?;
            memo.insert((tier, mask), plan);
            Ok(plan)
        };
        let mut found = Vec::new();
        for mask in 0..(1u64 << n) {
            let assignment = Assignment::from_mask(mask, n);
            if self.check_with(&assignment, &mut plan_of)?.is_nash {
                let tier_plans = vec![plan_of(0, &assignment.members(0))?, plan_of(1, &assignment.members(1))?];
                let regret = self.aggregate_regret(&assignment, &tier_plans)?;
                found.push(Equilibrium {
                    assignment,
                    tier_plans,
                    regret,
                });
            }
        }
        found.sort_by_key(|e| e.assignment.class_id());
        Ok(found)
    }

    /// [`TierGame::enumerate_equilibria`] at each split, in order.
    pub fn sweep_splits(&self, capacity: f64, splits: &[f64]) -> Result<Vec<SplitRow>> {
        let row = |&split: &f64| -> Result<SplitRow> {
            Ok(SplitRow {
                split,
                equilibria: self.enumerate_equilibria(capacity, split)?,
            })
        };
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            splits.par_iter().map(row).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            splits.iter().map(row).collect()
        }
    }

    /// Per-tier thresholds (with `r = T`) minimizing summed throttling and
    /// price regret for a fixed membership, subject to the tiers together
    /// using exactly `capacity`. Thresholds stay within `bounds`, by default
    /// the smallest and largest demand. Download tiers only.
    pub fn solve_multi_tier(
        &self,
        assignment: &Assignment,
        capacity: f64,
        bounds: Option<(f64, f64)>,
    ) -> Result<MultiTierSolution> {
        self.check_assignment(assignment)?;
        if self.kind != TierKind::Download {
            return Err(invalid("kind", "the multi-tier program assumes download tiers"));
        }
        if !(capacity >= 0.0 && capacity.is_finite()) {
            return Err(invalid(
                "capacity",
                format!("must be finite and nonnegative, got {capacity}"),
            ));
        }
        let demands: Vec<f64> = self.users.iter().map(UserProfile::demand).collect();
        let (lo, hi) = bounds.unwrap_or_else(|| {
            let lo = demands.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = demands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        });
        if !(lo >= 0.0 && hi >= lo) {
            return Err(invalid("bounds", format!("need 0 <= lo <= hi, got [{lo}, {hi}]")));
        }
        let curves: Vec<TierCurve> = (0..self.n_tiers())
            .map(|j| {
                let ds: Vec<f64> = assignment.members(j).iter().map(|&i| demands[i]).collect();
                TierCurve::new(ds, self.prices[j], &self.params)
            })
            .collect();
        let total: f64 = demands.iter().sum();

        let mut t: Vec<f64> = if capacity >= total {
            vec![hi; curves.len()]
        } else {
            let all = TierCurve::new(demands.clone(), 0.0, &self.params);
            let at_lo = all.consumption(lo);
            if at_lo > capacity {
                return Err(Error::InfeasibleStart(format!(
                    "every tier at the lower bound {lo} already uses {at_lo}, above capacity {capacity}"
                )));
            }
            let start = all.threshold_for(capacity).clamp(lo, hi);
            vec![start; curves.len()]
        };
        if capacity < total {
            exchange_descent(&curves, &mut t, lo, hi);
        }

        let mut thresholds = Vec::with_capacity(curves.len());
        let mut shares = Vec::with_capacity(curves.len());
        let mut objective = 0.0;
        for (curve, &tj) in curves.iter().zip(&t) {
            objective += curve.objective(tj);
            shares.push(curve.consumption(tj));
            thresholds.push(if curve.is_empty() {
                lo
            } else if tj >= curve.max_demand() {
                curve.total().min(hi)
            } else {
                tj
            });
        }
        let residual = capacity.min(total) - shares.iter().sum::<f64>();
        Ok(MultiTierSolution {
            thresholds,
            shares,
            objective,
            residual,
        })
    }

    /// Leader/follower iteration from the seeded binomial assignment.
    ///
    /// Each round the ISP solves [`TierGame::solve_multi_tier`]; its tier
    /// consumptions become fixed shares, and users in rate order move to
    /// whichever tier most lowers their regret. The game has converged when a
    /// round moves nobody and the ISP's thresholds stay put.
    pub fn stackelberg_iterate(&self, capacity: f64, max_iters: usize, seed: u64) -> Result<EquilibriumReport> {
        let pop = Population::new(self.users.to_vec())?;
        let seeded = assign_tiers_binomial(&pop, self.n_tiers(), seed)?;
        let initial = Assignment::new(
            seeded.tiers().expect("binomial seeding sets every tier"),
            self.n_tiers(),
        )?;
        self.stackelberg_from(initial, capacity, max_iters)
    }

    pub fn stackelberg_from(&self, initial: Assignment, capacity: f64, max_iters: usize) -> Result<EquilibriumReport> {
        let mut assignment = initial;
        let mut leader = self.solve_multi_tier(&assignment, capacity, None)?;
        let mut log = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for iteration in 1..=max_iters {
            iterations = iteration;
            let idle = (capacity - leader.shares.iter().sum::<f64>()).max(0.0);
            let moves = self.follower_pass(&mut assignment, &leader.shares, idle)?;
            let next = self.solve_multi_tier(&assignment, capacity, None)?;
            let shift = next
                .thresholds
                .iter()
                .zip(&leader.thresholds)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            leader = next;
            let plans = self.tier_plans(&assignment, &leader.shares)?;
            log.push(IterationLog {
                iteration,
                moves,
                regret: self.aggregate_regret(&assignment, &plans)?,
            });
            if moves == 0 && shift <= LEADER_TOLERANCE {
                converged = true;
                break;
            }
        }
        let tier_plans = self.tier_plans(&assignment, &leader.shares)?;
        let user_regrets: Vec<f64> = (0..self.users.len())
            .map(|i| {
                let j = assignment.tier(i);
                self.user_regret(i, j, &tier_plans[j])
            })
            .collect();
        Ok(EquilibriumReport {
            converged,
            iterations,
            regret: user_regrets.iter().sum(),
            assignment,
            shares: leader.shares,
            tier_plans,
            user_regrets,
            log,
        })
    }

    /// One pass of sequential best responses at fixed shares. Capacity the
    /// leader left idle goes to the first tier a user moves into. Returns the
    /// number of moves.
    fn follower_pass(&self, assignment: &mut Assignment, shares: &[f64], mut idle: f64) -> Result<usize> {
        let mut shares = shares.to_vec();
        let mut members: Vec<Vec<usize>> = (0..self.n_tiers()).map(|j| assignment.members(j)).collect();
        let mut plans = (0..self.n_tiers())
            .map(|j| self.tier_plan(&members[j], shares[j]))
            .collect::<Result<Vec<_>>>()?;
        let mut moves = 0;
        for user in 0..self.users.len() {
            let here = assignment.tier(user);
            let mut best = (here, self.user_regret(user, here, &plans[here]), None);
            for target in (0..self.n_tiers()).filter(|&t| t != here) {
                if !self.could_improve(best.1, target) {
                    continue;
                }
                let mut joined = members[target].clone();
                let at = joined.partition_point(|&i| i < user);
                joined.insert(at, user);
                let plan = self.tier_plan(&joined, shares[target] + idle)?;
                let regret = self.user_regret(user, target, &plan);
                if regret < best.1 - IMPROVEMENT_TOLERANCE {
                    best = (target, regret, Some((joined, plan)));
                }
            }
            if let (target, _, Some((joined, plan))) = best {
                members[here].retain(|&i| i != user);
                plans[here] = self.tier_plan(&members[here], shares[here])?;
                members[target] = joined;
                plans[target] = plan;
                shares[target] += idle;
                idle = 0.0;
                *assignment = assignment.with_move(user, target);
                moves += 1;
            }
        }
        Ok(moves)
    }
}

/// One tier's consumption and regret as functions of its threshold, with
/// `r = T`.
struct TierCurve {
    demand: Vec<f64>,
    prefix: Vec<f64>,
    inv_suffix: Vec<f64>,
    exponent: f64,
    price_term: f64,
}

impl TierCurve {
    fn new(mut demand: Vec<f64>, price: f64, params: &RegretParams) -> Self {
        demand.sort_by(f64::total_cmp);
        let mut prefix = vec![0.0; demand.len() + 1];
        for (k, d) in demand.iter().enumerate() {
            prefix[k + 1] = prefix[k] + d;
        }
        let mut inv_suffix = vec![0.0; demand.len() + 1];
        for k in (0..demand.len()).rev() {
            inv_suffix[k] = inv_suffix[k + 1] + 1.0 / demand[k];
        }
        TierCurve {
            price_term: params.kappa * price * demand.len() as f64,
            exponent: params.rho + params.tau,
            demand,
            prefix,
            inv_suffix,
        }
    }

    fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }

    fn total(&self) -> f64 {
        self.prefix[self.demand.len()]
    }

    fn max_demand(&self) -> f64 {
        self.demand.last().copied().unwrap_or(0.0)
    }

    /// `sum_{d<=T} d + sum_{d>T} (2T - T^2/d)`.
    fn consumption(&self, t: f64) -> f64 {
        let k = self.demand.partition_point(|&d| d <= t);
        let h = (self.demand.len() - k) as f64;
        self.prefix[k] + 2.0 * h * t - t * t * self.inv_suffix[k]
    }

    /// Smallest `T >= 0` whose consumption reaches `target`.
    fn threshold_for(&self, target: f64) -> f64 {
        if target <= 0.0 || self.is_empty() {
            return 0.0;
        }
        if target >= self.total() {
            return self.max_demand();
        }
        let k = self.demand.partition_point(|&d| self.consumption(d) <= target);
        let h = (self.demand.len() - k) as f64;
        let free = target - self.prefix[k];
        let disc = (h * h - free * self.inv_suffix[k]).max(0.0);
        free / (h + disc.sqrt())
    }

    fn objective(&self, t: f64) -> f64 {
        let k = self.demand.partition_point(|&d| d <= t);
        let loss = self.demand[k..].iter().map(|d| 1.0 - t / d);
        let throttling: f64 = if self.exponent.fract() == 0.0 && self.exponent <= 64.0 {
            let n = self.exponent as i32;
            loss.map(|x| x.powi(n)).sum()
        } else {
            loss.map(|x| x.powf(self.exponent)).sum()
        };
        throttling + self.price_term
    }
}

const SCAN_POINTS: usize = 48;
const MAX_SWEEPS: usize = 500;

/// Pairwise exchange: move one tier's threshold, hand the capacity change to
/// another tier by exactly inverting its consumption, and keep the best
/// point of a scan plus golden-section refinement. Stops when no pair
/// improves.
fn exchange_descent(curves: &[TierCurve], t: &mut [f64], lo: f64, hi: f64) {
    let active: Vec<usize> = (0..curves.len()).filter(|&j| !curves[j].is_empty()).collect();
    let total_objective = |t: &[f64]| -> f64 { active.iter().map(|&j| curves[j].objective(t[j])).sum() };
    for _ in 0..MAX_SWEEPS {
        let before = total_objective(t);
        for (a, &j) in active.iter().enumerate() {
            for &k in &active[a + 1..] {
                let (mut tj, mut tk) = (t[j], t[k]);
                pair_step(&curves[j], &curves[k], &mut tj, &mut tk, lo, hi);
                (t[j], t[k]) = (tj, tk);
            }
        }
        let after = total_objective(t);
        if !(after < before - 1e-13 * before.abs().max(1.0)) {
            break;
        }
    }
}

fn pair_step(cj: &TierCurve, ck: &TierCurve, tj: &mut f64, tk: &mut f64, lo: f64, hi: f64) {
    let budget = cj.consumption(*tj) + ck.consumption(*tk);
    let hi_j = hi.min(cj.max_demand().max(lo));
    let hi_k = hi.min(ck.max_demand().max(lo));
    // Range of t_j for which the partner's threshold stays within bounds.
    let t_min = cj.threshold_for(budget - ck.consumption(hi_k)).clamp(lo, hi_j);
    let t_max = cj.threshold_for(budget - ck.consumption(lo)).clamp(lo, hi_j);
    if !(t_max > t_min) {
        return;
    }
    let partner = |x: f64| ck.threshold_for(budget - cj.consumption(x)).clamp(lo, hi_k);
    let value = |x: f64| cj.objective(x) + ck.objective(partner(x));

    let current = cj.objective(*tj) + ck.objective(*tk);
    let grid: Vec<f64> = (0..=SCAN_POINTS)
        .map(|i| t_min + (t_max - t_min) * i as f64 / SCAN_POINTS as f64)
        .collect();
    let values: Vec<f64> = grid.iter().map(|&x| value(x)).collect();
    let best = (0..grid.len())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    let lo_x = grid[best.saturating_sub(1)];
    let hi_x = grid[(best + 1).min(grid.len() - 1)];
    let refined = golden(&value, lo_x, hi_x);
    let (x, v) = [(refined, value(refined)), (grid[best], values[best]), (*tj, value(*tj))]
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("nonempty");
    if v < current - 1e-15 * current.abs().max(1.0) {
        *tk = partner(x);
        *tj = x;
    }
}

fn golden(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..100 {
        if hi - lo <= 1e-14 * hi.abs().max(1e-300) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn four() -> Population {
        Population::from_rates(&[0.3, 0.45, 0.5, 1.0]).unwrap()
    }

    fn game(pop: &Population) -> TierGame<'_> {
        TierGame::new(pop, &[0.5, 1.0], TierKind::Download, RegretParams::default()).unwrap()
    }

    #[test]
    fn tier_plans_of_two_tier_example() {
        let pop = four();
        let g = game(&pop);
        let plan = g.tier_plan(&[0], 0.3).unwrap();
        assert_eq!((plan.threshold, plan.throttle_rate), (0.3, 0.3));
        let plan = g.tier_plan(&[1, 2, 3], 1.5).unwrap();
        assert_abs_diff_eq!(plan.threshold, 0.36764, epsilon = 1e-5);
        let empty = g.tier_plan(&[], 0.7).unwrap();
        assert_eq!((empty.threshold, empty.throttle_rate), (0.0, 0.0));
    }

    #[test]
    fn deviation_re_plans_target_tier() {
        let pop = four();
        let g = game(&pop);
        let a = Assignment::from_class_id("0111", 2).unwrap();
        let shares = [0.3, 1.5];
        let dev = g.deviation_regret(&a, &shares, 0, 1).unwrap();
        let t2 = g.tier_plan(&[0, 1, 2, 3], 1.5).unwrap().threshold;
        assert_abs_diff_eq!(
            t2,
            1.5 / (4.0 + (16.0f64 - 1.5 * (1.0 / 0.3 + 1.0 / 0.45 + 2.0 + 1.0)).sqrt()),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(dev, 0.01 + (1.0 - t2 / 0.3).powi(4), epsilon = 1e-12);
        assert_abs_diff_eq!(dev, 0.01033, epsilon = 1e-5);
        let check = g.check_equilibrium(&a, &shares).unwrap();
        assert!(check.is_nash, "{:?}", check.improving);
    }

    #[test]
    fn cheaper_empty_tier_attracts_throttled_user() {
        let pop = Population::from_rates(&[1.0, 2.0]).unwrap();
        let g = TierGame::new(
            &pop,
            &[0.5, 1.0],
            TierKind::Download,
            RegretParams::default().with_kappa(0.001),
        )
        .unwrap();
        // Both users share tier 1 with too little capacity; tier 0 could
        // carry user 0 alone.
        let a = Assignment::new(vec![1, 1], 2).unwrap();
        let check = g.check_equilibrium(&a, &[1.0, 1.5]).unwrap();
        assert!(!check.is_nash);
        assert!(check.improving.iter().any(|d| d.user == 0 && d.tier == 0));
    }

    #[test]
    fn single_tier_is_trivially_nash() {
        let pop = four();
        let g = TierGame::new(&pop, &[1.0], TierKind::Download, RegretParams::default()).unwrap();
        let a = Assignment::new(vec![0; 4], 1).unwrap();
        assert!(g.check_equilibrium(&a, &[1.8]).unwrap().is_nash);
    }

    #[test]
    fn class_ids_round_trip() {
        let a = Assignment::from_mask(0b1110, 4);
        assert_eq!(a.class_id(), "0111");
        assert_eq!(Assignment::from_class_id("0111", 2).unwrap(), a);
        assert!(Assignment::from_class_id("0121", 2).is_err());
    }

    #[test]
    fn enumeration_finds_example_equilibrium() {
        let pop = four();
        let g = game(&pop);
        let eq = g.enumerate_equilibria(1.8, 1.0 / 6.0).unwrap();
        assert!(eq.iter().any(|e| e.assignment.class_id() == "0111"));
        let big = Population::from_rates(&[1.0; 21]).unwrap();
        assert!(matches!(
            game(&big).enumerate_equilibria(10.0, 0.5),
            Err(Error::EnumerationCap { users: 21, .. })
        ));
    }

    #[test]
    fn one_user_has_an_equilibrium() {
        let pop = Population::from_rates(&[1.0]).unwrap();
        let g = game(&pop);
        for split in [0.0, 0.3, 1.0] {
            assert!(!g.enumerate_equilibria(0.8, split).unwrap().is_empty());
        }
    }

    #[test]
    fn split_grid_includes_endpoints() {
        let grid = split_grid(0.01).unwrap();
        assert_eq!(grid.len(), 101);
        assert_eq!(grid[0], 0.0);
        assert_eq!(*grid.last().unwrap(), 1.0);
        let grid = split_grid(0.3).unwrap();
        assert_eq!(*grid.last().unwrap(), 1.0);
        assert!(split_grid(0.0).is_err());
    }

    #[test]
    fn multi_tier_reduces_to_single_tier() {
        let pop = four();
        let g = TierGame::new(&pop, &[1.0], TierKind::Download, RegretParams::default()).unwrap();
        let sol = g
            .solve_multi_tier(&Assignment::new(vec![0; 4], 1).unwrap(), 1.8, None)
            .unwrap();
        assert_abs_diff_eq!(sol.thresholds[0], 0.36764, epsilon = 1e-5);
        assert!(sol.residual.abs() <= 1e-9);
    }

    #[test]
    fn multi_tier_two_tier_example() {
        let pop = four();
        let g = game(&pop);
        let a = Assignment::from_class_id("0111", 2).unwrap();
        let sol = g.solve_multi_tier(&a, 1.8, None).unwrap();
        assert_abs_diff_eq!(sol.thresholds[0], 0.3, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.thresholds[1], 0.36764, epsilon = 1e-5);
        assert!(sol.residual.abs() <= 1e-6 * 1.8);
    }

    #[test]
    fn multi_tier_rejects_infeasible_start() {
        let pop = four();
        let g = game(&pop);
        let a = Assignment::from_class_id("0111", 2).unwrap();
        assert!(matches!(
            g.solve_multi_tier(&a, 0.5, None),
            Err(Error::InfeasibleStart(_))
        ));
    }

    #[test]
    fn zero_iterations_return_seeded_state() {
        let pop = crate::population::generate_lognormal(30, 1.0, 0.25, 5).unwrap();
        let g = TierGame::new(
            &pop,
            &[0.5, 0.75, 1.0],
            TierKind::Download,
            RegretParams::default().with_kappa(0.05),
        )
        .unwrap();
        let report = g.stackelberg_iterate(0.95 * pop.total_demand(), 0, 5).unwrap();
        assert!(!report.converged);
        assert_eq!(report.iterations, 0);
        let seeded = assign_tiers_binomial(&pop, 3, 5).unwrap().tiers().unwrap();
        assert_eq!(report.assignment.tier_of(), seeded.as_slice());
    }

    #[test]
    fn lone_user_picks_cheapest_tier() {
        let pop = Population::from_rates(&[1.0]).unwrap();
        let g = TierGame::new(&pop, &[0.5, 0.75, 1.0], TierKind::Download, RegretParams::default()).unwrap();
        let report = g.stackelberg_iterate(2.0, 10, 1).unwrap();
        assert!(report.converged);
        assert_eq!(report.assignment.tier(0), 0);
    }
}
