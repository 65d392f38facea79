//! Hourly simulation of staggered billing cycles.
//!
//! Each user starts its 30-day cycle on a random day and is active in each
//! hour with probability `x` (optionally modulated over the day). An active
//! user consumes `R / 720` per hour until its cycle total reaches the
//! threshold, then `min(R, r) / 720`. Totals reset when a new cycle begins.
//!
//! Every user draws from its own random stream, derived from the seed and the
//! user's index, and draws exactly one number per hour whatever its state. A
//! throttled and an unthrottled run with the same seed therefore see the same
//! start days and the same activity, and the result does not depend on how
//! users are split across threads.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::allocation::{post_throttle_activity, Mode, Plan};
use crate::error::{invalid, Error, Result};
use crate::population::UserProfile;

pub const DAYS_PER_CYCLE: usize = 30;
pub const HOURS_PER_DAY: usize = 24;
pub const HOURS_PER_CYCLE: usize = DAYS_PER_CYCLE * HOURS_PER_DAY;
/// Hour of day at which diurnal activity equals its mean on the way up.
pub const DIURNAL_PHASE_HOUR: f64 = 10.0;

/// Users per work unit. Fixed so partial sums, and hence rounding, do not
/// depend on the thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UserState {
    Inactive,
    Unthrottled,
    Throttled,
}

impl UserState {
    pub fn as_str(self) -> &'static str {
        match self {
            UserState::Inactive => "inactive",
            UserState::Unthrottled => "unthrottled",
            UserState::Throttled => "throttled",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon_days: usize,
    pub diurnal: bool,
    pub seed: u64,
    /// `None` runs without throttling.
    pub plan: Option<Plan>,
    /// Keep every user's hourly state (memory grows with users times hours).
    pub record_states: bool,
}

impl SimConfig {
    pub fn new(horizon_days: usize, seed: u64) -> Self {
        SimConfig {
            horizon_days,
            diurnal: false,
            seed,
            plan: None,
            record_states: false,
        }
    }

    pub fn with_plan(mut self, plan: Option<Plan>) -> Self {
        self.plan = plan;
        self
    }

    pub fn with_diurnal(mut self, diurnal: bool) -> Self {
        self.diurnal = diurnal;
        self
    }

    pub fn with_states(mut self, record: bool) -> Self {
        self.record_states = record;
        self
    }

    pub fn hours(&self) -> usize {
        self.horizon_days * HOURS_PER_DAY
    }

    fn validate(&self) -> Result<()> {
        if self.horizon_days < DAYS_PER_CYCLE {
            return Err(invalid(
                "horizon_days",
                format!(
                    "need at least one {DAYS_PER_CYCLE}-day cycle, got {}",
                    self.horizon_days
                ),
            ));
        }
        if let Some(plan) = &self.plan {
            if !(plan.threshold >= 0.0 && plan.throttle_rate >= 0.0) {
                return Err(invalid("plan", "threshold and rate must be nonnegative"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleTrace {
    /// Aggregate consumption per hour, in the units of `R` per cycle.
    pub hourly_total: Vec<f64>,
    /// `states[user][hour]`, when recorded.
    pub states: Option<Vec<Vec<UserState>>>,
    /// Each user's cycle start day.
    pub start_days: Vec<usize>,
}

impl CycleTrace {
    /// Hourly totals in units of the hourly supply `capacity / 720`.
    pub fn normalized(&self, capacity: f64) -> Vec<f64> {
        let unit = capacity / HOURS_PER_CYCLE as f64;
        self.hourly_total.iter().map(|v| v / unit).collect()
    }

    pub fn daily_average(&self) -> Vec<f64> {
        daily_average(&self.hourly_total)
    }
}

/// `x + 0.5 min(x, 1 - x) sin(2 pi (hour - 10) / 24)`, which stays in [0, 1].
pub fn diurnal_activity(x: f64, hour_of_day: usize) -> f64 {
    let phase = 2.0 * PI / HOURS_PER_DAY as f64 * (hour_of_day as f64 - DIURNAL_PHASE_HOUR);
    (0.5 * x.min(1.0 - x) * phase.sin() + x).clamp(0.0, 1.0)
}

/// Means of consecutive 24-hour blocks; a partial last day is dropped.
pub fn daily_average(hourly: &[f64]) -> Vec<f64> {
    hourly
        .chunks_exact(HOURS_PER_DAY)
        .map(|day| day.iter().sum::<f64>() / HOURS_PER_DAY as f64)
        .collect()
}

fn user_rng(seed: u64, user: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(user as u64);
    rng
}

/// Adds one user's hourly consumption to `totals` and returns its start day.
fn simulate_user(
    user: &UserProfile,
    index: usize,
    config: &SimConfig,
    totals: &mut [f64],
    mut states: Option<&mut Vec<UserState>>,
) -> usize {
    let mut rng = user_rng(config.seed, index);
    let start_day = rng.random_range(0..DAYS_PER_CYCLE);
    let per_hour = user.rate / HOURS_PER_CYCLE as f64;
    let (threshold, throttled_per_hour, throttled_activity) = match &config.plan {
        // Summing hourly amounts can land a hair below an exact threshold.
        Some(plan) => (
            plan.threshold * (1.0 - 1e-12),
            user.rate.min(plan.throttle_rate) / HOURS_PER_CYCLE as f64,
            post_throttle_activity(user, plan.throttle_rate, plan.mode),
        ),
        None => (f64::INFINITY, per_hour, user.activity),
    };
    // Begin at the latest cycle start at or before hour 0 so the running
    // total is exact from the first recorded hour.
    let lead = (HOURS_PER_CYCLE - start_day * HOURS_PER_DAY) % HOURS_PER_CYCLE;
    let mut used = 0.0;
    for step in 0..lead + totals.len() {
        let since_start = step % HOURS_PER_CYCLE;
        if since_start == 0 {
            used = 0.0;
        }
        let hour_of_day = (step + HOURS_PER_CYCLE - lead) % HOURS_PER_DAY;
        let throttled = used >= threshold;
        let x = if throttled { throttled_activity } else { user.activity };
        let p = if config.diurnal {
            diurnal_activity(x, hour_of_day)
        } else {
            x
        };
        let active = rng.random::<f64>() < p;
        let (amount, state) = match (active, throttled) {
            (false, _) => (0.0, UserState::Inactive),
            (true, false) => (per_hour, UserState::Unthrottled),
            (true, true) => (throttled_per_hour, UserState::Throttled),
        };
        used += amount;
        if step >= lead {
            totals[step - lead] += amount;
            if let Some(states) = states.as_deref_mut() {
                states.push(state);
            }
        }
    }
    start_day
}

struct ChunkResult {
    totals: Vec<f64>,
    states: Vec<Vec<UserState>>,
    start_days: Vec<usize>,
}

fn simulate_chunk(users: &[UserProfile], first: usize, config: &SimConfig) -> ChunkResult {
    let hours = config.hours();
    let mut totals = vec![0.0; hours];
    let mut states = Vec::new();
    let mut start_days = Vec::with_capacity(users.len());
    for (k, user) in users.iter().enumerate() {
        let mut row = config.record_states.then(|| Vec::with_capacity(hours));
        start_days.push(simulate_user(user, first + k, config, &mut totals, row.as_mut()));
        states.extend(row);
    }
    ChunkResult {
        totals,
        states,
        start_days,
    }
}

/// Runs the population over `config.horizon_days`. Same config, same trace,
/// regardless of thread count.
pub fn simulate(users: &[UserProfile], config: &SimConfig) -> Result<CycleTrace> {
    config.validate()?;
    if users.is_empty() {
        return Err(Error::EmptyPopulation);
    }
    let chunks: Vec<(usize, &[UserProfile])> = users.chunks(CHUNK).enumerate().map(|(i, c)| (i * CHUNK, c)).collect();
    #[cfg(feature = "parallel")]
    let results: Vec<ChunkResult> = {
        use rayon::prelude::*;
        chunks
            .par_iter()
            .map(|&(first, c)| simulate_chunk(c, first, config))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<ChunkResult> = chunks
        .iter()
        .map(|&(first, c)| simulate_chunk(c, first, config))
        .collect();

    let mut hourly_total = vec![0.0; config.hours()];
    let mut states = config.record_states.then(Vec::new);
    let mut start_days = Vec::with_capacity(users.len());
    for chunk in results {
        for (total, v) in hourly_total.iter_mut().zip(&chunk.totals) {
            *total += v;
        }
        if let Some(states) = states.as_mut() {
            states.extend(chunk.states);
        }
        start_days.extend(chunk.start_days);
    }
    Ok(CycleTrace {
        hourly_total,
        states,
        start_days,
    })
}

/// Spread of the hourly throttled/unthrottled consumption ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Variability {
    /// Population standard deviation of the ratio over the included hours.
    pub ratio_std: f64,
    pub mean_ratio: f64,
    /// Hours skipped because nobody was consuming in the unthrottled run.
    pub excluded_hours: usize,
}

pub fn variability_ratio(throttled: &CycleTrace, unthrottled: &CycleTrace) -> Result<Variability> {
    if throttled.hourly_total.len() != unthrottled.hourly_total.len() {
        return Err(Error::TraceMismatch(format!(
            "{} hours against {}",
            throttled.hourly_total.len(),
            unthrottled.hourly_total.len()
        )));
    }
    let ratios: Vec<f64> = throttled
        .hourly_total
        .iter()
        .zip(&unthrottled.hourly_total)
        .filter(|(_, &u)| u > 0.0)
        .map(|(t, u)| t / u)
        .collect();
    let excluded_hours = throttled.hourly_total.len() - ratios.len();
    if ratios.is_empty() {
        return Err(Error::TraceMismatch(
            "the unthrottled run never consumes anything".into(),
        ));
    }
    let n = ratios.len() as f64;
    let mean_ratio = ratios.iter().sum::<f64>() / n;
    let var = ratios.iter().map(|r| (r - mean_ratio).powi(2)).sum::<f64>() / n;
    Ok(Variability {
        ratio_std: var.sqrt(),
        mean_ratio,
        excluded_hours,
    })
}

/// Throttled run and its unthrottled twin under one seed.
pub fn simulate_pair(users: &[UserProfile], config: &SimConfig) -> Result<(CycleTrace, CycleTrace)> {
    let throttled = simulate(users, config)?;
    let unthrottled = simulate(users, &config.clone().with_plan(None))?;
    Ok((throttled, unthrottled))
}

fn csv_writer<W: Write>(writer: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer)
}

/// `hour,total,normalized_total`.
pub fn write_trace_csv<W: Write>(trace: &CycleTrace, capacity: f64, writer: W) -> Result<()> {
    let mut out = csv_writer(writer);
    out.write_record(["hour", "total", "normalized_total"])?;
    for (hour, (total, norm)) in trace.hourly_total.iter().zip(trace.normalized(capacity)).enumerate() {
        out.write_record([hour.to_string(), total.to_string(), norm.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// `hour,user,state`, hour-major. Errors if states were not recorded.
pub fn write_states_csv<W: Write>(trace: &CycleTrace, users: &[UserProfile], writer: W) -> Result<()> {
    let states = trace
        .states
        .as_ref()
        .ok_or_else(|| invalid("record_states", "the trace was simulated without per-user states"))?;
    let mut out = csv_writer(writer);
    out.write_record(["hour", "user", "state"])?;
    for hour in 0..trace.hourly_total.len() {
        for (user, row) in users.iter().zip(states) {
            out.write_record([hour.to_string(), user.id.to_string(), row[hour].as_str().to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `day,throttled,unthrottled`.
pub fn write_daily_csv<W: Write>(throttled: &CycleTrace, unthrottled: &CycleTrace, writer: W) -> Result<()> {
    let mut out = csv_writer(writer);
    out.write_record(["day", "throttled", "unthrottled"])?;
    for (day, (t, u)) in throttled
        .daily_average()
        .iter()
        .zip(unthrottled.daily_average())
        .enumerate()
    {
        out.write_record([day.to_string(), t.to_string(), u.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

/// Convenience for a plain streaming plan.
pub fn streaming_plan(threshold: f64, rate: f64) -> Plan {
    Plan::new(threshold, rate, Mode::Streaming)
}
