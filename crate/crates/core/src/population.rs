//! Subscriber populations: construction, seeded generators and CSV persistence.
//!
//! A [`Population`] is always sorted by ascending rate (ties by id), so index
//! `i` in every downstream module refers to the `i`-th slowest user.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::distr::{Bernoulli, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::LogNormal;

use crate::error::{invalid, Error, Result};

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 7;

/// Header of the population CSV format.
pub const CSV_HEADER: [&str; 4] = ["id", "rate", "activity", "tier"];

/// One subscriber.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UserProfile {
    pub id: usize,
    /// Desired rate while active, in bits per cycle.
    pub rate: f64,
    /// Fraction of the cycle the user is active before throttling, in (0, 1].
    pub activity: f64,
    /// 0-based tier index, if the user belongs to a tier.
    pub tier: Option<usize>,
}

impl UserProfile {
    pub fn new(id: usize, rate: f64, activity: f64) -> Result<Self> {
        let user = UserProfile {
            id,
            rate,
            activity,
            tier: None,
        };
        user.validate()?;
        Ok(user)
    }

    pub fn with_tier(mut self, tier: Option<usize>) -> Self {
        self.tier = tier;
        self
    }

    /// Bits per cycle the user wants: `rate * activity`.
    #[inline]
    pub fn demand(&self) -> f64 {
        self.rate * self.activity
    }

    fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(Error::InvalidUser {
                id: self.id,
                reason: format!("rate must be positive, got {}", self.rate),
            });
        }
        if !(self.activity > 0.0 && self.activity <= 1.0) {
            return Err(Error::InvalidUser {
                id: self.id,
                reason: format!("activity must lie in (0, 1], got {}", self.activity),
            });
        }
        Ok(())
    }
}

/// A nonempty, rate-sorted set of users.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    users: Vec<UserProfile>,
}

impl Population {
    pub fn new(mut users: Vec<UserProfile>) -> Result<Self> {
        if users.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let mut seen = HashSet::with_capacity(users.len());
        for user in &users {
            user.validate()?;
            if !seen.insert(user.id) {
                return Err(Error::DuplicateId(user.id));
            }
        }
        users.sort_by(|a, b| a.rate.total_cmp(&b.rate).then(a.id.cmp(&b.id)));
        Ok(Population { users })
    }

    /// Builds a population of always-active users (`activity = 1`) from raw rates,
    /// numbering them by input position.
    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        let users = rates
            .iter()
            .enumerate()
            .map(|(id, &rate)| UserProfile::new(id, rate, 1.0))
            .collect::<Result<Vec<_>>>()?;
        Population::new(users)
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn into_users(self) -> Vec<UserProfile> {
        self.users
    }

    pub fn total_demand(&self) -> f64 {
        self.users.iter().map(UserProfile::demand).sum()
    }

    pub fn demands(&self) -> Vec<f64> {
        self.users.iter().map(UserProfile::demand).collect()
    }

    /// Tier of each user in population order; `None` if any user is unassigned.
    pub fn tiers(&self) -> Option<Vec<usize>> {
        self.users.iter().map(|u| u.tier).collect()
    }

    pub fn with_tiers(mut self, tiers: &[usize]) -> Result<Self> {
        if tiers.len() != self.users.len() {
            return Err(Error::InvalidAssignment(format!(
                "{} tiers for {} users",
                tiers.len(),
                self.users.len()
            )));
        }
        for (user, &tier) in self.users.iter_mut().zip(tiers) {
            user.tier = Some(tier);
        }
        Ok(self)
    }
}

impl Deref for Population {
    type Target = [UserProfile];

    fn deref(&self) -> &[UserProfile] {
        &self.users
    }
}

/// `n` always-active users with log-normally distributed rates.
///
/// `mu` and `sigma` parameterize the underlying normal, so the mean rate is
/// `exp(mu + sigma^2 / 2)`.
pub fn generate_lognormal(n: usize, mu: f64, sigma: f64, seed: u64) -> Result<Population> {
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(invalid(
            "sigma",
            format!("need finite mu and sigma > 0, got mu = {mu}, sigma = {sigma}"),
        ));
    }
    let dist = LogNormal::new(mu, sigma).map_err(|e| invalid("sigma", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n)
        .map(|id| UserProfile::new(id, dist.sample(&mut rng), 1.0))
        .collect::<Result<Vec<_>>>()?;
    Population::new(users)
}

/// Rates drawn uniformly from `codecs`, activities uniformly from `activity_grid`.
pub fn generate_codec_uniform(n: usize, codecs: &[f64], activity_grid: &[f64], seed: u64) -> Result<Population> {
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    if codecs.is_empty() {
        return Err(invalid("codecs", "codec set is empty"));
    }
    if let Some(bad) = codecs.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(invalid("codecs", format!("user rates must be positive, got {bad}")));
    }
    if activity_grid.is_empty() {
        return Err(invalid("activity_grid", "activity grid is empty"));
    }
    if let Some(bad) = activity_grid.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
        return Err(invalid(
            "activity_grid",
            format!("activity must lie in (0, 1], got {bad}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let users = (0..n)
        .map(|id| {
            let rate = codecs[rng.random_range(0..codecs.len())];
            let activity = activity_grid[rng.random_range(0..activity_grid.len())];
            UserProfile::new(id, rate, activity)
        })
        .collect::<Result<Vec<_>>>()?;
    Population::new(users)
}

/// The activity grid {0.01, 0.02, ..., 1.00}.
pub fn percent_activity_grid() -> Vec<f64> {
    (1..=100).map(|k| k as f64 / 100.0).collect()
}

/// Heads probability per rate third: cheap tiers are likelier for slow users.
pub const BINOMIAL_HEADS: [f64; 3] = [0.2, 0.5, 0.8];

/// Seeds tier membership with coin flips.
///
/// Users are split into thirds by rate order (the remainder joins the lowest
/// third). Each user flips `n_tiers - 1` coins with the heads probability of
/// its third; the number of heads is its tier.
pub fn assign_tiers_binomial(pop: &Population, n_tiers: usize, seed: u64) -> Result<Population> {
    if n_tiers == 0 {
        return Err(invalid("n_tiers", "need at least one tier"));
    }
    let n = pop.len();
    let base = n / 3;
    let lower = base + n % 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coins = BINOMIAL_HEADS.map(|p| Bernoulli::new(p).expect("valid probability"));
    let tiers: Vec<usize> = (0..n)
        .map(|k| {
            let third = if k < lower {
                0
            } else if k < lower + base {
                1
            } else {
                2
            };
            (1..n_tiers).filter(|_| coins[third].sample(&mut rng)).count()
        })
        .collect();
    pop.clone().with_tiers(&tiers)
}

pub fn save_population(pop: &Population, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_population(pop, BufWriter::new(file))
}

pub fn write_population<W: Write>(pop: &Population, writer: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    out.write_record(CSV_HEADER)?;
    for user in pop.users() {
        let tier = user.tier.map(|t| t.to_string()).unwrap_or_default();
        out.write_record([
            user.id.to_string(),
            user.rate.to_string(),
            user.activity.to_string(),
            tier,
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_population(path: impl AsRef<Path>) -> Result<Population> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)?.read_to_string(&mut text)?;
    parse_population(&text, path)
}

/// Parses population CSV text; `origin` only labels error messages.
pub fn parse_population(text: &str, origin: impl AsRef<Path>) -> Result<Population> {
    let origin = origin.as_ref();
    let parse_err = |line: u64, reason: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err(1, format!("expected header `{}`", CSV_HEADER.join(","))));
    }
    let mut users = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |k: usize| record.get(k).unwrap_or("");
        let id: usize = field(0)
            .parse()
            .map_err(|_| parse_err(line, format!("bad id `{}`", field(0))))?;
        let rate: f64 = field(1)
            .parse()
            .map_err(|_| parse_err(line, format!("bad rate `{}`", field(1))))?;
        let activity: f64 = field(2)
            .parse()
            .map_err(|_| parse_err(line, format!("bad activity `{}`", field(2))))?;
        let tier = match field(3) {
            "" => None,
            s => Some(s.parse().map_err(|_| parse_err(line, format!("bad tier `{s}`")))?),
        };
        let user = UserProfile::new(id, rate, activity).map_err(|e| parse_err(line, e.to_string()))?;
        users.push(user.with_tier(tier));
    }
    Population::new(users)
}
