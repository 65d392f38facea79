//! Browser bindings for the demo page in `www/`. Each export generates a
//! seeded population and returns plain numeric arrays for plotting.
//!
//! The `*_js` exports only convert errors and take 32-bit seeds; the underlying functions are
//! ordinary Rust and are tested natively.

use throttleplan::allocation::{max_threshold, rate_for_threshold, Mode, Plan};
use throttleplan::download::optimize_download;
use throttleplan::population::{generate_codec_uniform, generate_lognormal, percent_activity_grid, Population};
use throttleplan::regret::{aggregate_regret, RegretParams};
use throttleplan::sim::{daily_average, simulate_pair, SimConfig};
use throttleplan::stream::{best_codec_at, optimize_streaming, CodecSet};
use wasm_bindgen::prelude::*;

/// Codec ladder used by the streaming and simulation views.
pub const DEMO_CODECS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Regret as a function of the threshold, with the optimum marked.
/// `best_*` are `NaN` when capacity covers all demand.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    thresholds: Vec<f64>,
    rates: Vec<f64>,
    regrets: Vec<f64>,
    pub best_threshold: f64,
    pub best_rate: f64,
    pub best_regret: f64,
    pub total_demand: f64,
}

#[wasm_bindgen]
impl Curve {
    pub fn thresholds(&self) -> Vec<f64> {
        self.thresholds.clone()
    }
    pub fn rates(&self) -> Vec<f64> {
        self.rates.clone()
    }
    pub fn regrets(&self) -> Vec<f64> {
        self.regrets.clone()
    }
}

/// Hourly aggregate consumption with and without throttling, in units of the
/// hourly supply, plus their daily averages. `threshold` and `rate` are `NaN`
/// when no throttling is needed.
#[wasm_bindgen]
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    throttled: Vec<f64>,
    unthrottled: Vec<f64>,
    daily_throttled: Vec<f64>,
    daily_unthrottled: Vec<f64>,
    pub threshold: f64,
    pub rate: f64,
}

#[wasm_bindgen]
impl Trace {
    pub fn throttled(&self) -> Vec<f64> {
        self.throttled.clone()
    }
    pub fn unthrottled(&self) -> Vec<f64> {
        self.unthrottled.clone()
    }
    pub fn daily_throttled(&self) -> Vec<f64> {
        self.daily_throttled.clone()
    }
    pub fn daily_unthrottled(&self) -> Vec<f64> {
        self.daily_unthrottled.clone()
    }
}

fn check_fraction(fraction: f64) -> Result<(), String> {
    if fraction.is_finite() && fraction > 0.0 {
        Ok(())
    } else {
        Err(format!("capacity fraction must be positive, got {fraction}"))
    }
}

fn finish(pop: &Population, samples: Vec<(f64, f64, f64)>, best: Option<Plan>, best_regret: f64) -> Curve {
    let (best_threshold, best_rate) = best.map_or((f64::NAN, f64::NAN), |p| (p.threshold, p.throttle_rate));
    Curve {
        thresholds: samples.iter().map(|s| s.0).collect(),
        rates: samples.iter().map(|s| s.1).collect(),
        regrets: samples.iter().map(|s| s.2).collect(),
        best_threshold,
        best_rate,
        best_regret: if best.is_some() { best_regret } else { f64::NAN },
        total_demand: pop.total_demand(),
    }
}

fn thresholds(pop: &Population, capacity: f64, points: usize) -> Vec<f64> {
    let t_hat = max_threshold(pop, capacity).map_or(0.0, |b| b.t_hat);
    let points = points.max(1);
    (0..=points).map(|k| t_hat * k as f64 / points as f64).collect()
}

/// Download curve for `n` log-normal users (`mu = 1`, `sigma`).
pub fn download_curve(
    n: usize,
    sigma: f64,
    capacity_fraction: f64,
    rho: f64,
    points: usize,
    seed: u64,
) -> Result<Curve, String> {
    check_fraction(capacity_fraction)?;
    let pop = generate_lognormal(n, 1.0, sigma, seed).map_err(|e| e.to_string())?;
    let params = RegretParams::symmetric(rho);
    let capacity = capacity_fraction * pop.total_demand();
    let out = optimize_download(&pop, capacity, &params).map_err(|e| e.to_string())?;
    let mut samples = Vec::new();
    for t in thresholds(&pop, capacity, points) {
        let solve = rate_for_threshold(&pop, capacity, t, Mode::Download).map_err(|e| e.to_string())?;
        if let Some(r) = solve.value() {
            samples.push((t, r, aggregate_regret(&pop, &Plan::new(t, r, Mode::Download), &params)));
        }
    }
    Ok(finish(&pop, samples, out.policy().plan().copied(), out.regret()))
}

/// Streaming step curve for `n` users drawn uniformly from [`DEMO_CODECS`].
pub fn stream_curve(n: usize, capacity_fraction: f64, rho: f64, points: usize, seed: u64) -> Result<Curve, String> {
    check_fraction(capacity_fraction)?;
    let pop = generate_codec_uniform(n, &DEMO_CODECS, &percent_activity_grid(), seed).map_err(|e| e.to_string())?;
    let codecs = CodecSet::new(DEMO_CODECS).map_err(|e| e.to_string())?;
    let params = RegretParams::symmetric(rho);
    let capacity = capacity_fraction * pop.total_demand();
    let out = optimize_streaming(&pop, capacity, &codecs, &params).map_err(|e| e.to_string())?;
    let samples = thresholds(&pop, capacity, points)
        .into_iter()
        .filter_map(|t| best_codec_at(&pop, capacity, &codecs, t, &params).map(|(r, regret)| (t, r, regret)))
        .collect();
    Ok(finish(&pop, samples, out.policy().plan().copied(), out.regret()))
}

/// Staggered billing cycles for `n` codec users under the optimal streaming
/// plan at `capacity_fraction` of demand.
pub fn simulate_trace(
    n: usize,
    capacity_fraction: f64,
    days: usize,
    diurnal: bool,
    seed: u64,
) -> Result<Trace, String> {
    check_fraction(capacity_fraction)?;
    let pop = generate_codec_uniform(n, &DEMO_CODECS, &percent_activity_grid(), seed).map_err(|e| e.to_string())?;
    let codecs = CodecSet::new(DEMO_CODECS).map_err(|e| e.to_string())?;
    let capacity = capacity_fraction * pop.total_demand();
    let policy = optimize_streaming(&pop, capacity, &codecs, &RegretParams::default())
        .map_err(|e| e.to_string())?
        .policy();
    let plan = policy.plan().copied();
    let config = SimConfig::new(days, seed).with_diurnal(diurnal).with_plan(plan);
    let (throttled, free) = simulate_pair(&pop, &config).map_err(|e| e.to_string())?;
    let (throttled, unthrottled) = (throttled.normalized(capacity), free.normalized(capacity));
    Ok(Trace {
        daily_throttled: daily_average(&throttled),
        daily_unthrottled: daily_average(&unthrottled),
        throttled,
        unthrottled,
        threshold: plan.map_or(f64::NAN, |p| p.threshold),
        rate: plan.map_or(f64::NAN, |p| p.throttle_rate),
    })
}

#[wasm_bindgen(js_name = downloadCurve)]
pub fn download_curve_js(
    n: usize,
    sigma: f64,
    capacity_fraction: f64,
    rho: f64,
    points: usize,
    seed: u32,
) -> Result<Curve, JsError> {
    download_curve(n, sigma, capacity_fraction, rho, points, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = streamCurve)]
pub fn stream_curve_js(n: usize, capacity_fraction: f64, rho: f64, points: usize, seed: u32) -> Result<Curve, JsError> {
    stream_curve(n, capacity_fraction, rho, points, seed.into()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = simulateTrace)]
pub fn simulate_trace_js(
    n: usize,
    capacity_fraction: f64,
    days: usize,
    diurnal: bool,
    seed: u32,
) -> Result<Trace, JsError> {
    simulate_trace(n, capacity_fraction, days, diurnal, seed.into()).map_err(|e| JsError::new(&e))
}
