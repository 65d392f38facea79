use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use throttleplan::allocation::{consumption, max_threshold, rate_for_threshold, Mode, Plan};
use throttleplan::download::optimize_download;
use throttleplan::population::{
    generate_codec_uniform, generate_lognormal, parse_population, percent_activity_grid, write_population, Population,
};
use throttleplan::regret::{aggregate_regret, RegretParams};
use throttleplan::sim::{
    simulate_pair, variability_ratio, write_daily_csv, write_states_csv, write_trace_csv, SimConfig,
};
use throttleplan::stream::{best_codec_at, optimize_streaming, CodecSet, StreamOutcome};
use throttleplan::tiers::{split_grid, TierGame, TierKind};
use throttleplan::{Error, Policy};

use crate::summary::RunSummary;
use crate::{CapacityArgs, Command, GameArgs, GenerateArgs, ModeArg, OptimizeArgs, SimulateArgs, TiersCommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Io(_) | Error::Csv(_) | Error::NoConvergence { .. }) => 1,
            CliError::Core(_) => 2,
            CliError::Io { .. } => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn command_line() -> String {
    std::iter::once("throttleplan".to_string())
        .chain(std::env::args().skip(1))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(args) => generate(args),
        Command::Optimize(args) => optimize(args),
        Command::Tiers(TiersCommand::Sweep { game, split_step }) => sweep(game, split_step),
        Command::Tiers(TiersCommand::Stackelberg { game, max_iters, seed }) => stackelberg(game, max_iters, seed),
        Command::Simulate(args) => simulate(args),
    }
}

/// Population plus the SHA-256 of the file it came from.
fn load(path: &Path, summary: &mut RunSummary) -> Result<Population> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    summary.digest("input_sha256", &bytes);
    let text = String::from_utf8(bytes).map_err(|_| usage(format!("{}: not UTF-8 text", path.display())))?;
    let pop = parse_population(&text, path)?;
    summary.push("users", pop.len());
    summary.push("total_demand", pop.total_demand());
    Ok(pop)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn resolve_capacity(args: &CapacityArgs, pop: &Population) -> Result<Option<f64>> {
    let c = match (args.capacity, args.capacity_fraction) {
        (Some(c), _) => c,
        (None, Some(f)) => f * pop.total_demand(),
        (None, None) => return Ok(None),
    };
    if !(c.is_finite() && c >= 0.0) {
        return Err(usage(format!("capacity must be finite and nonnegative, got {c}")));
    }
    Ok(Some(c))
}

fn require_capacity(args: &CapacityArgs, pop: &Population) -> Result<f64> {
    resolve_capacity(args, pop)?.ok_or_else(|| usage("one of --capacity or --capacity-fraction is required"))
}

fn params(rho: f64) -> Result<RegretParams> {
    let p = RegretParams::symmetric(rho);
    p.validate()?;
    Ok(p)
}

fn codec_set(codecs: &[f64]) -> Result<CodecSet> {
    if codecs.is_empty() {
        return Err(usage("stream mode needs --codecs, e.g. --codecs 0.2,0.4,0.6,0.8,1.0"));
    }
    Ok(CodecSet::new(codecs.iter().copied())?)
}

fn generate(args: GenerateArgs) -> Result<()> {
    let mut summary = RunSummary::new(&command_line());
    let (kind, rest) = args.dist.split_once(':').unwrap_or((args.dist.as_str(), ""));
    let pop = match kind {
        "lognormal" => {
            let (mut mu, mut sigma) = (1.0, 0.25);
            for pair in rest.split(',').filter(|s| !s.is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| usage(format!("expected key=value, got `{pair}`")))?;
                let value: f64 = value
                    .parse()
                    .map_err(|_| usage(format!("bad number `{value}` for {key}")))?;
                match key {
                    "mu" => mu = value,
                    "sigma" => sigma = value,
                    _ => return Err(usage(format!("unknown lognormal parameter `{key}`"))),
                }
            }
            generate_lognormal(args.n, mu, sigma, args.seed)?
        }
        "codec" => {
            let list = rest
                .strip_prefix("v=")
                .ok_or_else(|| usage("codec distribution needs `codec:v=r1,r2,...`"))?;
            let codecs = list
                .split(',')
                .map(|v| v.parse::<f64>().map_err(|_| usage(format!("bad codec rate `{v}`"))))
                .collect::<Result<Vec<_>>>()?;
            generate_codec_uniform(args.n, &codecs, &percent_activity_grid(), args.seed)?
        }
        other => {
            return Err(usage(format!(
                "unknown distribution `{other}`; use lognormal:... or codec:..."
            )))
        }
    };
    let mut bytes = Vec::new();
    write_population(&pop, &mut bytes)?;
    fs::write(&args.output, &bytes).map_err(io_err(&args.output))?;
    summary.push("seed", args.seed);
    summary.push("users", pop.len());
    summary.push("total_demand", pop.total_demand());
    summary.digest("output_sha256", &bytes);
    summary.print();
    Ok(())
}

fn optimize(args: OptimizeArgs) -> Result<()> {
    let mut summary = RunSummary::new(&command_line());
    let pop = load(&args.pop, &mut summary)?;
    let capacity = require_capacity(&args.capacity, &pop)?;
    let p = params(args.rho)?;
    summary.push("capacity", capacity);
    let (mode, policy, regret) = match args.mode {
        ModeArg::Download => {
            let out = optimize_download(&pop, capacity, &p)?;
            if let Some(sol) = out.solution() {
                summary.push("intervals", sol.intervals.len());
            }
            (Mode::Download, out.policy(), out.regret())
        }
        ModeArg::Stream => {
            let codecs = codec_set(&args.codecs)?;
            let out = optimize_streaming(&pop, capacity, &codecs, &p)?;
            if let StreamOutcome::Throttled(sol) = &out {
                summary.push("feasible_codecs", sol.candidates.len());
            }
            (Mode::Streaming, out.policy(), out.regret())
        }
    };
    push_policy(&mut summary, &policy);
    summary.push("regret", regret);
    if let Some(path) = &args.curve {
        write_curve(&pop, capacity, mode, &args, &p, path)?;
        summary.push("curve", path.display());
    }
    summary.print();
    Ok(())
}

fn push_policy(summary: &mut RunSummary, policy: &Policy) {
    match policy {
        Policy::Unlimited => summary.push("plan", "no throttling needed"),
        Policy::Throttled(plan) => {
            summary.push("threshold", plan.threshold);
            summary.push("rate", plan.throttle_rate);
        }
    }
}

/// `T,r,regret` over `[0, T̂]`; thresholds with no feasible rate are skipped.
fn write_curve(
    pop: &Population,
    capacity: f64,
    mode: Mode,
    args: &OptimizeArgs,
    p: &RegretParams,
    path: &Path,
) -> Result<()> {
    let mut out = create(path)?;
    let werr = io_err(path);
    writeln!(out, "T,r,regret").map_err(werr)?;
    let Some(bound) = max_threshold(pop, capacity) else {
        return out.flush().map_err(io_err(path));
    };
    let points = args.points.max(1);
    for k in 0..=points {
        let t = bound.t_hat * k as f64 / points as f64;
        let row = match mode {
            Mode::Download => rate_for_threshold(pop, capacity, t, Mode::Download)?
                .value()
                .map(|r| (r, aggregate_regret(pop, &Plan::new(t, r, Mode::Download), p))),
            Mode::Streaming => best_codec_at(pop, capacity, &codec_set(&args.codecs)?, t, p),
        };
        if let Some((r, regret)) = row {
            writeln!(out, "{t},{r},{regret}").map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

fn game<'a>(args: &GameArgs, pop: &'a Population) -> Result<TierGame<'a>> {
    let p = params(args.rho)?.with_kappa(args.kappa);
    Ok(TierGame::new(pop, &args.prices, TierKind::Download, p)?)
}

fn sweep(args: GameArgs, step: f64) -> Result<()> {
    let mut summary = RunSummary::new(&command_line());
    let pop = load(&args.pop, &mut summary)?;
    if args.prices.len() != 2 {
        return Err(usage(format!(
            "sweep needs exactly 2 prices, got {}; use `tiers stackelberg`",
            args.prices.len()
        )));
    }
    if pop.len() > throttleplan::tiers::ENUMERATION_CAP {
        return Err(usage(format!(
            "{} users is over the enumeration cap of {}; use `tiers stackelberg` instead",
            pop.len(),
            throttleplan::tiers::ENUMERATION_CAP
        )));
    }
    let capacity = require_capacity(&args.capacity, &pop)?;
    let game = game(&args, &pop)?;
    let rows = game.sweep_splits(capacity, &split_grid(step).map_err(|e| usage(e.to_string()))?)?;
    out_dir(&args.out_dir)?;

    let path = args.out_dir.join("equilibria.csv");
    let mut out = create(&path)?;
    writeln!(out, "split,class_id,regret").map_err(io_err(&path))?;
    for row in &rows {
        for e in &row.equilibria {
            writeln!(out, "{},{},{}", row.split, e.assignment.class_id(), e.regret).map_err(io_err(&path))?;
        }
    }
    out.flush().map_err(io_err(&path))?;

    let path = args.out_dir.join("split_stats.csv");
    let mut out = create(&path)?;
    writeln!(out, "split,equilibria,min,avg,max").map_err(io_err(&path))?;
    for row in &rows {
        let stats = row
            .stats()
            .map(|(a, b, c)| format!("{a},{b},{c}"))
            .unwrap_or_else(|| ",,".into());
        writeln!(out, "{},{},{stats}", row.split, row.equilibria.len()).map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    summary.push("capacity", capacity);
    summary.push("splits", rows.len());
    summary.push("equilibria", rows.iter().map(|r| r.equilibria.len()).sum::<usize>());
    summary.push(
        "splits_without_equilibrium",
        rows.iter().filter(|r| r.equilibria.is_empty()).count(),
    );
    for (name, pick) in [("min", 0usize), ("avg", 1), ("max", 2)] {
        let best = rows
            .iter()
            .filter_map(|r| r.stats().map(|s| (r.split, [s.0, s.1, s.2][pick])))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((split, value)) = best {
            summary.push(&format!("lowest_{name}_regret"), format!("{value} at split {split}"));
        }
    }
    summary.push("output_dir", args.out_dir.display());
    summary.print();
    Ok(())
}

fn stackelberg(args: GameArgs, max_iters: usize, seed: u64) -> Result<()> {
    let mut summary = RunSummary::new(&command_line());
    let pop = load(&args.pop, &mut summary)?;
    let capacity = require_capacity(&args.capacity, &pop)?;
    let game = game(&args, &pop)?;
    let report = game.stackelberg_iterate(capacity, max_iters, seed)?;
    out_dir(&args.out_dir)?;

    let path = args.out_dir.join("iterations.csv");
    let mut out = create(&path)?;
    writeln!(out, "iteration,moves,regret").map_err(io_err(&path))?;
    for entry in &report.log {
        writeln!(out, "{},{},{}", entry.iteration, entry.moves, entry.regret).map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    let path = args.out_dir.join("assignment.csv");
    let mut out = create(&path)?;
    writeln!(out, "id,rate,tier,regret").map_err(io_err(&path))?;
    for (i, user) in pop.iter().enumerate() {
        writeln!(
            out,
            "{},{},{},{}",
            user.id,
            user.rate,
            report.assignment.tier(i),
            report.user_regrets[i]
        )
        .map_err(io_err(&path))?;
    }
    out.flush().map_err(io_err(&path))?;

    summary.push("seed", seed);
    summary.push("capacity", capacity);
    summary.push("converged", report.converged);
    summary.push("iterations", report.iterations);
    summary.push("regret", report.regret);
    for (j, plan) in report.tier_plans.iter().enumerate() {
        summary.push(
            &format!("tier_{j}"),
            format!(
                "price {}, users {}, share {}, threshold {}, rate {}",
                args.prices[j],
                report.assignment.members(j).len(),
                report.shares[j],
                plan.threshold,
                plan.throttle_rate
            ),
        );
    }
    summary.push("output_dir", args.out_dir.display());
    summary.print();
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let mut summary = RunSummary::new(&command_line());
    let pop = load(&args.pop, &mut summary)?;
    let capacity = resolve_capacity(&args.capacity, &pop)?;
    let mode = match args.mode {
        ModeArg::Stream => Mode::Streaming,
        ModeArg::Download => Mode::Download,
    };
    let plan = match (&args.plan, args.optimize) {
        (Some(tr), false) => match tr[..] {
            [t, r] => Some(Plan::new(t, r, mode)),
            _ => return Err(usage(format!("--plan takes `T,r`, got {} values", tr.len()))),
        },
        (None, true) => {
            let c = capacity.ok_or_else(|| usage("--optimize needs --capacity or --capacity-fraction"))?;
            let p = RegretParams::default();
            let policy = match mode {
                Mode::Download => optimize_download(&pop, c, &p)?.policy(),
                Mode::Streaming => optimize_streaming(&pop, c, &codec_set(&args.codecs)?, &p)?.policy(),
            };
            policy.plan().copied()
        }
        _ => return Err(usage("give exactly one of --plan T,r or --optimize")),
    };
    let config = SimConfig::new(args.days, args.seed)
        .with_diurnal(args.diurnal)
        .with_plan(plan)
        .with_states(args.states);
    let (throttled, free) = simulate_pair(&pop, &config)?;
    let variability = variability_ratio(&throttled, &free)?;
    let norm = capacity.unwrap_or_else(|| plan.map_or(pop.total_demand(), |plan| consumption(&pop, &plan)));

    out_dir(&args.out_dir)?;
    for (name, trace) in [("throttled.csv", &throttled), ("unthrottled.csv", &free)] {
        let path = args.out_dir.join(name);
        write_trace_csv(trace, norm, create(&path)?)?;
    }
    write_daily_csv(&throttled, &free, create(&args.out_dir.join("daily.csv"))?)?;
    if args.states {
        write_states_csv(&throttled, &pop, create(&args.out_dir.join("states.csv"))?)?;
    }

    summary.push("seed", args.seed);
    summary.push("days", args.days);
    summary.push("diurnal", args.diurnal);
    match plan {
        Some(plan) => {
            summary.push("threshold", plan.threshold);
            summary.push("rate", plan.throttle_rate);
        }
        None => summary.push("plan", "no throttling"),
    }
    summary.push("normalization_capacity", norm);
    let total = |v: &[f64]| v.iter().sum::<f64>();
    summary.push(
        "throttled_over_unthrottled",
        total(&throttled.hourly_total) / total(&free.hourly_total),
    );
    summary.push("variability_ratio", variability.ratio_std);
    summary.push("excluded_hours", variability.excluded_hours);
    summary.push("output_dir", args.out_dir.display());
    summary.print();
    Ok(())
}
