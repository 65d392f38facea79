use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_throttleplan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field(summary: &str, key: &str) -> String {
    summary
        .lines()
        .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix(": ")))
        .unwrap_or_else(|| panic!("no `{key}` in\n{summary}"))
        .to_string()
}

fn number(summary: &str, key: &str) -> f64 {
    field(summary, key).parse().unwrap()
}

fn without_timing(summary: &str) -> Vec<&str> {
    summary.lines().filter(|l| !l.starts_with("elapsed_ms:")).collect()
}

fn four_users(dir: &Path) -> String {
    let path = dir.join("four.csv");
    fs::write(&path, "id,rate,activity,tier\n0,0.3,1,\n1,0.45,1,\n2,0.5,1,\n3,1,1,\n").unwrap();
    path.to_str().unwrap().to_string()
}

fn codec_population(dir: &Path, n: usize) -> String {
    let path = dir.join(format!("codec{n}.csv")).to_str().unwrap().to_string();
    let n = n.to_string();
    stdout(&run(&[
        "generate",
        "--dist",
        "codec:v=0.1,0.3,0.5,0.7,0.9",
        "--n",
        &n,
        "-o",
        &path,
    ]));
    path
}

#[test]
fn generate_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let args = |p: &Path| {
        [
            "generate",
            "--dist",
            "lognormal:mu=1,sigma=0.25",
            "--n",
            "1000",
            "--seed",
            "7",
            "-o",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([p.to_str().unwrap().to_string()])
        .collect::<Vec<_>>()
    };
    let sa = stdout(
        &Command::new(env!("CARGO_BIN_EXE_throttleplan"))
            .args(args(&a))
            .output()
            .unwrap(),
    );
    let sb = stdout(
        &Command::new(env!("CARGO_BIN_EXE_throttleplan"))
            .args(args(&b))
            .output()
            .unwrap(),
    );
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(field(&sa, "output_sha256"), field(&sb, "output_sha256"));
    let total = number(&sa, "total_demand");
    assert!((total / 2800.0 - 1.0).abs() <= 0.03, "total demand {total}");
}

#[test]
fn bad_generate_arguments_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x.csv");
    let out = out.to_str().unwrap();
    for dist in ["lognormal", "lognormal:mu=1,tau=2", "uniform", "codec:0.1"] {
        let n = if dist == "lognormal" { "0" } else { "10" };
        let res = run(&["generate", "--dist", dist, "--n", n, "-o", out]);
        assert_eq!(res.status.code(), Some(2), "{dist}");
    }
}

#[test]
fn optimize_four_users() {
    let dir = TempDir::new().unwrap();
    let pop = four_users(dir.path());
    let s = stdout(&run(&["optimize", "--pop", &pop, "--capacity", "1.8"]));
    assert!((number(&s, "threshold") - 0.36764).abs() < 1e-4);
    assert!((number(&s, "rate") - 0.36764).abs() < 1e-4);
    assert!((number(&s, "regret") - 0.16593).abs() < 1e-4);

    let cubic = stdout(&run(&["optimize", "--pop", &pop, "--capacity", "1.8", "--rho", "3"]));
    assert!((number(&cubic, "threshold") - number(&s, "threshold")).abs() < 1e-9);

    let roomy = stdout(&run(&["optimize", "--pop", &pop, "--capacity-fraction", "1.5"]));
    assert_eq!(field(&roomy, "plan"), "no throttling needed");
    assert_eq!(number(&roomy, "regret"), 0.0);
}

#[test]
fn optimize_rejects_bad_input() {
    let dir = TempDir::new().unwrap();
    let pop = four_users(dir.path());
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(
        code(&["optimize", "--pop", &pop, "--capacity", "1.8", "--rho", "1.5"]),
        Some(2)
    );
    assert_eq!(code(&["optimize", "--pop", &pop]), Some(2));
    assert_eq!(
        code(&["optimize", "--pop", &pop, "--capacity", "1.8", "--mode", "stream"]),
        Some(2)
    );
    assert_eq!(
        code(&[
            "optimize",
            "--pop",
            &pop,
            "--capacity",
            "1",
            "--capacity-fraction",
            "0.5"
        ]),
        Some(2)
    );
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        code(&["optimize", "--pop", missing.to_str().unwrap(), "--capacity", "1"]),
        Some(1)
    );
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "id,rate,activity,tier\n0,-1,0.5,\n").unwrap();
    assert_eq!(
        code(&["optimize", "--pop", bad.to_str().unwrap(), "--capacity", "1"]),
        Some(2)
    );
}

#[test]
fn optimize_writes_regret_curve() {
    let dir = TempDir::new().unwrap();
    let pop = four_users(dir.path());
    let curve = dir.path().join("curve.csv");
    let s = stdout(&run(&[
        "optimize",
        "--pop",
        &pop,
        "--capacity",
        "1.8",
        "--curve",
        curve.to_str().unwrap(),
        "--points",
        "400",
    ]));
    let text = fs::read_to_string(&curve).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("T,r,regret"));
    let rows: Vec<[f64; 3]> = lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert!(rows.len() > 300);
    let best = number(&s, "regret");
    assert!(rows.iter().all(|row| row[2] >= best - 1e-12));
}

#[test]
fn stream_optimize_picks_a_codec() {
    let dir = TempDir::new().unwrap();
    let pop = codec_population(dir.path(), 200);
    let s = stdout(&run(&[
        "optimize",
        "--pop",
        &pop,
        "--capacity-fraction",
        "0.8",
        "--mode",
        "stream",
        "--codecs",
        "0.1,0.3,0.5,0.7,0.9",
    ]));
    let r = number(&s, "rate");
    assert!(
        [0.1, 0.3, 0.5, 0.7, 0.9].iter().any(|c| (c - r).abs() < 1e-12),
        "rate {r}"
    );
}

#[test]
fn sweep_finds_the_two_tier_equilibria() {
    let dir = TempDir::new().unwrap();
    let pop = four_users(dir.path());
    let out = dir.path().join("sweep");
    let s = stdout(&run(&[
        "tiers",
        "sweep",
        "--pop",
        &pop,
        "--capacity",
        "1.8",
        "--prices",
        "0.5,1",
        "--out-dir",
        out.to_str().unwrap(),
    ]));
    assert_eq!(number(&s, "splits"), 101.0);
    let eq = fs::read_to_string(out.join("equilibria.csv")).unwrap();
    let classes_at = |split: &str| -> Vec<String> {
        eq.lines()
            .filter_map(|l| l.strip_prefix(split).and_then(|r| r.strip_prefix(',')))
            .map(|r| r.split(',').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(classes_at("0.17"), ["0111"]);
    assert_eq!(classes_at("0.5").len(), 6);
    let stats = fs::read_to_string(out.join("split_stats.csv")).unwrap();
    assert_eq!(stats.lines().next(), Some("split,equilibria,min,avg,max"));
    assert_eq!(stats.lines().count(), 102);
}

#[test]
fn sweep_refuses_large_populations() {
    let dir = TempDir::new().unwrap();
    let pop = codec_population(dir.path(), 21);
    let out = dir.path().join("sweep");
    let res = run(&[
        "tiers",
        "sweep",
        "--pop",
        &pop,
        "--capacity",
        "1",
        "--prices",
        "1,2",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("stackelberg"));
}

#[test]
fn stackelberg_writes_assignment() {
    let dir = TempDir::new().unwrap();
    let pop = codec_population(dir.path(), 40);
    let out = dir.path().join("game");
    let s = stdout(&run(&[
        "tiers",
        "stackelberg",
        "--pop",
        &pop,
        "--capacity-fraction",
        "0.8",
        "--prices",
        "1,2",
        "--out-dir",
        out.to_str().unwrap(),
    ]));
    assert!(number(&s, "iterations") >= 1.0);
    let assignment = fs::read_to_string(out.join("assignment.csv")).unwrap();
    assert_eq!(assignment.lines().count(), 41);
    let iterations = fs::read_to_string(out.join("iterations.csv")).unwrap();
    assert_eq!(iterations.lines().count() as f64, number(&s, "iterations") + 1.0);
}

#[test]
fn simulate_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let pop = codec_population(dir.path(), 200);
    let go = |name: &str| {
        let out = dir.path().join(name);
        let s = stdout(&run(&[
            "simulate",
            "--pop",
            &pop,
            "--plan",
            "0.3,0.1",
            "--days",
            "30",
            "--diurnal",
            "--states",
            "--out-dir",
            out.to_str().unwrap(),
        ]));
        (out, s)
    };
    let (a, sa) = go("a");
    let (b, sb) = go("b");
    for file in ["throttled.csv", "unthrottled.csv", "daily.csv", "states.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file}"
        );
    }
    let strip = |s: &str| {
        without_timing(s)
            .into_iter()
            .filter(|l| !l.starts_with("command:") && !l.starts_with("output_dir:"))
            .map(String::from)
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&sa), strip(&sb));
    let daily = fs::read_to_string(a.join("daily.csv")).unwrap();
    assert_eq!(daily.lines().count(), 31);
}

#[test]
fn simulate_validates_arguments() {
    let dir = TempDir::new().unwrap();
    let pop = codec_population(dir.path(), 20);
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let code = |args: &[&str]| run(args).status.code();
    assert_eq!(
        code(&[
            "simulate",
            "--pop",
            &pop,
            "--plan",
            "0.3,0.1",
            "--days",
            "20",
            "--out-dir",
            out
        ]),
        Some(2)
    );
    assert_eq!(
        code(&["simulate", "--pop", &pop, "--plan", "0.3", "--out-dir", out]),
        Some(2)
    );
    assert_eq!(code(&["simulate", "--pop", &pop, "--out-dir", out]), Some(2));
    assert_eq!(
        code(&[
            "simulate",
            "--pop",
            &pop,
            "--optimize",
            "--codecs",
            "0.1,0.5",
            "--out-dir",
            out
        ]),
        Some(2)
    );
}

#[test]
fn help_exits_0() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
}
