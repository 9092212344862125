//! Release gate. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use minary::closed_forms::SignVariant;
use minary::scenarios::{run_scenario, Source};
use minary::verify::{run_one, Suite, SuiteReport, VerifyOptions};
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        summary: summary.into(),
    }
}

fn timed<F: FnOnce() -> Outcome>(limit: Duration, f: F) -> Outcome {
    let start = Instant::now();
    let mut o = f();
    let elapsed = start.elapsed();
    if elapsed > limit {
        o.pass = false;
    }
    o.summary = format!("{} [{:.2} s, limit {} s]", o.summary, elapsed.as_secs_f64(), limit.as_secs_f64());
    o
}

fn suite_outcome(report: &SuiteReport) -> Outcome {
    let parts: Vec<String> = report
        .checks
        .iter()
        .map(|c| format!("{} {:.2e}{}", c.name, c.observed, if c.pass { "" } else { " FAILED" }))
        .collect();
    outcome(report.pass, parts.join("; "))
}

fn default_opts() -> VerifyOptions {
    VerifyOptions::default()
}

fn golden(names: &[&str], sources: &[Source]) -> Outcome {
    let bin = env!("CARGO_BIN_EXE_minary");
    let mut pass = true;
    let mut parts = Vec::new();
    for name in names {
        let verdict = run_scenario(name).expect("known scenario");
        let checked: Vec<_> = verdict.checks.iter().filter(|c| sources.contains(&c.source)).collect();
        let failed = checked.iter().filter(|c| !c.pass).count();
        let status = Command::new(bin).args(["reproduce", name]).output().expect("binary runs").status;
        pass &= failed == 0 && verdict.pass() && status.success();
        parts.push(format!("{name}: {}/{} values match, CLI exit {:?}", checked.len() - failed, checked.len(), status.code()));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_1() -> Outcome {
    timed(Duration::from_secs(1), || golden(&["main"], &[Source::Printed, Source::ExactRational]))
}

fn criterion_2() -> Outcome {
    timed(Duration::from_secs(1), || golden(&["generalist", "halo"], &[Source::Printed, Source::ExactRational]))
}

fn criterion_3() -> Outcome {
    timed(Duration::from_secs(30), || suite_outcome(&run_one(Suite::Conservation, &default_opts())))
}

fn criterion_4_and_5(names: &[&str]) -> Outcome {
    let report = run_one(Suite::Affine, &default_opts());
    let picked: Vec<_> = report.checks.iter().filter(|c| names.iter().any(|n| c.name.starts_with(n))).collect();
    let pass = !picked.is_empty() && picked.iter().all(|c| c.pass && c.cases >= 10_000);
    let parts: Vec<String> = picked.iter().map(|c| format!("{} {:.2e} over {} tuples", c.name, c.observed, c.cases)).collect();
    outcome(pass, parts.join("; "))
}

fn criterion_6() -> Outcome {
    let report = run_one(Suite::Lipschitz, &default_opts());
    let counts_ok = report.checks[0].cases >= 1_000 && report.checks[1].cases >= 100;
    let mut o = suite_outcome(&report);
    o.pass &= counts_ok;
    o
}

fn criterion_7() -> Outcome {
    let report = run_one(Suite::Identities, &default_opts());
    let mut o = suite_outcome(&report);
    o.pass &= report.checks.iter().all(|c| c.cases >= 100);
    o
}

fn criterion_8() -> Outcome {
    let opts = VerifyOptions {
        replicas: 0,
        ..default_opts()
    };
    let report = run_one(Suite::Limit, &opts);
    suite_outcome(&report)
}

fn criterion_9() -> Outcome {
    timed(Duration::from_secs(120), || {
        let opts = VerifyOptions {
            trials: 0,
            ..default_opts()
        };
        let report = run_one(Suite::Limit, &opts);
        let mc: Vec<_> = report.checks.iter().filter(|c| c.name.starts_with("generalist")).collect();
        let pass = mc.len() == 1 && mc[0].pass && mc[0].cases == 18;
        let max_z = report.estimates.iter().map(|e| e.z_score.abs()).fold(0.0, f64::max);
        outcome(
            pass,
            format!(
                "400 replicas x 3000 steps, {:.1}% of cells within |z| <= 4, max |z| {:.2}",
                mc.first().map_or(0.0, |c| c.observed * 100.0),
                max_z
            ),
        )
    })
}

fn criterion_10() -> Outcome {
    let derived = run_one(Suite::ConsensusMoments, &default_opts());
    let printed = run_one(
        Suite::ConsensusMoments,
        &VerifyOptions {
            sign_variant: SignVariant::Printed,
            ..default_opts()
        },
    );
    let rejected = printed.estimates.iter().filter(|e| e.quantity.contains("(paper)") && !e.pass).count();
    let total = printed.estimates.iter().filter(|e| e.quantity.contains("(paper)")).count();
    let mut o = suite_outcome(&derived);
    o.summary = format!("{}; alternate-sign mean rejected in {rejected}/{total} Monte Carlo comparisons (report only)", o.summary);
    o
}

fn hash_dir(dir: &Path) -> Vec<(String, String)> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    entries.sort();
    entries
        .into_iter()
        .map(|p| {
            let digest = Sha256::digest(fs::read(&p).unwrap());
            let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
            (p.file_name().unwrap().to_string_lossy().into_owned(), hex)
        })
        .collect()
}

fn criterion_11() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_minary");
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let generalist = configs.join("generalist.json");
    let halo = configs.join("halo.json");
    let commands: Vec<Vec<String>> = vec![
        vec!["simulate".into(), "--config".into(), generalist.display().to_string(), "--steps".into(), "2000".into(), "--seed".into(), "42".into()],
        vec!["simulate".into(), "--config".into(), halo.display().to_string(), "--steps".into(), "1000".into()],
        vec!["verify".into(), "--suite".into(), "all".into(), "--trials".into(), "10".into(), "--replicas".into(), "64".into()],
        vec!["reproduce".into(), "halo".into()],
    ];
    let mut pass = true;
    let mut compared = 0;
    for (i, args) in commands.iter().enumerate() {
        let mut hashes = Vec::new();
        for threads in ["1", "4"] {
            let dir = tempfile::tempdir().unwrap();
            let mut full = args.clone();
            full.push("--out".into());
            full.push(dir.path().display().to_string());
            let status = Command::new(bin)
                .args(&full)
                .env("RAYON_NUM_THREADS", threads)
                .output()
                .expect("binary runs")
                .status;
            pass &= status.success();
            hashes.push(hash_dir(dir.path()));
        }
        if hashes[0].is_empty() || hashes[0] != hashes[1] {
            eprintln!("command {i} produced different files: {:?}", hashes);
            pass = false;
        }
        compared += hashes[0].len();
    }
    outcome(pass, format!("{} commands run twice (1 and 4 worker threads), {compared} output files hash-identical", commands.len()))
}

type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 golden main example", Box::new(criterion_1)),
        ("2 golden generalist and halo examples", Box::new(criterion_2)),
        ("3 conservation", Box::new(criterion_3)),
        ("4 signal cancellation", Box::new(|| criterion_4_and_5(&["signal cancellation"]))),
        ("5 affine equivalence", Box::new(|| criterion_4_and_5(&["||step(Delta) - Phi_S(Delta)||_F"]))),
        ("6 operator bounds", Box::new(criterion_6)),
        ("7 algebraic identities", Box::new(criterion_7)),
        ("8 closed-form limit vs linear solve", Box::new(criterion_8)),
        ("9 Monte Carlo limit", Box::new(criterion_9)),
        ("10 conditional consensus moments", Box::new(criterion_10)),
        ("11 determinism", Box::new(criterion_11)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.summary);
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
