use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minary::closed_forms::{averages, conditional_mean, conditional_variance, eta, limit_expectation, SignVariant};
use minary::io::{format_f64, series_header, series_row, ConfigFile, DeltaSnapshot, Resolved};
use minary::scenarios::{build, run_built, ScenarioName, Source, Verdict};
use minary::verify::{self, Suite, VerifyOptions, VerifyReport};
use minary::Simulation;
use serde::Serialize;
use thiserror::Error;

#[derive(Parser)]
#[command(name = "minary", version, about = "Simulate and verify EMA consensus dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the dynamics and write series.csv, delta_final.json and run.json.
    Simulate(SimulateArgs),
    /// Run verification suites and write verify.json.
    Verify(VerifyArgs),
    /// Replay a worked example and compare against its expected values.
    Reproduce(ReproduceArgs),
    /// Print the closed-form limit and conditional consensus moments.
    Theory(TheoryArgs),
    /// Print a worked example in the configuration format.
    ExportConfig(ExportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `steps` from the config.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Accept alpha in [2/3, 1).
    #[arg(long)]
    allow_alpha_above_two_thirds: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Derived,
    Paper,
}

impl From<VariantArg> for SignVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Derived => SignVariant::Derived,
            VariantArg::Paper => SignVariant::Printed,
        }
    }
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value = "all", value_parser = parse_suite)]
    suite: Suite,
    /// `random`, or a config file used by the Monte Carlo checks.
    #[arg(long, default_value = "random")]
    config: String,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Replicas for the Monte Carlo limit test (0 skips it).
    #[arg(long, default_value_t = 400)]
    replicas: usize,
    #[arg(long, value_enum, default_value = "derived")]
    sign_variant: VariantArg,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    allow_alpha_above_two_thirds: bool,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse()
}

#[derive(Args)]
struct ReproduceArgs {
    /// main, generalist or halo.
    name: Option<String>,
    #[arg(long, conflicts_with = "name")]
    scenario: Option<String>,
    /// Also write reproduce.json here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum, default_value = "derived")]
    sign_variant: VariantArg,
    #[arg(long)]
    allow_alpha_above_two_thirds: bool,
}

#[derive(Args)]
struct ExportArgs {
    name: String,
    /// Write to this file instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            Self::Io { .. } => 1,
            Self::Config(_) => 2,
            Self::Failed(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Verify(a) => run_verify(a),
        Command::Reproduce(a) => reproduce(a),
        Command::Theory(a) => theory(a),
        Command::ExportConfig(a) => export_config(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn load_config(path: &Path, allow_high_alpha: bool) -> Result<(ConfigFile, Resolved), CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut file = ConfigFile::from_json_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    file.allow_alpha_above_two_thirds |= allow_high_alpha;
    let resolved = file
        .resolve()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok((file, resolved))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    version: &'static str,
    seed: u64,
    steps: u64,
    config: &'a ConfigFile,
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let (mut file, _) = load_config(&args.config, args.allow_alpha_above_two_thirds)?;
    if let Some(steps) = args.steps {
        file.steps = steps;
    }
    if let Some(seed) = args.seed {
        file.seed = seed;
    }
    let resolved = file.resolve().map_err(|e| CliError::Config(e.to_string()))?;
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;

    let started = Instant::now();
    let series_path = args.out.join("series.csv");
    let mut series = create(&series_path)?;
    writeln!(series, "{}", series_header(resolved.config.n)).map_err(io_err(&series_path))?;
    let mut sim = Simulation::new(resolved.config.clone(), &resolved.competency, resolved.delta0.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut last_gbar = None;
    for trace in sim.by_ref() {
        writeln!(series, "{}", series_row(&trace)).map_err(io_err(&series_path))?;
        last_gbar = Some(trace.normalized);
    }
    series.flush().map_err(io_err(&series_path))?;
    let state = sim.into_state();

    write_json(&args.out.join("delta_final.json"), &DeltaSnapshot::from(&state))?;
    write_json(
        &args.out.join("run.json"),
        &RunMetadata {
            version: env!("CARGO_PKG_VERSION"),
            seed: file.seed,
            steps: file.steps,
            config: &file,
        },
    )?;

    println!(
        "{} steps (n = {}, m = {}, k = {}, alpha = {}, seed = {})",
        state.t, resolved.config.n, resolved.config.m, resolved.config.k, resolved.config.alpha, file.seed
    );
    if let Some(g) = last_gbar {
        println!("final gbar: {}", format_f64(g));
    }
    println!("max |Delta|: {:.6}", state.max_abs());
    println!("wrote {}", args.out.display());
    eprintln!("elapsed: {:.3} s", started.elapsed().as_secs_f64());
    Ok(())
}

fn run_verify(args: VerifyArgs) -> Result<(), CliError> {
    let config = if args.config == "random" {
        None
    } else {
        let path = PathBuf::from(&args.config);
        let (_, resolved) = load_config(&path, args.allow_alpha_above_two_thirds)?;
        Some((path.display().to_string(), resolved))
    };
    let opts = VerifyOptions {
        trials: args.trials,
        seed: args.seed,
        replicas: args.replicas,
        sign_variant: args.sign_variant.into(),
        config,
        ..VerifyOptions::default()
    };
    let started = Instant::now();
    let report = verify::run(args.suite, &opts);
    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_json(&args.out.join("verify.json"), &report)?;
    print_verify(&report);
    eprintln!("elapsed: {:.3} s", started.elapsed().as_secs_f64());
    if report.pass {
        Ok(())
    } else {
        let failed: Vec<String> = report
            .suites
            .iter()
            .flat_map(|s| s.failures().into_iter().map(move |c| format!("{}: {}", s.suite, c.name)))
            .collect();
        Err(CliError::Failed(format!("verification failed: {}", failed.join("; "))))
    }
}

fn print_verify(report: &VerifyReport) {
    for suite in &report.suites {
        println!("== {} ({})", suite.suite, if suite.pass { "pass" } else { "FAIL" });
        for c in &suite.checks {
            println!(
                "  {:4}  {}: {:.3e} {} {:.1e}  [{} cases]",
                if c.pass { "ok" } else { "FAIL" },
                c.name,
                c.observed,
                c.relation,
                c.bound,
                c.cases
            );
            for d in c.details.iter().take(10) {
                println!("        {d}");
            }
        }
        if !suite.estimates.is_empty() {
            println!("  {:<48} {:>12} {:>10} {:>12} {:>8}", "quantity", "estimate", "std err", "target", "z");
            for e in &suite.estimates {
                println!(
                    "  {:<48} {:>12.6} {:>10.2e} {:>12.6} {:>8.2}{}",
                    e.quantity,
                    e.estimate,
                    e.std_error,
                    e.target,
                    e.z_score,
                    if e.pass { "" } else { "  *" }
                );
            }
        }
        for n in &suite.notes {
            println!("  note: {n}");
        }
    }
    println!("overall: {}", if report.pass { "pass" } else { "FAIL" });
}

#[derive(Serialize)]
struct ReproduceReport<'a> {
    scenario: ScenarioName,
    pass: bool,
    checks: &'a [minary::scenarios::CheckResult],
    long_run: &'a minary::scenarios::LongRunReport,
}

fn reproduce(args: ReproduceArgs) -> Result<(), CliError> {
    let name = args
        .name
        .or(args.scenario)
        .ok_or_else(|| CliError::Config("scenario: give a name (main, generalist or halo)".to_string()))?;
    let name: ScenarioName = name.parse().map_err(|e: minary::UnknownScenario| CliError::Config(e.to_string()))?;
    let sc = build(name);
    let verdict = run_built(&sc);
    print_reproduction(&sc, &verdict);
    if let Some(out) = &args.out {
        fs::create_dir_all(out).map_err(io_err(out))?;
        write_json(
            &out.join("reproduce.json"),
            &ReproduceReport {
                scenario: name,
                pass: verdict.pass(),
                checks: &verdict.checks,
                long_run: &verdict.long_run,
            },
        )?;
    }
    if verdict.pass() {
        Ok(())
    } else {
        let failed: Vec<&str> = verdict.failures().iter().map(|c| c.label.as_str()).collect();
        Err(CliError::Failed(format!("{name}: mismatch in {}", failed.join(", "))))
    }
}

fn print_reproduction(sc: &minary::scenarios::Scenario, v: &Verdict) {
    let t = &v.trace;
    let labels: Vec<usize> = t.active.iter().map(|j| sc.column_labels[j]).collect();
    let width = sc.row_labels.iter().map(|l| l.len()).max().unwrap_or(0);
    println!("Scenario {} (n = {}, m = {}, k = {}, alpha = {})", sc.name, sc.config.n, sc.config.m, sc.config.k, sc.config.alpha);
    println!();
    println!("Step 1. Active dimensions and signals");
    for (l, x) in labels.iter().zip(&t.signals) {
        println!("  x_{l} = {x:.4}");
    }
    println!();
    println!("Step 2. Raw responses r = x - C");
    print!("  {:width$}", "");
    for l in &labels {
        print!(" {:>9}", format!("dim {l}"));
    }
    println!();
    for (i, name) in sc.row_labels.iter().enumerate() {
        print!("  {name:width$}");
        for p in 0..labels.len() {
            print!(" {:>9.4}", t.raw[(i, p)]);
        }
        println!();
    }
    println!();
    println!("Step 3. Averaged responses R_i");
    for (i, name) in sc.row_labels.iter().enumerate() {
        println!("  {name:width$} {:>9.4}", t.averaged[i]);
    }
    println!();
    println!("Step 4. Consensus");
    println!("  G    = {:.4}", t.consensus);
    println!("  Gbar = {:.4}", t.normalized);
    println!();
    println!("Step 5. Learning signals d_i = Gbar - R_i");
    for (i, name) in sc.row_labels.iter().enumerate() {
        println!("  {name:width$} {:>9.4}", t.learning[i]);
    }
    println!("  sum = {:.1e}", t.learning.iter().sum::<f64>());
    println!();
    println!("Step 6. Memory update on active columns");
    for (i, name) in sc.row_labels.iter().enumerate() {
        print!("  {name:width$}");
        for j in t.active.iter() {
            print!(" {:>10.6}", t.delta_after.entries[(i, j)]);
        }
        println!();
    }
    println!();
    println!("Checks");
    println!("  {:<14} {:<8} {:>12} {:>12} {:>8}  result", "value", "source", "expected", "actual", "tol");
    for c in &v.checks {
        let source = match c.source {
            Source::Printed => "printed",
            Source::ExactRational => "exact",
        };
        println!(
            "  {:<14} {:<8} {:>12.6} {:>12.6} {:>8.0e}  {}",
            c.label,
            source,
            c.expected,
            c.actual,
            c.tolerance,
            if c.pass { "ok" } else { "MISMATCH" }
        );
    }
    println!();
    println!(
        "Free run: {} steps from seed {}{}",
        v.long_run.steps,
        v.long_run.seed,
        if v.long_run.enforced { "" } else { " (report only)" }
    );
    for n in &v.long_run.notes {
        println!("  {n}");
    }
    println!();
    println!("verdict: {}", if v.pass() { "pass" } else { "FAIL" });
}

fn theory(args: TheoryArgs) -> Result<(), CliError> {
    let (_, r) = load_config(&args.config, args.allow_alpha_above_two_thirds)?;
    let (c, cfg) = (&r.competency, &r.config);
    let chosen: SignVariant = args.sign_variant.into();
    println!("n = {}, m = {}, k = {}, alpha = {}", cfg.n, cfg.m, cfg.k, cfg.alpha);
    println!("signal mean = {}, variance = {}", format_f64(cfg.mu.mean()), format_f64(cfg.mu.variance()));
    println!("eta = {}", format_f64(eta(cfg.m, cfg.k)));
    let avg = averages(c);
    println!("global mean = {}", format_f64(avg.global_mean));
    println!();
    println!("Limiting mean of Delta (rows = perspectives):");
    let u = limit_expectation(c, cfg.k);
    for i in 0..cfg.n {
        let row: Vec<String> = (0..cfg.m).map(|j| format!("{:>9.5}", u[(i, j)] + 0.0)).collect();
        println!("  {}", row.join(" "));
    }
    println!();
    println!("Normalized consensus given dimension j is active:");
    println!("  {:>4} {:>14} {:>14} {:>14}", "j", "mean (derived)", "mean (paper)", "variance");
    for j in 0..cfg.m {
        let derived = conditional_mean(c, &cfg.mu, cfg.k, j, SignVariant::Derived);
        let printed = conditional_mean(c, &cfg.mu, cfg.k, j, SignVariant::Printed);
        let var = conditional_variance(c, &cfg.mu, cfg.k, j);
        let show = |x: Result<f64, minary::MomentsError>| x.map_or_else(|_| "undefined".to_string(), |v| format!("{v:.6}"));
        println!("  {:>4} {:>14} {:>14} {:>14}", j + 1, show(derived), show(printed), show(var));
    }
    if chosen == SignVariant::Printed {
        println!();
        println!("note: the alternate-sign mean is shown for comparison; Monte Carlo supports the derived sign");
    }
    Ok(())
}

fn export_config(args: ExportArgs) -> Result<(), CliError> {
    let name: ScenarioName = args
        .name
        .parse()
        .map_err(|e: minary::UnknownScenario| CliError::Config(e.to_string()))?;
    let mut text = build(name).to_config_file().to_json_pretty();
    text.push('\n');
    match args.out {
        Some(path) => fs::write(&path, text).map_err(io_err(&path)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
