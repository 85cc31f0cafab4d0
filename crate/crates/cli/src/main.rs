//! `leqg`: solve, check, simulate and verify risk-sensitive LQ control problems
//! with exploratory controls, and reproduce the built-in reference run.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leqg_core::conditions;
use leqg_core::config::{load_config, TABLE2_CONFIG};
use leqg_core::duality;
use leqg_core::linalg::Vector;
use leqg_core::oracle::{self, GridConfig, OracleReport};
use leqg_core::pg::{self, GradientSource, TrainConfig};
use leqg_core::policy::{self, PolicyParams};
use leqg_core::report::Table;
use leqg_core::rng::{self, Purpose};
use leqg_core::simulate::{self, Measure};
use leqg_core::solver;
use leqg_core::{validate, Error, ModelSpec, TerminalConvention, ValidatedModel};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_UNVERIFIED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "leqg",
    version,
    about = "Risk-sensitive LQ control with exploration, via its dual entropy-penalized game"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the backward recursion and write the value function, gains and condition report.
    Solve(SolveArgs),
    /// Check the saddle-point conditions at every step.
    Check(CheckArgs),
    /// Simulate the closed loop under the reference or shifted measure.
    Simulate(SimulateArgs),
    /// Run the built-in reference instance end to end and compare its deterministic columns.
    Reproduce(ReproduceArgs),
    /// Run the oracle suite against the analytic solver.
    Verify(VerifyArgs),
    /// Train affine policies by natural policy gradient.
    Train(TrainArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Model configuration file, or `table2` for the built-in instance.
    #[arg(long)]
    config: String,
    /// Terminal payoff convention.
    #[arg(long, value_enum, default_value_t = Terminal::AsPrinted)]
    terminal: Terminal,
}

#[derive(Args)]
struct OutputArgs {
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    runs: usize,
    #[arg(long, value_enum, default_value_t = MeasureArg::Shifted)]
    measure: MeasureArg,
    /// Also estimate the free energy from this many paths (at least 1000).
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct ReproduceArgs {
    #[command(flatten)]
    output: OutputArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Monte Carlo samples for the entropy checks.
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Rollouts per episode for sampled gradients and objective estimates.
    #[arg(long, default_value_t = 256)]
    runs: usize,
    #[arg(long, default_value_t = 1e-2)]
    delta0: f64,
    #[arg(long, value_enum, default_value_t = GradientArg::Exact)]
    gradient: GradientArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Terminal {
    AsPrinted,
    Consistent,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Reference,
    Shifted,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradientArg {
    Exact,
    Critic,
    ZerothOrder,
}

#[derive(Serialize)]
struct Artifact {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: Option<String>,
    config_sha256: Option<String>,
    seed: Option<u64>,
    runs: Option<usize>,
    samples: Option<usize>,
    outputs: Vec<Artifact>,
    wall_clock_seconds: f64,
    version: &'static str,
}

struct Run {
    manifest: RunManifest,
    out: PathBuf,
    start: Instant,
}

impl Run {
    fn new(command: &str, out: &Path, config: Option<&str>) -> Result<Self, Error> {
        fs::create_dir_all(out)?;
        Ok(Run {
            manifest: RunManifest {
                command: command.to_string(),
                config: config.map(str::to_string),
                config_sha256: None,
                seed: None,
                runs: None,
                samples: None,
                outputs: Vec::new(),
                wall_clock_seconds: 0.0,
                version: env!("CARGO_PKG_VERSION"),
            },
            out: out.to_path_buf(),
            start: Instant::now(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<(), Error> {
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        self.manifest.outputs.push(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        Ok(())
    }

    fn write_table(&mut self, stem: &str, table: &Table, format: Format) -> Result<(), Error> {
        match format {
            Format::Csv => self.write(&format!("{stem}.csv"), &table.to_csv_string()),
            Format::Json => self.write(&format!("{stem}.json"), &(table.to_json_string() + "\n")),
        }
    }

    fn finish(mut self) -> Result<(), Error> {
        self.manifest.wall_clock_seconds = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(self.out.join("manifest.json"), text)?;
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_text(config: &str) -> Result<String, Error> {
    if config == "table2" {
        Ok(TABLE2_CONFIG.to_string())
    } else {
        Ok(fs::read_to_string(config)?)
    }
}

fn load_model(args: &ModelArgs) -> Result<(ValidatedModel, String), Error> {
    let text = config_text(&args.config)?;
    let spec: ModelSpec = load_config(&text)?;
    let terminal = match args.terminal {
        Terminal::AsPrinted => TerminalConvention::AsPrinted,
        Terminal::Consistent => TerminalConvention::Consistent,
    };
    Ok((
        validate(spec)?.with_terminal_convention(terminal),
        sha256_hex(text.as_bytes()),
    ))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Invalid(_)
        | Error::Parse { .. }
        | Error::MissingKey(_)
        | Error::NotScalar
        | Error::Precondition(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => EXIT_USAGE,
        _ => EXIT_NUMERICAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Solve(args) => cmd_solve(args),
        Command::Check(args) => cmd_check(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Reproduce(args) => cmd_reproduce(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Train(args) => cmd_train(args),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn cmd_solve(args: SolveArgs) -> Result<u8, Error> {
    let (model, hash) = load_model(&args.model)?;
    let mut run = Run::new("solve", &args.output.out, Some(&args.model.config))?;
    run.manifest.config_sha256 = Some(hash);
    let sol = solver::solve(&model)?;
    let report = conditions::check_full_horizon(&sol);
    run.write_table(
        "solution",
        &solver::solution_table(&sol)?,
        args.output.format,
    )?;
    run.write_table("conditions", &report.table(), args.output.format)?;
    let transforms = solver::criterion_transforms(&sol);
    println!("V_0(x0) = {:.6}", transforms.log_inf_i);
    println!(
        "saddle conditions: {}",
        if report.all_pass { "PASS" } else { "FAIL" }
    );
    run.finish()?;
    Ok(if sol.saddle_verified {
        0
    } else {
        EXIT_UNVERIFIED
    })
}

fn cmd_check(args: CheckArgs) -> Result<u8, Error> {
    let (model, _) = load_model(&args.model)?;
    let sol = solver::solve(&model)?;
    let report = conditions::check_full_horizon(&sol);
    match args.format {
        Format::Csv => print!("{}", report.table().to_csv_string()),
        Format::Json => println!("{}", report.to_json_string()),
    }
    Ok(if report.all_pass { 0 } else { EXIT_UNVERIFIED })
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8, Error> {
    if args.runs == 0 {
        return Err(Error::Precondition("--runs must be at least 1".into()));
    }
    let (model, hash) = load_model(&args.model)?;
    let mut run = Run::new("simulate", &args.output.out, Some(&args.model.config))?;
    run.manifest.config_sha256 = Some(hash);
    run.manifest.seed = Some(args.seed);
    run.manifest.runs = Some(args.runs);
    run.manifest.samples = args.samples;
    let sol = solver::solve(&model)?;
    let measure = match args.measure {
        MeasureArg::Reference => Measure::Reference,
        MeasureArg::Shifted => Measure::Shifted,
    };
    let reference = simulate::run_trajectory(&model, &sol, Measure::Reference, args.seed);
    let shifted = simulate::run_trajectory(&model, &sol, Measure::Shifted, args.seed);
    run.write_table(
        "trajectory",
        &simulate::trajectory_table(&sol, &reference, &shifted)?,
        args.output.format,
    )?;
    let batch = simulate::run_batch(&model, &sol, measure, args.runs, args.seed)?;
    run.write(
        "batch.json",
        &(serde_json::to_string_pretty(&batch)? + "\n"),
    )?;
    println!(
        "mean theta*G_T over {} runs: {:.6}",
        args.runs, batch.mean_theta_g
    );
    if let Some(samples) = args.samples {
        let mc = duality::free_energy_mc(&model, &sol.gains, samples, args.seed)?;
        run.write(
            "free_energy.json",
            &(serde_json::to_string_pretty(&mc)? + "\n"),
        )?;
        println!(
            "free energy estimate: {:.6} +- {:.6}",
            mc.estimate, mc.std_error
        );
    }
    run.finish()?;
    Ok(if sol.saddle_verified {
        0
    } else {
        EXIT_UNVERIFIED
    })
}

fn cmd_reproduce(args: ReproduceArgs) -> Result<u8, Error> {
    let mut run = Run::new("reproduce", &args.output.out, Some("table2"))?;
    run.manifest.config_sha256 = Some(sha256_hex(TABLE2_CONFIG.as_bytes()));
    run.manifest.seed = Some(args.seed);
    let model = validate(load_config(TABLE2_CONFIG)?)?;
    let sol = solver::solve(&model)?;
    let reference = simulate::run_trajectory(&model, &sol, Measure::Reference, args.seed);
    let shifted = simulate::run_trajectory(&model, &sol, Measure::Shifted, args.seed);
    run.write_table(
        "table3",
        &simulate::trajectory_table(&sol, &reference, &shifted)?,
        args.output.format,
    )?;
    let (compared, mismatches) = solver::reference_mismatches(&sol)?;
    let pass = mismatches.is_empty();
    let mut digest = format!(
        "deterministic columns match to 4 decimals: {}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    digest.push_str(&format!("cells compared: {compared}\n"));
    for m in &mismatches {
        digest.push_str(&format!("mismatch {m}\n"));
    }
    run.write("digest.txt", &digest)?;
    print!("{digest}");
    run.finish()?;
    Ok(if pass { 0 } else { EXIT_NUMERICAL })
}

fn cmd_verify(args: VerifyArgs) -> Result<u8, Error> {
    let (model, hash) = load_model(&args.model)?;
    let mut run = Run::new("verify", &args.out, Some(&args.model.config))?;
    run.manifest.config_sha256 = Some(hash);
    run.manifest.seed = Some(args.seed);
    run.manifest.samples = Some(args.samples);
    let spec = model.spec().clone();
    let sol = solver::solve(&model)?;
    let mut reports = Vec::new();

    // Random scalar saddle instances: brute-force saddle and closed form vs the linear solve.
    let mut rng = rng::substream(args.seed, Purpose::Instances, 0);
    let (mut numeric_dev, mut closed_dev) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (_, _, f) = oracle::random_saddle_instance(&mut rng);
        let x = Vector::from_element(1, rng.random_range(-2.0..2.0));
        let (u, g, e) = solver::stationary_controls(&f, &x)?;
        let (un, gn, en) = oracle::numeric_saddle_f(&f, &x)?;
        let (uc, gc, ec) = solver::closed_form_controls(&f, &x)?;
        numeric_dev = numeric_dev
            .max((&un - &u).amax())
            .max((&gn - &g).amax())
            .max((&en - &e).amax());
        closed_dev = closed_dev
            .max((&uc - &u).amax())
            .max((&gc - &g).amax())
            .max((&ec - &e).amax());
    }
    reports.push(OracleReport::new(
        "numeric-saddle-random-instances",
        &spec,
        numeric_dev,
        1e-8,
    ));
    reports.push(OracleReport::new(
        "closed-form-controls-random-instances",
        &spec,
        closed_dev,
        1e-8,
    ));

    // Stationarity and DPP residual on the configured instance.
    let mut grad_dev = 0.0f64;
    let mut dpp_dev = 0.0f64;
    let dx = model.state_dim();
    for t in 0..model.horizon {
        let x = &model.x0 + rng::standard_normal(&mut rng, dx);
        let f = &sol.fraktur[t];
        let (u, g, e) = solver::stationary_controls(f, &x)?;
        grad_dev = grad_dev.max(oracle::fd_gradient_f(f, &x, &u, &g, &e, 1e-4).amax());
        let rhs = solver::dpp_objective(&sol.value[t + 1], &x, &u, &g, &e, t, &model);
        let lhs = sol.value[t].eval(&x);
        dpp_dev = dpp_dev.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    reports.push(OracleReport::new(
        "stationarity-finite-difference",
        &spec,
        grad_dev,
        1e-6,
    ));
    reports.push(OracleReport::new("dpp-residual", &spec, dpp_dev, 1e-8));

    let (grad, _) = policy::exact_gradient(&model, &PolicyParams::from_solution(&sol))?;
    reports.push(OracleReport::new(
        "policy-gradient-fixed-point",
        &spec,
        policy::max_abs_params(&grad),
        1e-8,
    ));

    // Short-horizon scalar truncations: quadrature and grid dynamic programming.
    if model.is_scalar() {
        let short = validate(spec.with_horizon(model.horizon.min(2)))?
            .with_terminal_convention(model.terminal_convention());
        let short_spec = short.spec().clone();
        let short_sol = solver::solve(&short)?;
        let v0 = solver::value_at(&short_sol, 0, &short.x0);
        let quad = oracle::quadrature_log_moment(&short, &short_sol.gains)?;
        reports.push(OracleReport::new(
            "quadrature-log-moment-vs-value",
            &short_spec,
            (quad - v0).abs(),
            1e-6,
        ));
        match duality::exact_free_energy(&short, &short_sol.gains) {
            Ok(exact) => reports.push(OracleReport::new(
                "quadrature-log-moment-vs-closed-form",
                &short_spec,
                (quad - exact).abs(),
                1e-8,
            )),
            Err(err) => log::warn!("closed-form log-moment unavailable: {err}"),
        }
        let grid = oracle::dp_grid_value(&short, &GridConfig::default())?;
        reports.push(OracleReport::new(
            "grid-dp-value",
            &short_spec,
            (grid.v0_at_x0 - v0).abs(),
            1e-3,
        ));
    }

    // Change of measure: E_P[dQ/dP] = 1 for the saddle shift along sampled paths.
    let shift_policy = PolicyParams::from_solution(&sol);
    let factors = rng::NoiseFactors::new(&model);
    let weights: Vec<f64> = (0..args.samples as u64)
        .map(|i| {
            let mut r = rng::substream(args.seed, Purpose::Entropy, i);
            let path =
                simulate::sample_path(&model, &factors, &shift_policy, Measure::Reference, &mut r);
            let shift = duality::MeasureShift {
                gamma: path.gamma,
                eta: path.eta,
            };
            let noise = duality::NoiseRealization {
                w: path.w,
                v: path.v,
            };
            duality::log_rn_derivative(&shift, &noise, &model).exp()
        })
        .collect();
    let n = weights.len() as f64;
    let mean = weights.iter().sum::<f64>() / n;
    let se = (weights.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
    let mut rn = OracleReport::new("radon-nikodym-mean", &spec, (mean - 1.0).abs(), 3.0 * se);
    rn.pass = (mean - 1.0).abs() <= 3.0 * se;
    reports.push(rn);

    let mut text = String::new();
    for r in &reports {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
        println!(
            "{:<40} {:>12.3e} <= {:<9.1e} {}",
            r.check,
            r.max_deviation,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    run.write("oracle_report.jsonl", &text)?;
    run.finish()?;
    Ok(if reports.iter().all(|r| r.pass) {
        0
    } else {
        EXIT_NUMERICAL
    })
}

fn cmd_train(args: TrainArgs) -> Result<u8, Error> {
    let (model, hash) = load_model(&args.model)?;
    let mut run = Run::new("train", &args.out, Some(&args.model.config))?;
    run.manifest.config_sha256 = Some(hash);
    run.manifest.seed = Some(args.seed);
    run.manifest.runs = Some(args.runs);
    let config = TrainConfig {
        episodes: args.episodes,
        rollouts: args.runs,
        delta0: args.delta0,
        seed: args.seed,
        gradient: match args.gradient {
            GradientArg::Exact => GradientSource::Exact,
            GradientArg::Critic => GradientSource::Critic,
            GradientArg::ZerothOrder => GradientSource::ZerothOrder,
        },
        ..TrainConfig::default()
    };
    let sol = solver::solve(&model)?;
    let (k, history) = pg::train(&model, PolicyParams::zeros(&model), &config)?;
    run.write("history.jsonl", &pg::history_json_lines(&history))?;
    run.write("policy.json", &(serde_json::to_string_pretty(&k)? + "\n"))?;
    println!("gain gap to closed form: {:.3e}", pg::gain_gap(&k, &sol));
    println!("max |(F, f)|: {:.3e}", k.eta_norm());
    run.finish()?;
    Ok(0)
}
