use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use intersect_core::scenario::ScenarioConfig;
use intersect_core::sim::{self, coordinate_scenario, run_scenario, SummaryRow};
use intersect_core::{FeasibilityMode, Result};

#[derive(Parser)]
#[command(name = "intersect", version, about = "Intersection crossing-time coordination")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordination only and print the assigned times.
    Solve(RunArgs),
    /// Coordinate, then track the assigned times in closed loop.
    Simulate(RunArgs),
    /// Run the seven bundled scenarios in both modes and print the iteration table.
    Table3(TableArgs),
    /// Validate scenario files.
    Check {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Projection,
    Relaxation,
}

impl From<ModeArg> for FeasibilityMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Projection => FeasibilityMode::Projection,
            ModeArg::Relaxation => FeasibilityMode::Relaxation,
        }
    }
}

#[derive(Args)]
struct Overrides {
    /// Seed of the channel and of the measurement noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Stopping tolerance on the KKT residual.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Armijo sufficient-decrease constant.
    #[arg(long)]
    gamma: Option<f64>,
    /// Backtracking factor.
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    max_sqp_iters: Option<usize>,
    #[arg(long)]
    max_ls_iters: Option<usize>,
    /// Message loss probability of the simulated channel.
    #[arg(long)]
    drop_probability: Option<f64>,
    /// Measurement noise standard deviation on position (m).
    #[arg(long)]
    position_noise: Option<f64>,
    /// Measurement noise standard deviation on velocity (m/s).
    #[arg(long)]
    velocity_noise: Option<f64>,
}

impl Overrides {
    fn apply(&self, config: &mut ScenarioConfig) -> Result<()> {
        if let Some(s) = self.seed {
            config.channel.seed = s;
            config.noise.seed = s;
        }
        let sqp = &mut config.sqp;
        sqp.epsilon = self.epsilon.unwrap_or(sqp.epsilon);
        sqp.gamma = self.gamma.unwrap_or(sqp.gamma);
        sqp.beta = self.beta.unwrap_or(sqp.beta);
        sqp.max_sqp_iters = self.max_sqp_iters.unwrap_or(sqp.max_sqp_iters);
        sqp.max_ls_iters = self.max_ls_iters.unwrap_or(sqp.max_ls_iters);
        sqp.validate()?;
        let ch = &mut config.channel;
        ch.drop_probability = self.drop_probability.unwrap_or(ch.drop_probability);
        ch.validate()?;
        let noise = &mut config.noise;
        noise.position_std = self.position_noise.unwrap_or(noise.position_std);
        noise.velocity_std = self.velocity_noise.unwrap_or(noise.velocity_std);
        if !(noise.position_std >= 0.0 && noise.velocity_std >= 0.0) {
            return Err(intersect_core::Error::InvalidParameter(
                "noise standard deviations must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Args)]
struct RunArgs {
    /// Scenario files.
    files: Vec<PathBuf>,
    /// Bundled scenario number (1 to 7); may be repeated.
    #[arg(long, short)]
    builtin: Vec<usize>,
    /// Feasibility mode; defaults to the scenario's setting.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Directory for the CSV outputs.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TableArgs {
    /// Directory for the summary CSV.
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Solve(args) => solve(&args),
        Command::Simulate(args) => simulate(&args),
        Command::Table3(args) => table3(&args),
        Command::Check { files } => Ok(check(&files)),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load(args: &RunArgs) -> Result<Vec<ScenarioConfig>> {
    if args.files.is_empty() && args.builtin.is_empty() {
        return Err(intersect_core::Error::Scenario(
            "no scenario given (pass files or --builtin N)".into(),
        ));
    }
    let mut configs = Vec::new();
    for k in &args.builtin {
        configs.push(ScenarioConfig::builtin(*k)?);
    }
    for f in &args.files {
        configs.push(ScenarioConfig::load(f)?);
    }
    for c in &mut configs {
        if let Some(m) = args.mode {
            c.sqp.mode = m.into();
        }
        args.overrides.apply(c)?;
    }
    Ok(configs)
}

fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let file = std::fs::File::create(dir.join("summary.csv"))?;
    sim::write_summary(rows, std::io::BufWriter::new(file))
}

fn solve(args: &RunArgs) -> Result<bool> {
    let mut ok = true;
    let mut rows = Vec::new();
    for config in load(args)? {
        let mode = config.sqp.mode;
        match coordinate_scenario(&config) {
            Ok(c) => {
                let r = &c.result;
                println!(
                    "{} mode={} status={:?} n_sqp={} n_ls={} reg={} objective={:.6} residual={:.3e}",
                    config.name, mode, r.status, r.n_sqp, r.n_ls, r.regularizations, r.objective, r.final_residual
                );
                println!(
                    "  messages={} retransmissions={} ticks={}",
                    c.messages(),
                    c.retransmissions(),
                    c.ticks
                );
                for (id, t) in config.order.iter().zip(&r.times.0) {
                    println!("  vehicle {id}: t_in={:.6} t_out={:.6}", t.t_in, t.t_out);
                }
                ok &= r.converged();
                if let Some(dir) = &args.output {
                    let dir = dir.join(&config.name);
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("coordination.log"), r.log_lines())?;
                }
                rows.push(SummaryRow::new(&config.name, r, mode));
            }
            Err(e) => {
                println!("{} mode={} failed: {e}", config.name, mode);
                ok = false;
            }
        }
    }
    if let Some(dir) = &args.output {
        write_summary(dir, &rows)?;
    }
    Ok(ok)
}

fn simulate(args: &RunArgs) -> Result<bool> {
    let mut ok = true;
    let mut rows = Vec::new();
    for config in load(args)? {
        let mode = config.sqp.mode;
        match run_scenario(&config) {
            Ok(res) => {
                let r = &res.coordination.result;
                let success = r.converged() && res.occupancy.exclusive();
                println!(
                    "{} mode={} status={:?} n_sqp={} n_ls={} exclusive={} order_preserved={} max_dt={:.3e}",
                    config.name,
                    mode,
                    r.status,
                    r.n_sqp,
                    r.n_ls,
                    res.occupancy.exclusive(),
                    res.order_preserved(),
                    res.max_time_violation()
                );
                for v in &res.occupancy.violations {
                    println!("  occupancy violated at t={:.2} s: {:?}", v.time, v.inside);
                }
                for v in &res.vehicles {
                    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |d| format!("{d:+.3e}"));
                    println!(
                        "  vehicle {}: assigned=({:.4}, {:.4}) dt_in={} dt_out={}",
                        v.id,
                        v.assigned.t_in,
                        v.assigned.t_out,
                        fmt(v.delta_in()),
                        fmt(v.delta_out())
                    );
                }
                if let Some(dir) = &args.output {
                    let dir = dir.join(&config.name);
                    res.write_vehicle_csvs(&dir)?;
                    std::fs::write(dir.join("coordination.log"), r.log_lines())?;
                }
                ok &= success;
                rows.push(res.summary());
            }
            Err(e) => {
                println!("{} mode={} failed: {e}", config.name, mode);
                ok = false;
            }
        }
    }
    if let Some(dir) = &args.output {
        write_summary(dir, &rows)?;
    }
    Ok(ok)
}

fn table3(args: &TableArgs) -> Result<bool> {
    let start = Instant::now();
    let modes = [FeasibilityMode::Projection, FeasibilityMode::Relaxation];
    let mut rows = Vec::new();
    let mut ok = true;
    for mode in modes {
        for k in 1..=intersect_core::scenario::BUILTIN.len() {
            let mut config = ScenarioConfig::builtin(k)?;
            config.sqp.mode = mode;
            args.overrides.apply(&mut config)?;
            match coordinate_scenario(&config) {
                Ok(c) => {
                    ok &= c.result.converged();
                    rows.push(Some(SummaryRow::new(&config.name, &c.result, mode)));
                }
                Err(e) => {
                    eprintln!("{} {mode}: {e}", config.name);
                    ok = false;
                    rows.push(None);
                }
            }
        }
    }
    let n = intersect_core::scenario::BUILTIN.len();
    let cell = |r: &Option<SummaryRow>, f: fn(&SummaryRow) -> usize| {
        r.as_ref().map_or("-".to_string(), |r| {
            let mark = if r.converged { "" } else { "*" };
            format!("{}{mark}", f(r))
        })
    };
    print!("{:<18}", "scenario");
    for k in 1..=n {
        print!("{k:>6}");
    }
    println!();
    for (m, mode) in modes.iter().enumerate() {
        let part = &rows[m * n..(m + 1) * n];
        for (label, f) in [("n_sqp", (|r: &SummaryRow| r.n_sqp) as fn(&SummaryRow) -> usize), ("n_ls", |r| r.n_ls)] {
            print!("{:<18}", format!("{mode} {label}"));
            for r in part {
                print!("{:>6}", cell(r, f));
            }
            println!();
        }
    }
    println!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    if let Some(dir) = &args.output {
        let done: Vec<SummaryRow> = rows.into_iter().flatten().collect();
        write_summary(dir, &done)?;
    }
    Ok(ok)
}

fn check(files: &[PathBuf]) -> bool {
    let mut ok = true;
    for f in files {
        match ScenarioConfig::load(f) {
            Ok(c) => println!(
                "{}: ok ({} vehicles, order {:?}, {} steps)",
                f.display(),
                c.num_vehicles(),
                c.order,
                c.sim_steps
            ),
            Err(e) => {
                println!("{}: {e}", f.display());
                ok = false;
            }
        }
    }
    ok
}
