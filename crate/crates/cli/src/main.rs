//! `gridnum`: run, compare and generate demand-response pricing scenarios.

mod methods;
mod output;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gridnum::generate;
use gridnum::model::{load_scenario, scenario_to_json, Scenario};

use methods::{run_method, BusKind, Knobs, Method, Outcome};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] gridnum::Error),
    #[error("cannot write {0}: {1}")]
    Output(PathBuf, std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(gridnum::Error::Io { .. }) => EXIT_USAGE,
            _ => EXIT_VALIDATION,
        }
    }
}

#[derive(Parser)]
#[command(name = "gridnum", version, about = "Demand-response pricing experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve a scenario with one method and write its artifacts.
    Run {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "system")]
        method: Method,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Solve a scenario with every applicable method and tabulate the results.
    Compare {
        scenario: PathBuf,
        #[command(flatten)]
        opts: SolveOpts,
    },
    /// Write a generated scenario.
    Gen {
        #[arg(value_enum)]
        template: Template,
        /// Number of slots.
        #[arg(value_parser = clap::value_parser!(u64).range(1..))]
        slots: u64,
        /// Number of users.
        #[arg(value_parser = clap::value_parser!(u64).range(1..))]
        users: u64,
        seed: u64,
        /// Destination file; `-` prints to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct SolveOpts {
    /// Output directory (default `<root>/<scenario stem>/<method>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base step size.
    #[arg(long)]
    gamma: Option<f64>,
    /// Iteration or round limit.
    #[arg(long = "max-iters")]
    max_iters: Option<usize>,
    /// Convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Transport between the price supervisor and the agents.
    #[arg(long, value_enum, default_value = "inproc")]
    bus: BusKind,
    /// Loopback port for `--bus tcp`; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    port: u16,
    /// Overrides the scenario's seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl SolveOpts {
    fn knobs(&self) -> Result<Knobs, CliError> {
        let positive = |name: &str, v: Option<f64>| match v {
            Some(x) if !(x > 0.0 && x.is_finite()) => {
                Err(CliError::Usage(format!("--{name} must be positive")))
            }
            _ => Ok(()),
        };
        positive("gamma", self.gamma)?;
        positive("tol", self.tol)?;
        if self.max_iters == Some(0) {
            return Err(CliError::Usage("--max-iters must be positive".into()));
        }
        Ok(Knobs {
            gamma: self.gamma,
            max_iters: self.max_iters,
            tol: self.tol,
            bus: Some(self.bus),
            port: self.port,
        })
    }

    fn load(&self, path: &Path) -> Result<Scenario, CliError> {
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "scenario file not found: {}",
                path.display()
            )));
        }
        let mut s = load_scenario(path)?;
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Template {
    Uniform,
    Peak,
    MyopiaTrap,
}

/// Writes the standard artifacts of one method run and prints its summary.
fn emit(dir: &Path, stem: &str, s: &Scenario, out: &Outcome) -> Result<(), CliError> {
    output::write(dir, "allocation.csv", &out.allocation_csv(s))?;
    output::write(dir, "report.csv", &out.report.to_csv())?;
    let title = format!("{stem} / {}", out.method.name());
    output::write(
        dir,
        "convergence.svg",
        &output::convergence_svg(&title, &out.report),
    )?;
    for (name, contents) in &out.files {
        output::write(dir, name, contents)?;
    }
    println!("{}", output::summary_line(out.method.name(), &out.report));
    for line in &out.notes {
        println!("{line}");
    }
    if !out.converged() {
        eprintln!(
            "{}: no convergence after {} iterations (kkt {:.3e})",
            out.method.name(),
            out.report.iterations,
            out.report.kkt_residual
        );
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| "scenario".into(), |s| s.to_string_lossy().into_owned())
}

fn cmd_run(path: &Path, method: Method, opts: &SolveOpts) -> Result<u8, CliError> {
    let knobs = opts.knobs()?;
    let s = opts.load(path)?;
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| output::scenario_dir(path).join(method.name()));
    let out = run_method(method, &s, &knobs)?;
    emit(&dir, &stem(path), &s, &out)?;
    Ok(if out.converged() { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_compare(path: &Path, opts: &SolveOpts) -> Result<u8, CliError> {
    let knobs = opts.knobs()?;
    let s = opts.load(path)?;
    let root = opts.out.clone().unwrap_or_else(|| output::scenario_dir(path));
    let mut rows = Vec::new();
    let mut all_converged = true;
    for method in [Method::System, Method::Dual, Method::Newton, Method::Greedy] {
        let start = Instant::now();
        let out = match run_method(method, &s, &knobs) {
            Ok(out) => out,
            Err(CliError::Core(gridnum::Error::Unsupported(why))) => {
                eprintln!("{}: skipped ({why})", method.name());
                continue;
            }
            Err(e) => return Err(e),
        };
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        emit(&root.join(method.name()), &stem(path), &s, &out)?;
        all_converged &= out.converged();
        rows.push((out, wall_ms));
    }
    let best = rows
        .iter()
        .map(|(o, _)| o.report.final_objective)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut table = String::from("method,welfare,rounds,wall_ms,gap_to_best,gap_bound\n");
    for (o, ms) in &rows {
        let bound = o.gap_bound.map_or_else(String::new, |b| b.to_string());
        let _ = writeln!(
            table,
            "{},{},{},{ms:.3},{},{bound}",
            o.method.name(),
            o.report.final_objective,
            o.report.iterations,
            best - o.report.final_objective
        );
    }
    output::write(&root, "compare.csv", &table)?;
    print!("{table}");
    Ok(if all_converged { 0 } else { EXIT_NOT_CONVERGED })
}

fn cmd_gen(
    template: Template,
    slots: usize,
    users: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> Result<u8, CliError> {
    let (s, name) = match template {
        Template::Uniform => (generate::uniform(slots, users, seed), "uniform"),
        Template::Peak => (generate::peak(slots, users, seed), "peak"),
        Template::MyopiaTrap => (generate::myopia_trap(slots, users, seed), "myopia-trap"),
    };
    let text = scenario_to_json(&s);
    match out {
        Some(p) if p.as_os_str() == "-" => print!("{text}"),
        target => {
            let path = target.unwrap_or_else(|| {
                output::output_root()
                    .join("scenarios")
                    .join(format!("{name}_{slots}_{users}_{seed}.json"))
            });
            let dir = path
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            let file = path
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default();
            output::write(dir, &file, &text)?;
            println!("{}", path.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            method,
            opts,
        } => cmd_run(&scenario, method, &opts),
        Command::Compare { scenario, opts } => cmd_compare(&scenario, &opts),
        Command::Gen {
            template,
            slots,
            users,
            seed,
            out,
        } => cmd_gen(template, slots as usize, users as usize, seed, out),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            if e.exit_code() == EXIT_USAGE {
                eprintln!(
                    "usage: gridnum run <SCENARIO> [--method <METHOD>] [OPTIONS]; see `gridnum --help`"
                );
            }
            ExitCode::from(e.exit_code())
        }
    }
}
