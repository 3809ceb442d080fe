use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rdmpc::certify::{format_kv, verify, Certificate};
use rdmpc::coordination::SolveDiagnostics;
use rdmpc::runlog::{LogWriter, TrajectoryLog};
use rdmpc::scenario::Scenario;

/// Robust decentralized NMPC for multi-agent navigation.
#[derive(Debug, Parser)]
#[command(name = "rdmpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a scenario and verify the resulting log.
    Run {
        scenario: PathBuf,
        /// Output directory for trajectory.csv and report.txt.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the scenario's weight seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Writes per-iteration solver diagnostics to diagnostics.csv.
        #[arg(long)]
        verbose_solver: bool,
        /// Overrides the scenario's total time (s).
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Print the certificate quantities of a scenario.
    Certify { scenario: PathBuf },
    /// Re-verify an existing trajectory log against its scenario.
    Verify { log: PathBuf, scenario: PathBuf },
    /// Print a gnuplot column manifest for a trajectory log.
    Manifest { log: PathBuf },
}

/// Failure classes mapped to exit codes.
enum Failure {
    Spec(String),
    Usage(String),
}

impl From<rdmpc::Error> for Failure {
    fn from(e: rdmpc::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run {
            scenario,
            out,
            seed,
            verbose_solver,
            duration,
        } => cmd_run(&scenario, &out, seed, verbose_solver, duration),
        Command::Certify { scenario } => cmd_certify(&scenario),
        Command::Verify { log, scenario } => cmd_verify(&log, &scenario),
        Command::Manifest { log } => cmd_manifest(&log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Spec(msg)) => {
            eprintln!("rdmpc: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("rdmpc: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let sc = Scenario::load(path)?;
    Ok(match seed {
        Some(s) => sc.with_seed(s)?,
        None => sc,
    })
}

fn cmd_run(
    scenario: &Path,
    out: &Path,
    seed: Option<u64>,
    verbose_solver: bool,
    duration: Option<f64>,
) -> Result<(), Failure> {
    let sc = load_scenario(scenario, seed)?;
    let duration = duration.unwrap_or(sc.file.total_time);
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Failure::Usage(format!("duration must be positive, got {duration}")));
    }
    fs::create_dir_all(out)?;
    let mut sim = sc.simulation_with_diagnostics(verbose_solver)?;
    sim.annotate("duration", duration);
    let log_path = out.join("trajectory.csv");
    let mut writer = LogWriter::create(&log_path, sim.log())?;
    let outcome = sim.run(duration, |rows| {
        for r in rows {
            writer.write_row(r)?;
        }
        writer.flush()
    });
    writer.finish()?;
    if verbose_solver {
        write_diagnostics(&out.join("diagnostics.csv"), &outcome.diagnostics)?;
    }

    let log = TrajectoryLog::read_csv(&log_path)?;
    let report = verify(&log, &sc)?;
    let cert = Certificate::from_scenario(&sc)?;
    let mut kv = vec![
        ("scenario".to_string(), sc.file.name.clone()),
        ("seed".to_string(), sc.file.seed.to_string()),
        ("duration".to_string(), duration.to_string()),
        (
            "run_error".to_string(),
            outcome.error.as_ref().map(|e| e.to_string()).unwrap_or_else(|| "none".into()),
        ),
    ];
    kv.extend(cert.to_kv().into_iter().map(|(k, v)| (format!("certificate.{k}"), v)));
    kv.extend(report.to_kv().into_iter().map(|(k, v)| (format!("verify.{k}"), v)));
    fs::write(out.join("report.txt"), format_kv(&kv))?;
    print_summary(&report);

    if let Some(e) = outcome.error {
        return Err(Failure::Spec(format!("run stopped: {e}")));
    }
    if !report.passed() {
        return Err(Failure::Spec("verification failed".into()));
    }
    Ok(())
}

fn write_diagnostics(path: &Path, diags: &[SolveDiagnostics]) -> Result<(), Failure> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "step,agent,outer,inner,merit,cost,residual,penalty")?;
    for d in diags {
        for r in &d.rows {
            writeln!(
                f,
                "{},{},{},{},{},{},{},{}",
                d.step,
                d.agent,
                r.outer,
                r.inner,
                r.merit,
                r.cost,
                r.residual,
                r.penalty
            )?;
        }
    }
    f.flush()?;
    Ok(())
}

fn cmd_certify(scenario: &Path) -> Result<(), Failure> {
    let sc = load_scenario(scenario, None)?;
    let cert = Certificate::from_scenario(&sc)?;
    print!("{}", format_kv(&cert.to_kv()));
    if cert.consistent() {
        Ok(())
    } else {
        Err(Failure::Spec(format!(
            "disturbance bound {} exceeds the admissible bound",
            cert.w_bar
        )))
    }
}

fn cmd_verify(log_path: &Path, scenario: &Path) -> Result<(), Failure> {
    let log = TrajectoryLog::read_csv(log_path)?;
    let seed = match log.meta("seed") {
        Some(s) => Some(
            s.parse::<u64>()
                .map_err(|e| Failure::Usage(format!("bad seed metadata {s:?}: {e}")))?,
        ),
        None => None,
    };
    let sc = load_scenario(scenario, seed)?;
    let report = verify(&log, &sc)?;
    print!("{}", format_kv(&report.to_kv()));
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Spec("verification failed".into()))
    }
}

fn cmd_manifest(log_path: &Path) -> Result<(), Failure> {
    let log = TrajectoryLog::read_csv(log_path)?;
    println!("# gnuplot column indices for {}", log_path.display());
    for (i, name) in log.header().iter().enumerate() {
        println!("{} {}", i + 1, name);
    }
    Ok(())
}

fn print_summary(report: &rdmpc::certify::VerificationReport) {
    println!("{:<20} {:>6} {:>14} {:>10} {:>6}", "check", "pass", "worst", "time", "agent");
    for c in report.checks.iter().chain(&report.informational) {
        let agent = c.agent.map(|a| a.to_string()).unwrap_or_else(|| "-".into());
        let pass = if !c.applicable {
            "n/a"
        } else if c.passed {
            "yes"
        } else {
            "NO"
        };
        println!("{:<20} {:>6} {:>14.6e} {:>10.3} {:>6}", c.name, pass, c.worst, c.time, agent);
    }
}
