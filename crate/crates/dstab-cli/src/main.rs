//! Command line for the dstab study: run the excitation protocol,
//! identify the equivalent circuit, run the staged attack pipeline per
//! level with charts and a comparison table, and spot-check the fit
//! gradients against finite differences.

use clap::{Parser, Subcommand};
use dstab_cli::config::RunConfig;
use dstab_cli::svg::{line_chart, Series};
use dstab_core::{
    attack::OCV_FIT_DEGREE, compare_levels, fd_gradient, gradient_detail, identify_from_records,
    run_dstab, run_excitation, satisfaction_margins, AttackLevel, AttackReport, Error, Result,
    Trajectory,
};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

#[derive(Parser)]
#[command(
    name = "dstab",
    version,
    about = "Battery cell simulation, identification and the staged controller-compromise study",
    arg_required_else_help = true
)]
struct Cli {
    /// TOML run configuration (built-in defaults when omitted)
    #[arg(long, value_name = "PATH", global = true)]
    config: Option<PathBuf>,
    /// Attack levels to run, replacing the configured list (comma separated)
    #[arg(long, value_name = "NAME", value_delimiter = ',', global = true)]
    level: Vec<String>,
    /// Output directory, replacing the configured one
    #[arg(long, value_name = "DIR", global = true)]
    out: Option<PathBuf>,
    /// Seed recorded in run fingerprints
    #[arg(long, value_name = "N", global = true)]
    seed: Option<u64>,
    /// Worker threads for multi-level runs (default: one per level, capped by the host)
    #[arg(long, value_name = "N", global = true)]
    jobs: Option<usize>,
    /// Progress details on stderr
    #[arg(long, short = 'v', global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the excitation protocol (slow sweep plus pulse train) and save its trajectories
    Simulate,
    /// Run excitation and identify capacity, OCV curve and resistance from it
    Identify,
    /// Run the full attack pipeline for every configured level
    Attack,
    /// Compare the fit gradients against finite differences on random scenarios
    VerifyGradients {
        /// Number of random scenarios
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Run the configured levels in memory and print the comparison table
    Compare,
}

fn main() -> ExitCode {
    // Die quietly like other pipeline tools when stdout is closed early
    // (e.g. piped into `head`) instead of panicking on the broken pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let config = match resolve_config(&cli) {
        Ok(config) => config,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let started = Instant::now();
    let outcome = match cli.command {
        Command::Simulate => cmd_simulate(&config, cli.verbose),
        Command::Identify => cmd_identify(&config, cli.verbose),
        Command::Attack => cmd_attack(&config, cli.jobs, cli.verbose),
        Command::VerifyGradients { seeds } => cmd_verify_gradients(seeds),
        Command::Compare => cmd_compare(&config, cli.jobs, cli.verbose),
    };
    match outcome {
        Ok(()) => {
            if cli.verbose {
                eprintln!("done in {:.1?}", started.elapsed());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Loads the configuration file (or the defaults), applies command-line
/// overrides and validates the result. Failures here are usage errors.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if !cli.level.is_empty() {
        config.attack.levels = cli.level.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Writes the canonical echo of the resolved configuration into the
/// output directory, creating it.
fn write_echo(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("config_echo.toml"),
        config.echo_toml()?,
    )?;
    Ok(())
}

fn write_traj(path: &Path, traj: &Trajectory) -> Result<()> {
    let file = fs::File::create(path)?;
    traj.to_csv(std::io::BufWriter::new(file), 0)
}

fn xy(xs: &[f64], ys: &[f64]) -> Vec<(f64, f64)> {
    xs.iter().copied().zip(ys.iter().copied()).collect()
}

fn indexed(ys: &[f64]) -> Vec<(f64, f64)> {
    ys.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect()
}

fn cmd_simulate(config: &RunConfig, verbose: bool) -> Result<()> {
    write_echo(config)?;
    if verbose {
        eprintln!("running the excitation protocol on the configured cell");
    }
    let record = run_excitation(&config.spm)?;
    let dir = &config.output_dir;
    write_traj(&dir.join("excitation_sweep.csv"), &record.sweep)?;
    write_traj(&dir.join("excitation_pulses.csv"), &record.pulses)?;
    fs::write(
        dir.join("sweep_voltage.svg"),
        line_chart(
            "Slow-sweep terminal voltage",
            "bulk soc",
            "voltage (V)",
            &[Series {
                label: "sweep".into(),
                points: xy(&record.sweep.soc_bulk, &record.sweep.voltages),
            }],
        ),
    )?;
    fs::write(
        dir.join("pulse_voltage.svg"),
        line_chart(
            "Pulse-train terminal voltage",
            "time (s)",
            "voltage (V)",
            &[Series {
                label: "pulses".into(),
                points: xy(&record.pulses.times, &record.pulses.voltages),
            }],
        ),
    )?;
    fs::write(
        dir.join("sweep_soc.svg"),
        line_chart(
            "Slow-sweep state of charge",
            "time (s)",
            "soc",
            &[
                Series {
                    label: "bulk".into(),
                    points: xy(&record.sweep.times, &record.sweep.soc_bulk),
                },
                Series {
                    label: "surface".into(),
                    points: xy(&record.sweep.times, &record.sweep.soc_surf),
                },
            ],
        ),
    )?;
    println!(
        "excitation complete: sweep {} samples, pulse train {} samples",
        record.sweep.len(),
        record.pulses.len()
    );
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn cmd_identify(config: &RunConfig, verbose: bool) -> Result<()> {
    write_echo(config)?;
    if verbose {
        eprintln!("running excitation before identification");
    }
    let record = run_excitation(&config.spm)?;
    let report = identify_from_records(&record, config.attack.area, OCV_FIT_DEGREE)?;
    let dir = &config.output_dir;
    fs::write(dir.join("identification.txt"), report.to_text())?;
    let params = report.to_params();
    let params_toml = toml::to_string_pretty(&params)
        .map_err(|e| Error::Config(format!("cannot serialize identified model: {e}")))?;
    fs::write(dir.join("rint.toml"), params_toml)?;

    let (soc_lo, soc_hi) = report.ocv.soc_range;
    let fitted: Vec<(f64, f64)> = (0..=200)
        .map(|i| {
            let soc = soc_lo + (soc_hi - soc_lo) * i as f64 / 200.0;
            (soc, report.ocv.ocv.eval(soc))
        })
        .collect();
    fs::write(
        dir.join("ocv_fit.svg"),
        line_chart(
            "OCV fit against the slow sweep",
            "soc",
            "voltage (V)",
            &[
                Series {
                    label: "sweep".into(),
                    points: xy(&record.sweep.soc_bulk, &record.sweep.voltages),
                },
                Series {
                    label: "fit".into(),
                    points: fitted,
                },
            ],
        ),
    )?;
    print!("{}", report.to_text());
    println!("artifacts in {}", dir.display());
    Ok(())
}

/// Runs the pipeline for each level on a small worker pool, keeping the
/// reports in level order. With `persist` set, each level writes its
/// artifacts under `<output_dir>/<level name>/`.
fn run_levels(
    config: &RunConfig,
    levels: &[AttackLevel],
    jobs: Option<usize>,
    verbose: bool,
    persist: bool,
) -> Result<Vec<AttackReport>> {
    let host = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let workers = jobs.unwrap_or(host).clamp(1, levels.len());
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<AttackReport>>>> =
        levels.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::Relaxed);
                if idx >= levels.len() {
                    break;
                }
                let level = levels[idx];
                let name = level.name();
                if verbose {
                    eprintln!("[{name}] pipeline started");
                }
                let started = Instant::now();
                let pipeline = config.to_pipeline(level);
                let dir = persist.then(|| config.output_dir.join(name));
                let result = run_dstab(&pipeline, dir.as_deref());
                if verbose {
                    eprintln!("[{name}] finished in {:.1?}", started.elapsed());
                }
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });
    let mut reports = Vec::with_capacity(levels.len());
    for (slot, level) in slots.into_iter().zip(levels) {
        match slot.into_inner().unwrap() {
            Some(Ok(report)) => reports.push(report),
            Some(Err(e)) => {
                eprintln!("level '{}' failed", level.name());
                return Err(e);
            }
            None => unreachable!("worker pool exited without a result"),
        }
    }
    Ok(reports)
}

fn write_level_charts(dir: &Path, report: &AttackReport) -> Result<()> {
    let compromised = satisfaction_margins(&report.compromised_traj, &report.level);
    let nominal = satisfaction_margins(&report.nominal_traj, &report.level);
    fs::write(
        dir.join("satisfaction_margin.svg"),
        line_chart(
            "Gap-condition margin (nonnegative samples satisfy it)",
            "plant sample",
            "margin",
            &[
                Series {
                    label: "compromised".into(),
                    points: indexed(&compromised),
                },
                Series {
                    label: "nominal".into(),
                    points: indexed(&nominal),
                },
            ],
        ),
    )?;
    fs::write(
        dir.join("soc.svg"),
        line_chart(
            "State of charge under both controllers",
            "time (s)",
            "soc",
            &[
                Series {
                    label: "compromised bulk".into(),
                    points: xy(&report.compromised_traj.times, &report.compromised_traj.soc_bulk),
                },
                Series {
                    label: "compromised surface".into(),
                    points: xy(&report.compromised_traj.times, &report.compromised_traj.soc_surf),
                },
                Series {
                    label: "nominal bulk".into(),
                    points: xy(&report.nominal_traj.times, &report.nominal_traj.soc_bulk),
                },
            ],
        ),
    )?;
    fs::write(
        dir.join("voltage.svg"),
        line_chart(
            "Terminal voltage under both controllers",
            "time (s)",
            "voltage (V)",
            &[
                Series {
                    label: "compromised".into(),
                    points: xy(&report.compromised_traj.times, &report.compromised_traj.voltages),
                },
                Series {
                    label: "nominal".into(),
                    points: xy(&report.nominal_traj.times, &report.nominal_traj.voltages),
                },
            ],
        ),
    )?;
    Ok(())
}

fn level_summary(report: &AttackReport) -> String {
    format!(
        "level {}: satisfied {}/{} samples (nominal {}), stealth violations {} (nominal {}), \
         theta* q = {:.4}, r = {:.4}",
        report.level.name(),
        report.satisfied_count,
        report.satisfaction.len(),
        report.nominal_satisfied_count,
        report.stealth_violations.len(),
        report.nominal_stealth_violations.len(),
        report.theta_star.q,
        report.theta_star.r,
    )
}

fn cmd_attack(config: &RunConfig, jobs: Option<usize>, verbose: bool) -> Result<()> {
    write_echo(config)?;
    let levels = config.resolve_levels()?;
    let reports = run_levels(config, &levels, jobs, verbose, true)?;
    for report in &reports {
        let dir = config.output_dir.join(report.level.name());
        write_level_charts(&dir, report)?;
        println!("{} — artifacts in {}", level_summary(report), dir.display());
    }
    if reports.len() >= 2 {
        let comparison = compare_levels(&reports)?;
        fs::write(config.output_dir.join("comparison.txt"), comparison.to_text())?;
        print!("{}", comparison.to_text());
    }
    Ok(())
}

fn cmd_compare(config: &RunConfig, jobs: Option<usize>, verbose: bool) -> Result<()> {
    let levels = config.resolve_levels()?;
    let reports = run_levels(config, &levels, jobs, verbose, false)?;
    if reports.len() == 1 {
        print!("{}", reports[0].to_text());
    } else {
        print!("{}", compare_levels(&reports)?.to_text());
    }
    Ok(())
}

fn cmd_verify_gradients(seeds: u64) -> Result<()> {
    if seeds == 0 {
        return Err(Error::BadInput("--seeds must be at least 1".into()));
    }
    println!(
        "{:<6} {:>12} {:>14} {:>10}",
        "seed", "loss", "rel_error", "fallbacks"
    );
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let (scenario, u_adv, theta) = dstab_core::sample_scenario(seed);
        let detail = gradient_detail(&theta, &u_adv, &scenario)?;
        let fd = fd_gradient(&theta, &u_adv, &scenario, 1e-6)?;
        let diff = ((detail.grad.0 - fd.0).powi(2) + (detail.grad.1 - fd.1).powi(2)).sqrt();
        let scale = (fd.0 * fd.0 + fd.1 * fd.1).sqrt().max(1e-12);
        let rel = diff / scale;
        worst = worst.max(rel);
        println!(
            "{:<6} {:>12.4e} {:>14.3e} {:>10}",
            seed,
            detail.loss,
            rel,
            detail.fallback_steps.len()
        );
    }
    if worst < 1e-4 {
        println!(
            "all {seeds} scenarios agree with finite differences (worst relative error {worst:.3e})"
        );
        Ok(())
    } else {
        Err(Error::Solver(format!(
            "gradient check failed: worst relative error {worst:.3e} exceeds 1e-4"
        )))
    }
}
