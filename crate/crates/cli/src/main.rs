//! `tabv`: planning runs, closed-loop tracking and benchmark suites.

use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tabv_core::bench::{
    equilibria, forest_suite, goals_course_suite, indi_ab, lemniscate_run, EquilibriaConfig, ForestSuiteConfig,
    GoalsCourseConfig, IndiAbConfig, LemniscateConfig, SUITES,
};
use tabv_core::dynamics::Mode;
use tabv_core::error::{Error, SimError};
use tabv_core::flatness::FlatOutput;
use tabv_core::minco::MincoTrajectory;
use tabv_core::pipeline::{reference_track, sequence};
use tabv_core::scenario::{parse_config, Scenario, Task};
use tabv_core::sim::{RunStatus, SimRun};

#[derive(Parser)]
#[command(name = "tabv", version, about = "Plan and track trajectories for a wheeled quadrotor that drives and flies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search and optimize the legs of a navigate task.
    Plan {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the closed loop on the scenario's task.
    Track {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Legs written by `plan`; planned afresh when omitted.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Run a benchmark suite.
    Benchmark {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(SUITES))]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        /// Suite configuration overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// First seed of the suite.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of seeds, for suites that run several.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rasterize the scenario's world and write it as a grid file.
    World {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Error with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

const PLANNING: u8 = 2;
const DIVERGED: u8 = 3;
const CONFIG: u8 = 4;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Search(_) | Error::Optimize(_) | Error::Trajectory(_) | Error::Flatness(_) => PLANNING,
            Error::Sim(SimError::Diverged { .. }) => DIVERGED,
            Error::Config(_) | Error::Map(_) | Error::Dynamics(_) | Error::Control(_) | Error::Sim(_) => CONFIG,
            Error::Io(_) => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: 1, message: format!("{}: {e}", path.display()) }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_failure(path, e))?;
    fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario, Failure> {
    let scenario = Scenario::load(path)?;
    Ok(match seed {
        Some(s) => scenario.with_seed(s),
        None => scenario,
    })
}

fn prepare_out(out: &Path) -> Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| io_failure(out, e))
}

fn cmd_plan(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let scenario = load_scenario(config, seed)?;
    prepare_out(out)?;
    write_json(&out.join("config.json"), &scenario)?;
    let world = scenario.build_world()?;
    let legs = scenario.plan(&world)?;

    let trajectories: Vec<&MincoTrajectory> = legs.iter().map(|l| &l.optimized.trajectory).collect();
    write_json(&out.join("trajectory.json"), &trajectories)?;
    write_json(&out.join("legs.json"), &legs)?;

    let costs_path = out.join("costs.csv");
    let mut costs = csv::Writer::from_path(&costs_path).map_err(|e| io_failure(&costs_path, e))?;
    costs
        .write_record(["leg", "iteration", "total", "time", "state", "collision", "nonholonomic"])
        .map_err(|e| io_failure(&costs_path, e))?;
    for (i, leg) in legs.iter().enumerate() {
        for l in &leg.optimized.log {
            costs
                .write_record([
                    i.to_string(),
                    l.iteration.to_string(),
                    l.total.to_string(),
                    l.time.to_string(),
                    l.state.to_string(),
                    l.collision.to_string(),
                    l.nonholonomic.to_string(),
                ])
                .map_err(|e| io_failure(&costs_path, e))?;
        }
    }
    costs.flush()?;

    let seq = sequence(&legs);
    let heading = match &scenario.task {
        Task::Navigate { start, .. } => start.heading.unwrap_or(0.0),
        _ => 0.0,
    };
    let dt = match &scenario.task {
        Task::Navigate { reference_dt, .. } => *reference_dt,
        _ => 0.07,
    };
    let track = reference_track(&seq, dt, heading, &scenario.params)?;
    let ref_path = out.join("reference.csv");
    track.write_csv(File::create(&ref_path).map_err(|e| io_failure(&ref_path, e))?).map_err(|e| io_failure(&ref_path, e))?;

    let success = legs.iter().all(|l| l.optimized.success);
    let aerial_pieces: usize = legs.iter().map(|l| l.optimized.trajectory.modes.iter().filter(|m| **m == Mode::Aerial).count()).sum();
    let summary = json!({
        "success": success,
        "legs": legs.len(),
        "duration": seq.duration(),
        "arrival_times": seq.arrival_times(),
        "aerial_pieces": aerial_pieces,
        "front_end_ms": legs.iter().map(|l| l.search.elapsed_ms).collect::<Vec<_>>(),
        "back_end_ms": legs.iter().map(|l| l.optimized.wall_time_ms).collect::<Vec<_>>(),
        "costs": legs.iter().map(|l| &l.optimized.costs).collect::<Vec<_>>(),
    });
    write_json(&out.join("plan.json"), &summary)?;
    println!(
        "planned {} leg(s), {:.2} s, {} aerial piece(s), success {}",
        legs.len(),
        seq.duration(),
        aerial_pieces,
        success
    );
    if success {
        Ok(())
    } else {
        Err(Failure { code: PLANNING, message: "optimized trajectory violates its penalties (see plan.json)".into() })
    }
}

fn write_run(out: &Path, run: &SimRun) -> Result<(), Failure> {
    let log_path = out.join("log.csv");
    run.write_log(BufWriter::new(File::create(&log_path).map_err(|e| io_failure(&log_path, e))?))
        .map_err(|e| io_failure(&log_path, e))?;
    write_json(&out.join("metrics.json"), &json!({ "run": &run.status, "metrics": &run.metrics }))
}

fn cmd_track(config: &Path, out: &Path, seed: Option<u64>, trajectory: Option<&Path>) -> Result<(), Failure> {
    let scenario = load_scenario(config, seed)?;
    let legs: Option<Vec<MincoTrajectory>> = match trajectory {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure { code: CONFIG, message: format!("{}: {e}", p.display()) })?;
            Some(parse_config(&text)?)
        }
        None => None,
    };
    prepare_out(out)?;
    write_json(&out.join("config.json"), &scenario)?;
    let world = scenario.build_world()?;
    let run = scenario.track(&world, legs)?;
    write_run(out, &run)?;
    let m = &run.metrics;
    println!(
        "rmse {:.4} m, max error {:.4} m, mode switches {}, saturation {:.3}, solve p50 {:.2} ms p99 {:.2} ms",
        m.rmse_position, m.max_position_error, m.mode_switches, m.saturation_fraction, m.solve_time_p50_ms, m.solve_time_p99_ms
    );
    match run.divergence() {
        Some(e) => Err(Failure { code: DIVERGED, message: e.to_string() }),
        None => Ok(()),
    }
}

fn suite_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure { code: CONFIG, message: format!("{}: {e}", p.display()) })?;
            Ok(parse_config(&text)?)
        }
        None => Ok(T::default()),
    }
}

fn status_label(s: &RunStatus) -> String {
    match s {
        RunStatus::Completed => "completed".into(),
        RunStatus::Diverged { time, .. } => format!("diverged at {time:.2} s"),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_benchmark(
    suite: &str,
    out: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    seeds: Option<usize>,
    jobs: usize,
) -> Result<(), Failure> {
    prepare_out(out)?;
    let mut text = String::new();
    match suite {
        "forest-500" => {
            let mut cfg: ForestSuiteConfig = suite_config(config)?;
            if let Some(s) = seed {
                cfg.first_seed = s;
            }
            if let Some(n) = seeds {
                cfg.seeds = n;
            }
            write_json(&out.join("config.json"), &cfg)?;
            let r = forest_suite(&cfg, jobs)?;
            write_json(&out.join("report.json"), &r)?;
            let _ = writeln!(text, "forest: {}/{} succeeded ({:.1}%)", r.successes, r.runs, 100.0 * r.success_rate);
            let _ = writeln!(text, "mean trajectory length {:.1} m (target 76.8 m)", r.mean_length);
            let _ = writeln!(
                text,
                "front end mean {:.1} ms p95 {:.1} ms; back end mean {:.1} ms p95 {:.1} ms",
                r.mean_front_end_ms, r.p95_front_end_ms, r.mean_back_end_ms, r.p95_back_end_ms
            );
            for f in r.results.iter().filter(|f| !f.success) {
                let _ = writeln!(text, "  seed {}: {}", f.seed, f.error.as_deref().unwrap_or("failed"));
            }
        }
        "goals-course" => {
            let mut cfg: GoalsCourseConfig = suite_config(config)?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            write_json(&out.join("config.json"), &cfg)?;
            let r = goals_course_suite(&cfg)?;
            write_json(&out.join("report.json"), &r)?;
            for (name, c) in [("nominal", &r.nominal), ("without nonholonomy", &r.without_nonholonomy)] {
                let _ = writeln!(text, "{name} (lambda {:?}): all goals reached {}", c.lambda, c.all_reached);
                if let Some(e) = &c.plan_error {
                    let _ = writeln!(text, "  planning failed: {e}");
                }
                if let (Some(s), Some(m)) = (&c.status, &c.metrics) {
                    let _ = writeln!(
                        text,
                        "  {}; rmse {:.3} m; max reference lateral velocity on ground {:.3} m/s",
                        status_label(s),
                        m.rmse_position,
                        m.max_ground_reference_lateral_velocity
                    );
                }
                for (i, g) in c.goals.iter().enumerate() {
                    let _ = writeln!(
                        text,
                        "  goal {}: t {:.2} s, position error {:.3} m, heading error {:.3} rad, reached {}",
                        i + 1,
                        g.arrival_time,
                        g.position_error,
                        g.heading_error,
                        g.reached
                    );
                }
            }
        }
        "lemniscate-2d" | "lemniscate-3d" => {
            let default = if suite == "lemniscate-2d" { LemniscateConfig::planar() } else { LemniscateConfig::hybrid() };
            let mut cfg = match config {
                Some(_) => suite_config(config)?,
                None => default,
            };
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            write_json(&out.join("config.json"), &cfg)?;
            let (r, run) = lemniscate_run(&cfg)?;
            write_run(out, &run)?;
            write_json(&out.join("report.json"), &r)?;
            let m = &r.metrics;
            let _ = writeln!(text, "peak speed {:.2} m/s, peak acceleration {:.2} m/s^2", r.peak_speed, r.peak_acceleration);
            let _ = writeln!(text, "{}; rmse {:.4} m, max error {:.4} m", status_label(&r.status), m.rmse_position, m.max_position_error);
            if let (Some(g), Some(a)) = (m.rmse_terrestrial, m.rmse_aerial) {
                let _ = writeln!(text, "rmse on ground {g:.4} m, in the air {a:.4} m");
            }
            let _ = writeln!(
                text,
                "max |v_z| near transitions {:.3} m/s; largest position step {:.4} m",
                r.max_transition_vertical_speed, r.max_position_step
            );
            let _ = writeln!(text, "solve time p50 {:.2} ms p99 {:.2} ms", m.solve_time_p50_ms, m.solve_time_p99_ms);
        }
        "indi-ab" => {
            let mut cfg: IndiAbConfig = suite_config(config)?;
            if seed.is_some() || seeds.is_some() {
                let first = seed.unwrap_or(0);
                cfg.seeds = (first..first + seeds.unwrap_or(cfg.seeds.len()) as u64).collect();
            }
            write_json(&out.join("config.json"), &cfg)?;
            let r = indi_ab(&cfg, jobs)?;
            write_json(&out.join("report.json"), &r)?;
            for p in &r.pairs {
                let _ = writeln!(
                    text,
                    "seed {}: rmse with {:.5} m, without {:.5} m, ratio {:.3}, estimate {:?} (error {:.2}%)",
                    p.seed,
                    p.rmse_with,
                    p.rmse_without,
                    p.ratio,
                    p.estimate,
                    100.0 * p.estimate_error
                );
            }
            let _ = writeln!(text, "worst ratio {:.3}, worst estimate error {:.2}%", r.worst_ratio, 100.0 * r.worst_estimate_error);
        }
        "equilibria" => {
            let mut cfg: EquilibriaConfig = suite_config(config)?;
            if let Some(s) = seed {
                cfg.sim.seed = s;
            }
            write_json(&out.join("config.json"), &cfg)?;
            let r = equilibria(&cfg)?;
            write_json(&out.join("report.json"), &r)?;
            for e in &r {
                let _ = writeln!(
                    text,
                    "{}: max input error {:.2e}, max drift {:.2e} m, completed {}",
                    e.name, e.max_input_error, e.max_position_drift, e.completed
                );
            }
        }
        other => return Err(Failure { code: CONFIG, message: format!("unknown suite {other}") }),
    }
    fs::write(out.join("summary.txt"), &text).map_err(|e| io_failure(out, e))?;
    print!("{text}");
    Ok(())
}

fn cmd_world(config: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let scenario = load_scenario(config, seed)?;
    prepare_out(out)?;
    let world = scenario.build_world()?;
    let source = serde_json::to_value(&scenario.world).map_err(|e| io_failure(out, e))?;
    world.save(&out.join("world.grid"), &source).map_err(Error::from)?;
    let ([x0, y0], [x1, y1]) = world.bounds();
    println!("world [{x0:.1}, {x1:.1}] x [{y0:.1}, {y1:.1}] written to {}", out.join("world.grid").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Plan { config, out, seed } => cmd_plan(config, out, *seed),
        Command::Track { config, out, seed, trajectory } => cmd_track(config, out, *seed, trajectory.as_deref()),
        Command::Benchmark { suite, out, config, seed, seeds, jobs } => {
            cmd_benchmark(suite, out, config.as_deref(), *seed, *seeds, *jobs)
        }
        Command::World { config, out, seed } => cmd_world(config, out, *seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
