use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use raceline::evolve::{train_with_progress, write_stats_csv};
use raceline::harness::{
    measure_planner_rate, render_replay, run_benchmark, run_closed_loop, RunConfig,
};
use raceline::policy::MlpPolicy;
use raceline::track::{generate_track, rasterize, GridMetadata, OccupancyGrid};
use raceline::trajectory::{export_dataset, oracle_generate};
use raceline::vehicle::BicycleState;

/// Racing-line synthesis: evolve a driving policy, plan with it, benchmark
/// closed-loop laps.
#[derive(Parser)]
#[command(name = "raceline", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (`key = value` lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a track (seeded by `--seed`) and write it as PGM plus a
    /// metadata sidecar.
    GenerateTrack {
        #[arg(long)]
        out: PathBuf,
        /// Track width in px.
        #[arg(long)]
        width: Option<f64>,
        /// Square grid side in px.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        knots: Option<usize>,
        #[arg(long)]
        jitter: Option<f64>,
    },
    /// Evolve a policy; writes policy.bin, stats.csv and run.cfg.
    Train {
        #[arg(long)]
        out: PathBuf,
    },
    /// One trajectory embedding from a pose on a PGM track.
    Plan {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        /// `x,y,yaw` in pixels and radians.
        #[arg(long, allow_hyphen_values = true)]
        pose: String,
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
    },
    /// Closed-loop lap benchmark on held-out tracks; writes a CSV report.
    Benchmark {
        #[arg(long)]
        policy: PathBuf,
        /// Comma-separated track seeds; defaults to `bench.track_seeds`.
        #[arg(long)]
        tracks: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export (grid crop, embedding) pairs with a manifest.
    ExportDataset {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        seeds: String,
        #[arg(long, default_value_t = 500)]
        per_track: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive one benchmark track and render the run as a PPM overlay.
    Replay {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        track_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Median rate of the sense, forward, plan pipeline.
    Rate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, default_value_t = 1000)]
        reps: usize,
        #[arg(long, default_value_t = 101)]
        track_seed: u64,
    },
}

/// Bad arguments or config (exit 1) versus a run that failed (exit 2).
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    Ok(cfg)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|t| t.trim().parse::<u64>().with_context(|| format!("bad seed {t:?}")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("no seeds given");
    }
    Ok(seeds)
}

fn parse_pose(s: &str, speed: f64) -> Result<BicycleState> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad pose {s:?}"))?;
    let [x, y, yaw] = v[..] else {
        bail!("pose needs x,y,yaw");
    };
    if !(x.is_finite() && y.is_finite() && yaw.is_finite() && speed.is_finite() && speed >= 0.0) {
        bail!("pose and speed must be finite, speed non-negative");
    }
    Ok(BicycleState {
        v: speed,
        ..BicycleState::at_rest(raceline::geometry::Point2::new(x, y), yaw)
    })
}

fn load_policy(path: &Path) -> Result<MlpPolicy> {
    MlpPolicy::load(path).with_context(|| format!("loading policy {}", path.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.common).map_err(Failure::Usage)?;
    match cli.command {
        Command::GenerateTrack {
            out,
            width,
            size,
            knots,
            jitter,
        } => {
            let mut params = cfg.track.clone();
            params.width = width.unwrap_or(params.width);
            params.grid_size = size.map_or(params.grid_size, |n| (n, n));
            params.n_knots = knots.unwrap_or(params.n_knots);
            params.jitter = jitter.unwrap_or(params.jitter);
            params.validate().map_err(|e| Failure::Usage(e.into()))?;
            let spec = generate_track(cfg.master_seed, &params)?;
            let grid = rasterize(&spec);
            create_parent(&out)?;
            grid.write_pgm(&out, &GridMetadata::for_track(&spec))?;
            let (p, h) = spec.start_pose();
            println!(
                "wrote {} ({}x{}, start {:.1},{:.1} heading {:.4})",
                out.display(),
                grid.cols(),
                grid.rows(),
                p.x,
                p.y,
                h
            );
        }
        Command::Train { out } => {
            let evo = cfg.evolution_config();
            fs::create_dir_all(&out)?;
            let outcome = train_with_progress(&evo, &cfg.env(), &cfg.track, |s| {
                info!(
                    "generation {:>4}: best {:.2}, survivors {:.2}, population {:.2}",
                    s.generation, s.best_fitness, s.mean_survivor_fitness, s.mean_population_fitness
                );
            })?;
            outcome.best.save(&out.join("policy.bin"))?;
            write_stats_csv(&outcome.stats, fs::File::create(out.join("stats.csv"))?)?;
            fs::write(out.join("run.cfg"), cfg.to_text())?;
            println!(
                "best fitness {:.3} after {} generations; wrote {}",
                outcome.best_fitness,
                outcome.stats.len(),
                out.display()
            );
        }
        Command::Plan {
            policy,
            grid,
            pose,
            speed,
        } => {
            let pose = parse_pose(&pose, speed).map_err(Failure::Usage)?;
            let policy = load_policy(&policy)?;
            let (mut grid, meta) = OccupancyGrid::read_pgm(&grid)
                .with_context(|| format!("reading grid {}", grid.display()))?;
            if meta.is_none() {
                // Without a sidecar, assume the configured scale.
                grid = OccupancyGrid::new(
                    grid.rows(),
                    grid.cols(),
                    grid.cells().to_vec(),
                    cfg.track.px_per_meter,
                )
                .map_err(|e| anyhow!(e))?;
            }
            let e = oracle_generate(&policy, &grid, &pose, &cfg.env(), cfg.dt(), &cfg.embedding)?;
            let xs: Vec<String> = e.xs.iter().map(|x| format!("{x:.6}")).collect();
            println!("{}", xs.join(","));
        }
        Command::Benchmark {
            policy,
            tracks,
            out,
        } => {
            let seeds = match tracks {
                Some(s) => parse_seeds(&s).map_err(Failure::Usage)?,
                None => cfg.bench_seeds.clone(),
            };
            let policy = load_policy(&policy)?;
            let report = run_benchmark(&policy, &seeds, &cfg)?;
            create_parent(&out)?;
            report.write_csv(fs::File::create(&out)?)?;
            for r in report.rows.iter().chain([&report.aggregate]) {
                let label = r.track_seed.map_or("aggregate".into(), |s| s.to_string());
                println!(
                    "{label:>10}  laps {}  lap avg {}  first failure {}  distance {:.1}",
                    r.successful_laps,
                    r.t_lap_avg.map_or("-".into(), |t| format!("{t:.2} s")),
                    r.t_first_failure.map_or("-".into(), |t| format!("{t:.2} s")),
                    r.distance_covered
                );
            }
            if report.all_failed() {
                return Err(Failure::Run(anyhow!("every track failed")));
            }
        }
        Command::ExportDataset {
            policy,
            seeds,
            per_track,
            out,
        } => {
            let seeds = parse_seeds(&seeds).map_err(Failure::Usage)?;
            let policy = load_policy(&policy)?;
            let manifest = export_dataset(&policy, &seeds, per_track, &out, &cfg.export_config())?;
            println!(
                "exported {} samples ({} skipped) to {}",
                manifest.rows.len(),
                manifest.skipped,
                out.display()
            );
        }
        Command::Replay {
            policy,
            track_seed,
            out,
        } => {
            let policy = load_policy(&policy)?;
            let spec = generate_track(track_seed, &cfg.bench_track_params())?;
            let grid = rasterize(&spec);
            let (row, log) = run_closed_loop(&policy, &grid, &spec, &cfg)?;
            create_parent(&out)?;
            let (img, csv) = render_replay(&log, &grid, &out)?;
            println!(
                "laps {}, first failure {}; wrote {} and {}",
                row.successful_laps,
                row.t_first_failure.map_or("-".into(), |t| format!("{t:.2} s")),
                img.display(),
                csv.display()
            );
        }
        Command::Rate {
            policy,
            reps,
            track_seed,
        } => {
            if reps < 100 {
                return Err(Failure::Usage(anyhow!("--reps must be at least 100")));
            }
            let policy = load_policy(&policy)?;
            let spec = generate_track(track_seed, &cfg.bench_track_params())?;
            let grid = rasterize(&spec);
            let line = spec.centerline();
            let poses: Vec<BicycleState> = line
                .arc_samples(line.length() / 50.0)
                .into_iter()
                .map(|s| BicycleState::at_rest(s.point, s.heading))
                .collect();
            // Single-threaded by construction: one plan at a time.
            let rate = measure_planner_rate(&policy, &grid, &poses, reps, &cfg)?;
            println!("{rate:.1} plans/s (median of {reps})");
        }
    }
    Ok(())
}
