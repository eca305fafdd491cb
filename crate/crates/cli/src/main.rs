use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mlio::allan::allan_variance;
use mlio::config::{FusionMethod, RunConfig, SensorMask};
use mlio::eval::{comparison_table, evaluate, imu_rmse, pairs_csv, InertialRow, Pairing, Trajectory};
use mlio::io::{self, read_dataset, read_inertial_csv, read_series, read_tum, write_dataset, write_fused_csv, write_toml, write_tum};
use mlio::pipeline::{fuse_imu_streams, run_pipeline};
use mlio::sim::{presets, simulate, Scenario};
use mlio::sync::Mount;

#[derive(Parser)]
#[command(name = "mlio", version, about = "Multi-lidar, multi-IMU and GNSS state estimation")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate(SimulateArgs),
    /// Run the estimator on a dataset.
    Run(RunArgs),
    /// Compare estimated trajectories with ground truth.
    Eval(EvalArgs),
    /// Allan deviation of one inertial channel.
    Allan(AllanArgs),
    /// Fuse the IMU channels of a dataset into one base-frame stream.
    FuseImu(FuseArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// Bundled scenario: urban-loop, corridor or structured.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Truncate the scenario, seconds.
    #[arg(long)]
    max_duration: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sensor selection such as L4I4G1.
    #[arg(long)]
    sensors: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Arc length of the relative pose error, meters.
    #[arg(long)]
    rpe_distance: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairingArg {
    All,
    Disjoint,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth trajectory (TUM).
    #[arg(long)]
    gt: PathBuf,
    /// Estimate as LABEL=PATH or PATH; repeat to compare runs.
    #[arg(long, required = true)]
    est: Vec<String>,
    #[arg(long, default_value_t = mlio::eval::DEFAULT_RPE_DISTANCE)]
    rpe_distance: f64,
    #[arg(long, value_enum, default_value_t = PairingArg::All)]
    pairing: PairingArg,
    /// Directory for reports and per-pair CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllanArgs {
    /// CSV with one column, or an IMU file with a header.
    input: PathBuf,
    /// Column name (fx, wz, ...) or zero-based index.
    #[arg(long)]
    axis: Option<String>,
    /// Sample rate, Hz; taken from t_ns when absent.
    #[arg(long)]
    rate: Option<f64>,
    /// Output CSV of the curve.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mle,
    Average,
}

#[derive(Args)]
struct FuseArgs {
    /// Dataset directory written by `simulate`.
    #[arg(long)]
    dataset: PathBuf,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Mle)]
    method: MethodArg,
    /// Number of IMUs used, in mount order.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u8).range(1..=4))]
    imus: u8,
}

/// Error tagged with the process exit code.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<(), Failure>;

trait Tag<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Tag<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 1, err: e.into() })
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure { code: 2, err: e.into() })
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Allan(a) => cmd_allan(a),
        Command::FuseImu(a) => cmd_fuse(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let mut scenario = match (&a.scenario, &a.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string()).usage()?;
            Scenario::from_toml(&text).usage()?
        }
        (None, Some(name)) => presets::by_name(name).usage()?,
        (None, None) => return Err(anyhow!("--scenario or --preset is required")).usage(),
    };
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if let Some(d) = a.max_duration {
        if !(d > 0.0) {
            return Err(anyhow!("--max-duration must be positive")).usage();
        }
        scenario.max_duration = Some(d);
    }
    scenario.validate().usage()?;
    let ds = simulate(&scenario).data()?;
    write_dataset(&a.out, &ds).data()?;
    println!("wrote {} ({:.1} s, seed {})", a.out.display(), scenario.duration(), scenario.seed);
    Ok(())
}

fn cmd_run(a: RunArgs) -> CmdResult {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| path.display().to_string()).usage()?;
            RunConfig::from_toml(&text).usage()?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = a.sensors {
        cfg.sensors = s;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(d) = a.rpe_distance {
        cfg.rpe_distance = d;
    }
    cfg.dataset = a.dataset.or(cfg.dataset);
    cfg.out = a.out.or(cfg.out);
    cfg.validate().usage()?;
    let mask: SensorMask = cfg.mask().usage()?;
    let dataset = cfg.dataset.clone().ok_or_else(|| anyhow!("no dataset given")).usage()?;
    let out = cfg.out.clone().ok_or_else(|| anyhow!("no output directory given")).usage()?;
    if !dataset.is_dir() {
        return Err(anyhow!("dataset {} does not exist", dataset.display())).data();
    }

    let used = mask.lidars.max(mask.imus);
    let ds = read_dataset(&dataset, Some(&Mount::ALL[..used])).data()?;
    info!("running {mask} on {}", dataset.display());
    let result = run_pipeline(&cfg, &ds.rig, &ds.streams, ds.initial_yaw)
        .map_err(|e| Failure { code: e.exit_code() as u8, err: e.into() })?;

    fs::create_dir_all(&out).with_context(|| out.display().to_string()).data()?;
    write_tum(&out.join("est.tum"), &result.trajectory).data()?;
    write_toml(&out.join("counters.toml"), &result.counters).data()?;
    write_toml(&out.join("run.toml"), &cfg).data()?;
    write_fused_csv(&out.join("fused_imu.csv"), &result.fused_imu).data()?;
    println!("{} keyframes -> {}", result.trajectory.len(), out.join("est.tum").display());
    if let Some(gt) = ds.truth {
        let gt = Trajectory::new(gt).data()?;
        let est = Trajectory::new(result.trajectory).data()?;
        match evaluate(&gt, &est, cfg.rpe_distance, Pairing::All) {
            Ok((report, _)) => {
                print!("{}", comparison_table(&[(mask.to_string(), report.clone())]));
                write_toml(&out.join("metrics.toml"), &report).data()?;
            }
            Err(e) => eprintln!("warning: no metrics: {e}"),
        }
    }
    Ok(())
}

fn parse_est(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((label, path)) if !label.is_empty() => (label.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let label = p
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (label, p)
        }
    }
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    if !(a.rpe_distance > 0.0) {
        return Err(anyhow!("--rpe-distance must be positive")).usage();
    }
    let pairing = match a.pairing {
        PairingArg::All => Pairing::All,
        PairingArg::Disjoint => Pairing::Disjoint,
    };
    let gt = Trajectory::new(read_tum(&a.gt).data()?).data()?;
    let mut rows = Vec::new();
    for spec in &a.est {
        let (label, path) = parse_est(spec);
        let est = Trajectory::new(read_tum(&path).data()?).with_context(|| path.display().to_string()).data()?;
        let (report, rpe) = evaluate(&gt, &est, a.rpe_distance, pairing).with_context(|| label.clone()).data()?;
        if let Some(out) = &a.out {
            fs::create_dir_all(out).with_context(|| out.display().to_string()).data()?;
            write_toml(&out.join(format!("metrics_{label}.toml")), &report).data()?;
            let csv = out.join(format!("rpe_{label}.csv"));
            fs::write(&csv, pairs_csv(&rpe.pairs)).with_context(|| csv.display().to_string()).data()?;
        }
        rows.push((label, report));
    }
    let table = comparison_table(&rows);
    print!("{table}");
    if let Some(out) = &a.out {
        let path = out.join("table.txt");
        fs::write(&path, &table).with_context(|| path.display().to_string()).data()?;
    }
    Ok(())
}

fn sample_rate(stamps: Option<&[mlio::geometry::Timestamp]>, given: Option<f64>) -> anyhow::Result<f64> {
    if let Some(r) = given {
        if r > 0.0 {
            return Ok(r);
        }
        bail!("--rate must be positive");
    }
    let t = stamps.ok_or_else(|| anyhow!("no t_ns column; pass --rate"))?;
    if t.len() < 2 {
        bail!("too few samples to infer the rate");
    }
    let span = t[t.len() - 1].secs_since(t[0]);
    if !(span > 0.0) {
        bail!("stamps do not increase");
    }
    Ok((t.len() - 1) as f64 / span)
}

fn cmd_allan(a: AllanArgs) -> CmdResult {
    let (values, stamps) = read_series(&a.input, a.axis.as_deref()).data()?;
    let rate = match sample_rate(stamps.as_deref(), a.rate) {
        Ok(r) => r,
        Err(e) if a.rate.is_some() => return Err(e).usage(),
        Err(e) => return Err(e).data(),
    };
    let res = allan_variance(&values, rate).data()?;
    if let Some(out) = &a.out {
        let mut text = String::from("tau,sigma,terms\n");
        for p in &res.curve {
            text.push_str(&format!("{},{},{}\n", p.tau, p.sigma, p.terms));
        }
        fs::write(out, text).with_context(|| out.display().to_string()).data()?;
    }
    println!("samples: {} at {:.3} Hz", values.len(), rate);
    println!("white noise density N: {:.6e}", res.white_noise_density);
    println!("bias instability B: {:.6e}", res.bias_instability);
    Ok(())
}

fn cmd_fuse(a: FuseArgs) -> CmdResult {
    let mounts = &Mount::ALL[..a.imus as usize];
    let ds = read_dataset(&a.dataset, Some(mounts)).data()?;
    if ds.streams.imu.is_empty() {
        return Err(anyhow!("no IMU files in {}", a.dataset.display())).data();
    }
    let method = match a.method {
        MethodArg::Mle => FusionMethod::Mle,
        MethodArg::Average => FusionMethod::Average,
    };
    let fused = fuse_imu_streams(&ds.rig, &ds.streams.imu, method, &Default::default())
        .map_err(|e| Failure { code: 2, err: e.into() })?;
    write_fused_csv(&a.out, &fused).data()?;
    println!("{} fused samples -> {}", fused.len(), a.out.display());
    let gt_path = a.dataset.join(io::GT_IMU_FILE);
    if gt_path.exists() {
        report_rmse(&gt_path, &fused).data()?;
    }
    Ok(())
}

fn report_rmse(gt_path: &Path, fused: &[mlio::mimu::FusedImuSample]) -> anyhow::Result<()> {
    let gt: Vec<InertialRow> = read_inertial_csv(gt_path)?.into_iter().map(|b| (b.stamp, b.acc, b.gyro)).collect();
    let est: Vec<InertialRow> = fused.iter().map(|f| (f.stamp, f.acc, f.gyro)).collect();
    let (acc, gyro) = imu_rmse(&gt, &est)?;
    println!("RMSE vs ground truth: specific force {acc:.5} m/s², angular rate {gyro:.6} rad/s");
    Ok(())
}
