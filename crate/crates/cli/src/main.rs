//! `klio`: simulate datasets, run odometry through the service, score
//! trajectories.
//!
//! Exit codes: 0 success, 1 runtime failure (including more than 10% of
//! scans failing registration), 2 usage or configuration error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use klio_client::Client;
use klio_core::config::Config;
use klio_core::dataset_io::{
    read_dataset, read_newer_college_ground_truth, read_trajectory, write_dataset,
    write_odometry_log, write_ply, write_trajectory, PlyFormat,
};
use klio_core::eval::DEFAULT_MAX_DT;
use klio_core::pipeline::{merge_events, Event, PipelineOutput, StampedPose};
use klio_core::simulator::Scenario;
use tokio::net::TcpListener;

/// Largest tolerated share of scans without a registration update.
const MAX_FAILED_FRACTION: f64 = 0.1;

#[derive(Parser)]
#[command(name = "klio", version, about = "LiDAR-inertial odometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scenario file.
    Simulate {
        scenario: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run odometry over a dataset directory.
    Run {
        dataset: PathBuf,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Directory for trajectory.tum, map.ply and odometry.csv.
        #[arg(long, short, default_value = ".")]
        out: PathBuf,
        /// Service URL; an embedded service is started when absent.
        #[arg(long)]
        server: Option<String>,
        /// Write the map as ASCII PLY instead of binary.
        #[arg(long)]
        ascii_map: bool,
    },
    /// Score an estimated TUM trajectory against a reference.
    Eval {
        estimate: PathBuf,
        /// TUM file, or a Newer College style `.csv` ground truth.
        reference: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MAX_DT)]
        max_dt: f64,
        /// Also write per-pose errors as CSV.
        #[arg(long)]
        errors: Option<PathBuf>,
        #[arg(long)]
        server: Option<String>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
}

enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command).await {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// The error and its causes, skipping causes already quoted in the message.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !msg.contains(&text) {
            msg.push_str(": ");
            msg.push_str(&text);
        }
    }
    msg
}

async fn dispatch(command: Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Simulate { scenario, out } => simulate(&scenario, &out),
        Command::Run {
            dataset,
            config,
            out,
            server,
            ascii_map,
        } => {
            let config = match config {
                Some(path) => Config::from_file(&path)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?,
                None => Config::default(),
            };
            let format = if ascii_map {
                PlyFormat::Ascii
            } else {
                PlyFormat::BinaryLittleEndian
            };
            let client = connect(server).await?;
            Ok(run(&client, config, &dataset, &out, format).await?)
        }
        Command::Eval {
            estimate,
            reference,
            max_dt,
            errors,
            server,
        } => {
            if !(max_dt > 0.0 && max_dt.is_finite()) {
                return Err(CliError::Usage(format!(
                    "--max-dt must be positive, got {max_dt}"
                )));
            }
            let client = connect(server).await?;
            Ok(eval(&client, &estimate, &reference, max_dt, errors.as_deref()).await?)
        }
        Command::Serve { listen } => {
            let listener = TcpListener::bind(listen)
                .await
                .with_context(|| format!("cannot listen on {listen}"))?;
            println!(
                "listening on http://{}",
                listener.local_addr().map_err(anyhow::Error::from)?
            );
            klio_server::serve(listener)
                .await
                .map_err(anyhow::Error::from)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::DefaultConfig => {
            print!("{}", Config::default().to_commented_toml());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn simulate(scenario: &Path, out: &Path) -> Result<ExitCode, CliError> {
    let scenario = Scenario::from_file(scenario)
        .map_err(|e| CliError::Usage(format!("{}: {e}", scenario.display())))?;
    let data = scenario.generate();
    write_dataset(out, &data).map_err(anyhow::Error::from)?;
    println!(
        "wrote {} scans and {} IMU samples to {}",
        data.scans.len(),
        data.imu.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Uses the given service, or starts one in-process on a free local port.
async fn connect(server: Option<String>) -> anyhow::Result<Client> {
    if let Some(url) = server {
        return Ok(Client::new(url));
    }
    let listener = TcpListener::bind("127.0.0.1:0")
        .await
        .context("cannot start the embedded service")?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = klio_server::serve(listener).await {
            log::error!("embedded service stopped: {e}");
        }
    });
    Ok(Client::new(format!("http://{addr}")))
}

async fn run(
    client: &Client,
    config: Config,
    dataset: &Path,
    out: &Path,
    map_format: PlyFormat,
) -> anyhow::Result<ExitCode> {
    let data = read_dataset(dataset)?;
    let total = data.scans.len();
    if total == 0 {
        bail!("{} contains no scans", dataset.display());
    }
    let session = client
        .create_session(Some(config))
        .await
        .with_context(|| format!("cannot open a session on {}", client.base_url()))?;

    let mut pending = Vec::new();
    let mut skipped = 0;
    for event in merge_events(data.imu, data.scans) {
        match event {
            Event::Imu(sample) => pending.push(sample),
            Event::Scan(cloud) => {
                if !pending.is_empty() {
                    session.push_imu(std::mem::take(&mut pending)).await?;
                }
                if let Err(e) = session.push_scan(&cloud).await {
                    match e {
                        klio_client::ClientError::Service { .. } => {
                            log::warn!("scan at {} skipped: {e}", cloud.timestamp);
                            skipped += 1;
                        }
                        other => return Err(other.into()),
                    }
                }
            }
        }
    }
    let output = session.finalize().await?;
    write_outputs(&output, session.resolved_config(), out, map_format)?;
    session.close().await?;

    let failed = skipped
        + output
            .records
            .iter()
            .filter(|r| r.status.is_failure())
            .count();
    let keyframes = output
        .records
        .iter()
        .filter(|r| r.keyframe_inserted)
        .count();
    println!(
        "processed {total} scans: {failed} without update, {keyframes} keyframes, {} map points",
        output.map.len()
    );
    if let Some(truth) = &data.ground_truth {
        match client
            .evaluate(output.trajectory.clone(), truth.clone(), DEFAULT_MAX_DT)
            .await
        {
            Ok(report) => println!("APE RMSE {:.4} m over {} poses", report.rmse, report.pairs),
            Err(e) => log::warn!("evaluation against ground truth failed: {e}"),
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * total as f64 {
        eprintln!("error: {failed} of {total} scans failed registration");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn write_outputs(
    output: &PipelineOutput,
    resolved_config: &str,
    out: &Path,
    map_format: PlyFormat,
) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_trajectory(&output.trajectory, &out.join("trajectory.tum"))?;
    let map: Vec<_> = output.map.iter().map(|p| (*p, None)).collect();
    write_ply(&map, &out.join("map.ply"), map_format)?;
    write_odometry_log(&output.records, resolved_config, &out.join("odometry.csv"))?;
    Ok(())
}

fn read_poses(path: &Path) -> anyhow::Result<Vec<StampedPose>> {
    let csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    Ok(if csv {
        read_newer_college_ground_truth(path)?
    } else {
        read_trajectory(path)?
    })
}

async fn eval(
    client: &Client,
    estimate: &Path,
    reference: &Path,
    max_dt: f64,
    errors: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let est = read_poses(estimate)?;
    let reference = read_poses(reference)?;
    let report = client.evaluate(est, reference, max_dt).await?;
    print!("{}", report.to_text());
    if let Some(path) = errors {
        std::fs::write(path, report.errors_csv())
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}
