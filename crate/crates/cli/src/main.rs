//! `splat-lod`: build, inspect and benchmark LOD assets.
//!
//! Exit codes: 0 success, 1 internal invariant violation, 2 user or input
//! error (bad flags, unreadable or malformed inputs, invalid configuration).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;

use splat_lod::bench::{self, BenchOptions, RenderMode};
use splat_lod::io::asset::{write_asset_container, write_asset_dir};
use splat_lod::io::{read_asset, read_cameras_json, read_splat_ply, write_cameras_json, write_splat_ply};
use splat_lod::pipeline::{self, BuildConfig};
use splat_lod::raster::RasterConfig;
use splat_lod::synth::{self, DeepStreetConfig};
use splat_lod::threshold::CostModel;
use splat_lod::LodLevel;

#[derive(Parser)]
#[command(name = "splat-lod", version, about = "Level-of-detail compiler and reference renderer for Gaussian splat scenes")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every randomized step (k-means, view perturbation, fixtures).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search thresholds, build levels and chunks, and write an asset.
    BuildLod(BuildArgs),
    /// Run the threshold search alone and print the accepted thresholds.
    SearchThresholds(SearchArgs),
    /// Render one pose from an asset.
    Render(RenderArgs),
    /// Play a trajectory through each render mode and write a report.
    Bench(BenchArgs),
    /// Write the procedural street scene with its cameras and a trajectory.
    GenFixture(FixtureArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AssetFormat {
    Dir,
    Container,
}

#[derive(clap::Args)]
struct BuildArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    /// TOML build configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated depth thresholds; skips the search.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    max_levels: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    no_visibility_filter: bool,
    #[arg(long, value_enum, default_value = "dir")]
    format: AssetFormat,
    /// Also write the build report JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(clap::Args)]
struct SearchArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    cameras: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated candidate depths (default: log grid over scene depths).
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    max_levels: Option<usize>,
    /// Write the two-threshold cost surface as CSV.
    #[arg(long)]
    surface: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RenderArgs {
    /// Asset directory or container file.
    #[arg(long)]
    asset: PathBuf,
    /// "px,py,pz,qw,qx,qy,qz" with a world-to-camera quaternion.
    #[arg(long, allow_hyphen_values = true)]
    pose: String,
    #[arg(long, default_value = "full")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Per-tile binned counts as CSV.
    #[arg(long)]
    tile_counts: Option<PathBuf>,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    asset: PathBuf,
    /// CSV of time,px,py,pz,qw,qx,qy,qz rows, or a cameras JSON file.
    #[arg(long)]
    trajectory: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Comma-separated subset of full,lod,chunks,blend.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    /// Write the ablation table as Markdown.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(clap::Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML overrides for the street generator.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Frames in the generated walk-through trajectory.
    #[arg(long, default_value_t = 200)]
    trajectory_steps: usize,
}

/// Error raised by argument checking done after clap parsing.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invariant = err
        .chain()
        .any(|e| e.downcast_ref::<splat_lod::Error>().is_some_and(splat_lod::Error::is_invariant));
    if invariant {
        1
    } else {
        2
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("thread pool")?;
    }
    match cli.command {
        Command::BuildLod(a) => build_lod(a, cli.seed),
        Command::SearchThresholds(a) => search(a, cli.seed),
        Command::Render(a) => render(a),
        Command::Bench(a) => bench_cmd(a),
        Command::GenFixture(a) => gen_fixture(a, cli.seed),
    }
}

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<BuildConfig> {
    let mut cfg: BuildConfig = read_toml(path)?;
    if let Some(s) = seed {
        cfg.chunk.kmeans_seed = s;
        cfg.chunk.perturb_seed = s;
    }
    Ok(cfg)
}

fn load_inputs(scene: &Path, cameras: &Path) -> Result<(splat_lod::Scene, Vec<splat_lod::Camera>)> {
    let s = read_splat_ply(scene).with_context(|| format!("reading scene {}", scene.display()))?;
    let c = read_cameras_json(cameras).with_context(|| format!("reading cameras {}", cameras.display()))?;
    Ok((s, c))
}

fn build_lod(a: BuildArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    if let Some(t) = a.thresholds {
        cfg.thresholds = Some(t);
    }
    if let Some(m) = a.max_levels {
        cfg.search.max_levels = m;
    }
    if let Some(g) = a.gamma {
        cfg.lod.gamma = g;
    }
    if a.no_visibility_filter {
        cfg.visibility_filter = false;
    }
    let (scene, cameras) = load_inputs(&a.scene, &a.cameras)?;
    let out = pipeline::build(&scene, &cameras, &cfg)?;
    match a.format {
        AssetFormat::Dir => write_asset_dir(&a.out, &out.asset)?,
        AssetFormat::Container => write_asset_container(&a.out, &out.asset)?,
    }
    let report = serde_json::to_string_pretty(&out.report)?;
    if let Some(p) = &a.report {
        fs::write(p, &report).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&format!("{report}\n"))
}

fn search(a: SearchArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref(), seed)?;
    if let Some(g) = a.grid {
        if g.is_empty() {
            return Err(usage("--grid needs at least one depth"));
        }
        cfg.search.grid = Some(g);
    }
    if let Some(m) = a.max_levels {
        if m == 0 {
            return Err(usage("--max-levels must be >= 1"));
        }
        cfg.search.max_levels = m;
    }
    let (scene, cameras) = load_inputs(&a.scene, &a.cameras)?;
    pipeline::check_scene(&scene)?;
    let cfg = cfg.resolved(&cameras)?;
    let base = LodLevel::base(&scene);
    let (grid, result) = pipeline::search_thresholds(&base, &cameras, &cfg)?;
    if let Some(path) = &a.surface {
        let views: Vec<_> = cameras.iter().enumerate().step_by(cfg.search.view_stride).collect();
        let model = CostModel::with_view_subset(&base, views, &cameras, &cfg.lod)?;
        let surface = model.surface(&grid)?;
        let f = fs::File::create(path).with_context(|| format!("writing {}", path.display()))?;
        surface.write_csv(std::io::BufWriter::new(f))?;
    }
    let out = serde_json::json!({ "grid": grid, "thresholds": result.thresholds, "result": result });
    emit(&format!("{}\n", serde_json::to_string_pretty(&out)?))
}

fn render(a: RenderArgs) -> Result<()> {
    let mode: RenderMode = a.mode.parse()?;
    let pose = bench::parse_pose(&a.pose)?;
    let asset = read_asset(&a.asset).with_context(|| format!("reading asset {}", a.asset.display()))?;
    let cam = asset.render_camera(pose.position, pose.orientation);
    let out = bench::render_mode(&asset, mode, &cam, None, &RasterConfig::default())?;
    out.save_image(&a.out)?;
    if let Some(p) = &a.tile_counts {
        let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
        out.write_tile_counts_csv(std::io::BufWriter::new(f))?;
    }
    emit(&format!(
        "{}\n",
        serde_json::json!({
            "mode": mode.name(),
            "width": out.width,
            "height": out.height,
            "mean_tile_count": out.mean_tile_count(),
        })
    ))
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let asset = read_asset(&a.asset).with_context(|| format!("reading asset {}", a.asset.display()))?;
    let trajectory = bench::read_trajectory(&a.trajectory)
        .with_context(|| format!("reading trajectory {}", a.trajectory.display()))?;
    let mut opts = BenchOptions::default();
    if let Some(m) = &a.modes {
        opts.modes = m.iter().map(|s| s.parse()).collect::<splat_lod::Result<_>>()?;
        if opts.modes.is_empty() {
            return Err(usage("--modes is empty"));
        }
    }
    let report = bench::run_bench(&asset, &trajectory, &opts)?;
    fs::write(&a.report, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", a.report.display()))?;
    let table = report.ablation_markdown();
    if let Some(p) = &a.table {
        fs::write(p, &table).with_context(|| format!("writing {}", p.display()))?;
    }
    emit(&table)
}

fn gen_fixture(a: FixtureArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg: DeepStreetConfig = read_toml(a.config.as_deref())?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if cfg.n_cameras == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(usage("n_cameras, width and height must be positive"));
    }
    let fx = synth::deep_street(&cfg);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_splat_ply(&a.out.join("scene.ply"), &fx.scene)?;
    write_cameras_json(&a.out.join("cameras.json"), &fx.train_cameras)?;
    write_cameras_json(&a.out.join("test_cameras.json"), &fx.test_cameras)?;
    let cam = synth::street_camera(&cfg, Vector3::zeros());
    let traj = bench::straight_trajectory(
        Vector3::new(cfg.camera_x[0], 0.0, cfg.camera_height),
        Vector3::new(cfg.camera_x[1], 0.0, cfg.camera_height),
        cam.orientation,
        a.trajectory_steps,
    );
    fs::write(a.out.join("trajectory.csv"), bench::trajectory_csv(&traj))?;
    emit(&format!(
        "{}\n",
        serde_json::json!({
            "gaussians": fx.scene.len(),
            "train_cameras": fx.train_cameras.len(),
            "test_cameras": fx.test_cameras.len(),
            "trajectory_frames": traj.len(),
        })
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let inv: anyhow::Error = splat_lod::Error::Invariant("x".into()).in_stage("chunks").into();
        assert_eq!(exit_code(&inv), 1);
        let user: anyhow::Error = splat_lod::Error::InvalidArgument("x".into()).into();
        assert_eq!(exit_code(&user), 2);
        assert_eq!(exit_code(&usage("bad")), 2);
        let ctx = anyhow::Error::from(splat_lod::Error::Invariant("y".into())).context("while building");
        assert_eq!(exit_code(&ctx), 1);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
