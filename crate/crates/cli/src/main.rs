use std::io::IsTerminal;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fvv_cli::{load_config, Config, Resolution, CONFIG_ENV};
use fvv_core::dataset::{load_dataset, render_dataset};
use fvv_core::depth_codec::{read_depth_dump, write_depth_dump};
use fvv_core::frame::write_color_dump;
use fvv_core::scene_sim::{ArcRigSpec, RenderedView, Scene};
use fvv_core::selection::select;
use fvv_core::sync::TimedFrame;
use fvv_core::synthesis::{synthesize_refs, BackgroundModel};
use fvv_core::transport::viewpoint_camera;
use fvv_core::{pack_depth, unpack_depth, CameraId, DepthMap, Rig};
use fvv_server::bench::{self, BenchConfig};
use fvv_server::capture::{CaptureConfig, CaptureNode};
use fvv_server::pipeline::encode_png;
use fvv_server::SystemClock;
use tracing::info;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "fvv", version, about = "Live free-viewpoint video pipeline tools")]
struct Cli {
    /// Config file (TOML). Falls back to $FVV_CONFIG.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log filter, e.g. "debug" or "fvv_server=debug".
    #[arg(long, global = true)]
    log_level: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the edge server.
    Serve(ServeArgs),
    /// Run simulated capture nodes against a server.
    CaptureSim(CaptureArgs),
    /// Synthesize one virtual view offline from a dataset.
    Synthesize(SynthesizeArgs),
    /// Convert a 16-bit PGM of depth codes to a packed depth dump.
    PackDepth(PackArgs),
    /// Convert a packed depth dump back to a 16-bit PGM.
    UnpackDepth(UnpackArgs),
    /// Render the synthetic scene from every rig camera to a dataset.
    RenderDataset(RenderArgs),
    /// Time the pipeline stages in-process.
    Bench(BenchArgs),
}

#[derive(Args, Default)]
struct ServerFlags {
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    background: Option<PathBuf>,
    /// Tick period, µs.
    #[arg(long)]
    period: Option<u64>,
    /// Assembly tolerance, µs.
    #[arg(long)]
    tolerance: Option<u64>,
    #[arg(long)]
    max_staleness: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    hysteresis: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// nearest | square2x2
    #[arg(long)]
    splat: Option<String>,
    /// raw | png
    #[arg(long)]
    output: Option<String>,
    /// realtime | lockstep
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Default)]
struct PortFlags {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    media_port: Option<u16>,
    #[arg(long)]
    control_port: Option<u16>,
    #[arg(long)]
    bridge_port: Option<u16>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    server: ServerFlags,
    #[command(flatten)]
    ports: PortFlags,
    /// Disable the WebSocket bridge.
    #[arg(long)]
    no_bridge: bool,
    /// Stop after this many seconds and print the stats table.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    scene: Option<String>,
    /// Server host.
    #[arg(long)]
    server: Option<String>,
    /// Camera ids: an inclusive range "0..8" or a list "0,2,5".
    #[arg(long, default_value = "0..8")]
    cameras: String,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    media_port: Option<u16>,
    #[arg(long)]
    control_port: Option<u16>,
    /// Frames per camera; unlimited when absent.
    #[arg(long)]
    frames: Option<u64>,
    /// realtime | fast
    #[arg(long)]
    pacing: Option<String>,
    /// Capture jitter, ±µs.
    #[arg(long)]
    jitter: Option<u64>,
    /// Probability of dropping a frame.
    #[arg(long)]
    loss: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    period: Option<u64>,
    /// Deflate payloads.
    #[arg(long)]
    compress: bool,
}

#[derive(Debug, Clone)]
struct Pose(Vec<f64>);

fn parse_pose(s: &str) -> Result<Pose, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("{t:?} is not a number")))
        .collect::<Result<_, _>>()
        .map(Pose)
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// 12 pose values (row-major R, then t) and 6 intrinsics
    /// (fx, fy, cx, cy, width, height), comma or space separated.
    #[arg(long, allow_hyphen_values = true, value_parser = parse_pose)]
    pose: Pose,
    /// Output image: .png or .fvvc (I420 dump).
    #[arg(long)]
    out: PathBuf,
    /// Dataset tick; the first one when absent.
    #[arg(long)]
    tick: Option<u32>,
    #[command(flatten)]
    server: ServerFlags,
}

#[derive(Args)]
struct PackArgs {
    /// 16-bit PGM of depth codes.
    #[arg(long)]
    input: PathBuf,
    /// Packed depth dump (.fvvd).
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame_index: u32,
}

#[derive(Args)]
struct UnpackArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    scene: Option<String>,
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// WIDTHxHEIGHT of every camera.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    period: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// WIDTHxHEIGHT.
    #[arg(long)]
    resolution: Option<String>,
    #[arg(long)]
    ticks: Option<u64>,
    #[arg(long)]
    scene: Option<String>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    #[command(flatten)]
    server: ServerFlags,
}

/// Flag values as config keys, so they merge over the file.
#[derive(Default)]
struct Flags(toml::Table);

impl Flags {
    fn set(&mut self, key: &str, value: Option<impl Into<toml::Value>>) -> &mut Self {
        if let Some(v) = value {
            self.0.insert(key.to_string(), v.into());
        }
        self
    }

    fn set_u64(&mut self, key: &str, value: Option<u64>) -> &mut Self {
        self.set(key, value.map(|v| v as i64))
    }

    fn set_path(&mut self, key: &str, value: &Option<PathBuf>) -> &mut Self {
        self.set(key, value.as_ref().map(|p| p.display().to_string()))
    }

    fn server(&mut self, f: &ServerFlags) -> &mut Self {
        self.set_path("calibration", &f.calibration)
            .set_path("background", &f.background)
            .set_u64("period", f.period)
            .set_u64("tolerance", f.tolerance)
            .set("max_staleness", f.max_staleness.map(i64::from))
            .set("lambda", f.lambda)
            .set("hysteresis", f.hysteresis)
            .set("epsilon", f.epsilon)
            .set("splat", f.splat.clone())
            .set("output", f.output.clone())
            .set("mode", f.mode.clone())
    }

    fn ports(&mut self, f: &PortFlags) -> &mut Self {
        self.set("bind", f.bind.clone())
            .set("media_port", f.media_port.map(i64::from))
            .set("control_port", f.control_port.map(i64::from))
            .set("bridge_port", f.bridge_port.map(i64::from))
    }
}

fn command_flags(cli: &Cli) -> Flags {
    let mut f = Flags::default();
    f.set("log_level", cli.log_level.clone());
    match &cli.command {
        Command::Serve(a) => {
            f.server(&a.server).ports(&a.ports);
            if a.no_bridge {
                f.set("bridge", Some(false));
            }
        }
        Command::CaptureSim(a) => {
            f.set("scene", a.scene.clone())
                .set("server", a.server.clone())
                .set_path("calibration", &a.calibration)
                .set("media_port", a.media_port.map(i64::from))
                .set("control_port", a.control_port.map(i64::from))
                .set("pacing", a.pacing.clone())
                .set_u64("jitter", a.jitter)
                .set("loss", a.loss)
                .set_u64("seed", a.seed)
                .set_u64("period", a.period);
            if a.compress {
                f.set("compress", Some(true));
            }
        }
        Command::Synthesize(a) => {
            f.server(&a.server).set_path("dataset", &a.dataset);
        }
        Command::RenderDataset(a) => {
            f.set("scene", a.scene.clone())
                .set_u64("ticks", a.ticks)
                .set_path("dataset", &a.out)
                .set("resolution", a.resolution.clone())
                .set_u64("period", a.period);
        }
        Command::Bench(a) => {
            f.server(&a.server)
                .set("resolution", a.resolution.clone())
                .set_u64("ticks", a.ticks)
                .set("scene", a.scene.clone());
        }
        Command::PackDepth(_) | Command::UnpackDepth(_) => {}
    }
    f
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                // --help and --version
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("{}", first.trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let flags = command_flags(&cli);
    let env_path = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
    let config = load_config(cli.config.as_deref(), env_path.as_deref(), &flags.0)?;
    init_logging(&config.log_level)?;
    match cli.command {
        Command::Serve(a) => serve(&config, a.duration),
        Command::CaptureSim(a) => capture_sim(&config, &a.cameras, a.frames),
        Command::Synthesize(a) => synthesize(&config, &a.pose.0, &a.out, a.tick),
        Command::PackDepth(a) => pack(&a.input, &a.output, a.frame_index),
        Command::UnpackDepth(a) => unpack(&a.input, &a.output),
        Command::RenderDataset(_) => render(&config),
        Command::Bench(a) => run_bench(&config, a.json),
    }
}

fn init_logging(level: &str) -> Result<()> {
    let filter = match std::env::var("RUST_LOG") {
        Ok(v) if !v.is_empty() => EnvFilter::try_new(v),
        _ => EnvFilter::try_new(level),
    }
    .with_context(|| format!("bad log filter {level:?}"))?;
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::stderr().is_terminal())
        .try_init()
        .map_err(|e| anyhow::anyhow!("logging setup failed: {e}"))
}

fn serve(config: &Config, duration: Option<f64>) -> Result<()> {
    let server_config = config.server_config()?;
    let (rig, background) = server_config.load_assets()?;
    let handle = fvv_server::start(&server_config, rig, background, Arc::new(SystemClock))?;
    println!(
        "serving media on {} control on {}{}",
        handle.media_addr,
        handle.control_addr,
        handle.bridge_addr.map(|a| format!(" websocket on {a}")).unwrap_or_default()
    );
    match duration {
        Some(secs) => {
            std::thread::sleep(Duration::from_secs_f64(secs.max(0.0)));
            let stats = handle.stats();
            handle.shutdown();
            println!("{}", stats.table());
        }
        None => handle.wait(),
    }
    Ok(())
}

fn parse_cameras(list: &str) -> Result<Vec<CameraId>> {
    let list = list.trim();
    if let Some((a, b)) = list.split_once("..") {
        let a: CameraId = a.trim().parse().with_context(|| format!("bad camera range {list:?}"))?;
        let b: CameraId = b.trim_start_matches('=').trim().parse().with_context(|| format!("bad camera range {list:?}"))?;
        if a > b {
            bail!("empty camera range {list:?}");
        }
        return Ok((a..=b).collect());
    }
    list.split(',').map(|s| s.trim().parse().with_context(|| format!("bad camera id {s:?}"))).collect()
}

fn scene(name: &str) -> Result<Scene> {
    Scene::by_name(name).with_context(|| format!("unknown scene {name:?} (known: default, empty, sphere)"))
}

fn capture_sim(config: &Config, cameras: &str, frames: Option<u64>) -> Result<()> {
    let ids = parse_cameras(cameras)?;
    let scene = scene(&config.scene)?;
    let rig = Rig::load(&config.calibration).with_context(|| format!("calibration {}", config.calibration.display()))?;
    let resolve = |port: u16| -> Result<std::net::SocketAddr> {
        use std::net::ToSocketAddrs;
        (config.server.as_str(), port)
            .to_socket_addrs()
            .with_context(|| format!("cannot resolve server {:?}", config.server))?
            .next()
            .with_context(|| format!("no address for server {:?}", config.server))
    };
    let media = resolve(config.media_port)?;
    let control = resolve(config.control_port)?;
    let clock: fvv_server::SharedClock = Arc::new(SystemClock);
    let mut nodes = Vec::new();
    for id in ids {
        let cam = *rig.camera(id).with_context(|| format!("camera {id} is not in {}", config.calibration.display()))?;
        let mut c = CaptureConfig::new(cam, *rig.quantizer(), scene.clone(), media, control);
        c.frames = frames;
        c.period_us = config.period;
        c.jitter_us = config.jitter;
        c.loss = config.loss;
        c.seed = config.seed;
        c.compress = config.compress;
        c.pacing = config.pacing.into();
        nodes.push((id, CaptureNode::spawn(c, clock.clone())));
    }
    let mut failed = None;
    for (id, node) in nodes {
        match node.join() {
            Ok(r) => info!(camera = id, sent = r.frames_sent, lost = r.frames_lost, "node done"),
            Err(e) => failed = failed.or(Some(anyhow::anyhow!("camera {id}: {e}"))),
        }
    }
    failed.map_or(Ok(()), Err)
}

fn synthesize(config: &Config, pose: &[f64], out: &Path, tick: Option<u32>) -> Result<()> {
    if pose.len() != 18 {
        bail!("--pose needs 18 numbers (12 pose + 6 intrinsics), got {}", pose.len());
    }
    let virtual_cam = viewpoint_camera(pose[..12].try_into().expect("12"), pose[12..].try_into().expect("6"))
        .context("invalid viewpoint")?;
    let dataset = load_dataset(&config.dataset)?;
    let tick = match tick {
        Some(t) => t,
        None => *dataset.ticks().first().context("dataset has no frames")?,
    };
    let background: BackgroundModel = dataset.background()?.context("dataset has no background model")?;
    let rig = dataset.rig();
    let server = config.server_config()?;
    let ts = dataset.timestamp(tick);
    let view = select(&virtual_cam, rig.cameras(), None, &server.selection(), ts);
    let mut frames = Vec::new();
    for id in &view.active {
        let stored = dataset.frame(*id, tick)?;
        let rendered = RenderedView { color: stored.color, depth: stored.depth, fg_mask: stored.mask };
        frames.push(TimedFrame::from_view(*id, ts, &rendered));
    }
    let refs: Vec<_> = view.active.iter().zip(&view.active_distances).zip(&frames).map(|((id, d), f)| (*id, *d, f)).collect();
    let (layered, _) = synthesize_refs(&virtual_cam, &refs, &background, rig, &server.synthesis())?;
    let image = &layered.final_frame;
    let bytes = match out.extension().and_then(|e| e.to_str()) {
        Some("png") => encode_png(image)?,
        Some("fvvc") | Some("i420") => write_color_dump(image, tick)?,
        _ => bail!("output {} must end in .png or .fvvc", out.display()),
    };
    std::fs::write(out, bytes).with_context(|| format!("cannot write {}", out.display()))?;
    println!(
        "tick {tick} active {:?} valid {:.2}% -> {}",
        view.active,
        100.0 * layered.prefill_valid_fraction(),
        out.display()
    );
    Ok(())
}

fn pack(input: &Path, output: &Path, frame_index: u32) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let depth = DepthMap::from_pgm(&bytes).with_context(|| format!("{}", input.display()))?;
    let dump = write_depth_dump(&pack_depth(&depth), frame_index)?;
    std::fs::write(output, dump).with_context(|| format!("cannot write {}", output.display()))?;
    Ok(())
}

fn unpack(input: &Path, output: &Path) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("cannot read {}", input.display()))?;
    let (_, frame) = read_depth_dump(&bytes).with_context(|| format!("{}", input.display()))?;
    std::fs::write(output, unpack_depth(&frame).to_pgm()).with_context(|| format!("cannot write {}", output.display()))?;
    Ok(())
}

fn render(config: &Config) -> Result<()> {
    let scene = scene(&config.scene)?;
    let Resolution { width, height } = config.resolution;
    let rig = ArcRigSpec::default().with_resolution(width, height).build();
    let ticks = u32::try_from(config.ticks).context("ticks out of range")?;
    render_dataset(&scene, &rig, ticks, config.period, &config.dataset)?;
    println!("{} cameras x {ticks} ticks at {width}x{height} -> {}", rig.len(), config.dataset.display());
    Ok(())
}

fn run_bench(config: &Config, json: bool) -> Result<()> {
    let cfg = BenchConfig {
        width: config.resolution.width,
        height: config.resolution.height,
        ticks: config.ticks,
        scene: config.scene.clone(),
        server: config.server_config()?,
    };
    let report = bench::run(&cfg)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.render());
    }
    Ok(())
}
