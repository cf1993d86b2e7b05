mod source;

use std::io::{BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gpmap_client::{Client, ClientError};
use gpmap_core::config::PipelineConfig;
use gpmap_core::eval::{Aabb, Axis, SliceSpec};
use gpmap_core::frame::PropertyKind;
use gpmap_core::global_field::SignSource;
use gpmap_core::pipeline::{FrameStats, CSV_HEADER};
use gpmap_core::scene::{SceneFile, Shape};
use gpmap_core::wire::{ChamferRequest, OracleDto, RmseRequest, SliceRequest};
use gpmap_core::{io, Vec3};

use source::Source;

#[derive(Parser)]
#[command(name = "gpmap", version, about = "Incremental Gaussian-process mapping")]
struct Cli {
    /// Talk to a running service instead of starting an embedded one.
    #[arg(long, global = true, value_name = "URL")]
    server: Option<String>,

    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service in the foreground.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Integrate a frame sequence and optionally write the results.
    Run {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Frames sent per request.
        #[arg(long, default_value_t = 1)]
        batch: usize,
        /// Write the final map snapshot here.
        #[arg(long, value_name = "FILE")]
        snapshot: Option<PathBuf>,
        /// Write the final mesh (binary PLY) here.
        #[arg(long, value_name = "FILE")]
        mesh: Option<PathBuf>,
        /// Write per-frame stage timings here.
        #[arg(long, value_name = "CSV")]
        stats: Option<PathBuf>,
    },
    /// Per-frame timing run with a fixed number of points per frame.
    Bench {
        #[command(flatten)]
        source: SourceArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Points kept per frame (evenly subsampled).
        #[arg(long, default_value_t = 1500)]
        points: usize,
        /// Leave global models untrained until queried.
        #[arg(long)]
        lazy: bool,
        /// CSV destination; stdout if omitted.
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Print map statistics as JSON.
    Stats {
        #[command(flatten)]
        map: MapArgs,
    },
    /// Export the mesh of a stored map.
    Mesh {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Sample the distance field on an axis-aligned plane (CSV).
    Slice {
        #[command(flatten)]
        map: MapArgs,
        #[arg(long, default_value = "z")]
        axis: String,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        offset: f64,
        /// In-plane bounds u0,u1,v0,v1.
        #[arg(long, allow_hyphen_values = true, value_name = "U0,U1,V0,V1")]
        bounds: String,
        /// Sample spacing; defaults to the voxel size.
        #[arg(long)]
        resolution: Option<f64>,
        #[command(flatten)]
        oracle: OracleArgs,
        /// CSV destination; stdout if omitted.
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Query the field at points read as "x y z" lines.
    Query {
        #[command(flatten)]
        map: MapArgs,
        /// Input file; stdin if omitted.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
    },
    /// Distance RMSE and mesh Chamfer distance against a scene.
    Eval {
        #[command(flatten)]
        map: MapArgs,
        #[command(flatten)]
        oracle: OracleArgs,
        /// Region min/max; defaults to the bounded primitives padded by 0.5 m.
        #[arg(long, allow_hyphen_values = true, value_name = "X0,Y0,Z0,X1,Y1,Z1")]
        region: Option<String>,
        /// Lattice spacing; defaults to the voxel size.
        #[arg(long)]
        resolution: Option<f64>,
        /// Only lattice points with lo <= |true distance| <= hi count.
        #[arg(long, default_value = "0,0.15", value_name = "LO,HI")]
        band: String,
        /// Reference surface cloud; sampled from the scene if omitted.
        #[arg(long, value_name = "FILE")]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 20000)]
        samples: usize,
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
    },
}

#[derive(Args)]
struct SourceArgs {
    /// Scene description with sensor and trajectory lines.
    #[arg(long, value_name = "FILE", conflicts_with_all = ["preset", "frames"])]
    scene: Option<PathBuf>,
    /// Built-in scene: sphere, dynamic-box, corridor.
    #[arg(long, conflicts_with = "frames")]
    preset: Option<String>,
    /// Directory of .xyz/.ply frames (sensor frame), sorted by name.
    #[arg(long, value_name = "DIR", requires = "trajectory")]
    frames: Option<PathBuf>,
    /// "t x y z qx qy qz qw" per frame.
    #[arg(long, value_name = "FILE")]
    trajectory: Option<PathBuf>,
    /// Per-point property columns in the frame files: none, intensity, rgb.
    #[arg(long, default_value = "none")]
    property: String,
    /// Limit (or, for synthetic scenes, set) the number of frames.
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file ("key = value" lines).
    #[arg(long = "config", value_name = "FILE")]
    file: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct MapArgs {
    /// Map snapshot to load; without one the service's current map is used.
    #[arg(long, value_name = "FILE")]
    snapshot: Option<PathBuf>,
}

#[derive(Args)]
struct OracleArgs {
    /// Ground-truth scene file.
    #[arg(long = "truth", value_name = "FILE", conflicts_with = "truth_preset")]
    truth: Option<PathBuf>,
    /// Ground-truth built-in scene.
    #[arg(long = "truth-preset", value_name = "NAME")]
    truth_preset: Option<String>,
    /// Scene time; defaults to the last integrated frame.
    #[arg(long, allow_hyphen_values = true)]
    time: Option<f64>,
}

#[derive(Debug)]
enum CliError {
    Core(gpmap_core::Error),
    Client(ClientError),
    Usage(String),
}

impl From<gpmap_core::Error> for CliError {
    fn from(e: gpmap_core::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        CliError::Client(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> &str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Client(e) => e.kind(),
            CliError::Usage(_) => "usage",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Client(e) => e.fmt(f),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level)),
        )
        .init();

    let runtime = match tokio::runtime::Builder::new_multi_thread().enable_all().build() {
        Ok(rt) => rt,
        Err(e) => return fail(&CliError::from(e)),
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    let line = serde_json::json!({ "error": e.to_string(), "kind": e.kind() });
    eprintln!("{line}");
    ExitCode::FAILURE
}

/// A client plus, when no `--server` was given, the embedded service it
/// talks to.
struct Session {
    client: Client,
    _server: Option<tokio::task::JoinHandle<std::io::Result<()>>>,
}

async fn connect(server: Option<&str>) -> CliResult<Session> {
    match server {
        Some(url) => {
            let client = Client::new(url);
            client.health().await?;
            Ok(Session { client, _server: None })
        }
        None => {
            let (addr, handle) = gpmap_server::spawn(([127, 0, 0, 1], 0).into(), PipelineConfig::default()).await?;
            Ok(Session {
                client: Client::new(format!("http://{addr}")),
                _server: Some(handle),
            })
        }
    }
}

async fn dispatch(cli: Cli) -> CliResult<()> {
    if let Command::Serve { addr, config } = &cli.command {
        let config = load_config(config)?;
        let state = gpmap_server::AppState::new(config)?;
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        gpmap_server::serve(listener, state).await?;
        return Ok(());
    }
    let session = connect(cli.server.as_deref()).await?;
    let client = &session.client;
    match cli.command {
        Command::Serve { .. } => unreachable!(),
        Command::Run {
            source,
            config,
            batch,
            snapshot,
            mesh,
            stats,
        } => {
            let config = load_config(&config)?;
            let src = open_source(&source)?;
            let all = integrate(client, &src, &config, batch.max(1), None).await?;
            if let Some(path) = stats {
                write_stats(&mut BufWriter::new(std::fs::File::create(path)?), &all)?;
            }
            if let Some(path) = snapshot {
                std::fs::write(path, client.snapshot().await?)?;
            }
            if let Some(path) = mesh {
                std::fs::write(path, client.mesh_ply().await?)?;
            }
            println!("{}", serde_json::json!(client.stats().await?));
        }
        Command::Bench {
            source,
            config,
            points,
            lazy,
            out,
        } => {
            let mut config = load_config(&config)?;
            config.eager_train = !lazy;
            let src = open_source(&source)?;
            let all = integrate(client, &src, &config, 1, Some(points)).await?;
            match out {
                Some(path) => write_stats(&mut BufWriter::new(std::fs::File::create(path)?), &all)?,
                None => write_stats(&mut std::io::stdout().lock(), &all)?,
            }
        }
        Command::Stats { map } => {
            load_map(client, &map).await?;
            println!("{}", serde_json::json!(client.stats().await?));
        }
        Command::Mesh { map, out } => {
            load_map(client, &map).await?;
            std::fs::write(out, client.mesh_ply().await?)?;
        }
        Command::Slice {
            map,
            axis,
            offset,
            bounds,
            resolution,
            oracle,
            out,
        } => {
            load_map(client, &map).await?;
            let axis = Axis::parse(&axis).ok_or_else(|| CliError::Usage(format!("unknown axis '{axis}' (x, y, z)")))?;
            let b = floats::<4>(&bounds, "--bounds")?;
            let resolution = match resolution {
                Some(r) => r,
                None => client.config().await?.voxel_size,
            };
            let oracle = match oracle_scene(&oracle)? {
                Some(sf) => Some(oracle_dto(client, &sf, oracle.time).await?),
                None => None,
            };
            let req = SliceRequest {
                spec: SliceSpec {
                    axis,
                    offset,
                    bounds: b,
                    resolution,
                },
                oracle,
            };
            let slice = client.slice(&req).await?;
            match out {
                Some(path) => slice.write_csv(BufWriter::new(std::fs::File::create(path)?))?,
                None => slice.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Query { map, input } => {
            load_map(client, &map).await?;
            let points = match input {
                Some(path) => read_query_points(std::io::BufReader::new(std::fs::File::open(path)?))?,
                None => read_query_points(std::io::stdin().lock())?,
            };
            let results = client.query(&points).await?;
            let mut w = BufWriter::new(std::io::stdout().lock());
            for (p, r) in points.iter().zip(&results) {
                write!(
                    w,
                    "{} {} {} {} {} {} {} {} {}",
                    p.x,
                    p.y,
                    p.z,
                    r.distance,
                    r.variance,
                    r.gradient[0],
                    r.gradient[1],
                    r.gradient[2],
                    match r.sign {
                        SignSource::Grid => "grid",
                        SignSource::Unsigned => "unsigned",
                    }
                )?;
                for v in r.property.iter().flatten() {
                    write!(w, " {v}")?;
                }
                writeln!(w)?;
            }
            w.flush()?;
        }
        Command::Eval {
            map,
            oracle,
            region,
            resolution,
            band,
            reference,
            samples,
            threshold,
        } => {
            load_map(client, &map).await?;
            let sf = oracle_scene(&oracle)?.ok_or_else(|| CliError::Usage("eval needs --truth or --truth-preset".into()))?;
            let dto = oracle_dto(client, &sf, oracle.time).await?;
            let voxel = client.config().await?.voxel_size;
            let region = match region {
                Some(r) => {
                    let v = floats::<6>(&r, "--region")?;
                    Aabb::new(Vec3::new(v[0], v[1], v[2]), Vec3::new(v[3], v[4], v[5]))
                }
                None => default_region(&sf)?,
            };
            let band = floats::<2>(&band, "--band")?;
            let reference = match reference {
                Some(path) => io::read_points(&path, PropertyKind::None)?.0,
                None => sf.scene.surface_samples(dto.time, 0.5 * voxel),
            };
            let rmse = client
                .eval_rmse(&RmseRequest {
                    oracle: dto,
                    region,
                    resolution: resolution.unwrap_or(voxel),
                    band,
                })
                .await?;
            let chamfer = client
                .eval_chamfer(&ChamferRequest {
                    reference: gpmap_core::wire::points_to_dto(&reference),
                    samples,
                    threshold,
                })
                .await?;
            println!("{}", serde_json::json!({ "rmse": rmse, "chamfer": chamfer }));
        }
    }
    Ok(())
}

fn load_config(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    let mut config = match &args.file {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    for s in &args.set {
        config.apply(s)?;
    }
    for w in config.validate()? {
        tracing::warn!("{w}");
    }
    Ok(config)
}

fn open_source(args: &SourceArgs) -> CliResult<Source> {
    if let Some(path) = &args.scene {
        return Ok(Source::synthetic(source::scene_file(path, args.count)?)?);
    }
    if let Some(name) = &args.preset {
        return Ok(Source::synthetic(source::preset(name, args.count)?)?);
    }
    if let Some(dir) = &args.frames {
        let kind = PropertyKind::parse(&args.property)
            .ok_or_else(|| CliError::Usage(format!("unknown property '{}' (none, intensity, rgb)", args.property)))?;
        let traj = args.trajectory.as_deref().expect("clap requires it");
        return Ok(Source::files(dir, traj, kind, args.count)?);
    }
    Err(CliError::Usage("give one of --scene, --preset or --frames".into()))
}

async fn integrate(
    client: &Client,
    src: &Source,
    config: &PipelineConfig,
    batch: usize,
    points: Option<usize>,
) -> CliResult<Vec<FrameStats>> {
    client.reset(Some(config)).await?;
    let n = src.len();
    let start = Instant::now();
    let mut all = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let end = (i + batch).min(n);
        let mut frames = Vec::with_capacity(end - i);
        for k in i..end {
            let f = src.frame(k)?;
            frames.push(match points {
                Some(p) => source::subsample(f, p),
                None => f,
            });
        }
        for s in client.integrate(&frames).await? {
            tracing::info!(
                frame = s.frame,
                points = s.points,
                leaves = s.total_leaves,
                vertices = s.mesh_vertices,
                "integrated in {:.1} ms",
                s.total_ms
            );
            all.push(s);
        }
        i = end;
    }
    tracing::info!("{n} frames in {:.2} s", start.elapsed().as_secs_f64());
    Ok(all)
}

fn write_stats(w: &mut impl Write, stats: &[FrameStats]) -> CliResult<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for s in stats {
        for row in s.csv_rows() {
            writeln!(w, "{row}")?;
        }
    }
    w.flush()?;
    Ok(())
}

async fn load_map(client: &Client, args: &MapArgs) -> CliResult<()> {
    if let Some(path) = &args.snapshot {
        client.load_snapshot(std::fs::read(path)?).await?;
    }
    Ok(())
}

fn oracle_scene(args: &OracleArgs) -> CliResult<Option<SceneFile>> {
    Ok(match (&args.truth, &args.truth_preset) {
        (Some(path), _) => Some(source::scene_file(path, None)?),
        (None, Some(name)) => Some(source::preset(name, None)?),
        (None, None) => None,
    })
}

/// Synthetic frames are stamped with their index, so the last integrated
/// frame is at `frames - 1`.
async fn oracle_dto(client: &Client, sf: &SceneFile, time: Option<f64>) -> CliResult<OracleDto> {
    let time = match time {
        Some(t) => t,
        None => client.stats().await?.frames.saturating_sub(1) as f64,
    };
    Ok(OracleDto {
        scene: sf.scene.to_text(),
        time,
    })
}

fn default_region(sf: &SceneFile) -> CliResult<Aabb> {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in &sf.scene.primitives {
        let (c, h) = match &p.shape {
            Shape::Sphere { center, radius } => (*center, Vec3::repeat(*radius)),
            Shape::Box { center, half } => (*center, *half),
            Shape::Plane { .. } => continue,
        };
        lo = lo.inf(&(c - h));
        hi = hi.sup(&(c + h));
    }
    if lo.x > hi.x {
        return Err(CliError::Usage("scene has no bounded primitives; pass --region".into()));
    }
    Ok(Aabb::new(lo.add_scalar(-0.5), hi.add_scalar(0.5)))
}

fn floats<const N: usize>(s: &str, flag: &str) -> CliResult<[f64; N]> {
    let bad = || CliError::Usage(format!("{flag} expects {N} comma-separated numbers, got '{s}'"));
    let v: Vec<f64> = s.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    v.try_into().map_err(|_| bad())
}

fn read_query_points(r: impl BufRead) -> CliResult<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = t
            .split([' ', '\t', ','])
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| gpmap_core::Error::Parse {
                line: i + 1,
                msg: format!("{e}"),
            })?;
        if v.len() < 3 {
            return Err(gpmap_core::Error::Parse {
                line: i + 1,
                msg: "expected x y z".into(),
            }
            .into());
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}
