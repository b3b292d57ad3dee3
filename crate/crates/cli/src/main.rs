//! `skybench` command-line entry point.

use std::fmt::Write as _;
use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::mpsc::RecvTimeoutError;
use std::time::{Duration, Instant};

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::Serialize;

use skybench::calibration::{calibrate, load_correspondences, save_intrinsics, CalibrationError};
use skybench::camera::StreamConfig;
use skybench::eval::{emit_report, evaluate, AlignmentMethod, EvalError, RunReport};
use skybench::flight::{path_length, FlightError};
use skybench::scenario::{
    frame_from_message, publish_live, run_sessions, run_sweep, write_sweep, ScenarioConfig, ScenarioError, Scene,
    IMAGE_CHANNEL,
};
use skybench::transport::{
    playback, ChannelPattern, LogReader, LogWriter, MessageEnvelope, Publisher, Recorder, Subscriber, TransportConfig,
    TransportError,
};
use skybench::vo::{KeyframePolicy, SessionOutcome, SessionOutput, VoSession};
use skybench::Trajectory;

const EXIT_USAGE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "skybench", version, about = "Virtual fixed-wing visual-navigation testbed")]
struct Cli {
    /// Overrides the configured seed.
    #[arg(long, global = true, env = "SKYBENCH_SEED")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
struct NetArgs {
    /// Multicast group (or unicast address) for live messages.
    #[arg(long, default_value_t = TransportConfig::default().group)]
    group: Ipv4Addr,
    #[arg(long, default_value_t = TransportConfig::default().port)]
    port: u16,
    /// Local interface used to send and join.
    #[arg(long, default_value_t = TransportConfig::default().interface)]
    interface: Ipv4Addr,
}

impl NetArgs {
    fn config(&self) -> TransportConfig {
        TransportConfig {
            group: self.group,
            port: self.port,
            interface: self.interface,
            ..TransportConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Distance,
    ViewChange,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlignArg {
    Anchor,
    Sim3,
}

impl From<AlignArg> for AlignmentMethod {
    fn from(a: AlignArg) -> Self {
        match a {
            AlignArg::Anchor => AlignmentMethod::AltitudeAnchor,
            AlignArg::Sim3 => AlignmentMethod::Sim3Lsq,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Estimates intrinsics from a board-to-pixel correspondence CSV.
    Calibrate {
        /// CSV with header `view_id,board_x_m,board_y_m,px,py`.
        correspondences: PathBuf,
        #[arg(long)]
        width: u32,
        #[arg(long)]
        height: u32,
        /// Intrinsics JSON output.
        #[arg(short, long, default_value = "intrinsics.json")]
        output: PathBuf,
    },
    /// Flies the scenario mission and writes the truth trajectory.
    Simulate {
        config: PathBuf,
        /// Output directory; defaults to the config's `output_dir` or `.`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also record every rendered frame to this log.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Publish frames on IMG_SIM in real time instead of writing files.
        #[arg(long)]
        live: bool,
        /// Stop live streaming after this many frames.
        #[arg(long)]
        max_frames: Option<u64>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Runs the reference VO and writes the estimated trajectory.
    RunVo {
        config: PathBuf,
        /// Frame log to read instead of rendering the scenario.
        #[arg(long, conflicts_with = "live")]
        frames: Option<PathBuf>,
        /// Consume frames from IMG_SIM until the stream goes idle.
        #[arg(long)]
        live: bool,
        /// Seconds without frames that end a live run.
        #[arg(long, default_value_t = 2.0)]
        idle_timeout: f64,
        /// Processing rate limit; excess frames are dropped.
        #[arg(long)]
        fps_cap: Option<f64>,
        #[arg(long, value_enum)]
        policy: Option<PolicyArg>,
        /// Estimated trajectory output.
        #[arg(short, long, default_value = "estimate.traj")]
        output: PathBuf,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Scores estimates against truth and writes plots and matrices.
    Evaluate {
        truth: PathBuf,
        #[arg(required = true)]
        estimates: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "anchor")]
        align: AlignArg,
        /// Sweep coordinates recorded in the matrix row.
        #[arg(long, default_value_t = 0.0)]
        airspeed: f64,
        #[arg(long, default_value_t = 0.0)]
        roll_rate: f64,
        #[arg(long, default_value_t = 0.0)]
        altitude: f64,
    },
    /// Runs the config's parameter grid and writes the result matrix.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Republishes a recorded log in (scaled) real time.
    Playback {
        log: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        /// Start at the first message at or after this time, seconds.
        #[arg(long)]
        seek: Option<f64>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Records live channels to a log.
    Record {
        output: PathBuf,
        /// Channel names or `PREFIX*` patterns.
        #[arg(long = "channel", default_value = "*")]
        channels: Vec<String>,
        /// Recording length in seconds.
        #[arg(long)]
        duration: f64,
        #[command(flatten)]
        net: NetArgs,
    },
}

/// Error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: error.into(),
        }
    }

    fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_RUNTIME,
            error: error.into(),
        }
    }
}

impl From<ScenarioError> for Failure {
    fn from(e: ScenarioError) -> Self {
        let code = match &e {
            ScenarioError::Io { .. }
            | ScenarioError::Config { .. }
            | ScenarioError::MissingFile { .. }
            | ScenarioError::Invalid(_)
            | ScenarioError::Geometry(_) => EXIT_USAGE,
            ScenarioError::Flight(FlightError::MissionInfeasible { .. }) => EXIT_INFEASIBLE,
            ScenarioError::Flight(_) => EXIT_USAGE,
            ScenarioError::Terrain(skybench::terrain::TerrainError::Io { .. })
            | ScenarioError::Calibration(CalibrationError::Io { .. })
            | ScenarioError::Calibration(CalibrationError::Json { .. }) => EXIT_USAGE,
            ScenarioError::Vo(skybench::vo::VoError::InvalidConfig(_)) => EXIT_USAGE,
            ScenarioError::Camera(skybench::camera::CameraError::InvalidConfig(_)) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error: e.into() }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        let code = match e {
            EvalError::Io { .. } | EvalError::Parse { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error: e.into() }
    }
}

impl From<TransportError> for Failure {
    fn from(e: TransportError) -> Self {
        let code = match e {
            TransportError::File { .. } | TransportError::Corrupt { .. } | TransportError::InvalidArgument(_) => {
                EXIT_USAGE
            }
            TransportError::InvalidChannel(_) => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        Self { code, error: e.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let seed = cli.seed;
    match cli.command {
        Command::Calibrate {
            correspondences,
            width,
            height,
            output,
        } => cmd_calibrate(&correspondences, width, height, &output),
        Command::Simulate {
            config,
            out,
            frames,
            live,
            max_frames,
            net,
        } => {
            let cfg = load_config(&config, seed)?;
            if live {
                cmd_simulate_live(&cfg, &net.config(), max_frames)
            } else {
                let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
                cmd_simulate(&cfg, &out, frames.as_deref())
            }
        }
        Command::RunVo {
            config,
            frames,
            live,
            idle_timeout,
            fps_cap,
            policy,
            output,
            net,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(cap) = fps_cap {
                cfg.stream.processing_fps_cap = Some(cap);
            }
            let k = cfg.intrinsics()?;
            if let Some(p) = policy {
                cfg.policy = Some(match p {
                    PolicyArg::Distance => KeyframePolicy::distance_default(),
                    PolicyArg::ViewChange => KeyframePolicy::view_change_for_width(k.width),
                });
            }
            cfg.validate()?;
            let source = match (frames, live) {
                (Some(p), _) => FrameSource::Log(p),
                (None, true) => FrameSource::Live(net.config(), idle_timeout),
                (None, false) => FrameSource::Render,
            };
            cmd_run_vo(&cfg, source, &output)
        }
        Command::Evaluate {
            truth,
            estimates,
            out,
            align,
            airspeed,
            roll_rate,
            altitude,
        } => cmd_evaluate(&truth, &estimates, &out, align.into(), [airspeed, roll_rate, altitude]),
        Command::Sweep { config, out } => {
            let cfg = load_config(&config, seed)?;
            let out = out.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("sweep"));
            cmd_sweep(&cfg, &out)
        }
        Command::Playback { log, speed, seek, net } => cmd_playback(&log, speed, seek, &net.config()),
        Command::Record {
            output,
            channels,
            duration,
            net,
        } => cmd_record(&output, &channels, duration, &net.config()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct CalibrationReport {
    views: usize,
    rms_px: f64,
    iterations: usize,
    condition: f64,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    k1: f64,
    k2: f64,
    p1: f64,
    p2: f64,
}

fn cmd_calibrate(input: &Path, width: u32, height: u32, output: &Path) -> CmdResult {
    let classify = |e: CalibrationError| match e {
        CalibrationError::Io { .. } | CalibrationError::Parse { .. } | CalibrationError::Json { .. } => {
            Failure::usage(e)
        }
        CalibrationError::InsufficientViews { .. } => Failure::usage(e),
        _ => Failure::runtime(e),
    };
    let views = load_correspondences(input).map_err(classify)?;
    let result = calibrate(&views, width, height).map_err(classify)?;
    save_intrinsics(output, &result.intrinsics).map_err(classify)?;
    let k = &result.intrinsics;
    let report = CalibrationReport {
        views: views.len(),
        rms_px: result.rms_px,
        iterations: result.iterations,
        condition: result.condition,
        fx: k.fx,
        fy: k.fy,
        cx: k.cx,
        cy: k.cy,
        k1: k.k1,
        k2: k.k2,
        p1: k.p1,
        p2: k.p2,
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    println!("intrinsics written to {}", output.display());
    Ok(())
}

fn cmd_simulate(cfg: &ScenarioConfig, out: &Path, frames: Option<&Path>) -> CmdResult {
    let scene = Scene::build(cfg)?;
    let states = scene.truth(&cfg.flight)?;
    fs::create_dir_all(out).map_err(|e| Failure::usage(anyhow!("{}: {e}", out.display())))?;
    let truth = Trajectory::from_states("truth", &states).map_err(Failure::from)?;
    let path = out.join("truth.traj");
    truth.save(&path)?;
    println!("samples: {}", states.len());
    println!("duration_s: {:.3}", states.last().map_or(0.0, |s| s.t_us as f64 * 1e-6));
    println!("path_length_m: {:.1}", path_length(&states));
    println!("truth: {}", path.display());
    if let Some(log) = frames {
        let mut w = LogWriter::create(log)?;
        let stats = skybench::camera::stream_frames(
            &states,
            &StreamConfig {
                processing_fps_cap: None,
                ..cfg.stream
            },
            |id, s| scene.render(id, s),
            |f| {
                let payload = skybench::transport::encode_image(&f).map_err(|e| e.to_string())?;
                w.append(&MessageEnvelope {
                    channel: IMAGE_CHANNEL.into(),
                    t_us: f.t_us,
                    seq: f.frame_id,
                    payload,
                })
                .map_err(|e| e.to_string())?;
                Ok(skybench::camera::SinkControl::Continue)
            },
        )
        .map_err(|e| Failure::from(ScenarioError::from(e)))?;
        w.finish()?;
        println!("frames: {} written to {}", stats.delivered, log.display());
    }
    Ok(())
}

fn cmd_simulate_live(cfg: &ScenarioConfig, net: &TransportConfig, max_frames: Option<u64>) -> CmdResult {
    let scene = Scene::build(cfg)?;
    let states = scene.truth(&cfg.flight)?;
    let publisher = Publisher::new(net)?;
    let stats = publish_live(&scene, &states, &cfg.stream, &publisher, max_frames)?;
    println!("frames_published: {}", stats.frames);
    println!("rate_hz: {:.3}", stats.rate_hz);
    println!("wall_s: {:.3}", stats.wall.as_secs_f64());
    Ok(())
}

enum FrameSource {
    Render,
    Log(PathBuf),
    Live(TransportConfig, f64),
}

#[derive(Default)]
struct Delivery {
    received: u64,
    processed: u64,
    dropped: u64,
}

fn outcome_name(o: SessionOutcome) -> &'static str {
    match o {
        SessionOutcome::Tracking => "tracking",
        SessionOutcome::InitializationFailed => "initialization_failed",
        SessionOutcome::Lost => "lost",
    }
}

fn print_summary(out: &SessionOutput, policy: &KeyframePolicy, d: &Delivery, wall: Duration) {
    let s = &out.stats;
    let mut text = String::new();
    let _ = writeln!(text, "policy: {}", policy.name());
    let _ = writeln!(text, "outcome: {}", outcome_name(s.outcome));
    let _ = writeln!(text, "frames_received: {}", d.received);
    let _ = writeln!(text, "frames_processed: {}", d.processed);
    let _ = writeln!(text, "frames_dropped: {}", d.dropped);
    let _ = writeln!(text, "tracked_fraction: {:.4}", out.trajectory.tracked_fraction());
    let _ = writeln!(text, "keyframes: {}", s.keyframes);
    let _ = writeln!(text, "map_points: {}", s.map_points);
    let opt = |v: Option<usize>| v.map_or("none".to_string(), |x| x.to_string());
    let _ = writeln!(text, "init_frame: {}", opt(s.init_frame));
    let _ = writeln!(text, "lost_frame: {}", opt(s.lost_frame));
    let _ = write!(text, "wall_s: {:.3}", wall.as_secs_f64());
    println!("{text}");
}

fn cmd_run_vo(cfg: &ScenarioConfig, source: FrameSource, output: &Path) -> CmdResult {
    let k = cfg.intrinsics()?;
    let session_cfg = cfg.session_config(&k);
    let start = Instant::now();
    let (out, delivery) = match source {
        FrameSource::Render => {
            let scene = Scene::build(cfg)?;
            let states = scene.truth(&cfg.flight)?;
            let run = run_sessions(&scene, &states, &cfg.stream, &[(session_cfg, "estimate".into())])?;
            let d = Delivery {
                received: run.stream.emitted,
                processed: run.stream.delivered,
                dropped: run.stream.emitted - run.stream.delivered,
            };
            (run.sessions.into_iter().next().expect("one session"), d)
        }
        FrameSource::Log(path) => {
            let reader = LogReader::open(&path)?;
            let mut session = VoSession::new(&k, &session_cfg, "estimate").map_err(ScenarioError::from)?;
            let mut d = Delivery::default();
            let mut next_free = i64::MIN;
            let busy_us = cfg.stream.processing_fps_cap.map(|c| (1e6 / c).round() as i64);
            for item in reader.iter() {
                let (_, m) = item?;
                if m.channel != IMAGE_CHANNEL {
                    continue;
                }
                d.received += 1;
                if let Some(busy) = busy_us {
                    if m.t_us < next_free {
                        d.dropped += 1;
                        continue;
                    }
                    next_free = m.t_us + busy;
                }
                let f = frame_from_message(&m)?;
                session.process(&f).map_err(ScenarioError::from)?;
                d.processed += 1;
            }
            (session.finish(), d)
        }
        FrameSource::Live(net, idle) => run_vo_live(&k, &session_cfg, &net, idle, cfg.stream.processing_fps_cap)?,
    };
    out.trajectory.save(output)?;
    print_summary(&out, &session_cfg.policy, &delivery, start.elapsed());
    println!("estimate: {}", output.display());
    Ok(())
}

fn run_vo_live(
    k: &skybench::CameraIntrinsics,
    session_cfg: &skybench::vo::SessionConfig,
    net: &TransportConfig,
    idle_s: f64,
    fps_cap: Option<f64>,
) -> Result<(SessionOutput, Delivery), Failure> {
    if !(idle_s > 0.0) {
        return Err(Failure::usage(anyhow!("--idle-timeout must be positive")));
    }
    let (sub, rx) = Subscriber::channel(net, vec![ChannelPattern::parse(IMAGE_CHANNEL)?])?;
    let mut session = VoSession::new(k, session_cfg, "estimate").map_err(ScenarioError::from)?;
    let mut d = Delivery::default();
    let min_gap = fps_cap.map(|c| Duration::from_secs_f64(1.0 / c));
    let mut last_done: Option<Instant> = None;
    let idle = Duration::from_secs_f64(idle_s);
    let first_wait = idle.max(Duration::from_secs(30));
    loop {
        let wait = if d.received == 0 { first_wait } else { idle };
        let mut m = match rx.recv_timeout(wait) {
            Ok(m) => m,
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break,
        };
        d.received += 1;
        // Keep only the newest queued frame.
        while let Ok(newer) = rx.try_recv() {
            d.received += 1;
            d.dropped += 1;
            m = newer;
        }
        if let (Some(gap), Some(t)) = (min_gap, last_done) {
            if t.elapsed() < gap {
                std::thread::sleep(gap - t.elapsed());
            }
        }
        let f = frame_from_message(&m)?;
        if let Err(e) = session.process(&f) {
            warn!("frame {} rejected: {e}", m.seq);
            continue;
        }
        d.processed += 1;
        last_done = Some(Instant::now());
    }
    let incomplete = sub.stats().incomplete.load(std::sync::atomic::Ordering::Relaxed);
    if incomplete > 0 {
        info!("{incomplete} frames lost to missing fragments");
    }
    sub.stop();
    Ok((session.finish(), d))
}

fn cmd_evaluate(truth: &Path, estimates: &[PathBuf], out: &Path, method: AlignmentMethod, coords: [f64; 3]) -> CmdResult {
    let truth = Trajectory::load(truth)?;
    let ground = skybench::Heightfield::flat(0.0);
    let mut runs = Vec::new();
    for path in estimates {
        let est = Trajectory::load(path)?;
        let ev = evaluate(&truth, &est, &ground, method)?;
        let label = if est.label.is_empty() || estimates.len() > 1 {
            path.file_stem().map_or("estimate".into(), |s| s.to_string_lossy().into_owned())
        } else {
            est.label.clone()
        };
        let cell = |v: Option<f64>| v.map_or("X".to_string(), |x| format!("{x:.6}"));
        println!(
            "{label}: pos_rmse_m {} rot_rmse_deg {} tracked_fraction {:.4}",
            cell(ev.report.pos_rmse_m),
            cell(ev.report.rot_rmse_deg),
            ev.report.tracked_fraction
        );
        runs.push(RunReport {
            label: label.clone(),
            airspeed: coords[0],
            roll_rate: coords[1],
            altitude: coords[2],
            policy: label,
            report: ev.report,
        });
    }
    let written = emit_report(&runs, out)?;
    println!("report: {} files in {}", written.len(), out.display());
    Ok(())
}

fn cmd_sweep(cfg: &ScenarioConfig, out: &Path) -> CmdResult {
    let runs = run_sweep(cfg)?;
    write_sweep(&runs, out)?;
    for r in &runs {
        let cell = |v: Option<f64>| v.map_or("X".to_string(), |x| format!("{x:.3}"));
        println!(
            "{}: tracked {:.3} pos {} rot {}",
            r.report.label,
            r.report.report.tracked_fraction,
            cell(r.report.report.pos_rmse_m),
            cell(r.report.report.rot_rmse_deg)
        );
    }
    println!("matrix: {}", out.join("matrix.csv").display());
    Ok(())
}

fn cmd_playback(log: &Path, speed: f64, seek: Option<f64>, net: &TransportConfig) -> CmdResult {
    let publisher = Publisher::new(net)?;
    let seek_us = seek.map(|s| (s * 1e6).round() as i64);
    let stats = playback(log, speed, seek_us, |m| publisher.publish_fragmented(&m.channel, m.t_us, &m.payload).map(|_| ()))?;
    println!("messages: {}", stats.delivered);
    println!("wall_s: {:.3}", stats.wall.as_secs_f64());
    Ok(())
}

fn cmd_record(output: &Path, channels: &[String], duration: f64, net: &TransportConfig) -> CmdResult {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Failure::usage(anyhow!("--duration must be positive")));
    }
    let patterns = channels
        .iter()
        .map(|c| ChannelPattern::parse(c))
        .collect::<Result<Vec<_>, _>>()?;
    let rec = Recorder::start(net, patterns, output)?;
    std::thread::sleep(Duration::from_secs_f64(duration));
    let n = rec.finish()?;
    println!("messages: {n} written to {}", output.display());
    Ok(())
}
