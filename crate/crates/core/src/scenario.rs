//! Scenario configuration and the end-to-end workflows built on it: truth
//! generation, rendering into VO sessions, evaluation and parameter sweeps.

use std::cell::Cell;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::{load_intrinsics, CalibrationError};
use crate::camera::{stream_frames, CameraError, ImageFrame, Renderer, SinkControl, StreamConfig, StreamStats};
use crate::eval::{
    emit_report, evaluate, file_stem, AlignmentMethod, EvalError, RunReport, Trajectory,
};
use crate::flight::{
    camera_pose_at, generate_trajectory, nadir_mount, preset_oscillating, preset_three_loops, FlightError,
    FlightParams, Mission, StateSample,
};
use crate::geometry::{CameraIntrinsics, GeometryError};
use crate::terrain::{
    load_heightfield, load_texture, ExposureModel, Heightfield, ProceduralTexture, RasterTexture, Terrain,
    TerrainError, TextureField,
};
use crate::transport::{decode_image, encode_image, encode_pose, Publisher, TransportError};
use crate::vo::{DetectorParams, KeyframePolicy, SessionConfig, SessionOutput, VoError, VoSession};

/// Environment variable overriding the configured seed.
pub const SEED_ENV: &str = "SKYBENCH_SEED";
pub const IMAGE_CHANNEL: &str = "IMG_SIM";
pub const TRUTH_CHANNEL: &str = "POSE_TRUTH";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid configuration at `{key}`: {message}")]
    Config { path: String, key: String, message: String },
    #[error("`{key}` refers to a missing file: {path}")]
    MissingFile { key: String, path: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Flight(#[from] FlightError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    Terrain(#[from] TerrainError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Vo(#[from] VoError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MissionSpec {
    Oscillating {
        #[serde(default = "one")]
        scale: f64,
    },
    ThreeLoops {
        #[serde(default = "one")]
        scale: f64,
    },
    /// JSON-encoded [`Mission`].
    File { path: PathBuf },
    Inline {
        waypoints: Vec<[f64; 3]>,
        init_leg_length: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CameraSpec {
    Fov { width: u32, height: u32, hfov_deg: f64 },
    /// Intrinsics JSON as written by calibration.
    File { path: PathBuf },
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec::Fov {
            width: 320,
            height: 240,
            hfov_deg: 84.872,
        }
    }
}

/// Extent of the raster a procedural texture is baked into.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BakeSpec {
    pub width: usize,
    pub height: usize,
    pub meters_per_texel: f64,
}

impl Default for BakeSpec {
    fn default() -> Self {
        Self {
            width: 2400,
            height: 3200,
            meters_per_texel: 1.0,
        }
    }
}

fn standard_texture() -> ProceduralTexture {
    ProceduralTexture {
        seed: 42,
        octaves: 6,
        base_wavelength: 20.0,
        contrast: 0.6,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerrainSpec {
    /// Flat ground with a baked procedural texture. The texture seed is
    /// replaced by the scenario seed.
    Procedural {
        #[serde(default = "standard_texture")]
        texture: ProceduralTexture,
        /// Bake to a raster; `null` samples the procedural field directly.
        #[serde(default = "default_bake")]
        bake: Option<BakeSpec>,
        #[serde(default)]
        elevation: f64,
    },
    Files {
        texture: PathBuf,
        #[serde(default)]
        heightfield: Option<PathBuf>,
    },
}

fn default_bake() -> Option<BakeSpec> {
    Some(BakeSpec::default())
}

impl Default for TerrainSpec {
    fn default() -> Self {
        TerrainSpec::Procedural {
            texture: standard_texture(),
            bake: default_bake(),
            elevation: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub airspeeds: Vec<f64>,
    pub roll_rates: Vec<f64>,
    pub altitudes: Vec<f64>,
    pub policies: Vec<KeyframePolicy>,
}

fn default_seed() -> u64 {
    42
}

fn default_mission() -> MissionSpec {
    MissionSpec::Oscillating { scale: 1.0 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_mission")]
    pub mission: MissionSpec,
    /// Replaces every waypoint altitude.
    #[serde(default)]
    pub altitude: Option<f64>,
    #[serde(default)]
    pub flight: FlightParams,
    #[serde(default)]
    pub camera: CameraSpec,
    #[serde(default)]
    pub terrain: TerrainSpec,
    #[serde(default)]
    pub exposure: ExposureModel,
    /// Defaults scale with the image width.
    #[serde(default)]
    pub detector: Option<DetectorParams>,
    /// Defaults to the view-change policy.
    #[serde(default)]
    pub policy: Option<KeyframePolicy>,
    #[serde(default)]
    pub stream: StreamConfig,
    #[serde(default)]
    pub alignment: AlignmentMethod,
    /// Texture and VO seed.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            mission: default_mission(),
            altitude: None,
            flight: FlightParams::default(),
            camera: CameraSpec::default(),
            terrain: TerrainSpec::default(),
            exposure: ExposureModel::default(),
            detector: None,
            policy: None,
            stream: StreamConfig::default(),
            alignment: AlignmentMethod::default(),
            seed: default_seed(),
            output_dir: None,
            sweep: None,
        }
    }
}

impl ScenarioConfig {
    /// Parses JSON, reporting the key path of the first offending field.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, ScenarioError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            ScenarioError::Config {
                path: origin.to_string(),
                key: if key.is_empty() { ".".into() } else { key },
                message: e.into_inner().to_string(),
            }
        })
    }

    /// Loads a config file, resolves relative paths against its directory
    /// and checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let p = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: p.clone(), source })?;
        let mut cfg = Self::from_json(&text, &p)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.check_files()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let MissionSpec::File { path } = &mut self.mission {
            fix(path);
        }
        if let CameraSpec::File { path } = &mut self.camera {
            fix(path);
        }
        if let TerrainSpec::Files { texture, heightfield } = &mut self.terrain {
            fix(texture);
            if let Some(h) = heightfield {
                fix(h);
            }
        }
        if let Some(out) = &mut self.output_dir {
            fix(out);
        }
    }

    pub fn check_files(&self) -> Result<(), ScenarioError> {
        let mut refs: Vec<(&str, &Path)> = Vec::new();
        if let MissionSpec::File { path } = &self.mission {
            refs.push(("mission.path", path));
        }
        if let CameraSpec::File { path } = &self.camera {
            refs.push(("camera.path", path));
        }
        if let TerrainSpec::Files { texture, heightfield } = &self.terrain {
            refs.push(("terrain.texture", texture));
            if let Some(h) = heightfield {
                refs.push(("terrain.heightfield", h));
            }
        }
        for (key, path) in refs {
            if !path.is_file() {
                return Err(ScenarioError::MissingFile {
                    key: key.into(),
                    path: path.display().to_string(),
                });
            }
        }
        Ok(())
    }

    /// Applies `SKYBENCH_SEED` when set.
    pub fn apply_seed_env(&mut self) -> Result<(), ScenarioError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| ScenarioError::Invalid(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn mission(&self) -> Result<Mission, ScenarioError> {
        let check_scale = |s: f64| {
            if s > 0.0 && s.is_finite() {
                Ok(())
            } else {
                Err(ScenarioError::Invalid(format!("mission scale must be positive, got {s}")))
            }
        };
        let m = match &self.mission {
            MissionSpec::Oscillating { scale } => {
                check_scale(*scale)?;
                preset_oscillating(*scale)
            }
            MissionSpec::ThreeLoops { scale } => {
                check_scale(*scale)?;
                preset_three_loops(*scale)
            }
            MissionSpec::File { path } => {
                let p = path.display().to_string();
                let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: p.clone(), source })?;
                let de = &mut serde_json::Deserializer::from_str(&text);
                serde_path_to_error::deserialize(de).map_err(|e| ScenarioError::Config {
                    path: p,
                    key: e.path().to_string(),
                    message: e.into_inner().to_string(),
                })?
            }
            MissionSpec::Inline {
                waypoints,
                init_leg_length,
            } => Mission {
                waypoints: waypoints.clone(),
                init_leg_length: *init_leg_length,
            },
        };
        let m = match self.altitude {
            Some(a) => m.with_altitude(a),
            None => m,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, ScenarioError> {
        Ok(match &self.camera {
            CameraSpec::Fov { width, height, hfov_deg } => CameraIntrinsics::from_fov(*width, *height, *hfov_deg)?,
            CameraSpec::File { path } => load_intrinsics(path)?,
        })
    }

    pub fn terrain(&self) -> Result<Terrain, ScenarioError> {
        Ok(match &self.terrain {
            TerrainSpec::Procedural {
                texture,
                bake,
                elevation,
            } => {
                let tex = ProceduralTexture {
                    seed: self.seed,
                    ..*texture
                };
                tex.validate()?;
                let field = match bake {
                    Some(b) => TextureField::Raster(RasterTexture::bake(&tex, b.width, b.height, b.meters_per_texel)?),
                    None => TextureField::Procedural(tex),
                };
                Terrain::new(Heightfield::flat(*elevation), field)
            }
            TerrainSpec::Files { texture, heightfield } => {
                let h = match heightfield {
                    Some(h) => load_heightfield(h)?,
                    None => Heightfield::flat(0.0),
                };
                Terrain::new(h, load_texture(texture)?)
            }
        })
    }

    pub fn session_config(&self, intrinsics: &CameraIntrinsics) -> SessionConfig {
        let detector = self.detector.unwrap_or_else(|| DetectorParams::for_width(intrinsics.width));
        let policy = self
            .policy
            .unwrap_or_else(|| KeyframePolicy::view_change_for_width(intrinsics.width));
        let mut c = SessionConfig::new(detector, policy);
        c.seed = self.seed;
        c
    }

    /// Everything a run's outputs depend on is checked up front.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        self.flight.validate()?;
        self.stream.validate()?;
        if let Some(g) = &self.sweep {
            if g.airspeeds.is_empty() || g.roll_rates.is_empty() || g.altitudes.is_empty() || g.policies.is_empty() {
                return Err(ScenarioError::Invalid("every sweep axis needs at least one value".into()));
            }
            for p in &g.policies {
                p.validate()?;
            }
            if g.altitudes.iter().any(|a| !(*a > 0.0)) {
                return Err(ScenarioError::Invalid("sweep altitudes must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Built inputs of a scenario.
pub struct Scene {
    pub intrinsics: CameraIntrinsics,
    pub terrain: Terrain,
    pub exposure: ExposureModel,
    pub mission: Mission,
    renderer: Renderer,
}

impl Scene {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, ScenarioError> {
        cfg.validate()?;
        let intrinsics = cfg.intrinsics()?;
        Ok(Self {
            renderer: Renderer::new(&intrinsics)?,
            intrinsics,
            terrain: cfg.terrain()?,
            exposure: cfg.exposure,
            mission: cfg.mission()?,
        })
    }

    pub fn truth(&self, params: &FlightParams) -> Result<Vec<StateSample>, ScenarioError> {
        Ok(generate_trajectory(&self.mission, params)?)
    }

    pub fn render(&self, frame_id: u64, sample: &StateSample) -> Result<ImageFrame, CameraError> {
        let pose = camera_pose_at(sample, &nadir_mount());
        let mut f = self.renderer.render(&pose, &self.terrain, &self.exposure)?;
        f.frame_id = frame_id;
        Ok(f)
    }
}

pub struct RunOutput {
    pub sessions: Vec<SessionOutput>,
    pub stream: StreamStats,
    pub wall: Duration,
}

/// Renders the trajectory through `stream` and feeds every delivered frame
/// to one session per config. Rendering stops once every session is lost;
/// later frames are blank since a lost session ignores pixels.
pub fn run_sessions(
    scene: &Scene,
    states: &[StateSample],
    stream: &StreamConfig,
    configs: &[(SessionConfig, String)],
) -> Result<RunOutput, ScenarioError> {
    let start = Instant::now();
    let mut sessions = configs
        .iter()
        .map(|(c, label)| VoSession::new(&scene.intrinsics, c, label))
        .collect::<Result<Vec<_>, _>>()?;
    let all_lost = Cell::new(false);
    let (w, h) = (scene.intrinsics.width, scene.intrinsics.height);
    let mut failure: Option<VoError> = None;
    let stats = stream_frames(
        states,
        stream,
        |id, s| {
            if all_lost.get() {
                return Ok(ImageFrame {
                    t_us: s.t_us,
                    width: w,
                    height: h,
                    pixels: vec![0; (w * h) as usize],
                    frame_id: id,
                });
            }
            let mut f = scene.render(id, s)?;
            f.t_us = s.t_us;
            Ok(f)
        },
        |frame| {
            for s in sessions.iter_mut() {
                if let Err(e) = s.process(&frame) {
                    let msg = e.to_string();
                    failure = Some(e);
                    return Err(msg);
                }
            }
            all_lost.set(sessions.iter().all(|s| s.state().status == crate::vo::TrackStatus::Lost));
            Ok(SinkControl::Continue)
        },
    );
    if let Some(e) = failure {
        return Err(e.into());
    }
    let stats = stats?;
    Ok(RunOutput {
        sessions: sessions.into_iter().map(VoSession::finish).collect(),
        stream: stats,
        wall: start.elapsed(),
    })
}

/// One scored session of a sweep cell.
pub struct SweepRun {
    pub report: RunReport,
    pub estimate: Trajectory,
    pub truth: Trajectory,
}

pub fn run_label(airspeed: f64, roll_rate: f64, altitude: f64, policy: &KeyframePolicy) -> String {
    format!("v{airspeed}_r{roll_rate}_h{altitude}_{}", policy.name())
}

/// Runs every grid cell. Each (airspeed, roll rate, altitude) combination
/// renders once and feeds all policies.
pub fn run_sweep(cfg: &ScenarioConfig) -> Result<Vec<SweepRun>, ScenarioError> {
    let grid = cfg
        .sweep
        .clone()
        .ok_or_else(|| ScenarioError::Invalid("configuration has no `sweep` grid".into()))?;
    cfg.validate()?;
    let base = Scene::build(cfg)?;
    let mut out = Vec::new();
    for &airspeed in &grid.airspeeds {
        for &roll_rate in &grid.roll_rates {
            for &altitude in &grid.altitudes {
                let params = FlightParams {
                    airspeed,
                    max_roll_rate: roll_rate,
                    ..cfg.flight
                };
                let mission = base.mission.clone().with_altitude(altitude);
                let states = generate_trajectory(&mission, &params)?;
                let truth = Trajectory::from_states("truth", &states)?;
                let configs: Vec<(SessionConfig, String)> = grid
                    .policies
                    .iter()
                    .map(|p| {
                        let mut c = cfg.session_config(&base.intrinsics);
                        c.policy = *p;
                        (c, run_label(airspeed, roll_rate, altitude, p))
                    })
                    .collect();
                let run = run_sessions(&base, &states, &cfg.stream, &configs)?;
                for (session, (c, label)) in run.sessions.into_iter().zip(&configs) {
                    let ev = evaluate(&truth, &session.trajectory, &base.terrain.heightfield, cfg.alignment)?;
                    info!(
                        "{label}: tracked {:.3}, pos rmse {:?}",
                        ev.report.tracked_fraction, ev.report.pos_rmse_m
                    );
                    out.push(SweepRun {
                        report: RunReport {
                            label: label.clone(),
                            airspeed,
                            roll_rate,
                            altitude,
                            policy: c.policy.name().to_string(),
                            report: ev.report,
                        },
                        estimate: session.trajectory,
                        truth: truth.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Writes the report tree plus each estimate as `<label>.traj`.
pub fn write_sweep(runs: &[SweepRun], out_dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    let reports: Vec<RunReport> = runs.iter().map(|r| r.report.clone()).collect();
    let mut written = emit_report(&reports, out_dir)?;
    for r in runs {
        let path = out_dir.join(format!("{}.traj", file_stem(&r.report.label)));
        r.estimate.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiveStats {
    pub frames: u64,
    pub wall: Duration,
    /// Frames per wall-clock second between the first and last publish.
    pub rate_hz: f64,
}

/// Publishes rendered frames on [`IMAGE_CHANNEL`] and truth poses on
/// [`TRUTH_CHANNEL`], paced to the stream rate in wall time.
pub fn publish_live(
    scene: &Scene,
    states: &[StateSample],
    stream: &StreamConfig,
    publisher: &Publisher,
    max_frames: Option<u64>,
) -> Result<LiveStats, ScenarioError> {
    let period = Duration::from_secs_f64(1.0 / stream.fps);
    let start = Instant::now();
    let mut last = start;
    let mut frames = 0u64;
    let cfg = StreamConfig {
        processing_fps_cap: None,
        ..*stream
    };
    stream_frames(
        states,
        &cfg,
        |id, s| Ok((scene.render(id, s)?, s.pose)),
        |(frame, pose)| {
            let due = start + period * frame.frame_id as u32;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
            let payload = encode_image(&frame).map_err(|e| e.to_string())?;
            publisher
                .publish_fragmented(IMAGE_CHANNEL, frame.t_us, &payload)
                .map_err(|e| e.to_string())?;
            publisher
                .publish(TRUTH_CHANNEL, frame.t_us, &encode_pose(&pose))
                .map_err(|e| e.to_string())?;
            last = Instant::now();
            frames += 1;
            Ok(if max_frames.is_some_and(|m| frames >= m) {
                SinkControl::Stop
            } else {
                SinkControl::Continue
            })
        },
    )?;
    let span = (last - start).as_secs_f64();
    Ok(LiveStats {
        frames,
        wall: start.elapsed(),
        rate_hz: if frames > 1 && span > 0.0 {
            (frames - 1) as f64 / span
        } else {
            0.0
        },
    })
}

/// Decodes an image message, numbering frames by sequence.
pub fn frame_from_message(msg: &crate::transport::MessageEnvelope) -> Result<ImageFrame, ScenarioError> {
    Ok(decode_image(&msg.payload, msg.seq)?)
}
