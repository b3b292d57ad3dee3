//! Synthetic benchmark for monocular visual odometry on fixed-wing aircraft.

pub mod calibration;
pub mod camera;
pub mod eval;
pub mod flight;
pub mod geometry;
pub mod scenario;
pub mod terrain;
pub mod transport;
pub mod vo;

pub use eval::{ErrorReport, SampleStatus, TrajSample, Trajectory};
pub use flight::{FlightParams, Mission, StateSample};
pub use geometry::{CameraIntrinsics, GeodeticCoord, LocalFrame, Pose};
pub use terrain::{ExposureModel, GrayImage, Heightfield, ProceduralTexture, RasterTexture, Terrain, TextureField};
