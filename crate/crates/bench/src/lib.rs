//! Shared scene setup for the pipeline benchmarks.

use skybench::flight::{self, StateSample};
use nalgebra::Vector3;
use skybench::{CameraIntrinsics, Heightfield, Pose, ProceduralTexture, Terrain, TextureField};

/// The desk-scale camera: 320×240 with the wide horizontal field of view.
pub fn desk_camera() -> CameraIntrinsics {
    CameraIntrinsics::from_fov(320, 240, 84.872).expect("valid camera")
}

/// Flat ground under the standard procedural texture, sampled directly.
pub fn standard_terrain() -> Terrain {
    Terrain::new(
        Heightfield::flat(0.0),
        TextureField::Procedural(ProceduralTexture {
            seed: 42,
            octaves: 6,
            base_wavelength: 20.0,
            contrast: 0.6,
        }),
    )
}

/// Level flight heading `yaw` at `(x, y, z)`, seen through the nadir mount.
pub fn nadir_camera_pose(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    let sample = StateSample {
        t_us: 0,
        pose: Pose::new(0, flight::body_attitude(yaw, 0.0, 0.0), Vector3::new(x, y, z)),
        velocity: Vector3::zeros(),
        bank: 0.0,
    };
    flight::camera_pose_at(&sample, &flight::nadir_mount())
}
