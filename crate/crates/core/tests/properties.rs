//! Property tests for the library invariants.

mod common;

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skybench::calibration::{self, CheckerboardSpec, RefinementProblem};
use skybench::camera::{self, Renderer};
use skybench::eval::{self, PosePair};
use skybench::flight::{self, StateSample};
use skybench::terrain::RasterTexture;
use skybench::transport::{self, LogReader, MessageEnvelope, WireFrame};
use skybench::vo::solver::{self, Pinhole, WindowObservation, WindowProblem};
use skybench::vo::{self, features, FrameStats, KeyframePolicy, TrackState, TrackStatus};
use skybench::{
    CameraIntrinsics, ExposureModel, FlightParams, GeodeticCoord, Heightfield, LocalFrame, Pose, ProceduralTexture,
    SampleStatus, Terrain, TextureField, TrajSample, Trajectory,
};

fn quat(r: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(Vector3::new(
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
        r.random_range(-3.0..3.0),
    ))
}

fn vec3(r: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
    Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
}

fn texture(seed: u64, contrast: f64, wavelength: f64) -> ProceduralTexture {
    ProceduralTexture {
        seed,
        octaves: 6,
        base_wavelength: wavelength,
        contrast,
    }
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn project_unproject_identity(
        fx in 150.0..900.0f64,
        aspect in 0.95..1.05f64,
        k1 in -0.2..0.1f64,
        k2 in -0.05..0.05f64,
        p1 in -0.003..0.003f64,
        p2 in -0.003..0.003f64,
    ) {
        let (w, h) = (640u32, 480u32);
        let k = CameraIntrinsics { fx, fy: fx * aspect, cx: 320.5, cy: 239.5, k1, k2, p1, p2, width: w, height: h };
        // Interior pixels: the distortion inverse is only claimed inside a
        // moderate radius.
        let r_max = 0.5;
        for v in (0..h).step_by(24) {
            for u in (0..w).step_by(32) {
                let pix = Vector2::new(u as f64, v as f64);
                let n = Vector2::new((pix.x - k.cx) / k.fx, (pix.y - k.cy) / k.fy);
                if n.norm() > r_max {
                    continue;
                }
                let ray = k.unproject(&pix).unwrap();
                let back = k.project(&(ray * 7.0)).unwrap();
                prop_assert!((back - pix).norm() < 1e-6, "{pix} -> {back}");
            }
        }
    }

    #[test]
    fn geodetic_round_trip(
        lat in -80.0..80.0f64,
        lon in -179.0..179.0f64,
        alt in -100.0..3000.0f64,
        e in -7000.0..7000.0f64,
        n in -7000.0..7000.0f64,
        u in -500.0..500.0f64,
    ) {
        let frame = LocalFrame::new(GeodeticCoord::new(lat, lon, alt).unwrap());
        let p = Vector3::new(e, n, u);
        let g = frame.enu_to_geodetic(&p);
        let back = frame.geodetic_to_enu(&g);
        prop_assert!((back - p).norm() < 1e-6);
        let g2 = frame.enu_to_geodetic(&back);
        prop_assert!((g2.lat_deg - g.lat_deg).abs() < 1e-9 && (g2.lon_deg - g.lon_deg).abs() < 1e-9);
    }

    #[test]
    fn rotation_angle_symmetric_and_triangle(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = (quat(&mut r), quat(&mut r), quat(&mut r));
        let ang = skybench::geometry::rotation_angle_deg;
        prop_assert!((ang(&a, &b) - ang(&b, &a)).abs() < 1e-9);
        prop_assert!(ang(&a, &c) <= ang(&a, &b) + ang(&b, &c) + 1e-9);
    }

    #[test]
    fn pose_composition_associative(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut pose = || Pose::new(0, quat(&mut r), vec3(&mut r, 100.0));
        let (a, b, c) = (pose(), pose(), pose());
        let l = a.compose(&b).compose(&c);
        let rr = a.compose(&b.compose(&c));
        prop_assert!((l.translation - rr.translation).norm() < 1e-9);
        prop_assert!(l.rotation.angle_to(&rr.rotation) < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// Terrain
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exposure_monotone_over_quantized_inputs(gain in 0.0..8.0f64, offset in -300.0..300.0f64) {
        let e = ExposureModel { gain, offset };
        let mut last = 0u8;
        for q in 0..=255u32 {
            let v = e.apply(q as f64 / 255.0);
            prop_assert!(v >= last, "{q}: {v} < {last}");
            last = v;
        }
    }

    #[test]
    fn texture_is_lipschitz(seed in any::<u64>(), contrast in 0.0..1.0f64, wl in 5.0..200.0f64, x in -5e3..5e3f64, y in -5e3..5e3f64) {
        let t = texture(seed, contrast, wl);
        let l = t.lipschitz_bound();
        let eps = 0.01;
        let i0 = t.intensity_at(x, y);
        prop_assert!((i0 - t.intensity_at(x + eps, y)).abs() <= l * eps + 1e-12);
        prop_assert!((i0 - t.intensity_at(x, y + eps)).abs() <= l * eps + 1e-12);
    }
}

#[test]
fn texture_codomain_on_random_queries() {
    let mut r = ChaCha8Rng::seed_from_u64(21);
    let proc = texture(3, 1.0, 20.0);
    let raster = RasterTexture::bake(&proc, 200, 150, 1.0).unwrap();
    let fields = [TextureField::Procedural(proc), TextureField::Raster(raster)];
    for _ in 0..100_000 {
        let (x, y) = (r.random_range(-1e4..1e4), r.random_range(-1e4..1e4));
        for f in &fields {
            let v = f.intensity_at(x, y);
            assert!((0.0..=1.0).contains(&v), "{v} at ({x}, {y})");
        }
    }
}

// ---------------------------------------------------------------------------
// Virtual camera
// ---------------------------------------------------------------------------

fn nadir(x: f64, y: f64, z: f64, yaw: f64) -> Pose {
    let s = StateSample {
        t_us: 0,
        pose: Pose::new(0, flight::body_attitude(yaw, 0.0, 0.0), Vector3::new(x, y, z)),
        velocity: Vector3::zeros(),
        bank: 0.0,
    };
    flight::camera_pose_at(&s, &flight::nadir_mount())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn rendering_is_deterministic(seed in any::<u64>(), x in -100.0..100.0f64, yaw in -3.0..3.0f64) {
        let k = CameraIntrinsics::from_fov(160, 120, 84.872).unwrap();
        let terrain = Terrain::new(Heightfield::flat(0.0), TextureField::Procedural(texture(seed, 0.6, 20.0)));
        let pose = nadir(x, 0.0, 200.0, yaw);
        let a = Renderer::new(&k).unwrap().render(&pose, &terrain, &ExposureModel::default()).unwrap();
        let b = camera::render_frame(&k, &pose, &terrain, &ExposureModel::default()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn landmark_matches_rendered_marker(px in 20.0..60.0f64, py in 20.0..60.0f64) {
        // One bright texel on a black raster; its centre is the landmark.
        let (w, h, mpt) = (80usize, 80usize, 1.0);
        let (i, j) = (px.floor() as usize, py.floor() as usize);
        let mut texels = vec![0u8; w * h];
        texels[j * w + i] = 255;
        let tex = RasterTexture::new(w, h, texels, mpt).unwrap();
        let terrain = Terrain::new(Heightfield::flat(0.0), TextureField::Raster(tex));
        let k = CameraIntrinsics::from_fov(320, 240, 84.872).unwrap();
        let pose = nadir(40.0, 40.0, 60.0, 0.3);
        let img = camera::render_frame(&k, &pose, &terrain, &ExposureModel::default()).unwrap();
        let (mut sx, mut sy, mut sw) = (0.0, 0.0, 0.0);
        for v in 0..img.height as usize {
            for u in 0..img.width as usize {
                let p = img.at(u, v) as f64;
                sx += p * u as f64;
                sy += p * v as f64;
                sw += p;
            }
        }
        prop_assert!(sw > 0.0);
        let centroid = Vector2::new(sx / sw, sy / sw);
        let marker = Vector3::new((i as f64 + 0.5) * mpt, (j as f64 + 0.5) * mpt, 0.0);
        let obs = camera::observe_landmarks(&k, &pose, &[marker], 0.0, 0);
        prop_assert_eq!(obs.len(), 1);
        prop_assert!((obs[0].pixel - centroid).norm() < 1.0, "{} vs {}", obs[0].pixel, centroid);
    }
}

#[test]
fn downsampled_render_matches_low_resolution() {
    let terrain = Terrain::new(Heightfield::flat(0.0), TextureField::Procedural(texture(8, 0.3, 150.0)));
    let pose = nadir(10.0, -20.0, 300.0, 0.4);
    let hi_k = CameraIntrinsics::from_fov(1280, 960, 84.872).unwrap();
    let lo_k = CameraIntrinsics::from_fov(320, 240, 84.872).unwrap();
    let e = ExposureModel::default();
    let hi = camera::render_frame(&hi_k, &pose, &terrain, &e).unwrap();
    let lo = camera::render_frame(&lo_k, &pose, &terrain, &e).unwrap();
    let mut err = 0.0;
    for v in 0..240 {
        for u in 0..320 {
            let mut s = 0.0;
            for dv in 0..4 {
                for du in 0..4 {
                    s += hi.at(4 * u + du, 4 * v + dv) as f64;
                }
            }
            err += (s / 16.0 - lo.at(u, v) as f64).abs();
        }
    }
    let mae = err / (320.0 * 240.0);
    assert!(mae <= 2.0, "mean absolute error {mae}");
}

// ---------------------------------------------------------------------------
// Flight
// ---------------------------------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn flight_kinematic_bounds(
        airspeed in prop::sample::select(vec![10.0, 15.0, 25.0]),
        roll_rate in prop::sample::select(vec![25.0, 45.0, 65.0]),
        three_loops in any::<bool>(),
    ) {
        let params = FlightParams { airspeed, max_roll_rate: roll_rate, ..FlightParams::default() };
        let mission = if three_loops { flight::preset_three_loops(1.0) } else { flight::preset_oscillating(1.0) };
        let s = flight::generate_trajectory(&mission, &params).unwrap();
        let kappa_max = flight::GRAVITY * params.max_bank.to_radians().tan() / (airspeed * airspeed);
        for (k, x) in s.iter().enumerate() {
            prop_assert!((x.velocity.norm() - airspeed).abs() < 1e-6);
            prop_assert_eq!(x.t_us, flight::sample_time_us(k as u64, params.sample_rate));
        }
        for w in s.windows(2) {
            let dt = (w[1].t_us - w[0].t_us) as f64 * 1e-6;
            prop_assert!(w[1].t_us > w[0].t_us);
            prop_assert!((w[1].bank - w[0].bank).abs() / dt <= roll_rate + 1e-6);
            let (c0, c1) = (w[0].velocity.y.atan2(w[0].velocity.x), w[1].velocity.y.atan2(w[1].velocity.x));
            let mut dchi = c1 - c0;
            if dchi > std::f64::consts::PI { dchi -= std::f64::consts::TAU; }
            if dchi < -std::f64::consts::PI { dchi += std::f64::consts::TAU; }
            let horiz = 0.5 * (w[0].velocity.xy().norm() + w[1].velocity.xy().norm()) * dt;
            prop_assert!(dchi.abs() / horiz <= kappa_max + 1e-9, "curvature {}", dchi.abs() / horiz);
        }
    }
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

fn board() -> CheckerboardSpec {
    CheckerboardSpec {
        inner_cols: 8,
        inner_rows: 6,
        square_size: 0.08,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn calibration_jacobian_matches_finite_differences(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let p = [
            r.random_range(300.0..900.0), r.random_range(300.0..900.0),
            r.random_range(300.0..700.0), r.random_range(200.0..500.0),
            r.random_range(-0.2..0.2), r.random_range(-0.05..0.05),
            r.random_range(-0.01..0.01), r.random_range(-0.01..0.01),
        ];
        let rot = UnitQuaternion::from_scaled_axis(vec3(&mut r, 0.5));
        let t = Vector3::new(r.random_range(-0.3..0.3), r.random_range(-0.3..0.3), r.random_range(0.8..1.5));
        let b = Vector2::new(r.random_range(0.0..0.6), r.random_range(0.0..0.4));
        let (_, ji, jp) = calibration::project_with_jacobians(&p, &rot, &t, &b).unwrap();
        let f = |p: &[f64; 8], rot: &UnitQuaternion<f64>, t: &Vector3<f64>| calibration::project_with_jacobians(p, rot, t, &b).unwrap().0;
        for c in 0..8 {
            let h = if c < 4 { 1e-6 * p[c].abs() } else { 1e-6 };
            let (mut a, mut m) = (p, p);
            a[c] += h;
            m[c] -= h;
            let fd = (f(&a, &rot, &t) - f(&m, &rot, &t)) / (2.0 * h);
            let an = ji.column(c).into_owned();
            prop_assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0), "intrinsic {c}: {fd} vs {an}");
        }
        for c in 0..6 {
            let h = 1e-6;
            let mut d = Vector3::zeros();
            d[c % 3] = h;
            let (fp, fm) = if c < 3 {
                let dr = UnitQuaternion::from_scaled_axis(d);
                (f(&p, &(dr * rot), &t), f(&p, &(dr.inverse() * rot), &t))
            } else {
                (f(&p, &rot, &(t + d)), f(&p, &rot, &(t - d)))
            };
            let fd = (fp - fm) / (2.0 * h);
            let an = jp.column(c).into_owned();
            prop_assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0), "pose {c}: {fd} vs {an}");
        }
    }

    #[test]
    fn calibration_cost_monotone(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::from_fov(1280, 960, r.random_range(60.0..95.0)).unwrap();
        let poses = calibration::orbit_poses(&board(), 6, 1.0, 25.0);
        let views = calibration::synthesize_views(&k, &board(), &poses, 0.3, seed).unwrap();
        let mut problem = RefinementProblem {
            views: &views,
            intrinsics: [k.fx * 1.05, k.fy * 0.97, k.cx + 8.0, k.cy - 5.0, 0.0, 0.0, 0.0, 0.0],
            poses: poses
                .iter()
                .map(|p| (UnitQuaternion::from_scaled_axis(vec3(&mut r, 0.01)) * p.rotation, p.translation + vec3(&mut r, 0.01)))
                .collect(),
        };
        let history = problem.refine(30);
        prop_assert!(history.len() >= 2);
        for w in history.windows(2) {
            prop_assert!(w[1] < w[0], "{history:?}");
        }
    }
}

#[test]
fn calibration_is_scale_equivariant() {
    let k = CameraIntrinsics::from_fov(640, 480, 84.872).unwrap();
    let poses = calibration::orbit_poses(&board(), 8, 1.0, 30.0);
    let views = calibration::synthesize_views(&k, &board(), &poses, 0.0, 0).unwrap();
    let base = calibration::calibrate(&views, 640, 480).unwrap().intrinsics;
    for s in [0.5, 2.0, 4.0] {
        let scaled: Vec<_> = views
            .iter()
            .map(|v| {
                let mut v = v.clone();
                for c in &mut v.correspondences {
                    c.pixel *= s;
                }
                v
            })
            .collect();
        let est = calibration::calibrate(&scaled, (640.0 * s) as u32, (480.0 * s) as u32).unwrap().intrinsics;
        for (a, b) in [(est.fx, base.fx), (est.fy, base.fy), (est.cx, base.cx), (est.cy, base.cy)] {
            assert!(((a / s - b) / b).abs() < 1e-9, "s={s}: {a} vs {b}");
        }
        for (a, b) in [(est.k1, base.k1), (est.k2, base.k2), (est.p1, base.p1), (est.p2, base.p2)] {
            assert!((a - b).abs() < 1e-9, "s={s}: distortion {a} vs {b}");
        }
    }
}

// ---------------------------------------------------------------------------
// VO
// ---------------------------------------------------------------------------

fn random_image(r: &mut ChaCha8Rng, w: usize, h: usize) -> common::Img {
    let kind = r.random_range(0..3);
    let px = (0..w * h)
        .map(|i| match kind {
            0 => r.random_range(0..=255u8),
            1 => r.random_range(0..=8u8),
            _ => ((i % w) * 4 + (i / w) * 3) as u8 ^ if r.random_range(0..30) == 0 { 0x40 } else { 0 },
        })
        .collect();
    common::Img { w, h, px }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn candidate_selection_matches_oracle(seed in any::<u64>(), d in prop::sample::select(vec![4usize, 8]), add in 0.0..20.0f64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let img = random_image(&mut r, 32, 32);
        let mut got: Vec<(usize, usize)> = features::select_candidate_pixels(&img.frame(), d, add).into_iter().map(|p| (p.x, p.y)).collect();
        got.sort();
        let want: Vec<(usize, usize)> = common::oracle_candidate_pixels(&img, d, add).into_iter().collect();
        prop_assert_eq!(got, want);
    }
}

fn pinhole() -> Pinhole {
    Pinhole {
        fx: 175.0,
        fy: 176.0,
        cx: 160.0,
        cy: 120.0,
    }
}

fn random_view(r: &mut ChaCha8Rng) -> (Isometry3<f64>, Vector3<f64>) {
    let t = Isometry3::from_parts(Translation3::from(vec3(r, 5.0)), UnitQuaternion::from_scaled_axis(vec3(r, 0.3)));
    let pc = Vector3::new(r.random_range(-20.0..20.0), r.random_range(-15.0..15.0), r.random_range(20.0..80.0));
    (t, (t.inverse() * nalgebra::Point3::from(pc)).coords)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn reprojection_jacobians_match_finite_differences(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cam = pinhole();
        let (t, xp) = random_view(&mut r);
        let x = xp;
        let u = Vector2::new(150.0, 110.0);
        let (_, jp, jx) = solver::residual_and_jacobians(&cam, &t, &x, &u).unwrap();
        let res = |t: &Isometry3<f64>, x: &Vector3<f64>| solver::residual_and_jacobians(&cam, t, x, &u).unwrap().0;
        let h = 1e-6;
        for c in 0..6 {
            let mut xi = nalgebra::Vector6::zeros();
            xi[c] = h;
            let fd = (res(&solver::apply_update(&t, &xi), &x) - res(&solver::apply_update(&t, &-xi), &x)) / (2.0 * h);
            let an = jp.column(c).into_owned();
            prop_assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0), "pose {c}: {fd} vs {an}");
        }
        for c in 0..3 {
            let mut d = Vector3::zeros();
            d[c] = h;
            let fd = (res(&t, &(x + d)) - res(&t, &(x - d))) / (2.0 * h);
            let an = jx.column(c).into_owned();
            prop_assert!((fd - an).norm() <= 1e-5 * an.norm().max(1.0), "point {c}: {fd} vs {an}");
        }
    }

    #[test]
    fn gauge_scale_leaves_residuals_unchanged(seed in any::<u64>(), s in 0.01..100.0f64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cam = pinhole();
        let (t, x) = random_view(&mut r);
        let u = Vector2::new(r.random_range(0.0..320.0), r.random_range(0.0..240.0));
        let scaled = Isometry3::from_parts(Translation3::from(t.translation.vector * s), t.rotation);
        let a = solver::residual_and_jacobians(&cam, &t, &x, &u).unwrap().0;
        let b = solver::residual_and_jacobians(&cam, &scaled, &(x * s), &u).unwrap().0;
        prop_assert!((a - b).norm() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn window_cost_never_increases(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let cam = pinhole();
        let down = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        let n_poses = r.random_range(2..6);
        let truth: Vec<Isometry3<f64>> = (0..n_poses)
            .map(|i| Isometry3::from_parts(Translation3::new(5.0 * i as f64, 0.0, 60.0), down).inverse())
            .collect();
        let points: Vec<Vector3<f64>> = (0..40).map(|_| Vector3::new(r.random_range(-30.0..50.0), r.random_range(-25.0..25.0), r.random_range(-3.0..3.0))).collect();
        let mut observations = Vec::new();
        for (pi, t) in truth.iter().enumerate() {
            for (xi, x) in points.iter().enumerate() {
                let pc = (t * nalgebra::Point3::from(*x)).coords;
                let noise = Vector2::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                let outlier = if r.random_range(0..20) == 0 { Vector2::new(30.0, -12.0) } else { Vector2::zeros() };
                observations.push(WindowObservation { pose: pi, point: xi, pixel: cam.project(&pc) + noise + outlier });
            }
        }
        let poses: Vec<Isometry3<f64>> = truth
            .iter()
            .enumerate()
            .map(|(i, t)| if i == 0 { *t } else { Isometry3::from_parts(Translation3::from(t.translation.vector + vec3(&mut r, 0.5)), UnitQuaternion::from_scaled_axis(vec3(&mut r, 0.01)) * t.rotation) })
            .collect();
        let mut problem = WindowProblem { cam, poses, points: points.iter().map(|p| p + vec3(&mut r, 0.5)).collect(), observations, huber_delta: 2.0 };
        let report = problem.refine(20).unwrap();
        for w in report.cost_history.windows(2) {
            prop_assert!(w[1] < w[0], "{:?}", report.cost_history);
        }
        prop_assert!(report.final_cost <= report.initial_cost);
        prop_assert!((problem.cost() - report.final_cost).abs() <= 1e-9 * report.final_cost.max(1.0));
    }

    #[test]
    fn pure_rotation_keyframe_contrast(yaw_rate_deg in 15.0..60.0f64, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let k = CameraIntrinsics::from_fov(320, 240, 84.872).unwrap();
        let depth = 300.0;
        // Ground points seen by the first keyframe.
        let ground: Vec<Vector3<f64>> = (0..300).map(|_| Vector3::new(r.random_range(-250.0..250.0), r.random_range(-200.0..200.0), 0.0)).collect();
        let count = |policy: KeyframePolicy| {
            let mut key_yaw = 0.0;
            let mut keyframes = 0;
            for f in 1..=93 {
                let yaw = (yaw_rate_deg * f as f64 / 31.0).to_radians();
                let key = nadir(0.0, 0.0, depth, key_yaw);
                let cur = nadir(0.0, 0.0, depth, yaw);
                let ref_obs = camera::observe_landmarks(&k, &key, &ground, 0.0, 0);
                let cur_obs = camera::observe_landmarks(&k, &cur, &ground, 0.0, 0);
                let mut flows: Vec<f64> = ref_obs
                    .iter()
                    .filter_map(|a| cur_obs.iter().find(|b| b.landmark_id == a.landmark_id).map(|b| (b.pixel - a.pixel).norm()))
                    .collect();
                flows.sort_by(f64::total_cmp);
                let stats = FrameStats {
                    nearest_keyframe_distance: (cur.translation - key.translation).norm(),
                    tracked_fraction: flows.len() as f64 / ref_obs.len().max(1) as f64,
                    median_flow: flows.get(flows.len() / 2).copied().unwrap_or(f64::INFINITY),
                };
                let state = TrackState {
                    status: TrackStatus::Tracking,
                    t_cw: solver::from_pose(&cur),
                    velocity: Isometry3::identity(),
                    reference_keyframe: Some(keyframes),
                    average_scene_depth: depth,
                };
                if vo::keyframe_decision(&policy, &state, &stats) {
                    keyframes += 1;
                    key_yaw = yaw;
                }
            }
            keyframes
        };
        prop_assert_eq!(count(KeyframePolicy::distance_default()), 0);
        prop_assert!(count(KeyframePolicy::view_change_for_width(320)) >= 1);
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

fn random_pairs(r: &mut ChaCha8Rng, n: usize, noise: f64) -> Vec<PosePair> {
    (0..n)
        .map(|i| {
            let truth = Pose::new(i as i64, quat(r), vec3(r, 300.0));
            let est = Pose::new(
                i as i64,
                UnitQuaternion::from_scaled_axis(vec3(r, 0.05)) * truth.rotation,
                truth.translation + vec3(r, noise),
            );
            PosePair {
                t_us: i as i64,
                truth,
                est,
                status: SampleStatus::Tracking,
            }
        })
        .collect()
}

fn traj(label: &str, poses: &[Pose]) -> Trajectory {
    Trajectory::from_samples(
        label,
        poses
            .iter()
            .map(|p| TrajSample {
                pose: *p,
                status: SampleStatus::Tracking,
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_rigid_invariant(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pairs = random_pairs(&mut r, 50, 5.0);
        let g = Pose::new(0, quat(&mut r), vec3(&mut r, 1000.0));
        let moved: Vec<PosePair> = pairs
            .iter()
            .map(|p| PosePair { truth: g.compose(&p.truth), est: g.compose(&p.est), ..*p })
            .collect();
        let (a, b) = (eval::rmse(&pairs), eval::rmse(&moved));
        prop_assert!((a.pos_rmse_m.unwrap() - b.pos_rmse_m.unwrap()).abs() < 1e-9);
        prop_assert!((a.rot_rmse_deg.unwrap() - b.rot_rmse_deg.unwrap()).abs() < 1e-9);
    }

    #[test]
    fn anchor_undoes_uniform_scale(seed in any::<u64>(), s in prop::sample::select(vec![0.1, 1.0, 10.0, 0.37, 4.2])) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..40)
            .map(|i| Pose::new(i * 1000, quat(&mut r), Vector3::new(8.0 * i as f64, r.random_range(-50.0..50.0), r.random_range(100.0..300.0))))
            .collect();
        let est: Vec<Pose> = truth.iter().map(|p| Pose::new(p.t_us, p.rotation, p.translation * s)).collect();
        let (t, e) = (traj("truth", &truth), traj("est", &est));
        let eval = eval::evaluate(&t, &e, &Heightfield::flat(0.0), eval::AlignmentMethod::AltitudeAnchor).unwrap();
        prop_assert!((eval.alignment.unwrap().scale - 1.0 / s).abs() < 1e-9 / s);
        prop_assert!(eval.report.pos_rmse_m.unwrap() < 1e-9);
    }

    #[test]
    fn sim3_residual_at_most_anchor(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..40)
            .map(|i| Pose::new(i * 1000, quat(&mut r), Vector3::new(8.0 * i as f64, r.random_range(-50.0..50.0), r.random_range(100.0..300.0))))
            .collect();
        let est: Vec<Pose> = truth.iter().map(|p| Pose::new(p.t_us, p.rotation, p.translation * 0.5 + vec3(&mut r, 3.0))).collect();
        let (t, e) = (traj("truth", &truth), traj("est", &est));
        let pairs = eval::time_sync(&t, &e).unwrap();
        let sim = eval::sim3_alignment(&pairs).unwrap();
        let anchor = eval::anchor_alignment(&t, &e, &Heightfield::flat(0.0)).unwrap();
        prop_assert!(sim.position_residual(&pairs) <= anchor.position_residual(&pairs) + 1e-9);
    }

    #[test]
    fn time_sync_keeps_estimate_timestamps(seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<Pose> = (0..30).map(|i| Pose::new(i * 32_258, quat(&mut r), vec3(&mut r, 100.0))).collect();
        let mut t_us = r.random_range(-200_000..200_000i64);
        let mut est = Vec::new();
        for _ in 0..40 {
            est.push(Pose::new(t_us, quat(&mut r), vec3(&mut r, 100.0)));
            t_us += r.random_range(1..50_000);
        }
        let (tt, e) = (traj("truth", &truth), traj("est", &est));
        let pairs = eval::time_sync(&tt, &e).unwrap_or_default();
        let (t0, t1) = (truth[0].t_us, truth.last().unwrap().t_us);
        let want: Vec<i64> = est.iter().map(|p| p.t_us).filter(|t| *t >= t0 && *t <= t1).collect();
        let got: Vec<i64> = pairs.iter().map(|p| p.t_us).collect();
        prop_assert_eq!(&got, &want);
        for p in &pairs {
            prop_assert_eq!(p.est.t_us, p.t_us);
        }
    }
}

// ---------------------------------------------------------------------------
// Transport
// ---------------------------------------------------------------------------

fn channel_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9_./-]{1,63}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn wire_round_trip(
        channel in channel_strategy(),
        t_us in any::<i64>(),
        seq in any::<u64>(),
        count in 1u16..8,
        index_seed in any::<u16>(),
        payload in prop::collection::vec(any::<u8>(), 0..2048),
    ) {
        let frame = WireFrame { channel, t_us, seq, fragment_index: index_seed % count, fragment_count: count, payload };
        let bytes = frame.encode().unwrap();
        prop_assert_eq!(bytes.len(), frame.encoded_len());
        let (back, used) = WireFrame::decode(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, frame);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn envelope_round_trip(channel in channel_strategy(), t_us in any::<i64>(), seq in any::<u64>(), payload in prop::collection::vec(any::<u8>(), 0..4096)) {
        let env = MessageEnvelope { channel, t_us, seq, payload };
        prop_assert_eq!(transport::decode_message(&transport::encode_message(&env).unwrap()).unwrap(), env);
    }
}

#[test]
fn seek_matches_linear_scan() {
    let mut r = ChaCha8Rng::seed_from_u64(77);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("seek.navlog");
    let mut t = 0i64;
    let msgs: Vec<MessageEnvelope> = (0..2500u64)
        .map(|i| {
            // Repeated timestamps exercise the first-match rule.
            t += if r.random_range(0..4) == 0 { 0 } else { r.random_range(1..40_000) };
            let len = r.random_range(0..300);
            MessageEnvelope {
                channel: if i % 2 == 0 { "A".into() } else { "B".into() },
                t_us: t,
                seq: i / 2,
                payload: (0..len).map(|_| r.random()).collect(),
            }
        })
        .collect();
    transport::write_log(&path, &msgs).unwrap();
    let log = LogReader::open(&path).unwrap();
    let scan: Vec<(u64, MessageEnvelope)> = log.iter().map(|x| x.unwrap()).collect();
    assert_eq!(scan.len(), msgs.len());
    for _ in 0..100 {
        let q = r.random_range(-10_000..t + 10_000);
        let want = scan.iter().find(|(_, m)| m.t_us >= q).map(|(o, _)| *o);
        assert_eq!(log.seek(q).unwrap(), want, "t = {q}");
    }
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

/// Every JSON object in `v` with its path.
fn objects(v: &serde_json::Value, path: String, out: &mut Vec<String>) {
    match v {
        serde_json::Value::Object(m) => {
            out.push(path.clone());
            for (k, x) in m {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                objects(x, p, out);
            }
        }
        serde_json::Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                objects(x, format!("{path}[{i}]"), out);
            }
        }
        _ => {}
    }
}

fn pointer(path: &str) -> String {
    if path.is_empty() {
        return String::new();
    }
    let mut s = String::new();
    for part in path.split('.') {
        let (name, rest) = part.split_once('[').map(|(a, b)| (a, Some(b))).unwrap_or((part, None));
        s.push('/');
        s.push_str(name);
        if let Some(idx) = rest {
            s.push('/');
            s.push_str(idx.trim_end_matches(']'));
        }
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn unknown_keys_rejected_anywhere(pick in any::<prop::sample::Index>(), key in "[a-z]{3,10}_x") {
        let cfg = skybench::scenario::ScenarioConfig {
            sweep: Some(skybench::scenario::SweepGrid {
                airspeeds: vec![10.0],
                roll_rates: vec![25.0],
                altitudes: vec![300.0],
                policies: vec![KeyframePolicy::distance_default()],
            }),
            detector: Some(vo::DetectorParams::for_width(320)),
            ..Default::default()
        };
        let mut v = serde_json::to_value(&cfg).unwrap();
        let mut paths = Vec::new();
        objects(&v, String::new(), &mut paths);
        let target = pick.get(&paths).clone();
        v.pointer_mut(&pointer(&target)).unwrap().as_object_mut().unwrap().insert(key.clone(), serde_json::json!(1));
        match skybench::scenario::ScenarioConfig::from_json(&v.to_string(), "cfg.json") {
            Err(skybench::scenario::ScenarioError::Config { key: path, message, .. }) => {
                prop_assert!(message.contains("unknown field"), "{message}");
                // The reported path names the key itself or, inside tagged
                // sections, the enclosing section.
                let section = target.split(['.', '[']).next().unwrap_or("");
                prop_assert!(path.contains(&key) || (!section.is_empty() && path.starts_with(section)), "{target}: {path}");
            }
            other => prop_assert!(false, "{target}: accepted or wrong error: {other:?}"),
        }
    }
}
