//! Synthetic trajectory, scene and sensor generation, plus evaluation
//! metrics.
//!
//! All built-in trajectories are translation-only (the body keeps a constant
//! attitude while the position traces the path). A nadir-mounted camera then
//! keeps the terrain in view for the whole run, and the zero-rotation error
//! dynamics make the discrete linearized system exact, which the
//! observability analysis relies on.

use nalgebra::Vector2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::filter::{ImuSample, NoiseConfig};
use crate::geom::{quat_mul, Quat, Vec3};
use crate::range::{delaunay_facets, LrfModel};
use crate::state::{CameraExtrinsics, InertialState, WorldModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Hover,
    ConstantVelocity,
    ConstantAcceleration,
    Circle,
    Sinusoid,
}

impl TrajectoryKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hover" => Ok(TrajectoryKind::Hover),
            "constant_velocity" => Ok(TrajectoryKind::ConstantVelocity),
            "constant_acceleration" => Ok(TrajectoryKind::ConstantAcceleration),
            "circle" => Ok(TrajectoryKind::Circle),
            "sinusoid" => Ok(TrajectoryKind::Sinusoid),
            other => Err(Error::InvalidArgument(format!("unknown trajectory kind '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::Hover => "hover",
            TrajectoryKind::ConstantVelocity => "constant_velocity",
            TrajectoryKind::ConstantAcceleration => "constant_acceleration",
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::Sinusoid => "sinusoid",
        }
    }
}

/// Ground-truth trajectory description and sensor rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub duration: f64,
    /// Start position; trajectories fly at constant attitude from here.
    pub start: Vec3,
    pub speed: f64,
    pub accel: f64,
    pub radius: f64,
    pub amplitude: f64,
    pub frequency: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub lrf_rate: f64,
    pub seed: u64,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        TrajectorySpec {
            kind: TrajectoryKind::Hover,
            duration: 10.0,
            start: Vec3::new(0.0, 0.0, 4.0),
            speed: 1.0,
            accel: 0.2,
            radius: 3.0,
            amplitude: 0.5,
            frequency: 0.2,
            imu_rate: 200.0,
            cam_rate: 10.0,
            lrf_rate: 5.0,
            seed: 0,
        }
    }
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::InvalidArgument("duration must be positive".into()));
        }
        if !(self.imu_rate > 0.0 && self.cam_rate > 0.0 && self.lrf_rate > 0.0) {
            return Err(Error::InvalidArgument("sensor rates must be positive".into()));
        }
        if self.imu_rate < self.cam_rate {
            return Err(Error::InvalidArgument("imu_rate must be at least cam_rate".into()));
        }
        let ratio_ic = self.imu_rate / self.cam_rate;
        let ratio_cl = self.cam_rate / self.lrf_rate;
        if (ratio_ic - ratio_ic.round()).abs() > 1e-9 || (ratio_cl - ratio_cl.round()).abs() > 1e-9 {
            return Err(Error::InvalidArgument(
                "imu_rate must be an integer multiple of cam_rate, and cam_rate of lrf_rate".into(),
            ));
        }
        Ok(())
    }

    /// Position, velocity and acceleration at time `t` (world frame).
    pub fn truth_at(&self, t: f64) -> (Vec3, Vec3, Vec3) {
        match self.kind {
            TrajectoryKind::Hover => (self.start, Vec3::zeros(), Vec3::zeros()),
            TrajectoryKind::ConstantVelocity => {
                let v = Vec3::new(self.speed, 0.0, 0.0);
                (self.start + v * t, v, Vec3::zeros())
            }
            TrajectoryKind::ConstantAcceleration => {
                let v0 = Vec3::new(self.speed, 0.0, 0.0);
                let a = Vec3::new(self.accel, 0.0, 0.0);
                (self.start + v0 * t + a * (0.5 * t * t), v0 + a * t, a)
            }
            TrajectoryKind::Circle => {
                let omega = self.speed / self.radius;
                let (s, c) = (omega * t).sin_cos();
                let p = self.start + self.radius * Vec3::new(c - 1.0, s, 0.0);
                let v = self.radius * omega * Vec3::new(-s, c, 0.0);
                let a = -self.radius * omega * omega * Vec3::new(c, s, 0.0);
                (p, v, a)
            }
            TrajectoryKind::Sinusoid => {
                let w = 2.0 * std::f64::consts::PI * self.frequency;
                let p = self.start + Vec3::new(self.speed * t, 0.0, self.amplitude * (w * t).sin());
                let v = Vec3::new(self.speed, 0.0, self.amplitude * w * (w * t).cos());
                let a = Vec3::new(0.0, 0.0, -self.amplitude * w * w * (w * t).sin());
                (p, v, a)
            }
        }
    }

    /// Axis-aligned bounds of the flown path, for scene construction.
    pub fn path_bounds(&self) -> (Vec3, Vec3) {
        let mut lo = self.start;
        let mut hi = self.start;
        let steps = 512;
        for k in 0..=steps {
            let t = self.duration * k as f64 / steps as f64;
            let (p, _, _) = self.truth_at(t);
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        (lo, hi)
    }
}

/// Landmarks on a terrain height field plus the ground-truth facet mesh
/// (Delaunay over the landmark ground positions).
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub landmarks: Vec<Vec3>,
    pub mesh: Vec<[usize; 3]>,
}

impl Scene {
    /// Regular grid of landmarks over `[lo, hi]` in x/y with terrain height
    /// `z = base + amp * sin(0.7 x) cos(0.9 y)`.
    pub fn grid(
        lo: Vector2<f64>,
        hi: Vector2<f64>,
        nx: usize,
        ny: usize,
        base: f64,
        amp: f64,
    ) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::InvalidArgument("scene grid needs at least 2x2 landmarks".into()));
        }
        let mut landmarks = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                let x = lo.x + (hi.x - lo.x) * ix as f64 / (nx - 1) as f64;
                let y = lo.y + (hi.y - lo.y) * iy as f64 / (ny - 1) as f64;
                let z = base + amp * (0.7 * x).sin() * (0.9 * y).cos();
                landmarks.push(Vec3::new(x, y, z));
            }
        }
        let ground: Vec<Vector2<f64>> = landmarks.iter().map(|p| Vector2::new(p.x, p.y)).collect();
        let mesh = delaunay_facets(&ground);
        if mesh.is_empty() {
            return Err(Error::InvalidArgument("scene landmarks are degenerate".into()));
        }
        Ok(Scene { landmarks, mesh })
    }

    /// Scene sized for a trajectory: landmarks cover the flight path
    /// footprint with margin.
    pub fn for_trajectory(spec: &TrajectorySpec, terrain_base: f64, terrain_amp: f64) -> Result<Self> {
        let (lo, hi) = spec.path_bounds();
        let altitude = 0.5 * ((lo.z - terrain_base) + (hi.z - terrain_base));
        let margin = (altitude * 1.2).max(2.0);
        let span_x = (hi.x - lo.x) + 2.0 * margin;
        let span_y = (hi.y - lo.y) + 2.0 * margin;
        let density = 1.6; // meters between landmarks, roughly
        let nx = ((span_x / density).ceil() as usize + 2).clamp(6, 60);
        let ny = ((span_y / density).ceil() as usize + 2).clamp(6, 60);
        Scene::grid(
            Vector2::new(lo.x - margin, lo.y - margin),
            Vector2::new(hi.x + margin, hi.y + margin),
            nx,
            ny,
            terrain_base,
            terrain_amp,
        )
    }

    /// First intersection of a ray with the terrain mesh.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let mut best: Option<f64> = None;
        for tri in &self.mesh {
            let (a, b, c) = (
                &self.landmarks[tri[0]],
                &self.landmarks[tri[1]],
                &self.landmarks[tri[2]],
            );
            if let Some(t) = ray_triangle(origin, dir, a, b, c) {
                best = Some(best.map_or(t, |cur: f64| cur.min(t)));
            }
        }
        best
    }
}

/// Moller-Trumbore ray/triangle intersection; returns the ray parameter.
pub fn ray_triangle(origin: &Vec3, dir: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - a;
    let u = tvec.dot(&pvec) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    (t > 1e-9).then_some(t)
}

/// Simulation switches around the shared [`NoiseConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOptions {
    pub noise: NoiseConfig,
    pub with_imu_noise: bool,
    pub with_measurement_noise: bool,
    pub with_bias_walk: bool,
    pub bias_g: Vec3,
    pub bias_a: Vec3,
    pub fov_half_angle: f64,
    pub min_depth: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            noise: NoiseConfig::default(),
            with_imu_noise: true,
            with_measurement_noise: true,
            with_bias_walk: false,
            bias_g: Vec3::zeros(),
            bias_a: Vec3::zeros(),
            fov_half_angle: 45f64.to_radians(),
            min_depth: 0.1,
        }
    }
}

impl SimOptions {
    pub fn noiseless() -> Self {
        SimOptions {
            with_imu_noise: false,
            with_measurement_noise: false,
            with_bias_walk: false,
            ..SimOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub t: f64,
    /// (track id, normalized image coordinates)
    pub observations: Vec<(u64, Vector2<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSample {
    pub t: f64,
    pub range: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
}

/// Time-ordered synthetic sensor streams with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<Frame>,
    pub ranges: Vec<RangeSample>,
    pub truth: Vec<TruthSample>,
    /// Range samples whose beam missed the terrain mesh.
    pub dropped_ranges: usize,
}

/// Generates a dataset by inverting the sensor models along the trajectory:
/// specific force from the analytic acceleration and gravity, features from
/// pinhole projection of visible landmarks, ranges from exact ray/mesh
/// intersection. Deterministic for a given seed.
pub fn generate(
    spec: &TrajectorySpec,
    scene: &Scene,
    opts: &SimOptions,
    extrinsics: &CameraExtrinsics,
    lrf: &LrfModel,
    world: &WorldModel,
) -> Result<Dataset> {
    spec.validate()?;
    opts.noise.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut normal = |std: f64| -> f64 {
        if std == 0.0 {
            return 0.0;
        }
        let v: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal);
        std * v
    };

    let q_body = Quat::IDENTITY;
    let c_body = q_body.to_rotation();
    let dt = 1.0 / spec.imu_rate;
    let n_imu = (spec.duration * spec.imu_rate).round() as usize;
    let imu_per_frame = (spec.imu_rate / spec.cam_rate).round() as usize;
    let frames_per_range = (spec.cam_rate / spec.lrf_rate).round() as usize;

    let tan_fov = opts.fov_half_angle.tan();
    let mut bias_g = opts.bias_g;
    let mut bias_a = opts.bias_a;

    let mut data = Dataset {
        imu: Vec::with_capacity(n_imu),
        frames: Vec::new(),
        ranges: Vec::new(),
        truth: Vec::with_capacity(n_imu + 1),
        dropped_ranges: 0,
    };

    let mut frame_index = 0usize;
    for k in 0..=n_imu {
        let t = k as f64 * dt;
        let (p, v, a_w) = spec.truth_at(t);
        data.truth.push(TruthSample { t, p, v, q: q_body });

        // camera events fire on the IMU grid
        if k % imu_per_frame == 0 {
            let p_c = p + c_body.transpose() * extrinsics.p_ic;
            let q_c = quat_mul(&q_body, &extrinsics.q_ic);
            let c_cam = q_c.to_rotation();
            let mut observations = Vec::new();
            for (id, lm) in scene.landmarks.iter().enumerate() {
                let in_cam = c_cam * (lm - p_c);
                if in_cam.z < opts.min_depth {
                    continue;
                }
                if (in_cam.x * in_cam.x + in_cam.y * in_cam.y).sqrt() / in_cam.z > tan_fov {
                    continue;
                }
                let mut uv = Vector2::new(in_cam.x / in_cam.z, in_cam.y / in_cam.z);
                if opts.with_measurement_noise {
                    uv.x += normal(opts.noise.sigma_v);
                    uv.y += normal(opts.noise.sigma_v);
                }
                observations.push((id as u64, uv));
            }
            data.frames.push(Frame { t, observations });

            if frame_index % frames_per_range == 0 {
                let u_r_w = c_cam.transpose() * lrf.u_r_c;
                match scene.raycast(&p_c, &u_r_w) {
                    Some(range) => {
                        let noisy = if opts.with_measurement_noise {
                            range + normal(opts.noise.sigma_r)
                        } else {
                            range
                        };
                        data.ranges.push(RangeSample { t, range: noisy });
                    }
                    None => data.dropped_ranges += 1,
                }
            }
            frame_index += 1;
        }

        if k == n_imu {
            break;
        }
        // IMU sample covering [t, t + dt)
        let omega_imu = bias_g
            + if opts.with_imu_noise {
                Vec3::new(
                    normal(opts.noise.sigma_ng / dt.sqrt()),
                    normal(opts.noise.sigma_ng / dt.sqrt()),
                    normal(opts.noise.sigma_ng / dt.sqrt()),
                )
            } else {
                Vec3::zeros()
            };
        let a_imu = c_body * (a_w - world.g_w)
            + bias_a
            + if opts.with_imu_noise {
                Vec3::new(
                    normal(opts.noise.sigma_na / dt.sqrt()),
                    normal(opts.noise.sigma_na / dt.sqrt()),
                    normal(opts.noise.sigma_na / dt.sqrt()),
                )
            } else {
                Vec3::zeros()
            };
        data.imu.push(ImuSample { t, omega_imu, a_imu });

        if opts.with_bias_walk {
            for i in 0..3 {
                bias_g[i] += normal(opts.noise.sigma_nbg * dt.sqrt());
                bias_a[i] += normal(opts.noise.sigma_nba * dt.sqrt());
            }
        }
    }
    Ok(data)
}

/// Per-sample estimate with the reported position covariance block, for
/// consistency evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateSample {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub q: Quat,
    pub pos_cov: nalgebra::Matrix3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub samples: usize,
    pub pos_rmse: f64,
    pub vel_rmse: f64,
    pub att_rmse_deg: f64,
    pub final_pos_err: f64,
    pub final_z_err: f64,
    /// Position NEES per matched sample.
    pub nees: Vec<f64>,
}

/// Compares estimates to ground truth on matching timestamps.
pub fn evaluate(estimates: &[EstimateSample], truth: &[TruthSample]) -> Result<Metrics> {
    let mut pos_sq = 0.0;
    let mut vel_sq = 0.0;
    let mut att_sq = 0.0;
    let mut nees = Vec::new();
    let mut last: Option<(f64, f64)> = None;
    let mut matched = 0usize;

    let mut ti = 0usize;
    for est in estimates {
        while ti < truth.len() && truth[ti].t < est.t - 1e-9 {
            ti += 1;
        }
        if ti >= truth.len() || (truth[ti].t - est.t).abs() > 1e-9 {
            continue;
        }
        let tr = &truth[ti];
        let dp = est.p - tr.p;
        let dv = est.v - tr.v;
        let dq = quat_mul(&tr.q.conjugate(), &est.q);
        pos_sq += dp.norm_squared();
        vel_sq += dv.norm_squared();
        att_sq += dq.angle().powi(2);
        if let Some(chol) = est.pos_cov.cholesky() {
            let e = chol.solve(&dp);
            nees.push(dp.dot(&e));
        } else {
            nees.push(f64::NAN);
        }
        last = Some((dp.norm(), dp.z.abs()));
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::data("no overlapping timestamps between estimates and truth"));
    }
    let n = matched as f64;
    let (final_pos_err, final_z_err) = last.unwrap();
    Ok(Metrics {
        samples: matched,
        pos_rmse: (pos_sq / n).sqrt(),
        vel_rmse: (vel_sq / n).sqrt(),
        att_rmse_deg: (att_sq / n).sqrt().to_degrees(),
        final_pos_err,
        final_z_err,
        nees,
    })
}

/// Initial truth state of a dataset.
pub fn initial_state(data: &Dataset) -> InertialState {
    let t0 = &data.truth[0];
    InertialState {
        p_wi: t0.p,
        v_wi: t0.v,
        q_wi: t0.q,
        b_g: Vec3::zeros(),
        b_a: Vec3::zeros(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::range::{build_facet, range_predict, DEFAULT_BEAM_DOT_THRESHOLD};
    use crate::slam::{slam_residual_and_jacobians, VisionObservation};
    use crate::state::{Feature, FeatureStatus, SlidingWindow};
    use approx::assert_abs_diff_eq;

    fn nadir_extrinsics() -> CameraExtrinsics {
        CameraExtrinsics {
            p_ic: Vec3::zeros(),
            q_ic: Quat::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), std::f64::consts::PI),
        }
    }

    fn down_lrf() -> LrfModel {
        LrfModel::new(Vec3::new(0.0, 0.0, 1.0), 0.05).unwrap()
    }

    fn flat_scene() -> Scene {
        Scene::grid(Vector2::new(-8.0, -8.0), Vector2::new(8.0, 8.0), 9, 9, 0.0, 0.0).unwrap()
    }

    #[test]
    fn hover_noiseless_imu_is_constant() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            duration: 1.0,
            ..Default::default()
        };
        let world = WorldModel::default();
        let data = generate(
            &spec,
            &flat_scene(),
            &SimOptions::noiseless(),
            &nadir_extrinsics(),
            &down_lrf(),
            &world,
        )
        .unwrap();
        let expected_a = Quat::IDENTITY.to_rotation() * (-world.g_w);
        for s in &data.imu {
            assert_abs_diff_eq!(s.omega_imu, Vec3::zeros(), epsilon = 0.0);
            assert_abs_diff_eq!(s.a_imu, expected_a, epsilon = 0.0);
        }
        // every feature track is constant across frames
        let first = &data.frames[0];
        for f in &data.frames[1..] {
            assert_eq!(f.observations.len(), first.observations.len());
            for ((id_a, uv_a), (id_b, uv_b)) in f.observations.iter().zip(&first.observations) {
                assert_eq!(id_a, id_b);
                assert_abs_diff_eq!(uv_a, uv_b, epsilon = 0.0);
            }
        }
    }

    #[test]
    fn nadir_range_over_flat_terrain() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            duration: 1.0,
            start: Vec3::new(0.0, 0.0, 4.0),
            ..Default::default()
        };
        let data = generate(
            &spec,
            &flat_scene(),
            &SimOptions::noiseless(),
            &nadir_extrinsics(),
            &down_lrf(),
            &WorldModel::default(),
        )
        .unwrap();
        assert!(!data.ranges.is_empty());
        for r in &data.ranges {
            assert_abs_diff_eq!(r.range, 4.0, epsilon = 1e-12);
        }
        assert_eq!(data.dropped_ranges, 0);
    }

    #[test]
    fn constant_velocity_truth_closed_form() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::ConstantVelocity,
            duration: 5.0,
            speed: 1.0,
            ..Default::default()
        };
        let data = generate(
            &spec,
            &Scene::for_trajectory(&spec, 0.0, 0.0).unwrap(),
            &SimOptions::noiseless(),
            &nadir_extrinsics(),
            &down_lrf(),
            &WorldModel::default(),
        )
        .unwrap();
        for s in &data.truth {
            let expected = spec.start + Vec3::new(1.0, 0.0, 0.0) * s.t;
            assert!((s.p - expected).norm() <= 1e-12);
        }
    }

    #[test]
    fn imu_count_example() {
        // hover 1 s at 200 Hz gives 200 samples
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            duration: 1.0,
            imu_rate: 200.0,
            cam_rate: 10.0,
            lrf_rate: 5.0,
            ..Default::default()
        };
        let data = generate(
            &spec,
            &flat_scene(),
            &SimOptions::noiseless(),
            &nadir_extrinsics(),
            &down_lrf(),
            &WorldModel::default(),
        )
        .unwrap();
        assert_eq!(data.imu.len(), 200);
    }

    #[test]
    fn seeded_generation_reproducible() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Circle,
            duration: 3.0,
            seed: 1234,
            ..Default::default()
        };
        let scene = Scene::for_trajectory(&spec, 0.0, 0.3).unwrap();
        let opts = SimOptions::default();
        let world = WorldModel::default();
        let a = generate(&spec, &scene, &opts, &nadir_extrinsics(), &down_lrf(), &world).unwrap();
        let b = generate(&spec, &scene, &opts, &nadir_extrinsics(), &down_lrf(), &world).unwrap();
        assert_eq!(a, b, "same seed must reproduce the dataset bit-exactly");
        let spec2 = TrajectorySpec { seed: 1235, ..spec };
        let c = generate(&spec2, &scene, &opts, &nadir_extrinsics(), &down_lrf(), &world).unwrap();
        assert_ne!(a, c);
    }

    /// Round-trip: the SLAM measurement model reproduces noiseless
    /// observations from ground-truth poses with zero residual.
    #[test]
    fn slam_model_roundtrip_on_truth() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::ConstantVelocity,
            duration: 2.0,
            speed: 0.8,
            ..Default::default()
        };
        let ext = nadir_extrinsics();
        let scene = Scene::for_trajectory(&spec, 0.0, 0.2).unwrap();
        let data = generate(
            &spec,
            &scene,
            &SimOptions::noiseless(),
            &ext,
            &down_lrf(),
            &WorldModel::default(),
        )
        .unwrap();

        // window of the two most recent frames (slot 0 = newest)
        let f_new = &data.frames[data.frames.len() - 1];
        let f_old = &data.frames[data.frames.len() - 2];
        let mut window = SlidingWindow::new(2);
        for (slot, fr) in [(0usize, f_new), (1usize, f_old)] {
            let truth = data.truth.iter().find(|s| (s.t - fr.t).abs() < 1e-12).unwrap();
            window.positions[slot] = truth.p + truth.q.to_rotation().transpose() * ext.p_ic;
            window.orientations[slot] = quat_mul(&truth.q, &ext.q_ic);
        }
        let mut checked = 0;
        for (id, uv_old) in &f_old.observations {
            let Some((_, uv_new)) = f_new.observations.iter().find(|(i, _)| i == id) else {
                continue;
            };
            // anchor the landmark at slot 1 using its observed bearing and true depth
            let lm = scene.landmarks[*id as usize];
            let in_anchor = window.orientations[1].to_rotation() * (lm - window.positions[1]);
            let feature = Feature {
                alpha: uv_old.x,
                beta: uv_old.y,
                rho: 1.0 / in_anchor.z,
                anchor: 1,
                track_id: *id,
                status: FeatureStatus::Slam,
            };
            let obs = VisionObservation {
                track_id: *id,
                z: *uv_new,
                t: f_new.t,
            };
            let row = slam_residual_and_jacobians(&feature, 0, &window, &obs, 0).unwrap();
            assert!(row.residual.norm() <= 1e-12, "roundtrip residual {}", row.residual.norm());
            checked += 1;
        }
        assert!(checked > 3);
    }

    /// Range samples satisfy the facet equation exactly pre-noise when the
    /// facet vertices come from the terrain mesh triangle that was hit.
    #[test]
    fn range_matches_facet_equation() {
        let spec = TrajectorySpec {
            kind: TrajectoryKind::Hover,
            duration: 0.5,
            start: Vec3::new(0.3, -0.2, 3.0),
            ..Default::default()
        };
        let ext = nadir_extrinsics();
        let lrf = down_lrf();
        let scene = Scene::grid(Vector2::new(-6.0, -6.0), Vector2::new(6.0, 6.0), 7, 7, 0.0, 0.4).unwrap();
        let data =
            generate(&spec, &scene, &SimOptions::noiseless(), &ext, &lrf, &WorldModel::default()).unwrap();
        assert!(!data.ranges.is_empty());

        let truth = &data.truth[0];
        let p_c = truth.p;
        let q_c = quat_mul(&truth.q, &ext.q_ic);
        let u_r_w = q_c.to_rotation().transpose() * lrf.u_r_c;

        // find the mesh triangle the beam hits
        let mut hit = None;
        for tri in &scene.mesh {
            if ray_triangle(
                &p_c,
                &u_r_w,
                &scene.landmarks[tri[0]],
                &scene.landmarks[tri[1]],
                &scene.landmarks[tri[2]],
            )
            .is_some()
            {
                hit = Some(*tri);
            }
        }
        let tri = hit.expect("beam must hit the mesh");

        // facet features anchored at the camera with exact inverse depth
        let mut window = SlidingWindow::new(1);
        window.positions[0] = p_c;
        window.orientations[0] = q_c;
        let c = q_c.to_rotation();
        let mut feats = Vec::new();
        for (k, &li) in tri.iter().enumerate() {
            let in_cam = c * (scene.landmarks[li] - p_c);
            feats.push((
                k,
                Feature {
                    alpha: in_cam.x / in_cam.z,
                    beta: in_cam.y / in_cam.z,
                    rho: 1.0 / in_cam.z,
                    anchor: 0,
                    track_id: li as u64,
                    status: FeatureStatus::Slam,
                },
            ));
        }
        let facet = build_facet(&[feats[0], feats[1], feats[2]], &window, 0, &lrf).unwrap();
        let predicted = range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).unwrap();
        assert_abs_diff_eq!(predicted, data.ranges[0].range, epsilon = 1e-10);
    }

    #[test]
    fn evaluate_examples() {
        let truth: Vec<TruthSample> = (0..10)
            .map(|k| TruthSample {
                t: k as f64 * 0.1,
                p: Vec3::new(k as f64, 0.0, 1.0),
                v: Vec3::new(1.0, 0.0, 0.0),
                q: Quat::IDENTITY,
            })
            .collect();
        let exact: Vec<EstimateSample> = truth
            .iter()
            .map(|t| EstimateSample {
                t: t.t,
                p: t.p,
                v: t.v,
                q: t.q,
                pos_cov: nalgebra::Matrix3::identity(),
            })
            .collect();
        let m = evaluate(&exact, &truth).unwrap();
        assert_eq!(m.pos_rmse, 0.0);
        assert_eq!(m.att_rmse_deg, 0.0);

        let shifted: Vec<EstimateSample> = exact
            .iter()
            .map(|e| EstimateSample {
                p: e.p + Vec3::new(1.0, 0.0, 0.0),
                ..e.clone()
            })
            .collect();
        let m = evaluate(&shifted, &truth).unwrap();
        assert_abs_diff_eq!(m.pos_rmse, 1.0, epsilon = 1e-12);

        // no overlap is an error
        let off: Vec<EstimateSample> = exact
            .iter()
            .map(|e| EstimateSample {
                t: e.t + 1000.0,
                ..e.clone()
            })
            .collect();
        assert!(evaluate(&off, &truth).is_err());
    }

    /// Monte-Carlo consistency oracle: NEES of a correctly-specified linear
    /// Kalman filter averages the state dimension.
    #[test]
    fn nees_of_consistent_filter() {
        use rand::rngs::StdRng;
        let mut rng = StdRng::seed_from_u64(77);
        let dim = 3;
        let trials = 100;
        let steps = 50;
        let q: f64 = 0.01; // process noise variance
        let r: f64 = 0.04; // measurement noise variance
        let mut normal = |std: f64| -> f64 { std * rng.sample::<f64, _>(rand_distr::StandardNormal) };

        let mut nees_acc = 0.0;
        let mut count = 0usize;
        for _ in 0..trials {
            let mut x_true = Vec3::zeros();
            let mut x_est = Vec3::zeros();
            let mut p = nalgebra::Matrix3::<f64>::identity() * 0.1;
            for _ in 0..steps {
                // random walk truth
                for i in 0..3 {
                    x_true[i] += normal(q.sqrt());
                }
                p += nalgebra::Matrix3::identity() * q;
                let z = Vec3::new(
                    x_true.x + normal(r.sqrt()),
                    x_true.y + normal(r.sqrt()),
                    x_true.z + normal(r.sqrt()),
                );
                let s = p + nalgebra::Matrix3::identity() * r;
                let k = p * s.try_inverse().unwrap();
                x_est += k * (z - x_est);
                p = (nalgebra::Matrix3::identity() - k) * p;
                let e = x_est - x_true;
                nees_acc += e.dot(&(p.try_inverse().unwrap() * e));
                count += 1;
            }
        }
        let avg = nees_acc / count as f64;
        let expect = dim as f64;
        assert!(
            (avg - expect).abs() / expect < 0.2,
            "average NEES {avg} should be near {expect}"
        );
    }
}
