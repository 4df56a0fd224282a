//! Flat `key = value` configuration file shared by every subcommand.
//! Unknown keys are rejected so typos surface immediately.

use std::collections::BTreeMap;
use std::path::Path;

use rvio_core::filter::NoiseConfig;
use rvio_core::geom::{Quat, Vec3};
use rvio_core::manager::TrackPolicy;
use rvio_core::range::LrfModel;
use rvio_core::sim::{SimOptions, TrajectoryKind, TrajectorySpec};
use rvio_core::state::{CameraExtrinsics, InertialState, WorldModel};
use rvio_core::vio::FilterConfig;
use rvio_core::{Error, Result};

const KNOWN_KEYS: &[&str] = &[
    // filter
    "m",
    "n",
    "sigma_na",
    "sigma_nba",
    "sigma_ng",
    "sigma_nbg",
    "sigma_v",
    "sigma_r",
    "d_min",
    "min_baseline",
    "gate_confidence",
    "range_gate",
    "beam_dot_threshold",
    "extrinsics_p",
    "extrinsics_q",
    "lrf_dir",
    "gravity",
    "init_std_pos",
    "init_std_vel",
    "init_std_att",
    "init_std_bg",
    "init_std_ba",
    "init_p",
    "init_v",
    "init_q",
    "tile_rows",
    "tile_cols",
    "image_half_width",
    // trajectory / simulation
    "trajectory",
    "duration",
    "start",
    "speed",
    "accel",
    "radius",
    "amplitude",
    "frequency",
    "imu_rate",
    "cam_rate",
    "lrf_rate",
    "seed",
    "fov_half_angle_deg",
    "min_feature_depth",
    "terrain_base",
    "terrain_amp",
    "sim_imu_noise",
    "sim_meas_noise",
    "sim_bias_walk",
    "sim_bias_g",
    "sim_bias_a",
    // observability
    "obs_ticks",
];

/// Parsed configuration with typed accessors over the raw map.
#[derive(Debug, Clone)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("cannot read config {}: {e}", path.display())))?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::data_at(lineno + 1, format!("expected 'key = value', got '{raw}'")));
            };
            let key = key.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(Error::data_at(lineno + 1, format!("unknown config key '{key}'")));
            }
            if values.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::data_at(lineno + 1, format!("duplicate config key '{key}'")));
            }
        }
        Ok(Config { values })
    }

    pub fn empty() -> Config {
        Config {
            values: BTreeMap::new(),
        }
    }

    fn f64_at(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<f64>()
                .map_err(|_| Error::data(format!("config key '{key}': '{v}' is not a number"))),
        }
    }

    fn usize_at(&self, key: &str, default: usize) -> Result<usize> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<usize>()
                .map_err(|_| Error::data(format!("config key '{key}': '{v}' is not an integer"))),
        }
    }

    fn u64_at(&self, key: &str, default: u64) -> Result<u64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse::<u64>()
                .map_err(|_| Error::data(format!("config key '{key}': '{v}' is not an integer"))),
        }
    }

    fn bool_at(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("true") | Some("1") => Ok(true),
            Some("false") | Some("0") => Ok(false),
            Some(v) => Err(Error::data(format!("config key '{key}': '{v}' is not a boolean"))),
        }
    }

    fn vec3_at(&self, key: &str, default: Vec3) -> Result<Vec3> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::data(format!("config key '{key}': expected 'x,y,z'")));
                }
                let mut out = Vec3::zeros();
                for (i, p) in parts.iter().enumerate() {
                    out[i] = p
                        .parse::<f64>()
                        .map_err(|_| Error::data(format!("config key '{key}': '{p}' is not a number")))?;
                }
                Ok(out)
            }
        }
    }

    fn quat_at(&self, key: &str, default: Quat) -> Result<Quat> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => {
                let parts: Vec<&str> = v.split(',').map(str::trim).collect();
                if parts.len() != 4 {
                    return Err(Error::data(format!("config key '{key}': expected 'w,x,y,z'")));
                }
                let mut q = [0.0; 4];
                for (i, p) in parts.iter().enumerate() {
                    q[i] = p
                        .parse::<f64>()
                        .map_err(|_| Error::data(format!("config key '{key}': '{p}' is not a number")))?;
                }
                Ok(Quat::new(q[0], q[1], q[2], q[3]))
            }
        }
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        let d = NoiseConfig::default();
        Ok(NoiseConfig {
            sigma_na: self.f64_at("sigma_na", d.sigma_na)?,
            sigma_nba: self.f64_at("sigma_nba", d.sigma_nba)?,
            sigma_ng: self.f64_at("sigma_ng", d.sigma_ng)?,
            sigma_nbg: self.f64_at("sigma_nbg", d.sigma_nbg)?,
            sigma_v: self.f64_at("sigma_v", d.sigma_v)?,
            sigma_r: self.f64_at("sigma_r", d.sigma_r)?,
        })
    }

    pub fn filter(&self) -> Result<FilterConfig> {
        let d = FilterConfig::default();
        let noise = self.noise()?;
        let config = FilterConfig {
            m: self.usize_at("m", d.m)?,
            n: self.usize_at("n", d.n)?,
            noise,
            d_min: self.f64_at("d_min", d.d_min)?,
            min_baseline: self.f64_at("min_baseline", d.min_baseline)?,
            gate_confidence: self.f64_at("gate_confidence", d.gate_confidence)?,
            range_gate: self.f64_at("range_gate", d.range_gate)?,
            beam_dot_threshold: self.f64_at("beam_dot_threshold", d.beam_dot_threshold)?,
            extrinsics: CameraExtrinsics {
                p_ic: self.vec3_at("extrinsics_p", d.extrinsics.p_ic)?,
                q_ic: self.quat_at("extrinsics_q", d.extrinsics.q_ic)?,
            },
            lrf: LrfModel::new(
                self.vec3_at("lrf_dir", d.lrf.u_r_c)?.normalize(),
                noise.sigma_r,
            )?,
            world: WorldModel {
                g_w: self.vec3_at("gravity", d.world.g_w)?,
            },
            policy: TrackPolicy {
                max_slam_features: self.usize_at("n", d.n)?,
                tile_rows: self.usize_at("tile_rows", d.policy.tile_rows)?,
                tile_cols: self.usize_at("tile_cols", d.policy.tile_cols)?,
                image_half_width: self.f64_at("image_half_width", d.policy.image_half_width)?,
            },
            init_std_pos: self.f64_at("init_std_pos", d.init_std_pos)?,
            init_std_vel: self.f64_at("init_std_vel", d.init_std_vel)?,
            init_std_att: self.f64_at("init_std_att", d.init_std_att)?,
            init_std_bg: self.f64_at("init_std_bg", d.init_std_bg)?,
            init_std_ba: self.f64_at("init_std_ba", d.init_std_ba)?,
            use_range: true,
            use_vision: true,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn trajectory(&self) -> Result<TrajectorySpec> {
        let d = TrajectorySpec::default();
        let kind = match self.values.get("trajectory") {
            None => d.kind,
            Some(v) => TrajectoryKind::parse(v).map_err(|e| Error::data(e.to_string()))?,
        };
        let spec = TrajectorySpec {
            kind,
            duration: self.f64_at("duration", d.duration)?,
            start: self.vec3_at("start", d.start)?,
            speed: self.f64_at("speed", d.speed)?,
            accel: self.f64_at("accel", d.accel)?,
            radius: self.f64_at("radius", d.radius)?,
            amplitude: self.f64_at("amplitude", d.amplitude)?,
            frequency: self.f64_at("frequency", d.frequency)?,
            imu_rate: self.f64_at("imu_rate", d.imu_rate)?,
            cam_rate: self.f64_at("cam_rate", d.cam_rate)?,
            lrf_rate: self.f64_at("lrf_rate", d.lrf_rate)?,
            seed: self.u64_at("seed", d.seed)?,
        };
        spec.validate().map_err(|e| Error::data(e.to_string()))?;
        Ok(spec)
    }

    pub fn sim_options(&self) -> Result<SimOptions> {
        let d = SimOptions::default();
        Ok(SimOptions {
            noise: self.noise()?,
            with_imu_noise: self.bool_at("sim_imu_noise", d.with_imu_noise)?,
            with_measurement_noise: self.bool_at("sim_meas_noise", d.with_measurement_noise)?,
            with_bias_walk: self.bool_at("sim_bias_walk", d.with_bias_walk)?,
            bias_g: self.vec3_at("sim_bias_g", d.bias_g)?,
            bias_a: self.vec3_at("sim_bias_a", d.bias_a)?,
            fov_half_angle: self.f64_at("fov_half_angle_deg", 45.0)?.to_radians(),
            min_depth: self.f64_at("min_feature_depth", d.min_depth)?,
        })
    }

    pub fn terrain(&self) -> Result<(f64, f64)> {
        Ok((self.f64_at("terrain_base", 0.0)?, self.f64_at("terrain_amp", 0.2)?))
    }

    pub fn obs_ticks(&self) -> Result<usize> {
        self.usize_at("obs_ticks", 60)
    }

    /// Explicit initial state, if the config provides one.
    pub fn initial_state(&self) -> Result<Option<InertialState>> {
        let has = ["init_p", "init_v", "init_q"]
            .iter()
            .any(|k| self.values.contains_key(*k));
        if !has {
            return Ok(None);
        }
        Ok(Some(InertialState {
            p_wi: self.vec3_at("init_p", Vec3::zeros())?,
            v_wi: self.vec3_at("init_v", Vec3::zeros())?,
            q_wi: self.quat_at("init_q", Quat::IDENTITY)?,
            b_g: Vec3::zeros(),
            b_a: Vec3::zeros(),
        }))
    }

}
