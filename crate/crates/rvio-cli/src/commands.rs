//! Implementations of the sim / run / obs / eval subcommands.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use rvio_core::filter::chi2_quantile;
use rvio_core::geom::{quat_mul, small_angle_quat, Vec3};
use rvio_core::observability::ObsSystem;
use rvio_core::sim::{self, Scene, TrajectorySpec};
use rvio_core::state::InertialState;
use rvio_core::vio::{run_dataset, FilterConfig};
use rvio_core::{Error, Result};

use crate::config::Config;
use crate::io;

pub struct CommonOpts {
    pub config: Config,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub trials: Option<usize>,
}

fn trial_dirs(out: &Path, trials: usize) -> Vec<PathBuf> {
    (0..trials).map(|i| out.join(format!("trial_{i:03}"))).collect()
}

fn spec_meta(spec: &TrajectorySpec, dropped_ranges: usize) -> String {
    format!(
        "trajectory = {}\nduration = {}\nstart = {},{},{}\nspeed = {}\naccel = {}\nradius = {}\n\
         amplitude = {}\nfrequency = {}\nimu_rate = {}\ncam_rate = {}\nlrf_rate = {}\nseed = {}\n\
         dropped_ranges = {}\n",
        spec.kind.name(),
        spec.duration,
        spec.start.x,
        spec.start.y,
        spec.start.z,
        spec.speed,
        spec.accel,
        spec.radius,
        spec.amplitude,
        spec.frequency,
        spec.imu_rate,
        spec.cam_rate,
        spec.lrf_rate,
        spec.seed,
        dropped_ranges
    )
}

pub fn cmd_sim(opts: &CommonOpts) -> Result<()> {
    let mut spec = opts.config.trajectory()?;
    if let Some(seed) = opts.seed {
        spec.seed = seed;
    }
    let (base, amp) = opts.config.terrain()?;
    let scene = Scene::for_trajectory(&spec, base, amp)?;
    let sim_opts = opts.config.sim_options()?;
    let filter = opts.config.filter()?;

    let trials = opts.trials.unwrap_or(0);
    if trials == 0 {
        let data = sim::generate(&spec, &scene, &sim_opts, &filter.extrinsics, &filter.lrf, &filter.world)?;
        io::write_dataset(&opts.out, &data, &spec_meta(&spec, data.dropped_ranges))?;
        println!(
            "wrote dataset: {} imu, {} frames, {} ranges ({} dropped) -> {}",
            data.imu.len(),
            data.frames.len(),
            data.ranges.len(),
            data.dropped_ranges,
            opts.out.display()
        );
    } else {
        for (i, dir) in trial_dirs(&opts.out, trials).iter().enumerate() {
            let trial_spec = TrajectorySpec {
                seed: spec.seed.wrapping_add(i as u64),
                ..spec
            };
            let data = sim::generate(
                &trial_spec,
                &scene,
                &sim_opts,
                &filter.extrinsics,
                &filter.lrf,
                &filter.world,
            )?;
            io::write_dataset(dir, &data, &spec_meta(&trial_spec, data.dropped_ranges))?;
        }
        println!("wrote {trials} trial datasets under {}", opts.out.display());
    }
    Ok(())
}

fn initial_state_for(
    config: &Config,
    data: &rvio_core::sim::Dataset,
    filter: &FilterConfig,
    perturb_seed: Option<u64>,
) -> Result<InertialState> {
    let mut init = match config.initial_state()? {
        Some(s) => s,
        None => {
            if data.truth.is_empty() {
                return Err(Error::data(
                    "no initial state: config has no init_* keys and the dataset has no truth.csv",
                ));
            }
            sim::initial_state(data)
        }
    };
    if let Some(seed) = perturb_seed {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut normal = |std: f64| -> f64 { std * rng.sample::<f64, _>(rand_distr::StandardNormal) };
        init.p_wi += Vec3::new(
            normal(filter.init_std_pos),
            normal(filter.init_std_pos),
            normal(filter.init_std_pos),
        );
        init.v_wi += Vec3::new(
            normal(filter.init_std_vel),
            normal(filter.init_std_vel),
            normal(filter.init_std_vel),
        );
        let dth = Vec3::new(
            normal(filter.init_std_att),
            normal(filter.init_std_att),
            normal(filter.init_std_att),
        );
        init.q_wi = quat_mul(&init.q_wi, &small_angle_quat(&dth));
    }
    Ok(init)
}

pub fn cmd_run(opts: &CommonOpts, no_range: bool, no_vision: bool) -> Result<()> {
    let mut filter = opts.config.filter()?;
    filter.use_range = !no_range;
    filter.use_vision = !no_vision;

    let trials = opts.trials.unwrap_or(0);
    let dirs: Vec<PathBuf> = if trials == 0 {
        vec![opts.out.clone()]
    } else {
        trial_dirs(&opts.out, trials)
    };
    for (i, dir) in dirs.iter().enumerate() {
        let data = io::read_dataset(dir)?;
        let perturb = if trials == 0 {
            None
        } else {
            Some(opts.seed.unwrap_or(0).wrapping_add(i as u64).wrapping_mul(2654435761))
        };
        let init = initial_state_for(&opts.config, &data, &filter, perturb)?;
        let out = run_dataset(&filter, &data, init)?;
        io::write_estimates(&dir.join("estimates.csv"), &out.estimates)?;
        io::write_diagnostics(&dir.join("diagnostics.csv"), &out.diag)?;
        println!(
            "{}: {} frames | slam rows {} (gated {}) | msckf accepted {} rejected {} | \
             range applied {} gated {} skipped {} | promoted {} unknown-depth {}",
            dir.display(),
            out.diag.frames,
            out.diag.slam_rows,
            out.diag.slam_gated,
            out.diag.msckf_accepted,
            out.diag.msckf_rejected,
            out.diag.range_applied,
            out.diag.range_gated,
            out.diag.range_skipped,
            out.diag.promoted,
            out.diag.unknown_inits
        );
    }
    Ok(())
}

pub fn cmd_eval(opts: &CommonOpts) -> Result<()> {
    let trials = opts.trials.unwrap_or(0);
    let dirs: Vec<PathBuf> = if trials == 0 {
        vec![opts.out.clone()]
    } else {
        trial_dirs(&opts.out, trials)
    };
    let mut rows = String::from(
        "trial,samples,pos_rmse,vel_rmse,att_rmse_deg,final_pos_err,final_z_err,nees_mean,nees_in_envelope\n",
    );
    let lo = chi2_quantile(3, 0.025);
    let hi = chi2_quantile(3, 0.975);
    let mut final_z: Vec<f64> = Vec::new();
    for (i, dir) in dirs.iter().enumerate() {
        let estimates = io::read_estimates(&dir.join("estimates.csv"))?;
        let truth = io::read_truth(&dir.join("truth.csv"))?;
        let m = sim::evaluate(&estimates, &truth)?;
        let nees_mean = m.nees.iter().copied().sum::<f64>() / m.nees.len().max(1) as f64;
        let inside = m.nees.iter().filter(|&&x| x >= lo && x <= hi).count() as f64
            / m.nees.len().max(1) as f64;
        rows.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            i,
            m.samples,
            io::fmt_f64(m.pos_rmse),
            io::fmt_f64(m.vel_rmse),
            io::fmt_f64(m.att_rmse_deg),
            io::fmt_f64(m.final_pos_err),
            io::fmt_f64(m.final_z_err),
            io::fmt_f64(nees_mean),
            io::fmt_f64(inside)
        ));
        final_z.push(m.final_z_err);
        println!(
            "{}: pos rmse {:.4} m | vel rmse {:.4} m/s | att rmse {:.4} deg | final |z| err {:.4} m",
            dir.display(),
            m.pos_rmse,
            m.vel_rmse,
            m.att_rmse_deg,
            m.final_z_err
        );
    }
    std::fs::write(opts.out.join("metrics.csv"), rows)?;
    if final_z.len() > 1 {
        final_z.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = final_z[final_z.len() / 2];
        println!("median final |z| error over {} trials: {median:.4} m", final_z.len());
    }
    Ok(())
}

pub fn cmd_obs(opts: &CommonOpts) -> Result<()> {
    let spec = opts.config.trajectory()?;
    let filter = opts.config.filter()?;
    let (base, _) = opts.config.terrain()?;
    let ticks = opts.config.obs_ticks()?;

    // deterministic feature ring under the start of the path; the first
    // three corners form the ranged facet
    let c = spec.start;
    let features: Vec<Vec3> = (0..6)
        .map(|k| {
            let angle = k as f64 * std::f64::consts::PI / 3.0 + 0.3;
            let r = 1.2 + 0.25 * (k % 3) as f64;
            Vec3::new(c.x + r * angle.cos(), c.y + r * angle.sin(), base + 0.1 * ((k as f64).sin()))
        })
        .collect();

    // beam direction in the body frame: through the camera extrinsics
    let u_r_body = filter.extrinsics.q_ic.to_rotation().transpose() * filter.lrf.u_r_c;
    let sys = ObsSystem::from_trajectory(&spec, features, u_r_body, &filter.world, ticks)?;
    let report = sys.report();
    let text = report.render();
    print!("{text}");
    std::fs::create_dir_all(&opts.out)?;
    std::fs::write(opts.out.join("obs_report.txt"), &text)?;
    Ok(())
}
