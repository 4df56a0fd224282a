//! The filter driver: wires inertial propagation, the sliding window, SLAM
//! and MSCKF updates, ranged-facet updates and the track policy into one
//! event loop over a dataset.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2};

use crate::error::{Error, Result};
use crate::filter::{
    chi2_quantile, ekf_update, error_jacobians, propagate_covariance, propagate_state, ImuSample,
    NoiseConfig,
};
use crate::geom::Vec3;
use crate::manager::{
    free_feature_slot, init_feature_unknown_depth, install_cartesian_features,
    msckf_init_closed_form, reparametrize_anchor, slide_window, TrackManager, TrackPolicy,
};
use crate::msckf::{
    build_projected_system, check_requirements, qr_compress, triangulate, Track, TrackStatus,
};
use crate::range::{delaunay_facets, range_jacobians, select_facet, LrfModel};
use crate::sim::{Dataset, EstimateSample, RangeSample};
use crate::slam::{feature_in_camera, project, slam_residual_and_jacobians, VisionObservation};
use crate::state::{
    CameraExtrinsics, ErrorCovariance, ErrorLayout, FullState, InertialState, WorldModel,
};

/// Everything the filter needs to run, initialized from user values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub m: usize,
    pub n: usize,
    pub noise: NoiseConfig,
    /// Minimum scene depth assumed by unknown-depth initialization.
    pub d_min: f64,
    /// Minimum camera baseline for MSCKF triangulation.
    pub min_baseline: f64,
    /// Confidence of the visual chi-square gates.
    pub gate_confidence: f64,
    /// Threshold on the squared standardized range residual (df = 1).
    pub range_gate: f64,
    pub beam_dot_threshold: f64,
    pub extrinsics: CameraExtrinsics,
    pub lrf: LrfModel,
    pub world: WorldModel,
    pub policy: TrackPolicy,
    /// Initial standard deviations of the inertial error state.
    pub init_std_pos: f64,
    pub init_std_vel: f64,
    pub init_std_att: f64,
    pub init_std_bg: f64,
    pub init_std_ba: f64,
    pub use_range: bool,
    pub use_vision: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            m: 10,
            n: 15,
            noise: NoiseConfig::default(),
            d_min: 0.5,
            min_baseline: 0.05,
            gate_confidence: 0.95,
            range_gate: 3.841,
            beam_dot_threshold: 0.05,
            extrinsics: CameraExtrinsics {
                p_ic: Vec3::zeros(),
                q_ic: crate::geom::Quat::from_axis_angle(
                    &Vec3::new(1.0, 0.0, 0.0),
                    std::f64::consts::PI,
                ),
            },
            lrf: LrfModel {
                u_r_c: Vec3::new(0.0, 0.0, 1.0),
                sigma_r: 5e-2,
            },
            world: WorldModel::default(),
            policy: TrackPolicy::default(),
            init_std_pos: 1e-3,
            init_std_vel: 5e-2,
            init_std_att: 1e-2,
            init_std_bg: 1e-3,
            init_std_ba: 1e-2,
            use_range: true,
            use_vision: true,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidArgument("window size M must be at least 2".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidArgument("feature capacity N must be positive".into()));
        }
        self.noise.validate()?;
        self.world.validate()?;
        if !(self.d_min > 0.0) || !(self.min_baseline > 0.0) {
            return Err(Error::InvalidArgument("d_min and min_baseline must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gate_confidence) {
            return Err(Error::InvalidArgument("gate confidence must be in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Cumulative event counters, plus one row per frame for the diagnostics
/// file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub frames: usize,
    pub slam_rows: usize,
    pub slam_gated: usize,
    pub msckf_accepted: usize,
    pub msckf_rejected: usize,
    pub promoted: usize,
    pub unknown_inits: usize,
    pub features_dropped: usize,
    pub range_applied: usize,
    pub range_gated: usize,
    pub range_skipped: usize,
    pub updates_rejected: usize,
    pub per_frame: Vec<FrameDiag>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FrameDiag {
    pub t: f64,
    pub slam_rows: usize,
    pub slam_gated: usize,
    pub msckf_accepted: usize,
    pub msckf_rejected: usize,
    pub range_applied: usize,
    pub range_gated: usize,
    pub live_features: usize,
}

/// One range-VIO filter instance.
pub struct RangeVio {
    pub config: FilterConfig,
    pub state: FullState,
    pub cov: ErrorCovariance,
    pub diag: Diagnostics,
    tracks: TrackManager,
    slam_slots: BTreeMap<u64, usize>,
    t: f64,
}

impl RangeVio {
    /// Builds the filter at an initial inertial state. The window is filled
    /// with the initial camera pose (fully correlated with the IMU pose),
    /// and the covariance diagonal comes from the config.
    pub fn new(config: FilterConfig, init: InertialState, t0: f64) -> Result<Self> {
        config.validate()?;
        let layout = ErrorLayout::new(config.m, config.n);
        let state = FullState::new(init, layout);
        let mut cov = ErrorCovariance::zeros(layout);
        {
            let pm = cov.as_matrix_mut();
            let put = |pm: &mut DMatrix<f64>, r: std::ops::Range<usize>, std: f64| {
                for i in r {
                    pm[(i, i)] = std * std;
                }
            };
            put(pm, layout.dp(), config.init_std_pos);
            put(pm, layout.dv(), config.init_std_vel);
            put(pm, layout.dtheta(), config.init_std_att);
            put(pm, layout.dbg(), config.init_std_bg);
            put(pm, layout.dba(), config.init_std_ba);
            // masked feature slots
            for s in 0..layout.n {
                for i in layout.feat(s) {
                    pm[(i, i)] = 1.0;
                }
            }
        }
        let mut vio = RangeVio {
            config,
            state,
            cov,
            diag: Diagnostics::default(),
            tracks: TrackManager::new(),
            slam_slots: BTreeMap::new(),
            t: t0,
        };
        // fill the window with the initial pose
        for _ in 0..config.m {
            slide_window(&mut vio.state, &mut vio.cov, &config.extrinsics)?;
        }
        Ok(vio)
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    /// Propagates state and covariance over [t, t + dt) with one IMU sample.
    pub fn step_imu(&mut self, sample: &ImuSample, dt: f64) -> Result<()> {
        self.state.inertial = propagate_state(&self.state.inertial, sample, dt, &self.config.world)?;
        let (f_d, qd) = error_jacobians(&self.state.inertial, sample, dt, &self.config.noise);
        propagate_covariance(&mut self.cov, &f_d, &qd);
        self.t = sample.t + dt;
        Ok(())
    }

    /// Image-rate processing: window cycle, SLAM update, MSCKF batches,
    /// feature initialization and promotion.
    pub fn process_frame(&mut self, t: f64, matches: &[(u64, Vector2<f64>)]) -> Result<()> {
        self.t = t;
        self.diag.frames += 1;
        let mut fd = FrameDiag {
            t,
            ..Default::default()
        };
        let m = self.config.m;

        // 1. features anchored at the pose about to leave the window
        let leaving: Vec<usize> = self
            .state
            .live_features()
            .filter(|(_, f)| f.anchor == m - 1)
            .map(|(slot, _)| slot)
            .collect();
        for slot in leaving {
            if reparametrize_anchor(&mut self.state, &mut self.cov, slot, 0).is_err() {
                self.drop_feature(slot);
                self.diag.features_dropped += 1;
            }
        }

        // 2. window cycle
        slide_window(&mut self.state, &mut self.cov, &self.config.extrinsics)?;

        if !self.config.use_vision {
            self.diag.per_frame.push(fd);
            return Ok(());
        }

        // 3. track bookkeeping
        let plan = self.tracks.ingest_frame(matches, &self.slam_slots, m);
        for id in &plan.ended_slam {
            if let Some(slot) = self.slam_slots.remove(id) {
                self.drop_feature_slot_only(slot);
                self.diag.features_dropped += 1;
            }
        }

        // 4. stacked SLAM update, gated per feature
        let mut rows: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
        let dim = self.state.layout.dim();
        let sigma_v2 = self.config.noise.sigma_v * self.config.noise.sigma_v;
        for (slot, uv) in &plan.slam {
            let Some(feature) = self.state.features[*slot] else {
                continue;
            };
            let obs = VisionObservation {
                track_id: feature.track_id,
                z: *uv,
                t,
            };
            let row = match slam_residual_and_jacobians(&feature, *slot, &self.state.window, &obs, 0) {
                Ok(r) => r,
                Err(_) => {
                    self.diag.slam_gated += 1;
                    fd.slam_gated += 1;
                    continue;
                }
            };
            let layout = self.state.layout;
            let mut h = DMatrix::zeros(2, dim);
            let mut scatter = |col: usize, block: &nalgebra::Matrix2x3<f64>| {
                for r in 0..2 {
                    for c in 0..3 {
                        h[(r, col + c)] += block[(r, c)];
                    }
                }
            };
            scatter(layout.win_pos(row.anchor_slot).start, &row.h_p_anchor);
            scatter(layout.win_pos(0).start, &row.h_p_cur);
            scatter(layout.win_att(row.anchor_slot).start, &row.h_theta_anchor);
            scatter(layout.win_att(0).start, &row.h_theta_cur);
            scatter(layout.feat(*slot).start, &row.h_f);

            // chi-square gate, df = 2
            let residual = DVector::from_vec(vec![row.residual.x, row.residual.y]);
            let s = &h * self.cov.as_matrix() * h.transpose() + DMatrix::identity(2, 2) * sigma_v2;
            let pass = match s.cholesky() {
                Some(ch) => residual.dot(&ch.solve(&residual)) <= chi2_quantile(2, self.config.gate_confidence),
                None => false,
            };
            if pass {
                rows.push((residual, h));
                self.diag.slam_rows += 1;
                fd.slam_rows += 1;
            } else {
                self.diag.slam_gated += 1;
                fd.slam_gated += 1;
            }
        }
        if !rows.is_empty() {
            let total = 2 * rows.len();
            let mut residual = DVector::zeros(total);
            let mut h = DMatrix::zeros(total, dim);
            for (i, (r, hr)) in rows.iter().enumerate() {
                residual.rows_mut(2 * i, 2).copy_from(r);
                h.view_mut((2 * i, 0), (2, dim)).copy_from(hr);
            }
            let r = DMatrix::identity(total, total) * sigma_v2;
            match ekf_update(&mut self.state, &mut self.cov, &residual, &h, &r) {
                Ok(_) => {}
                Err(Error::UpdateRejected(_)) => self.diag.updates_rejected += 1,
                Err(e) => return Err(e),
            }
        }

        // 5. MSCKF batches: triangulate, split into promotion candidates and
        //    plain constraints
        let mut triangulated: Vec<(Track, Vec3)> = Vec::new();
        for track in plan.msckf {
            if check_requirements(&track, &self.state.window, self.config.min_baseline).is_err() {
                self.diag.msckf_rejected += 1;
                fd.msckf_rejected += 1;
                continue;
            }
            match triangulate(&track, &self.state.window) {
                Ok(p_w) => triangulated.push((track, p_w)),
                Err(_) => {
                    self.diag.msckf_rejected += 1;
                    fd.msckf_rejected += 1;
                }
            }
        }

        let free = self.state.free_feature_slots();
        let mut occupancy = vec![0usize; self.config.policy.tile_rows * self.config.policy.tile_cols];
        for (_, f) in self.state.live_features() {
            if let Ok(p_c) = feature_in_camera(&f, &self.state.window, 0) {
                if let Ok(uv) = project(&p_c) {
                    occupancy[self.config.policy.tile_of(&uv)] += 1;
                }
            }
        }
        // promotion candidates: tracks that filled the window and are still
        // alive get a chance to continue as SLAM features
        let candidates: Vec<(u64, usize, Vector2<f64>)> = triangulated
            .iter()
            .filter(|(t, _)| t.status == TrackStatus::Active || t.observations.first().map(|(s, _)| *s) == Some(0))
            .map(|(t, _)| {
                let newest = t.observations.iter().min_by_key(|(s, _)| *s).unwrap();
                (t.track_id, t.observations.len(), newest.1)
            })
            .collect();
        let chosen = self
            .config
            .policy
            .select_promotions(&candidates, free.len(), occupancy.clone());
        let (promote, constrain): (Vec<_>, Vec<_>) = triangulated
            .into_iter()
            .partition(|(t, _)| chosen.contains(&t.track_id));

        // 5a. plain MSCKF constraint update
        if !constrain.is_empty() {
            let sys = build_projected_system(
                &constrain,
                &self.state.window,
                &self.cov,
                &self.state.layout,
                self.config.noise.sigma_v,
                self.config.gate_confidence,
            );
            self.diag.msckf_accepted += sys.accepted.len();
            fd.msckf_accepted += sys.accepted.len();
            self.diag.msckf_rejected += sys.rejected.len();
            fd.msckf_rejected += sys.rejected.len();
            let sys = qr_compress(sys);
            if !sys.is_empty() {
                let r = sys.noise_matrix();
                let (residual, h) = (sys.residual.clone(), sys.h.clone());
                match ekf_update(&mut self.state, &mut self.cov, &residual, &h, &r) {
                    Ok(_) => {}
                    Err(Error::UpdateRejected(_)) => self.diag.updates_rejected += 1,
                    Err(e) => return Err(e),
                }
            }
        }

        // 5b. MSCKF-based feature initialization into free slots
        if !promote.is_empty() {
            let init = msckf_init_closed_form(
                &promote,
                &mut self.state,
                &mut self.cov,
                self.config.noise.sigma_v,
                self.config.gate_confidence,
            )?;
            self.diag.msckf_accepted += init.track_ids.len();
            fd.msckf_accepted += init.track_ids.len();
            self.diag.msckf_rejected += init.fallback.len();
            fd.msckf_rejected += init.fallback.len();
            let slots: Vec<usize> = free.iter().take(init.track_ids.len()).copied().collect();
            if slots.len() == init.track_ids.len() {
                let dropped = install_cartesian_features(&init, &slots, &mut self.state, &mut self.cov)?;
                for (slot, id) in slots.iter().zip(init.track_ids.iter()) {
                    if dropped.contains(id) {
                        continue;
                    }
                    self.slam_slots.insert(*id, *slot);
                    self.tracks.mark_slam(*id);
                    self.diag.promoted += 1;
                }
            }
        }

        // 6. unknown-depth initialization of brand-new tracks into the
        //    remaining free slots
        let free = self.state.free_feature_slots();
        if !free.is_empty() {
            let fresh: Vec<(u64, usize, Vector2<f64>)> = self
                .tracks
                .active_tracks()
                .into_iter()
                .filter(|(_, len, _)| *len == 1)
                .collect();
            let mut occupancy = occupancy;
            for (_, f) in self.state.live_features() {
                let _ = f;
            }
            let chosen = self.config.policy.select_promotions(&fresh, free.len(), std::mem::take(&mut occupancy));
            let mut slot_iter = free.into_iter();
            for id in chosen {
                let Some(slot) = slot_iter.next() else { break };
                let uv = fresh.iter().find(|(i, _, _)| *i == id).unwrap().2;
                init_feature_unknown_depth(
                    &mut self.state,
                    &mut self.cov,
                    slot,
                    &uv,
                    0,
                    id,
                    self.config.d_min,
                    self.config.noise.sigma_v,
                )?;
                self.slam_slots.insert(id, slot);
                self.tracks.mark_slam(id);
                self.diag.unknown_inits += 1;
            }
        }

        fd.live_features = self.state.live_features().count();
        self.diag.per_frame.push(fd);
        Ok(())
    }

    /// Range-rate processing: Delaunay facet over the live SLAM features,
    /// beam-triangle selection, gated scalar update.
    pub fn process_range(&mut self, sample: &RangeSample) -> Result<()> {
        if !self.config.use_range || !self.config.use_vision {
            return Ok(());
        }
        let live: Vec<(usize, crate::state::Feature)> =
            self.state.live_features().map(|(s, f)| (s, *f)).collect();
        if live.len() < 3 {
            self.diag.range_skipped += 1;
            return Ok(());
        }
        // current image positions of the SLAM features
        let mut points = Vec::with_capacity(live.len());
        let mut kept: Vec<(usize, crate::state::Feature)> = Vec::with_capacity(live.len());
        for (slot, f) in live {
            let Ok(p_c) = feature_in_camera(&f, &self.state.window, 0) else {
                continue;
            };
            let Ok(uv) = project(&p_c) else { continue };
            points.push(uv);
            kept.push((slot, f));
        }
        if points.len() < 3 {
            self.diag.range_skipped += 1;
            return Ok(());
        }
        let triangles = delaunay_facets(&points);
        if triangles.is_empty() {
            self.diag.range_skipped += 1;
            return Ok(());
        }
        let Ok(beam_point) = project(&self.config.lrf.u_r_c) else {
            self.diag.range_skipped += 1;
            return Ok(());
        };
        let Some(tri_index) = select_facet(&triangles, &points, &beam_point) else {
            self.diag.range_skipped += 1;
            return Ok(());
        };
        let tri = triangles[tri_index];
        let corner = |i: usize| kept[tri[i]];
        let feats = [corner(0), corner(1), corner(2)];

        let row = match range_jacobians(
            &feats,
            &self.state.window,
            0,
            &self.config.lrf,
            sample.range,
            &self.state.layout,
            self.config.beam_dot_threshold,
        ) {
            Ok(r) => r,
            Err(_) => {
                self.diag.range_skipped += 1;
                return Ok(());
            }
        };

        let h = DMatrix::from_rows(&[row.h.clone()]);
        let sigma_r2 = self.config.lrf.sigma_r * self.config.lrf.sigma_r;
        let s = (&h * self.cov.as_matrix() * h.transpose())[(0, 0)] + sigma_r2;
        if !(row.residual * row.residual / s <= self.config.range_gate) {
            self.diag.range_gated += 1;
            if let Some(last) = self.diag.per_frame.last_mut() {
                last.range_gated += 1;
            }
            return Ok(());
        }
        let residual = DVector::from_element(1, row.residual);
        let r = DMatrix::from_element(1, 1, sigma_r2);
        match ekf_update(&mut self.state, &mut self.cov, &residual, &h, &r) {
            Ok(_) => {
                self.diag.range_applied += 1;
                if let Some(last) = self.diag.per_frame.last_mut() {
                    last.range_applied += 1;
                }
            }
            Err(Error::UpdateRejected(_)) => self.diag.updates_rejected += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }

    fn drop_feature(&mut self, slot: usize) {
        if let Some(f) = self.state.features[slot] {
            self.slam_slots.remove(&f.track_id);
            self.tracks.drop_track(f.track_id);
        }
        free_feature_slot(&mut self.state, &mut self.cov, slot);
    }

    fn drop_feature_slot_only(&mut self, slot: usize) {
        free_feature_slot(&mut self.state, &mut self.cov, slot);
    }

    /// Current estimate with the reported position covariance block.
    pub fn estimate(&self) -> EstimateSample {
        let layout = self.state.layout;
        let mut pos_cov = Matrix3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                pos_cov[(r, c)] = self.cov.as_matrix()[(layout.dp().start + r, layout.dp().start + c)];
            }
        }
        EstimateSample {
            t: self.t,
            p: self.state.inertial.p_wi,
            v: self.state.inertial.v_wi,
            q: self.state.inertial.q_wi,
            pos_cov,
        }
    }

    /// Covariance diagonal, for the estimates file.
    pub fn covariance_diagonal(&self) -> Vec<f64> {
        (0..self.cov.dim()).map(|i| self.cov.as_matrix()[(i, i)]).collect()
    }
}

/// Output of a dataset run: one estimate per frame plus diagnostics.
pub struct RunOutput {
    pub estimates: Vec<EstimateSample>,
    pub diag: Diagnostics,
}

/// Runs the filter over a dataset: IMU samples drive propagation; frames and
/// range samples are processed at their timestamps.
pub fn run_dataset(config: &FilterConfig, data: &Dataset, init: InertialState) -> Result<RunOutput> {
    if data.truth.is_empty() && data.imu.is_empty() {
        return Err(Error::data("dataset carries no samples"));
    }
    let t0 = data
        .imu
        .first()
        .map(|s| s.t)
        .or_else(|| data.frames.first().map(|f| f.t))
        .unwrap_or(0.0);
    let mut vio = RangeVio::new(*config, init, t0)?;
    let mut estimates = Vec::with_capacity(data.frames.len());

    let mut frame_iter = data.frames.iter().peekable();
    let mut range_iter = data.ranges.iter().peekable();

    let mut handle_events = |vio: &mut RangeVio, t: f64, estimates: &mut Vec<EstimateSample>| -> Result<()> {
        while let Some(f) = frame_iter.peek() {
            if f.t <= t + 1e-9 {
                vio.process_frame(f.t, &f.observations)?;
                while let Some(r) = range_iter.peek() {
                    if r.t <= f.t + 1e-9 {
                        vio.process_range(r)?;
                        range_iter.next();
                    } else {
                        break;
                    }
                }
                estimates.push(vio.estimate());
                frame_iter.next();
            } else {
                break;
            }
        }
        Ok(())
    };

    handle_events(&mut vio, t0, &mut estimates)?;
    for (k, sample) in data.imu.iter().enumerate() {
        let dt = if k + 1 < data.imu.len() {
            data.imu[k + 1].t - sample.t
        } else {
            // final interval falls back to the previous spacing
            if k > 0 {
                sample.t - data.imu[k - 1].t
            } else {
                1e-2
            }
        };
        if !(dt > 0.0) {
            return Err(Error::data(format!("non-increasing IMU timestamps at t = {}", sample.t)));
        }
        vio.step_imu(sample, dt)?;
        let now = vio.time();
        handle_events(&mut vio, now, &mut estimates)?;
    }

    Ok(RunOutput {
        estimates,
        diag: vio.diag,
    })
}
