//! Sliding-window lifecycle, SLAM feature initialization (unknown-depth and
//! MSCKF-based), anchor reparametrization and the SLAM/MSCKF track policy.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::filter::{chi2_quantile, ekf_update};
use crate::geom::{quat_mul, skew, Mat3, Vec3};
use crate::msckf::{build_feature_system, column_space_and_left_nullspace, Track, TrackStatus};
use crate::slam::{inverse_depth_jacobian, DEPTH_EPSILON};
use crate::state::{
    CameraExtrinsics, ErrorCovariance, Feature, FeatureStatus, FullState, INERTIAL_ERR_DIM,
};

// ---------------------------------------------------------------------------
// Sliding window
// ---------------------------------------------------------------------------

/// FIFO window cycle at image rate: drops the oldest pose, shifts every slot
/// by one, inserts the camera pose derived from the current IMU estimate at
/// slot 0, and maps the covariance through the corresponding Jacobian.
///
/// Features must not be anchored at the slot about to leave; reparametrize
/// or drop them first.
pub fn slide_window(
    state: &mut FullState,
    p: &mut ErrorCovariance,
    extrinsics: &CameraExtrinsics,
) -> Result<()> {
    let layout = state.layout;
    let m = layout.m;
    if m == 0 {
        return Err(Error::InvalidArgument("sliding window has no slots".into()));
    }
    for (slot, f) in state.live_features() {
        if f.anchor == m - 1 {
            return Err(Error::InvalidArgument(format!(
                "feature slot {slot} still anchored at the leaving pose"
            )));
        }
    }

    let c_wi_t = state.inertial.q_wi.to_rotation().transpose();
    let new_pos = state.inertial.p_wi + c_wi_t * extrinsics.p_ic;
    let new_att = quat_mul(&state.inertial.q_wi, &extrinsics.q_ic);

    // error-state Jacobian of the window cycle
    let dim = layout.dim();
    let mut j = DMatrix::zeros(dim, dim);
    for i in 0..INERTIAL_ERR_DIM {
        j[(i, i)] = 1.0;
    }
    for s in 0..layout.n {
        let r = layout.feat(s);
        for i in r {
            j[(i, i)] = 1.0;
        }
    }
    // new camera pose from the IMU pose
    let dp_rows = layout.win_pos(0);
    let datt_rows = layout.win_att(0);
    for k in 0..3 {
        j[(dp_rows.start + k, layout.dp().start + k)] = 1.0;
    }
    let dp_dtheta = -c_wi_t * skew(&extrinsics.p_ic);
    let datt_dtheta = extrinsics.q_ic.to_rotation();
    for r in 0..3 {
        for c in 0..3 {
            j[(dp_rows.start + r, layout.dtheta().start + c)] = dp_dtheta[(r, c)];
            j[(datt_rows.start + r, layout.dtheta().start + c)] = datt_dtheta[(r, c)];
        }
    }
    // shifted poses
    for s in 1..m {
        let (pr, pc) = (layout.win_pos(s), layout.win_pos(s - 1));
        let (ar, ac) = (layout.win_att(s), layout.win_att(s - 1));
        for k in 0..3 {
            j[(pr.start + k, pc.start + k)] = 1.0;
            j[(ar.start + k, ac.start + k)] = 1.0;
        }
    }

    let new_p = &j * p.as_matrix() * j.transpose();
    *p.as_matrix_mut() = new_p;
    p.symmetrize();

    // state bookkeeping
    for s in (1..m).rev() {
        state.window.positions[s] = state.window.positions[s - 1];
        state.window.orientations[s] = state.window.orientations[s - 1];
    }
    state.window.positions[0] = new_pos;
    state.window.orientations[0] = new_att;
    for f in state.features.iter_mut().flatten() {
        f.anchor += 1;
        debug_assert!(f.anchor < m);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Feature initialization: unknown depth
// ---------------------------------------------------------------------------

/// Initializes a SLAM feature from a single observation: bearing from the
/// measurement, inverse depth `1/(2 d_min)` with standard deviation
/// `1/(4 d_min)`, no cross-covariance.
#[allow(clippy::too_many_arguments)]
pub fn init_feature_unknown_depth(
    state: &mut FullState,
    p: &mut ErrorCovariance,
    slot: usize,
    obs: &Vector2<f64>,
    anchor_slot: usize,
    track_id: u64,
    d_min: f64,
    sigma_v: f64,
) -> Result<()> {
    if !(d_min > 0.0) {
        return Err(Error::InvalidArgument("d_min must be positive".into()));
    }
    if state.features[slot].is_some() {
        return Err(Error::InvalidArgument(format!("feature slot {slot} is occupied")));
    }
    let rho0 = 1.0 / (2.0 * d_min);
    let sigma_rho0 = 1.0 / (4.0 * d_min);
    state.features[slot] = Some(Feature {
        alpha: obs.x,
        beta: obs.y,
        rho: rho0,
        anchor: anchor_slot,
        track_id,
        status: FeatureStatus::Slam,
    });

    let r = state.layout.feat(slot);
    let dim = p.dim();
    let pm = p.as_matrix_mut();
    for i in r.clone() {
        for k in 0..dim {
            pm[(i, k)] = 0.0;
            pm[(k, i)] = 0.0;
        }
    }
    pm[(r.start, r.start)] = sigma_v * sigma_v;
    pm[(r.start + 1, r.start + 1)] = sigma_v * sigma_v;
    pm[(r.start + 2, r.start + 2)] = sigma_rho0 * sigma_rho0;
    Ok(())
}

/// Frees a feature slot: masks its covariance to identity with no coupling.
pub fn free_feature_slot(state: &mut FullState, p: &mut ErrorCovariance, slot: usize) {
    state.features[slot] = None;
    let r = state.layout.feat(slot);
    let dim = p.dim();
    let pm = p.as_matrix_mut();
    for i in r.clone() {
        for k in 0..dim {
            pm[(i, k)] = 0.0;
            pm[(k, i)] = 0.0;
        }
        pm[(i, i)] = 1.0;
    }
}

// ---------------------------------------------------------------------------
// Feature initialization: from MSCKF measurements
// ---------------------------------------------------------------------------

/// Cartesian-stage output of the closed-form MSCKF initialization, before
/// features are converted to inverse depth.
#[derive(Debug, Clone)]
pub struct MsckfInitCartesian {
    /// State correction applied by the H0 update.
    pub dx: DVector<f64>,
    /// Track ids initialized, in order.
    pub track_ids: Vec<u64>,
    /// Posterior cartesian feature estimates.
    pub points: Vec<Vec3>,
    /// Cross covariance between the new features and the state, 3q x dim.
    pub p21: DMatrix<f64>,
    /// Covariance of the new features, 3q x 3q.
    pub p22: DMatrix<f64>,
    /// Tracks that could not take the closed-form path.
    pub fallback: Vec<(u64, String)>,
}

/// Runs the closed-form feature initialization for a batch of triangulated
/// tracks: the left-nullspace projected parts are stacked into one EKF
/// update, and each feature estimate plus its covariance blocks follow from
/// the infinite-prior limit of the augmented update.
pub fn msckf_init_closed_form(
    candidates: &[(Track, Vec3)],
    state: &mut FullState,
    p: &mut ErrorCovariance,
    sigma_v: f64,
    gate_confidence: f64,
) -> Result<MsckfInitCartesian> {
    let layout = state.layout;
    let dim = layout.dim();

    struct Piece {
        track_id: u64,
        point: Vec3,
        h0: DMatrix<f64>,
        h1: DMatrix<f64>,
        h2: Mat3,
        bt_z: Vec3,
        z0: DVector<f64>,
    }
    let mut pieces: Vec<Piece> = Vec::new();
    let mut fallback = Vec::new();

    for (track, point) in candidates {
        let m = track.observations.len();
        if m < 2 {
            fallback.push((track.track_id, "fewer than two observations".into()));
            continue;
        }
        let sys = match build_feature_system(track, &state.window, point, &layout) {
            Ok(s) => s,
            Err(e) => {
                fallback.push((track.track_id, e.to_string()));
                continue;
            }
        };
        let (b, a) = match column_space_and_left_nullspace(&sys.h_f) {
            Ok(ba) => ba,
            Err(e) => {
                fallback.push((track.track_id, e.to_string()));
                continue;
            }
        };
        let h2_dyn = b.transpose() * &sys.h_f; // 3x3
        let svd = h2_dyn.clone().svd(false, false);
        let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
        if !(smin > 0.0) || smax / smin > 1e10 {
            fallback.push((track.track_id, "H2 ill-conditioned".into()));
            continue;
        }
        let z0 = a.transpose() * &sys.residual;
        let h0 = a.transpose() * &sys.h_x;
        // gate on the projected innovation
        let s_gate = &h0 * p.as_matrix() * h0.transpose()
            + DMatrix::identity(z0.len(), z0.len()) * sigma_v * sigma_v;
        let pass = match s_gate.cholesky() {
            Some(ch) => z0.dot(&ch.solve(&z0)) <= chi2_quantile(z0.len(), gate_confidence),
            None => false,
        };
        if !pass {
            fallback.push((track.track_id, "chi-square gate".into()));
            continue;
        }
        let bt_z_dyn = b.transpose() * &sys.residual;
        let mut h2 = Mat3::zeros();
        for r in 0..3 {
            for c in 0..3 {
                h2[(r, c)] = h2_dyn[(r, c)];
            }
        }
        pieces.push(Piece {
            track_id: track.track_id,
            point: *point,
            h1: b.transpose() * &sys.h_x,
            bt_z: Vec3::new(bt_z_dyn[0], bt_z_dyn[1], bt_z_dyn[2]),
            h2,
            h0,
            z0,
        });
    }

    if pieces.is_empty() {
        return Ok(MsckfInitCartesian {
            dx: DVector::zeros(dim),
            track_ids: vec![],
            points: vec![],
            p21: DMatrix::zeros(0, dim),
            p22: DMatrix::zeros(0, 0),
            fallback,
        });
    }

    // stacked H0 update
    let rows: usize = pieces.iter().map(|pc| pc.z0.len()).sum();
    let mut h0 = DMatrix::zeros(rows, dim);
    let mut z0 = DVector::zeros(rows);
    let mut at = 0;
    for pc in &pieces {
        h0.view_mut((at, 0), (pc.h0.nrows(), dim)).copy_from(&pc.h0);
        z0.rows_mut(at, pc.z0.len()).copy_from(&pc.z0);
        at += pc.z0.len();
    }
    let r0 = DMatrix::identity(rows, rows) * sigma_v * sigma_v;
    let before = state.clone();
    ekf_update(state, p, &z0, &h0, &r0)?;
    // recover the applied correction for the feature update formula
    let dx = recover_correction(&before, state);

    // closed-form feature estimates and covariance blocks
    let q = pieces.len();
    let mut h1_all = DMatrix::zeros(3 * q, dim);
    let mut h2_inv_all = DMatrix::zeros(3 * q, 3 * q);
    let mut points = Vec::with_capacity(q);
    let mut track_ids = Vec::with_capacity(q);
    for (k, pc) in pieces.iter().enumerate() {
        let h2_inv = pc
            .h2
            .try_inverse()
            .ok_or_else(|| Error::Numerical("H2 inversion failed".into()))?;
        let h1_dx = &pc.h1 * &dx;
        let correction = h2_inv * Vec3::new(h1_dx[0], h1_dx[1], h1_dx[2]) - h2_inv * pc.bt_z;
        points.push(pc.point - correction);
        track_ids.push(pc.track_id);
        h1_all.view_mut((3 * k, 0), (3, dim)).copy_from(&pc.h1);
        h2_inv_all.view_mut((3 * k, 3 * k), (3, 3)).copy_from(&h2_inv);
    }
    let h2inv_h1 = &h2_inv_all * &h1_all;
    let p21 = -&h2inv_h1 * p.as_matrix();
    let p22 = &h2inv_h1 * p.as_matrix() * h2inv_h1.transpose()
        + sigma_v * sigma_v * (&h2_inv_all * h2_inv_all.transpose());

    Ok(MsckfInitCartesian {
        dx,
        track_ids,
        points,
        p21,
        p22,
        fallback,
    })
}

/// Error-state difference between two states, matching the correction that
/// mapped `before` to `after`.
fn recover_correction(before: &FullState, after: &FullState) -> DVector<f64> {
    let layout = before.layout;
    let mut dx = DVector::zeros(layout.dim());
    let mut put = |r: std::ops::Range<usize>, v: Vec3| {
        dx[r.start] = v.x;
        dx[r.start + 1] = v.y;
        dx[r.start + 2] = v.z;
    };
    put(layout.dp(), after.inertial.p_wi - before.inertial.p_wi);
    put(layout.dv(), after.inertial.v_wi - before.inertial.v_wi);
    let dq = quat_mul(&before.inertial.q_wi.conjugate(), &after.inertial.q_wi);
    put(layout.dtheta(), dq.vec() * (2.0 / dq.w));
    put(layout.dbg(), after.inertial.b_g - before.inertial.b_g);
    put(layout.dba(), after.inertial.b_a - before.inertial.b_a);
    for s in 0..layout.m {
        put(layout.win_pos(s), after.window.positions[s] - before.window.positions[s]);
        let dq = quat_mul(&before.window.orientations[s].conjugate(), &after.window.orientations[s]);
        put(layout.win_att(s), dq.vec() * (2.0 / dq.w));
    }
    for s in 0..layout.n {
        if let (Some(b), Some(a)) = (&before.features[s], &after.features[s]) {
            put(layout.feat(s), Vec3::new(a.alpha - b.alpha, a.beta - b.beta, a.rho - b.rho));
        }
    }
    dx
}

/// Converts closed-form cartesian features to inverse depth anchored at the
/// newest window pose and installs them into the given free slots, wiring
/// the covariance through the conversion Jacobian.
///
/// Returns the track ids that could not be installed (non-positive depth in
/// the new anchor frame).
pub fn install_cartesian_features(
    init: &MsckfInitCartesian,
    slots: &[usize],
    state: &mut FullState,
    p: &mut ErrorCovariance,
) -> Result<Vec<u64>> {
    assert_eq!(slots.len(), init.track_ids.len());
    let layout = state.layout;
    let dim = layout.dim();
    let q = init.track_ids.len();
    if q == 0 {
        return Ok(vec![]);
    }

    let c0 = state.window.orientations[0].to_rotation();
    let p0 = state.window.positions[0];

    // augmented covariance over [state | cartesian features]
    let big = dim + 3 * q;
    let mut p_aug = DMatrix::zeros(big, big);
    p_aug.view_mut((0, 0), (dim, dim)).copy_from(p.as_matrix());
    p_aug.view_mut((dim, 0), (3 * q, dim)).copy_from(&init.p21);
    p_aug.view_mut((0, dim), (dim, 3 * q)).copy_from(&init.p21.transpose());
    p_aug.view_mut((dim, dim), (3 * q, 3 * q)).copy_from(&init.p22);

    // conversion transform: identity on the state, per-feature rows mapping
    // (δp_c0, δθ_c0, δp_w) to the inverse-depth error
    let mut u = DMatrix::zeros(big, big);
    for i in 0..dim {
        u[(i, i)] = 1.0;
    }
    let mut dropped = Vec::new();
    let mut installed: Vec<(usize, usize, u64, Vec3)> = Vec::new();
    for (k, (&slot, point)) in slots.iter().zip(init.points.iter()).enumerate() {
        let g = c0 * (point - p0);
        if g.z <= DEPTH_EPSILON {
            dropped.push(init.track_ids[k]);
            continue;
        }
        let (alpha, beta, rho) = (g.x / g.z, g.y / g.z, 1.0 / g.z);
        let j1 = rho
            * Mat3::new(
                1.0, 0.0, -alpha, //
                0.0, 1.0, -beta, //
                0.0, 0.0, -rho,
            );
        let row0 = dim + 3 * k;
        let d_dpc = -j1 * c0;
        let d_dth = j1 * skew(&g);
        let d_dpw = j1 * c0;
        for r in 0..3 {
            for c in 0..3 {
                u[(row0 + r, layout.win_pos(0).start + c)] = d_dpc[(r, c)];
                u[(row0 + r, layout.win_att(0).start + c)] = d_dth[(r, c)];
                u[(row0 + r, dim + 3 * k + c)] = d_dpw[(r, c)];
            }
        }
        installed.push((k, slot, init.track_ids[k], Vec3::new(alpha, beta, rho)));
    }

    let p_new = &u * &p_aug * u.transpose();

    // feature states
    for &(_, slot, track_id, params) in &installed {
        if state.features[slot].is_some() {
            return Err(Error::InvalidArgument(format!("feature slot {slot} is occupied")));
        }
        state.features[slot] = Some(Feature {
            alpha: params.x,
            beta: params.y,
            rho: params.z,
            anchor: 0,
            track_id,
            status: FeatureStatus::Slam,
        });
    }
    // covariance rows/columns
    let pm = p.as_matrix_mut();
    for &(ka, slot_a, _, _) in &installed {
        let fa = layout.feat(slot_a);
        for r in 0..3 {
            for c in 0..dim {
                pm[(fa.start + r, c)] = p_new[(dim + 3 * ka + r, c)];
                pm[(c, fa.start + r)] = p_new[(c, dim + 3 * ka + r)];
            }
        }
        for &(kb, slot_b, _, _) in &installed {
            let fb = layout.feat(slot_b);
            for r in 0..3 {
                for c in 0..3 {
                    pm[(fa.start + r, fb.start + c)] = p_new[(dim + 3 * ka + r, dim + 3 * kb + c)];
                }
            }
        }
    }
    p.symmetrize();
    Ok(dropped)
}

// ---------------------------------------------------------------------------
// Anchor reparametrization
// ---------------------------------------------------------------------------

/// Moves a feature's inverse-depth parametrization to a new anchor pose and
/// maps the covariance through the reparametrization Jacobian. The world
/// point is unchanged. Fails (feature should be dropped) when the feature
/// lies behind the new anchor.
pub fn reparametrize_anchor(
    state: &mut FullState,
    p: &mut ErrorCovariance,
    feature_slot: usize,
    new_anchor: usize,
) -> Result<()> {
    let layout = state.layout;
    let f = state.features[feature_slot]
        .ok_or_else(|| Error::InvalidArgument(format!("feature slot {feature_slot} is empty")))?;
    let old = f.anchor;
    let c_new = state.window.orientations[new_anchor].to_rotation();
    let c_old_t = state.window.orientations[old].to_rotation().transpose();
    let p_new = state.window.positions[new_anchor];
    let p_old = state.window.positions[old];
    let bearing = Vec3::new(f.alpha, f.beta, 1.0);

    let g = c_new * (p_old - p_new + c_old_t * bearing / f.rho);
    if g.z <= DEPTH_EPSILON {
        return Err(Error::Numerical(format!(
            "reparametrization leaves feature {feature_slot} behind the new anchor (depth {})",
            g.z
        )));
    }
    let (alpha2, beta2, rho2) = (g.x / g.z, g.y / g.z, 1.0 / g.z);

    // J_1j H_1j: the only non-identity row block of the covariance transform
    let j1 = rho2
        * Mat3::new(
            1.0, 0.0, -alpha2, //
            0.0, 1.0, -beta2, //
            0.0, 0.0, -rho2,
        );
    let dim = layout.dim();
    let mut jh = DMatrix::zeros(3, dim);
    let mut put = |col: usize, m: &Mat3| {
        for r in 0..3 {
            for c in 0..3 {
                jh[(r, col + c)] += m[(r, c)];
            }
        }
    };
    put(layout.win_pos(old).start, &(j1 * c_new));
    put(layout.win_pos(new_anchor).start, &(-j1 * c_new));
    put(
        layout.win_att(old).start,
        &(-(1.0 / f.rho) * j1 * c_new * c_old_t * skew(&bearing)),
    );
    put(layout.win_att(new_anchor).start, &(j1 * skew(&g)));
    put(
        layout.feat(feature_slot).start,
        &((1.0 / f.rho) * j1 * c_new * c_old_t * inverse_depth_jacobian(f.alpha, f.beta, f.rho)),
    );

    let mut j = DMatrix::identity(dim, dim);
    let fr = layout.feat(feature_slot);
    for r in 0..3 {
        for c in 0..dim {
            j[(fr.start + r, c)] = jh[(r, c)];
        }
    }
    let new_p = &j * p.as_matrix() * j.transpose();
    *p.as_matrix_mut() = new_p;
    p.symmetrize();

    let feat = state.features[feature_slot].as_mut().unwrap();
    feat.alpha = alpha2;
    feat.beta = beta2;
    feat.rho = rho2;
    feat.anchor = new_anchor;
    Ok(())
}

// ---------------------------------------------------------------------------
// Track management
// ---------------------------------------------------------------------------

/// Promotion and spatial-distribution policy for SLAM features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPolicy {
    pub max_slam_features: usize,
    pub tile_rows: usize,
    pub tile_cols: usize,
    /// Half-width of the normalized image region covered by the tile grid.
    pub image_half_width: f64,
}

impl Default for TrackPolicy {
    fn default() -> Self {
        TrackPolicy {
            max_slam_features: 15,
            tile_rows: 4,
            tile_cols: 4,
            image_half_width: 1.0,
        }
    }
}

impl TrackPolicy {
    pub fn tile_of(&self, uv: &Vector2<f64>) -> usize {
        let clampf = |x: f64| x.clamp(-self.image_half_width, self.image_half_width);
        let fx = (clampf(uv.x) + self.image_half_width) / (2.0 * self.image_half_width);
        let fy = (clampf(uv.y) + self.image_half_width) / (2.0 * self.image_half_width);
        let col = ((fx * self.tile_cols as f64) as usize).min(self.tile_cols - 1);
        let row = ((fy * self.tile_rows as f64) as usize).min(self.tile_rows - 1);
        row * self.tile_cols + col
    }

    /// Picks which candidate tracks fill the free SLAM slots: longer tracks
    /// first, then emptier tiles, then lower ids. Tile occupancy counts are
    /// updated greedily as candidates are assigned.
    pub fn select_promotions(
        &self,
        candidates: &[(u64, usize, Vector2<f64>)],
        free_slots: usize,
        mut tile_occupancy: Vec<usize>,
    ) -> Vec<u64> {
        assert_eq!(tile_occupancy.len(), self.tile_rows * self.tile_cols);
        let mut pool: Vec<(u64, usize, usize)> = candidates
            .iter()
            .map(|(id, len, uv)| (*id, *len, self.tile_of(uv)))
            .collect();
        let mut chosen = Vec::new();
        while chosen.len() < free_slots && !pool.is_empty() {
            let best = pool
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let ka = (std::cmp::Reverse(a.1), tile_occupancy[a.2], a.0);
                    let kb = (std::cmp::Reverse(b.1), tile_occupancy[b.2], b.0);
                    ka.cmp(&kb)
                })
                .map(|(i, _)| i)
                .unwrap();
            let (id, _, tile) = pool.remove(best);
            tile_occupancy[tile] += 1;
            chosen.push(id);
        }
        chosen
    }
}

/// What a new frame implies for the filter: per-feature SLAM observations
/// and MSCKF batches ready for processing.
#[derive(Debug, Clone, Default)]
pub struct FramePlan {
    /// (feature slot, observation) pairs for live SLAM features.
    pub slam: Vec<(usize, Vector2<f64>)>,
    /// Slot-mapped tracks ready for an MSCKF batch.
    pub msckf: Vec<Track>,
    /// SLAM track ids that ended this frame (feature should be dropped).
    pub ended_slam: Vec<u64>,
}

#[derive(Debug, Clone)]
struct TrackRecord {
    /// (frame sequence number, observation) pairs, oldest first.
    obs: Vec<(u64, Vector2<f64>)>,
    is_slam: bool,
}

/// Bookkeeping between the visual front end (track ids + normalized
/// coordinates) and the filter's window slots.
#[derive(Debug, Clone, Default)]
pub struct TrackManager {
    records: BTreeMap<u64, TrackRecord>,
    frame_seq: u64,
}

impl TrackManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frame_seq(&self) -> u64 {
        self.frame_seq
    }

    /// Window slot of a frame sequence number, if it is still inside the
    /// window of size `m` at the current frame.
    fn slot_of(&self, frame: u64, m: usize) -> Option<usize> {
        let age = self.frame_seq.checked_sub(frame)?;
        (age < m as u64).then_some(age as usize)
    }

    pub fn mark_slam(&mut self, track_id: u64) {
        if let Some(rec) = self.records.get_mut(&track_id) {
            rec.is_slam = true;
            rec.obs.clear();
        } else {
            self.records.insert(
                track_id,
                TrackRecord {
                    obs: Vec::new(),
                    is_slam: true,
                },
            );
        }
    }

    /// Ingests one frame worth of matches (after the window slid, so the
    /// newest pose is slot 0) and classifies the bookkeeping: observations
    /// of live SLAM features go to the SLAM update, ended or window-filling
    /// tracks become MSCKF batches.
    pub fn ingest_frame(
        &mut self,
        matches: &[(u64, Vector2<f64>)],
        slam_slots: &BTreeMap<u64, usize>,
        m: usize,
    ) -> FramePlan {
        let mut plan = FramePlan::default();
        let mut seen: Vec<u64> = Vec::with_capacity(matches.len());

        for (track_id, uv) in matches {
            seen.push(*track_id);
            if let Some(&slot) = slam_slots.get(track_id) {
                self.mark_slam(*track_id);
                plan.slam.push((slot, *uv));
                continue;
            }
            let rec = self.records.entry(*track_id).or_insert_with(|| TrackRecord {
                obs: Vec::new(),
                is_slam: false,
            });
            rec.obs.push((self.frame_seq, *uv));
        }

        // ended tracks (not seen this frame) and tracks filling the window
        let mut finished: Vec<u64> = Vec::new();
        for (id, rec) in self.records.iter() {
            if rec.is_slam {
                if !seen.contains(id) {
                    finished.push(*id);
                }
                continue;
            }
            let ended = !seen.contains(id);
            let full = rec.obs.len() >= m;
            if ended || full {
                finished.push(*id);
            }
        }
        for id in finished {
            let rec = self.records.remove(&id).unwrap();
            if rec.is_slam {
                plan.ended_slam.push(id);
                continue;
            }
            let still_active = seen.contains(&id);
            let mut observations: Vec<(usize, Vector2<f64>)> = rec
                .obs
                .iter()
                .filter_map(|(frame, uv)| self.slot_of(*frame, m).map(|s| (s, *uv)))
                .collect();
            // oldest first means largest slot first
            observations.sort_by(|a, b| b.0.cmp(&a.0));
            if observations.len() >= 2 {
                plan.msckf.push(Track {
                    track_id: id,
                    observations,
                    status: if still_active {
                        TrackStatus::Active
                    } else {
                        TrackStatus::Ended
                    },
                });
            }
        }
        self.frame_seq += 1;
        plan
    }

    /// Active non-SLAM tracks with their length and latest image position,
    /// candidates for unknown-depth initialization.
    pub fn active_tracks(&self) -> Vec<(u64, usize, Vector2<f64>)> {
        self.records
            .iter()
            .filter(|(_, r)| !r.is_slam && !r.obs.is_empty())
            .map(|(id, r)| (*id, r.obs.len(), r.obs.last().unwrap().1))
            .collect()
    }

    pub fn drop_track(&mut self, track_id: u64) {
        self.records.remove(&track_id);
    }
}
