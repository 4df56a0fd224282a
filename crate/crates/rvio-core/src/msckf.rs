//! Multi-state-constraint update: triangulation from window priors,
//! per-feature stacked residuals, left-nullspace projection and QR
//! compression.

use nalgebra::{DMatrix, DVector, Vector2};

use crate::error::{Error, Result};
use crate::filter::chi2_quantile;
use crate::geom::{skew, Vec3};
use crate::slam::{inverse_depth_jacobian, project, projection_prefix, DEPTH_EPSILON};
use crate::state::{ErrorCovariance, ErrorLayout, SlidingWindow};

/// Track lifecycle from the manager's point of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackStatus {
    Active,
    Ended,
}

/// The list of image observations of a specific feature. For MSCKF
/// processing the observations are mapped to sliding-window slots.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    /// Time-ordered (oldest first) pairs of window slot and normalized
    /// image coordinates.
    pub observations: Vec<(usize, Vector2<f64>)>,
    pub status: TrackStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ineligible {
    TooFewObservations,
    ExceedsWindow,
    Baseline,
}

/// MSCKF eligibility: at least two observations, all inside the window, and
/// a minimum camera baseline for triangulation.
pub fn check_requirements(
    track: &Track,
    window: &SlidingWindow,
    min_baseline: f64,
) -> std::result::Result<(), Ineligible> {
    let m = track.observations.len();
    if m < 2 {
        return Err(Ineligible::TooFewObservations);
    }
    if m > window.len() || track.observations.iter().any(|(s, _)| *s >= window.len()) {
        return Err(Ineligible::ExceedsWindow);
    }
    let mut max_baseline: f64 = 0.0;
    for (i, (si, _)) in track.observations.iter().enumerate() {
        for (sj, _) in track.observations.iter().skip(i + 1) {
            let d = (window.positions[*si] - window.positions[*sj]).norm();
            max_baseline = max_baseline.max(d);
        }
    }
    if max_baseline < min_baseline {
        return Err(Ineligible::Baseline);
    }
    Ok(())
}

/// Triangulates a track against the sliding-window pose priors: two-view
/// midpoint initialization from the first and last observations, refined by
/// Gauss-Newton on the inverse-depth parameters in the first observing
/// camera.
pub fn triangulate(track: &Track, window: &SlidingWindow) -> Result<Vec3> {
    let m = track.observations.len();
    if m < 2 {
        return Err(Error::InvalidArgument("triangulation needs at least two observations".into()));
    }
    let ray = |slot: usize, z: &Vector2<f64>| -> (Vec3, Vec3) {
        let origin = window.positions[slot];
        let dir = window.orientations[slot].to_rotation().transpose() * Vec3::new(z.x, z.y, 1.0);
        (origin, dir.normalize())
    };
    let (first_slot, first_z) = track.observations[0];
    let (last_slot, last_z) = track.observations[m - 1];
    let (o1, d1) = ray(first_slot, &first_z);
    let (o2, d2) = ray(last_slot, &last_z);

    // Midpoint of the closest points of the two rays.
    let d12 = d1.dot(&d2);
    let denom = 1.0 - d12 * d12;
    if denom < 1e-12 {
        return Err(Error::Numerical("triangulation failure: parallel rays (zero baseline)".into()));
    }
    let b = o2 - o1;
    let t1 = (b.dot(&d1) - b.dot(&d2) * d12) / denom;
    let t2 = (b.dot(&d1) * d12 - b.dot(&d2)) / denom;
    let mid = 0.5 * ((o1 + t1 * d1) + (o2 + t2 * d2));

    // Inverse-depth parameters in the first observing camera.
    let c_a = window.orientations[first_slot].to_rotation();
    let p_a = window.positions[first_slot];
    let in_anchor = c_a * (mid - p_a);
    if in_anchor.z <= DEPTH_EPSILON {
        return Err(Error::Numerical("triangulation failure: initialization behind camera".into()));
    }
    let mut params = Vec3::new(
        in_anchor.x / in_anchor.z,
        in_anchor.y / in_anchor.z,
        1.0 / in_anchor.z,
    );

    let reprojection = |params: &Vec3| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mut r = DVector::zeros(2 * m);
        let mut j = DMatrix::zeros(2 * m, 3);
        let bearing = Vec3::new(params.x, params.y, 1.0);
        let p_w = p_a + c_a.transpose() * bearing / params.z;
        for (row, (slot, z)) in track.observations.iter().enumerate() {
            let c_i = window.orientations[*slot].to_rotation();
            let p_c = c_i * (p_w - window.positions[*slot]);
            if p_c.z <= DEPTH_EPSILON {
                return Err(Error::Numerical("triangulation failure: point behind a camera".into()));
            }
            let pred = project(&p_c)?;
            r[2 * row] = z.x - pred.x;
            r[2 * row + 1] = z.y - pred.y;
            let block = projection_prefix(&p_c)
                * c_i
                * c_a.transpose()
                * inverse_depth_jacobian(params.x, params.y, params.z)
                / params.z;
            j.view_mut((2 * row, 0), (2, 3)).copy_from(&block);
        }
        Ok((r, j))
    };

    let (mut r, mut j) = reprojection(&params)?;
    let mut cost = r.norm_squared();
    for _ in 0..10 {
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let step = jtj
            .cholesky()
            .ok_or_else(|| Error::Numerical("triangulation failure: degenerate normal equations".into()))?
            .solve(&jtr);
        params += Vec3::new(step[0], step[1], step[2]);
        if params.z <= 0.0 {
            return Err(Error::Numerical("triangulation failure: non-positive refined depth".into()));
        }
        let (r_new, j_new) = reprojection(&params)?;
        let new_cost = r_new.norm_squared();
        if new_cost > 4.0 * cost + 1e-12 {
            return Err(Error::Numerical("triangulation failure: diverging refinement".into()));
        }
        cost = new_cost;
        r = r_new;
        j = j_new;
        if step.norm() < 1e-10 {
            break;
        }
    }

    Ok(p_a + c_a.transpose() * Vec3::new(params.x, params.y, 1.0) / params.z)
}

/// Stacked linearization of one track around a triangulated world point:
/// residual, Jacobian w.r.t. the error state, and Jacobian w.r.t. the
/// (unestimated) cartesian feature position.
#[derive(Debug, Clone)]
pub struct FeatureSystem {
    pub track_id: u64,
    pub residual: DVector<f64>,
    pub h_x: DMatrix<f64>,
    pub h_f: DMatrix<f64>,
    pub world_point: Vec3,
}

pub fn build_feature_system(
    track: &Track,
    window: &SlidingWindow,
    world_point: &Vec3,
    layout: &ErrorLayout,
) -> Result<FeatureSystem> {
    let m = track.observations.len();
    let dim = layout.dim();
    let mut residual = DVector::zeros(2 * m);
    let mut h_x = DMatrix::zeros(2 * m, dim);
    let mut h_f = DMatrix::zeros(2 * m, 3);

    for (row, (slot, z)) in track.observations.iter().enumerate() {
        let c_i = window.orientations[*slot].to_rotation();
        let p_c = c_i * (world_point - window.positions[*slot]);
        if p_c.z <= DEPTH_EPSILON {
            return Err(Error::Numerical("MSCKF row rejected: predicted depth at epsilon".into()));
        }
        let pred = project(&p_c)?;
        residual[2 * row] = z.x - pred.x;
        residual[2 * row + 1] = z.y - pred.y;

        let prefix = projection_prefix(&p_c);
        let h_p = -prefix * c_i;
        let h_theta = prefix * skew(&p_c);
        let h_feat = prefix * c_i;

        h_x.view_mut((2 * row, layout.win_pos(*slot).start), (2, 3)).copy_from(&h_p);
        h_x.view_mut((2 * row, layout.win_att(*slot).start), (2, 3)).copy_from(&h_theta);
        h_f.view_mut((2 * row, 0), (2, 3)).copy_from(&h_feat);
    }

    Ok(FeatureSystem {
        track_id: track.track_id,
        residual,
        h_x,
        h_f,
        world_point: *world_point,
    })
}

/// Orthonormal basis of the column space (first) and left nullspace (second)
/// of a tall full-column-rank matrix. Fails when the rank drops below the
/// column count.
pub fn column_space_and_left_nullspace(h_f: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let rows = h_f.nrows();
    let cols = h_f.ncols();
    assert!(rows > cols);

    let svd = h_f.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-8 * smax) {
        return Err(Error::Numerical(
            "degenerate geometry: feature Jacobian is rank deficient".into(),
        ));
    }

    // Column-space basis from thin QR, then complete to a full orthonormal
    // basis by modified Gram-Schmidt over canonical vectors.
    let qr = h_f.clone().qr();
    let q1 = qr.q();
    let mut basis: Vec<DVector<f64>> = (0..cols).map(|c| q1.column(c).clone_owned()).collect();
    let mut complement: Vec<DVector<f64>> = Vec::with_capacity(rows - cols);
    for k in 0..rows {
        if complement.len() == rows - cols {
            break;
        }
        let mut v = DVector::zeros(rows);
        v[k] = 1.0;
        for b in basis.iter().chain(complement.iter()) {
            let proj = b.dot(&v);
            v -= b * proj;
        }
        let n = v.norm();
        if n > 1e-8 {
            v /= n;
            // second orthogonalization pass for numerical hygiene
            for b in basis.iter().chain(complement.iter()) {
                let proj = b.dot(&v);
                v -= b * proj;
            }
            v = v.normalize();
            complement.push(v);
        }
    }
    if complement.len() != rows - cols {
        return Err(Error::Numerical("failed to complete left-nullspace basis".into()));
    }
    let b = DMatrix::from_columns(&basis.drain(..).collect::<Vec<_>>());
    let a = DMatrix::from_columns(&complement);
    Ok((b, a))
}

/// Projected MSCKF system over every surviving feature.
#[derive(Debug, Clone)]
pub struct MsckfSystem {
    pub residual: DVector<f64>,
    pub h: DMatrix<f64>,
    pub sigma_v: f64,
    /// Track ids that survived projection and gating.
    pub accepted: Vec<u64>,
    /// Track ids dropped with the reason.
    pub rejected: Vec<(u64, String)>,
}

impl MsckfSystem {
    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    pub fn noise_matrix(&self) -> DMatrix<f64> {
        DMatrix::identity(self.residual.len(), self.residual.len()) * self.sigma_v * self.sigma_v
    }
}

/// Builds the stacked left-nullspace-projected system from triangulated
/// tracks, gating each feature with a chi-square test at `confidence` and
/// `2m_j - 3` degrees of freedom.
pub fn build_projected_system(
    tracks: &[(Track, Vec3)],
    window: &SlidingWindow,
    p: &ErrorCovariance,
    layout: &ErrorLayout,
    sigma_v: f64,
    confidence: f64,
) -> MsckfSystem {
    let dim = layout.dim();
    let mut rows: Vec<(DVector<f64>, DMatrix<f64>)> = Vec::new();
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();

    for (track, world_point) in tracks {
        let m = track.observations.len();
        if 2 * m < 4 {
            rejected.push((track.track_id, "fewer than two observations".into()));
            continue;
        }
        let sys = match build_feature_system(track, window, world_point, layout) {
            Ok(s) => s,
            Err(e) => {
                rejected.push((track.track_id, e.to_string()));
                continue;
            }
        };
        let (_, a) = match column_space_and_left_nullspace(&sys.h_f) {
            Ok(ba) => ba,
            Err(e) => {
                rejected.push((track.track_id, e.to_string()));
                continue;
            }
        };
        let z0 = a.transpose() * &sys.residual;
        let h0 = a.transpose() * &sys.h_x;
        debug_assert_eq!(z0.len(), 2 * m - 3);

        // chi-square gate with df = projected residual dimension
        let s = &h0 * p.as_matrix() * h0.transpose()
            + DMatrix::identity(z0.len(), z0.len()) * sigma_v * sigma_v;
        let gate = match s.clone().cholesky() {
            Some(chol) => {
                let d2 = z0.dot(&chol.solve(&z0));
                d2 <= chi2_quantile(z0.len(), confidence)
            }
            None => false,
        };
        if !gate {
            rejected.push((track.track_id, "chi-square gate".into()));
            continue;
        }
        accepted.push(track.track_id);
        rows.push((z0, h0));
    }

    let total: usize = rows.iter().map(|(z, _)| z.len()).sum();
    let mut residual = DVector::zeros(total);
    let mut h = DMatrix::zeros(total, dim);
    let mut at = 0;
    for (z0, h0) in rows {
        residual.rows_mut(at, z0.len()).copy_from(&z0);
        h.view_mut((at, 0), (h0.nrows(), dim)).copy_from(&h0);
        at += z0.len();
    }
    MsckfSystem {
        residual,
        h,
        sigma_v,
        accepted,
        rejected,
    }
}

/// Thin-QR compression of an overdetermined system: `(H, z)` becomes
/// `(R, Q'z)`. The orthonormal `Q` preserves the white noise model.
pub fn qr_compress(system: MsckfSystem) -> MsckfSystem {
    let rows = system.h.nrows();
    let cols = system.h.ncols();
    if rows <= cols {
        return system;
    }
    let qr = system.h.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let z = q.transpose() * &system.residual;

    // keep only rows of R that carry information
    let scale = r.abs().max().max(1e-300);
    let keep: Vec<usize> = (0..r.nrows())
        .filter(|&i| r.row(i).amax() > 1e-12 * scale)
        .collect();
    let mut h = DMatrix::zeros(keep.len(), cols);
    let mut residual = DVector::zeros(keep.len());
    for (new_i, &i) in keep.iter().enumerate() {
        h.row_mut(new_i).copy_from(&r.row(i));
        residual[new_i] = z[i];
    }
    MsckfSystem {
        residual,
        h,
        sigma_v: system.sigma_v,
        accepted: system.accepted,
        rejected: system.rejected,
    }
}

/// Camera pose helper used by tests and the simulator: orientation from a
/// quaternion, position in world frame.
pub fn camera_ray(window: &SlidingWindow, slot: usize, z: &Vector2<f64>) -> (Vec3, Vec3) {
    let dir = window.orientations[slot].to_rotation().transpose() * Vec3::new(z.x, z.y, 1.0);
    (window.positions[slot], dir)
}

/// Predicted normalized observation of a world point from a window pose.
pub fn predict_observation(window: &SlidingWindow, slot: usize, p_w: &Vec3) -> Result<Vector2<f64>> {
    let c = window.orientations[slot].to_rotation();
    project(&(c * (p_w - window.positions[slot])))
}
