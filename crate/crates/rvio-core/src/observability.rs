//! Numerical observability analysis of the linearized range-VIO system.
//!
//! The analysis works on the reduced state `x⁰ = [p, v, θ, b_g, b_a |
//! cartesian features]` of width `15 + 3N`. The trajectory is integrated
//! with the same first-order discrete propagator the filter uses, so the
//! accumulated transition matrix is the exact Jacobian of the discrete flow
//! (the built-in trajectories are translation-only), and the nullspace
//! identities hold to machine precision rather than up to discretization
//! error.
//!
//! Rows come in two families: scalar ranged-facet rows (the facet is built
//! from the first three features) and visual rows from every feature. The
//! range rows are computed twice, once as `H_k Φ_{k,1}` and once from
//! closed-form block expressions, and the two paths are cross-checked.

use nalgebra::{DMatrix, RowDVector};

use crate::error::{Error, Result};
use crate::filter::{error_jacobians, propagate_state, ImuSample, Mat15, NoiseConfig};
use crate::geom::{skew, Vec3};
use crate::range::cartesian_point_jacobians;
use crate::range::Facet;
use crate::sim::TrajectorySpec;
use crate::slam::projection_prefix;
use crate::state::{InertialState, WorldModel};

/// Trajectory sampled at IMU ticks plus the accumulated state transition
/// matrices, over a scene of cartesian features (the first three form the
/// ranged facet).
#[derive(Debug, Clone)]
pub struct ObsSystem {
    pub dt: f64,
    /// True states at ticks 0..K (tick 0 carries `phi = I`).
    pub states: Vec<InertialState>,
    /// World-frame acceleration over each tick.
    pub accels: Vec<Vec3>,
    pub features: Vec<Vec3>,
    /// LRF beam direction in the body frame (identity camera extrinsics).
    pub u_r: Vec3,
    pub world: WorldModel,
    /// `Φ_{k,0}` per tick, inertial block only.
    pub phi: Vec<Mat15>,
}

/// A labeled candidate direction of the reduced error space.
#[derive(Debug, Clone)]
pub struct NullDirection {
    pub label: String,
    pub vector: RowDVector<f64>,
}

impl ObsSystem {
    /// Integrates the trajectory spec with the filter's discrete propagator
    /// and accumulates the transition matrices at the true states.
    pub fn from_trajectory(
        spec: &TrajectorySpec,
        features: Vec<Vec3>,
        u_r: Vec3,
        world: &WorldModel,
        ticks: usize,
    ) -> Result<Self> {
        if features.len() < 3 {
            return Err(Error::InvalidArgument(
                "observability analysis needs at least 3 features".into(),
            ));
        }
        let dt = 1.0 / spec.imu_rate;
        let (p0, v0, _) = spec.truth_at(0.0);
        let mut state = InertialState::at_rest(p0, crate::geom::Quat::IDENTITY);
        state.v_wi = v0;

        let noise = NoiseConfig::default();
        let mut states = Vec::with_capacity(ticks);
        let mut accels = Vec::with_capacity(ticks);
        let mut phi = Vec::with_capacity(ticks);
        let mut acc = Mat15::identity();
        states.push(state);
        let (_, _, a0) = spec.truth_at(0.0);
        accels.push(a0);
        phi.push(acc);
        for k in 0..ticks.saturating_sub(1) {
            let t = k as f64 * dt;
            let (_, _, a_w) = spec.truth_at(t);
            let c = state.q_wi.to_rotation();
            let u = ImuSample {
                t,
                omega_imu: Vec3::zeros(),
                a_imu: c * (a_w - world.g_w),
            };
            let (f_d, _) = error_jacobians(&state, &u, dt, &noise);
            state = propagate_state(&state, &u, dt, world)?;
            acc = f_d * acc;
            states.push(state);
            let (_, _, a_next) = spec.truth_at(t + dt);
            accels.push(a_next);
            phi.push(acc);
        }
        Ok(ObsSystem {
            dt,
            states,
            accels,
            features,
            u_r,
            world: *world,
            phi,
        })
    }

    pub fn dim(&self) -> usize {
        15 + 3 * self.features.len()
    }

    pub fn ticks(&self) -> usize {
        self.states.len()
    }

    fn facet_at(&self, k: usize) -> (Facet, Vec3, f64) {
        let s = &self.states[k];
        let c = s.q_wi.to_rotation();
        let u_r_w = c.transpose() * self.u_r;
        let [f1, f2, f3] = [self.features[0], self.features[1], self.features[2]];
        let normal = (f1 - f2).cross(&(f3 - f2));
        let a = (f2 - s.p_wi).dot(&normal);
        let b = u_r_w.dot(&normal);
        let facet = Facet {
            slots: [0, 1, 2],
            world_points: [f1, f2, f3],
            normal,
            a,
            b,
        };
        (facet, u_r_w, a / b)
    }

    fn beam_valid(&self, facet: &Facet) -> bool {
        let n = facet.normal.norm();
        n > 1e-300 && facet.b.abs() / n > 0.05 && facet.a / facet.b > 0.0
    }

    /// Range measurement Jacobian at tick `k` with respect to `x⁰`, before
    /// composition with the transition matrix.
    fn range_h(&self, k: usize) -> Option<RowDVector<f64>> {
        let (facet, _, z_r) = self.facet_at(k);
        if !self.beam_valid(&facet) {
            return None;
        }
        let s = &self.states[k];
        let c = s.q_wi.to_rotation();
        let u_r_w = c.transpose() * self.u_r;
        let p_i = s.p_wi + z_r * u_r_w;
        let h_pts = cartesian_point_jacobians(&facet, &p_i);

        let mut h = RowDVector::zeros(self.dim());
        let h_p = -facet.normal / facet.b;
        let h_theta = -(facet.a / (facet.b * facet.b)) * (skew(&self.u_r) * c * facet.normal);
        for i in 0..3 {
            h[i] = h_p[i];
            h[6 + i] = h_theta[i];
            for corner in 0..3 {
                h[15 + 3 * corner + i] = h_pts[corner][i];
            }
        }
        Some(h)
    }

    /// Observability row at tick `k`, computed both as `H_k Φ_{k,0}`
    /// (path a) and from the closed-form block expressions (path b).
    /// Returns `None` when the beam/facet geometry is degenerate.
    pub fn obs_row(&self, k: usize) -> Option<(RowDVector<f64>, RowDVector<f64>)> {
        let h = self.range_h(k)?;
        let path_a = self.compose(&h, k);

        // path (b): closed-form blocks
        let (facet, _, _) = self.facet_at(k);
        let s = &self.states[k];
        let s0 = &self.states[0];
        let c = s.q_wi.to_rotation();
        let kf = k as f64;
        let n = facet.normal;
        let b = facet.b;
        let a = facet.a;

        let mut path_b = RowDVector::zeros(self.dim());
        // positions and velocity: -n'/b and -k dt n'/b
        for i in 0..3 {
            path_b[i] = -n[i] / b;
            path_b[3 + i] = -kf * self.dt * n[i] / b;
        }
        // attitude: H_p Φ_pθ + H_θ Φ_θθ with the discrete closed-form lever
        let gamma = 0.5 * self.world.g_w * (kf * (kf - 1.0)) * self.dt * self.dt;
        let lever = s.p_wi - s0.p_wi - s0.v_wi * (kf * self.dt) - gamma;
        let phi_ptheta = -skew(&lever) * s0.q_wi.to_rotation().transpose();
        let h_p = -n / b;
        let h_theta = -(a / (b * b)) * (skew(&self.u_r) * c * n);
        let m_theta = phi_ptheta.transpose() * h_p + h_theta; // Φ_θθ = I on these trajectories
        // gyro and accel bias: deferred integral blocks taken from the
        // accumulated transition matrix
        let phi_k = &self.phi[k];
        let phi_pbg = phi_k.fixed_view::<3, 3>(0, 9);
        let phi_thetabg = phi_k.fixed_view::<3, 3>(6, 9);
        let phi_pba = phi_k.fixed_view::<3, 3>(0, 12);
        let m_bg = phi_pbg.transpose() * h_p + phi_thetabg.transpose() * h_theta;
        let m_ba = phi_pba.transpose() * h_p;
        for i in 0..3 {
            path_b[6 + i] = m_theta[i];
            path_b[9 + i] = m_bg[i];
            path_b[12 + i] = m_ba[i];
        }
        // feature blocks are untouched by the transition matrix
        let z_r = a / b;
        let c_t = c.transpose();
        let p_i = s.p_wi + z_r * (c_t * self.u_r);
        let h_pts = cartesian_point_jacobians(&facet, &p_i);
        for corner in 0..3 {
            for i in 0..3 {
                path_b[15 + 3 * corner + i] = h_pts[corner][i];
            }
        }
        Some((path_a, path_b))
    }

    /// Visual measurement rows of every feature at tick `k`, composed with
    /// the transition matrix.
    pub fn vio_rows(&self, k: usize) -> DMatrix<f64> {
        let s = &self.states[k];
        let c = s.q_wi.to_rotation();
        let mut rows: Vec<RowDVector<f64>> = Vec::new();
        for (j, f) in self.features.iter().enumerate() {
            let p_cam = c * (f - s.p_wi);
            if p_cam.z <= 1e-6 {
                continue;
            }
            let prefix = projection_prefix(&p_cam);
            let h_p = -prefix * c;
            let h_theta = prefix * skew(&p_cam);
            let h_f = prefix * c;
            for r in 0..2 {
                let mut h = RowDVector::zeros(self.dim());
                for i in 0..3 {
                    h[i] = h_p[(r, i)];
                    h[6 + i] = h_theta[(r, i)];
                    h[15 + 3 * j + i] = h_f[(r, i)];
                }
                rows.push(self.compose(&h, k));
            }
        }
        let mut m = DMatrix::zeros(rows.len(), self.dim());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(r);
        }
        m
    }

    /// Right-multiplies a measurement Jacobian by `blockdiag(Φ_k, I_3N)`.
    fn compose(&self, h: &RowDVector<f64>, k: usize) -> RowDVector<f64> {
        let mut out = h.clone();
        let phi = &self.phi[k];
        for col in 0..15 {
            let mut acc = 0.0;
            for i in 0..15 {
                acc += h[i] * phi[(i, col)];
            }
            out[col] = acc;
        }
        out
    }

    /// Stacked range rows (the paper's observability matrix).
    pub fn matrix_range(&self) -> DMatrix<f64> {
        let rows: Vec<RowDVector<f64>> =
            (0..self.ticks()).filter_map(|k| self.obs_row(k).map(|(a, _)| a)).collect();
        let mut m = DMatrix::zeros(rows.len(), self.dim());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from(r);
        }
        m
    }

    /// Stacked visual rows (the VIO-only contrast).
    pub fn matrix_vio(&self) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = (0..self.ticks()).map(|k| self.vio_rows(k)).collect();
        let total: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut m = DMatrix::zeros(total, self.dim());
        let mut at = 0;
        for b in blocks {
            m.view_mut((at, 0), (b.nrows(), self.dim())).copy_from(&b);
            at += b.nrows();
        }
        m
    }

    /// Visual plus range rows.
    pub fn matrix_range_vio(&self) -> DMatrix<f64> {
        let vio = self.matrix_vio();
        let range = self.matrix_range();
        let mut m = DMatrix::zeros(vio.nrows() + range.nrows(), self.dim());
        m.view_mut((0, 0), (vio.nrows(), self.dim())).copy_from(&vio);
        m.view_mut((vio.nrows(), 0), (range.nrows(), self.dim())).copy_from(&range);
        m
    }

    // -- candidate directions ------------------------------------------------

    pub fn direction_global_position(&self, axis: usize) -> NullDirection {
        let mut v = RowDVector::zeros(self.dim());
        v[axis] = 1.0;
        for j in 0..self.features.len() {
            v[15 + 3 * j + axis] = 1.0;
        }
        NullDirection {
            label: format!("global-position-{}", ["x", "y", "z"][axis]),
            vector: v,
        }
    }

    /// Rotation of the whole system about the gravity direction.
    pub fn direction_yaw(&self) -> NullDirection {
        let up = -self.world.g_w.normalize();
        let s0 = &self.states[0];
        let mut v = RowDVector::zeros(self.dim());
        let dp = skew(&up) * s0.p_wi;
        let dv = skew(&up) * s0.v_wi;
        let dth = s0.q_wi.to_rotation() * up;
        for i in 0..3 {
            v[i] = dp[i];
            v[3 + i] = dv[i];
            v[6 + i] = dth[i];
        }
        for (j, f) in self.features.iter().enumerate() {
            let df = skew(&up) * f;
            for i in 0..3 {
                v[15 + 3 * j + i] = df[i];
            }
        }
        NullDirection {
            label: "yaw-about-gravity".into(),
            vector: v,
        }
    }

    /// Scale direction for constant-acceleration motion (needs the constant
    /// body-frame acceleration).
    pub fn direction_scale(&self) -> Option<NullDirection> {
        let a0 = self.accels[0];
        if !self.accels.iter().all(|a| (a - a0).norm() <= 1e-12) {
            return None;
        }
        let s0 = &self.states[0];
        let a_body = s0.q_wi.to_rotation() * a0;
        let mut v = RowDVector::zeros(self.dim());
        for i in 0..3 {
            v[i] = s0.p_wi[i];
            v[3 + i] = s0.v_wi[i];
            v[12 + i] = -a_body[i];
        }
        for (j, f) in self.features.iter().enumerate() {
            for i in 0..3 {
                v[15 + 3 * j + i] = f[i];
            }
        }
        Some(NullDirection {
            label: "scale".into(),
            vector: v,
        })
    }

    /// Depths of the features outside the facet (hover case).
    pub fn direction_hover_depths(&self) -> Option<NullDirection> {
        if self.features.len() <= 3 {
            return None;
        }
        let mut v = RowDVector::zeros(self.dim());
        for (j, f) in self.features.iter().enumerate().skip(3) {
            for i in 0..3 {
                v[15 + 3 * j + i] = f[i];
            }
        }
        Some(NullDirection {
            label: "off-facet-depths".into(),
            vector: v,
        })
    }

    /// Closed-form value of a range row against the scale direction:
    /// `n'(p_F2 - p_ik) / b` per valid tick.
    pub fn scale_row_values(&self) -> Vec<(usize, f64)> {
        (0..self.ticks())
            .filter_map(|k| {
                let (facet, _, _) = self.facet_at(k);
                self.beam_valid(&facet).then(|| {
                    let v = facet.normal.dot(&(self.features[1] - self.states[k].p_wi)) / facet.b;
                    (k, v)
                })
            })
            .collect()
    }

    /// Builds the standard report: residual norms of every candidate
    /// direction against the VIO, range and range-VIO matrices, numeric
    /// ranks, and the scale-direction row identity.
    pub fn report(&self) -> ObsReport {
        let m_vio = self.matrix_vio();
        let m_range = self.matrix_range();
        let m_rvio = self.matrix_range_vio();

        let mut directions = vec![
            self.direction_global_position(0),
            self.direction_global_position(1),
            self.direction_global_position(2),
            self.direction_yaw(),
        ];
        if let Some(d) = self.direction_scale() {
            directions.push(d);
        }
        if let Some(d) = self.direction_hover_depths() {
            directions.push(d);
        }

        let norm_of = |m: &DMatrix<f64>, d: &RowDVector<f64>| -> f64 {
            if m.nrows() == 0 {
                return 0.0;
            }
            (m * d.transpose()).amax() / d.norm()
        };

        let checks: Vec<DirectionCheck> = directions
            .iter()
            .map(|d| DirectionCheck {
                label: d.label.clone(),
                vio: norm_of(&m_vio, &d.vector),
                range: norm_of(&m_range, &d.vector),
                range_vio: norm_of(&m_rvio, &d.vector),
            })
            .collect();

        let rank = |m: &DMatrix<f64>| -> usize {
            if m.nrows() == 0 {
                return 0;
            }
            let sv = m.clone().svd(false, false).singular_values;
            let smax = sv.max();
            sv.iter().filter(|&&s| s > 1e-8 * smax).count()
        };

        // scale-direction identity on the range rows
        let mut ns_rows = Vec::new();
        if let Some(ns) = self.direction_scale() {
            let closed = self.scale_row_values();
            let mut ci = 0;
            for k in 0..self.ticks() {
                if let Some((row, _)) = self.obs_row(k) {
                    let lhs = (&row * ns.vector.transpose())[(0, 0)];
                    let rhs = closed[ci].1;
                    debug_assert_eq!(closed[ci].0, k);
                    ns_rows.push((lhs, rhs));
                    ci += 1;
                }
            }
        }

        ObsReport {
            dim: self.dim(),
            rows_vio: m_vio.nrows(),
            rows_range: m_range.nrows(),
            rank_vio: rank(&m_vio),
            rank_range: rank(&m_range),
            rank_range_vio: rank(&m_rvio),
            directions: checks,
            ns_rows,
        }
    }
}

/// Residual norms of one candidate direction against the three row sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionCheck {
    pub label: String,
    pub vio: f64,
    pub range: f64,
    pub range_vio: f64,
}

/// Rendered observability summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsReport {
    pub dim: usize,
    pub rows_vio: usize,
    pub rows_range: usize,
    pub rank_vio: usize,
    pub rank_range: usize,
    pub rank_range_vio: usize,
    pub directions: Vec<DirectionCheck>,
    /// (M_k Ns, closed form) per valid range row.
    pub ns_rows: Vec<(f64, f64)>,
}

pub const NULLSPACE_THRESHOLD: f64 = 1e-8;

impl ObsReport {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "error-state dimension {} | rows: vio {} range {} | rank: vio {} range-vio {}\n",
            self.dim, self.rows_vio, self.rows_range, self.rank_vio, self.rank_range_vio
        ));
        out.push_str(&format!(
            "{:<22} {:>12} {:>12} {:>14}  verdict (range-vio / vio)\n",
            "direction", "|M_vio d|", "|M_range d|", "|M_rangevio d|"
        ));
        let flag = |x: f64| if x <= NULLSPACE_THRESHOLD { "nullspace" } else { "observable" };
        for c in &self.directions {
            out.push_str(&format!(
                "{:<22} {:>12.3e} {:>12.3e} {:>14.3e}  {} / {}\n",
                c.label,
                c.vio,
                c.range,
                c.range_vio,
                flag(c.range_vio),
                flag(c.vio),
            ));
        }
        if !self.ns_rows.is_empty() {
            let max_err = self
                .ns_rows
                .iter()
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            out.push_str(&format!(
                "scale rows: {} checked, max |M_k Ns - n'(p_F2 - p_ik)/b| = {:.3e}\n",
                self.ns_rows.len(),
                max_err
            ));
        }
        out
    }
}
