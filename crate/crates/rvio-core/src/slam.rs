//! SLAM visual measurement model: inverse-depth geometry, normalized
//! projection, residual and analytic Jacobians.

use nalgebra::Vector2;

use crate::error::{Error, Result};
use crate::geom::{skew, Mat3, Quat, Vec3};
use crate::state::{Feature, SlidingWindow};

/// Guard on the 1/z prefix singularity.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// One normalized-image-plane observation of a tracked feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionObservation {
    pub track_id: u64,
    pub z: Vector2<f64>,
    pub t: f64,
}

/// Residual and the five Jacobian blocks of one SLAM observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlamJacobianRow {
    pub residual: Vector2<f64>,
    pub h_p_anchor: nalgebra::Matrix2x3<f64>,
    pub h_p_cur: nalgebra::Matrix2x3<f64>,
    pub h_theta_anchor: nalgebra::Matrix2x3<f64>,
    pub h_theta_cur: nalgebra::Matrix2x3<f64>,
    pub h_f: nalgebra::Matrix2x3<f64>,
    pub anchor_slot: usize,
    pub current_slot: usize,
    pub feature_slot: usize,
}

/// World coordinates of an inverse-depth feature:
/// `p_w = p_anchor + (1/ρ) C(q_anchor)' (α, β, 1)`.
pub fn inverse_depth_to_world(alpha: f64, beta: f64, rho: f64, anchor_p: &Vec3, anchor_q: &Quat) -> Result<Vec3> {
    if rho == 0.0 {
        return Err(Error::Numerical("inverse depth is zero (point at infinity)".into()));
    }
    let bearing = Vec3::new(alpha, beta, 1.0);
    Ok(anchor_p + anchor_q.to_rotation().transpose() * bearing / rho)
}

/// Normalized pinhole projection `(x/z, y/z)`.
pub fn project(p_c: &Vec3) -> Result<Vector2<f64>> {
    if p_c.z <= DEPTH_EPSILON {
        return Err(Error::Numerical(format!(
            "projection depth {} at or below epsilon {DEPTH_EPSILON}",
            p_c.z
        )));
    }
    Ok(Vector2::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

/// `(1/ẑ) [I₂ | -ẑ_j]` prefix shared by every visual Jacobian.
pub fn projection_prefix(p_c: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let z = p_c.z;
    nalgebra::Matrix2x3::new(
        1.0 / z,
        0.0,
        -p_c.x / (z * z),
        0.0,
        1.0 / z,
        -p_c.y / (z * z),
    )
}

/// Feature position in the current camera frame, given window poses.
pub fn feature_in_camera(f: &Feature, window: &SlidingWindow, current_slot: usize) -> Result<Vec3> {
    let p_w = inverse_depth_to_world(
        f.alpha,
        f.beta,
        f.rho,
        &window.positions[f.anchor],
        &window.orientations[f.anchor],
    )?;
    let c_i = window.orientations[current_slot].to_rotation();
    Ok(c_i * (p_w - window.positions[current_slot]))
}

/// Residual and all five analytic Jacobian blocks for one SLAM observation
/// of a feature in the state, observed from window slot `current_slot`.
pub fn slam_residual_and_jacobians(
    f: &Feature,
    feature_slot: usize,
    window: &SlidingWindow,
    obs: &VisionObservation,
    current_slot: usize,
) -> Result<SlamJacobianRow> {
    let anchor = f.anchor;
    let q_cur = &window.orientations[current_slot];
    let q_anc = &window.orientations[anchor];
    let c_cur = q_cur.to_rotation();
    let c_anc_t = q_anc.to_rotation().transpose();

    let p_c = feature_in_camera(f, window, current_slot)?;
    if p_c.z <= DEPTH_EPSILON {
        return Err(Error::Numerical("SLAM row rejected: predicted depth at epsilon".into()));
    }
    let predicted = project(&p_c)?;
    let prefix = projection_prefix(&p_c);

    let bearing = Vec3::new(f.alpha, f.beta, 1.0);
    let h_p_anchor = prefix * c_cur;
    let h_p_cur = -h_p_anchor;
    let h_theta_anchor = -(1.0 / f.rho) * prefix * c_cur * c_anc_t * skew(&bearing);
    let lever = c_cur
        * (window.positions[anchor] - window.positions[current_slot] + c_anc_t * bearing / f.rho);
    let h_theta_cur = prefix * skew(&lever);
    let id_jac = inverse_depth_jacobian(f.alpha, f.beta, f.rho);
    let h_f = (1.0 / f.rho) * prefix * c_cur * c_anc_t * id_jac;

    Ok(SlamJacobianRow {
        residual: obs.z - predicted,
        h_p_anchor,
        h_p_cur,
        h_theta_anchor,
        h_theta_cur,
        h_f,
        anchor_slot: anchor,
        current_slot,
        feature_slot,
    })
}

/// Derivative of the bearing `(α, β, 1)/ρ` with respect to `(α, β, ρ)`,
/// without the leading `1/ρ` which callers keep outside.
pub fn inverse_depth_jacobian(alpha: f64, beta: f64, rho: f64) -> Mat3 {
    Mat3::new(
        1.0,
        0.0,
        -alpha / rho,
        0.0,
        1.0,
        -beta / rho,
        0.0,
        0.0,
        -1.0 / rho,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::quat_mul;
    use crate::state::FeatureStatus;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector2;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn feature(alpha: f64, beta: f64, rho: f64, anchor: usize) -> Feature {
        Feature {
            alpha,
            beta,
            rho,
            anchor,
            track_id: 1,
            status: FeatureStatus::Slam,
        }
    }

    fn random_quat(rng: &mut StdRng) -> Quat {
        Quat::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        )
    }

    #[test]
    fn inverse_depth_examples() {
        let p = inverse_depth_to_world(0.0, 0.0, 1.0, &Vec3::zeros(), &Quat::IDENTITY).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
        let p = inverse_depth_to_world(0.2, -0.1, 0.5, &Vec3::zeros(), &Quat::IDENTITY).unwrap();
        assert_abs_diff_eq!(p, Vec3::new(0.4, -0.2, 2.0), epsilon = 1e-15);
        assert!(inverse_depth_to_world(0.0, 0.0, 0.0, &Vec3::zeros(), &Quat::IDENTITY).is_err());
    }

    /// Inverse-map oracle: re-project the world point back into the anchor
    /// frame and recover (α, β, ρ).
    #[test]
    fn inverse_depth_roundtrip_rotated_anchor() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..50 {
            let anchor_p = Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            let anchor_q = random_quat(&mut rng);
            let (alpha, beta, rho) = (rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(0.2..2.0));
            let p_w = inverse_depth_to_world(alpha, beta, rho, &anchor_p, &anchor_q).unwrap();
            let in_anchor = anchor_q.to_rotation() * (p_w - anchor_p);
            assert_abs_diff_eq!(in_anchor.x / in_anchor.z, alpha, epsilon = 1e-12);
            assert_abs_diff_eq!(in_anchor.y / in_anchor.z, beta, epsilon = 1e-12);
            assert_abs_diff_eq!(1.0 / in_anchor.z, rho, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(&Vec3::new(0.0, 0.0, 2.0)).unwrap(), Vector2::new(0.0, 0.0));
        assert_eq!(project(&Vec3::new(1.0, 2.0, 2.0)).unwrap(), Vector2::new(0.5, 1.0));
        assert!(project(&Vec3::new(0.0, 0.0, -1.0)).is_err());
    }

    fn random_geometry(rng: &mut StdRng) -> (SlidingWindow, Feature) {
        let m = 4;
        let mut window = SlidingWindow::new(m);
        for i in 0..m {
            window.positions[i] = Vec3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-0.3..0.3),
            );
            // mild attitudes keep the feature in front of every camera
            window.orientations[i] = Quat::new(
                1.0,
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
        }
        let f = feature(
            rng.gen_range(-0.3..0.3),
            rng.gen_range(-0.3..0.3),
            rng.gen_range(0.15..0.6),
            rng.gen_range(1..m),
        );
        (window, f)
    }

    /// Noiseless observation at the true state has zero residual.
    #[test]
    fn zero_residual_at_truth() {
        let mut rng = StdRng::seed_from_u64(32);
        for _ in 0..20 {
            let (window, f) = random_geometry(&mut rng);
            let p_c = feature_in_camera(&f, &window, 0).unwrap();
            if p_c.z <= DEPTH_EPSILON {
                continue;
            }
            let obs = VisionObservation {
                track_id: f.track_id,
                z: project(&p_c).unwrap(),
                t: 0.0,
            };
            let row = slam_residual_and_jacobians(&f, 0, &window, &obs, 0).unwrap();
            assert!(row.residual.norm() <= 1e-12);
        }
    }

    /// Observation from the anchor itself: H_f = [I₂ | 0] and the residual
    /// reduces to (δα, δβ).
    #[test]
    fn anchor_observation_special_case() {
        let mut window = SlidingWindow::new(3);
        window.positions[1] = Vec3::new(0.4, -0.2, 0.1);
        window.orientations[1] = Quat::new(0.9, 0.2, -0.1, 0.3);
        let f = feature(0.12, -0.07, 0.4, 1);
        let p_c = feature_in_camera(&f, &window, 1).unwrap();
        let truth = project(&p_c).unwrap();
        let delta = Vector2::new(3e-4, -2e-4);
        let obs = VisionObservation {
            track_id: 1,
            z: truth + delta,
            t: 0.0,
        };
        let row = slam_residual_and_jacobians(&f, 0, &window, &obs, 1).unwrap();
        let expected_hf = nalgebra::Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        assert_abs_diff_eq!(row.h_f, expected_hf, epsilon = 1e-12);
        assert_abs_diff_eq!(row.residual, delta, epsilon = 1e-15);
        // anchor and current orientation blocks cancel
        assert_abs_diff_eq!(row.h_theta_anchor + row.h_theta_cur, nalgebra::Matrix2x3::zeros(), epsilon = 1e-12);
    }

    #[test]
    fn anchor_and_current_position_blocks_opposite() {
        let mut rng = StdRng::seed_from_u64(33);
        for _ in 0..20 {
            let (window, f) = random_geometry(&mut rng);
            let p_c = feature_in_camera(&f, &window, 0);
            let Ok(p_c) = p_c else { continue };
            if p_c.z <= DEPTH_EPSILON {
                continue;
            }
            let obs = VisionObservation {
                track_id: 1,
                z: project(&p_c).unwrap(),
                t: 0.0,
            };
            let row = slam_residual_and_jacobians(&f, 0, &window, &obs, 0).unwrap();
            assert_eq!(row.h_p_anchor, -row.h_p_cur);
        }
    }

    /// Central finite differences of the nonlinear model over perturbed
    /// states, all five blocks, 100 random geometries.
    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(34);
        let eps = 1e-6;
        let mut tested = 0;
        while tested < 100 {
            let (window, f) = random_geometry(&mut rng);
            let current = 0usize;
            let Ok(p_c) = feature_in_camera(&f, &window, current) else {
                continue;
            };
            if p_c.z <= 0.05 {
                continue;
            }
            let obs = VisionObservation {
                track_id: 1,
                z: project(&p_c).unwrap(),
                t: 0.0,
            };
            let row = slam_residual_and_jacobians(&f, 0, &window, &obs, current).unwrap();

            let measure = |w: &SlidingWindow, f: &Feature| {
                project(&feature_in_camera(f, w, current).unwrap()).unwrap()
            };

            // position blocks
            for (block, slot) in [(&row.h_p_anchor, f.anchor), (&row.h_p_cur, current)] {
                let mut fd = nalgebra::Matrix2x3::zeros();
                for k in 0..3 {
                    let mut wp = window.clone();
                    wp.positions[slot][k] += eps;
                    let mut wm = window.clone();
                    wm.positions[slot][k] -= eps;
                    // measurement Jacobian: residual = z - h, blocks are dh/dx
                    fd.set_column(k, &((measure(&wp, &f) - measure(&wm, &f)) / (2.0 * eps)));
                }
                assert_fd_close(block, &fd);
            }
            // orientation blocks (multiplicative perturbation)
            for (block, slot) in [(&row.h_theta_anchor, f.anchor), (&row.h_theta_cur, current)] {
                let mut fd = nalgebra::Matrix2x3::zeros();
                for k in 0..3 {
                    let mut d = Vec3::zeros();
                    d[k] = eps;
                    let mut wp = window.clone();
                    wp.orientations[slot] =
                        quat_mul(&window.orientations[slot], &crate::geom::small_angle_quat(&d));
                    let mut wm = window.clone();
                    wm.orientations[slot] =
                        quat_mul(&window.orientations[slot], &crate::geom::small_angle_quat(&(-d)));
                    fd.set_column(k, &((measure(&wp, &f) - measure(&wm, &f)) / (2.0 * eps)));
                }
                assert_fd_close(block, &fd);
            }
            // feature block
            {
                let mut fd = nalgebra::Matrix2x3::zeros();
                for k in 0..3 {
                    let mut fp = f;
                    let mut fm = f;
                    match k {
                        0 => {
                            fp.alpha += eps;
                            fm.alpha -= eps;
                        }
                        1 => {
                            fp.beta += eps;
                            fm.beta -= eps;
                        }
                        _ => {
                            fp.rho += eps;
                            fm.rho -= eps;
                        }
                    }
                    fd.set_column(k, &((measure(&window, &fp) - measure(&window, &fm)) / (2.0 * eps)));
                }
                assert_fd_close(&row.h_f, &fd);
            }
            tested += 1;
        }
    }

    fn assert_fd_close(analytic: &nalgebra::Matrix2x3<f64>, fd: &nalgebra::Matrix2x3<f64>) {
        let scale = analytic.abs().max().max(1e-3);
        let err = (analytic - fd).abs().max() / scale;
        assert!(err <= 1e-5, "jacobian mismatch {err}:\n{analytic}\nvs FD\n{fd}");
    }

    /// Moving the current camera along its optical axis toward the feature
    /// only changes the predicted depth; the sign of H_p_cur·e_z must agree
    /// with finite differences.
    #[test]
    fn current_translation_along_optical_axis() {
        let window = {
            let mut w = SlidingWindow::new(2);
            w.positions[1] = Vec3::new(0.3, 0.0, 0.0);
            w
        };
        let f = feature(0.2, 0.1, 0.5, 1);
        let p_c = feature_in_camera(&f, &window, 0).unwrap();
        let obs = VisionObservation {
            track_id: 1,
            z: project(&p_c).unwrap(),
            t: 0.0,
        };
        let row = slam_residual_and_jacobians(&f, 0, &window, &obs, 0).unwrap();
        let e_z = Vec3::new(0.0, 0.0, 1.0);
        let analytic = row.h_p_cur * e_z;
        let eps = 1e-6;
        let mut wp = window.clone();
        wp.positions[0] += eps * e_z;
        let mut wm = window.clone();
        wm.positions[0] -= eps * e_z;
        let fd = (project(&feature_in_camera(&f, &wp, 0).unwrap()).unwrap()
            - project(&feature_in_camera(&f, &wm, 0).unwrap()).unwrap())
            / (2.0 * eps);
        assert_abs_diff_eq!(analytic, fd, epsilon = 1e-6);
        // translating toward the feature magnifies the off-axis image point
        assert!(analytic.dot(&obs.z) > 0.0);
    }
}
