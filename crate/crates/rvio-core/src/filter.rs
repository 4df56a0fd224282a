//! Inertial propagation, the generic EKF update and statistical gating.
//!
//! Propagation integrates the IMU mechanization at first order and advances
//! the covariance blockwise: the inertial block gets the full
//! `F P F' + Q` treatment, the cross block is left-multiplied by `F`, and
//! the vision block is untouched (vision states have zero dynamics).

use nalgebra::{DMatrix, DVector, SMatrix};

use crate::error::{Error, Result};
use crate::geom::{omega, skew, Mat3, Quat, Vec3};
use crate::state::{
    apply_correction, ErrorCovariance, FullState, InertialState, WorldModel, INERTIAL_ERR_DIM,
};

pub type Mat15 = SMatrix<f64, 15, 15>;

/// One IMU reading: body angular rate and specific force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    /// Gyroscope reading (rad/s).
    pub omega_imu: Vec3,
    /// Accelerometer reading, specific force (m/s²).
    pub a_imu: Vec3,
}

/// Continuous-time noise densities plus measurement noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub sigma_na: f64,
    pub sigma_nba: f64,
    pub sigma_ng: f64,
    pub sigma_nbg: f64,
    /// Normalized-pixel feature noise std.
    pub sigma_v: f64,
    /// Range noise std (m).
    pub sigma_r: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            sigma_na: 2e-2,
            sigma_nba: 1e-4,
            sigma_ng: 2e-3,
            sigma_nbg: 1e-5,
            sigma_v: 2e-3,
            sigma_r: 5e-2,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_na,
            self.sigma_nba,
            self.sigma_ng,
            self.sigma_nbg,
            self.sigma_v,
            self.sigma_r,
        ];
        if all.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "all noise standard deviations must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

/// First-order strapdown step: bias-corrected rates, kinematic integration,
/// quaternion renormalized. Biases are constant under propagation.
pub fn propagate_state(
    s: &InertialState,
    u: &ImuSample,
    dt: f64,
    world: &WorldModel,
) -> Result<InertialState> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let a_hat = u.a_imu - s.b_a;
    let w_hat = u.omega_imu - s.b_g;

    let c = s.q_wi.to_rotation();
    let p = s.p_wi + s.v_wi * dt;
    let v = s.v_wi + (c.transpose() * a_hat + world.g_w) * dt;

    // q_{k+1} = (I + ½ Ω(ω̂) dt) q_k, then renormalize.
    let q4 = nalgebra::Vector4::new(s.q_wi.w, s.q_wi.x, s.q_wi.y, s.q_wi.z);
    let q4 = (nalgebra::Matrix4::identity() + 0.5 * omega(&w_hat) * dt) * q4;
    let q = Quat {
        w: q4[0],
        x: q4[1],
        y: q4[2],
        z: q4[3],
    }
    .normalized();

    Ok(InertialState {
        p_wi: p,
        v_wi: v,
        q_wi: q,
        b_g: s.b_g,
        b_a: s.b_a,
    })
}

/// Discrete inertial error transition `F_d = I + F_c dt` and the effective
/// process noise `G_c diag(σ²) G_c' dt`.
pub fn error_jacobians(s: &InertialState, u: &ImuSample, dt: f64, noise: &NoiseConfig) -> (Mat15, Mat15) {
    assert!(dt > 0.0, "dt must be positive");
    let a_hat = u.a_imu - s.b_a;
    let w_hat = u.omega_imu - s.b_g;
    let ct = s.q_wi.to_rotation().transpose();

    let mut f_c = Mat15::zeros();
    // δṗ = δv
    f_c.fixed_view_mut::<3, 3>(0, 3).copy_from(&Mat3::identity());
    // δv̇ = -C'⌊â×⌋ δθ - C' δb_a
    f_c.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-ct * skew(&a_hat)));
    f_c.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-ct));
    // δθ̇ = -⌊ω̂×⌋ δθ - δb_g
    f_c.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-skew(&w_hat)));
    f_c.fixed_view_mut::<3, 3>(6, 9).copy_from(&(-Mat3::identity()));

    let f_d = Mat15::identity() + f_c * dt;

    // Noise enters as n = [n_a, n_ba, n_g, n_bg].
    let mut g_c = SMatrix::<f64, 15, 12>::zeros();
    g_c.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-ct));
    g_c.fixed_view_mut::<3, 3>(12, 3).copy_from(&Mat3::identity());
    g_c.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-Mat3::identity()));
    g_c.fixed_view_mut::<3, 3>(9, 9).copy_from(&Mat3::identity());

    let mut q_d = SMatrix::<f64, 12, 12>::zeros();
    for (i, s2) in [
        noise.sigma_na * noise.sigma_na,
        noise.sigma_nba * noise.sigma_nba,
        noise.sigma_ng * noise.sigma_ng,
        noise.sigma_nbg * noise.sigma_nbg,
    ]
    .iter()
    .enumerate()
    {
        for k in 0..3 {
            q_d[(3 * i + k, 3 * i + k)] = *s2;
        }
    }

    let qd_eff = g_c * q_d * g_c.transpose() * dt;
    (f_d, qd_eff)
}

/// Blockwise covariance propagation: `P_II ← F P_II F' + Q`, `P_IV ← F P_IV`,
/// `P_VV` unchanged. The result is symmetrized.
pub fn propagate_covariance(p: &mut ErrorCovariance, f_d: &Mat15, qd_eff: &Mat15) {
    let dim = p.dim();
    let v = dim - INERTIAL_ERR_DIM;
    let m = p.as_matrix_mut();

    let p_ii: SMatrix<f64, 15, 15> = m.fixed_view::<15, 15>(0, 0).into();
    let new_ii = f_d * p_ii * f_d.transpose() + qd_eff;
    m.fixed_view_mut::<15, 15>(0, 0).copy_from(&new_ii);

    if v > 0 {
        let p_iv = m.view((0, INERTIAL_ERR_DIM), (INERTIAL_ERR_DIM, v)).clone_owned();
        let new_iv = f_d * p_iv;
        m.view_mut((0, INERTIAL_ERR_DIM), (INERTIAL_ERR_DIM, v)).copy_from(&new_iv);
        m.view_mut((INERTIAL_ERR_DIM, 0), (v, INERTIAL_ERR_DIM))
            .copy_from(&new_iv.transpose());
    }
    p.symmetrize();
}

/// What an EKF update did, for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub dx_norm: f64,
    pub residual_dim: usize,
}

/// Joseph-form EKF update. Rejects the update (without touching the state)
/// when the innovation covariance is numerically singular.
pub fn ekf_update(
    state: &mut FullState,
    p: &mut ErrorCovariance,
    residual: &DVector<f64>,
    h: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<UpdateOutcome> {
    let dim = p.dim();
    if h.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: h.ncols(),
            context: "ekf_update H columns",
        });
    }
    if h.nrows() != residual.len() || r.nrows() != residual.len() || r.ncols() != residual.len() {
        return Err(Error::DimensionMismatch {
            expected: residual.len(),
            got: h.nrows(),
            context: "ekf_update rows",
        });
    }
    if residual.is_empty() {
        return Ok(UpdateOutcome {
            dx_norm: 0.0,
            residual_dim: 0,
        });
    }

    let pm = p.as_matrix();
    let ph_t = pm * h.transpose();
    let s = h * &ph_t + r;

    let svd = s.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 0.0) || smax / smin > 1e12 {
        return Err(Error::UpdateRejected(format!(
            "innovation covariance condition {:.3e} exceeds 1e12",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    let s_inv_r = svd
        .solve(residual, 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let s_inv_hp = svd
        .solve(&ph_t.transpose(), 0.0)
        .map_err(|e| Error::Numerical(e.to_string()))?;

    let dx = &ph_t * s_inv_r;
    let k = s_inv_hp.transpose(); // K = P H' S⁻¹

    apply_correction(state, &dx)?;

    let i_kh = DMatrix::identity(dim, dim) - &k * h;
    let joseph = &i_kh * pm * i_kh.transpose() + &k * r * k.transpose();
    *p.as_matrix_mut() = joseph;
    p.symmetrize();

    Ok(UpdateOutcome {
        dx_norm: dx.norm(),
        residual_dim: residual.len(),
    })
}

/// Chi-square gate on the innovation: pass iff `r' S⁻¹ r` is below the
/// `confidence` quantile with `len(r)` degrees of freedom.
pub fn chi2_gate(residual: &DVector<f64>, s: &DMatrix<f64>, confidence: f64) -> Result<bool> {
    if residual.is_empty() {
        return Ok(true);
    }
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("chi2 gate: singular innovation covariance".into()))?;
    let d2 = residual.dot(&chol.solve(residual));
    Ok(d2 <= chi2_quantile(residual.len(), confidence))
}

/// Chi-square quantile via bisection on the regularized lower incomplete
/// gamma function.
pub fn chi2_quantile(df: usize, confidence: f64) -> f64 {
    assert!(df >= 1, "chi2 quantile needs df >= 1");
    assert!((0.0..1.0).contains(&confidence));
    let a = df as f64 / 2.0;
    let cdf = |x: f64| gamma_p(a, x / 2.0);
    // Bracket: the mean is df; the p-quantile is below df + 10 sqrt(2 df) + 20.
    let mut lo = 0.0;
    let mut hi = df as f64 + 10.0 * (2.0 * df as f64).sqrt() + 20.0;
    while cdf(hi) < confidence {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if cdf(mid) < confidence {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi.max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Regularized lower incomplete gamma P(a, x) by series (x < a+1) or
/// continued fraction (x >= a+1).
fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // series expansion
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (-x + a * x.ln() - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Lanczos log-gamma.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for g in G {
        y += 1.0;
        ser += g / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}
