//! Full state vector, error-state layout and multiplicative correction.
//!
//! The error state is ordered as
//! `[δp, δv, δθ, δb_g, δb_a | window positions ×M | window orientations ×M |
//! features ×N]`, i.e. window positions are grouped before window
//! orientations, which is what the sliding-window covariance Jacobian
//! assumes. Total error dimension is `15 + 6M + 3N`.
//!
//! The window is indexed newest-first: slot 0 holds the most recent camera
//! pose, slot `M-1` the oldest. Feature slots are a fixed capacity `N`; free
//! slots are masked out of updates and carry identity covariance.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geom::{quat_mul, small_angle_quat, Quat, Vec3};

pub const INERTIAL_ERR_DIM: usize = 15;

/// IMU position/velocity/orientation and inertial biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertialState {
    /// Position of the IMU frame in the world frame (m).
    pub p_wi: Vec3,
    /// Velocity of the IMU frame in the world frame (m/s).
    pub v_wi: Vec3,
    /// Rotation from world to IMU frame.
    pub q_wi: Quat,
    /// Gyroscope bias (rad/s).
    pub b_g: Vec3,
    /// Accelerometer bias (m/s²).
    pub b_a: Vec3,
}

impl InertialState {
    pub fn at_rest(p: Vec3, q: Quat) -> Self {
        InertialState {
            p_wi: p,
            v_wi: Vec3::zeros(),
            q_wi: q,
            b_g: Vec3::zeros(),
            b_a: Vec3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p_wi.iter().all(|x| x.is_finite())
            && self.v_wi.iter().all(|x| x.is_finite())
            && self.q_wi.is_finite()
            && self.b_g.iter().all(|x| x.is_finite())
            && self.b_a.iter().all(|x| x.is_finite())
    }
}

/// The last `M` camera poses, newest at slot 0.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindow {
    pub positions: Vec<Vec3>,
    pub orientations: Vec<Quat>,
}

impl SlidingWindow {
    pub fn new(m: usize) -> Self {
        SlidingWindow {
            positions: vec![Vec3::zeros(); m],
            orientations: vec![Quat::IDENTITY; m],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStatus {
    Slam,
    MsckfCandidate,
}

/// Inverse-depth feature state anchored at a sliding-window pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Feature {
    pub alpha: f64,
    pub beta: f64,
    /// Inverse depth in the anchor frame (1/m).
    pub rho: f64,
    /// Window slot of the anchor pose.
    pub anchor: usize,
    pub track_id: u64,
    pub status: FeatureStatus,
}

/// Camera pose with respect to the IMU, known from calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraExtrinsics {
    /// Camera origin in the IMU frame.
    pub p_ic: Vec3,
    /// Rotation from IMU to camera frame.
    pub q_ic: Quat,
}

impl Default for CameraExtrinsics {
    fn default() -> Self {
        CameraExtrinsics {
            p_ic: Vec3::zeros(),
            q_ic: Quat::IDENTITY,
        }
    }
}

/// World constants. The z-axis points up, so gravity is negative z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldModel {
    pub g_w: Vec3,
}

impl Default for WorldModel {
    fn default() -> Self {
        WorldModel {
            g_w: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

impl WorldModel {
    pub fn validate(&self) -> Result<()> {
        let g = self.g_w.norm();
        if !(9.0..=10.5).contains(&g) {
            return Err(Error::InvalidArgument(format!(
                "gravity magnitude {g} outside (9.0, 10.5); override explicitly if intended"
            )));
        }
        Ok(())
    }
}

/// Index map into the `15 + 6M + 3N`-dimensional error vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorLayout {
    pub m: usize,
    pub n: usize,
}

impl ErrorLayout {
    pub fn new(m: usize, n: usize) -> Self {
        ErrorLayout { m, n }
    }

    pub fn dim(&self) -> usize {
        INERTIAL_ERR_DIM + 6 * self.m + 3 * self.n
    }

    pub fn dp(&self) -> Range<usize> {
        0..3
    }

    pub fn dv(&self) -> Range<usize> {
        3..6
    }

    pub fn dtheta(&self) -> Range<usize> {
        6..9
    }

    pub fn dbg(&self) -> Range<usize> {
        9..12
    }

    pub fn dba(&self) -> Range<usize> {
        12..15
    }

    /// Position block of window slot `i` (0 = newest).
    pub fn win_pos(&self, slot: usize) -> Range<usize> {
        assert!(slot < self.m, "window slot {slot} out of range (M={})", self.m);
        let s = INERTIAL_ERR_DIM + 3 * slot;
        s..s + 3
    }

    /// Orientation block of window slot `i` (0 = newest).
    pub fn win_att(&self, slot: usize) -> Range<usize> {
        assert!(slot < self.m, "window slot {slot} out of range (M={})", self.m);
        let s = INERTIAL_ERR_DIM + 3 * self.m + 3 * slot;
        s..s + 3
    }

    /// Block of feature slot `j`.
    pub fn feat(&self, slot: usize) -> Range<usize> {
        assert!(slot < self.n, "feature slot {slot} out of range (N={})", self.n);
        let s = INERTIAL_ERR_DIM + 6 * self.m + 3 * slot;
        s..s + 3
    }
}

/// Dense symmetric error covariance over an [`ErrorLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCovariance {
    mat: DMatrix<f64>,
}

impl ErrorCovariance {
    pub fn zeros(layout: ErrorLayout) -> Self {
        ErrorCovariance {
            mat: DMatrix::zeros(layout.dim(), layout.dim()),
        }
    }

    pub fn from_matrix(mat: DMatrix<f64>) -> Self {
        assert_eq!(mat.nrows(), mat.ncols());
        ErrorCovariance { mat }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn as_matrix_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.mat
    }

    /// Inertial 15x15 block.
    pub fn p_ii(&self) -> DMatrix<f64> {
        self.mat.view((0, 0), (INERTIAL_ERR_DIM, INERTIAL_ERR_DIM)).into()
    }

    /// Inertial-vision cross block, 15 x (6M+3N).
    pub fn p_iv(&self) -> DMatrix<f64> {
        let v = self.dim() - INERTIAL_ERR_DIM;
        self.mat.view((0, INERTIAL_ERR_DIM), (INERTIAL_ERR_DIM, v)).into()
    }

    /// Vision block, (6M+3N) square.
    pub fn p_vv(&self) -> DMatrix<f64> {
        let v = self.dim() - INERTIAL_ERR_DIM;
        self.mat.view((INERTIAL_ERR_DIM, INERTIAL_ERR_DIM), (v, v)).into()
    }

    pub fn symmetrize(&mut self) {
        let t = self.mat.transpose();
        self.mat += t;
        self.mat *= 0.5;
    }
}

/// Complete filter state: inertial states, sliding window and feature slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FullState {
    pub inertial: InertialState,
    pub window: SlidingWindow,
    /// Fixed-capacity feature slots; `None` marks a free slot.
    pub features: Vec<Option<Feature>>,
    pub layout: ErrorLayout,
}

impl FullState {
    pub fn new(inertial: InertialState, layout: ErrorLayout) -> Self {
        FullState {
            inertial,
            window: SlidingWindow::new(layout.m),
            features: vec![None; layout.n],
            layout,
        }
    }

    pub fn live_features(&self) -> impl Iterator<Item = (usize, &Feature)> {
        self.features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.as_ref().map(|f| (i, f)))
    }

    pub fn free_feature_slots(&self) -> Vec<usize> {
        self.features
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.is_none().then_some(i))
            .collect()
    }
}

/// Applies an error-state correction: additive on vector states,
/// multiplicative `q ← q̂ ⊗ δq(δθ)` on every quaternion.
pub fn apply_correction(state: &mut FullState, dx: &DVector<f64>) -> Result<()> {
    let layout = state.layout;
    if dx.len() != layout.dim() {
        return Err(Error::DimensionMismatch {
            expected: layout.dim(),
            got: dx.len(),
            context: "apply_correction",
        });
    }
    let seg = |r: Range<usize>| Vec3::new(dx[r.start], dx[r.start + 1], dx[r.start + 2]);

    state.inertial.p_wi += seg(layout.dp());
    state.inertial.v_wi += seg(layout.dv());
    state.inertial.q_wi = quat_mul(&state.inertial.q_wi, &small_angle_quat(&seg(layout.dtheta())));
    state.inertial.b_g += seg(layout.dbg());
    state.inertial.b_a += seg(layout.dba());

    for slot in 0..layout.m {
        state.window.positions[slot] += seg(layout.win_pos(slot));
        state.window.orientations[slot] = quat_mul(
            &state.window.orientations[slot],
            &small_angle_quat(&seg(layout.win_att(slot))),
        );
    }

    for slot in 0..layout.n {
        if let Some(f) = state.features[slot].as_mut() {
            let d = seg(layout.feat(slot));
            f.alpha += d.x;
            f.beta += d.y;
            f.rho += d.z;
        }
    }
    Ok(())
}
