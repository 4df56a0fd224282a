//! Ranged-facet measurement: Delaunay triangulation over SLAM features in
//! image space, facet selection, range prediction and the full Jacobian
//! chain from the scalar range down to every involved error state.

use nalgebra::{RowDVector, Vector2};

use crate::error::{Error, Result};
use crate::geom::{skew, Vec3};
use crate::slam::{inverse_depth_jacobian, inverse_depth_to_world};
use crate::state::{ErrorLayout, Feature, SlidingWindow};

/// Default guard against near-parallel beam/facet geometry, applied to
/// `|b| / (‖u_r‖ ‖n‖)`.
pub const DEFAULT_BEAM_DOT_THRESHOLD: f64 = 0.05;

/// Laser range finder model: beam direction in the camera frame, zero lever
/// arm between camera and LRF origins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrfModel {
    pub u_r_c: Vec3,
    pub sigma_r: f64,
}

impl LrfModel {
    pub fn new(u_r_c: Vec3, sigma_r: f64) -> Result<Self> {
        let n = u_r_c.norm();
        if !((n - 1.0).abs() < 1e-6) {
            return Err(Error::InvalidArgument(format!("LRF direction must be unit, norm = {n}")));
        }
        Ok(LrfModel { u_r_c, sigma_r })
    }
}

/// A terrain facet: three SLAM features, their world points, the (non-unit)
/// facet normal and the range numerator/denominator.
#[derive(Debug, Clone, PartialEq)]
pub struct Facet {
    /// SLAM feature slots forming the facet corners.
    pub slots: [usize; 3],
    pub world_points: [Vec3; 3],
    pub normal: Vec3,
    pub a: f64,
    pub b: f64,
}

// ---------------------------------------------------------------------------
// Delaunay triangulation (Bowyer-Watson)
// ---------------------------------------------------------------------------

/// Signed doubled area of triangle (a, b, c); positive when counterclockwise.
fn orient2d(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Positive when `d` lies strictly inside the circumcircle of the
/// counterclockwise triangle (a, b, c).
fn incircle(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, d: &Vector2<f64>) -> f64 {
    let (adx, ady) = (a.x - d.x, a.y - d.y);
    let (bdx, bdy) = (b.x - d.x, b.y - d.y);
    let (cdx, cdy) = (c.x - d.x, c.y - d.y);
    let ad = adx * adx + ady * ady;
    let bd = bdx * bdx + bdy * bdy;
    let cd = cdx * cdx + cdy * cdy;
    adx * (bdy * cd - bd * cdy) - ady * (bdx * cd - bd * cdx) + ad * (bdx * cdy - bdy * cdx)
}

/// Delaunay triangulation of normalized image points by incremental
/// Bowyer-Watson insertion. Returns index triples in canonical order
/// (vertices ascending, triangles sorted lexicographically), or an empty
/// list for fewer than 3 or collinear input points.
pub fn delaunay_facets(points: &[Vector2<f64>]) -> Vec<[usize; 3]> {
    let n = points.len();
    if n < 3 {
        return Vec::new();
    }
    // all collinear?
    let collinear = {
        let mut all = true;
        'outer: for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    if orient2d(&points[i], &points[j], &points[k]).abs() > 1e-12 {
                        all = false;
                        break 'outer;
                    }
                }
            }
        }
        all
    };
    if collinear {
        return Vec::new();
    }

    // super-triangle comfortably covering all points
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let d = (max_x - min_x).max(max_y - min_y).max(1.0) * 64.0;
    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let mut verts: Vec<Vector2<f64>> = points.to_vec();
    verts.push(Vector2::new(cx - 2.0 * d, cy - d));
    verts.push(Vector2::new(cx + 2.0 * d, cy - d));
    verts.push(Vector2::new(cx, cy + 2.0 * d));
    let s0 = n;
    let s1 = n + 1;
    let s2 = n + 2;

    let ccw = |t: &[usize; 3]| -> [usize; 3] {
        if orient2d(&verts[t[0]], &verts[t[1]], &verts[t[2]]) < 0.0 {
            [t[0], t[2], t[1]]
        } else {
            *t
        }
    };

    let mut triangles: Vec<[usize; 3]> = vec![ccw(&[s0, s1, s2])];

    for (pi, p) in points.iter().enumerate() {
        // triangles whose circumcircle contains p
        let mut bad = Vec::new();
        for (ti, t) in triangles.iter().enumerate() {
            if incircle(&verts[t[0]], &verts[t[1]], &verts[t[2]], p) > 0.0 {
                bad.push(ti);
            }
        }
        // boundary of the cavity: edges appearing exactly once among bad triangles
        let mut edges: Vec<(usize, usize)> = Vec::new();
        for &ti in &bad {
            let t = triangles[ti];
            for e in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                let rev = (e.1, e.0);
                if let Some(pos) = edges.iter().position(|&x| x == rev || x == e) {
                    edges.remove(pos);
                } else {
                    edges.push(e);
                }
            }
        }
        for &ti in bad.iter().rev() {
            triangles.swap_remove(ti);
        }
        for (ea, eb) in edges {
            triangles.push(ccw(&[ea, eb, pi]));
        }
    }

    let mut out: Vec<[usize; 3]> = triangles
        .into_iter()
        .filter(|t| t.iter().all(|&v| v < n))
        .map(|t| {
            let mut s = t;
            s.sort_unstable();
            s
        })
        .collect();
    out.sort_unstable();
    out
}

/// Selects the triangle containing the beam point (barycentric coordinates
/// all at least -1e-12). Ties on shared edges go to the lowest triangle
/// index.
pub fn select_facet(
    triangles: &[[usize; 3]],
    points: &[Vector2<f64>],
    beam_point: &Vector2<f64>,
) -> Option<usize> {
    for (ti, t) in triangles.iter().enumerate() {
        let (a, b, c) = (&points[t[0]], &points[t[1]], &points[t[2]]);
        let area = orient2d(a, b, c);
        if area.abs() < 1e-300 {
            continue;
        }
        let w0 = orient2d(b, c, beam_point) / area;
        let w1 = orient2d(c, a, beam_point) / area;
        let w2 = orient2d(a, b, beam_point) / area;
        if w0 >= -1e-12 && w1 >= -1e-12 && w2 >= -1e-12 {
            return Some(ti);
        }
    }
    None
}

// ---------------------------------------------------------------------------
// Facet geometry and range prediction
// ---------------------------------------------------------------------------

/// Builds the facet quantities from three SLAM features and the current
/// camera pose.
pub fn build_facet(
    features: &[(usize, Feature); 3],
    window: &SlidingWindow,
    current_slot: usize,
    lrf: &LrfModel,
) -> Result<Facet> {
    let mut world_points = [Vec3::zeros(); 3];
    for (k, (_, f)) in features.iter().enumerate() {
        world_points[k] = inverse_depth_to_world(
            f.alpha,
            f.beta,
            f.rho,
            &window.positions[f.anchor],
            &window.orientations[f.anchor],
        )?;
    }
    let normal = (world_points[0] - world_points[1]).cross(&(world_points[2] - world_points[1]));
    let p_c = window.positions[current_slot];
    let u_r_w = window.orientations[current_slot].to_rotation().transpose() * lrf.u_r_c;
    let a = (world_points[1] - p_c).dot(&normal);
    let b = u_r_w.dot(&normal);
    Ok(Facet {
        slots: [features[0].0, features[1].0, features[2].0],
        world_points,
        normal,
        a,
        b,
    })
}

/// Predicted range `a / b`, guarded against near-parallel geometry.
pub fn range_predict(facet: &Facet, beam_dot_threshold: f64) -> Result<f64> {
    let denom = facet.normal.norm();
    if denom < 1e-300 {
        return Err(Error::Numerical("degenerate facet: zero normal".into()));
    }
    if facet.b.abs() / denom <= beam_dot_threshold {
        return Err(Error::Numerical(format!(
            "range update skipped: beam nearly parallel to facet (|b|/‖n‖ = {:.3e})",
            facet.b.abs() / denom
        )));
    }
    Ok(facet.a / facet.b)
}

/// One scalar range row scattered over the full error state.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeRow {
    pub h: RowDVector<f64>,
    pub residual: f64,
    pub predicted: f64,
}

/// Cartesian helper Jacobians of the range with respect to the three facet
/// corner positions, `1x3` each.
pub fn cartesian_point_jacobians(facet: &Facet, p_intersection: &Vec3) -> [Vec3; 3] {
    let [p1, p2, p3] = facet.world_points;
    let lever = p2 - p_intersection;
    let h1 = skew(&(p3 - p2)) * lever / facet.b;
    let h2 = (facet.normal + skew(&(p1 - p3)) * lever) / facet.b;
    let h3 = skew(&(p2 - p1)) * lever / facet.b;
    [h1, h2, h3]
}

/// Full analytic range row: residual plus every block (current pose, the
/// three anchors, the three features) scattered into the error layout.
/// Blocks accumulate when facet features share an anchor pose or when an
/// anchor coincides with the current pose.
pub fn range_jacobians(
    features: &[(usize, Feature); 3],
    window: &SlidingWindow,
    current_slot: usize,
    lrf: &LrfModel,
    measured: f64,
    layout: &ErrorLayout,
    beam_dot_threshold: f64,
) -> Result<RangeRow> {
    let facet = build_facet(features, window, current_slot, lrf)?;
    let predicted = range_predict(&facet, beam_dot_threshold)?;

    let p_c = window.positions[current_slot];
    let c_cur = window.orientations[current_slot].to_rotation();
    let u_r_w = c_cur.transpose() * lrf.u_r_c;
    let p_i = p_c + predicted * u_r_w;

    let h_points = cartesian_point_jacobians(&facet, &p_i);

    let mut h = RowDVector::zeros(layout.dim());
    let mut add = |range: std::ops::Range<usize>, block: &Vec3| {
        for (k, idx) in range.enumerate() {
            h[idx] += block[k];
        }
    };

    // current camera position and orientation
    let h_p_cur = -facet.normal / facet.b;
    add(layout.win_pos(current_slot), &h_p_cur);
    let h_theta_cur = -(facet.a / (facet.b * facet.b)) * (skew(&lrf.u_r_c) * c_cur * facet.normal);
    add(layout.win_att(current_slot), &h_theta_cur);

    // anchor and feature blocks, one per facet corner
    for (k, (slot, f)) in features.iter().enumerate() {
        let h_pj = h_points[k];
        let c_anchor_t = window.orientations[f.anchor].to_rotation().transpose();
        let bearing = Vec3::new(f.alpha, f.beta, 1.0);

        add(layout.win_pos(f.anchor), &h_pj);
        let h_theta_anchor =
            -(1.0 / f.rho) * (skew(&bearing).transpose() * (c_anchor_t.transpose() * h_pj));
        add(layout.win_att(f.anchor), &h_theta_anchor);
        let h_f = (1.0 / f.rho)
            * (inverse_depth_jacobian(f.alpha, f.beta, f.rho).transpose() * (c_anchor_t.transpose() * h_pj));
        add(layout.feat(*slot), &h_f);
    }

    Ok(RangeRow {
        h,
        residual: measured - predicted,
        predicted,
    })
}

/// Scalar Mahalanobis gate for a range row: squared standardized residual
/// against the df = 1 chi-square threshold.
pub fn range_gate(residual: f64, innovation_variance: f64, threshold: f64) -> bool {
    innovation_variance > 0.0 && residual * residual / innovation_variance <= threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{quat_mul, small_angle_quat, Quat};
    use crate::state::FeatureStatus;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn down_quat() -> Quat {
        // camera z-axis along world -z: 180 degrees about x
        Quat::from_axis_angle(&Vec3::new(1.0, 0.0, 0.0), std::f64::consts::PI)
    }

    #[test]
    fn camera_down_convention() {
        let c = down_quat().to_rotation();
        // world (0,0,-1) maps to camera (0,0,1): terrain below is in front
        assert_abs_diff_eq!(c * Vec3::new(0.0, 0.0, -1.0), Vec3::new(0.0, 0.0, 1.0), epsilon = 1e-12);
    }

    #[test]
    fn delaunay_three_points() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
        ];
        let tris = delaunay_facets(&pts);
        assert_eq!(tris, vec![[0, 1, 2]]);
    }

    #[test]
    fn delaunay_degenerate_inputs() {
        assert!(delaunay_facets(&[Vector2::new(0.0, 0.0), Vector2::new(1.0, 1.0)]).is_empty());
        let collinear = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 1.0),
            Vector2::new(2.0, 2.0),
            Vector2::new(3.0, 3.0),
        ];
        assert!(delaunay_facets(&collinear).is_empty());
    }

    /// Brute-force empty-circumcircle check over all point/triangle pairs.
    #[test]
    fn delaunay_empty_circumcircle() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.1),
            Vector2::new(0.9, 1.0),
            Vector2::new(-0.1, 0.9),
        ];
        let tris = delaunay_facets(&pts);
        assert_eq!(tris.len(), 2, "4 points in convex position give 2 triangles");
        check_delaunay_property(&pts, &tris);

        let mut rng = StdRng::seed_from_u64(51);
        for _ in 0..20 {
            let pts: Vec<Vector2<f64>> = (0..15)
                .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect();
            let tris = delaunay_facets(&pts);
            assert!(!tris.is_empty());
            check_delaunay_property(&pts, &tris);
        }
    }

    fn check_delaunay_property(pts: &[Vector2<f64>], tris: &[[usize; 3]]) {
        for t in tris {
            let (a, b, c) = (&pts[t[0]], &pts[t[1]], &pts[t[2]]);
            let (a, b, c) = if orient2d(a, b, c) > 0.0 { (a, b, c) } else { (a, c, b) };
            for (pi, p) in pts.iter().enumerate() {
                if t.contains(&pi) {
                    continue;
                }
                assert!(
                    incircle(a, b, c, p) <= 1e-12,
                    "point {pi} inside circumcircle of {t:?}"
                );
            }
        }
    }

    #[test]
    fn select_facet_examples() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
        ];
        let tris = delaunay_facets(&pts);
        let centroid = Vector2::new(1.0 / 3.0, 1.0 / 3.0);
        assert_eq!(select_facet(&tris, &pts, &centroid), Some(0));
        assert_eq!(select_facet(&tris, &pts, &Vector2::new(5.0, 5.0)), None);
    }

    #[test]
    fn select_facet_edge_tie_break() {
        let pts = vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(1.0, 0.0),
            Vector2::new(0.0, 1.0),
            Vector2::new(1.0, 1.0),
        ];
        let tris = delaunay_facets(&pts);
        assert_eq!(tris.len(), 2);
        // midpoint of the shared diagonal lies on both triangles
        let shared: Vec<usize> = (0..4).filter(|i| tris[0].contains(i) && tris[1].contains(i)).collect();
        assert_eq!(shared.len(), 2);
        let mid = 0.5 * (pts[shared[0]] + pts[shared[1]]);
        let sel = select_facet(&tris, &pts, &mid).unwrap();
        // enumerate both barycentric tests: both must contain the point,
        // and the tie must go to the lower index
        for (ti, t) in tris.iter().enumerate() {
            let (a, b, c) = (&pts[t[0]], &pts[t[1]], &pts[t[2]]);
            let area = orient2d(a, b, c);
            let w0 = orient2d(b, c, &mid) / area;
            let w1 = orient2d(c, a, &mid) / area;
            let w2 = orient2d(a, b, &mid) / area;
            assert!(w0 >= -1e-12 && w1 >= -1e-12 && w2 >= -1e-12, "triangle {ti} must contain the midpoint");
        }
        assert_eq!(sel, 0);
    }

    fn slam_feature(slot: usize, alpha: f64, beta: f64, rho: f64, anchor: usize) -> (usize, Feature) {
        (
            slot,
            Feature {
                alpha,
                beta,
                rho,
                anchor,
                track_id: slot as u64,
                status: FeatureStatus::Slam,
            },
        )
    }

    /// Nadir over a flat plane: camera at height 2, beam straight down,
    /// facet in z = 0.
    fn nadir_setup() -> ([(usize, Feature); 3], SlidingWindow, LrfModel) {
        let mut window = SlidingWindow::new(2);
        window.positions[0] = Vec3::new(0.0, 0.0, 2.0);
        window.orientations[0] = down_quat();
        window.positions[1] = Vec3::new(0.3, 0.1, 2.0);
        window.orientations[1] = down_quat();

        // features on z = 0 around the beam footprint, anchored at slot 1
        let corners = [
            Vec3::new(0.5, 0.0, 0.0),
            Vec3::new(-0.4, 0.4, 0.0),
            Vec3::new(-0.4, -0.4, 0.0),
        ];
        let mut feats = Vec::new();
        for (k, p_w) in corners.iter().enumerate() {
            let c = window.orientations[1].to_rotation();
            let in_cam = c * (p_w - window.positions[1]);
            feats.push(slam_feature(
                k,
                in_cam.x / in_cam.z,
                in_cam.y / in_cam.z,
                1.0 / in_cam.z,
                1,
            ));
        }
        let lrf = LrfModel::new(Vec3::new(0.0, 0.0, 1.0), 0.05).unwrap();
        ([feats[0], feats[1], feats[2]], window, lrf)
    }

    #[test]
    fn range_predict_nadir() {
        let (feats, window, lrf) = nadir_setup();
        let facet = build_facet(&feats, &window, 0, &lrf).unwrap();
        let r = range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).unwrap();
        assert_abs_diff_eq!(r, 2.0, epsilon = 1e-12);
    }

    /// Ray-plane oracle for a beam tilted 30 degrees from nadir.
    #[test]
    fn range_predict_tilted_beam() {
        let (feats, window, _) = nadir_setup();
        let theta: f64 = 30f64.to_radians();
        let lrf = LrfModel::new(Vec3::new(theta.sin(), 0.0, theta.cos()), 0.05).unwrap();
        let facet = build_facet(&feats, &window, 0, &lrf).unwrap();
        let r = range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).unwrap();
        assert_abs_diff_eq!(r, 2.0 / theta.cos(), epsilon = 1e-9);
        assert_abs_diff_eq!(r, 2.309401, epsilon = 1e-6);
    }

    #[test]
    fn range_predict_parallel_beam_skipped() {
        let (feats, window, _) = nadir_setup();
        let lrf = LrfModel::new(Vec3::new(1.0, 0.0, 0.0), 0.05).unwrap();
        let facet = build_facet(&feats, &window, 0, &lrf).unwrap();
        assert!(range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).is_err());
    }

    #[test]
    fn relabeling_preserves_prediction() {
        let (feats, window, lrf) = nadir_setup();
        let f0 = build_facet(&feats, &window, 0, &lrf).unwrap();
        let rotated = [feats[1], feats[2], feats[0]];
        let f1 = build_facet(&rotated, &window, 0, &lrf).unwrap();
        let r0 = f0.a / f0.b;
        let r1 = f1.a / f1.b;
        assert_abs_diff_eq!(r0, r1, epsilon = 1e-12);
        // swapped labels flip both a and b together
        let swapped = [feats[1], feats[0], feats[2]];
        let f2 = build_facet(&swapped, &window, 0, &lrf).unwrap();
        assert_abs_diff_eq!(f2.a / f2.b, r0, epsilon = 1e-12);
    }

    #[test]
    fn nadir_camera_height_row() {
        let (feats, window, lrf) = nadir_setup();
        let layout = ErrorLayout::new(2, 3);
        let row = range_jacobians(&feats, &window, 0, &lrf, 2.0, &layout, DEFAULT_BEAM_DOT_THRESHOLD).unwrap();
        // H_p_cur = -n'/b; over a flat z=0 facet the range grows 1:1 with camera height
        let hp = &row.h.columns(layout.win_pos(0).start, 3);
        assert_abs_diff_eq!(hp[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hp[1], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(hp[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(row.residual, 0.0, epsilon = 1e-12);
    }

    /// Four-line form via the intersection point equals the alpha/beta raw
    /// form that never constructs p_I.
    #[test]
    fn intersection_form_equals_raw_form() {
        let mut rng = StdRng::seed_from_u64(52);
        for _ in 0..50 {
            let (feats, window, lrf) = random_facet_setup(&mut rng);
            let Ok(facet) = build_facet(&feats, &window, 0, &lrf) else {
                continue;
            };
            if range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).is_err() {
                continue;
            }
            let z_r = facet.a / facet.b;
            let p_c = window.positions[0];
            let u_r_w = window.orientations[0].to_rotation().transpose() * lrf.u_r_c;
            let p_i = p_c + z_r * u_r_w;
            let via_intersection = cartesian_point_jacobians(&facet, &p_i);

            // raw form: (1/b) ⌊e×⌋(p2-pc) - (a/b²) ⌊e×⌋u_r_w per corner,
            // never constructing p_I
            let [p1, p2, p3] = facet.world_points;
            let edges = [p3 - p2, p1 - p3, p2 - p1];
            for (k, e) in edges.iter().enumerate() {
                let raw = (skew(e) * (p2 - p_c)) / facet.b
                    - (facet.a / (facet.b * facet.b)) * (skew(e) * u_r_w);
                let mut expected = raw;
                if k == 1 {
                    expected += facet.normal / facet.b;
                }
                assert_abs_diff_eq!(via_intersection[k], expected, epsilon = 1e-12 * facet.normal.norm().max(1.0));
            }
        }
    }

    fn random_facet_setup(rng: &mut StdRng) -> ([(usize, Feature); 3], SlidingWindow, LrfModel) {
        let m = 3;
        let mut window = SlidingWindow::new(m);
        for i in 0..m {
            window.positions[i] = Vec3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                2.0 + rng.gen_range(-0.3..0.3),
            );
            let wobble = Vec3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            window.orientations[i] = quat_mul(&down_quat(), &small_angle_quat(&wobble));
        }
        let mut feats = Vec::new();
        for k in 0..3 {
            let angle = k as f64 * 2.0 * std::f64::consts::PI / 3.0 + rng.gen_range(-0.3..0.3);
            let r = rng.gen_range(0.3..0.7);
            let p_w = Vec3::new(r * angle.cos(), r * angle.sin(), rng.gen_range(-0.2..0.2));
            let anchor = rng.gen_range(0..m);
            let c = window.orientations[anchor].to_rotation();
            let in_cam = c * (p_w - window.positions[anchor]);
            feats.push(slam_feature(k, in_cam.x / in_cam.z, in_cam.y / in_cam.z, 1.0 / in_cam.z, anchor));
        }
        let tilt = Vec3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 1.0).normalize();
        let lrf = LrfModel::new(tilt, 0.05).unwrap();
        ([feats[0], feats[1], feats[2]], window, lrf)
    }

    fn nonlinear_range(
        feats: &[(usize, Feature); 3],
        window: &SlidingWindow,
        current_slot: usize,
        lrf: &LrfModel,
    ) -> f64 {
        let facet = build_facet(feats, window, current_slot, lrf).unwrap();
        facet.a / facet.b
    }

    /// All eleven blocks against central finite differences of the full
    /// nonlinear pipeline, 100 random geometries.
    #[test]
    fn range_jacobians_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(53);
        let eps = 1e-6;
        let mut done = 0;
        while done < 100 {
            let (feats, window, lrf) = random_facet_setup(&mut rng);
            let layout = ErrorLayout::new(3, 3);
            let Ok(row) = range_jacobians(&feats, &window, 0, &lrf, 0.0, &layout, DEFAULT_BEAM_DOT_THRESHOLD)
            else {
                continue;
            };

            let mut fd = RowDVector::zeros(layout.dim());
            // window positions
            for slot in 0..layout.m {
                for k in 0..3 {
                    let mut wp = window.clone();
                    wp.positions[slot][k] += eps;
                    let mut wm = window.clone();
                    wm.positions[slot][k] -= eps;
                    fd[layout.win_pos(slot).start + k] = (nonlinear_range(&feats, &wp, 0, &lrf)
                        - nonlinear_range(&feats, &wm, 0, &lrf))
                        / (2.0 * eps);
                }
            }
            // window orientations (multiplicative)
            for slot in 0..layout.m {
                for k in 0..3 {
                    let mut d = Vec3::zeros();
                    d[k] = eps;
                    let mut wp = window.clone();
                    wp.orientations[slot] = quat_mul(&window.orientations[slot], &small_angle_quat(&d));
                    let mut wm = window.clone();
                    wm.orientations[slot] = quat_mul(&window.orientations[slot], &small_angle_quat(&(-d)));
                    fd[layout.win_att(slot).start + k] = (nonlinear_range(&feats, &wp, 0, &lrf)
                        - nonlinear_range(&feats, &wm, 0, &lrf))
                        / (2.0 * eps);
                }
            }
            // features
            for (fi, (slot, _)) in feats.iter().enumerate() {
                for k in 0..3 {
                    let mut fp = feats;
                    let mut fm = feats;
                    match k {
                        0 => {
                            fp[fi].1.alpha += eps;
                            fm[fi].1.alpha -= eps;
                        }
                        1 => {
                            fp[fi].1.beta += eps;
                            fm[fi].1.beta -= eps;
                        }
                        _ => {
                            fp[fi].1.rho += eps;
                            fm[fi].1.rho -= eps;
                        }
                    }
                    fd[layout.feat(*slot).start + k] = (nonlinear_range(&fp, &window, 0, &lrf)
                        - nonlinear_range(&fm, &window, 0, &lrf))
                        / (2.0 * eps);
                }
            }

            let scale = row.h.abs().max().max(1.0);
            let err = (&row.h - &fd).abs().max() / scale;
            assert!(err <= 1e-5, "range jacobian FD mismatch {err}");
            done += 1;
        }
    }

    /// Translating camera and all three cartesian corners together leaves
    /// the range unchanged: the cartesian blocks sum to zero.
    #[test]
    fn cartesian_translation_invariance() {
        let mut rng = StdRng::seed_from_u64(54);
        let mut done = 0;
        while done < 50 {
            let (feats, window, lrf) = random_facet_setup(&mut rng);
            let Ok(facet) = build_facet(&feats, &window, 0, &lrf) else {
                continue;
            };
            if range_predict(&facet, DEFAULT_BEAM_DOT_THRESHOLD).is_err() {
                continue;
            }
            let p_c = window.positions[0];
            let u_r_w = window.orientations[0].to_rotation().transpose() * lrf.u_r_c;
            let p_i = p_c + (facet.a / facet.b) * u_r_w;
            let h = cartesian_point_jacobians(&facet, &p_i);
            let h_p_cur = -facet.normal / facet.b;
            let total = h_p_cur + h[0] + h[1] + h[2];
            assert!(total.norm() <= 1e-10 * facet.normal.norm().max(1.0), "sum = {total}");
            done += 1;
        }
    }

    #[test]
    fn range_gate_threshold() {
        // df = 1 at 95%: squared standardized residual above 3.841 fails
        assert!(range_gate(1.9, 1.0, 3.841));
        assert!(!range_gate(2.0, 1.0, 3.841));
        assert!(!range_gate(1.0, 0.0, 3.841));
    }
}
