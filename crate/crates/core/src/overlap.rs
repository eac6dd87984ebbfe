//! Shared field-of-view determination between camera pairs.
//!
//! Each camera image is divided into a grid. For every cell center of camera
//! `i` the epipolar line in camera `j` is computed, restricted to the part
//! that corresponds to positive depth in both cameras, clipped to the image
//! rectangle of `j`, and rasterized into candidate cells. The map is built
//! once per rig and is immutable afterwards.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

use crate::calibration::RigCalibration;
use crate::geometry::{skew, Intrinsics, EPS_DEPTH};

/// Baselines shorter than this are treated as co-located cameras.
pub const EPS_BASELINE: f64 = 1e-6;

pub const DEFAULT_GRID_ROWS: usize = 12;
pub const DEFAULT_GRID_COLS: usize = 16;
pub const DEFAULT_PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OverlapError {
    #[error("cameras {0} and {0} are the same camera")]
    SameCamera(usize),
    #[error("baseline between cameras {i} and {j} is degenerate ({baseline} m)")]
    DegenerateBaseline { i: usize, j: usize, baseline: f64 },
    #[error("grid dimensions must be at least 1x1")]
    BadGrid,
}

/// Uniform grid over an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            rows: DEFAULT_GRID_ROWS,
            cols: DEFAULT_GRID_COLS,
        }
    }
}

impl Grid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn num_cells(&self) -> usize {
        self.rows * self.cols
    }

    fn cell_size(&self, k: &Intrinsics<f64>) -> (f64, f64) {
        (
            k.width as f64 / self.cols as f64,
            k.height as f64 / self.rows as f64,
        )
    }

    /// Row-major cell index of a pixel, or `None` outside the image.
    pub fn cell_of(&self, k: &Intrinsics<f64>, u: &Vector2<f64>) -> Option<usize> {
        if !k.contains(u) {
            return None;
        }
        let (cw, ch) = self.cell_size(k);
        let c = ((u.x / cw) as usize).min(self.cols - 1);
        let r = ((u.y / ch) as usize).min(self.rows - 1);
        Some(r * self.cols + c)
    }

    pub fn cell_center(&self, k: &Intrinsics<f64>, cell: usize) -> Vector2<f64> {
        let (cw, ch) = self.cell_size(k);
        let (r, c) = (cell / self.cols, cell % self.cols);
        Vector2::new((c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch)
    }
}

/// Fundamental matrix mapping pixels of camera `i` to epipolar lines in `j`,
/// so that `x_j^T F x_i = 0` for corresponding homogeneous pixels.
pub fn fundamental_matrix(
    rig: &RigCalibration,
    i: usize,
    j: usize,
) -> Result<Matrix3<f64>, OverlapError> {
    if i == j {
        return Err(OverlapError::SameCamera(i));
    }
    let j_t_i = rig.relative_pose(i, j);
    let t = *j_t_i.translation();
    if t.norm() < EPS_BASELINE {
        return Err(OverlapError::DegenerateBaseline {
            i,
            j,
            baseline: t.norm(),
        });
    }
    let ki_inv = rig.camera(i).intrinsics.inverse_matrix().expect("validated");
    let kj_inv = rig.camera(j).intrinsics.inverse_matrix().expect("validated");
    Ok(kj_inv.transpose() * skew(&t) * j_t_i.rotation_matrix() * ki_inv)
}

/// Geometric relation used to gate matches between two cameras.
#[derive(Clone, Debug, PartialEq)]
pub enum PairGeometry {
    /// Pixel-to-line map (non-zero baseline).
    Epipolar(Matrix3<f64>),
    /// Infinite homography `K_j R K_i^-1` (co-located cameras).
    Rotation(Matrix3<f64>),
}

impl PairGeometry {
    /// Distance in pixels of `x_j` from the locus predicted by `x_i`.
    pub fn distance(&self, x_i: &Vector2<f64>, x_j: &Vector2<f64>) -> f64 {
        let hi = Vector3::new(x_i.x, x_i.y, 1.0);
        match self {
            PairGeometry::Epipolar(f) => {
                let l = f * hi;
                let n = (l.x * l.x + l.y * l.y).sqrt();
                if n == 0.0 {
                    return f64::INFINITY;
                }
                (l.x * x_j.x + l.y * x_j.y + l.z).abs() / n
            }
            PairGeometry::Rotation(h) => {
                let p = h * hi;
                if p.z <= EPS_DEPTH {
                    return f64::INFINITY;
                }
                (Vector2::new(p.x / p.z, p.y / p.z) - x_j).norm()
            }
        }
    }
}

/// Candidate cells of camera `j` for every cell of camera `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOverlap {
    pub candidates: Vec<Vec<usize>>,
    pub overlaps: bool,
    pub geometry: PairGeometry,
}

impl PairOverlap {
    /// Fraction of cells of `i` that have at least one candidate in `j`.
    pub fn fraction_nonempty(&self) -> f64 {
        let n = self.candidates.iter().filter(|c| !c.is_empty()).count();
        n as f64 / self.candidates.len().max(1) as f64
    }
}

/// Overlap tables for every ordered camera pair of a rig.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlapMap {
    grid: Grid,
    padding: usize,
    num_cameras: usize,
    pairs: Vec<Option<PairOverlap>>,
}

impl OverlapMap {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn num_cameras(&self) -> usize {
        self.num_cameras
    }

    pub fn pair(&self, i: usize, j: usize) -> Option<&PairOverlap> {
        self.pairs.get(i * self.num_cameras + j).and_then(|p| p.as_ref())
    }

    pub fn pair_overlaps(&self, i: usize, j: usize) -> bool {
        self.pair(i, j).is_some_and(|p| p.overlaps)
    }

    pub fn candidates(&self, i: usize, j: usize, cell: usize) -> &[usize] {
        self.pair(i, j)
            .and_then(|p| p.candidates.get(cell))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }
}

/// Builds the overlap map with the default padding.
pub fn compute_overlap_map(
    rig: &RigCalibration,
    grid: Grid,
) -> Result<OverlapMap, OverlapError> {
    compute_overlap_map_with_padding(rig, grid, DEFAULT_PADDING)
}

/// Builds the overlap map; candidate sets are dilated by `padding` cells.
pub fn compute_overlap_map_with_padding(
    rig: &RigCalibration,
    grid: Grid,
    padding: usize,
) -> Result<OverlapMap, OverlapError> {
    if grid.rows == 0 || grid.cols == 0 {
        return Err(OverlapError::BadGrid);
    }
    let n = rig.num_cameras();
    let mut pairs = vec![None; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                pairs[i * n + j] = Some(pair_overlap(rig, grid, padding, i, j));
            }
        }
    }
    Ok(OverlapMap {
        grid,
        padding,
        num_cameras: n,
        pairs,
    })
}

fn pair_overlap(rig: &RigCalibration, grid: Grid, padding: usize, i: usize, j: usize) -> PairOverlap {
    let ki = &rig.camera(i).intrinsics;
    let kj = &rig.camera(j).intrinsics;
    let j_t_i = rig.relative_pose(i, j);
    let rot = j_t_i.rotation_matrix();
    let center = *j_t_i.translation();
    let ki_inv = ki.inverse_matrix().expect("validated");
    let kj_m = kj.matrix();

    let geometry = match fundamental_matrix(rig, i, j) {
        Ok(f) => PairGeometry::Epipolar(f),
        Err(_) => PairGeometry::Rotation(kj_m * rot * ki_inv),
    };

    let candidates: Vec<Vec<usize>> = (0..grid.num_cells())
        .map(|cell| {
            let g = grid.cell_center(ki, cell);
            let dir = rot * ki_inv * Vector3::new(g.x, g.y, 1.0);
            let touched = match &geometry {
                PairGeometry::Epipolar(_) => {
                    match depth_segment(&kj_m, &center, &dir) {
                        Some((a, b)) => rasterize_segment(grid, kj, a, b),
                        None => Vec::new(),
                    }
                }
                PairGeometry::Rotation(h) => {
                    let p = h * Vector3::new(g.x, g.y, 1.0);
                    if p.z > EPS_DEPTH {
                        grid.cell_of(kj, &Vector2::new(p.x / p.z, p.y / p.z))
                            .into_iter()
                            .collect()
                    } else {
                        Vec::new()
                    }
                }
            };
            dilate(grid, &touched, padding)
        })
        .collect();
    let overlaps = candidates.iter().any(|c| !c.is_empty());
    PairOverlap {
        candidates,
        overlaps,
        geometry,
    }
}

/// Image-plane segment of the epipolar line traced by `center + d * dir`,
/// `d > 0`, restricted to points in front of camera `j`.
///
/// Homogeneous image points follow `(1 - s) K c + s K dir` for `s` in
/// `[0, 1]`; unbounded ends are replaced by a distant point on the same line.
fn depth_segment(
    kj: &Matrix3<f64>,
    center: &Vector3<f64>,
    dir: &Vector3<f64>,
) -> Option<(Vector2<f64>, Vector2<f64>)> {
    let a = kj * center;
    let b = kj * dir;
    let (w0, w1) = (center.z, dir.z);
    if w0 <= 0.0 && w1 <= 0.0 {
        return None;
    }
    let scale = w0.abs().max(w1.abs());
    let w_min = scale * 1e-9;
    let root = if w0 != w1 { w0 / (w0 - w1) } else { 0.0 };
    let at = |s: f64| {
        let h = a * (1.0 - s) + b * s;
        Vector2::new(h.x / h.z, h.y / h.z)
    };
    // Parameter where w(s) equals a small positive value, on the visible side.
    let near_root = |toward_one: bool| {
        let s = (w_min - w0) / (w1 - w0);
        let s = if toward_one { s.max(root) } else { s.min(root) };
        s.clamp(0.0, 1.0)
    };
    let s_lo = if w0 > w_min { 0.0 } else { near_root(true) };
    let s_hi = if w1 > w_min { 1.0 } else { near_root(false) };
    if s_hi < s_lo {
        return None;
    }
    let (pa, pb) = (at(s_lo), at(s_hi));
    if !(pa.iter().all(|v| v.is_finite()) && pb.iter().all(|v| v.is_finite())) {
        return None;
    }
    Some((pa, pb))
}

/// Cells of the image traversed by the segment `a -> b` after clipping it to
/// the image rectangle. Sampling happens at half-cell steps.
fn rasterize_segment(grid: Grid, k: &Intrinsics<f64>, a: Vector2<f64>, b: Vector2<f64>) -> Vec<usize> {
    let (w, h) = (k.width as f64, k.height as f64);
    let Some((t0, t1)) = clip_segment(a, b, w, h) else {
        return Vec::new();
    };
    let d = b - a;
    let p0 = a + d * t0;
    let p1 = a + d * t1;
    let cw = w / grid.cols as f64;
    let ch = h / grid.rows as f64;
    let step = 0.5 * cw.min(ch);
    let len = (p1 - p0).norm();
    let n = (len / step).ceil() as usize;
    let mut cells = Vec::new();
    for s in 0..=n {
        let t = if n == 0 { 0.0 } else { s as f64 / n as f64 };
        let p = p0 + (p1 - p0) * t;
        let col = ((p.x / cw).floor().max(0.0) as usize).min(grid.cols - 1);
        let row = ((p.y / ch).floor().max(0.0) as usize).min(grid.rows - 1);
        cells.push(row * grid.cols + col);
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Liang-Barsky clip of `a + t (b - a)`, `t` in `[0, 1]`, against
/// `[0, w] x [0, h]`.
fn clip_segment(a: Vector2<f64>, b: Vector2<f64>, w: f64, h: f64) -> Option<(f64, f64)> {
    let d = b - a;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (p, q) in [
        (-d.x, a.x),
        (d.x, w - a.x),
        (-d.y, a.y),
        (d.y, h - a.y),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return None;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    (t0 <= t1).then_some((t0, t1))
}

fn dilate(grid: Grid, cells: &[usize], padding: usize) -> Vec<usize> {
    if padding == 0 || cells.is_empty() {
        return cells.to_vec();
    }
    let mut mask = vec![false; grid.num_cells()];
    let p = padding as isize;
    for &cell in cells {
        let (r, c) = ((cell / grid.cols) as isize, (cell % grid.cols) as isize);
        for dr in -p..=p {
            for dc in -p..=p {
                let (rr, cc) = (r + dr, c + dc);
                if rr >= 0 && cc >= 0 && (rr as usize) < grid.rows && (cc as usize) < grid.cols {
                    mask[rr as usize * grid.cols + cc as usize] = true;
                }
            }
        }
    }
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::CameraCalibration;
    use crate::geometry::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> Intrinsics<f64> {
        Intrinsics::new(663.0, 663.0, 360.0, 270.0, 720, 540).unwrap()
    }

    fn rig(poses: &[Pose<f64>]) -> RigCalibration {
        RigCalibration::new(
            poses
                .iter()
                .enumerate()
                .map(|(i, p)| CameraCalibration {
                    id: format!("c{i}"),
                    intrinsics: k(),
                    body_t_cam: *p,
                })
                .collect(),
            Some(0),
        )
        .unwrap()
    }

    #[test]
    fn unit_fundamental_matrix() {
        let unit = Intrinsics {
            fx: 1.0,
            fy: 1.0,
            cx: 0.0,
            cy: 0.0,
            width: 1,
            height: 1,
        };
        // Camera 1 sits at x = -1 in the body frame, so 1_T_0 = (I, (1, 0, 0)).
        let r = RigCalibration::new(
            vec![
                CameraCalibration {
                    id: "a".into(),
                    intrinsics: unit,
                    body_t_cam: Pose::identity(),
                },
                CameraCalibration {
                    id: "b".into(),
                    intrinsics: unit,
                    body_t_cam: Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0)),
                },
            ],
            Some(0),
        )
        .unwrap();
        let f = fundamental_matrix(&r, 0, 1).unwrap();
        let expected = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0);
        assert!((f - expected).abs().max() < 1e-15, "{f}");
    }

    #[test]
    fn co_located_cameras_are_degenerate() {
        let r = rig(&[Pose::identity(), Pose::from_yaw(0.3, Vector3::zeros())]);
        assert!(matches!(
            fundamental_matrix(&r, 0, 1),
            Err(OverlapError::DegenerateBaseline { .. })
        ));
        assert!(matches!(fundamental_matrix(&r, 1, 1), Err(OverlapError::SameCamera(1))));
    }

    #[test]
    fn epipolar_constraint_holds_for_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let pose = Pose::new(
                nalgebra::UnitQuaternion::from_scaled_axis(Vector3::new(
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                    rng.random_range(-0.3..0.3),
                )),
                Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                ),
            );
            let r = rig(&[Pose::identity(), pose]);
            let f = fundamental_matrix(&r, 0, 1).unwrap();
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..6.0),
            );
            let xi = k().project(&p).unwrap();
            let pj = pose.inverse_transform_point(&p);
            let xj = k().project(&pj).unwrap();
            let v = Vector3::new(xj.x, xj.y, 1.0).dot(&(f * Vector3::new(xi.x, xi.y, 1.0)));
            assert!(v.abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn co_located_parallel_cameras_map_cells_to_themselves() {
        let r = rig(&[Pose::identity(), Pose::identity()]);
        let map = compute_overlap_map_with_padding(&r, Grid::default(), 0).unwrap();
        for cell in 0..Grid::default().num_cells() {
            assert_eq!(map.candidates(0, 1, cell), &[cell]);
        }
    }

    #[test]
    fn back_to_back_cameras_do_not_overlap() {
        let r = rig(&[
            Pose::identity(),
            Pose::from_yaw(std::f64::consts::PI, Vector3::new(0.3, 0.0, 0.0)),
        ]);
        let map = compute_overlap_map(&r, Grid::default()).unwrap();
        assert!(!map.pair_overlaps(0, 1));
        assert!(!map.pair_overlaps(1, 0));
        assert_eq!(map.pair(0, 1).unwrap().fraction_nonempty(), 0.0);
    }

    #[test]
    fn parallel_stereo_has_horizontal_bands() {
        let r = rig(&[
            Pose::identity(),
            Pose::from_translation(Vector3::new(0.165, 0.0, 0.0)),
        ]);
        let grid = Grid::default();
        let map = compute_overlap_map_with_padding(&r, grid, 0).unwrap();
        assert!(map.pair_overlaps(0, 1));
        for cell in 0..grid.num_cells() {
            let row = cell / grid.cols;
            let cands = map.candidates(0, 1, cell);
            assert!(!cands.is_empty());
            assert!(cands.iter().all(|c| c / grid.cols == row), "cell {cell}: {cands:?}");
        }
        assert!(map.pair(0, 1).unwrap().fraction_nonempty() > 0.9);
    }

    #[test]
    fn segment_lies_on_epipolar_line() {
        let pose = Pose::from_yaw(0.2, Vector3::new(0.3, 0.02, 0.1));
        let r = rig(&[Pose::identity(), pose]);
        let f = fundamental_matrix(&r, 0, 1).unwrap();
        let j_t_i = r.relative_pose(0, 1);
        let g = Vector2::new(100.0, 400.0);
        let dir = j_t_i.rotation_matrix() * k().inverse_matrix().unwrap() * Vector3::new(g.x, g.y, 1.0);
        let (a, b) = depth_segment(&k().matrix(), j_t_i.translation(), &dir).unwrap();
        let l = f * Vector3::new(g.x, g.y, 1.0);
        let n = (l.x * l.x + l.y * l.y).sqrt();
        for p in [a, b, (a + b) * 0.5] {
            let d = (l.x * p.x + l.y * p.y + l.z).abs() / n;
            assert!(d < 1e-9 * p.norm().max(1.0), "{p:?}: {d}");
        }
    }

    #[test]
    fn clip_examples() {
        let w = 10.0;
        let h = 10.0;
        assert_eq!(
            clip_segment(Vector2::new(-5.0, 5.0), Vector2::new(15.0, 5.0), w, h),
            Some((0.25, 0.75))
        );
        assert_eq!(clip_segment(Vector2::new(-5.0, 20.0), Vector2::new(15.0, 20.0), w, h), None);
    }
}
