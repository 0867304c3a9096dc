//! Point-to-point ICP: nearest-neighbor matching plus closed-form rigid
//! alignment, iterated.

use nalgebra::{Matrix3, Point3, Vector3};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::kinematics::Affine3;
use crate::render::PointCloud;

/// Singular-value ratio below which the cross-covariance counts as rank-deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondences {
    /// `(source index, target index)` into the original clouds.
    pub pairs: Vec<(usize, usize)>,
    pub mean_squared_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidFit {
    pub transform: Affine3,
    /// Set when the points were (nearly) collinear; `transform` is then identity.
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpConfig {
    pub max_iter: usize,
    /// Stop once the mean squared distance improves by less than this (m²).
    pub tol: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iter: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcpResult {
    /// Maps the source cloud onto the target.
    pub transform: Affine3,
    pub iterations_used: usize,
    pub mean_squared_distance: f64,
    pub converged: bool,
    /// Mean squared distance before the first and after every accepted iteration.
    pub history: Vec<f64>,
}

/// Index over the valid points of a target cloud.
pub struct TargetIndex {
    tree: KdTree,
    /// Tree point -> original cloud index (increasing, so tie order survives).
    original: Vec<usize>,
}

impl TargetIndex {
    pub fn new(target: &PointCloud) -> Result<Self> {
        let (original, points): (Vec<usize>, Vec<Point3<f64>>) = target
            .points
            .iter()
            .zip(&target.valid)
            .enumerate()
            .filter_map(|(i, (p, &ok))| ok.then_some((i, *p)))
            .unzip();
        if points.is_empty() {
            return Err(Error::Empty("target cloud"));
        }
        Ok(TargetIndex {
            tree: KdTree::new(points),
            original,
        })
    }

    pub fn point(&self, original_index: usize) -> Option<&Point3<f64>> {
        self.original
            .binary_search(&original_index)
            .ok()
            .map(|i| self.tree.point(i))
    }

    fn match_cloud(&self, source: &PointCloud) -> Result<Correspondences> {
        let mut pairs = Vec::with_capacity(source.len());
        let mut sum = 0.0;
        for (i, (p, &ok)) in source.points.iter().zip(&source.valid).enumerate() {
            if !ok {
                continue;
            }
            let (j, d2) = self.tree.nearest(p).expect("index is nonempty");
            pairs.push((i, self.original[j]));
            sum += d2;
        }
        if pairs.is_empty() {
            return Err(Error::Empty("source cloud"));
        }
        let mean_squared_distance = sum / pairs.len() as f64;
        Ok(Correspondences {
            pairs,
            mean_squared_distance,
        })
    }
}

/// Pairs every valid source point with its nearest valid target point.
pub fn nearest_neighbors(source: &PointCloud, target: &PointCloud) -> Result<Correspondences> {
    TargetIndex::new(target)?.match_cloud(source)
}

/// Least-squares rotation and translation taking `source[i]` to `target[i]`.
pub fn rigid_fit(source: &[Point3<f64>], target: &[Point3<f64>]) -> Result<RigidFit> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: source.len(),
            actual: target.len(),
        });
    }
    if source.is_empty() {
        return Err(Error::Empty("point pairs"));
    }
    let n = source.len() as f64;
    let cs = source.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let ct = target.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
    let mut h = Matrix3::zeros();
    for (s, t) in source.iter().zip(target) {
        h += (s.coords - cs) * (t.coords - ct).transpose();
    }
    let degenerate = RigidFit {
        transform: Affine3::identity(),
        degenerate: true,
    };
    if source.len() < 3 {
        return Ok(degenerate);
    }
    let svd = h.svd(true, true);
    let mut sv: Vec<(f64, usize)> = svd.singular_values.iter().copied().zip(0..3).collect();
    sv.sort_by(|a, b| b.0.total_cmp(&a.0));
    if !(sv[0].0 > 0.0) || sv[1].0 <= RANK_TOL * sv[0].0 {
        return Ok(degenerate);
    }
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested V^T");
    let v = v_t.transpose();
    // Flip the axis of the smallest singular value when the fit is a reflection.
    let d = (v * u.transpose()).determinant().signum();
    let mut correction = Matrix3::identity();
    correction[(sv[2].1, sv[2].1)] = d;
    let rotation = v * correction * u.transpose();
    let translation = ct - rotation * cs;
    Ok(RigidFit {
        transform: Affine3::new(rotation, translation),
        degenerate: false,
    })
}

/// Aligns `source` to `target`. An iteration is kept only if it does not
/// increase the mean squared correspondence distance.
pub fn icp(source: &PointCloud, target: &PointCloud, config: &IcpConfig) -> Result<IcpResult> {
    icp_indexed(source, &TargetIndex::new(target)?, config)
}

/// [`icp`] against a prebuilt target index.
pub fn icp_indexed(source: &PointCloud, target: &TargetIndex, config: &IcpConfig) -> Result<IcpResult> {
    let mut transform = Affine3::identity();
    let mut current = source.clone();
    let mut corr = target.match_cloud(&current)?;
    let mut history = vec![corr.mean_squared_distance];
    let mut converged = false;
    let mut iterations_used = 0;
    while iterations_used < config.max_iter {
        iterations_used += 1;
        let (src, dst): (Vec<Point3<f64>>, Vec<Point3<f64>>) = corr
            .pairs
            .iter()
            .map(|&(i, j)| (current.points[i], *target.point(j).expect("matched index")))
            .unzip();
        let fit = rigid_fit(&src, &dst)?;
        if fit.degenerate {
            return Err(Error::DegenerateAlignment);
        }
        let moved = fit.transform.apply(&current);
        let next = target.match_cloud(&moved)?;
        let before = corr.mean_squared_distance;
        if next.mean_squared_distance > before {
            // Rejected; an increase below `tol` is rounding at a fixed point.
            converged = next.mean_squared_distance - before < config.tol;
            break;
        }
        transform = fit.transform.compose(&transform);
        current = moved;
        corr = next;
        history.push(corr.mean_squared_distance);
        if before - corr.mean_squared_distance < config.tol {
            converged = true;
            break;
        }
    }
    Ok(IcpResult {
        transform,
        iterations_used,
        mean_squared_distance: corr.mean_squared_distance,
        converged,
        history,
    })
}
