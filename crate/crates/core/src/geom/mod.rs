//! Spatial indexing, patch extraction and PCA normal estimation.

mod kdtree;

pub use kdtree::SpatialIndex;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// A point cloud with optional annotated normals and an optional link to its
/// noise-free twin (index-aligned, used by the Chamfer Normal Distance).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub gt_normals: Option<Vec<Vector3<f64>>>,
    pub clean_ref: Option<String>,
    pub name: String,
}

impl PointCloud {
    pub fn new(name: impl Into<String>, points: Vec<Vector3<f64>>) -> Self {
        Self {
            points,
            gt_normals: None,
            clean_ref: None,
            name: name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Checks the structural invariants: non-empty, unit annotated normals,
    /// matching normal count.
    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyInput("point cloud has no points"));
        }
        if let Some(normals) = &self.gt_normals {
            if normals.len() != self.points.len() {
                return Err(Error::LengthMismatch {
                    what: format!("cloud '{}' points vs normals", self.name),
                    left: self.points.len(),
                    right: normals.len(),
                });
            }
            for (i, n) in normals.iter().enumerate() {
                if (n.norm() - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidArgument(format!(
                        "normal {} of cloud '{}' is not unit length (|n| = {})",
                        i,
                        self.name,
                        n.norm()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A normalized neighborhood of a query point. Stores the transform that maps
/// world coordinates into the normalized PCA frame, and its inverse.
#[derive(Debug, Clone)]
pub struct Patch {
    pub query_index: usize,
    pub neighbor_indices: Vec<usize>,
    pub centroid: Vector3<f64>,
    pub scale: f64,
    /// Columns are covariance eigenvectors sorted by descending eigenvalue;
    /// the third column's sign is chosen so that det = +1.
    pub pca_rotation: Matrix3<f64>,
}

impl Patch {
    /// World point -> normalized PCA-frame coordinates.
    pub fn to_local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pca_rotation.transpose() * (p - self.centroid) / self.scale
    }

    /// Normalized PCA-frame coordinates -> world point.
    pub fn to_world(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.pca_rotation * (q * self.scale) + self.centroid
    }

    /// Direction in the PCA frame -> world direction (no translation/scale).
    pub fn direction_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.pca_rotation * d
    }

    /// World direction -> PCA-frame direction.
    pub fn direction_to_local(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.pca_rotation.transpose() * d
    }

    /// Neighbor coordinates in the normalized PCA frame, in neighbor order
    /// (ascending distance to the query point).
    pub fn local_points(&self, cloud: &PointCloud) -> Vec<Vector3<f64>> {
        self.neighbor_indices
            .iter()
            .map(|&i| self.to_local(&cloud.points[i]))
            .collect()
    }

    /// The PCA plane normal of this patch: third rotation column, sign as
    /// produced by the eigen-decomposition (unoriented).
    pub fn pca_normal(&self) -> Vector3<f64> {
        self.pca_rotation.column(2).into()
    }
}

pub fn build_spatial_index(points: &[Vector3<f64>]) -> Result<SpatialIndex> {
    SpatialIndex::build(points)
}

/// Extracts the `n_p` nearest neighbors of `cloud.points[query_index]` and the
/// normalizing transform (centroid, unit-ball scale, PCA rotation).
pub fn extract_patch(
    cloud: &PointCloud,
    index: &SpatialIndex,
    query_index: usize,
    n_p: usize,
) -> Result<Patch> {
    if n_p > cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "patch size {} exceeds cloud size {}",
            n_p,
            cloud.len()
        )));
    }
    if query_index >= cloud.len() {
        return Err(Error::InvalidArgument(format!(
            "query index {} out of bounds for cloud of size {}",
            query_index,
            cloud.len()
        )));
    }
    let neighbors = index.knn(&cloud.points[query_index], n_p)?;
    let neighbor_indices: Vec<usize> = neighbors.iter().map(|&(i, _)| i).collect();

    let mut centroid = Vector3::zeros();
    for &i in &neighbor_indices {
        centroid += cloud.points[i];
    }
    centroid /= neighbor_indices.len() as f64;

    let mut scale: f64 = 0.0;
    for &i in &neighbor_indices {
        scale = scale.max((cloud.points[i] - centroid).norm());
    }
    if scale <= 0.0 {
        return Err(Error::Degenerate(format!(
            "patch at query {} has zero extent",
            query_index
        )));
    }

    let centered: Vec<Vector3<f64>> = neighbor_indices
        .iter()
        .map(|&i| cloud.points[i] - centroid)
        .collect();
    let pca_rotation = pca_rotation_of(&centered)?;

    Ok(Patch {
        query_index,
        neighbor_indices,
        centroid,
        scale,
        pca_rotation,
    })
}

/// PCA rotation of a centered point set: columns are covariance eigenvectors
/// sorted by descending eigenvalue, third column sign fixed so det = +1.
/// Errors when the covariance has rank < 2 (collinear or coincident points).
pub fn pca_rotation_of(centered: &[Vector3<f64>]) -> Result<Matrix3<f64>> {
    if centered.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA needs at least 3 points, got {}",
            centered.len()
        )));
    }
    let mut cov = Matrix3::zeros();
    for p in centered {
        cov += p * p.transpose();
    }
    cov /= centered.len() as f64;

    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let lam0 = eig.eigenvalues[order[0]].max(0.0);
    let lam1 = eig.eigenvalues[order[1]].max(0.0);
    if lam0 <= 0.0 || lam1 <= lam0 * 1e-12 {
        return Err(Error::Degenerate(
            "rank-deficient covariance (collinear or coincident points)".into(),
        ));
    }

    let cols: Vec<Vector3<f64>> = order
        .iter()
        .map(|&o| Vector3::from(eig.eigenvectors.column(o)))
        .collect();
    let mut rot = Matrix3::from_columns(&cols);
    if rot.determinant() < 0.0 {
        let flipped = -rot.column(2);
        rot.set_column(2, &flipped);
    }
    Ok(rot)
}

/// Unoriented PCA normal: smallest-eigenvalue eigenvector of the centered
/// covariance. Sign is unspecified.
pub fn pca_normal(points: &[Vector3<f64>]) -> Result<Vector3<f64>> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "PCA normal needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut centroid = Vector3::zeros();
    for p in points {
        centroid += p;
    }
    centroid /= points.len() as f64;
    let centered: Vec<Vector3<f64>> = points.iter().map(|p| p - centroid).collect();
    Ok(pca_rotation_of(&centered)?.column(2).into())
}

/// Length of the diagonal of the axis-aligned bounding box.
pub fn bbox_diagonal(points: &[Vector3<f64>]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyInput("bbox of empty point set"));
    }
    let mut min = points[0];
    let mut max = points[0];
    for p in points {
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    Ok((max - min).norm())
}
