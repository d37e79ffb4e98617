//! Isometry-invariant canonical forms and rigid point-set alignment.
//!
//! A canonical form embeds a mesh into 3-D by classical multidimensional
//! scaling of geodesic distances: rigid motion of the input does not change
//! geodesics, so two poses of the same body land on (nearly) the same
//! canonical shape, up to an orthogonal transform. The full mesh would make
//! MDS quadratic, so the scaling runs on a farthest-point anchor subset and
//! every other vertex is embedded by the out-of-sample extension from its
//! geodesic distances to the anchors.

use crate::error::{Error, Result};
use crate::mesh::{farthest_point_fields, TriangleMesh};
use nalgebra::{DMatrix, Matrix3, Point3, Vector3};

/// Canonical embedding of a mesh.
#[derive(Debug, Clone)]
pub struct CanonicalForm {
    /// Canonical-space position of every vertex.
    pub coords: Vec<Point3<f64>>,
    /// The farthest-point anchor vertices the scaling ran on.
    pub sample_indices: Vec<u32>,
}

impl CanonicalForm {
    /// Canonical positions of the anchor vertices, in anchor order.
    pub fn anchor_coords(&self) -> Vec<Point3<f64>> {
        self.sample_indices
            .iter()
            .map(|&v| self.coords[v as usize])
            .collect()
    }
}

/// Relative eigenvalue floor: spectral directions at or below this fraction
/// of the leading eigenvalue count as non-positive. Exactly planar inputs
/// produce a third eigenvalue at rounding level (~1e-16 of the leading one),
/// while genuinely curved or marching-noise-bearing surfaces sit far above.
const EIGENVALUE_FLOOR: f64 = 1e-9;

/// Computes the canonical form of a connected mesh.
///
/// Classical MDS on the geodesic distances among `anchor_count`
/// farthest-point anchors (seeded at vertex 0), keeping the top three
/// eigenpairs; remaining vertices are embedded by the Nystrom out-of-sample
/// formula. Eigenvectors are ordered by descending eigenvalue and signed so
/// their first nonzero coordinate is positive, which makes the result
/// deterministic for identical inputs.
pub fn canonical_form(mesh: &TriangleMesh, anchor_count: usize) -> Result<CanonicalForm> {
    if anchor_count < 4 {
        return Err(Error::InvalidArgument(
            "canonical form needs at least 4 anchors".into(),
        ));
    }
    let (samples, fields) = farthest_point_fields(mesh, anchor_count, 0)?;
    let m = samples.len();
    if m < 4 {
        return Err(Error::InvalidArgument(format!(
            "canonical form needs at least 4 anchors, mesh yielded {m}"
        )));
    }
    for (field, &s) in fields.iter().zip(&samples) {
        if let Some(v) = field.iter().position(|d| !d.is_finite()) {
            return Err(Error::DisconnectedMesh {
                start: s as usize,
                vertex: v,
            });
        }
    }

    // Symmetrized squared anchor distances: marching from i and from j give
    // slightly different values, and the eigensolver expects symmetry.
    let mut d2 = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = 0.5 * (fields[i][samples[j] as usize] + fields[j][samples[i] as usize]);
            d2[(i, j)] = d * d;
            d2[(j, i)] = d * d;
        }
    }
    let row_mean: Vec<f64> = (0..m).map(|i| d2.row(i).sum() / m as f64).collect();
    let grand_mean = row_mean.iter().sum::<f64>() / m as f64;
    let mut b = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            b[(i, j)] = -0.5 * (d2[(i, j)] - row_mean[i] - row_mean[j] + grand_mean);
        }
    }

    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&c)));
    let lead = eig.eigenvalues[order[0]];
    let third = eig.eigenvalues[order[2]];
    if lead <= 0.0 || third <= EIGENVALUE_FLOOR * lead {
        return Err(Error::DegenerateGeometry(
            "degenerate intrinsic geometry: fewer than 3 positive spectral directions".into(),
        ));
    }

    let mut axes = Vec::with_capacity(3);
    for k in 0..3 {
        let idx = order[k];
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        if let Some(&first) = v.iter().find(|&&x| x != 0.0) {
            if first < 0.0 {
                for x in &mut v {
                    *x = -*x;
                }
            }
        }
        axes.push((eig.eigenvalues[idx].sqrt(), v));
    }

    // Nystrom extension: z_k(x) = -(sum_i v_ki (d(x,i)^2 - mu_i)) / (2 sqrt(l_k)).
    // The terms constant in i drop because the eigenvectors of the centered
    // matrix are orthogonal to the all-ones vector; at an anchor the formula
    // reduces to the MDS coordinate itself, so anchors are written directly.
    let n = mesh.vertex_count();
    let mut coords = vec![Point3::origin(); n];
    let mut is_anchor = vec![false; n];
    for (j, &s) in samples.iter().enumerate() {
        is_anchor[s as usize] = true;
        coords[s as usize] = Point3::new(
            axes[0].0 * axes[0].1[j],
            axes[1].0 * axes[1].1[j],
            axes[2].0 * axes[2].1[j],
        );
    }
    for x in 0..n {
        if is_anchor[x] {
            continue;
        }
        let mut z = [0.0f64; 3];
        for (k, (scale, v)) in axes.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..m {
                let d = fields[i][x];
                acc += v[i] * (d * d - row_mean[i]);
            }
            z[k] = -acc / (2.0 * scale);
        }
        coords[x] = Point3::new(z[0], z[1], z[2]);
    }
    Ok(CanonicalForm {
        coords,
        sample_indices: samples,
    })
}

/// Least-squares rigid alignment of `source` onto `target`.
#[derive(Debug, Clone, Copy)]
pub struct RigidAlignment {
    /// Orthogonal part; determinant is -1 when a reflection was chosen.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    /// Root of the summed squared distances after alignment.
    pub residual: f64,
}

impl RigidAlignment {
    pub fn apply(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    pub fn is_reflection(&self) -> bool {
        self.rotation.determinant() < 0.0
    }
}

/// Orthogonal Procrustes alignment between corresponding point sets.
///
/// Minimizes the summed squared distances over rotations (and reflections
/// when `allow_reflection` is set; canonical forms are only defined up to
/// reflection) plus translation. Errors on fewer than 3 points, mismatched
/// lengths, or configurations whose alignment is not unique (collinear or
/// coincident points).
pub fn procrustes_align(
    source: &[Point3<f64>],
    target: &[Point3<f64>],
    allow_reflection: bool,
) -> Result<RigidAlignment> {
    if source.len() != target.len() {
        return Err(Error::DimensionMismatch {
            expected: source.len(),
            got: target.len(),
            context: "procrustes point sets",
        });
    }
    let n = source.len();
    if n < 3 {
        return Err(Error::InvalidArgument(
            "procrustes alignment needs at least 3 points".into(),
        ));
    }
    let inv = 1.0 / n as f64;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for (s, t) in source.iter().zip(target) {
        cs += s.coords;
        ct += t.coords;
    }
    cs *= inv;
    ct *= inv;

    let mut h = Matrix3::zeros();
    let mut scale2 = 0.0;
    for (s, t) in source.iter().zip(target) {
        let a = s.coords - cs;
        let b = t.coords - ct;
        h += a * b.transpose();
        scale2 += a.norm_squared().max(b.norm_squared());
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Uniqueness needs two independent directions in the correspondence:
    // with rank < 2 any rotation about the remaining axis fits equally well.
    if svd.singular_values[1] <= 1e-12 * scale2.max(f64::MIN_POSITIVE) {
        return Err(Error::DegenerateGeometry(
            "procrustes configuration is collinear or coincident".into(),
        ));
    }
    let mut rotation = v_t.transpose() * u.transpose();
    if !allow_reflection && rotation.determinant() < 0.0 {
        let mut flip = Matrix3::identity();
        flip[(2, 2)] = -1.0;
        rotation = v_t.transpose() * flip * u.transpose();
    }
    let translation = ct - rotation * cs;
    let mut ss = 0.0;
    for (s, t) in source.iter().zip(target) {
        ss += (rotation * s.coords + translation - t.coords).norm_squared();
    }
    Ok(RigidAlignment {
        rotation,
        translation,
        residual: ss.sqrt(),
    })
}
