//! Posture-invariant shape features and the statistical shape space.
//!
//! A registered mesh is summarized by its uniform Laplace offsets expressed
//! in per-vertex local frames, plus one scalar for overall scale. Rigid
//! motion rotates offsets and frames together, so the coefficients are
//! unchanged; body shape differences survive. A PCA over such features from
//! a training population gives a low-dimensional space in which one point
//! describes a body shape across all postures, and [`reconstruct_mesh`]
//! turns a point of that space back into vertex positions.

use crate::error::{Error, Result};
use crate::mesh::{average_geodesic_distance, TriangleMesh};
use crate::optimize::{minimize, MinimizeOptions, MinimizeStatus};
use nalgebra::{DMatrix, DVector, Vector3};

/// Samples used for the scale entry of a feature. Fixed so that features of
/// different meshes are comparable.
pub const SCALE_SAMPLE_COUNT: usize = 64;

/// Fraction of training variance kept by default.
pub const DEFAULT_RETAINED_FRACTION: f64 = 0.70;

/// Default Mahalanobis radius for [`clamp_to_ellipsoid`].
pub const DEFAULT_CLAMP_RADIUS: f64 = 3.0;

/// Orthonormal coordinate system at a vertex.
///
/// `f1` is the vertex normal, `f2` the normalized tangent-plane projection
/// of the edge to the vertex's first neighbor, `f3` their cross product.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    pub f1: Vector3<f64>,
    pub f2: Vector3<f64>,
    pub f3: Vector3<f64>,
}

/// Posture-invariant description of one registered mesh: per-vertex offset
/// coefficients and a scale scalar, flattened as
/// `[w_1^1, w_1^2, w_1^3, ..., w_m^1, w_m^2, w_m^3, s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeFeature {
    /// Laplace offset of each vertex expressed in its local frame.
    pub omegas: Vec<Vector3<f64>>,
    /// Average geodesic distance between surface points, in mesh units.
    pub scale: f64,
}

impl ShapeFeature {
    /// Length of the flattened vector, `3 * vertex count + 1`.
    pub fn flat_len(&self) -> usize {
        3 * self.omegas.len() + 1
    }

    /// Flattens to a single column vector, scale last.
    pub fn to_flat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.flat_len());
        for (j, w) in self.omegas.iter().enumerate() {
            v[3 * j] = w.x;
            v[3 * j + 1] = w.y;
            v[3 * j + 2] = w.z;
        }
        v[self.flat_len() - 1] = self.scale;
        v
    }

    /// Inverse of [`ShapeFeature::to_flat`].
    pub fn from_flat(v: &DVector<f64>) -> Result<ShapeFeature> {
        if v.len() < 4 || v.len() % 3 != 1 {
            return Err(Error::InvalidArgument(format!(
                "flattened shape feature length {} is not 3m + 1",
                v.len()
            )));
        }
        let m = (v.len() - 1) / 3;
        let omegas = (0..m)
            .map(|j| Vector3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]))
            .collect();
        Ok(ShapeFeature { omegas, scale: v[v.len() - 1] })
    }
}

/// PCA model over shape features.
#[derive(Debug, Clone)]
pub struct ShapeSpace {
    /// Mean of the training features.
    pub mean_feature: ShapeFeature,
    /// Column-orthonormal basis, one column per retained component,
    /// descending variance.
    pub components: DMatrix<f64>,
    /// Sample variance along each retained component.
    pub eigenvalues: Vec<f64>,
    /// Variance fraction the space was trained to keep.
    pub retained_fraction: f64,
}

impl ShapeSpace {
    /// Number of retained components.
    pub fn component_count(&self) -> usize {
        self.components.ncols()
    }

    /// Length of the flattened features this space operates on.
    pub fn dimension(&self) -> usize {
        self.components.nrows()
    }

    /// Number of template vertices the features describe.
    pub fn vertex_count(&self) -> usize {
        self.mean_feature.omegas.len()
    }
}

/// Coordinates of a shape in component space.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoefficients {
    pub z: Vec<f64>,
}

/// Result of [`reconstruct_mesh`].
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Mesh whose offsets best match the requested feature.
    pub mesh: TriangleMesh,
    /// Final value of the reconstruction energy.
    pub energy: f64,
    /// Quasi-Newton iterations spent.
    pub iterations: usize,
}

/// Tangent projections shorter than this fraction of the edge length count
/// as parallel to the normal when picking first neighbors.
const PARALLEL_TOLERANCE: f64 = 1e-9;

fn require_fully_valid(mesh: &TriangleMesh, what: &str) -> Result<()> {
    if mesh.valid_vertex_count() != mesh.vertex_count() {
        return Err(Error::InvalidArgument(format!(
            "{what} requires a fully valid mesh, {} of {} vertices are valid",
            mesh.valid_vertex_count(),
            mesh.vertex_count()
        )));
    }
    Ok(())
}

/// Lowest-index neighbor of `j` whose edge is not parallel to the normal.
fn pick_first_neighbor(mesh: &TriangleMesh, j: u32, normal: &Vector3<f64>) -> Result<u32> {
    // Neighbor lists are sorted, so the first acceptable entry is the
    // lowest-index one. The same convention must hold on every registered
    // mesh for their features to be comparable.
    for &k in mesh.neighbors(j) {
        let e = mesh.position(k) - mesh.position(j);
        let g = e - normal * normal.dot(&e);
        if g.norm() > PARALLEL_TOLERANCE * e.norm() {
            return Ok(k);
        }
    }
    Err(Error::DegenerateGeometry(format!(
        "every neighbor of vertex {j} is parallel to its normal"
    )))
}

fn first_neighbors(mesh: &TriangleMesh) -> Result<Vec<u32>> {
    let normals = mesh.vertex_normals()?;
    (0..mesh.vertex_count() as u32)
        .map(|j| pick_first_neighbor(mesh, j, &normals[j as usize]))
        .collect()
}

/// Per-vertex orthonormal frames.
///
/// The first neighbor is the lowest-index member of the one-ring, skipping
/// neighbors whose edge is parallel to the normal.
pub fn local_frames(mesh: &TriangleMesh) -> Result<Vec<LocalFrame>> {
    require_fully_valid(mesh, "local frames")?;
    let normals = mesh.vertex_normals()?;
    let mut frames = Vec::with_capacity(mesh.vertex_count());
    for j in 0..mesh.vertex_count() as u32 {
        let f1 = normals[j as usize];
        let k = pick_first_neighbor(mesh, j, &f1)?;
        let e = mesh.position(k) - mesh.position(j);
        let g = e - f1 * f1.dot(&e);
        let f2 = g / g.norm();
        frames.push(LocalFrame { f1, f2, f3: f1.cross(&f2) });
    }
    Ok(frames)
}

/// Shape feature of a registered mesh: Laplace offsets in local frames plus
/// the average geodesic distance as scale.
pub fn shape_feature(mesh: &TriangleMesh) -> Result<ShapeFeature> {
    let frames = local_frames(mesh)?;
    let offsets = mesh.laplace_offsets()?;
    let omegas = frames
        .iter()
        .zip(&offsets)
        .map(|(f, d)| Vector3::new(d.dot(&f.f1), d.dot(&f.f2), d.dot(&f.f3)))
        .collect();
    let scale = average_geodesic_distance(mesh, SCALE_SAMPLE_COUNT)?;
    Ok(ShapeFeature { omegas, scale })
}

/// Trains the PCA shape space from features of registered meshes.
///
/// With far fewer samples than feature entries, the eigendecomposition runs
/// on the sample Gram matrix. The smallest number of components whose
/// cumulative variance reaches `retained_fraction` of the total is kept.
pub fn train_shape_space(
    features: &[ShapeFeature],
    retained_fraction: f64,
) -> Result<ShapeSpace> {
    if features.len() < 2 {
        return Err(Error::DegenerateTraining(format!(
            "need at least 2 shape samples, got {}",
            features.len()
        )));
    }
    if !(retained_fraction > 0.0 && retained_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "retained fraction must be in (0, 1], got {retained_fraction}"
        )));
    }
    let dim = features[0].flat_len();
    for f in features {
        if f.flat_len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: f.flat_len(),
                context: "shape features in one training set",
            });
        }
    }
    let n = features.len();
    // Columns are samples.
    let mut data = DMatrix::zeros(dim, n);
    for (i, f) in features.iter().enumerate() {
        data.set_column(i, &f.to_flat());
    }
    let mean = data.column_mean();
    let mut centered = data;
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let gram = centered.transpose() * &centered;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let top = eig.eigenvalues[order[0]];
    // Identical samples leave only rounding noise in the centered matrix.
    if top <= 1e-20 * (1.0 + mean.norm_squared()) {
        return Err(Error::DegenerateTraining(
            "shape samples are identical, no variance to model".into(),
        ));
    }
    let scale = 1.0 / (n as f64 - 1.0);
    let rank: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| eig.eigenvalues[i] > 1e-12 * top)
        .collect();
    let total: f64 = rank.iter().map(|&i| eig.eigenvalues[i] * scale).sum();
    let mut kept = 0;
    let mut cumulative = 0.0;
    for &i in &rank {
        kept += 1;
        cumulative += eig.eigenvalues[i] * scale;
        if cumulative / total >= retained_fraction {
            break;
        }
    }
    let mut components = DMatrix::zeros(dim, kept);
    let mut eigenvalues = Vec::with_capacity(kept);
    for (c, &i) in rank[..kept].iter().enumerate() {
        let mut u = &centered * eig.eigenvectors.column(i);
        u /= u.norm();
        // Deterministic orientation: largest-magnitude entry positive.
        let mut lead = 0;
        for (r, val) in u.iter().enumerate() {
            if val.abs() > u[lead].abs() {
                lead = r;
            }
        }
        if u[lead] < 0.0 {
            u.neg_mut();
        }
        components.set_column(c, &u);
        eigenvalues.push(eig.eigenvalues[i] * scale);
    }
    Ok(ShapeSpace {
        mean_feature: ShapeFeature::from_flat(&mean)?,
        components,
        eigenvalues,
        retained_fraction,
    })
}

/// Component-space coordinates of a feature.
pub fn project(space: &ShapeSpace, feature: &ShapeFeature) -> Result<ShapeCoefficients> {
    if feature.flat_len() != space.dimension() {
        return Err(Error::DimensionMismatch {
            expected: space.dimension(),
            got: feature.flat_len(),
            context: "feature vs shape space",
        });
    }
    let centered = feature.to_flat() - space.mean_feature.to_flat();
    let z = space.components.transpose() * centered;
    Ok(ShapeCoefficients { z: z.iter().copied().collect() })
}

/// Feature corresponding to component-space coordinates.
pub fn synthesize(space: &ShapeSpace, coeffs: &ShapeCoefficients) -> Result<ShapeFeature> {
    if coeffs.z.len() != space.component_count() {
        return Err(Error::DimensionMismatch {
            expected: space.component_count(),
            got: coeffs.z.len(),
            context: "coefficients vs shape space",
        });
    }
    let z = DVector::from_column_slice(&coeffs.z);
    let flat = space.mean_feature.to_flat() + &space.components * z;
    ShapeFeature::from_flat(&flat)
}

/// Confidence-weighted average of per-frame shape coordinates.
pub fn mean_representative(
    zs: &[ShapeCoefficients],
    weights: Option<&[f64]>,
) -> Result<ShapeCoefficients> {
    if zs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot average zero shape estimates".into(),
        ));
    }
    let dim = zs[0].z.len();
    for z in zs {
        if z.z.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: z.z.len(),
                context: "shape coefficients being averaged",
            });
        }
    }
    let uniform = vec![1.0; zs.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != zs.len() {
        return Err(Error::DimensionMismatch {
            expected: zs.len(),
            got: w.len(),
            context: "weights vs shape estimates",
        });
    }
    if w.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument(
            "frame confidences must be non-negative".into(),
        ));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument(
            "frame confidences sum to zero".into(),
        ));
    }
    let mut z = vec![0.0; dim];
    for (zi, wi) in zs.iter().zip(w) {
        for (acc, v) in z.iter_mut().zip(&zi.z) {
            *acc += wi * v;
        }
    }
    for v in &mut z {
        *v /= total;
    }
    Ok(ShapeCoefficients { z })
}

/// Moves `z` straight towards the origin until its Mahalanobis norm
/// `sqrt(sum z_i^2 / lambda_i)` is at most `radius`. Points already inside
/// are returned unchanged.
pub fn clamp_to_ellipsoid(
    space: &ShapeSpace,
    coeffs: &ShapeCoefficients,
    radius: f64,
) -> Result<ShapeCoefficients> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "clamp radius must be positive, got {radius}"
        )));
    }
    if coeffs.z.len() != space.component_count() {
        return Err(Error::DimensionMismatch {
            expected: space.component_count(),
            got: coeffs.z.len(),
            context: "coefficients vs shape space",
        });
    }
    let mut m2 = 0.0;
    for (zi, &li) in coeffs.z.iter().zip(&space.eigenvalues) {
        if li <= 0.0 {
            if *zi != 0.0 {
                return Err(Error::DegenerateGeometry(format!(
                    "nonzero coefficient {zi} along a zero-variance component"
                )));
            }
            continue;
        }
        m2 += zi * zi / li;
    }
    let m = m2.sqrt();
    // Rounding tolerance keeps the clamp idempotent: a point scaled onto
    // the boundary can re-measure a few ulps outside it.
    if m <= radius * (1.0 + 1e-12) {
        return Ok(coeffs.clone());
    }
    let s = radius / m;
    Ok(ShapeCoefficients { z: coeffs.z.iter().map(|zi| zi * s).collect() })
}

fn vertex(x: &[f64], v: u32) -> Vector3<f64> {
    let i = 3 * v as usize;
    Vector3::new(x[i], x[i + 1], x[i + 2])
}

fn add_grad(grad: &mut [f64], v: u32, d: Vector3<f64>) {
    let i = 3 * v as usize;
    grad[i] += d.x;
    grad[i + 1] += d.y;
    grad[i + 2] += d.z;
}

/// Reconstruction energy and its gradient for vertex coordinates `x`.
///
/// Per vertex: the current Laplace offset minus the target offsets
/// reconstructed in the current frames, squared. Frames follow the moving
/// vertices, so the gradient flows through the normals and tangent
/// projections as well.
fn human_energy(
    mesh: &TriangleMesh,
    first: &[u32],
    target: &[Vector3<f64>],
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    let faces = mesh.faces();
    let mut energy = 0.0;
    for j in 0..mesh.vertex_count() as u32 {
        let pj = vertex(x, j);
        let mut w = Vector3::zeros();
        for &fi in mesh.vertex_faces(j) {
            let [a, b, c] = faces[fi as usize];
            let pa = vertex(x, a);
            w += (vertex(x, b) - pa).cross(&(vertex(x, c) - pa));
        }
        let wn = w.norm();
        if wn < 1e-300 {
            return f64::INFINITY;
        }
        let f1 = w / wn;
        let e = vertex(x, first[j as usize]) - pj;
        let g = e - f1 * f1.dot(&e);
        let gn = g.norm();
        if gn < 1e-300 {
            return f64::INFINITY;
        }
        let f2 = g / gn;
        let f3 = f1.cross(&f2);

        let nbrs = mesh.neighbors(j);
        let deg = nbrs.len() as f64;
        let mut ring = Vector3::zeros();
        for &k in nbrs {
            ring += vertex(x, k);
        }
        let delta = ring / deg - pj;
        let om = target[j as usize];
        let r = delta - (f1 * om.x + f2 * om.y + f3 * om.z);
        energy += r.norm_squared();
        let rbar = 2.0 * r;

        add_grad(grad, j, -rbar);
        for &k in nbrs {
            add_grad(grad, k, rbar / deg);
        }

        // Reverse pass through the frames. For a cross product c = a x b
        // the adjoints are a_bar = b x c_bar and b_bar = c_bar x a.
        let f3bar = rbar * -om.z;
        let mut f1bar = rbar * -om.x + f2.cross(&f3bar);
        let f2bar = rbar * -om.y + f3bar.cross(&f1);

        // f2 = g / |g|, then g = e - (f1.e) f1.
        let gbar = (f2bar - f2 * f2.dot(&f2bar)) / gn;
        let ebar = gbar - f1 * f1.dot(&gbar);
        f1bar += -e * gbar.dot(&f1) - gbar * f1.dot(&e);
        add_grad(grad, first[j as usize], ebar);
        add_grad(grad, j, -ebar);

        // f1 = w / |w|, then w is the sum of face cross products.
        let wbar = (f1bar - f1 * f1.dot(&f1bar)) / wn;
        for &fi in mesh.vertex_faces(j) {
            let [a, b, c] = faces[fi as usize];
            let pa = vertex(x, a);
            let abar = (vertex(x, c) - pa).cross(&wbar);
            let bbar = wbar.cross(&(vertex(x, b) - pa));
            add_grad(grad, b, abar);
            add_grad(grad, c, bbar);
            add_grad(grad, a, -abar - bbar);
        }
    }
    energy
}

/// Deforms `initial` until its offset coefficients match `target`.
///
/// The scale entry of the target is redundant here: offsets are absolute
/// lengths, so matching them pins the size. Frames are recomputed from the
/// moving vertices inside the energy; the first-neighbor choice is frozen
/// from the initial mesh to keep the objective smooth.
pub fn reconstruct_mesh(initial: &TriangleMesh, target: &ShapeFeature) -> Result<Reconstruction> {
    require_fully_valid(initial, "mesh reconstruction")?;
    if target.omegas.len() != initial.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: initial.vertex_count(),
            got: target.omegas.len(),
            context: "target feature vs template vertices",
        });
    }
    let first = first_neighbors(initial)?;
    let mut x0 = Vec::with_capacity(3 * initial.vertex_count());
    for p in initial.positions() {
        x0.extend_from_slice(&[p.x, p.y, p.z]);
    }
    let options = MinimizeOptions::default();
    let result = minimize(
        |x, grad| human_energy(initial, &first, &target.omegas, x, grad),
        &x0,
        &options,
    )?;
    if result.status == MinimizeStatus::LineSearchFailed {
        // A stall at a stationary point is convergence; elsewhere it is not.
        let mut grad = vec![0.0; result.x.len()];
        human_energy(initial, &first, &target.omegas, &result.x, &mut grad);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax > 1e-4 * result.value.abs().max(1.0) {
            return Err(Error::Optimizer {
                message: "reconstruction stalled away from a stationary point".into(),
                energy: result.value,
                iterations: result.iterations,
            });
        }
    }
    let positions = result
        .x
        .chunks_exact(3)
        .map(|c| nalgebra::Point3::new(c[0], c[1], c[2]))
        .collect();
    Ok(Reconstruction {
        mesh: initial.with_positions(positions)?,
        energy: result.value,
        iterations: result.iterations,
    })
}
