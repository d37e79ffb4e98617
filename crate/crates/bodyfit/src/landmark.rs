//! Landmark tracking with a tree-structured Markov network.
//!
//! Each of the 14 anatomical landmarks carries a Gaussian node potential
//! over the 20-dimensional geodesic disk descriptor of its vertex, and each
//! edge of the landmark tree carries a Gaussian potential over the 3-D
//! displacement between its endpoints in aligned canonical space. Both
//! statistics are intrinsic, so they survive posture changes. Per frame,
//! the label set of a landmark is the vertices near its previous position,
//! and exact max-product inference on the tree picks the jointly most
//! probable assignment.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Point3};

use crate::canonical::{canonical_form, procrustes_align, CanonicalForm};
use crate::error::{Error, Result};
use crate::mesh::{geodesic_disk_descriptor, TriangleMesh, DESCRIPTOR_RADII};
use crate::spatial::KdTree;

/// Number of tracked landmarks.
pub const LANDMARK_COUNT: usize = 14;

/// Default label-set size: nearest vertices to the previous prediction.
pub const DEFAULT_CANDIDATE_COUNT: usize = 200;

/// Farthest-point anchors used for per-frame canonical embeddings.
pub const CANONICAL_ANCHOR_COUNT: usize = 48;

/// Covariance regularization, relative to the mean diagonal entry.
const COVARIANCE_RELATIVE_FLOOR: f64 = 1e-6;
/// Absolute covariance floor; keeps zero-variance fits positive definite.
const COVARIANCE_ABSOLUTE_FLOOR: f64 = 1e-12;

/// The landmark graph: named nodes plus an edge set forming a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTopology {
    names: Vec<String>,
    edges: Vec<[usize; 2]>,
}

impl LandmarkTopology {
    /// Validates that `edges` is a spanning tree over exactly
    /// [`LANDMARK_COUNT`] named nodes.
    pub fn new(names: Vec<String>, edges: Vec<[usize; 2]>) -> Result<Self> {
        if names.len() != LANDMARK_COUNT {
            return Err(Error::DimensionMismatch {
                expected: LANDMARK_COUNT,
                got: names.len(),
                context: "landmark names",
            });
        }
        tree_order(names.len(), &edges)?;
        Ok(LandmarkTopology { names, edges })
    }

    /// The default anatomical landmark set. The neck is the hub; the head
    /// hangs off it, arms chain through shoulder, elbow and wrist, legs
    /// through hip, knee and ankle.
    pub fn anatomical() -> Self {
        let names = [
            "head_top", "neck", "shoulder_l", "elbow_l", "wrist_l", "shoulder_r", "elbow_r",
            "wrist_r", "hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let edges = vec![
            [1, 0],
            [1, 2],
            [2, 3],
            [3, 4],
            [1, 5],
            [5, 6],
            [6, 7],
            [1, 8],
            [8, 9],
            [9, 10],
            [1, 11],
            [11, 12],
            [12, 13],
        ];
        LandmarkTopology::new(names, edges).expect("anatomical topology is a valid tree")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.names.len()
    }
}

/// A multivariate Gaussian stored with its precision and log-normalizer so
/// log-density evaluation is a single quadratic form.
#[derive(Debug, Clone)]
pub struct GaussianPotential {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    log_normalizer: f64,
    regularization: f64,
}

impl GaussianPotential {
    /// Builds the potential from an explicit mean and covariance. The
    /// covariance must already be positive definite; no floor is added.
    pub fn from_parts(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if covariance.nrows() != d || covariance.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: covariance.nrows().max(covariance.ncols()),
                context: "covariance vs mean dimension",
            });
        }
        if mean.iter().any(|v| !v.is_finite()) || covariance.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "gaussian parameters must be finite".into(),
            ));
        }
        let chol = covariance.clone().cholesky().ok_or_else(|| {
            Error::DegenerateTraining("covariance is not positive definite".into())
        })?;
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_normalizer =
            -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianPotential {
            mean,
            covariance,
            precision: chol.inverse(),
            log_normalizer,
            regularization: 0.0,
        })
    }

    /// Maximum-likelihood fit with a diagonal floor.
    ///
    /// The population covariance gets `max(1e-6 x mean diagonal, 1e-12) I`
    /// added, so rank-deficient sample sets (few scans, duplicated scans)
    /// still produce a usable density.
    pub fn fit(samples: &[DVector<f64>]) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::DegenerateTraining(
                "gaussian fit needs at least one sample".into(),
            ));
        }
        let d = samples[0].len();
        if d == 0 {
            return Err(Error::InvalidArgument("gaussian samples must be non-empty".into()));
        }
        for s in samples {
            if s.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: s.len(),
                    context: "gaussian sample dimensions",
                });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument("gaussian samples must be finite".into()));
            }
        }
        let inv = 1.0 / n as f64;
        let mut mean = DVector::zeros(d);
        for s in samples {
            mean += s;
        }
        mean *= inv;
        let mut covariance = DMatrix::zeros(d, d);
        for s in samples {
            let delta = s - &mean;
            covariance += &delta * delta.transpose() * inv;
        }
        let mean_diag = covariance.diagonal().sum() / d as f64;
        let floor = (COVARIANCE_RELATIVE_FLOOR * mean_diag).max(COVARIANCE_ABSOLUTE_FLOOR);
        for i in 0..d {
            covariance[(i, i)] += floor;
        }
        let mut potential = GaussianPotential::from_parts(mean, covariance)?;
        potential.regularization = floor;
        Ok(potential)
    }

    /// Log-density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let delta = x - &self.mean;
        -0.5 * delta.dot(&(&self.precision * &delta)) + self.log_normalizer
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    /// The diagonal floor added by [`GaussianPotential::fit`]; zero for
    /// potentials built from explicit parts.
    pub fn regularization(&self) -> f64 {
        self.regularization
    }

    pub fn dimension(&self) -> usize {
        self.mean.len()
    }
}

/// Trained landmark network: one node potential per landmark over disk
/// descriptors, one edge potential per tree edge over canonical-space
/// displacements, plus the training-space landmark positions every frame
/// is aligned against.
#[derive(Debug, Clone)]
pub struct LandmarkModel {
    topology: LandmarkTopology,
    node_potentials: Vec<GaussianPotential>,
    edge_potentials: Vec<GaussianPotential>,
    canonical_landmarks: Vec<Point3<f64>>,
}

impl LandmarkModel {
    pub fn new(
        topology: LandmarkTopology,
        node_potentials: Vec<GaussianPotential>,
        edge_potentials: Vec<GaussianPotential>,
        canonical_landmarks: Vec<Point3<f64>>,
    ) -> Result<Self> {
        if node_potentials.len() != topology.node_count() {
            return Err(Error::DimensionMismatch {
                expected: topology.node_count(),
                got: node_potentials.len(),
                context: "node potentials vs landmarks",
            });
        }
        if edge_potentials.len() != topology.edges().len() {
            return Err(Error::DimensionMismatch {
                expected: topology.edges().len(),
                got: edge_potentials.len(),
                context: "edge potentials vs tree edges",
            });
        }
        if canonical_landmarks.len() != topology.node_count() {
            return Err(Error::DimensionMismatch {
                expected: topology.node_count(),
                got: canonical_landmarks.len(),
                context: "canonical landmark positions",
            });
        }
        if let Some(p) = node_potentials.iter().find(|p| p.dimension() != DESCRIPTOR_RADII.len())
        {
            return Err(Error::DimensionMismatch {
                expected: DESCRIPTOR_RADII.len(),
                got: p.dimension(),
                context: "node potential dimension",
            });
        }
        if let Some(p) = edge_potentials.iter().find(|p| p.dimension() != 3) {
            return Err(Error::DimensionMismatch {
                expected: 3,
                got: p.dimension(),
                context: "edge potential dimension",
            });
        }
        if canonical_landmarks.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
            return Err(Error::InvalidArgument(
                "canonical landmark positions must be finite".into(),
            ));
        }
        Ok(LandmarkModel { topology, node_potentials, edge_potentials, canonical_landmarks })
    }

    pub fn topology(&self) -> &LandmarkTopology {
        &self.topology
    }

    pub fn node_potentials(&self) -> &[GaussianPotential] {
        &self.node_potentials
    }

    pub fn edge_potentials(&self) -> &[GaussianPotential] {
        &self.edge_potentials
    }

    pub fn canonical_landmarks(&self) -> &[Point3<f64>] {
        &self.canonical_landmarks
    }
}

/// Landmark prediction on one frame.
#[derive(Debug, Clone)]
pub struct LandmarkAssignment {
    /// Selected vertex per landmark.
    pub vertices: Vec<u32>,
    /// Euclidean position of each selected vertex on the frame.
    pub positions: Vec<Point3<f64>>,
    /// Joint log-density of the assignment under the model.
    pub log_probability: f64,
}

/// User-provided landmarks for the first frame of a sequence.
#[derive(Debug, Clone)]
pub enum UserLandmarks {
    /// Direct vertex indices on frame 1.
    Vertices(Vec<u32>),
    /// Positions snapped to the nearest valid vertex of frame 1.
    Positions(Vec<Point3<f64>>),
}

/// Trains node and edge potentials from registered scans with known
/// landmark vertices.
///
/// Node potential j is fit to the disk descriptors of landmark j across
/// scans. All canonical forms are aligned onto the first scan's canonical
/// form by Procrustes over the landmark positions (reflections allowed,
/// canonical forms are only defined up to one), and edge potential (j, k)
/// is fit to the aligned displacement vectors position_k - position_j.
pub fn train_landmark_model(
    meshes: &[TriangleMesh],
    landmarks: &[Vec<u32>],
    topology: LandmarkTopology,
) -> Result<LandmarkModel> {
    if meshes.len() < 2 {
        return Err(Error::DegenerateTraining(format!(
            "landmark training needs at least 2 scans, got {}",
            meshes.len()
        )));
    }
    if meshes.len() != landmarks.len() {
        return Err(Error::DimensionMismatch {
            expected: meshes.len(),
            got: landmarks.len(),
            context: "scans vs landmark lists",
        });
    }
    let n_land = topology.node_count();
    for (i, (mesh, lms)) in meshes.iter().zip(landmarks).enumerate() {
        if lms.len() != n_land {
            return Err(Error::DimensionMismatch {
                expected: n_land,
                got: lms.len(),
                context: "landmarks per scan",
            });
        }
        for &v in lms {
            if v as usize >= mesh.vertex_count() || !mesh.is_valid(v) {
                return Err(Error::InvalidArgument(format!(
                    "scan {i}: landmark vertex {v} is out of range or invalid"
                )));
            }
        }
    }

    // Node potentials from per-scan descriptors.
    let mut node_potentials = Vec::with_capacity(n_land);
    for j in 0..n_land {
        let mut samples = Vec::with_capacity(meshes.len());
        for (mesh, lms) in meshes.iter().zip(landmarks) {
            let desc = geodesic_disk_descriptor(mesh, lms[j], &DESCRIPTOR_RADII)?;
            samples.push(DVector::from_vec(desc.values));
        }
        node_potentials.push(GaussianPotential::fit(&samples)?);
    }

    // Canonical landmark positions, aligned onto the first scan.
    let mut aligned: Vec<Vec<Point3<f64>>> = Vec::with_capacity(meshes.len());
    let mut reference: Vec<Point3<f64>> = Vec::new();
    for (i, (mesh, lms)) in meshes.iter().zip(landmarks).enumerate() {
        let form = canonical_form(mesh, CANONICAL_ANCHOR_COUNT)?;
        let coords: Vec<Point3<f64>> =
            lms.iter().map(|&v| form.coords[v as usize]).collect();
        if i == 0 {
            reference = coords.clone();
            aligned.push(coords);
        } else {
            let fit = procrustes_align(&coords, &reference, true)?;
            aligned.push(coords.iter().map(|p| fit.apply(p)).collect());
        }
    }

    let mut edge_potentials = Vec::with_capacity(topology.edges().len());
    for &[a, b] in topology.edges() {
        let samples: Vec<DVector<f64>> = aligned
            .iter()
            .map(|pos| {
                let d = pos[b] - pos[a];
                DVector::from_vec(vec![d.x, d.y, d.z])
            })
            .collect();
        edge_potentials.push(GaussianPotential::fit(&samples)?);
    }

    let inv = 1.0 / meshes.len() as f64;
    let canonical_landmarks: Vec<Point3<f64>> = (0..n_land)
        .map(|j| {
            let mut acc = nalgebra::Vector3::zeros();
            for pos in &aligned {
                acc += pos[j].coords;
            }
            Point3::from(acc * inv)
        })
        .collect();

    LandmarkModel::new(topology, node_potentials, edge_potentials, canonical_landmarks)
}

/// Per-landmark label sets: the `k` usable frame vertices nearest to each
/// previous prediction. Frames with fewer than `k` usable vertices yield
/// all of them. Lists are ordered by ascending distance.
pub fn candidate_labels(
    frame: &TriangleMesh,
    previous: &LandmarkAssignment,
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("candidate count must be positive".into()));
    }
    if previous
        .positions
        .iter()
        .any(|p| !p.coords.iter().all(|v| v.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "previous landmark positions must be finite".into(),
        ));
    }
    let tree = usable_vertex_tree(frame)?;
    Ok(previous
        .positions
        .iter()
        .map(|p| tree.k_nearest(p, k).iter().map(|n| n.index).collect())
        .collect())
}

/// Kd-tree over the vertices that can carry a landmark: valid and with at
/// least one incident face (descriptors need a neighborhood).
fn usable_vertex_tree(frame: &TriangleMesh) -> Result<KdTree> {
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for v in 0..frame.vertex_count() as u32 {
        if frame.is_valid(v) && !frame.vertex_faces(v).is_empty() {
            points.push(frame.position(v));
            labels.push(v);
        }
    }
    if points.is_empty() {
        return Err(Error::InvalidArgument(
            "frame has no valid vertices with faces".into(),
        ));
    }
    Ok(KdTree::with_labels(points, labels))
}

/// Maps a frame's canonical form into the model's training canonical
/// space. `anchor_vertices` gives one frame vertex per landmark whose
/// canonical position should land on the stored training position;
/// Procrustes over those pairs (reflection allowed) aligns the spaces.
pub fn align_frame_canonical(
    model: &LandmarkModel,
    canonical: &CanonicalForm,
    anchor_vertices: &[u32],
) -> Result<Vec<Point3<f64>>> {
    if anchor_vertices.len() != model.canonical_landmarks.len() {
        return Err(Error::DimensionMismatch {
            expected: model.canonical_landmarks.len(),
            got: anchor_vertices.len(),
            context: "alignment anchors vs landmarks",
        });
    }
    if let Some(&v) = anchor_vertices
        .iter()
        .find(|&&v| v as usize >= canonical.coords.len())
    {
        return Err(Error::InvalidArgument(format!(
            "alignment anchor vertex {v} out of range"
        )));
    }
    let source: Vec<Point3<f64>> = anchor_vertices
        .iter()
        .map(|&v| canonical.coords[v as usize])
        .collect();
    let fit = procrustes_align(&source, &model.canonical_landmarks, true)?;
    Ok(canonical.coords.iter().map(|p| fit.apply(p)).collect())
}

/// Exact MAP assignment of candidates to landmarks by two-pass max-product
/// on the tree.
///
/// `aligned_canonical` holds each frame vertex's canonical position mapped
/// into the training canonical space (see [`align_frame_canonical`]).
/// Candidates whose descriptor cannot be computed score negative infinity;
/// ties break toward the lower vertex index.
pub fn max_product_infer(
    model: &LandmarkModel,
    frame: &TriangleMesh,
    candidates: &[Vec<u32>],
    aligned_canonical: &[Point3<f64>],
) -> Result<LandmarkAssignment> {
    let n_land = model.topology.node_count();
    if candidates.len() != n_land {
        return Err(Error::DimensionMismatch {
            expected: n_land,
            got: candidates.len(),
            context: "candidate lists vs landmarks",
        });
    }
    if aligned_canonical.len() != frame.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: frame.vertex_count(),
            got: aligned_canonical.len(),
            context: "canonical coordinates vs frame vertices",
        });
    }
    for (j, list) in candidates.iter().enumerate() {
        if list.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "landmark {j} has no candidates"
            )));
        }
        if let Some(&v) = list.iter().find(|&&v| v as usize >= frame.vertex_count()) {
            return Err(Error::InvalidArgument(format!(
                "candidate vertex {v} out of range for landmark {j}"
            )));
        }
    }

    // Candidate sets overlap heavily, so descriptors are computed once per
    // vertex. A failed descriptor (isolated or detached vertex) makes that
    // candidate impossible rather than aborting the frame.
    let mut cache: HashMap<u32, Option<DVector<f64>>> = HashMap::new();
    let mut descriptor = |v: u32| -> Option<DVector<f64>> {
        cache
            .entry(v)
            .or_insert_with(|| {
                geodesic_disk_descriptor(frame, v, &DESCRIPTOR_RADII)
                    .ok()
                    .map(|d| DVector::from_vec(d.values))
            })
            .clone()
    };

    let node_scores: Vec<Vec<f64>> = candidates
        .iter()
        .enumerate()
        .map(|(j, list)| {
            list.iter()
                .map(|&v| match descriptor(v) {
                    Some(d) => sanitize(model.node_potentials[j].log_density(&d)),
                    None => f64::NEG_INFINITY,
                })
                .collect()
        })
        .collect();

    let edge_scores: Vec<Vec<Vec<f64>>> = model
        .topology
        .edges()
        .iter()
        .zip(&model.edge_potentials)
        .map(|(&[a, b], potential)| {
            candidates[a]
                .iter()
                .map(|&ca| {
                    candidates[b]
                        .iter()
                        .map(|&cb| {
                            let d = aligned_canonical[cb as usize]
                                - aligned_canonical[ca as usize];
                            sanitize(potential.log_density(&DVector::from_vec(vec![
                                d.x, d.y, d.z,
                            ])))
                        })
                        .collect()
                })
                .collect()
        })
        .collect();

    let (picked, total) = tree_map(model.topology.edges(), &node_scores, &edge_scores, candidates)?;
    let vertices: Vec<u32> = picked
        .iter()
        .enumerate()
        .map(|(j, &x)| candidates[j][x])
        .collect();
    let positions = vertices.iter().map(|&v| frame.position(v)).collect();
    Ok(LandmarkAssignment { vertices, positions, log_probability: total })
}

fn sanitize(score: f64) -> f64 {
    if score.is_nan() {
        f64::NEG_INFINITY
    } else {
        score
    }
}

/// BFS order and parent links of a tree rooted at node 0. Errors unless
/// `edges` forms a spanning tree over `node_count` nodes. The parent entry
/// carries the edge index used to reach the node.
fn tree_order(
    node_count: usize,
    edges: &[[usize; 2]],
) -> Result<(Vec<usize>, Vec<Option<(usize, usize)>>)> {
    if node_count == 0 {
        return Err(Error::InvalidArgument("topology needs at least one node".into()));
    }
    if edges.len() + 1 != node_count {
        return Err(Error::InvalidArgument(format!(
            "a tree over {node_count} nodes needs {} edges, got {}",
            node_count - 1,
            edges.len()
        )));
    }
    let mut adjacency: Vec<Vec<(usize, usize)>> = vec![Vec::new(); node_count];
    for (e, &[a, b]) in edges.iter().enumerate() {
        if a >= node_count || b >= node_count {
            return Err(Error::InvalidArgument(format!(
                "edge ({a}, {b}) references a node outside 0..{node_count}"
            )));
        }
        if a == b {
            return Err(Error::InvalidArgument(format!("edge ({a}, {b}) is a self-loop")));
        }
        adjacency[a].push((b, e));
        adjacency[b].push((a, e));
    }
    let mut order = Vec::with_capacity(node_count);
    let mut parents: Vec<Option<(usize, usize)>> = vec![None; node_count];
    let mut seen = vec![false; node_count];
    seen[0] = true;
    order.push(0);
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        head += 1;
        for &(w, e) in &adjacency[v] {
            if seen[w] {
                // The edge back to the parent is expected; anything else
                // closes a cycle.
                if parents[v].map(|(p, _)| p) != Some(w) {
                    return Err(Error::InvalidArgument(
                        "landmark topology contains a cycle".into(),
                    ));
                }
                continue;
            }
            seen[w] = true;
            parents[w] = Some((v, e));
            order.push(w);
        }
    }
    if order.len() != node_count {
        let missing = seen.iter().position(|s| !s).unwrap();
        return Err(Error::InvalidArgument(format!(
            "landmark topology is disconnected: node {missing} unreachable"
        )));
    }
    Ok((order, parents))
}

/// Two-pass max-product over a tree.
///
/// `edge_scores[e][x_a][x_b]` scores candidate pair (x_a, x_b) of edge
/// `edges[e] = [a, b]` in that stored orientation. Ties break toward the
/// lower entry of `tie_keys` (candidate vertex ids), resolved at the root
/// first and then child by child in traversal order. Returns candidate
/// list positions per node plus the joint score.
fn tree_map(
    edges: &[[usize; 2]],
    node_scores: &[Vec<f64>],
    edge_scores: &[Vec<Vec<f64>>],
    tie_keys: &[Vec<u32>],
) -> Result<(Vec<usize>, f64)> {
    let n = node_scores.len();
    let (order, parents) = tree_order(n, edges)?;
    let mut up: Vec<Vec<f64>> = node_scores
        .iter()
        .map(|row| row.iter().map(|&s| sanitize(s)).collect())
        .collect();
    let mut choice: Vec<Vec<usize>> = vec![Vec::new(); n];

    for &v in order.iter().rev() {
        let Some((p, e)) = parents[v] else { continue };
        let parent_first = edges[e][0] == p;
        let np = up[p].len();
        let nv = up[v].len();
        let mut best_for = vec![0usize; np];
        let mut msg = vec![f64::NEG_INFINITY; np];
        for xp in 0..np {
            let mut best = f64::NEG_INFINITY;
            let mut best_key = u32::MAX;
            let mut best_idx = 0usize;
            for xv in 0..nv {
                let es = if parent_first {
                    edge_scores[e][xp][xv]
                } else {
                    edge_scores[e][xv][xp]
                };
                let s = sanitize(up[v][xv] + es);
                if s > best || (s == best && tie_keys[v][xv] < best_key) {
                    best = s;
                    best_key = tie_keys[v][xv];
                    best_idx = xv;
                }
            }
            msg[xp] = best;
            best_for[xp] = best_idx;
        }
        choice[v] = best_for;
        for xp in 0..np {
            up[p][xp] += msg[xp];
        }
    }

    let root = order[0];
    let mut best = f64::NEG_INFINITY;
    let mut best_key = u32::MAX;
    let mut best_idx = 0usize;
    for (x, &total) in up[root].iter().enumerate() {
        let total = sanitize(total);
        if total > best || (total == best && tie_keys[root][x] < best_key) {
            best = total;
            best_key = tie_keys[root][x];
            best_idx = x;
        }
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::Inference(
            "every landmark assignment has zero probability".into(),
        ));
    }

    let mut assignment = vec![0usize; n];
    assignment[root] = best_idx;
    for &v in &order[1..] {
        let (p, _) = parents[v].unwrap();
        assignment[v] = choice[v][assignment[p]];
    }
    Ok((assignment, best))
}

/// Tracks landmarks across a sequence. Frame 1 takes the user-provided
/// landmarks; every later frame restricts each landmark to the vertices
/// near its previous prediction and runs exact inference there. Errors
/// carry the 1-based frame index.
pub fn track_landmarks(
    model: &LandmarkModel,
    frames: &[TriangleMesh],
    first: &UserLandmarks,
) -> Result<Vec<LandmarkAssignment>> {
    if frames.is_empty() {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    let n_land = model.topology.node_count();
    let first_vertices = resolve_user_landmarks(&frames[0], first, n_land)?;

    let mut out = Vec::with_capacity(frames.len());
    // Forced singleton label sets turn inference into evaluation, giving
    // the user assignment a log-probability on the same scale as later
    // frames.
    let singletons: Vec<Vec<u32>> = first_vertices.iter().map(|&v| vec![v]).collect();
    out.push(
        infer_frame(model, &frames[0], &singletons, &first_vertices)
            .map_err(|e| at_frame(1, e))?,
    );

    for i in 1..frames.len() {
        let previous = &out[i - 1];
        let frame_no = i + 1;
        let candidates = candidate_labels(&frames[i], previous, DEFAULT_CANDIDATE_COUNT)
            .map_err(|e| at_frame(frame_no, e))?;
        let anchors: Vec<u32> = candidates.iter().map(|c| c[0]).collect();
        out.push(
            infer_frame(model, &frames[i], &candidates, &anchors)
                .map_err(|e| at_frame(frame_no, e))?,
        );
    }
    Ok(out)
}

/// Canonical embedding, alignment and inference for one frame.
fn infer_frame(
    model: &LandmarkModel,
    frame: &TriangleMesh,
    candidates: &[Vec<u32>],
    anchors: &[u32],
) -> Result<LandmarkAssignment> {
    let form = canonical_form(frame, CANONICAL_ANCHOR_COUNT)?;
    let aligned = align_frame_canonical(model, &form, anchors)?;
    max_product_infer(model, frame, candidates, &aligned)
}

fn at_frame(frame_no: usize, e: Error) -> Error {
    Error::Inference(format!("frame {frame_no}: {e}"))
}

fn resolve_user_landmarks(
    frame: &TriangleMesh,
    first: &UserLandmarks,
    n_land: usize,
) -> Result<Vec<u32>> {
    match first {
        UserLandmarks::Vertices(vs) => {
            if vs.len() != n_land {
                return Err(Error::DimensionMismatch {
                    expected: n_land,
                    got: vs.len(),
                    context: "user landmarks",
                });
            }
            for &v in vs {
                if v as usize >= frame.vertex_count() || !frame.is_valid(v) {
                    return Err(Error::InvalidArgument(format!(
                        "user landmark vertex {v} is out of range or invalid"
                    )));
                }
            }
            Ok(vs.clone())
        }
        UserLandmarks::Positions(ps) => {
            if ps.len() != n_land {
                return Err(Error::DimensionMismatch {
                    expected: n_land,
                    got: ps.len(),
                    context: "user landmarks",
                });
            }
            if ps.iter().any(|p| !p.coords.iter().all(|v| v.is_finite())) {
                return Err(Error::InvalidArgument(
                    "user landmark positions must be finite".into(),
                ));
            }
            let tree = usable_vertex_tree(frame)?;
            Ok(ps
                .iter()
                .map(|p| {
                    tree.nearest(p)
                        .expect("usable vertex tree is non-empty")
                        .index
                })
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_about_axis;
    use crate::mesh::{farthest_point_fields, primitives};
    use nalgebra::Vector3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn jitter(mesh: &TriangleMesh, scale: f64, seed: u64) -> TriangleMesh {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mesh.with_positions(
            mesh.positions()
                .iter()
                .map(|p| {
                    Point3::new(
                        p.x + scale * (rng.gen::<f64>() - 0.5),
                        p.y + scale * (rng.gen::<f64>() - 0.5),
                        p.z + scale * (rng.gen::<f64>() - 0.5),
                    )
                })
                .collect(),
        )
        .unwrap()
    }

    /// Asymmetric body stand-in: a squashed sphere under a smooth generic
    /// radial warp. The warp has no mirror or rotational symmetry, so every
    /// vertex has a distinctive descriptor and canonical neighborhood;
    /// look-alike pairs on a symmetric shape would make the MAP ambiguous.
    fn body_base() -> TriangleMesh {
        let sphere = primitives::icosphere(2, 1.0);
        sphere
            .with_positions(
                sphere
                    .positions()
                    .iter()
                    .map(|p| {
                        let warp = 1.0
                            + 0.18 * (2.0 * p.x + 1.0).sin() * (3.0 * p.y - 0.5).cos()
                            + 0.12 * (2.5 * p.z + 0.7).sin();
                        Point3::new(p.x * warp, 0.7 * p.y * warp, 0.55 * p.z * warp)
                    })
                    .collect(),
            )
            .unwrap()
    }

    /// Fixed spread-out landmark vertices, shared by every scan of the
    /// registered family.
    fn body_landmarks(base: &TriangleMesh) -> Vec<u32> {
        farthest_point_fields(base, LANDMARK_COUNT, 0).unwrap().0
    }

    /// 25 scans: a 20-D covariance needs more samples than dimensions,
    /// otherwise the unsampled eigendirections sit on the regularization
    /// floor and the density is absurdly overconfident off the sample span.
    fn trained_model() -> (LandmarkModel, TriangleMesh, Vec<u32>) {
        let base = body_base();
        let lms = body_landmarks(&base);
        let scans: Vec<TriangleMesh> =
            (101..126).map(|s| jitter(&base, 0.01, s)).collect();
        let landmarks = vec![lms.clone(); scans.len()];
        let model =
            train_landmark_model(&scans, &landmarks, LandmarkTopology::anatomical()).unwrap();
        (model, base, lms)
    }

    fn rigid_copy(mesh: &TriangleMesh, axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> TriangleMesh {
        let rot = rotation_about_axis(&axis.normalize(), angle);
        mesh.with_positions(
            mesh.positions()
                .iter()
                .map(|p| Point3::from(rot * p.coords + t))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn default_topology_is_a_tree() {
        let topo = LandmarkTopology::anatomical();
        assert_eq!(topo.node_count(), LANDMARK_COUNT);
        assert_eq!(topo.edges().len(), LANDMARK_COUNT - 1);
        let mut names = topo.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), LANDMARK_COUNT);
        tree_order(topo.node_count(), topo.edges()).unwrap();
    }

    #[test]
    fn topology_rejects_non_trees() {
        let names: Vec<String> = (0..LANDMARK_COUNT).map(|i| format!("l{i}")).collect();
        let chain: Vec<[usize; 2]> = (1..LANDMARK_COUNT).map(|i| [i - 1, i]).collect();
        LandmarkTopology::new(names.clone(), chain.clone()).unwrap();

        // One edge short.
        let short = chain[..chain.len() - 1].to_vec();
        assert!(LandmarkTopology::new(names.clone(), short).is_err());
        // Right count, but a cycle plus a disconnected node.
        let mut cyclic = chain.clone();
        cyclic[LANDMARK_COUNT - 2] = [0, 1];
        assert!(LandmarkTopology::new(names.clone(), cyclic).is_err());
        // Self-loop.
        let mut looped = chain.clone();
        looped[0] = [3, 3];
        assert!(LandmarkTopology::new(names.clone(), looped).is_err());
        // Wrong node count.
        assert!(LandmarkTopology::new(names[..5].to_vec(), chain[..4].to_vec()).is_err());
    }

    #[test]
    fn gaussian_log_density_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dim in [2usize, 3, 5] {
            let samples: Vec<DVector<f64>> = (0..30)
                .map(|_| DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 2.0 - 1.0))
                .collect();
            let g = GaussianPotential::fit(&samples).unwrap();
            let inv = g.covariance().clone().try_inverse().unwrap();
            let det = g.covariance().determinant();
            for _ in 0..20 {
                let x = DVector::from_fn(dim, |_, _| rng.gen::<f64>() * 3.0 - 1.5);
                let delta = &x - g.mean();
                let direct = -0.5 * delta.dot(&(&inv * &delta))
                    - 0.5 * (dim as f64 * (2.0 * std::f64::consts::PI).ln() + det.ln());
                assert!(
                    (g.log_density(&x) - direct).abs() < 1e-9,
                    "dim {dim}: {} vs {direct}",
                    g.log_density(&x)
                );
            }
        }
    }

    #[test]
    fn gaussian_covariance_eigenvalues_respect_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Samples confined to a 2-D subspace of 5-D: rank deficient.
        let samples: Vec<DVector<f64>> = (0..40)
            .map(|_| {
                let a = rng.gen::<f64>() * 2.0 - 1.0;
                let b = rng.gen::<f64>() * 2.0 - 1.0;
                DVector::from_vec(vec![a, b, a + b, 0.0, 2.0 * a - b])
            })
            .collect();
        let g = GaussianPotential::fit(&samples).unwrap();
        let floor = g.regularization();
        assert!(floor > 0.0);
        let eigen = g.covariance().clone().symmetric_eigen();
        for &ev in eigen.eigenvalues.iter() {
            assert!(ev >= floor * (1.0 - 1e-9), "eigenvalue {ev} below floor {floor}");
        }
    }

    #[test]
    fn gaussian_zero_variance_gives_floor_identity() {
        // Averaging n identical samples rounds at the last ulp, so the
        // comparisons allow rounding-level slack around the exact claim.
        let sample = DVector::from_vec(vec![0.4, -1.2, 3.0]);
        let g = GaussianPotential::fit(&vec![sample.clone(); 7]).unwrap();
        for i in 0..3 {
            assert!((g.mean()[i] - sample[i]).abs() <= 1e-14 * sample[i].abs());
        }
        let floor = g.regularization();
        assert_eq!(floor, COVARIANCE_ABSOLUTE_FLOOR);
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { floor } else { 0.0 };
                assert!((g.covariance()[(i, j)] - expected).abs() < 1e-28);
            }
        }
    }

    #[test]
    fn gaussian_single_axis_variation_stays_axis_aligned() {
        let mut a = DVector::from_vec(vec![0.5, 1.0, -2.0, 0.25]);
        let mut b = a.clone();
        a[0] = 0.3;
        b[0] = 0.9;
        let g = GaussianPotential::fit(&[a, b]).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(g.covariance()[(i, j)].abs() < 1e-12);
                }
            }
        }
        assert!(g.covariance()[(0, 0)] > 0.05);
        for i in 1..4 {
            assert_eq!(g.covariance()[(i, i)], g.regularization());
        }
    }

    #[test]
    fn gaussian_fit_recovers_generator_mean() {
        // Monte-Carlo draws from a known diagonal Gaussian; the fitted
        // mean must land within three standard errors per coordinate.
        let mu = [1.5, -0.7, 0.2];
        let sigma = [0.8, 0.3, 1.1];
        let n = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut normal = || {
            let (u1, u2) = (rng.gen::<f64>().max(1e-12), rng.gen::<f64>());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let samples: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_vec(vec![
                mu[0] + sigma[0] * normal(),
                mu[1] + sigma[1] * normal(),
                mu[2] + sigma[2] * normal(),
            ]))
            .collect();
        let g = GaussianPotential::fit(&samples).unwrap();
        for i in 0..3 {
            let se = sigma[i] / (n as f64).sqrt();
            assert!(
                (g.mean()[i] - mu[i]).abs() < 3.0 * se,
                "coordinate {i}: {} vs {} (se {se})",
                g.mean()[i],
                mu[i]
            );
        }
    }

    #[test]
    fn gaussian_rejects_non_positive_definite_parts() {
        let mean = DVector::from_vec(vec![0.0, 0.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            GaussianPotential::from_parts(mean, cov),
            Err(Error::DegenerateTraining(_))
        ));
    }

    #[test]
    fn candidates_match_linear_scan() {
        let mesh = jitter(&primitives::icosphere(2, 1.0), 0.05, 4);
        let previous = LandmarkAssignment {
            vertices: vec![0; LANDMARK_COUNT],
            positions: (0..LANDMARK_COUNT)
                .map(|j| {
                    let a = j as f64;
                    Point3::new((a * 0.7).sin(), (a * 1.3).cos(), (a * 0.4).sin() - 0.2)
                })
                .collect(),
            log_probability: 0.0,
        };
        let k = 7;
        let got = candidate_labels(&mesh, &previous, k).unwrap();
        for (j, list) in got.iter().enumerate() {
            let mut by_distance: Vec<(f64, u32)> = (0..mesh.vertex_count() as u32)
                .map(|v| {
                    (
                        (mesh.position(v) - previous.positions[j]).norm_squared(),
                        v,
                    )
                })
                .collect();
            by_distance.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<u32> = by_distance[..k].iter().map(|&(_, v)| v).collect();
            assert_eq!(list, &expected, "landmark {j}");
        }
    }

    #[test]
    fn candidates_keep_previous_vertex_and_degrade_to_all() {
        let mesh = jitter(&primitives::icosphere(1, 1.0), 0.02, 5);
        let vertices: Vec<u32> = (0..LANDMARK_COUNT as u32).collect();
        let previous = LandmarkAssignment {
            positions: vertices.iter().map(|&v| mesh.position(v)).collect(),
            vertices: vertices.clone(),
            log_probability: 0.0,
        };
        let got = candidate_labels(&mesh, &previous, 5).unwrap();
        for (j, list) in got.iter().enumerate() {
            assert_eq!(list[0], vertices[j], "zero motion keeps the vertex nearest");
            assert_eq!(list.len(), 5);
        }
        // k exceeding the vertex count returns every usable vertex.
        let all = candidate_labels(&mesh, &previous, 10_000).unwrap();
        for list in &all {
            assert_eq!(list.len(), mesh.vertex_count());
        }
        let single = candidate_labels(&mesh, &previous, 1).unwrap();
        for (j, list) in single.iter().enumerate() {
            assert_eq!(list.as_slice(), &[vertices[j]]);
        }
    }

    /// Exhaustive MAP with the same tie rule as the message passing:
    /// lexicographic key comparison in traversal order.
    fn exhaustive_map(
        edges: &[[usize; 2]],
        node_scores: &[Vec<f64>],
        edge_scores: &[Vec<Vec<f64>>],
        tie_keys: &[Vec<u32>],
    ) -> (Vec<usize>, f64) {
        let n = node_scores.len();
        let (order, _) = tree_order(n, edges).unwrap();
        let counts: Vec<usize> = node_scores.iter().map(Vec::len).collect();
        let mut assignment = vec![0usize; n];
        let mut best: Option<(f64, Vec<u32>, Vec<usize>)> = None;
        loop {
            let mut total = 0.0;
            for (v, &x) in assignment.iter().enumerate() {
                total += node_scores[v][x];
            }
            for (e, &[a, b]) in edges.iter().enumerate() {
                total += edge_scores[e][assignment[a]][assignment[b]];
            }
            if total > f64::NEG_INFINITY {
                let keys: Vec<u32> = order.iter().map(|&v| tie_keys[v][assignment[v]]).collect();
                let replace = match &best {
                    None => true,
                    Some((bt, bk, _)) => total > *bt || (total == *bt && keys < *bk),
                };
                if replace {
                    best = Some((total, keys, assignment.clone()));
                }
            }
            // Odometer increment.
            let mut v = 0;
            loop {
                if v == n {
                    let (total, _, picked) = best.expect("at least one finite assignment");
                    return (picked, total);
                }
                assignment[v] += 1;
                if assignment[v] < counts[v] {
                    break;
                }
                assignment[v] = 0;
                v += 1;
            }
        }
    }

    #[test]
    fn map_matches_exhaustive_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..100 {
            // Trial 0 pins the densest shape: 5 nodes, 6 candidates each.
            let n = if trial == 0 { 5 } else { rng.gen_range(2..=6) };
            let edges: Vec<[usize; 2]> = (1..n)
                .map(|i| {
                    let p = rng.gen_range(0..i);
                    if rng.gen() {
                        [p, i]
                    } else {
                        [i, p]
                    }
                })
                .collect();
            let counts: Vec<usize> = (0..n)
                .map(|_| if trial == 0 { 6 } else { rng.gen_range(1..=6) })
                .collect();
            let mut node_scores: Vec<Vec<f64>> = counts
                .iter()
                .map(|&c| (0..c).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                .collect();
            let mut edge_scores: Vec<Vec<Vec<f64>>> = edges
                .iter()
                .map(|&[a, b]| {
                    (0..counts[a])
                        .map(|_| (0..counts[b]).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect())
                        .collect()
                })
                .collect();
            let tie_keys: Vec<Vec<u32>> = counts
                .iter()
                .map(|&c| (0..c).map(|_| rng.gen_range(0..40)).collect())
                .collect();

            // Half the trials get an exact tie: two candidates of one node
            // made interchangeable, the lower key placed later in the list.
            let mut tie_keys = tie_keys;
            if rng.gen::<f64>() < 0.5 {
                let v = rng.gen_range(0..n);
                if counts[v] >= 2 {
                    let (x, y) = (counts[v] - 2, counts[v] - 1);
                    node_scores[v][y] = node_scores[v][x];
                    for (e, &[a, b]) in edges.iter().enumerate() {
                        if a == v {
                            let row = edge_scores[e][x].clone();
                            edge_scores[e][y] = row;
                        }
                        if b == v {
                            for ca in 0..counts[a] {
                                edge_scores[e][ca][y] = edge_scores[e][ca][x];
                            }
                        }
                    }
                    let low = tie_keys[v][x].min(tie_keys[v][y]);
                    tie_keys[v][x] = low + 1;
                    tie_keys[v][y] = low;
                }
            }

            let (got, total) = tree_map(&edges, &node_scores, &edge_scores, &tie_keys).unwrap();
            let (want, want_total) =
                exhaustive_map(&edges, &node_scores, &edge_scores, &tie_keys);
            let got_keys: Vec<u32> = got.iter().enumerate().map(|(v, &x)| tie_keys[v][x]).collect();
            let want_keys: Vec<u32> =
                want.iter().enumerate().map(|(v, &x)| tie_keys[v][x]).collect();
            assert_eq!(got_keys, want_keys, "trial {trial}");
            assert!(
                (total - want_total).abs() < 1e-9,
                "trial {trial}: {total} vs {want_total}"
            );
        }
    }

    #[test]
    fn forced_single_candidates_return_direct_sum() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 204);
        let form = canonical_form(&frame, CANONICAL_ANCHOR_COUNT).unwrap();
        let aligned = align_frame_canonical(&model, &form, &lms).unwrap();
        let singletons: Vec<Vec<u32>> = lms.iter().map(|&v| vec![v]).collect();
        let got = max_product_infer(&model, &frame, &singletons, &aligned).unwrap();
        assert_eq!(got.vertices, lms);

        let mut direct = 0.0;
        for (j, &v) in lms.iter().enumerate() {
            let d = geodesic_disk_descriptor(&frame, v, &DESCRIPTOR_RADII).unwrap();
            direct += model.node_potentials()[j].log_density(&DVector::from_vec(d.values));
        }
        for (e, &[a, b]) in model.topology().edges().iter().enumerate() {
            let d = aligned[lms[b] as usize] - aligned[lms[a] as usize];
            direct += model.edge_potentials()[e]
                .log_density(&DVector::from_vec(vec![d.x, d.y, d.z]));
        }
        let scale = direct.abs().max(1.0);
        assert!(
            (got.log_probability - direct).abs() < 1e-9 * scale,
            "{} vs {direct}",
            got.log_probability
        );
        for (&v, p) in got.vertices.iter().zip(&got.positions) {
            assert_eq!(*p, frame.position(v));
        }
    }

    #[test]
    fn duplicated_candidate_leaves_selection_unchanged() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 205);
        let previous = LandmarkAssignment {
            positions: lms.iter().map(|&v| frame.position(v)).collect(),
            vertices: lms.clone(),
            log_probability: 0.0,
        };
        let candidates = candidate_labels(&frame, &previous, 8).unwrap();
        let form = canonical_form(&frame, CANONICAL_ANCHOR_COUNT).unwrap();
        let aligned = align_frame_canonical(&model, &form, &lms).unwrap();
        let a = max_product_infer(&model, &frame, &candidates, &aligned).unwrap();

        let mut doubled = candidates.clone();
        for list in &mut doubled {
            let winner = list[0];
            list.push(winner);
        }
        let b = max_product_infer(&model, &frame, &doubled, &aligned).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.log_probability, b.log_probability);
    }

    #[test]
    fn impossible_assignment_reports_inference_error() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 206);
        // An extra vertex referenced by no face: its descriptor cannot be
        // computed, so forcing a landmark onto it leaves zero probability.
        let mut positions = frame.positions().to_vec();
        positions.push(Point3::new(5.0, 5.0, 5.0));
        let orphan = TriangleMesh::new(positions, frame.faces().to_vec()).unwrap();
        let isolated = (orphan.vertex_count() - 1) as u32;

        let form_coords = canonical_form(&frame, CANONICAL_ANCHOR_COUNT).unwrap();
        let mut coords = form_coords.coords.clone();
        coords.push(Point3::origin());
        let fake_form = CanonicalForm { coords, sample_indices: form_coords.sample_indices };
        let aligned = align_frame_canonical(&model, &fake_form, &lms).unwrap();

        let mut candidates: Vec<Vec<u32>> = lms.iter().map(|&v| vec![v]).collect();
        candidates[3] = vec![isolated];
        match max_product_infer(&model, &orphan, &candidates, &aligned) {
            Err(Error::Inference(msg)) => assert!(msg.contains("zero probability")),
            other => panic!("expected inference error, got {other:?}"),
        }
    }

    #[test]
    fn log_probability_matches_direct_joint_evaluation() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 207);
        let previous = LandmarkAssignment {
            positions: lms.iter().map(|&v| frame.position(v)).collect(),
            vertices: lms.clone(),
            log_probability: 0.0,
        };
        let candidates = candidate_labels(&frame, &previous, 12).unwrap();
        let anchors: Vec<u32> = candidates.iter().map(|c| c[0]).collect();
        let form = canonical_form(&frame, CANONICAL_ANCHOR_COUNT).unwrap();
        let aligned = align_frame_canonical(&model, &form, &anchors).unwrap();
        let got = max_product_infer(&model, &frame, &candidates, &aligned).unwrap();

        let mut direct = 0.0;
        for (j, &v) in got.vertices.iter().enumerate() {
            let d = geodesic_disk_descriptor(&frame, v, &DESCRIPTOR_RADII).unwrap();
            direct += model.node_potentials()[j].log_density(&DVector::from_vec(d.values));
        }
        for (e, &[a, b]) in model.topology().edges().iter().enumerate() {
            let d = aligned[got.vertices[b] as usize] - aligned[got.vertices[a] as usize];
            direct += model.edge_potentials()[e]
                .log_density(&DVector::from_vec(vec![d.x, d.y, d.z]));
        }
        let scale = direct.abs().max(1.0);
        assert!(
            (got.log_probability - direct).abs() < 1e-9 * scale,
            "{} vs {direct}",
            got.log_probability
        );
    }

    #[test]
    fn rigid_motion_preserves_selected_vertices() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 208);
        let previous_positions: Vec<Point3<f64>> =
            lms.iter().map(|&v| frame.position(v)).collect();

        let run = |mesh: &TriangleMesh, prev_pos: &[Point3<f64>]| -> Vec<u32> {
            let previous = LandmarkAssignment {
                positions: prev_pos.to_vec(),
                vertices: lms.clone(),
                log_probability: 0.0,
            };
            let candidates = candidate_labels(mesh, &previous, 10).unwrap();
            let anchors: Vec<u32> = candidates.iter().map(|c| c[0]).collect();
            let form = canonical_form(mesh, CANONICAL_ANCHOR_COUNT).unwrap();
            let aligned = align_frame_canonical(&model, &form, &anchors).unwrap();
            max_product_infer(&model, mesh, &candidates, &aligned).unwrap().vertices
        };

        let still = run(&frame, &previous_positions);
        let rot = rotation_about_axis(&Vector3::new(0.3, 1.0, 0.2).normalize(), 0.8);
        let t = Vector3::new(0.4, -0.2, 0.7);
        let moved = frame
            .with_positions(
                frame
                    .positions()
                    .iter()
                    .map(|p| Point3::from(rot * p.coords + t))
                    .collect(),
            )
            .unwrap();
        let moved_prev: Vec<Point3<f64>> = previous_positions
            .iter()
            .map(|p| Point3::from(rot * p.coords + t))
            .collect();
        let after = run(&moved, &moved_prev);
        assert_eq!(still, after);
    }

    #[test]
    fn constant_sequence_is_stationary() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 209);
        let frames = vec![frame.clone(), frame.clone(), frame];
        let tracked =
            track_landmarks(&model, &frames, &UserLandmarks::Vertices(lms.clone())).unwrap();
        assert_eq!(tracked.len(), 3);
        assert_eq!(tracked[0].vertices, lms);
        for a in &tracked[1..] {
            assert_eq!(a.vertices, tracked[0].vertices);
        }
    }

    #[test]
    fn rigid_sequence_tracks_motion() {
        let (model, base, lms) = trained_model();
        let subject = jitter(&base, 0.01, 210);
        let frames: Vec<TriangleMesh> = (0..4)
            .map(|i| {
                let a = i as f64;
                rigid_copy(
                    &subject,
                    Vector3::new(0.1, 0.2, 1.0),
                    0.06 * a,
                    Vector3::new(0.02 * a, 0.01 * a, 0.015 * a),
                )
            })
            .collect();
        let tracked =
            track_landmarks(&model, &frames, &UserLandmarks::Vertices(lms.clone())).unwrap();
        let tolerance = subject.average_edge_length().unwrap();
        for (i, assignment) in tracked.iter().enumerate() {
            for (j, &v) in lms.iter().enumerate() {
                let truth = frames[i].position(v);
                let err = (assignment.positions[j] - truth).norm();
                assert!(
                    err < tolerance,
                    "frame {i} landmark {j}: error {err} vs edge length {tolerance}"
                );
            }
            assert!(assignment.log_probability.is_finite());
        }
    }

    #[test]
    fn positions_snap_to_nearest_vertex() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 211);
        // Nudge each true position slightly off the surface.
        let shifted: Vec<Point3<f64>> = lms
            .iter()
            .map(|&v| frame.position(v) + Vector3::new(0.004, -0.003, 0.002))
            .collect();
        let tracked =
            track_landmarks(&model, &[frame], &UserLandmarks::Positions(shifted)).unwrap();
        assert_eq!(tracked[0].vertices, lms);
    }

    #[test]
    fn input_validation_is_reported() {
        let (model, base, lms) = trained_model();
        let frame = jitter(&base, 0.01, 212);

        assert!(matches!(
            track_landmarks(&model, &[], &UserLandmarks::Vertices(lms.clone())),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            track_landmarks(&model, &[frame.clone()], &UserLandmarks::Vertices(vec![0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut bad = lms.clone();
        bad[0] = frame.vertex_count() as u32;
        assert!(matches!(
            track_landmarks(&model, &[frame.clone()], &UserLandmarks::Vertices(bad)),
            Err(Error::InvalidArgument(_))
        ));

        let previous = LandmarkAssignment {
            positions: vec![Point3::origin(); LANDMARK_COUNT],
            vertices: vec![0; LANDMARK_COUNT],
            log_probability: 0.0,
        };
        assert!(matches!(
            candidate_labels(&frame, &previous, 0),
            Err(Error::InvalidArgument(_))
        ));
        let aligned = vec![Point3::origin(); frame.vertex_count()];
        assert!(matches!(
            max_product_infer(&model, &frame, &vec![vec![0u32]; 3], &aligned),
            Err(Error::DimensionMismatch { .. })
        ));
        let candidates: Vec<Vec<u32>> = lms.iter().map(|&v| vec![v]).collect();
        assert!(matches!(
            max_product_infer(&model, &frame, &candidates, &aligned[..5].to_vec()),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn training_on_duplicate_scans_gives_tight_model() {
        let base = body_base();
        let lms = body_landmarks(&base);
        let scan = jitter(&base, 0.01, 113);
        let meshes = vec![scan.clone(), scan.clone(), scan.clone()];
        let landmarks = vec![lms.clone(); 3];
        let model =
            train_landmark_model(&meshes, &landmarks, LandmarkTopology::anatomical()).unwrap();

        for (j, potential) in model.node_potentials().iter().enumerate() {
            let d = geodesic_disk_descriptor(&scan, lms[j], &DESCRIPTOR_RADII).unwrap();
            let expected = DVector::from_vec(d.values);
            let drift = (potential.mean() - &expected).amax();
            assert!(drift < 1e-12, "node {j} mean drifted by {drift}");
            let floor = potential.regularization();
            for r in 0..potential.dimension() {
                for c in 0..potential.dimension() {
                    let want = if r == c { floor } else { 0.0 };
                    assert!((potential.covariance()[(r, c)] - want).abs() < 1e-24);
                }
            }
        }
        // Identical scans align to themselves, so edge displacements are
        // identical too and covariances sit on the floor.
        for potential in model.edge_potentials() {
            let floor = potential.regularization();
            for r in 0..3 {
                for c in 0..3 {
                    let want = if r == c { floor } else { 0.0 };
                    assert!((potential.covariance()[(r, c)] - want).abs() < 1e-24);
                }
            }
        }
        let form = canonical_form(&scan, CANONICAL_ANCHOR_COUNT).unwrap();
        for (j, &v) in lms.iter().enumerate() {
            let err = (model.canonical_landmarks()[j] - form.coords[v as usize]).norm();
            assert!(err < 1e-9, "canonical landmark {j} drifted by {err}");
        }
    }

    #[test]
    fn training_rejects_bad_inputs() {
        let base = body_base();
        let lms = body_landmarks(&base);
        let scan = jitter(&base, 0.01, 114);
        let topo = LandmarkTopology::anatomical;

        assert!(matches!(
            train_landmark_model(&[scan.clone()], &[lms.clone()], topo()),
            Err(Error::DegenerateTraining(_))
        ));
        assert!(matches!(
            train_landmark_model(&[scan.clone(), scan.clone()], &[lms.clone()], topo()),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut bad = lms.clone();
        bad[2] = scan.vertex_count() as u32;
        assert!(matches!(
            train_landmark_model(
                &[scan.clone(), scan.clone()],
                &[lms.clone(), bad],
                topo()
            ),
            Err(Error::InvalidArgument(_))
        ));
        let short = vec![lms[0]; 5];
        assert!(matches!(
            train_landmark_model(
                &[scan.clone(), scan.clone()],
                &[lms.clone(), short],
                topo()
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
