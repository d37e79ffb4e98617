//! Rigged template skeleton and the two-stage posture fit.
//!
//! The template carries a 17-bone scene graph in depth-first order. A
//! posture is 55 numbers: the root takes a rotation vector, a uniform
//! scale, and a translation; every other bone a rotation vector relative
//! to its parent. Bones rotate about their rest head positions, vertices
//! follow by linear blend skinning. Posture fitting first matches the 14
//! tracked landmarks, then refines against the whole frame surface with
//! an iterated nearest-neighbor loop.

use crate::error::{Error, Result};
use crate::geom::{rotation_from_vector, rotation_from_vector_jacobian, Affine3};
use crate::mesh::TriangleMesh;
use crate::optimize::{minimize, MinimizeOptions, MinimizeStatus};
use crate::spatial::KdTree;
use nalgebra::{Matrix3, Point3, Vector3};

/// Bones in a skeleton.
pub const BONE_COUNT: usize = 17;

/// Flattened posture parameter count: root rotation, scale, and
/// translation, then one rotation vector per non-root bone.
pub const PARAM_COUNT: usize = 7 + 3 * (BONE_COUNT - 1);

/// One bone of the scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Bone {
    /// Identifier used by rig files and diagnostics.
    pub name: String,
    /// Index of the parent bone; `None` only for the root.
    pub parent: Option<usize>,
    /// Rest position of the joint this bone rotates about.
    pub head: Point3<f64>,
    /// Rest position of the far end of the bone.
    pub tail: Point3<f64>,
}

/// A 17-bone scene graph in depth-first order.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    bones: Vec<Bone>,
}

/// Canonical bone order: torso chain, left arm, right arm, left leg,
/// right leg. Parents always precede children.
pub fn default_bone_names() -> [&'static str; BONE_COUNT] {
    [
        "pelvis",
        "spine",
        "chest",
        "neck",
        "head",
        "upper_arm_l",
        "forearm_l",
        "hand_l",
        "upper_arm_r",
        "forearm_r",
        "hand_r",
        "thigh_l",
        "shin_l",
        "foot_l",
        "thigh_r",
        "shin_r",
        "foot_r",
    ]
}

/// Parent indices matching [`default_bone_names`].
pub fn default_bone_parents() -> [Option<usize>; BONE_COUNT] {
    [
        None,
        Some(0),
        Some(1),
        Some(2),
        Some(3),
        Some(2),
        Some(5),
        Some(6),
        Some(2),
        Some(8),
        Some(9),
        Some(0),
        Some(11),
        Some(12),
        Some(0),
        Some(14),
        Some(15),
    ]
}

impl Skeleton {
    /// Validates bone count, depth-first ordering, and a single root.
    pub fn new(bones: Vec<Bone>) -> Result<Self> {
        if bones.len() != BONE_COUNT {
            return Err(Error::InvalidArgument(format!(
                "a skeleton has {BONE_COUNT} bones, got {}",
                bones.len()
            )));
        }
        for (k, bone) in bones.iter().enumerate() {
            match bone.parent {
                None => {
                    if k != 0 {
                        return Err(Error::InvalidArgument(format!(
                            "bone {k} ({}) has no parent but is not first",
                            bone.name
                        )));
                    }
                }
                Some(p) => {
                    if k == 0 {
                        return Err(Error::InvalidArgument(
                            "the first bone must be the root".into(),
                        ));
                    }
                    if p >= k {
                        return Err(Error::InvalidArgument(format!(
                            "bone {k} ({}) has parent {p}, which does not precede it",
                            bone.name
                        )));
                    }
                }
            }
            if !(bone.head.coords.iter().all(|c| c.is_finite())
                && bone.tail.coords.iter().all(|c| c.is_finite()))
            {
                return Err(Error::InvalidArgument(format!(
                    "bone {k} ({}) has non-finite rest positions",
                    bone.name
                )));
            }
        }
        Ok(Skeleton { bones })
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn bone(&self, k: usize) -> &Bone {
        &self.bones[k]
    }
}

/// Posture of one frame.
///
/// Rotations are stored as rotation vectors: the direction is the (not
/// necessarily normalized) axis, the length is the angle in radians.
#[derive(Debug, Clone, PartialEq)]
pub struct PostureParams {
    /// Root rotation vector.
    pub root_rotation: Vector3<f64>,
    /// Uniform scale applied at the root, must stay positive.
    pub root_scale: f64,
    /// Root translation in meters.
    pub root_translation: Vector3<f64>,
    /// Rotation vector of each non-root bone, relative to its parent, in
    /// depth-first order.
    pub bone_rotations: Vec<Vector3<f64>>,
}

impl PostureParams {
    /// Rest posture: no rotation, unit scale, no translation.
    pub fn identity() -> Self {
        PostureParams {
            root_rotation: Vector3::zeros(),
            root_scale: 1.0,
            root_translation: Vector3::zeros(),
            bone_rotations: vec![Vector3::zeros(); BONE_COUNT - 1],
        }
    }

    /// Rotation vector for a separately given axis and angle.
    ///
    /// The axis may have any positive length. A zero axis is only valid
    /// together with a zero angle.
    pub fn rotation_from_axis_angle(axis: Vector3<f64>, angle: f64) -> Result<Vector3<f64>> {
        let n = axis.norm();
        if n < 1e-12 {
            if angle == 0.0 {
                return Ok(Vector3::zeros());
            }
            return Err(Error::InvalidArgument(format!(
                "rotation by {angle} rad about a zero axis"
            )));
        }
        Ok(axis * (angle / n))
    }

    /// Flattens to `[root rotation, scale, translation, bone rotations]`.
    /// The packing round-trips bit-exactly through [`PostureParams::from_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(PARAM_COUNT);
        x.extend_from_slice(self.root_rotation.as_slice());
        x.push(self.root_scale);
        x.extend_from_slice(self.root_translation.as_slice());
        for r in &self.bone_rotations {
            x.extend_from_slice(r.as_slice());
        }
        x
    }

    /// Inverse of [`PostureParams::to_flat`]. Scale positivity is not
    /// checked here; transform construction enforces it.
    pub fn from_flat(x: &[f64]) -> Result<Self> {
        if x.len() != PARAM_COUNT {
            return Err(Error::DimensionMismatch {
                expected: PARAM_COUNT,
                got: x.len(),
                context: "flattened posture parameters",
            });
        }
        Ok(PostureParams {
            root_rotation: Vector3::new(x[0], x[1], x[2]),
            root_scale: x[3],
            root_translation: Vector3::new(x[4], x[5], x[6]),
            bone_rotations: x[7..]
                .chunks_exact(3)
                .map(|c| Vector3::new(c[0], c[1], c[2]))
                .collect(),
        })
    }
}

/// Per-vertex skinning weights over the 17 bones.
///
/// Rows are stored densely; most entries are zero in practice.
#[derive(Debug, Clone, PartialEq)]
pub struct RiggingWeights {
    rows: Vec<[f64; BONE_COUNT]>,
}

impl RiggingWeights {
    /// Validates non-negativity and per-vertex partition of unity.
    pub fn new(rows: Vec<[f64; BONE_COUNT]>) -> Result<Self> {
        for (v, row) in rows.iter().enumerate() {
            if row.iter().any(|&w| !(w >= 0.0)) {
                return Err(Error::InvalidArgument(format!(
                    "vertex {v} has a negative or non-finite rigging weight"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "rigging weights of vertex {v} sum to {sum}, not 1"
                )));
            }
        }
        Ok(RiggingWeights { rows })
    }

    pub fn vertex_count(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, v: u32) -> &[f64; BONE_COUNT] {
        &self.rows[v as usize]
    }

    pub fn rows(&self) -> &[[f64; BONE_COUNT]] {
        &self.rows
    }
}

/// Template mesh with its skeleton, weights, and landmark vertices.
#[derive(Debug, Clone)]
pub struct RiggedTemplate {
    pub mesh: TriangleMesh,
    pub skeleton: Skeleton,
    pub weights: RiggingWeights,
    /// Vertex index of each landmark on the template.
    pub landmarks: Vec<u32>,
}

impl RiggedTemplate {
    /// Validates index ranges across the parts.
    pub fn new(
        mesh: TriangleMesh,
        skeleton: Skeleton,
        weights: RiggingWeights,
        landmarks: Vec<u32>,
    ) -> Result<Self> {
        if weights.vertex_count() != mesh.vertex_count() {
            return Err(Error::DimensionMismatch {
                expected: mesh.vertex_count(),
                got: weights.vertex_count(),
                context: "rigging weight rows vs template vertices",
            });
        }
        if let Some(&bad) = landmarks.iter().find(|&&l| l as usize >= mesh.vertex_count()) {
            return Err(Error::InvalidArgument(format!(
                "landmark vertex {bad} is out of range for {} vertices",
                mesh.vertex_count()
            )));
        }
        Ok(RiggedTemplate { mesh, skeleton, weights, landmarks })
    }
}

/// Result of a posture fit.
#[derive(Debug, Clone)]
pub struct PostureFit {
    pub params: PostureParams,
    /// Final energy value.
    pub energy: f64,
    /// Iterations spent (quasi-Newton for the landmark stage, outer
    /// correspondence rounds for the surface stage).
    pub iterations: usize,
}

/// Arithmetic mean of registered meshes, vertex by vertex.
pub fn compute_mean_template(meshes: &[TriangleMesh]) -> Result<TriangleMesh> {
    let Some(firstm) = meshes.first() else {
        return Err(Error::InvalidArgument(
            "cannot average zero registered meshes".into(),
        ));
    };
    for m in &meshes[1..] {
        if !m.shares_connectivity(firstm) {
            return Err(Error::InvalidMesh(
                "registered meshes must share one template connectivity".into(),
            ));
        }
    }
    let n = meshes.len() as f64;
    let mut positions = vec![Vector3::zeros(); firstm.vertex_count()];
    for m in meshes {
        for (acc, p) in positions.iter_mut().zip(m.positions()) {
            *acc += p.coords;
        }
    }
    firstm.with_positions(positions.into_iter().map(|v| Point3::from(v / n)).collect())
}

/// Global bone transforms for a posture.
///
/// The root applies translation, rotation, and scale about its rest head:
/// `x -> s R (x - h0) + h0 + t`. Every other bone rotates about its own
/// rest head and inherits its parent's transform on the left.
pub fn global_transforms(skeleton: &Skeleton, params: &PostureParams) -> Result<Vec<Affine3>> {
    if params.bone_rotations.len() != BONE_COUNT - 1 {
        return Err(Error::DimensionMismatch {
            expected: BONE_COUNT - 1,
            got: params.bone_rotations.len(),
            context: "bone rotations vs skeleton",
        });
    }
    if !(params.root_scale > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "root scale must be positive, got {}",
            params.root_scale
        )));
    }
    Ok(forward_transforms(skeleton, params).1)
}

/// Forward pass shared with the gradient code: local then global
/// transforms, in bone order.
fn forward_transforms(skeleton: &Skeleton, params: &PostureParams) -> (Vec<Affine3>, Vec<Affine3>) {
    let mut locals: Vec<Affine3> = Vec::with_capacity(BONE_COUNT);
    let mut globals: Vec<Affine3> = Vec::with_capacity(BONE_COUNT);
    for (k, bone) in skeleton.bones.iter().enumerate() {
        let h = bone.head.coords;
        let local = if bone.parent.is_some() {
            let r = rotation_from_vector(&params.bone_rotations[k - 1]);
            Affine3 { linear: r, translation: h - r * h }
        } else {
            let sr = rotation_from_vector(&params.root_rotation) * params.root_scale;
            Affine3 {
                linear: sr,
                translation: h + params.root_translation - sr * h,
            }
        };
        let global = match bone.parent {
            Some(p) => globals[p].compose(&local),
            None => local,
        };
        locals.push(local);
        globals.push(global);
    }
    (locals, globals)
}

/// Linear blend skinning: each vertex is the weight-blended image of its
/// rest position under the bone transforms.
pub fn skin(template: &RiggedTemplate, transforms: &[Affine3]) -> Vec<Point3<f64>> {
    assert_eq!(transforms.len(), BONE_COUNT, "one transform per bone");
    template
        .mesh
        .positions()
        .iter()
        .enumerate()
        .map(|(j, p)| skin_vertex(p, template.weights.row(j as u32), transforms))
        .collect()
}

#[inline]
fn skin_vertex(p: &Point3<f64>, row: &[f64; BONE_COUNT], transforms: &[Affine3]) -> Point3<f64> {
    let mut out = Vector3::zeros();
    for (w, b) in row.iter().zip(transforms) {
        if *w != 0.0 {
            out += (b.linear * p.coords + b.translation) * *w;
        }
    }
    Point3::from(out)
}

/// Squared-distance energy between skinned source vertices and fixed
/// targets, with its gradient over the flattened posture parameters.
///
/// The reverse pass walks the scene graph from leaves to root: for a
/// composition `C = A B`, the adjoints are `A_lin += C_lin B_lin^T +
/// C_tr B_tr^T`, `A_tr += C_tr`, `B_lin += A_lin^T C_lin`, and
/// `B_tr += A_lin^T C_tr`.
fn posture_energy(
    template: &RiggedTemplate,
    terms: &[(u32, Point3<f64>)],
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    grad.fill(0.0);
    let params = PostureParams::from_flat(x).expect("fixed packing length");
    if params.root_scale <= 0.0 {
        // Outside the domain; the line search will back off.
        return f64::INFINITY;
    }
    let skeleton = &template.skeleton;
    let (locals, globals) = forward_transforms(skeleton, &params);

    let mut energy = 0.0;
    let mut lin_bar = [Matrix3::<f64>::zeros(); BONE_COUNT];
    let mut tr_bar = [Vector3::<f64>::zeros(); BONE_COUNT];
    for &(v, target) in terms {
        let p = template.mesh.position(v);
        let row = template.weights.row(v);
        let skinned = skin_vertex(&p, row, &globals);
        let r = skinned - target;
        energy += r.norm_squared();
        let rbar = 2.0 * r;
        for (k, &w) in row.iter().enumerate() {
            if w != 0.0 {
                lin_bar[k] += (rbar * w) * p.coords.transpose();
                tr_bar[k] += rbar * w;
            }
        }
    }

    // Children have larger indices than their parents, so a descending
    // sweep finishes every bone before its parent receives contributions.
    for k in (1..BONE_COUNT).rev() {
        let parent = skeleton.bones[k].parent.expect("non-root");
        let (mbar, tbar) = (lin_bar[k], tr_bar[k]);
        let a_lin_t = globals[parent].linear.transpose();
        let local_lin_bar = a_lin_t * mbar;
        let local_tr_bar = a_lin_t * tbar;
        lin_bar[parent] +=
            mbar * locals[k].linear.transpose() + tbar * locals[k].translation.transpose();
        tr_bar[parent] += tbar;

        // Local transform x -> R (x - h) + h.
        let h = skeleton.bones[k].head.coords;
        let r_bar = local_lin_bar - local_tr_bar * h.transpose();
        let jac = rotation_from_vector_jacobian(&params.bone_rotations[k - 1]);
        let base = 7 + 3 * (k - 1);
        for i in 0..3 {
            grad[base + i] = r_bar.component_mul(&jac[i]).sum();
        }
    }

    // Root transform x -> s R (x - h0) + h0 + t.
    let h0 = skeleton.bones[0].head.coords;
    let g = lin_bar[0] - tr_bar[0] * h0.transpose();
    let r0 = rotation_from_vector(&params.root_rotation);
    grad[3] = g.component_mul(&r0).sum();
    let r0_bar = g * params.root_scale;
    let jac = rotation_from_vector_jacobian(&params.root_rotation);
    for i in 0..3 {
        grad[i] = r0_bar.component_mul(&jac[i]).sum();
    }
    grad[4] = tr_bar[0].x;
    grad[5] = tr_bar[0].y;
    grad[6] = tr_bar[0].z;
    energy
}

fn run_posture_minimize(
    template: &RiggedTemplate,
    terms: &[(u32, Point3<f64>)],
    init: &PostureParams,
    options: &MinimizeOptions,
) -> Result<(PostureParams, f64, usize)> {
    let x0 = init.to_flat();
    let result = minimize(
        |x, grad| posture_energy(template, terms, x, grad),
        &x0,
        options,
    )?;
    if result.status == MinimizeStatus::LineSearchFailed {
        let mut grad = vec![0.0; PARAM_COUNT];
        posture_energy(template, terms, &result.x, &mut grad);
        let gmax = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax > 1e-4 * result.value.abs().max(1.0) {
            return Err(Error::Optimizer {
                message: "posture fit stalled away from a stationary point".into(),
                energy: result.value,
                iterations: result.iterations,
            });
        }
    }
    Ok((PostureParams::from_flat(&result.x)?, result.value, result.iterations))
}

/// Fits the posture to the frame's 14 landmark positions.
///
/// Frame 1 starts from the identity posture; later frames from the
/// previous frame's result.
pub fn fit_posture_landmarks(
    template: &RiggedTemplate,
    frame_landmarks: &[Point3<f64>],
    init: &PostureParams,
) -> Result<PostureFit> {
    if frame_landmarks.len() != template.landmarks.len() {
        return Err(Error::DimensionMismatch {
            expected: template.landmarks.len(),
            got: frame_landmarks.len(),
            context: "frame landmarks vs template landmarks",
        });
    }
    if frame_landmarks
        .iter()
        .any(|p| !p.coords.iter().all(|c| c.is_finite()))
    {
        return Err(Error::InvalidArgument(
            "frame landmark positions must be finite".into(),
        ));
    }
    let terms: Vec<(u32, Point3<f64>)> = template
        .landmarks
        .iter()
        .copied()
        .zip(frame_landmarks.iter().copied())
        .collect();
    let (params, energy, iterations) =
        run_posture_minimize(template, &terms, init, &MinimizeOptions::default())?;
    Ok(PostureFit { params, energy, iterations })
}

/// Refines a posture against the whole frame surface.
///
/// Classic iterated closest points: exact nearest neighbors among the
/// frame's valid vertices define fixed correspondences, the posture is
/// minimized against them, and the loop repeats until the fresh-
/// correspondence energy changes by less than 0.1% or `outer_iters`
/// rounds are done. That energy never increases: re-picking nearest
/// neighbors can only tighten the value the minimizer just lowered.
pub fn fit_posture_nn(
    template: &RiggedTemplate,
    frame: &TriangleMesh,
    init: &PostureParams,
    outer_iters: usize,
) -> Result<PostureFit> {
    let targets: Vec<Point3<f64>> = (0..frame.vertex_count() as u32)
        .filter(|&v| frame.is_valid(v))
        .map(|v| frame.position(v))
        .collect();
    if targets.is_empty() {
        return Err(Error::InvalidArgument(
            "frame has no valid vertices to fit against".into(),
        ));
    }
    let tree = KdTree::new(targets.clone());
    let mut params = init.clone();
    let mut previous_energy = f64::INFINITY;
    let mut rounds = 0;
    for _ in 0..outer_iters.max(1) {
        let transforms = global_transforms(&template.skeleton, &params)?;
        let skinned = skin(template, &transforms);
        let mut terms = Vec::with_capacity(skinned.len());
        let mut fresh_energy = 0.0;
        for (j, p) in skinned.iter().enumerate() {
            let nn = tree.nearest(p).expect("tree is non-empty");
            fresh_energy += nn.distance_squared;
            terms.push((j as u32, targets[nn.index as usize]));
        }
        if fresh_energy > previous_energy * (1.0 + 1e-9) {
            break;
        }
        let done = (previous_energy - fresh_energy).abs() < 1e-3 * previous_energy.abs();
        previous_energy = fresh_energy;
        if done {
            break;
        }
        rounds += 1;
        let inner = run_posture_minimize(template, &terms, &params, &MinimizeOptions::default())?;
        params = inner.0;
    }
    Ok(PostureFit { params, energy: previous_energy, iterations: rounds })
}

/// Distance-based skinning weights for meshes that come without a rig.
///
/// Each vertex takes the 4 nearest bone segments with weights
/// proportional to inverse squared distance, followed by 10 rounds of
/// one-ring averaging (vertex included) to smooth the boundaries between
/// bone regions. Averaging convex rows keeps the partition of unity.
pub fn fallback_rigging_weights(mesh: &TriangleMesh, skeleton: &Skeleton) -> Result<RiggingWeights> {
    let mut rows = vec![[0.0; BONE_COUNT]; mesh.vertex_count()];
    for (v, row) in rows.iter_mut().enumerate() {
        if !mesh.is_valid(v as u32) {
            // Keep a valid row so the type invariant holds everywhere.
            row[0] = 1.0;
            continue;
        }
        let p = mesh.position(v as u32);
        let mut dists: Vec<(f64, usize)> = skeleton
            .bones
            .iter()
            .enumerate()
            .map(|(k, b)| (segment_distance_squared(&p, &b.head, &b.tail), k))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if dists[0].0 < 1e-24 {
            row[dists[0].1] = 1.0;
            continue;
        }
        let mut total = 0.0;
        for &(d2, k) in dists.iter().take(4) {
            let w = 1.0 / d2;
            row[k] = w;
            total += w;
        }
        for w in row.iter_mut() {
            *w /= total;
        }
    }
    for _ in 0..10 {
        let mut next = rows.clone();
        for (v, out) in next.iter_mut().enumerate() {
            if !mesh.is_valid(v as u32) {
                continue;
            }
            let mut acc = rows[v];
            let mut count = 1.0;
            for &n in mesh.neighbors(v as u32) {
                if mesh.is_valid(n) {
                    for (a, b) in acc.iter_mut().zip(&rows[n as usize]) {
                        *a += b;
                    }
                    count += 1.0;
                }
            }
            for (o, a) in out.iter_mut().zip(&acc) {
                *o = a / count;
            }
        }
        rows = next;
    }
    // Averaging preserves row sums exactly up to rounding; renormalize to
    // keep the invariant tight.
    for row in &mut rows {
        let sum: f64 = row.iter().sum();
        for w in row.iter_mut() {
            *w /= sum;
        }
    }
    RiggingWeights::new(rows)
}

/// Squared distance from a point to the segment `[a, b]`.
fn segment_distance_squared(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::MIN_POSITIVE {
        return (p - a).norm_squared();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm_squared()
}
