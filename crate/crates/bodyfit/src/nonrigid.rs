//! Per-vertex non-rigid deformation and the relaxation fit.
//!
//! Every template vertex carries its own small transform: a rotation
//! (axis and angle) and a translation, expressed in a local coordinate
//! frame centered at the vertex. Splitting rotation from translation
//! keeps the smoothness coupling meaningful across globally rescaled
//! meshes, where a plain matrix-difference norm would mix the two.
//!
//! The fit alternates nearest-neighbor correspondence search against the
//! frame with quasi-Newton minimization of a three-term energy (data,
//! containment, smoothness), relaxing the smoothness weight on a halving
//! schedule whenever progress stalls.

use crate::error::{Error, Result};
use crate::geom::{
    rotation_about_axis, rotation_about_axis_dalpha, rotation_about_axis_daxis,
};
use crate::mesh::TriangleMesh;
use crate::optimize::{minimize, MinimizeOptions};
use crate::spatial::KdTree;
use nalgebra::{Matrix3, Point3, Vector3};

/// Deformation of one vertex: rotate by `alpha` about `r`, then move by
/// `t`, all in a local frame centered at the vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct VertexTransform {
    /// Translation in meters.
    pub t: Vector3<f64>,
    /// Rotation axis; any nonzero length, normalized on use.
    pub r: Vector3<f64>,
    /// Rotation angle in radians.
    pub alpha: f64,
}

impl VertexTransform {
    /// The identity deformation. The axis points along [1,1,1] so its
    /// normalization stays well away from the zero singularity.
    pub fn identity() -> Self {
        VertexTransform {
            t: Vector3::zeros(),
            r: Vector3::repeat(1.0 / 3f64.sqrt()),
            alpha: 0.0,
        }
    }
}

/// Floor for axis normalization; below it the axis maps linearly so the
/// gradient stays finite.
const AXIS_FLOOR: f64 = 1e-12;

/// Parameters per vertex: translation, axis, angle.
pub const PARAMS_PER_VERTEX: usize = 7;

/// A deformation field over a fixed template, with the neighborhood
/// structure the smoothness term couples through.
#[derive(Debug, Clone)]
pub struct DeformField {
    transforms: Vec<VertexTransform>,
    /// Vertices within `radius` of each vertex, excluding itself.
    neighborhoods: Vec<Vec<u32>>,
    /// Coupling radius: twice the template's average edge length.
    radius: f64,
}

impl DeformField {
    /// Identity field over the template, with neighborhoods collected by
    /// a radius query over the rest positions.
    pub fn new(template: &TriangleMesh) -> Result<Self> {
        require_fully_valid(template, "a deformation field")?;
        let radius = 2.0 * template.average_edge_length()?;
        let tree = KdTree::new(template.positions().to_vec());
        let neighborhoods = template
            .positions()
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut near: Vec<u32> = tree
                    .within_radius(p, radius)
                    .into_iter()
                    .map(|n| n.index)
                    .filter(|&k| k as usize != j)
                    .collect();
                near.sort_unstable();
                near
            })
            .collect();
        Ok(DeformField {
            transforms: vec![VertexTransform::identity(); template.vertex_count()],
            neighborhoods,
            radius,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.transforms.len()
    }

    pub fn transforms(&self) -> &[VertexTransform] {
        &self.transforms
    }

    pub fn transforms_mut(&mut self) -> &mut [VertexTransform] {
        &mut self.transforms
    }

    pub fn neighborhood(&self, j: u32) -> &[u32] {
        &self.neighborhoods[j as usize]
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    /// Flattens as `[t, r, alpha]` per vertex.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.transforms.len() * PARAMS_PER_VERTEX);
        for tr in &self.transforms {
            x.extend_from_slice(tr.t.as_slice());
            x.extend_from_slice(tr.r.as_slice());
            x.push(tr.alpha);
        }
        x
    }

    /// Replaces the transforms from a flat vector, keeping neighborhoods.
    pub fn set_flat(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.transforms.len() * PARAMS_PER_VERTEX {
            return Err(Error::DimensionMismatch {
                expected: self.transforms.len() * PARAMS_PER_VERTEX,
                got: x.len(),
                context: "flattened deformation field",
            });
        }
        for (tr, c) in self.transforms.iter_mut().zip(x.chunks_exact(PARAMS_PER_VERTEX)) {
            tr.t = Vector3::new(c[0], c[1], c[2]);
            tr.r = Vector3::new(c[3], c[4], c[5]);
            tr.alpha = c[6];
        }
        Ok(())
    }
}

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

/// Normalized axis and its Jacobian with respect to the raw axis.
fn normalized_axis(r: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
    let m = r.norm();
    if m > AXIS_FLOOR {
        let n = r / m;
        (n, (Matrix3::identity() - n * n.transpose()) / m)
    } else {
        (r / AXIS_FLOOR, Matrix3::identity() / AXIS_FLOOR)
    }
}

/// Deformed position of one vertex: the local rotate-then-translate
/// conjugated to the vertex location collapses to `v + R t` at `v`.
fn deform_vertex(v: &Point3<f64>, tr: &VertexTransform) -> Point3<f64> {
    let (n, _) = normalized_axis(&tr.r);
    v + rotation_about_axis(&n, tr.alpha) * tr.t
}

/// Applies the field to the template's rest positions.
pub fn apply_field(template: &TriangleMesh, field: &DeformField) -> Result<Vec<Point3<f64>>> {
    if field.vertex_count() != template.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: template.vertex_count(),
            got: field.vertex_count(),
            context: "deformation field vs template vertices",
        });
    }
    Ok(template
        .positions()
        .iter()
        .zip(&field.transforms)
        .map(|(v, tr)| deform_vertex(v, tr))
        .collect())
}

/// Signed protrusion of a deformed vertex outside the scan surface,
/// clamped to zero on the interior side.
pub fn clothing_penalty(
    v_deformed: &Point3<f64>,
    nn: &Point3<f64>,
    nn_normal: &Vector3<f64>,
) -> f64 {
    nn_normal.dot(&(v_deformed - nn)).max(0.0)
}

/// One data-term correspondence: the nearest frame point and its outer
/// normal.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondence {
    pub target: Point3<f64>,
    pub normal: Vector3<f64>,
}

/// Nearest-neighbor correspondences from a deformed template into the
/// frame, masked to pairs whose outer normals agree to within 90 degrees.
/// Masked or unmatched vertices get `None` and contribute no data or
/// containment terms.
pub fn correspondences(
    deformed: &TriangleMesh,
    frame: &TriangleMesh,
) -> Result<Vec<Option<Correspondence>>> {
    require_fully_valid(deformed, "correspondence search")?;
    let valid: Vec<u32> = (0..frame.vertex_count() as u32)
        .filter(|&v| frame.is_valid(v))
        .collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument(
            "frame has no valid vertices to correspond with".into(),
        ));
    }
    let frame_normals = frame.vertex_normals()?;
    let deformed_normals = deformed.vertex_normals()?;
    let tree = KdTree::with_labels(
        valid.iter().map(|&v| frame.position(v)).collect(),
        valid.clone(),
    );
    Ok(deformed
        .positions()
        .iter()
        .zip(&deformed_normals)
        .map(|(p, n)| {
            let nn = tree.nearest(p).expect("tree is non-empty");
            let fnormal = frame_normals[nn.index as usize];
            if n.dot(&fnormal) >= 0.0 {
                Some(Correspondence { target: frame.position(nn.index), normal: fnormal })
            } else {
                None
            }
        })
        .collect())
}

/// Term weights and the relaxation bookkeeping.
#[derive(Debug, Clone)]
pub struct ScheduleState {
    pub omega_data: f64,
    pub omega_clothing: f64,
    pub omega_smooth: f64,
    /// Correspondence rounds completed.
    pub iteration: usize,
    /// Smoothness weight and post-minimization energy of each round.
    pub history: Vec<ScheduleRound>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleRound {
    pub omega_smooth: f64,
    pub energy: f64,
}

impl ScheduleState {
    /// The starting weights: data and containment at 1, smoothness at 5.
    pub fn new() -> Self {
        ScheduleState {
            omega_data: 1.0,
            omega_clothing: 1.0,
            omega_smooth: 5.0,
            iteration: 0,
            history: Vec::new(),
        }
    }
}

impl Default for ScheduleState {
    fn default() -> Self {
        Self::new()
    }
}

/// Deformation energy and its gradient at the field configuration `x`.
///
/// Three terms: squared distance of every unmasked deformed vertex to
/// its correspondence target; the one-sided protrusion penalty against
/// the target's normal (subgradient 0 at the kink); and a smoothness
/// coupling that penalizes parameter differences between nearby rest
/// vertices, weighted down to zero at the neighborhood radius.
fn shape_energy(
    rest: &[Point3<f64>],
    field: &DeformField,
    weights: &ScheduleState,
    corr: &[Option<Correspondence>],
    x: &[f64],
    grad: &mut [f64],
) -> f64 {
    let n_verts = rest.len();
    grad.fill(0.0);

    // Per-vertex normalized axes, their Jacobians, and an accumulator
    // for gradients in normalized-axis space, chained back once at the
    // end.
    let mut axes = Vec::with_capacity(n_verts);
    let mut jacs = Vec::with_capacity(n_verts);
    for j in 0..n_verts {
        let r = Vector3::new(x[7 * j + 3], x[7 * j + 4], x[7 * j + 5]);
        let (n, jac) = normalized_axis(&r);
        axes.push(n);
        jacs.push(jac);
    }
    let mut axis_bar = vec![Vector3::<f64>::zeros(); n_verts];

    let mut energy = 0.0;
    for (j, c) in corr.iter().enumerate() {
        let Some(c) = c else { continue };
        let t = Vector3::new(x[7 * j], x[7 * j + 1], x[7 * j + 2]);
        let alpha = x[7 * j + 6];
        let rot = rotation_about_axis(&axes[j], alpha);
        let deformed = rest[j] + rot * t;
        let residual = deformed - c.target;
        let protrusion = c.normal.dot(&residual);

        energy += weights.omega_data * residual.norm_squared();
        let mut dbar = 2.0 * weights.omega_data * residual;
        if protrusion > 0.0 {
            energy += weights.omega_clothing * protrusion;
            dbar += weights.omega_clothing * c.normal;
        }

        let tg = rot.transpose() * dbar;
        grad[7 * j] += tg.x;
        grad[7 * j + 1] += tg.y;
        grad[7 * j + 2] += tg.z;
        let rot_bar = dbar * t.transpose();
        grad[7 * j + 6] += rot_bar
            .component_mul(&rotation_about_axis_dalpha(&axes[j], alpha))
            .sum();
        let daxis = rotation_about_axis_daxis(&axes[j], alpha);
        axis_bar[j] += Vector3::new(
            rot_bar.component_mul(&daxis[0]).sum(),
            rot_bar.component_mul(&daxis[1]).sum(),
            rot_bar.component_mul(&daxis[2]).sum(),
        );
    }

    // Smoothness over ordered neighbor pairs, as the coupling is written:
    // each unordered pair contributes twice.
    let d2 = field.radius * field.radius;
    for j in 0..n_verts {
        let tj = Vector3::new(x[7 * j], x[7 * j + 1], x[7 * j + 2]);
        let aj = x[7 * j + 6];
        for &ku in &field.neighborhoods[j] {
            let k = ku as usize;
            let w = weights.omega_smooth * (1.0 - (rest[j] - rest[k]).norm_squared() / d2);
            let tk = Vector3::new(x[7 * k], x[7 * k + 1], x[7 * k + 2]);
            let ak = x[7 * k + 6];
            let dt = tj - tk;
            let dn = axes[j] - axes[k];
            let da = aj - ak;
            energy += w * (dt.norm_squared() + dn.norm_squared() + da * da);

            let tbar = 2.0 * w * dt;
            grad[7 * j] += tbar.x;
            grad[7 * j + 1] += tbar.y;
            grad[7 * j + 2] += tbar.z;
            grad[7 * k] -= tbar.x;
            grad[7 * k + 1] -= tbar.y;
            grad[7 * k + 2] -= tbar.z;
            let nbar = 2.0 * w * dn;
            axis_bar[j] += nbar;
            axis_bar[k] -= nbar;
            let abar = 2.0 * w * da;
            grad[7 * j + 6] += abar;
            grad[7 * k + 6] -= abar;
        }
    }

    for j in 0..n_verts {
        // The normalization Jacobian is symmetric.
        let rbar = jacs[j] * axis_bar[j];
        grad[7 * j + 3] += rbar.x;
        grad[7 * j + 4] += rbar.y;
        grad[7 * j + 5] += rbar.z;
    }
    energy
}

/// Deformation energy and gradient of a field against fixed
/// correspondences. An all-masked correspondence set degenerates to the
/// smoothness term alone.
pub fn e_shape(
    template: &TriangleMesh,
    field: &DeformField,
    weights: &ScheduleState,
    corr: &[Option<Correspondence>],
) -> Result<(f64, Vec<f64>)> {
    if field.vertex_count() != template.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: template.vertex_count(),
            got: field.vertex_count(),
            context: "deformation field vs template vertices",
        });
    }
    if corr.len() != template.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: template.vertex_count(),
            got: corr.len(),
            context: "correspondences vs template vertices",
        });
    }
    let x = field.to_flat();
    let mut grad = vec![0.0; x.len()];
    let energy = shape_energy(template.positions(), field, weights, corr, &x, &mut grad);
    Ok((energy, grad))
}

/// Result of the relaxation fit.
#[derive(Debug, Clone)]
pub struct ShapeFit {
    pub field: DeformField,
    /// The template deformed by the final field.
    pub mesh: TriangleMesh,
    /// Final weights plus the per-round trace.
    pub state: ScheduleState,
    /// Conditions the fit worked around rather than failing on.
    pub warnings: Vec<String>,
}

/// Relative round-over-round change below which the energy counts as
/// settled at the current smoothness weight.
const RELAX_TRIGGER: f64 = 0.01;
/// Relative change between settled energies of consecutive schedule
/// steps below which the fit stops.
const STOP_TOLERANCE: f64 = 1e-3;
/// Smoothness weight below which the fit stops.
const SMOOTH_FLOOR: f64 = 0.1;
/// Hard caps guaranteeing termination.
const MAX_ROUNDS_PER_STEP: usize = 50;
const MAX_TOTAL_ROUNDS: usize = 400;

/// Fits the deformation field of a posture-aligned template to a frame.
///
/// The outer schedule halves the smoothness weight step by step, from 5
/// down. Within each step, correspondence search alternates with fixed-
/// correspondence minimization until the energy settles (round-over-round
/// change below 1%). The fit stops when halving no longer changes the
/// settled energy by 0.1% relative, or the weight falls under 0.1. The
/// weight starts high so early rounds deform the whole surface coherently
/// and later rounds fit localized detail.
pub fn fit_shape(
    template: &TriangleMesh,
    frame: &TriangleMesh,
    init: DeformField,
) -> Result<ShapeFit> {
    if init.vertex_count() != template.vertex_count() {
        return Err(Error::DimensionMismatch {
            expected: template.vertex_count(),
            got: init.vertex_count(),
            context: "initial field vs template vertices",
        });
    }
    let mut field = init;
    let mut state = ScheduleState::new();
    let mut warnings = Vec::new();
    let mut settled_previous: Option<f64> = None;
    'schedule: loop {
        let mut round_previous: Option<f64> = None;
        let mut rounds_this_step = 0usize;
        let settled = loop {
            let deformed = template.with_positions(apply_field(template, &field)?)?;
            let corr = correspondences(&deformed, frame)?;
            if corr.iter().all(Option::is_none) && warnings.is_empty() {
                warnings.push(
                    "all correspondences masked by normal disagreement, relying on smoothness only"
                        .into(),
                );
            }

            let positions = template.positions();
            let result = match minimize(
                |x, grad| shape_energy(positions, &field, &state, &corr, x, grad),
                &field.to_flat(),
                &MinimizeOptions::default(),
            ) {
                Ok(r) => r,
                Err(e) => {
                    warnings.push(format!(
                        "minimization aborted, keeping best field so far: {e}"
                    ));
                    break 'schedule;
                }
            };
            field.set_flat(&result.x)?;
            let energy = result.value;
            state.iteration += 1;
            rounds_this_step += 1;
            state
                .history
                .push(ScheduleRound { omega_smooth: state.omega_smooth, energy });
            if state.iteration >= MAX_TOTAL_ROUNDS {
                warnings.push(format!(
                    "round budget exhausted at energy {energy}, keeping best field"
                ));
                break 'schedule;
            }
            if let Some(prev) = round_previous {
                if (prev - energy).abs() / prev.abs().max(1e-300) < RELAX_TRIGGER
                    || rounds_this_step >= MAX_ROUNDS_PER_STEP
                {
                    break energy;
                }
            }
            round_previous = Some(energy);
        };

        if let Some(prev) = settled_previous {
            if prev.abs() < 1e-30
                || (prev - settled).abs() / prev.abs() < STOP_TOLERANCE
            {
                break;
            }
        }
        settled_previous = Some(settled);
        state.omega_smooth *= 0.5;
        if state.omega_smooth < SMOOTH_FLOOR {
            break;
        }
    }
    let mesh = template.with_positions(apply_field(template, &field)?)?;
    Ok(ShapeFit { field, mesh, state, warnings })
}
