//! Geodesic distance fields by fast marching over the triangle mesh.
//!
//! Vertices are finalized in order of increasing distance. A finalized
//! vertex updates the remaining vertices of its incident faces: when the
//! face has two finalized corners a planar-wavefront update is used, and
//! when that update's characteristic does not enter through the face (the
//! obtuse case) the edge-length bound takes over for that step.

use super::TriangleMesh;
use crate::error::{Error, Result};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

/// Heap key ordered by distance, then vertex index for determinism.
#[derive(PartialEq)]
struct Key(f64, u32);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

/// Geodesic distances from `source` to every vertex.
///
/// Unreachable vertices (other connected components, hole interiors with no
/// faces) are reported as `f64::INFINITY`.
pub fn geodesic_distances(mesh: &TriangleMesh, source: u32) -> Result<Vec<f64>> {
    geodesic_distances_truncated(mesh, source, f64::INFINITY)
}

/// Like [`geodesic_distances`], but stops marching once the wavefront passes
/// `max_distance`; vertices beyond it stay at infinity. Used for local
/// neighborhood queries where the full field would be wasted work.
pub fn geodesic_distances_truncated(
    mesh: &TriangleMesh,
    source: u32,
    max_distance: f64,
) -> Result<Vec<f64>> {
    let n = mesh.vertex_count();
    if source as usize >= n {
        return Err(Error::InvalidArgument(format!(
            "geodesic source {source} out of range for {n} vertices"
        )));
    }
    if mesh.faces().is_empty() {
        return Err(Error::DegenerateGeometry(
            "geodesic distances need at least one face".into(),
        ));
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut known = vec![false; n];
    let mut heap: BinaryHeap<Reverse<Key>> = BinaryHeap::new();
    dist[source as usize] = 0.0;
    heap.push(Reverse(Key(0.0, source)));
    seed_source_neighborhood(mesh, source, &mut dist, &mut heap);

    while let Some(Reverse(Key(d, v))) = heap.pop() {
        if known[v as usize] || d > dist[v as usize] {
            continue;
        }
        if d > max_distance {
            break;
        }
        known[v as usize] = true;
        for &fi in mesh.vertex_faces(v) {
            let face = mesh.faces()[fi as usize];
            for &w in &face {
                if known[w as usize] {
                    continue;
                }
                let candidate = face_update(mesh, &face, w, &dist, &known);
                if candidate < dist[w as usize] {
                    dist[w as usize] = candidate;
                    heap.push(Reverse(Key(candidate, w)));
                }
            }
        }
    }
    Ok(dist)
}

/// Exact distances to the source's one- and two-ring.
///
/// One-ring distances are the edge lengths. A two-ring vertex behind a fan
/// edge gets the length of the straight segment to the source in the plane
/// of the two unfolded faces, when that segment crosses the shared edge;
/// otherwise the shorter corner route. Every candidate is the length of a
/// realizable surface path, so seeds never undercut the true distance, and
/// they remove the front-curvature error the linear-wavefront update commits
/// right next to a point source, which otherwise persists outward.
fn seed_source_neighborhood(
    mesh: &TriangleMesh,
    source: u32,
    dist: &mut [f64],
    heap: &mut BinaryHeap<Reverse<Key>>,
) {
    let ps = mesh.position(source);
    let mut relax = |v: u32, d: f64| {
        if d < dist[v as usize] {
            dist[v as usize] = d;
            heap.push(Reverse(Key(d, v)));
        }
    };
    for &fi in mesh.vertex_faces(source) {
        let face = mesh.faces()[fi as usize];
        let [a, b] = {
            let mut it = face.iter().copied().filter(|&x| x != source);
            [it.next().unwrap(), it.next().unwrap()]
        };
        let (pa, pb) = (mesh.position(a), mesh.position(b));
        let (sa, sb) = ((pa - ps).norm(), (pb - ps).norm());
        relax(a, sa);
        relax(b, sb);
        // The face across edge (a, b), if any.
        for &gi in mesh.vertex_faces(a) {
            if gi == fi {
                continue;
            }
            let g = mesh.faces()[gi as usize];
            if !g.contains(&b) {
                continue;
            }
            let Some(&w) = g.iter().find(|&&x| x != a && x != b) else {
                continue;
            };
            if w == source {
                continue;
            }
            let pw = mesh.position(w);
            let (aw, bw) = ((pw - pa).norm(), (pw - pb).norm());
            let corner_route = (sa + aw).min(sb + bw);
            let c2 = (pb - pa).norm_squared();
            if c2 <= f64::MIN_POSITIVE {
                relax(w, corner_route);
                continue;
            }
            let c = c2.sqrt();
            // Unfold both faces into a plane: a at the origin, b at (c, 0),
            // the source above the shared edge and w below it.
            let sx = (sa * sa - sb * sb + c2) / (2.0 * c);
            let sy = (sa * sa - sx * sx).max(0.0).sqrt();
            let wx = (aw * aw - bw * bw + c2) / (2.0 * c);
            let wy = -(aw * aw - wx * wx).max(0.0).sqrt();
            let dy = sy - wy;
            let candidate = if dy > f64::MIN_POSITIVE {
                let cross_x = sx + (wx - sx) * sy / dy;
                if (0.0..=c).contains(&cross_x) {
                    ((sx - wx).powi(2) + (sy - wy).powi(2)).sqrt()
                } else {
                    corner_route
                }
            } else {
                corner_route
            };
            relax(w, candidate.min(corner_route));
        }
    }
}

/// Best available update for vertex `w` through one face.
fn face_update(
    mesh: &TriangleMesh,
    face: &[u32; 3],
    w: u32,
    dist: &[f64],
    known: &[bool],
) -> f64 {
    let others: Vec<u32> = face.iter().copied().filter(|&x| x != w).collect();
    let (a, b) = (others[0], others[1]);
    let pw = mesh.position(w);
    let pa = mesh.position(a);
    let pb = mesh.position(b);
    let da = dist[a as usize];
    let db = dist[b as usize];

    let mut best = f64::INFINITY;
    if known[a as usize] {
        best = best.min(da + (pw - pa).norm());
    }
    if known[b as usize] {
        best = best.min(db + (pw - pb).norm());
    }
    // The two-point update may also use trial (not yet finalized) values.
    // Trial values only ever decrease, and on acute faces the update result
    // is at least max(da, db), so both corners finalize before w pops and
    // re-fire this update with their final values. Restricting the stencil
    // to finalized corners would starve vertices that tie with a stencil
    // partner in the pop order.
    if da.is_finite() && db.is_finite() {
        if let Some(t) = planar_update(&pa, &pb, &pw, da, db) {
            best = best.min(t);
        }
    }
    best
}

/// Planar wavefront passing through a triangle.
///
/// Models the distance function as linear with unit gradient, constrained by
/// the two known corner values. Returns `None` when no consistent wavefront
/// exists or its characteristic does not cross the known edge, in which case
/// the caller falls back to edge-length bounds.
fn planar_update(
    pa: &nalgebra::Point3<f64>,
    pb: &nalgebra::Point3<f64>,
    pw: &nalgebra::Point3<f64>,
    da: f64,
    db: f64,
) -> Option<f64> {
    let e = pb - pa;
    let c2 = e.norm_squared();
    if c2 <= f64::MIN_POSITIVE {
        return None;
    }
    let c = c2.sqrt();
    let u = db - da;
    if u.abs() > c {
        return None;
    }
    let p = pw - pa;
    // In-plane frame along the known edge.
    let px = e.dot(&p) / c;
    let h2 = (p - e * (px / c)).norm_squared();
    if h2 <= f64::MIN_POSITIVE {
        return None;
    }
    let h = h2.sqrt();
    let s = (1.0 - (u / c) * (u / c)).max(0.0).sqrt();
    if s <= f64::MIN_POSITIVE {
        return None;
    }
    // Characteristic through w crosses the known edge at parameter beta.
    let t_char = h / s;
    let beta = (px - t_char * (u / c)) / c;
    if !(0.0..=1.0).contains(&beta) {
        return None;
    }
    Some(da + (u / c) * px + s * h)
}

/// Farthest-point sampling by geodesic distance, starting at `seed_vertex`.
///
/// Deterministic: maximal-distance ties go to the lower vertex index. Only
/// vertices reachable from the seed are sampled, so the result may be
/// shorter than `count` on meshes with unreachable islands.
pub fn farthest_point_sampling(
    mesh: &TriangleMesh,
    count: usize,
    seed_vertex: u32,
) -> Result<Vec<u32>> {
    Ok(farthest_point_fields(mesh, count, seed_vertex)?.0)
}

/// [`farthest_point_sampling`] that also returns the full distance field of
/// every sample, in sample order. Callers that need per-sample fields anyway
/// (canonical forms, mean geodesic distance) avoid recomputing them.
pub fn farthest_point_fields(
    mesh: &TriangleMesh,
    count: usize,
    seed_vertex: u32,
) -> Result<(Vec<u32>, Vec<Vec<f64>>)> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    if seed_vertex as usize >= mesh.vertex_count() {
        return Err(Error::InvalidArgument(format!(
            "seed vertex {seed_vertex} out of range"
        )));
    }
    let count = count.min(mesh.vertex_count());
    let mut samples = Vec::with_capacity(count);
    let mut fields = Vec::with_capacity(count);
    let mut min_dist = geodesic_distances(mesh, seed_vertex)?;
    samples.push(seed_vertex);
    fields.push(min_dist.clone());
    while samples.len() < count {
        let mut best = None;
        let mut best_d = f64::NEG_INFINITY;
        for (v, &d) in min_dist.iter().enumerate() {
            if d.is_finite() && d > best_d {
                best_d = d;
                best = Some(v as u32);
            }
        }
        let Some(next) = best else { break };
        if best_d == 0.0 && samples.len() < count {
            // All reachable vertices are already at distance zero from the
            // sample set (duplicate positions); keep filling deterministically
            // with unvisited reachable vertices.
            let unvisited = min_dist
                .iter()
                .enumerate()
                .find(|(v, d)| d.is_finite() && !samples.contains(&(*v as u32)))
                .map(|(v, _)| v as u32);
            match unvisited {
                Some(v) => {
                    let field = geodesic_distances(mesh, v)?;
                    for (m, f) in min_dist.iter_mut().zip(&field) {
                        *m = m.min(*f);
                    }
                    samples.push(v);
                    fields.push(field);
                    continue;
                }
                None => break,
            }
        }
        let field = geodesic_distances(mesh, next)?;
        for (m, f) in min_dist.iter_mut().zip(&field) {
            *m = m.min(*f);
        }
        samples.push(next);
        fields.push(field);
    }
    Ok((samples, fields))
}

/// Mean geodesic distance between points of the surface, estimated from
/// `sample_count` farthest-point sources (seeded at vertex 0): the average
/// of every (source, vertex) pair, self-distances included.
///
/// Errors when some vertex is unreachable, since the mean would be infinite.
pub fn average_geodesic_distance(mesh: &TriangleMesh, sample_count: usize) -> Result<f64> {
    if sample_count < 1 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let (_, fields) = farthest_point_fields(mesh, sample_count, 0)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for field in &fields {
        for (v, &d) in field.iter().enumerate() {
            if !d.is_finite() {
                return Err(Error::DisconnectedMesh { start: 0, vertex: v });
            }
            total += d;
            n += 1;
        }
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::primitives;
    use approx::assert_relative_eq;
    use nalgebra::Point3;

    #[test]
    fn single_triangle_edge_distances_are_exact() {
        let mesh = TriangleMesh::new(
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(2.0, 0.0, 0.0),
                Point3::new(1.0, 1.5, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let d = geodesic_distances(&mesh, 0).unwrap();
        assert_relative_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 2.0, epsilon = 1e-12);
        assert_relative_eq!(d[2], (1.0f64 + 1.5 * 1.5).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn planar_corner_source_matches_euclidean() {
        // Square grid with straight boundaries: the domain is convex, so the
        // Euclidean distance is the true geodesic for every vertex pair.
        let n = 121usize;
        let h = 1.0 / (n as f64 - 1.0);
        let mesh = primitives::planar_grid(n, n, 1.0, 1.0);
        let d = geodesic_distances(&mesh, 0).unwrap();
        let src = mesh.position(0);
        let mut worst: f64 = 0.0;
        for (v, &dv) in d.iter().enumerate() {
            let exact = (mesh.position(v as u32) - src).norm();
            if exact > 3.0 * h {
                worst = worst.max((dv - exact).abs() / exact);
            }
        }
        assert!(worst < 0.02, "worst corner-source relative error {worst}");
    }

    #[test]
    fn planar_center_source_matches_euclidean() {
        // Near-equilateral triangulation, center source. The straight
        // segment from the center to any vertex off the first and last
        // columns stays on the surface (the side boundaries zigzag with the
        // row offsets), so the Euclidean distance is the true geodesic
        // there.
        let n = 121usize;
        let mesh = primitives::hex_grid(n, 1.0 / (n as f64 - 1.0));
        let source = (n / 2 * n + n / 2) as u32;
        let d = geodesic_distances(&mesh, source).unwrap();
        let src = mesh.position(source);
        let mut worst: f64 = 0.0;
        for (v, &dv) in d.iter().enumerate() {
            let col = v % n;
            if col == 0 || col == n - 1 {
                continue;
            }
            let exact = (mesh.position(v as u32) - src).norm();
            if exact > 0.15 {
                worst = worst.max((dv - exact).abs() / exact);
            }
        }
        assert!(worst < 0.02, "worst center-source relative error {worst}");
    }

    #[test]
    fn sphere_pole_to_equator_is_quarter_circumference() {
        let mesh = primitives::icosphere(5, 1.0);
        // Source: vertex closest to the north pole.
        let (pole, _) = mesh
            .positions()
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.z.total_cmp(&b.z))
            .unwrap();
        let d = geodesic_distances(&mesh, pole as u32).unwrap();
        let mut worst: f64 = 0.0;
        for (v, &dv) in d.iter().enumerate() {
            if mesh.position(v as u32).z.abs() < 0.02 {
                worst = worst.max((dv - std::f64::consts::FRAC_PI_2).abs());
            }
        }
        assert!(
            worst < 0.03 * std::f64::consts::FRAC_PI_2,
            "worst equator error {worst}"
        );
    }

    #[test]
    fn truncated_field_matches_full_field_inside_radius() {
        let mesh = primitives::icosphere(3, 1.0);
        let full = geodesic_distances(&mesh, 7).unwrap();
        let cut = geodesic_distances_truncated(&mesh, 7, 0.8).unwrap();
        for (f, c) in full.iter().zip(&cut) {
            if *f <= 0.8 {
                assert_relative_eq!(f, c, epsilon = 1e-12);
            }
        }
        assert!(cut.iter().any(|c| c.is_infinite()));
    }

    #[test]
    fn disconnected_component_stays_infinite() {
        let mut vertices = Vec::new();
        let mut faces = Vec::new();
        for shift in [0.0, 100.0] {
            let base = vertices.len() as u32;
            vertices.extend([
                Point3::new(shift, 0.0, 0.0),
                Point3::new(shift + 1.0, 0.0, 0.0),
                Point3::new(shift, 1.0, 0.0),
            ]);
            faces.push([base, base + 1, base + 2]);
        }
        let mesh = TriangleMesh::new(vertices, faces).unwrap();
        let d = geodesic_distances(&mesh, 0).unwrap();
        assert!(d[3].is_infinite());
        assert!(matches!(
            average_geodesic_distance(&mesh, 2),
            Err(Error::DisconnectedMesh { .. })
        ));
    }

    #[test]
    fn triangle_inequality_holds_on_samples() {
        let mesh = primitives::icosphere(3, 1.0);
        let da = geodesic_distances(&mesh, 3).unwrap();
        let db = geodesic_distances(&mesh, 101).unwrap();
        let dab = da[101];
        for v in (0..mesh.vertex_count()).step_by(17) {
            // Fast marching is approximate; allow a small slack.
            assert!(
                da[v] <= dab + db[v] + 0.03,
                "triangle inequality violated at {v}: {} > {} + {}",
                da[v],
                dab,
                db[v]
            );
        }
    }

    #[test]
    fn fps_with_full_count_is_a_permutation() {
        let mesh = primitives::icosphere(1, 1.0);
        let n = mesh.vertex_count();
        let samples = farthest_point_sampling(&mesh, n, 0).unwrap();
        assert_eq!(samples.len(), n);
        let mut sorted = samples.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), n);
    }

    #[test]
    fn fps_is_deterministic_and_spread() {
        let mesh = primitives::icosphere(2, 1.0);
        let a = farthest_point_sampling(&mesh, 16, 0).unwrap();
        let b = farthest_point_sampling(&mesh, 16, 0).unwrap();
        assert_eq!(a, b);
        // Second sample of a sphere from any seed is near the antipode.
        let p0 = mesh.position(a[0]);
        let p1 = mesh.position(a[1]);
        assert!((p0.coords + p1.coords).norm() < 0.2);
    }

    #[test]
    fn sphere_average_distance_is_quarter_turn_times_pi() {
        // Mean geodesic distance between uniform points on the unit sphere
        // is pi/2.
        let mesh = primitives::icosphere(3, 1.0);
        let s = average_geodesic_distance(&mesh, 64).unwrap();
        assert!(
            (s - std::f64::consts::FRAC_PI_2).abs() < 0.05 * std::f64::consts::FRAC_PI_2,
            "mean distance {s}"
        );
    }

    #[test]
    fn average_distance_scales_linearly() {
        let mesh = primitives::icosphere(2, 1.0);
        let s1 = average_geodesic_distance(&mesh, 16).unwrap();
        let scaled = mesh
            .with_positions(mesh.positions().iter().map(|p| Point3::from(p.coords * 2.5)).collect())
            .unwrap();
        let s2 = average_geodesic_distance(&scaled, 16).unwrap();
        assert_relative_eq!(s2, 2.5 * s1, max_relative = 1e-9);
    }

    #[test]
    fn faceless_mesh_is_rejected() {
        let mesh = TriangleMesh::new(
            vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)],
            Vec::new(),
        )
        .unwrap();
        assert!(matches!(
            geodesic_distances(&mesh, 0),
            Err(Error::DegenerateGeometry(_))
        ));
    }
}
