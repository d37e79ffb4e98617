//! Geodesic disk-area descriptors.
//!
//! The descriptor of a vertex compares, over a fixed ladder of radii, the
//! area of its geodesic neighborhood against the area of a flat disk of the
//! same radius. The ratios are dimensionless, purely intrinsic (invariant
//! under rigid motion), and capture how limb-like or trunk-like the surface
//! around the vertex is.

use super::{geodesic_distances_truncated, TriangleMesh};
use crate::error::{Error, Result};
use nalgebra::Point3;

/// Default radius ladder: 1 cm to 20 cm in 1 cm steps (mesh units are
/// meters at body scale).
pub const DESCRIPTOR_RADII: [f64; 20] = [
    0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07, 0.08, 0.09, 0.10, 0.11, 0.12, 0.13, 0.14, 0.15,
    0.16, 0.17, 0.18, 0.19, 0.20,
];

/// Disk-area descriptor values, one dimensionless ratio per radius.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskDescriptor {
    /// `neighborhood_area(radius) / (pi * radius^2)` per requested radius.
    pub values: Vec<f64>,
}

/// Sentinel stand-in for unreached vertices when clipping; large enough that
/// interpolated crossings collapse onto the reached endpoint.
const FAR: f64 = 1e12;

/// Computes the disk-area descriptor of `vertex` over `radii`.
///
/// Radii must be positive and strictly ascending. The geodesic neighborhood
/// area counts triangles fully inside the radius and clips straddling
/// triangles by linear interpolation of the corner distances. Radii beyond
/// the mesh extent simply see the whole available area.
pub fn geodesic_disk_descriptor(
    mesh: &TriangleMesh,
    vertex: u32,
    radii: &[f64],
) -> Result<DiskDescriptor> {
    if radii.is_empty() {
        return Err(Error::InvalidArgument("descriptor needs at least one radius".into()));
    }
    for pair in radii.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidArgument(
                "descriptor radii must be strictly ascending".into(),
            ));
        }
    }
    if radii[0] <= 0.0 {
        return Err(Error::InvalidArgument("descriptor radii must be positive".into()));
    }
    if vertex as usize >= mesh.vertex_count() {
        return Err(Error::InvalidArgument(format!("vertex {vertex} out of range")));
    }
    if mesh.vertex_faces(vertex).is_empty() {
        return Err(Error::IsolatedVertex { vertex: vertex as usize });
    }

    let max_radius = *radii.last().unwrap();
    // March a little past the largest radius so triangles straddling it have
    // finite corner values on both sides.
    let margin = 3.0 * mesh.average_edge_length()?;
    let mut dist = geodesic_distances_truncated(mesh, vertex, max_radius + margin)?;
    for d in &mut dist {
        if !d.is_finite() {
            *d = FAR;
        }
    }

    let mut values = Vec::with_capacity(radii.len());
    for &a in radii {
        let mut area = 0.0;
        for face in mesh.faces() {
            let d = [
                dist[face[0] as usize],
                dist[face[1] as usize],
                dist[face[2] as usize],
            ];
            if d[0] > a && d[1] > a && d[2] > a {
                continue;
            }
            let p = [
                mesh.position(face[0]),
                mesh.position(face[1]),
                mesh.position(face[2]),
            ];
            area += sublevel_area(&p, &d, a);
        }
        let value = area / (std::f64::consts::PI * a * a);
        if value <= 0.0 {
            return Err(Error::DegenerateGeometry(format!(
                "zero neighborhood area at vertex {vertex}, radius {a}"
            )));
        }
        values.push(value);
    }
    Ok(DiskDescriptor { values })
}

/// Area of the part of a triangle where the linear interpolation of the
/// corner values lies at or below `a`.
fn sublevel_area(p: &[Point3<f64>; 3], d: &[f64; 3], a: f64) -> f64 {
    // Clip the triangle against the half-space d <= a (Sutherland-Hodgman).
    let mut poly = [Point3::origin(); 4];
    let mut n = 0;
    for i in 0..3 {
        let j = (i + 1) % 3;
        let (di, dj) = (d[i], d[j]);
        if di <= a {
            poly[n] = p[i];
            n += 1;
        }
        if (di <= a) != (dj <= a) {
            let t = (a - di) / (dj - di);
            poly[n] = p[i] + (p[j] - p[i]) * t;
            n += 1;
        }
    }
    if n < 3 {
        return 0.0;
    }
    // Planar convex polygon: the fan cross products share a direction.
    let mut sum = nalgebra::Vector3::zeros();
    for k in 1..n - 1 {
        sum += (poly[k] - poly[0]).cross(&(poly[k + 1] - poly[0]));
    }
    sum.norm() / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::rotation_from_vector;
    use crate::mesh::primitives;
    use nalgebra::Vector3;
    use proptest::prelude::*;

    #[test]
    fn flat_interior_vertex_ratios_are_near_one() {
        // 0.25 m square at 2 mm spacing; radii well above the edge length
        // and well inside the border.
        let mesh = primitives::hex_grid(126, 0.25 / 125.0);
        let center = mesh
            .positions()
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                let m = nalgebra::Point3::new(0.125, 0.108, 0.0);
                (*a - m).norm_squared().total_cmp(&(*b - m).norm_squared())
            })
            .map(|(i, _)| i as u32)
            .unwrap();
        let radii = [0.01, 0.02, 0.03, 0.04, 0.05];
        let desc = geodesic_disk_descriptor(&mesh, center, &radii).unwrap();
        for (r, v) in radii.iter().zip(&desc.values) {
            assert!((v - 1.0).abs() < 0.05, "radius {r}: ratio {v}");
        }
    }

    #[test]
    fn descriptor_is_rigid_invariant() {
        let mesh = primitives::icosphere(3, 0.4);
        let desc = geodesic_disk_descriptor(&mesh, 42, &DESCRIPTOR_RADII).unwrap();
        let r = rotation_from_vector(&Vector3::new(0.4, -1.1, 2.2));
        let t = Vector3::new(3.0, 4.0, -5.0);
        let moved = mesh
            .with_positions(
                mesh.positions()
                    .iter()
                    .map(|p| nalgebra::Point3::from(r * p.coords + t))
                    .collect(),
            )
            .unwrap();
        let desc2 = geodesic_disk_descriptor(&moved, 42, &DESCRIPTOR_RADII).unwrap();
        for (a, b) in desc.values.iter().zip(&desc2.values) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn sphere_cap_ratio_matches_analytic_value() {
        // Fine mesh: the marching error grows like the edge length and the
        // tolerance here leaves it little room.
        let mesh = primitives::icosphere(7, 1.0);
        let a = 0.2;
        let desc = geodesic_disk_descriptor(&mesh, 0, &[a]).unwrap();
        // Geodesic disk of radius a on the unit sphere is a spherical cap
        // of area 2*pi*(1 - cos a).
        let expect = 2.0 * (1.0 - a.cos()) / (a * a);
        let got = desc.values[0];
        assert!(
            (got - expect).abs() < 0.03 * expect,
            "radius {a}: {got} vs {expect}"
        );
    }

    #[test]
    fn radius_beyond_mesh_extent_sees_total_area() {
        let mesh = primitives::icosphere(2, 0.05);
        let desc = geodesic_disk_descriptor(&mesh, 0, &[10.0]).unwrap();
        let expect = mesh.surface_area() / (std::f64::consts::PI * 100.0);
        assert!((desc.values[0] - expect).abs() < 1e-9 * expect.max(1.0));
    }

    #[test]
    fn unsorted_radii_are_rejected() {
        let mesh = primitives::icosphere(1, 1.0);
        assert!(matches!(
            geodesic_disk_descriptor(&mesh, 0, &[0.2, 0.1]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            geodesic_disk_descriptor(&mesh, 0, &[0.0, 0.1]),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn neighborhood_area_is_monotone_in_radius(
            seed_vertex in 0u32..42,
            start in 0.05f64..0.5,
            steps in 2usize..8,
        ) {
            let mesh = primitives::icosphere(2, 1.0);
            let radii: Vec<f64> = (0..steps).map(|i| start + 0.2 * i as f64).collect();
            let desc = geodesic_disk_descriptor(&mesh, seed_vertex, &radii).unwrap();
            let areas: Vec<f64> = radii
                .iter()
                .zip(&desc.values)
                .map(|(a, v)| v * std::f64::consts::PI * a * a)
                .collect();
            for w in areas.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-12, "areas {w:?} not monotone");
            }
        }
    }
}
