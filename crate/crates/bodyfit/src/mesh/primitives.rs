//! Analytic test geometry: grids, spheres, cylinders.
//!
//! These shapes have known normals, geodesics and cross-sections, which the
//! test suites compare against closed-form values. All of them produce
//! consistently outward-oriented (or `+z` for planes) windings.

use super::TriangleMesh;
use nalgebra::Point3;
use std::collections::HashMap;

/// Rectangular grid in the `z = 0` plane, `nx` by `ny` vertices spanning
/// `width` by `height`, triangulated with faces counter-clockwise seen
/// from `+z`. Vertices are row-major with `x` fastest.
pub fn planar_grid(nx: usize, ny: usize, width: f64, height: f64) -> TriangleMesh {
    assert!(nx >= 2 && ny >= 2);
    let mut vertices = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            vertices.push(Point3::new(
                width * i as f64 / (nx - 1) as f64,
                height * j as f64 / (ny - 1) as f64,
                0.0,
            ));
        }
    }
    let v = |i: usize, j: usize| (j * nx + i) as u32;
    let mut faces = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            faces.push([v(i, j), v(i + 1, j), v(i + 1, j + 1)]);
            faces.push([v(i, j), v(i + 1, j + 1), v(i, j + 1)]);
        }
    }
    TriangleMesh::new(vertices, faces).expect("grid construction is valid")
}

/// Near-equilateral triangulation of a planar region: `n` by `n` vertices
/// with alternate rows offset by half a step. Better isotropy than
/// [`planar_grid`], used for geodesic accuracy tests.
pub fn hex_grid(n: usize, spacing: f64) -> TriangleMesh {
    hex_grid_rect(n, n, spacing)
}

/// Rectangular variant of [`hex_grid`]: `nx` columns by `ny` rows.
pub fn hex_grid_rect(nx: usize, ny: usize, spacing: f64) -> TriangleMesh {
    assert!(nx >= 2 && ny >= 2);
    let row_height = spacing * 3f64.sqrt() / 2.0;
    let mut vertices = Vec::with_capacity(nx * ny);
    for i in 0..ny {
        let offset = if i % 2 == 1 { 0.5 * spacing } else { 0.0 };
        for j in 0..nx {
            vertices.push(Point3::new(j as f64 * spacing + offset, i as f64 * row_height, 0.0));
        }
    }
    let v = |i: usize, j: usize| (i * nx + j) as u32;
    let mut faces = Vec::new();
    for i in 0..ny - 1 {
        for j in 0..nx - 1 {
            if i % 2 == 0 {
                faces.push([v(i, j), v(i, j + 1), v(i + 1, j)]);
                faces.push([v(i, j + 1), v(i + 1, j + 1), v(i + 1, j)]);
            } else {
                faces.push([v(i, j), v(i, j + 1), v(i + 1, j + 1)]);
                faces.push([v(i, j), v(i + 1, j + 1), v(i + 1, j)]);
            }
        }
    }
    TriangleMesh::new(vertices, faces).expect("grid construction is valid")
}

/// Sphere of given `radius` centered at the origin, built by subdividing an
/// icosahedron `subdivisions` times. Faces are nearly equilateral, which
/// keeps fast marching accurate.
pub fn icosphere(subdivisions: usize, radius: f64) -> TriangleMesh {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut vertices: Vec<Point3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Point3::from(nalgebra::Vector3::new(x, y, z).normalize()))
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut new_faces = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mab = midpoint(&mut vertices, &mut midpoints, a, b);
            let mbc = midpoint(&mut vertices, &mut midpoints, b, c);
            let mca = midpoint(&mut vertices, &mut midpoints, c, a);
            new_faces.push([a, mab, mca]);
            new_faces.push([b, mbc, mab]);
            new_faces.push([c, mca, mbc]);
            new_faces.push([mab, mbc, mca]);
        }
        faces = new_faces;
    }
    let vertices = vertices
        .into_iter()
        .map(|p| Point3::from(p.coords * radius))
        .collect();
    TriangleMesh::new(vertices, faces).expect("icosphere construction is valid")
}

fn midpoint(
    vertices: &mut Vec<Point3<f64>>,
    cache: &mut HashMap<(u32, u32), u32>,
    a: u32,
    b: u32,
) -> u32 {
    let key = (a.min(b), a.max(b));
    if let Some(&m) = cache.get(&key) {
        return m;
    }
    let p = nalgebra::center(&vertices[a as usize], &vertices[b as usize]);
    let m = vertices.len() as u32;
    vertices.push(Point3::from(p.coords.normalize()));
    cache.insert(key, m);
    m
}

/// Surface of a regular tetrahedron with unit circumradius, midpoint
/// subdivided `subdivisions` times (faces stay flat; only the four corners
/// carry curvature).
pub fn tetrahedron(subdivisions: usize) -> TriangleMesh {
    let s = 1.0 / 3f64.sqrt();
    let mut vertices = vec![
        Point3::new(s, s, s),
        Point3::new(s, -s, -s),
        Point3::new(-s, s, -s),
        Point3::new(-s, -s, s),
    ];
    let mut faces: Vec<[u32; 3]> = vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
    for _ in 0..subdivisions {
        let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let mut flat_mid = |a: u32, b: u32, vertices: &mut Vec<Point3<f64>>| {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    let m = nalgebra::center(&vertices[a as usize], &vertices[b as usize]);
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                })
            };
            let mab = flat_mid(a, b, &mut vertices);
            let mbc = flat_mid(b, c, &mut vertices);
            let mca = flat_mid(c, a, &mut vertices);
            next.push([a, mab, mca]);
            next.push([b, mbc, mab]);
            next.push([c, mca, mbc]);
            next.push([mab, mbc, mca]);
        }
        faces = next;
    }
    TriangleMesh::new(vertices, faces).expect("tetrahedron construction is valid")
}

/// Closed cylinder of given `radius` and `height` along `+z`, base at
/// `z = 0`, with `segments` points per ring and `rings + 1` rings.
pub fn cylinder(radius: f64, height: f64, segments: usize, rings: usize) -> TriangleMesh {
    assert!(segments >= 3 && rings >= 1);
    let mut vertices = Vec::new();
    for r in 0..=rings {
        let z = height * r as f64 / rings as f64;
        for s in 0..segments {
            let a = std::f64::consts::TAU * s as f64 / segments as f64;
            vertices.push(Point3::new(radius * a.cos(), radius * a.sin(), z));
        }
    }
    let v = |r: usize, s: usize| (r * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for r in 0..rings {
        for s in 0..segments {
            faces.push([v(r, s), v(r, s + 1), v(r + 1, s + 1)]);
            faces.push([v(r, s), v(r + 1, s + 1), v(r + 1, s)]);
        }
    }
    let bottom_center = vertices.len() as u32;
    vertices.push(Point3::new(0.0, 0.0, 0.0));
    let top_center = vertices.len() as u32;
    vertices.push(Point3::new(0.0, 0.0, height));
    for s in 0..segments {
        faces.push([bottom_center, v(0, s + 1), v(0, s)]);
        faces.push([top_center, v(rings, s), v(rings, s + 1)]);
    }
    TriangleMesh::new(vertices, faces).expect("cylinder construction is valid")
}
