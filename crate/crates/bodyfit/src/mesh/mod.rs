//! Triangle meshes and the intrinsic geometry used by the rest of the
//! pipeline: one-ring adjacency, area-weighted normals, uniform Laplace
//! offsets, geodesic distance fields, geodesic disk-area descriptors and
//! farthest-point sampling.
//!
//! Scan frames may be incomplete: vertices carry a validity flag, and
//! invalid vertices (hole interiors) are excluded from data terms but keep
//! their slots so indices stay stable across a sequence.

mod descriptor;
mod geodesic;
pub mod primitives;

pub use descriptor::{geodesic_disk_descriptor, DiskDescriptor, DESCRIPTOR_RADII};
pub use geodesic::{
    average_geodesic_distance, farthest_point_fields, farthest_point_sampling,
    geodesic_distances, geodesic_distances_truncated,
};

use crate::error::{Error, Result};
use nalgebra::{Point3, Vector3};
use std::sync::Arc;

/// Face list and derived adjacency, shared between meshes with identical
/// connectivity (frames of a registered sequence, deformed templates).
#[derive(Debug)]
pub struct Connectivity {
    faces: Vec<[u32; 3]>,
    /// Sorted one-ring vertex neighbors per vertex.
    neighbors: Vec<Vec<u32>>,
    /// Incident face indices per vertex.
    vertex_faces: Vec<Vec<u32>>,
    vertex_count: usize,
}

impl Connectivity {
    /// Number of vertices this connectivity was built for.
    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    fn build(vertex_count: usize, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertex_count > u32::MAX as usize {
            return Err(Error::InvalidMesh("vertex count exceeds u32 range".into()));
        }
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= vertex_count {
                    return Err(Error::InvalidMesh(format!(
                        "face {fi} references vertex {v}, but the mesh has {vertex_count} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::InvalidMesh(format!(
                    "face {fi} ({}, {}, {}) has repeated vertices",
                    f[0], f[1], f[2]
                )));
            }
        }
        let mut neighbors = vec![Vec::new(); vertex_count];
        let mut vertex_faces = vec![Vec::new(); vertex_count];
        for (fi, f) in faces.iter().enumerate() {
            for i in 0..3 {
                let v = f[i] as usize;
                vertex_faces[v].push(fi as u32);
                for j in 0..3 {
                    if i != j {
                        neighbors[v].push(f[j]);
                    }
                }
            }
        }
        for n in &mut neighbors {
            n.sort_unstable();
            n.dedup();
        }
        Ok(Connectivity { faces, neighbors, vertex_faces, vertex_count })
    }
}

/// A triangle mesh with per-vertex validity flags.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    connectivity: Arc<Connectivity>,
    vertices: Vec<Point3<f64>>,
    valid: Vec<bool>,
}

impl TriangleMesh {
    /// Builds a mesh with all vertices valid.
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let valid = vec![true; vertices.len()];
        Self::with_validity(vertices, faces, valid)
    }

    /// Builds a mesh with explicit validity flags.
    pub fn with_validity(
        vertices: Vec<Point3<f64>>,
        faces: Vec<[u32; 3]>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        if valid.len() != vertices.len() {
            return Err(Error::DimensionMismatch {
                expected: vertices.len(),
                got: valid.len(),
                context: "validity flags vs vertices",
            });
        }
        for p in &vertices {
            if !p.coords.iter().all(|c| c.is_finite()) {
                return Err(Error::InvalidMesh("non-finite vertex coordinate".into()));
            }
        }
        let connectivity = Arc::new(Connectivity::build(vertices.len(), faces)?);
        Ok(TriangleMesh { connectivity, vertices, valid })
    }

    /// A mesh with the same connectivity but new vertex positions.
    ///
    /// Validity flags carry over. This is how deformed copies of a template
    /// are made; the face list is shared, not cloned.
    pub fn with_positions(&self, vertices: Vec<Point3<f64>>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch {
                expected: self.vertices.len(),
                got: vertices.len(),
                context: "replacement positions vs vertices",
            });
        }
        Ok(TriangleMesh {
            connectivity: Arc::clone(&self.connectivity),
            vertices,
            valid: self.valid.clone(),
        })
    }

    /// Number of vertices (valid or not).
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    /// Number of valid vertices.
    pub fn valid_vertex_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Vertex positions.
    pub fn positions(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    /// Position of one vertex.
    #[inline]
    pub fn position(&self, v: u32) -> Point3<f64> {
        self.vertices[v as usize]
    }

    /// Face list.
    pub fn faces(&self) -> &[[u32; 3]] {
        &self.connectivity.faces
    }

    /// Validity flags.
    pub fn validity(&self) -> &[bool] {
        &self.valid
    }

    /// Whether vertex `v` is valid (usable as a data target).
    #[inline]
    pub fn is_valid(&self, v: u32) -> bool {
        self.valid[v as usize]
    }

    /// Marks a vertex invalid.
    pub fn invalidate(&mut self, v: u32) {
        self.valid[v as usize] = false;
    }

    /// Sorted one-ring neighbors of `v`.
    #[inline]
    pub fn neighbors(&self, v: u32) -> &[u32] {
        &self.connectivity.neighbors[v as usize]
    }

    /// Indices of faces incident to `v`.
    #[inline]
    pub fn vertex_faces(&self, v: u32) -> &[u32] {
        &self.connectivity.vertex_faces[v as usize]
    }

    /// True when the two meshes share one connectivity object.
    pub fn shares_connectivity(&self, other: &TriangleMesh) -> bool {
        Arc::ptr_eq(&self.connectivity, &other.connectivity)
    }

    /// Area-weighted vertex normals, normalized to unit length.
    ///
    /// Invalid vertices get a zero vector. A valid vertex with no incident
    /// faces is an error, as is a one-ring whose total area vanishes.
    pub fn vertex_normals(&self) -> Result<Vec<Vector3<f64>>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for (v, n) in normals.iter_mut().enumerate() {
            if !self.valid[v] {
                continue;
            }
            let faces = &self.connectivity.vertex_faces[v];
            if faces.is_empty() {
                return Err(Error::IsolatedVertex { vertex: v });
            }
            let mut sum = Vector3::zeros();
            for &fi in faces {
                let [a, b, c] = self.connectivity.faces[fi as usize];
                let pa = self.vertices[a as usize];
                let e1 = self.vertices[b as usize] - pa;
                let e2 = self.vertices[c as usize] - pa;
                // Cross product length is twice the face area, so summing
                // unnormalized face normals is the area weighting.
                sum += e1.cross(&e2);
            }
            let len = sum.norm();
            if len <= f64::MIN_POSITIVE {
                return Err(Error::DegenerateGeometry(format!(
                    "vertex {v} has a zero-area one-ring"
                )));
            }
            *n = sum / len;
        }
        Ok(normals)
    }

    /// Uniform Laplace offsets: the one-ring centroid minus the vertex,
    /// `offset(v) = mean(neighbors of v) - v`.
    ///
    /// The sign is fixed so that `v = mean(neighbors) - offset` holds with
    /// `offset` replaced by its local-frame reconstruction; see
    /// [`crate::shape`].
    pub fn laplace_offsets(&self) -> Result<Vec<Vector3<f64>>> {
        let mut offsets = vec![Vector3::zeros(); self.vertices.len()];
        for (v, out) in offsets.iter_mut().enumerate() {
            if !self.valid[v] {
                continue;
            }
            let nbrs = &self.connectivity.neighbors[v];
            if nbrs.is_empty() {
                return Err(Error::IsolatedVertex { vertex: v });
            }
            let mut mean = Vector3::zeros();
            for &k in nbrs {
                mean += self.vertices[k as usize].coords;
            }
            mean /= nbrs.len() as f64;
            *out = mean - self.vertices[v].coords;
        }
        Ok(offsets)
    }

    /// Mean length over the unique edges of the mesh.
    pub fn average_edge_length(&self) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for (v, nbrs) in self.connectivity.neighbors.iter().enumerate() {
            for &k in nbrs {
                if (k as usize) > v {
                    total += (self.vertices[k as usize] - self.vertices[v]).norm();
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::DegenerateGeometry("mesh has no edges".into()));
        }
        Ok(total / count as f64)
    }

    /// Approximate bounding ball over the valid vertices: a two-pass scheme
    /// that picks a diametral pair, then grows the ball to cover stragglers.
    ///
    /// Returns `(center, radius)`.
    pub fn bounding_ball(&self) -> Result<(Point3<f64>, f64)> {
        let pts: Vec<&Point3<f64>> = self
            .vertices
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .map(|(p, _)| p)
            .collect();
        let first = *pts.first().ok_or_else(|| {
            Error::DegenerateGeometry("bounding ball of a mesh with no valid vertices".into())
        })?;
        let far = |from: &Point3<f64>| {
            let mut best = from;
            let mut best_d = -1.0;
            for &p in &pts {
                let d = (p - from).norm_squared();
                if d > best_d {
                    best_d = d;
                    best = p;
                }
            }
            *best
        };
        let a = far(first);
        let b = far(&a);
        let mut center = nalgebra::center(&a, &b);
        let mut radius = (b - a).norm() / 2.0;
        for &p in &pts {
            let d = (p - center).norm();
            if d > radius {
                // Extend the ball minimally to include p.
                let new_radius = (radius + d) / 2.0;
                center += (p - center) * ((d - radius) / (2.0 * d));
                radius = new_radius;
            }
        }
        Ok((center, radius))
    }

    /// Total surface area.
    pub fn surface_area(&self) -> f64 {
        self.connectivity
            .faces
            .iter()
            .map(|&[a, b, c]| {
                let pa = self.vertices[a as usize];
                let e1 = self.vertices[b as usize] - pa;
                let e2 = self.vertices[c as usize] - pa;
                e1.cross(&e2).norm() / 2.0
            })
            .sum::<f64>()
    }
}
