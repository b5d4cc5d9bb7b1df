//! Unstructured triangle meshes with edge-based adjacency, point location,
//! and parametric generators for the annulus and rectangle domains.
//!
//! A mesh is immutable once built; solvers share it behind an `Arc`. The
//! builder derives the unique edge list, element neighbor table and boundary
//! facets from the raw node/element arrays and rejects non-manifold or
//! inverted input.

use crate::geom::Vec2;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Sentinel for "no element across this facet".
pub const NO_NEIGHBOR: usize = usize::MAX;

/// Containment slack for point location; a point within this distance of a
/// facet (in barycentric units) counts as inside both incident elements and
/// the tie is broken toward the lower element index.
pub const CONTAINMENT_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh spec: {0}")]
    InvalidSpec(String),
    #[error("element {element} has non-positive signed area {area:.3e}")]
    NonPositiveArea { element: usize, area: f64 },
    #[error("non-manifold connectivity: facet ({0}, {1}) has more than two incident elements")]
    NonManifold(usize, usize),
    #[error("element {element} references node {node} out of range ({n_nodes} nodes)")]
    NodeOutOfRange {
        element: usize,
        node: usize,
        n_nodes: usize,
    },
    #[error("tagged facet ({0}, {1}) is not a boundary facet of the mesh")]
    TagOnInteriorFacet(usize, usize),
    #[error("unknown boundary tag '{0}'")]
    UnknownTag(String),
}

/// Symbolic label for a group of boundary facets (wall, inflow, interface, ...).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryTag {
    pub name: String,
    pub id: u32,
}

/// One boundary facet: an oriented node pair, its owning element and a tag.
#[derive(Clone, Copy, Debug)]
pub struct BoundaryFacet {
    /// Node pair in the owning element's counter-clockwise order, so the
    /// outward normal is the clockwise perpendicular of (b - a).
    pub nodes: [usize; 2],
    pub element: usize,
    pub tag: u32,
}

impl BoundaryFacet {
    pub fn length(&self, mesh: &SimplexMesh) -> f64 {
        mesh.node_coords[self.nodes[0]].dist(mesh.node_coords[self.nodes[1]])
    }

    pub fn midpoint(&self, mesh: &SimplexMesh) -> Vec2 {
        (mesh.node_coords[self.nodes[0]] + mesh.node_coords[self.nodes[1]]) * 0.5
    }

    /// Unit normal pointing out of the domain.
    pub fn outward_normal(&self, mesh: &SimplexMesh) -> Vec2 {
        let t = mesh.node_coords[self.nodes[1]] - mesh.node_coords[self.nodes[0]];
        // With counter-clockwise elements the domain lies to the left of the
        // facet direction, so the outward normal is the right-hand perpendicular.
        Vec2::new(t.y, -t.x).normalized()
    }
}

/// Unstructured triangle mesh with derived edge/adjacency structure.
#[derive(Clone, Debug)]
pub struct SimplexMesh {
    pub node_coords: Vec<Vec2>,
    pub elements: Vec<[usize; 3]>,
    /// Unique unordered node pairs, each exactly once.
    pub edges: Vec<[usize; 2]>,
    /// `element_neighbors[e][k]` is the element across the facet opposite
    /// local vertex `k` of element `e`, or [`NO_NEIGHBOR`].
    pub element_neighbors: Vec<[usize; 3]>,
    pub boundary_facets: Vec<BoundaryFacet>,
    pub tags: Vec<BoundaryTag>,
    element_area: Vec<f64>,
    /// Constant shape-function gradients per element, one 2-vector per vertex.
    shape_grad: Vec<[Vec2; 3]>,
    /// Minimum incident edge length per node.
    node_h: Vec<f64>,
    /// Lumped nodal area: one third of the incident element areas.
    lumped_area: Vec<f64>,
}

impl SimplexMesh {
    pub fn n_nodes(&self) -> usize {
        self.node_coords.len()
    }

    pub fn n_elements(&self) -> usize {
        self.elements.len()
    }

    pub fn element_area(&self, e: usize) -> f64 {
        self.element_area[e]
    }

    pub fn total_area(&self) -> f64 {
        self.element_area.iter().sum()
    }

    pub fn shape_gradients(&self, e: usize) -> &[Vec2; 3] {
        &self.shape_grad[e]
    }

    /// Minimum incident edge length of a node.
    pub fn node_h(&self, node: usize) -> f64 {
        self.node_h[node]
    }

    /// One third of the incident element areas (the lumped P1 mass entry
    /// before any density factor).
    pub fn lumped_area(&self, node: usize) -> f64 {
        self.lumped_area[node]
    }

    pub fn min_edge_length(&self) -> f64 {
        self.node_h.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn tag_id(&self, name: &str) -> Result<u32, MeshError> {
        self.tags
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.id)
            .ok_or_else(|| MeshError::UnknownTag(name.to_string()))
    }

    pub fn element_barycenter(&self, e: usize) -> Vec2 {
        let [a, b, c] = self.elements[e];
        (self.node_coords[a] + self.node_coords[b] + self.node_coords[c]) / 3.0
    }

    /// Barycentric weights of `point` with respect to element `e`.
    ///
    /// The weights sum to one up to round-off for any point; all weights are
    /// in [0, 1] exactly when the point lies inside the element.
    pub fn shape_functions(&self, e: usize, point: Vec2) -> [f64; 3] {
        let [a, b, c] = self.elements[e];
        let pa = self.node_coords[a];
        let pb = self.node_coords[b];
        let pc = self.node_coords[c];
        let inv_2a = 1.0 / (2.0 * self.element_area[e]);
        [
            (pb - point).cross(pc - point) * inv_2a,
            (pc - point).cross(pa - point) * inv_2a,
            (pa - point).cross(pb - point) * inv_2a,
        ]
    }

    /// Interpolate a nodal scalar field at barycentric weights in element `e`.
    pub fn interpolate_scalar(&self, e: usize, w: &[f64; 3], field: &[f64]) -> f64 {
        let [a, b, c] = self.elements[e];
        w[0] * field[a] + w[1] * field[b] + w[2] * field[c]
    }

    pub fn interpolate_vec2(&self, e: usize, w: &[f64; 3], field: &[Vec2]) -> Vec2 {
        let [a, b, c] = self.elements[e];
        field[a] * w[0] + field[b] * w[1] + field[c] * w[2]
    }

    fn contains_with_eps(&self, e: usize, point: Vec2) -> Option<[f64; 3]> {
        let w = self.shape_functions(e, point);
        if w.iter().all(|&wi| wi >= -CONTAINMENT_EPS) {
            Some(w)
        } else {
            None
        }
    }

    /// Exhaustive containment scan in ascending element order.
    pub fn locate_brute(&self, point: Vec2) -> Option<usize> {
        (0..self.n_elements()).find(|&e| self.contains_with_eps(e, point).is_some())
    }

    /// Find the element containing `point`, walking neighbor-to-neighbor from
    /// `start_element` across the facet with the most negative barycentric
    /// weight. Falls back to an exhaustive scan if the walk leaves the mesh
    /// through a boundary or cycles. Ties on shared facets resolve to the
    /// lowest incident element index.
    pub fn locate_point(&self, start_element: usize, point: Vec2) -> Option<usize> {
        assert!(start_element < self.n_elements(), "invalid start element");
        let mut current = start_element;
        let max_steps = 2 * self.n_elements() + 8;
        for _ in 0..max_steps {
            let w = self.shape_functions(current, point);
            let (k_min, w_min) = w
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(k, &v)| (k, v))
                .unwrap();
            if w_min >= -CONTAINMENT_EPS {
                return Some(self.tie_break(current, point, &w));
            }
            let next = self.element_neighbors[current][k_min];
            if next == NO_NEIGHBOR {
                // Left the mesh through a boundary facet; the point may still
                // be inside (non-convex walk path), so scan.
                return self.locate_brute(point);
            }
            current = next;
        }
        self.locate_brute(point)
    }

    /// On a shared facet the point is contained by both incident elements;
    /// return the lowest index among candidates so claims are deterministic.
    fn tie_break(&self, element: usize, point: Vec2, w: &[f64; 3]) -> usize {
        let mut best = element;
        for (k, &wk) in w.iter().enumerate() {
            if wk.abs() <= CONTAINMENT_EPS {
                let nb = self.element_neighbors[element][k];
                if nb != NO_NEIGHBOR && nb < best && self.contains_with_eps(nb, point).is_some() {
                    best = nb;
                }
            }
        }
        best
    }

    pub fn facets_with_tag(&self, tag: u32) -> impl Iterator<Item = (usize, &BoundaryFacet)> {
        self.boundary_facets
            .iter()
            .enumerate()
            .filter(move |(_, f)| f.tag == tag)
    }
}

/// Raw nodes/elements plus explicit facet tags, finalized into a [`SimplexMesh`]
/// by deriving edges, neighbors and boundary facets.
pub struct MeshBuilder {
    pub nodes: Vec<Vec2>,
    pub elements: Vec<[usize; 3]>,
    pub tags: Vec<BoundaryTag>,
    /// Explicit (node pair, tag id) assignments; untagged boundary facets get
    /// the default tag 0.
    pub facet_tags: Vec<([usize; 2], u32)>,
}

impl MeshBuilder {
    pub fn new(nodes: Vec<Vec2>, elements: Vec<[usize; 3]>) -> Self {
        Self {
            nodes,
            elements,
            tags: vec![BoundaryTag {
                name: "boundary".to_string(),
                id: 0,
            }],
            facet_tags: Vec::new(),
        }
    }

    pub fn with_tag(mut self, name: &str, id: u32) -> Self {
        self.tags.push(BoundaryTag {
            name: name.to_string(),
            id,
        });
        self
    }

    pub fn tag_facet(&mut self, a: usize, b: usize, tag: u32) {
        self.facet_tags.push(([a, b], tag));
    }

    /// Derive edges, element neighbors and boundary facets.
    pub fn build(self) -> Result<SimplexMesh, MeshError> {
        let n_nodes = self.nodes.len();
        for (e, tri) in self.elements.iter().enumerate() {
            for &n in tri {
                if n >= n_nodes {
                    return Err(MeshError::NodeOutOfRange {
                        element: e,
                        node: n,
                        n_nodes,
                    });
                }
            }
        }

        let mut element_area = Vec::with_capacity(self.elements.len());
        let mut shape_grad = Vec::with_capacity(self.elements.len());
        for (e, &[a, b, c]) in self.elements.iter().enumerate() {
            let pa = self.nodes[a];
            let pb = self.nodes[b];
            let pc = self.nodes[c];
            let twice_area = (pb - pa).cross(pc - pa);
            if twice_area <= 0.0 {
                return Err(MeshError::NonPositiveArea {
                    element: e,
                    area: 0.5 * twice_area,
                });
            }
            let area = 0.5 * twice_area;
            element_area.push(area);
            // grad N_k = perp of opposite facet / (2A), oriented inward.
            let g = |p: Vec2, q: Vec2| -> Vec2 {
                // facet from p to q, opposite vertex k
                Vec2::new(p.y - q.y, q.x - p.x) / (2.0 * area)
            };
            shape_grad.push([g(pb, pc), g(pc, pa), g(pa, pb)]);
        }

        // Facet incidence map: sorted node pair -> (element, local facet) list.
        // BTreeMap keeps edge numbering deterministic.
        let mut incidence: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (e, &[a, b, c]) in self.elements.iter().enumerate() {
            // local facet k is opposite local vertex k
            let facets = [[b, c], [c, a], [a, b]];
            for (k, f) in facets.iter().enumerate() {
                let key = (f[0].min(f[1]), f[0].max(f[1]));
                incidence.entry(key).or_default().push((e, k));
            }
        }

        let mut edges = Vec::with_capacity(incidence.len());
        let mut element_neighbors = vec![[NO_NEIGHBOR; 3]; self.elements.len()];
        let mut boundary = Vec::new();
        for (&(a, b), inc) in &incidence {
            edges.push([a, b]);
            match inc.as_slice() {
                [(e, k)] => {
                    // Boundary facet, recover the element's ccw orientation.
                    let tri = self.elements[*e];
                    let oriented = match k {
                        0 => [tri[1], tri[2]],
                        1 => [tri[2], tri[0]],
                        _ => [tri[0], tri[1]],
                    };
                    boundary.push(BoundaryFacet {
                        nodes: oriented,
                        element: *e,
                        tag: 0,
                    });
                }
                [(e1, k1), (e2, k2)] => {
                    element_neighbors[*e1][*k1] = *e2;
                    element_neighbors[*e2][*k2] = *e1;
                }
                _ => return Err(MeshError::NonManifold(a, b)),
            }
        }

        // Apply explicit tags.
        let mut tag_lookup: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for ([a, b], t) in &self.facet_tags {
            tag_lookup.insert((*a.min(b), *a.max(b)), *t);
        }
        let mut assigned = 0usize;
        for f in &mut boundary {
            let key = (f.nodes[0].min(f.nodes[1]), f.nodes[0].max(f.nodes[1]));
            if let Some(&t) = tag_lookup.get(&key) {
                f.tag = t;
                assigned += 1;
            }
        }
        if assigned != tag_lookup.len() {
            // Some requested tag did not land on a boundary facet.
            for (&(a, b), _) in &tag_lookup {
                let found = boundary
                    .iter()
                    .any(|f| (f.nodes[0].min(f.nodes[1]), f.nodes[0].max(f.nodes[1])) == (a, b));
                if !found {
                    return Err(MeshError::TagOnInteriorFacet(a, b));
                }
            }
        }

        let mut node_h = vec![f64::INFINITY; n_nodes];
        for &[a, b] in &edges {
            let len = self.nodes[a].dist(self.nodes[b]);
            node_h[a] = node_h[a].min(len);
            node_h[b] = node_h[b].min(len);
        }

        let mut lumped_area = vec![0.0; n_nodes];
        for (e, tri) in self.elements.iter().enumerate() {
            for &n in tri {
                lumped_area[n] += element_area[e] / 3.0;
            }
        }

        Ok(SimplexMesh {
            node_coords: self.nodes,
            elements: self.elements,
            edges,
            element_neighbors,
            boundary_facets: boundary,
            tags: self.tags,
            element_area,
            shape_grad,
            node_h,
            lumped_area,
        })
    }
}

/// Parametric spec for a structured polar annulus mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnulusSpec {
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub n_radial: usize,
    pub n_azimuthal: usize,
    pub inner_tag: String,
    pub outer_tag: String,
}

impl AnnulusSpec {
    pub fn new(inner_radius: f64, outer_radius: f64, n_radial: usize, n_azimuthal: usize) -> Self {
        Self {
            inner_radius,
            outer_radius,
            n_radial,
            n_azimuthal,
            inner_tag: "inner".to_string(),
            outer_tag: "outer".to_string(),
        }
    }

    fn validate(&self) -> Result<(), MeshError> {
        let mut problems = Vec::new();
        if !(self.inner_radius > 0.0) {
            problems.push(format!("inner_radius must be > 0, got {}", self.inner_radius));
        }
        if !(self.outer_radius > self.inner_radius) {
            problems.push(format!(
                "outer_radius must exceed inner_radius, got {} <= {}",
                self.outer_radius, self.inner_radius
            ));
        }
        if self.n_radial < 1 {
            problems.push("n_radial must be >= 1".to_string());
        }
        if self.n_azimuthal < 3 {
            problems.push(format!("n_azimuthal must be >= 3, got {}", self.n_azimuthal));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(MeshError::InvalidSpec(problems.join("; ")))
        }
    }
}

/// Structured triangulation of an annulus: `n_azimuthal * (n_radial + 1)`
/// nodes and `2 * n_azimuthal * n_radial` triangles. Inner/outer circle
/// facets carry tag ids 1 and 2 with the spec's names.
pub fn generate_annulus(spec: &AnnulusSpec) -> Result<SimplexMesh, MeshError> {
    spec.validate()?;
    let naz = spec.n_azimuthal;
    let nr = spec.n_radial;
    let dr = (spec.outer_radius - spec.inner_radius) / nr as f64;
    let dth = 2.0 * PI / naz as f64;

    let mut nodes = Vec::with_capacity(naz * (nr + 1));
    for ring in 0..=nr {
        let r = spec.inner_radius + ring as f64 * dr;
        for j in 0..naz {
            let th = j as f64 * dth;
            nodes.push(Vec2::new(r * th.cos(), r * th.sin()));
        }
    }

    let idx = |ring: usize, j: usize| ring * naz + (j % naz);
    let mut elements = Vec::with_capacity(2 * naz * nr);
    for ring in 0..nr {
        for j in 0..naz {
            let a = idx(ring, j);
            let b = idx(ring, j + 1);
            let c = idx(ring + 1, j + 1);
            let d = idx(ring + 1, j);
            // Quad (a, d, c, b) is counter-clockwise in the plane.
            elements.push([a, d, c]);
            elements.push([a, c, b]);
        }
    }

    let mut builder = MeshBuilder::new(nodes, elements)
        .with_tag(&spec.inner_tag, 1)
        .with_tag(&spec.outer_tag, 2);
    for j in 0..naz {
        builder.tag_facet(idx(0, j), idx(0, j + 1), 1);
        builder.tag_facet(idx(nr, j), idx(nr, j + 1), 2);
    }
    builder.build()
}

/// Axis-aligned rectangle triangulated on a structured grid; sides tagged
/// south=1, east=2, north=3, west=4. Used by verification problems that need
/// inflow/outflow boundaries.
pub fn generate_rectangle(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    nx: usize,
    ny: usize,
) -> Result<SimplexMesh, MeshError> {
    if !(x1 > x0 && y1 > y0) || nx < 1 || ny < 1 {
        return Err(MeshError::InvalidSpec(format!(
            "degenerate rectangle: [{x0},{x1}]x[{y0},{y1}] with {nx}x{ny} cells"
        )));
    }
    let dx = (x1 - x0) / nx as f64;
    let dy = (y1 - y0) / ny as f64;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            nodes.push(Vec2::new(x0 + i as f64 * dx, y0 + j as f64 * dy));
        }
    }
    let idx = |i: usize, j: usize| j * (nx + 1) + i;
    let mut elements = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let v0 = idx(i, j);
            let v1 = idx(i + 1, j);
            let v2 = idx(i + 1, j + 1);
            let v3 = idx(i, j + 1);
            elements.push([v0, v1, v2]);
            elements.push([v0, v2, v3]);
        }
    }
    let mut builder = MeshBuilder::new(nodes, elements)
        .with_tag("south", 1)
        .with_tag("east", 2)
        .with_tag("north", 3)
        .with_tag("west", 4);
    for i in 0..nx {
        builder.tag_facet(idx(i, 0), idx(i + 1, 0), 1);
        builder.tag_facet(idx(i, ny), idx(i + 1, ny), 3);
    }
    for j in 0..ny {
        builder.tag_facet(idx(nx, j), idx(nx, j + 1), 2);
        builder.tag_facet(idx(0, j), idx(0, j + 1), 4);
    }
    builder.build()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn single_triangle() -> SimplexMesh {
        MeshBuilder::new(
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
            vec![[0, 1, 2]],
        )
        .build()
        .unwrap()
    }

    fn two_triangles() -> SimplexMesh {
        MeshBuilder::new(
            vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(1.0, 1.0),
                Vec2::new(0.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .build()
        .unwrap()
    }

    #[test]
    fn single_triangle_structure() {
        let m = single_triangle();
        assert_eq!(m.edges.len(), 3);
        assert_eq!(m.boundary_facets.len(), 3);
        assert_eq!(m.element_neighbors[0], [NO_NEIGHBOR; 3]);
    }

    #[test]
    fn two_triangles_structure() {
        let m = two_triangles();
        assert_eq!(m.edges.len(), 5);
        assert_eq!(m.boundary_facets.len(), 4);
        // Mutual neighbors across the shared diagonal.
        assert!(m.element_neighbors[0].contains(&1));
        assert!(m.element_neighbors[1].contains(&0));
    }

    #[test]
    fn neighbor_symmetry_holds() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 3, 16)).unwrap();
        for e in 0..m.n_elements() {
            for &nb in &m.element_neighbors[e] {
                if nb != NO_NEIGHBOR {
                    assert!(m.element_neighbors[nb].contains(&e));
                }
            }
        }
    }

    #[test]
    fn three_triangles_sharing_edge_is_non_manifold() {
        let err = MeshBuilder::new(
            vec![
                Vec2::new(0.0, 0.0),
                Vec2::new(1.0, 0.0),
                Vec2::new(0.5, 1.0),
                Vec2::new(0.5, -1.0),
                Vec2::new(2.0, 0.5),
            ],
            vec![[0, 1, 2], [1, 0, 3], [0, 1, 4]],
        )
        .build()
        .unwrap_err();
        assert!(matches!(err, MeshError::NonManifold(0, 1)));
    }

    #[test]
    fn inverted_element_rejected() {
        let err = MeshBuilder::new(
            vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 1.0)],
            vec![[0, 2, 1]],
        )
        .build()
        .unwrap_err();
        assert!(matches!(err, MeshError::NonPositiveArea { .. }));
    }

    #[test]
    fn annulus_counts_match_construction_formula() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 2, 8)).unwrap();
        assert_eq!(m.n_nodes(), 24);
        assert_eq!(m.n_elements(), 32);
        assert_eq!(m.facets_with_tag(1).count(), 8);
        assert_eq!(m.facets_with_tag(2).count(), 8);
    }

    #[test]
    fn degenerate_annulus_spec_rejected() {
        assert!(generate_annulus(&AnnulusSpec::new(2.0, 2.1, 2, 2)).is_err());
        assert!(generate_annulus(&AnnulusSpec::new(2.1, 2.0, 2, 8)).is_err());
        assert!(generate_annulus(&AnnulusSpec::new(-1.0, 2.0, 2, 8)).is_err());
    }

    #[test]
    fn annulus_area_converges_to_ring_area() {
        let spec = AnnulusSpec::new(2.0, 2.1, 2, 64);
        let m = generate_annulus(&spec).unwrap();
        let exact = PI * (2.1f64.powi(2) - 2.0f64.powi(2));
        let rel = (m.total_area() - exact).abs() / exact;
        assert!(rel < 0.005, "area error {rel} exceeds 0.5%");
    }

    #[test]
    fn shape_functions_at_barycenter_and_vertices() {
        let m = single_triangle();
        let w = m.shape_functions(0, m.element_barycenter(0));
        for wi in w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-14);
        }
        let wv = m.shape_functions(0, Vec2::new(0.0, 0.0));
        assert_eq!(wv[0], 1.0);
        assert_eq!(wv[1], 0.0);
        assert_eq!(wv[2], 0.0);
    }

    #[test]
    fn partition_of_unity_at_random_points() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 4, 32)).unwrap();
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..1000 {
            // Random point inside a random element, evaluated against that
            // element or one of its neighbors (the interpolation/walk pattern).
            let host = rng.gen_range(0..m.n_elements());
            let (mut wa, mut wb) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            if wa + wb > 1.0 {
                wa = 1.0 - wa;
                wb = 1.0 - wb;
            }
            let [a, b, c] = m.elements[host];
            let p = m.node_coords[a] * wa
                + m.node_coords[b] * wb
                + m.node_coords[c] * (1.0 - wa - wb);
            let candidates = [
                host,
                m.element_neighbors[host][rng.gen_range(0..3)],
                host,
            ];
            let e = candidates[rng.gen_range(0..3)];
            if e == NO_NEIGHBOR {
                continue;
            }
            let w = m.shape_functions(e, p);
            assert!((w[0] + w[1] + w[2] - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn locate_point_identity_case() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 2, 16)).unwrap();
        for e in 0..m.n_elements() {
            assert_eq!(m.locate_point(e, m.element_barycenter(e)), Some(e));
        }
    }

    #[test]
    fn locate_point_single_hop_to_neighbor() {
        let m = two_triangles();
        let target = m.element_barycenter(1);
        // Direct containment check confirms the expected host.
        assert!(m.contains_with_eps(1, target).is_some());
        assert!(m.contains_with_eps(0, target).is_none());
        assert_eq!(m.locate_point(0, target), Some(1));
    }

    #[test]
    fn locate_point_outside_mesh_is_none() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 2.1, 2, 16)).unwrap();
        assert_eq!(m.locate_point(0, Vec2::new(0.0, 0.0)), None);
        assert_eq!(m.locate_point(5, Vec2::new(5.0, 0.0)), None);
    }

    #[test]
    fn locate_matches_brute_force_on_random_points() {
        let m = generate_annulus(&AnnulusSpec::new(1.0, 2.0, 4, 24)).unwrap();
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..1000 {
            let r = rng.gen_range(0.8..2.2);
            let th = rng.gen_range(0.0..2.0 * PI);
            let p = Vec2::new(r * th.cos(), r * th.sin());
            let start = rng.gen_range(0..m.n_elements());
            let walked = m.locate_point(start, p);
            let brute = m.locate_brute(p);
            match (walked, brute) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    // Both must contain the point; tie-break picks the lowest.
                    assert!(m.contains_with_eps(a, p).is_some());
                    assert!(m.contains_with_eps(b, p).is_some());
                }
                other => panic!("walk/brute disagree on containment: {other:?} at {p:?}"),
            }
        }
    }

    #[test]
    fn boundary_normals_point_outward() {
        let m = generate_annulus(&AnnulusSpec::new(2.0, 3.0, 2, 16)).unwrap();
        for f in &m.boundary_facets {
            let n = f.outward_normal(&m);
            let mid = f.midpoint(&m);
            let radial = mid.normalized();
            if f.tag == 2 {
                assert!(n.dot(radial) > 0.9, "outer normal should be radial");
            } else {
                assert!(n.dot(radial) < -0.9, "inner normal should be anti-radial");
            }
        }
    }

    #[test]
    fn rectangle_tags_cover_sides() {
        let m = generate_rectangle(0.0, 0.0, 2.0, 1.0, 4, 2).unwrap();
        assert_eq!(m.n_nodes(), 15);
        assert_eq!(m.n_elements(), 16);
        assert_eq!(m.facets_with_tag(1).count(), 4);
        assert_eq!(m.facets_with_tag(2).count(), 2);
        assert_eq!(m.facets_with_tag(3).count(), 4);
        assert_eq!(m.facets_with_tag(4).count(), 2);
    }
}
