//! Structured triangulation of the unit disc with boundary electrodes.
//!
//! The disc is cut into `n_rings` concentric bands. Ring `i` carries
//! `c_i * L` equally spaced nodes, where `L` is the electrode count, and each
//! band is triangulated identically in each of the `L` angular sectors. The
//! whole mesh is therefore invariant under rotation by `2π/L`, and a rotation
//! by one electrode pitch maps nodes and triangles onto each other. The ring
//! node counts are chosen as close to `4i` as the symmetry allows while
//! keeping the node total at `2n(n+1)`. That pins the triangle count at `4n²`
//! (1024 for `n = 16`). When `L` divides 4 the construction is the classic
//! polar mesh with `4i` nodes on ring `i` and `4(2i-1)` triangles in band `i`.
//!
//! Ring radii are chosen so that each band's area is proportional to its
//! triangle count, so elements have near-equal area.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::Point2;

use crate::binio::{Reader, Writer};
use crate::error::{Result, TomoError};

pub type Point = Point2<f64>;

const MESH_MAGIC: &[u8; 4] = b"TMSH";
const MESH_VERSION: u32 = 1;

/// Parameters of [`build_disc_mesh`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MeshParams {
    pub n_rings: usize,
    pub n_electrodes: usize,
    /// Fraction of each electrode's angular pitch covered by metal.
    pub electrode_coverage: f64,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            n_rings: 16,
            n_electrodes: 32,
            electrode_coverage: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscMesh {
    nodes: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    /// Boundary edges oriented counter-clockwise, sorted by the polar angle of
    /// their midpoint in `[0, 2π)`.
    boundary_edges: Vec<[usize; 2]>,
    /// Per electrode, indices into `boundary_edges` in counter-clockwise order.
    electrode_arcs: Vec<Vec<usize>>,
}

/// Triangulated unit disc built from [`MeshParams`].
pub fn build_disc_mesh(params: &MeshParams) -> Result<DiscMesh> {
    let MeshParams {
        n_rings,
        n_electrodes,
        electrode_coverage,
    } = *params;
    if n_rings < 2 {
        return Err(TomoError::Config(format!("n_rings must be at least 2, got {n_rings}")));
    }
    if n_electrodes < 2 {
        return Err(TomoError::Config(format!(
            "n_electrodes must be at least 2, got {n_electrodes}"
        )));
    }
    if !(electrode_coverage > 0.0 && electrode_coverage < 1.0) {
        return Err(TomoError::Config(format!(
            "electrode_coverage must lie in (0, 1), got {electrode_coverage}"
        )));
    }
    let boundary_nodes = 4 * n_rings;
    if boundary_nodes % n_electrodes != 0 {
        return Err(TomoError::Config(format!(
            "boundary node count {boundary_nodes} is not divisible by electrode count {n_electrodes}"
        )));
    }
    let pitch = boundary_nodes / n_electrodes;
    let width_f = electrode_coverage * pitch as f64;
    let width = width_f.round() as usize;
    if (width_f - width as f64).abs() > 1e-9 || width == 0 || width >= pitch {
        return Err(TomoError::Config(format!(
            "coverage {electrode_coverage} of a {pitch}-edge electrode pitch is not a whole, \
             non-trivial number of boundary edges"
        )));
    }

    let multiples = ring_multiples(n_rings, n_electrodes)?;
    let sectors = n_electrodes;
    let ring_counts: Vec<usize> = multiples.iter().map(|c| c * sectors).collect();

    // Band triangle counts fix the equal-area radii.
    let band_tris: Vec<usize> = (0..n_rings)
        .map(|i| if i == 0 { ring_counts[0] } else { ring_counts[i - 1] + ring_counts[i] })
        .collect();
    let total_tris: usize = band_tris.iter().sum();
    let mut radii = Vec::with_capacity(n_rings);
    let mut cumulative = 0;
    for &t in &band_tris {
        cumulative += t;
        radii.push((cumulative as f64 / total_tris as f64).sqrt());
    }
    *radii.last_mut().unwrap() = 1.0;

    // Electrode 0 is centred on angle 0.
    let gap = (pitch - width) / 2;
    let theta0 = -2.0 * PI * (gap as f64 + width as f64 / 2.0) / boundary_nodes as f64;

    // Ring offsets alternate by half a node step, counted from the boundary.
    let ring_phase = |ring: usize| if (n_rings - 1 - ring) % 2 == 1 { 0.5 } else { 0.0 };

    let mut nodes = vec![Point::origin()];
    let mut ring_start = Vec::with_capacity(n_rings);
    for (ring, &count) in ring_counts.iter().enumerate() {
        ring_start.push(nodes.len());
        let phase = ring_phase(ring);
        for j in 0..count {
            let theta = theta0 + 2.0 * PI * (j as f64 + phase) / count as f64;
            nodes.push(Point::new(radii[ring] * theta.cos(), radii[ring] * theta.sin()));
        }
    }
    let ring_node = |ring: usize, j: usize| ring_start[ring] + j % ring_counts[ring];

    let mut triangles = Vec::with_capacity(total_tris);
    for s in 0..sectors {
        let c = multiples[0];
        for p in 0..c {
            let j = s * c + p;
            triangles.push([0, ring_node(0, j), ring_node(0, j + 1)]);
        }
    }
    for ring in 1..n_rings {
        let (a, b) = (multiples[ring - 1], multiples[ring]);
        let (phase_in, phase_out) = (ring_phase(ring - 1), ring_phase(ring));
        let pos_in = |p: usize| (p as f64 + phase_in) / a as f64;
        let pos_out = |q: usize| (q as f64 + phase_out) / b as f64;
        for s in 0..sectors {
            let (mut p, mut q) = (0, 0);
            while p < a || q < b {
                let inner = ring_node(ring - 1, s * a + p);
                let outer = ring_node(ring, s * b + q);
                let advance_outer = p == a || (q < b && pos_out(q + 1) <= pos_in(p + 1));
                if advance_outer {
                    triangles.push([inner, outer, ring_node(ring, s * b + q + 1)]);
                    q += 1;
                } else {
                    triangles.push([inner, outer, ring_node(ring - 1, s * a + p + 1)]);
                    p += 1;
                }
            }
        }
    }
    debug_assert_eq!(triangles.len(), 4 * n_rings * n_rings);

    let boundary_edges = canonical_boundary_edges(&nodes, &triangles)?;
    let index_of: HashMap<[usize; 2], usize> =
        boundary_edges.iter().enumerate().map(|(i, &e)| (e, i)).collect();
    let outer = n_rings - 1;
    let electrode_arcs = (0..n_electrodes)
        .map(|l| {
            (0..width)
                .map(|w| {
                    let j = l * pitch + gap + w;
                    index_of[&[ring_node(outer, j), ring_node(outer, j + 1)]]
                })
                .collect()
        })
        .collect();

    Ok(DiscMesh {
        nodes,
        triangles,
        boundary_edges,
        electrode_arcs,
    })
}

/// Per-ring node multiples `c_i` (ring `i` gets `c_i * sectors` nodes).
///
/// Constraints: `c_n = 4n / sectors`, `Σ c_i = 2n(n+1) / sectors`, each
/// `c_i ≥ 1`, non-decreasing. Within those, `c_i` tracks `4i / sectors`.
fn ring_multiples(n_rings: usize, sectors: usize) -> Result<Vec<usize>> {
    let node_total = 2 * n_rings * (n_rings + 1);
    let infeasible = || {
        TomoError::Config(format!(
            "cannot build a {sectors}-fold symmetric mesh with {n_rings} rings \
             ({node_total} ring nodes, {} boundary nodes)",
            4 * n_rings
        ))
    };
    if node_total % sectors != 0 {
        return Err(infeasible());
    }
    let target_sum = node_total / sectors;
    let last = 4 * n_rings / sectors;
    let ideal = |i: usize| 4.0 * (i + 1) as f64 / sectors as f64;

    let mut c: Vec<usize> = (0..n_rings)
        .map(|i| (ideal(i).round() as usize).clamp(1, last))
        .collect();
    c[n_rings - 1] = last;
    let mut sum: usize = c.iter().sum();

    while sum < target_sum {
        let pick = (0..n_rings - 1)
            .filter(|&i| c[i] < c[i + 1])
            .max_by(|&x, &y| {
                let dx = ideal(x) - c[x] as f64;
                let dy = ideal(y) - c[y] as f64;
                dx.total_cmp(&dy).then(y.cmp(&x))
            })
            .ok_or_else(infeasible)?;
        c[pick] += 1;
        sum += 1;
    }
    while sum > target_sum {
        let pick = (0..n_rings - 1)
            .filter(|&i| c[i] > 1 && (i == 0 || c[i] > c[i - 1]))
            .max_by(|&x, &y| {
                let dx = c[x] as f64 - ideal(x);
                let dy = c[y] as f64 - ideal(y);
                dx.total_cmp(&dy).then(y.cmp(&x))
            })
            .ok_or_else(infeasible)?;
        c[pick] -= 1;
        sum -= 1;
    }
    Ok(c)
}

/// Edges used by exactly one triangle, oriented as in that triangle and
/// sorted by the polar angle of their midpoint.
fn canonical_boundary_edges(nodes: &[Point], triangles: &[[usize; 3]]) -> Result<Vec<[usize; 2]>> {
    let mut uses: HashMap<[usize; 2], (usize, [usize; 2])> = HashMap::new();
    for t in triangles {
        for k in 0..3 {
            let e = [t[k], t[(k + 1) % 3]];
            let key = [e[0].min(e[1]), e[0].max(e[1])];
            uses.entry(key).or_insert((0, e)).0 += 1;
        }
    }
    if let Some((key, _)) = uses.iter().find(|(_, (n, _))| *n > 2) {
        return Err(TomoError::Config(format!(
            "edge {key:?} is shared by more than two triangles"
        )));
    }
    let mut edges: Vec<([usize; 2], f64)> = uses
        .into_values()
        .filter(|(n, _)| *n == 1)
        .map(|(_, e)| {
            let mid = nalgebra::center(&nodes[e[0]], &nodes[e[1]]);
            (e, mid.y.atan2(mid.x).rem_euclid(2.0 * PI))
        })
        .collect();
    edges.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(edges.into_iter().map(|(e, _)| e).collect())
}

/// Signed area of the triangle `a, b, c` (positive when counter-clockwise).
pub fn signed_area(a: &Point, b: &Point, c: &Point) -> f64 {
    0.5 * ((b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y))
}

pub fn element_centroids(mesh: &DiscMesh) -> Vec<Point> {
    mesh.triangles
        .iter()
        .map(|t| {
            let [a, b, c] = t.map(|i| mesh.nodes[i].coords);
            Point::from((a + b + c) / 3.0)
        })
        .collect()
}

impl DiscMesh {
    /// Assembles a mesh from raw parts, checking orientation, disc
    /// containment and electrode validity. Boundary edges are derived from
    /// the triangles; electrode arcs index into them.
    pub fn from_parts(
        nodes: Vec<Point>,
        triangles: Vec<[usize; 3]>,
        electrode_arcs: Vec<Vec<usize>>,
    ) -> Result<Self> {
        if let Some((i, p)) = nodes.iter().enumerate().find(|(_, p)| !(p.coords.norm() <= 1.0 + 1e-9)) {
            return Err(TomoError::Config(format!("node {i} at {p} lies outside the unit disc")));
        }
        for (k, t) in triangles.iter().enumerate() {
            if t.iter().any(|&i| i >= nodes.len()) {
                return Err(TomoError::Config(format!("triangle {k} references a missing node")));
            }
            let area = signed_area(&nodes[t[0]], &nodes[t[1]], &nodes[t[2]]);
            if !(area > 0.0) {
                return Err(TomoError::Config(format!(
                    "triangle {k} has non-positive signed area {area}"
                )));
            }
        }
        let boundary_edges = canonical_boundary_edges(&nodes, &triangles)?;
        let mut seen = vec![false; boundary_edges.len()];
        for (l, arc) in electrode_arcs.iter().enumerate() {
            if arc.is_empty() {
                return Err(TomoError::Config(format!("electrode {l} has no edges")));
            }
            for &e in arc {
                let Some(edge) = boundary_edges.get(e) else {
                    return Err(TomoError::Config(format!(
                        "electrode {l} references boundary edge {e} of {}",
                        boundary_edges.len()
                    )));
                };
                if std::mem::replace(&mut seen[e], true) {
                    return Err(TomoError::Config(format!("boundary edge {e} is on two electrodes")));
                }
                if edge.iter().any(|&i| (nodes[i].coords.norm() - 1.0).abs() > 1e-9) {
                    return Err(TomoError::Config(format!(
                        "electrode {l} edge {e} is not on the unit circle"
                    )));
                }
            }
        }
        Ok(Self {
            nodes,
            triangles,
            boundary_edges,
            electrode_arcs,
        })
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn boundary_edges(&self) -> &[[usize; 2]] {
        &self.boundary_edges
    }

    pub fn electrode_arcs(&self) -> &[Vec<usize>] {
        &self.electrode_arcs
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn n_electrodes(&self) -> usize {
        self.electrode_arcs.len()
    }

    pub fn triangle_points(&self, k: usize) -> [Point; 3] {
        self.triangles[k].map(|i| self.nodes[i])
    }

    pub fn area(&self, k: usize) -> f64 {
        let [a, b, c] = self.triangle_points(k);
        signed_area(&a, &b, &c)
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_triangles()).map(|k| self.area(k)).sum()
    }

    pub fn edge_length(&self, edge: usize) -> f64 {
        let [a, b] = self.boundary_edges[edge];
        (self.nodes[b] - self.nodes[a]).norm()
    }

    /// Polygonal length of electrode `l`.
    pub fn arc_length(&self, l: usize) -> f64 {
        self.electrode_arcs[l].iter().map(|&e| self.edge_length(e)).sum()
    }

    /// Angle of the midpoint of electrode `l`'s arc, in `(-π, π]`.
    pub fn electrode_center_angle(&self, l: usize) -> f64 {
        let arc = &self.electrode_arcs[l];
        let first = self.nodes[self.boundary_edges[arc[0]][0]];
        let last = self.nodes[self.boundary_edges[*arc.last().unwrap()][1]];
        let a0 = first.y.atan2(first.x);
        let mut span = last.y.atan2(last.x) - a0;
        if span <= 0.0 {
            span += 2.0 * PI;
        }
        let mid = a0 + span / 2.0;
        mid.sin().atan2(mid.cos())
    }

    pub fn centroids(&self) -> Vec<Point> {
        element_centroids(self)
    }

    /// Index map `i -> j` such that rotating node `i` by `angle` lands on
    /// node `j`, or `None` when the node set is not invariant.
    pub fn node_rotation_map(&self, angle: f64) -> Option<Vec<usize>> {
        match_rotated(&self.nodes, angle)
    }

    /// Element analogue of [`Self::node_rotation_map`], matched on centroids
    /// and cross-checked against the triangle connectivity.
    pub fn element_rotation_map(&self, angle: f64) -> Option<Vec<usize>> {
        let map = match_rotated(&self.centroids(), angle)?;
        let nodes = self.node_rotation_map(angle)?;
        let mut tri_index: HashMap<[usize; 3], usize> = HashMap::new();
        for (k, t) in self.triangles.iter().enumerate() {
            let mut key = *t;
            key.sort_unstable();
            tri_index.insert(key, k);
        }
        for (k, t) in self.triangles.iter().enumerate() {
            let mut image = t.map(|i| nodes[i]);
            image.sort_unstable();
            if tri_index.get(&image) != Some(&map[k]) {
                return None;
            }
        }
        Some(map)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MESH_MAGIC, MESH_VERSION);
        w.u32(self.nodes.len() as u32);
        w.u32(self.triangles.len() as u32);
        w.u32(self.electrode_arcs.len() as u32);
        for p in &self.nodes {
            w.f64(p.x);
            w.f64(p.y);
        }
        for t in &self.triangles {
            t.iter().for_each(|&i| w.u32(i as u32));
        }
        for arc in &self.electrode_arcs {
            w.u32(arc.len() as u32);
            arc.iter().for_each(|&e| w.u32(e as u32));
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open("mesh", data, MESH_MAGIC, MESH_VERSION)?;
        let n_nodes = r.u32()? as usize;
        let n_tris = r.u32()? as usize;
        let n_elec = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n_nodes.min(data.len() / 16));
        for _ in 0..n_nodes {
            nodes.push(Point::new(r.f64()?, r.f64()?));
        }
        let mut triangles = Vec::with_capacity(n_tris.min(data.len() / 12));
        for _ in 0..n_tris {
            triangles.push([r.u32()? as usize, r.u32()? as usize, r.u32()? as usize]);
        }
        let mut arcs = Vec::with_capacity(n_elec.min(data.len() / 4));
        for _ in 0..n_elec {
            let len = r.u32()? as usize;
            let arc = (0..len).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            arcs.push(arc);
        }
        r.finish()?;
        Self::from_parts(nodes, triangles, arcs).map_err(|e| TomoError::Format {
            kind: "mesh",
            reason: e.to_string(),
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(TomoError::file(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(TomoError::file(path))?)
    }
}

fn match_rotated(points: &[Point], angle: f64) -> Option<Vec<usize>> {
    const TOL: f64 = 1e-9;
    let rot = nalgebra::Rotation2::new(angle);
    // Bucket on a coarse grid and probe neighbouring cells.
    let cell = 1e-3;
    let key = |p: &Point| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in points.iter().enumerate() {
        grid.entry(key(p)).or_default().push(i);
    }
    points
        .iter()
        .map(|p| {
            let q = rot * p;
            let (kx, ky) = key(&q);
            (kx - 1..=kx + 1)
                .flat_map(|x| (ky - 1..=ky + 1).map(move |y| (x, y)))
                .filter_map(|k| grid.get(&k))
                .flatten()
                .copied()
                .find(|&j| (points[j] - q).norm() < TOL)
        })
        .collect()
}
