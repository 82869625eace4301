//! Steady-current forward model.
//!
//! Solves `∇·(σ∇φ) = 0` on the disc with piecewise-linear elements and the
//! gap electrode model: a uniform inward current density `I / |Γ_src|` on the
//! source arc, the matching outward density on the sink arc and zero flux on
//! the remaining boundary. The pure-Neumann system fixes its constant by a
//! zero-mean gauge.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, Matrix3, Vector2};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{Result, TomoError};
use crate::mesh::{DiscMesh, Point};

const FRAME_MAGIC: &[u8; 4] = b"TFRM";
const FRAME_VERSION: u32 = 1;

/// Relative residual accepted from the direct solve.
const RESIDUAL_TOL: f64 = 1e-10;

/// Per-element conductivity, strictly positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawField")]
pub struct ConductivityField {
    sigma: Vec<f64>,
}

#[derive(Deserialize)]
struct RawField {
    sigma: Vec<f64>,
}

impl TryFrom<RawField> for ConductivityField {
    type Error = TomoError;

    fn try_from(raw: RawField) -> Result<Self> {
        Self::new(raw.sigma)
    }
}

impl ConductivityField {
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if let Some((element, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0 && s.is_finite())) {
            return Err(TomoError::NonPositiveConductivity { element, value });
        }
        Ok(Self { sigma })
    }

    pub fn uniform(n_elements: usize, value: f64) -> Result<Self> {
        Self::new(vec![value; n_elements])
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.sigma.iter().map(|s| s * factor).collect())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(TomoError::file(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DrivePattern {
    pub source: usize,
    pub sink: usize,
    pub amplitude: f64,
}

impl DrivePattern {
    pub fn new(source: usize, sink: usize, amplitude: f64) -> Result<Self> {
        if source == sink {
            return Err(TomoError::Config(format!("drive source and sink are both electrode {source}")));
        }
        if !(amplitude > 0.0 && amplitude.is_finite()) {
            return Err(TomoError::Config(format!("drive amplitude must be positive, got {amplitude}")));
        }
        Ok(Self { source, sink, amplitude })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolKind {
    /// Drive neighbouring electrodes, measure neighbouring pairs.
    Adjacent,
    /// Drive diametrically opposite electrodes, measure neighbouring pairs.
    Opposite,
}

impl fmt::Display for ProtocolKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adjacent => "adjacent",
            Self::Opposite => "opposite",
        })
    }
}

impl FromStr for ProtocolKind {
    type Err = TomoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adjacent" => Ok(Self::Adjacent),
            "opposite" => Ok(Self::Opposite),
            other => Err(TomoError::Config(format!(
                "unknown protocol {other:?} (expected adjacent or opposite)"
            ))),
        }
    }
}

/// Drive patterns plus, per drive, the differential electrode pairs read out.
///
/// Measurement pairs are listed relative to the drive: starting just after
/// the drive's source and walking counter-clockwise, every neighbouring pair
/// `(a, a+1)` that touches neither driven electrode.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementProtocol {
    kind: ProtocolKind,
    n_electrodes: usize,
    drives: Vec<DrivePattern>,
    pairs: Vec<Vec<(usize, usize)>>,
}

impl MeasurementProtocol {
    pub fn new(kind: ProtocolKind, n_electrodes: usize) -> Result<Self> {
        Self::with_amplitude(kind, n_electrodes, 1.0)
    }

    pub fn adjacent(n_electrodes: usize) -> Result<Self> {
        Self::new(ProtocolKind::Adjacent, n_electrodes)
    }

    pub fn opposite(n_electrodes: usize) -> Result<Self> {
        Self::new(ProtocolKind::Opposite, n_electrodes)
    }

    pub fn with_amplitude(kind: ProtocolKind, n_electrodes: usize, amplitude: f64) -> Result<Self> {
        let l = n_electrodes;
        let offset = match kind {
            ProtocolKind::Adjacent if l >= 4 => 1,
            ProtocolKind::Opposite if l >= 6 && l % 2 == 0 => l / 2,
            _ => {
                return Err(TomoError::Config(format!(
                    "{kind} protocol is undefined for {l} electrodes"
                )))
            }
        };
        let mut drives = Vec::with_capacity(l);
        let mut pairs = Vec::with_capacity(l);
        for d in 0..l {
            let drive = DrivePattern::new(d, (d + offset) % l, amplitude)?;
            let touches = |e: usize| e == drive.source || e == drive.sink;
            pairs.push(
                (1..l)
                    .map(|k| ((d + k) % l, (d + k + 1) % l))
                    .filter(|&(a, b)| !touches(a) && !touches(b))
                    .collect(),
            );
            drives.push(drive);
        }
        Ok(Self {
            kind,
            n_electrodes,
            drives,
            pairs,
        })
    }

    pub fn kind(&self) -> ProtocolKind {
        self.kind
    }

    pub fn n_electrodes(&self) -> usize {
        self.n_electrodes
    }

    pub fn drives(&self) -> &[DrivePattern] {
        &self.drives
    }

    pub fn pairs(&self, drive: usize) -> &[(usize, usize)] {
        &self.pairs[drive]
    }

    /// Total measurement count `M`.
    pub fn len(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(drive index, (a, b))` for each measurement in frame order.
    pub fn measurements(&self) -> Vec<(usize, (usize, usize))> {
        self.pairs
            .iter()
            .enumerate()
            .flat_map(|(d, ps)| ps.iter().map(move |&p| (d, p)))
            .collect()
    }

    pub fn tag(&self) -> String {
        format!("{}-{}", self.kind, self.n_electrodes)
    }

    /// For each measurement `m`, the frame index of the same measurement with
    /// every electrode label advanced by `steps`.
    pub fn rotation_permutation(&self, steps: usize) -> Vec<usize> {
        let l = self.n_electrodes;
        let index = self.index_map();
        self.measurements()
            .into_iter()
            .map(|(d, (a, b))| {
                let drive = &self.drives[d];
                let key = (
                    (drive.source + steps) % l,
                    (drive.sink + steps) % l,
                    (a + steps) % l,
                    (b + steps) % l,
                );
                index[&key]
            })
            .collect()
    }

    /// Frame index of the measurement with drive and readout pair swapped.
    pub fn reciprocal_index(&self, m: usize) -> Option<usize> {
        let (d, (a, b)) = self.measurements()[m];
        let drive = &self.drives[d];
        self.index_map().get(&(a, b, drive.source, drive.sink)).copied()
    }

    fn index_map(&self) -> std::collections::HashMap<(usize, usize, usize, usize), usize> {
        self.measurements()
            .into_iter()
            .enumerate()
            .map(|(m, (d, (a, b)))| ((self.drives[d].source, self.drives[d].sink, a, b), m))
            .collect()
    }
}

/// Nodal potential with zero mean.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalPotential {
    pub phi: Vec<f64>,
}

impl NodalPotential {
    pub fn mean(&self) -> f64 {
        self.phi.iter().sum::<f64>() / self.phi.len() as f64
    }
}

/// Stacked differential electrode voltages, in protocol order.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageFrame {
    pub values: Vec<f64>,
    /// Protocol tag, when known. Frame files do not carry it.
    pub protocol: Option<String>,
}

impl VoltageFrame {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(FRAME_MAGIC, FRAME_VERSION);
        w.u32(self.values.len() as u32);
        self.values.iter().for_each(|&v| w.f64(v));
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open("frame", data, FRAME_MAGIC, FRAME_VERSION)?;
        let m = r.u32()? as usize;
        let values = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { values, protocol: None })
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

/// Gradients of the three barycentric basis functions and the signed area.
pub fn basis_gradients(p: &[Point; 3]) -> ([Vector2<f64>; 3], f64) {
    let area = crate::mesh::signed_area(&p[0], &p[1], &p[2]);
    let grads = std::array::from_fn(|i| {
        let (a, b) = (p[(i + 1) % 3], p[(i + 2) % 3]);
        Vector2::new(a.y - b.y, b.x - a.x) / (2.0 * area)
    });
    (grads, area)
}

/// P1 element stiffness `σ ∫ ∇N_i·∇N_j dA`.
pub fn local_stiffness(p: &[Point; 3], sigma: f64) -> Matrix3<f64> {
    let (g, area) = basis_gradients(p);
    Matrix3::from_fn(|i, j| sigma * area * g[i].dot(&g[j]))
}

pub fn assemble_stiffness(nodes: &[Point], triangles: &[[usize; 3]], sigma: &[f64]) -> Result<CscMatrix<f64>> {
    if sigma.len() != triangles.len() {
        return Err(TomoError::shape(
            format!("{} conductivities", triangles.len()),
            sigma.len(),
        ));
    }
    if let Some((element, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(TomoError::NonPositiveConductivity { element, value });
    }
    let n = nodes.len();
    let mut coo = CooMatrix::new(n, n);
    for (t, &s) in triangles.iter().zip(sigma) {
        let k = local_stiffness(&t.map(|i| nodes[i]), s);
        for (a, &i) in t.iter().enumerate() {
            for (b, &j) in t.iter().enumerate() {
                coo.push(i, j, k[(a, b)]);
            }
        }
    }
    Ok(CscMatrix::from(&coo))
}

/// Global stiffness matrix of `mesh` under `field`: symmetric, positive
/// semi-definite, with the constants as its null space.
pub fn assemble_system(mesh: &DiscMesh, field: &ConductivityField) -> Result<CscMatrix<f64>> {
    assemble_stiffness(mesh.nodes(), mesh.triangles(), field.sigma())
}

/// Factorized Neumann problem ready for repeated solves.
///
/// Node 0 is grounded to make the reduced matrix positive definite; the
/// solution is then shifted to zero mean. For a load that sums to zero this
/// is the unique zero-mean solution of the full singular system, so the
/// result does not depend on which node was grounded.
pub struct ForwardSolver {
    stiffness: CscMatrix<f64>,
    factor: CscCholesky<f64>,
}

impl ForwardSolver {
    pub fn new(nodes: &[Point], triangles: &[[usize; 3]], sigma: &[f64]) -> Result<Self> {
        let stiffness = assemble_stiffness(nodes, triangles, sigma)?;
        let n = stiffness.nrows();
        if n < 2 {
            return Err(TomoError::Solver("need at least two nodes".into()));
        }
        let mut reduced = CooMatrix::new(n - 1, n - 1);
        for (i, j, &v) in stiffness.triplet_iter() {
            if i > 0 && j > 0 {
                reduced.push(i - 1, j - 1, v);
            }
        }
        let reduced = CscMatrix::from(&reduced);
        let factor = CscCholesky::factor(&reduced).map_err(|e| {
            let diag: Vec<f64> = (0..n).map(|i| stiffness.get_entry(i, i).map_or(0.0, |e| e.into_value())).collect();
            let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            TomoError::Solver(format!(
                "grounded stiffness matrix is not positive definite ({e}); diagonal spans [{lo:e}, {hi:e}], \
                 ratio {:e}",
                hi / lo
            ))
        })?;
        Ok(Self { stiffness, factor })
    }

    pub fn for_mesh(mesh: &DiscMesh, field: &ConductivityField) -> Result<Self> {
        Self::new(mesh.nodes(), mesh.triangles(), field.sigma())
    }

    pub fn stiffness(&self) -> &CscMatrix<f64> {
        &self.stiffness
    }

    pub fn n_nodes(&self) -> usize {
        self.stiffness.nrows()
    }

    pub fn solve(&self, load: &[f64]) -> Result<NodalPotential> {
        Ok(self.solve_many(&[load.to_vec()])?.pop().unwrap())
    }

    /// Solves several load vectors against the same factorization.
    pub fn solve_many(&self, loads: &[Vec<f64>]) -> Result<Vec<NodalPotential>> {
        let n = self.n_nodes();
        for load in loads {
            if load.len() != n {
                return Err(TomoError::shape(format!("{n} load entries"), load.len()));
            }
            let net: f64 = load.iter().sum();
            let scale: f64 = load.iter().map(|v| v.abs()).sum();
            if net.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                return Err(TomoError::Config(format!(
                    "load vector injects net current {net:e}; Neumann problem is incompatible"
                )));
            }
        }
        let rhs = DMatrix::from_fn(n - 1, loads.len(), |i, j| loads[j][i + 1]);
        let sol = self.factor.solve(&rhs);
        loads
            .iter()
            .enumerate()
            .map(|(j, load)| {
                let mut phi = Vec::with_capacity(n);
                phi.push(0.0);
                phi.extend(sol.column(j).iter());
                let mean = phi.iter().sum::<f64>() / n as f64;
                phi.iter_mut().for_each(|v| *v -= mean);
                let residual = self.residual_norm(&phi, load);
                let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
                if residual > RESIDUAL_TOL * norm.max(f64::MIN_POSITIVE) {
                    return Err(TomoError::Solver(format!(
                        "relative residual {:e} exceeds {RESIDUAL_TOL:e}",
                        residual / norm
                    )));
                }
                Ok(NodalPotential { phi })
            })
            .collect()
    }

    /// `‖Kφ − f‖₂`.
    pub fn residual_norm(&self, phi: &[f64], load: &[f64]) -> f64 {
        let mut r: Vec<f64> = load.iter().map(|v| -v).collect();
        for (i, j, &v) in self.stiffness.triplet_iter() {
            r[i] += v * phi[j];
        }
        r.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Consistent load of a uniform current density `current / |Γ_l|` on
/// electrode `l`. Positive current enters the domain.
pub fn electrode_load(mesh: &DiscMesh, l: usize, current: f64, load: &mut [f64]) {
    let density = current / mesh.arc_length(l);
    for &e in &mesh.electrode_arcs()[l] {
        let [a, b] = mesh.boundary_edges()[e];
        let half = 0.5 * density * mesh.edge_length(e);
        load[a] += half;
        load[b] += half;
    }
}

/// Load vector for a drive: `+amplitude` into the source, out of the sink.
pub fn drive_load(mesh: &DiscMesh, drive: &DrivePattern) -> Result<Vec<f64>> {
    let l = mesh.n_electrodes();
    if drive.source >= l || drive.sink >= l {
        return Err(TomoError::Config(format!(
            "drive ({}, {}) references an electrode outside 0..{l}",
            drive.source, drive.sink
        )));
    }
    let mut load = vec![0.0; mesh.n_nodes()];
    electrode_load(mesh, drive.source, drive.amplitude, &mut load);
    electrode_load(mesh, drive.sink, -drive.amplitude, &mut load);
    Ok(load)
}

/// Length-weighted mean of the piecewise-linear potential over electrode `l`.
pub fn electrode_mean(mesh: &DiscMesh, phi: &[f64], l: usize) -> f64 {
    let integral: f64 = mesh.electrode_arcs()[l]
        .iter()
        .map(|&e| {
            let [a, b] = mesh.boundary_edges()[e];
            0.5 * (phi[a] + phi[b]) * mesh.edge_length(e)
        })
        .sum();
    integral / mesh.arc_length(l)
}

pub fn solve_forward(mesh: &DiscMesh, field: &ConductivityField, drive: &DrivePattern) -> Result<NodalPotential> {
    ForwardSolver::for_mesh(mesh, field)?.solve(&drive_load(mesh, drive)?)
}

/// Potentials for every drive of `protocol`, in drive order.
pub fn drive_potentials(
    mesh: &DiscMesh,
    solver: &ForwardSolver,
    protocol: &MeasurementProtocol,
) -> Result<Vec<NodalPotential>> {
    check_protocol(mesh, protocol)?;
    protocol
        .drives()
        .par_iter()
        .map(|d| solver.solve(&drive_load(mesh, d)?))
        .collect()
}

/// Reads the protocol's differential voltages off per-drive potentials.
pub fn measure(mesh: &DiscMesh, protocol: &MeasurementProtocol, potentials: &[NodalPotential]) -> VoltageFrame {
    let values = protocol
        .measurements()
        .into_iter()
        .map(|(d, (a, b))| {
            let phi = &potentials[d].phi;
            electrode_mean(mesh, phi, a) - electrode_mean(mesh, phi, b)
        })
        .collect();
    VoltageFrame {
        values,
        protocol: Some(protocol.tag()),
    }
}

pub fn simulate_frame(
    mesh: &DiscMesh,
    field: &ConductivityField,
    protocol: &MeasurementProtocol,
) -> Result<VoltageFrame> {
    let solver = ForwardSolver::for_mesh(mesh, field)?;
    let potentials = drive_potentials(mesh, &solver, protocol)?;
    Ok(measure(mesh, protocol, &potentials))
}

fn check_protocol(mesh: &DiscMesh, protocol: &MeasurementProtocol) -> Result<()> {
    if protocol.n_electrodes() != mesh.n_electrodes() {
        return Err(TomoError::shape(
            format!("protocol for {} electrodes", mesh.n_electrodes()),
            format!("protocol for {}", protocol.n_electrodes()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use super::*;
    use crate::mesh::{build_disc_mesh, MeshParams};

    fn mesh(electrodes: usize) -> DiscMesh {
        build_disc_mesh(&MeshParams {
            n_electrodes: electrodes,
            ..MeshParams::default()
        })
        .unwrap()
    }

    #[test]
    fn reference_triangle_stiffness() {
        let p = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(0.0, 1.0)];
        let k = local_stiffness(&p, 1.0);
        let expected = Matrix3::new(1.0, -0.5, -0.5, -0.5, 0.5, 0.0, -0.5, 0.0, 0.5);
        assert!((k - expected).abs().max() < 1e-15);
    }

    #[test]
    fn assembled_matrix_is_symmetric_with_zero_row_sums() {
        let m = mesh(32);
        let field = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let k = assemble_system(&m, &field).unwrap();
        let dense = DMatrix::from(&k);
        assert!((&dense - dense.transpose()).abs().max() < 1e-14);
        for i in 0..dense.nrows() {
            assert!(dense.row(i).sum().abs() < 1e-12, "row {i}");
        }
        let doubled = assemble_system(&m, &field.scaled(2.0).unwrap()).unwrap();
        assert!((DMatrix::from(&doubled) - dense * 2.0).abs().max() < 1e-14);
    }

    #[test]
    fn nonpositive_sigma_names_the_element() {
        let m = mesh(32);
        let mut sigma = vec![1.0; m.n_triangles()];
        sigma[17] = 0.0;
        let err = assemble_stiffness(m.nodes(), m.triangles(), &sigma).unwrap_err();
        assert!(matches!(err, TomoError::NonPositiveConductivity { element: 17, .. }));
        assert!(ConductivityField::new(vec![1.0, -2.0]).is_err());
    }

    #[test]
    fn square_patch_matches_resistor_network() {
        // Two unit right triangles form a square whose edges act as 1/2-siemens
        // resistors and whose diagonal carries no conductance. Current 1 in at
        // corner 0 and out at corner 2 splits over two series paths of
        // conductance 1/4 each: φ0 − φ2 = 2, φ1 = φ3 = midpoint.
        let nodes = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        let tris = [[0, 1, 2], [0, 2, 3]];
        let solver = ForwardSolver::new(&nodes, &tris, &[1.0, 1.0]).unwrap();
        let phi = solver.solve(&[1.0, 0.0, -1.0, 0.0]).unwrap().phi;
        let expected = [1.0, 0.0, -1.0, 0.0];
        for (a, b) in phi.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{phi:?}");
        }
    }

    #[test]
    fn load_balances_and_solution_has_zero_mean() {
        let m = mesh(32);
        let field = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let drive = DrivePattern::new(3, 4, 1.0).unwrap();
        let load = drive_load(&m, &drive).unwrap();
        assert!(load.iter().sum::<f64>().abs() < 1e-14);
        let solver = ForwardSolver::for_mesh(&m, &field).unwrap();
        let pot = solver.solve(&load).unwrap();
        assert!(pot.mean().abs() < 1e-10);
        let norm = load.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(solver.residual_norm(&pot.phi, &load) <= 1e-10 * norm);
    }

    #[test]
    fn unbalanced_load_is_rejected() {
        let m = mesh(8);
        let field = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let solver = ForwardSolver::for_mesh(&m, &field).unwrap();
        let mut load = vec![0.0; m.n_nodes()];
        electrode_load(&m, 0, 1.0, &mut load);
        assert!(solver.solve(&load).is_err());
    }

    #[test]
    fn opposite_drive_is_antisymmetric_under_half_turn() {
        let m = mesh(32);
        let field = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let drive = DrivePattern::new(0, 16, 1.0).unwrap();
        let phi = solve_forward(&m, &field, &drive).unwrap().phi;
        let map = m.node_rotation_map(PI).unwrap();
        for (i, &j) in map.iter().enumerate() {
            assert!((phi[j] + phi[i]).abs() < 1e-8, "node {i}");
        }
    }

    #[test]
    fn potential_scales_inversely_with_sigma() {
        let m = mesh(8);
        let base = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let drive = DrivePattern::new(0, 1, 1.0).unwrap();
        let phi1 = solve_forward(&m, &base, &drive).unwrap().phi;
        let phi3 = solve_forward(&m, &base.scaled(3.0).unwrap(), &drive).unwrap().phi;
        for (a, b) in phi1.iter().zip(&phi3) {
            assert!((a / 3.0 - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn protocol_sizes() {
        assert_eq!(MeasurementProtocol::adjacent(8).unwrap().len(), 40);
        assert_eq!(MeasurementProtocol::adjacent(32).unwrap().len(), 928);
        assert_eq!(MeasurementProtocol::opposite(8).unwrap().len(), 32);
        assert_eq!(MeasurementProtocol::opposite(32).unwrap().len(), 896);
        assert!(MeasurementProtocol::adjacent(3).is_err());
        assert!(MeasurementProtocol::opposite(7).is_err());
        let p = MeasurementProtocol::adjacent(8).unwrap();
        for (d, (a, b)) in p.measurements() {
            let dr = p.drives()[d];
            assert!(![dr.source, dr.sink].contains(&a) && ![dr.source, dr.sink].contains(&b));
        }
    }

    #[test]
    fn adjacent_frame_properties() {
        let m = mesh(32);
        let p = MeasurementProtocol::adjacent(32).unwrap();
        let field = ConductivityField::uniform(m.n_triangles(), 1.0).unwrap();
        let frame = simulate_frame(&m, &field, &p).unwrap();
        assert_eq!(frame.len(), 928);
        let scale = frame.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let perm = p.rotation_permutation(1);
        for (m_idx, &r) in perm.iter().enumerate() {
            assert!((frame.values[m_idx] - frame.values[r]).abs() <= 1e-6 * scale);
        }
        for m_idx in 0..p.len() {
            let r = p.reciprocal_index(m_idx).unwrap();
            let (x, y) = (frame.values[m_idx], frame.values[r]);
            assert!((x - y).abs() <= 1e-8 * x.abs().max(y.abs()).max(1e-3 * scale));
        }
    }

    #[test]
    fn frame_is_linear_in_amplitude() {
        let m = mesh(8);
        let field = ConductivityField::uniform(m.n_triangles(), 1.3).unwrap();
        let one = simulate_frame(&m, &field, &MeasurementProtocol::adjacent(8).unwrap()).unwrap();
        let p = MeasurementProtocol::with_amplitude(ProtocolKind::Adjacent, 8, 2.5).unwrap();
        let scaled = simulate_frame(&m, &field, &p).unwrap();
        for (a, b) in one.values.iter().zip(&scaled.values) {
            assert!((2.5 * a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
    }

    #[test]
    fn frame_file_round_trip() {
        let frame = VoltageFrame {
            values: vec![1.5, -2.0, 3.25e-7],
            protocol: None,
        };
        let bytes = frame.to_bytes();
        assert_eq!(&bytes[..4], b"TFRM");
        assert_eq!(bytes.len(), 4 + 4 + 4 + 3 * 8);
        assert_eq!(VoltageFrame::from_bytes(&bytes).unwrap(), frame);
    }

    #[test]
    fn field_json_rejects_bad_sigma() {
        let ok: ConductivityField = serde_json::from_str(r#"{"sigma":[1.0,2.5]}"#).unwrap();
        assert_eq!(ok.sigma(), &[1.0, 2.5]);
        assert!(serde_json::from_str::<ConductivityField>(r#"{"sigma":[1.0,0.0]}"#).is_err());
    }
}
