//! Linearization of the normalized frame around a homogeneous background.
//!
//! A measurement is read as `V = f_ψᵀ φ`, where `f_ψ` is the load of a unit
//! current driven through the readout pair. Differentiating the stiffness
//! system gives the adjoint form
//!
//! ```text
//! ∂V/∂σ_k = −∫_k ∇φ_drive · ∇ψ_pair dA
//! ```
//!
//! with both fields solved at the background. Frames are normalized as
//! `(reference − measured) / max|reference|`, so the stored matrix is the
//! Jacobian of that normalized quantity:
//! `S[m, k] = ∫_k ∇φ·∇ψ dA / max|reference|`. Raising the conductivity of
//! an element then produces a positive image value.

use std::collections::HashMap;
use std::env;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector2};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Result, TomoError};
use crate::forward::{
    basis_gradients, drive_potentials, electrode_load, measure, ConductivityField, ForwardSolver,
    MeasurementProtocol, NodalPotential, VoltageFrame,
};
use crate::mesh::DiscMesh;

const SENS_MAGIC: &[u8; 4] = b"TSNS";
const SENS_VERSION: u32 = 1;

/// Environment variable overriding the sensitivity cache directory.
pub const CACHE_ENV: &str = "TOMO_CACHE_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    entries: DMatrix<f64>,
    background: f64,
    protocol: Option<String>,
}

impl SensitivityMatrix {
    pub fn from_matrix(entries: DMatrix<f64>, background: f64) -> Result<Self> {
        if let Some(v) = entries.iter().find(|v| !v.is_finite()) {
            return Err(TomoError::Config(format!("sensitivity entry {v} is not finite")));
        }
        Ok(Self {
            entries,
            background,
            protocol: None,
        })
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_measurements(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_elements(&self) -> usize {
        self.entries.ncols()
    }

    pub fn background(&self) -> f64 {
        self.background
    }

    pub fn protocol(&self) -> Option<&str> {
        self.protocol.as_deref()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(SENS_MAGIC, SENS_VERSION);
        w.u32(self.entries.nrows() as u32);
        w.u32(self.entries.ncols() as u32);
        w.f64(self.background);
        for row in self.entries.row_iter() {
            row.iter().for_each(|&v| w.f64(v));
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::open("sensitivity", data, SENS_MAGIC, SENS_VERSION)?;
        let m = r.u32()? as usize;
        let k = r.u32()? as usize;
        let background = r.f64()?;
        let expected = m.checked_mul(k).and_then(|n| n.checked_mul(8));
        if expected != Some(data.len().saturating_sub(24)) {
            return Err(r.err(format!("{m}x{k} entries do not match the file size")));
        }
        let values = (0..m * k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Self::from_matrix(DMatrix::from_row_slice(m, k, &values), background)
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

/// Difference frame scaled to O(1) magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedFrame {
    values: DVector<f64>,
    protocol: Option<String>,
}

impl NormalizedFrame {
    pub fn from_values(values: impl Into<Vec<f64>>) -> Self {
        Self {
            values: DVector::from_vec(values.into()),
            protocol: None,
        }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn protocol(&self) -> Option<&str> {
        self.protocol.as_deref()
    }
}

/// `(reference − measured) / max|reference|`.
pub fn normalize_frame(measured: &VoltageFrame, reference: &VoltageFrame) -> Result<NormalizedFrame> {
    if measured.len() != reference.len() {
        return Err(TomoError::shape(
            format!("{} reference values", reference.len()),
            measured.len(),
        ));
    }
    if let (Some(a), Some(b)) = (&measured.protocol, &reference.protocol) {
        if a != b {
            return Err(TomoError::shape(format!("protocol {b}"), format!("protocol {a}")));
        }
    }
    let scale = reference.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(scale > 0.0) {
        return Err(TomoError::DegenerateReference);
    }
    let values = reference
        .values
        .iter()
        .zip(&measured.values)
        .map(|(r, m)| (r - m) / scale)
        .collect::<Vec<_>>();
    Ok(NormalizedFrame {
        values: DVector::from_vec(values),
        protocol: measured.protocol.clone().or_else(|| reference.protocol.clone()),
    })
}

/// Frame of the homogeneous field at `background`.
pub fn reference_frame(mesh: &DiscMesh, background: f64, protocol: &MeasurementProtocol) -> Result<VoltageFrame> {
    let field = ConductivityField::uniform(mesh.n_triangles(), background)?;
    crate::forward::simulate_frame(mesh, &field, protocol)
}

struct Linearization {
    /// `∂V/∂σ` of the raw frame.
    jacobian: DMatrix<f64>,
    reference: VoltageFrame,
}

fn linearize(mesh: &DiscMesh, background: f64, protocol: &MeasurementProtocol) -> Result<Linearization> {
    if !(background > 0.0 && background.is_finite()) {
        return Err(TomoError::Config(format!("background conductivity must be positive, got {background}")));
    }
    let field = ConductivityField::uniform(mesh.n_triangles(), background)?;
    let solver = ForwardSolver::for_mesh(mesh, &field)?;
    let drives = drive_potentials(mesh, &solver, protocol)?;
    let reference = measure(mesh, protocol, &drives);

    // Unit-current fields for every distinct readout pair.
    let measurements = protocol.measurements();
    let mut pair_index: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pairs = Vec::new();
    for &(_, pair) in &measurements {
        pair_index.entry(pair).or_insert_with(|| {
            pairs.push(pair);
            pairs.len() - 1
        });
    }
    let pair_fields: Vec<NodalPotential> = pairs
        .par_iter()
        .map(|&(a, b)| {
            let mut load = vec![0.0; mesh.n_nodes()];
            electrode_load(mesh, a, 1.0, &mut load);
            electrode_load(mesh, b, -1.0, &mut load);
            solver.solve(&load)
        })
        .collect::<Result<_>>()?;

    let elements: Vec<_> = (0..mesh.n_triangles())
        .map(|k| basis_gradients(&mesh.triangle_points(k)))
        .collect();
    let gradient_field = |pot: &NodalPotential| -> Vec<Vector2<f64>> {
        mesh.triangles()
            .iter()
            .zip(&elements)
            .map(|(t, (g, _))| g[0] * pot.phi[t[0]] + g[1] * pot.phi[t[1]] + g[2] * pot.phi[t[2]])
            .collect()
    };
    let drive_grads: Vec<_> = drives.par_iter().map(gradient_field).collect();
    let pair_grads: Vec<_> = pair_fields.par_iter().map(gradient_field).collect();

    let k = mesh.n_triangles();
    let rows: Vec<Vec<f64>> = measurements
        .par_iter()
        .map(|&(d, pair)| {
            let gd = &drive_grads[d];
            let gp = &pair_grads[pair_index[&pair]];
            (0..k).map(|e| -elements[e].1 * gd[e].dot(&gp[e])).collect()
        })
        .collect();
    let jacobian = DMatrix::from_fn(rows.len(), k, |m, e| rows[m][e]);
    Ok(Linearization { jacobian, reference })
}

/// Raw `∂V/∂σ` of the unnormalized frame at a homogeneous background.
pub fn voltage_jacobian(mesh: &DiscMesh, background: f64, protocol: &MeasurementProtocol) -> Result<DMatrix<f64>> {
    Ok(linearize(mesh, background, protocol)?.jacobian)
}

/// Sensitivity of the normalized frame to per-element conductivity.
pub fn compute_sensitivity(
    mesh: &DiscMesh,
    background: f64,
    protocol: &MeasurementProtocol,
) -> Result<SensitivityMatrix> {
    let lin = linearize(mesh, background, protocol)?;
    let scale = lin.reference.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if !(scale > 0.0) {
        return Err(TomoError::DegenerateReference);
    }
    let mut s = SensitivityMatrix::from_matrix(lin.jacobian / -scale, background)?;
    s.protocol = Some(protocol.tag());
    Ok(s)
}

/// Content hash of everything the sensitivity matrix depends on.
pub fn cache_key(mesh: &DiscMesh, protocol: &MeasurementProtocol, background: f64) -> String {
    let mut h = Sha256::new();
    h.update(b"tomo-sensitivity-v1");
    h.update(mesh.to_bytes());
    h.update(protocol.tag().as_bytes());
    for d in protocol.drives() {
        h.update((d.source as u64).to_le_bytes());
        h.update((d.sink as u64).to_le_bytes());
        h.update(d.amplitude.to_le_bytes());
    }
    h.update(background.to_le_bytes());
    format!("{:x}", h.finalize())
}

/// `$TOMO_CACHE_DIR`, else the user cache directory, else the temp dir.
pub fn default_cache_dir() -> PathBuf {
    if let Some(dir) = env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = env::var_os("XDG_CACHE_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(dir).join("tomo");
    }
    if let Some(home) = env::var_os("HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(home).join(".cache").join("tomo");
    }
    env::temp_dir().join("tomo-cache")
}

/// Reads the matrix from `cache_dir` if present, otherwise computes and
/// stores it. A corrupt cache entry is recomputed and overwritten.
pub fn load_or_compute(
    mesh: &DiscMesh,
    protocol: &MeasurementProtocol,
    background: f64,
    cache_dir: &Path,
) -> Result<SensitivityMatrix> {
    let key = cache_key(mesh, protocol, background);
    let path = cache_dir.join(format!("{key}.tsns"));
    if let Ok(bytes) = fs::read(&path) {
        if let Ok(mut s) = SensitivityMatrix::from_bytes(&bytes) {
            if s.n_measurements() == protocol.len() && s.n_elements() == mesh.n_triangles() {
                s.protocol = Some(protocol.tag());
                return Ok(s);
            }
        }
    }
    let s = compute_sensitivity(mesh, background, protocol)?;
    fs::create_dir_all(cache_dir).map_err(TomoError::file(cache_dir))?;
    // Write-then-rename so concurrent readers never see a partial file.
    let tmp = cache_dir.join(format!("{key}.{}.tmp", std::process::id()));
    s.write(&tmp)?;
    fs::rename(&tmp, &path).map_err(TomoError::file(&path))?;
    Ok(s)
}
