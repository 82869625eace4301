//! Linearized reconstruction: back projection, Landweber iteration and
//! Tikhonov regularization, plus rasterization of element values to images.
//!
//! All three solve `S g ≈ u` for the element image `g`, where `S` is the
//! normalized sensitivity matrix and `u` the normalized difference frame.
//! The raw algebraic output is min-max rescaled to `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::gray_image::{GrayImage, IMAGE_SIZE};
use crate::mesh::{signed_area, DiscMesh};
use crate::sensitivity::{NormalizedFrame, SensitivityMatrix};

/// Relative convergence threshold on the largest Ritz value.
const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITERS: usize = 10_000;
const POWER_BLOCK: usize = 8;

/// Per-element gray values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementImage {
    g: Vec<f64>,
}

impl ElementImage {
    pub fn new(g: Vec<f64>) -> Result<Self> {
        if let Some(v) = g.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(TomoError::Config(format!("element value {v} outside [0, 1]")));
        }
        Ok(Self { g })
    }

    pub fn values(&self) -> &[f64] {
        &self.g
    }

    pub fn len(&self) -> usize {
        self.g.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Lbp,
    Landweber,
    Tikhonov,
}

impl Algorithm {
    pub const ALL: [Algorithm; 3] = [Algorithm::Lbp, Algorithm::Landweber, Algorithm::Tikhonov];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Lbp => "lbp",
            Algorithm::Landweber => "landweber",
            Algorithm::Tikhonov => "tikhonov",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = TomoError;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| TomoError::Config(format!("unknown algorithm {s:?} (expected lbp, landweber or tikhonov)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub algorithm: Algorithm,
    /// Landweber iteration count.
    pub iterations: usize,
    /// Landweber gain; `1/‖SᵀS‖₂` when unset.
    pub step_size: Option<f64>,
    /// Tikhonov weight; `1e-2 · trace(SᵀS) / K` when unset.
    pub lambda: Option<f64>,
    /// Clamp the rescaled image into `[0, 1]`.
    pub clamp: bool,
    /// Threshold the rescaled image at 0.5.
    pub binarize: bool,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Landweber,
            iterations: 200,
            step_size: None,
            lambda: None,
            clamp: true,
            binarize: false,
        }
    }
}

fn check_dims(u: &NormalizedFrame, s: &SensitivityMatrix) -> Result<()> {
    if u.len() != s.n_measurements() {
        return Err(TomoError::shape(
            format!("frame of length {} for a {}x{} matrix", s.n_measurements(), s.n_measurements(), s.n_elements()),
            format!("frame of length {}", u.len()),
        ));
    }
    Ok(())
}

/// `(g − min) / (max − min)`; a constant input maps to all zeros.
pub fn min_max_rescale(raw: &DVector<f64>) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    let lo = raw.min();
    let range = raw.max() - lo;
    if !(range > 0.0) || !range.is_finite() {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// Rescale, then the projection operator: clamp to `[0, 1]` and optionally
/// threshold.
fn finish(raw: &DVector<f64>, clamp: bool, binarize: bool) -> ElementImage {
    let mut g = min_max_rescale(raw);
    if clamp {
        g.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    if binarize {
        g.iter_mut().for_each(|v| *v = if *v >= 0.5 { 1.0 } else { 0.0 });
    }
    ElementImage { g }
}

/// Back projection `Sᵀu` before rescaling.
pub fn lbp_raw(u: &NormalizedFrame, s: &SensitivityMatrix) -> Result<DVector<f64>> {
    check_dims(u, s)?;
    Ok(s.entries().tr_mul(u.values()))
}

pub fn lbp(u: &NormalizedFrame, s: &SensitivityMatrix) -> Result<ElementImage> {
    Ok(finish(&lbp_raw(u, s)?, true, false))
}

/// Spectral norm `‖SᵀS‖₂ = σ_max(S)²` by block power iteration with a
/// Rayleigh-Ritz step.
///
/// Symmetric meshes give clustered top eigenvalues, which stall
/// single-vector power iteration; a block converges at the rate of the first
/// eigenvalue outside it.
pub fn gram_spectral_norm(s: &SensitivityMatrix) -> Result<f64> {
    let a = s.entries();
    if a.is_empty() || a.amax() == 0.0 {
        return Err(TomoError::DegenerateMatrix);
    }
    let block = POWER_BLOCK.min(a.ncols());
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start = DMatrix::from_fn(a.ncols(), block, |_, _| rng.random::<f64>() - 0.5);
    let mut x = start.qr().q();
    let mut estimate = 0.0;
    for _ in 0..POWER_MAX_ITERS {
        let y = a.tr_mul(&(a * &x));
        let ritz = x.tr_mul(&y);
        let next = SymmetricEigen::new((&ritz + ritz.transpose()) * 0.5).eigenvalues.max();
        if !(next > 0.0) {
            return Err(TomoError::DegenerateMatrix);
        }
        x = y.qr().q();
        if (next - estimate).abs() <= POWER_TOL * next {
            return Ok(next);
        }
        estimate = next;
    }
    Ok(estimate)
}

/// Landweber gain `1/‖SᵀS‖₂`, half the convergence bound `2/‖SᵀS‖₂`.
pub fn max_step_size(s: &SensitivityMatrix) -> Result<f64> {
    Ok(1.0 / gram_spectral_norm(s)?)
}

fn checked_step(s: &SensitivityMatrix, step: Option<f64>) -> Result<f64> {
    let norm = gram_spectral_norm(s)?;
    match step {
        None => Ok(1.0 / norm),
        Some(alpha) if alpha > 0.0 && alpha * norm < 2.0 => Ok(alpha),
        Some(alpha) => Err(TomoError::Config(format!(
            "step size {alpha} violates ‖α SᵀS‖₂ < 2 (α·‖SᵀS‖₂ = {:.6}; need 0 < α < {:.6e})",
            alpha * norm,
            2.0 / norm
        ))),
    }
}

/// `iterations` steps of `g ← g + α Sᵀ(u − S g)` from `g = 0`.
pub fn landweber_raw(u: &NormalizedFrame, s: &SensitivityMatrix, iterations: usize, alpha: f64) -> Result<DVector<f64>> {
    landweber_run(u, s, iterations, alpha, |_| ())
}

/// Residual norms `‖u − S g_k‖₂` for `k = 0..=iterations`.
pub fn landweber_residuals(u: &NormalizedFrame, s: &SensitivityMatrix, iterations: usize, alpha: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(iterations + 1);
    let g = landweber_run(u, s, iterations, alpha, |r| out.push(r.norm()))?;
    out.push((u.values() - s.entries() * g).norm());
    Ok(out)
}

fn landweber_run(
    u: &NormalizedFrame,
    s: &SensitivityMatrix,
    iterations: usize,
    alpha: f64,
    mut observe: impl FnMut(&DVector<f64>),
) -> Result<DVector<f64>> {
    check_dims(u, s)?;
    let a = s.entries();
    let mut g = DVector::zeros(a.ncols());
    let mut residual = u.values().clone();
    for _ in 0..iterations {
        observe(&residual);
        g.gemv_tr(alpha, a, &residual, 1.0);
        residual.copy_from(u.values());
        residual.gemv(-1.0, a, &g, 1.0);
    }
    Ok(g)
}

pub fn landweber(u: &NormalizedFrame, s: &SensitivityMatrix, config: &ReconConfig) -> Result<ElementImage> {
    let alpha = checked_step(s, config.step_size)?;
    Ok(finish(&landweber_raw(u, s, config.iterations, alpha)?, config.clamp, config.binarize))
}

/// Scale-aware default weight `1e-2 · trace(SᵀS) / K`.
pub fn default_lambda(s: &SensitivityMatrix) -> f64 {
    1e-2 * s.entries().norm_squared() / s.n_elements() as f64
}

/// Cholesky factor of `SᵀS + λI`, reusable across frames.
pub struct TikhonovSolver {
    factor: Cholesky<f64, Dyn>,
    lambda: f64,
}

impl TikhonovSolver {
    pub fn new(s: &SensitivityMatrix, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(TomoError::Config(format!("lambda must be non-negative, got {lambda}")));
        }
        let a = s.entries();
        let mut normal = a.tr_mul(a);
        for i in 0..normal.nrows() {
            normal[(i, i)] += lambda;
        }
        let singular = || TomoError::Singular(format!("SᵀS + {lambda}·I is not positive definite; use lambda > 0"));
        let factor = Cholesky::new(normal).ok_or_else(singular)?;
        if lambda == 0.0 {
            // Roundoff can let a rank-deficient matrix through with tiny pivots.
            let d = factor.l_dirty().diagonal();
            if d.min() <= 1e-7 * d.max() {
                return Err(singular());
            }
        }
        Ok(Self { factor, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn solve_raw(&self, u: &NormalizedFrame, s: &SensitivityMatrix) -> Result<DVector<f64>> {
        check_dims(u, s)?;
        Ok(self.factor.solve(&s.entries().tr_mul(u.values())))
    }
}

/// Solution of `(SᵀS + λI) g = Sᵀu` before rescaling.
pub fn tikhonov_raw(u: &NormalizedFrame, s: &SensitivityMatrix, lambda: f64) -> Result<DVector<f64>> {
    check_dims(u, s)?;
    TikhonovSolver::new(s, lambda)?.solve_raw(u, s)
}

pub fn tikhonov(u: &NormalizedFrame, s: &SensitivityMatrix, config: &ReconConfig) -> Result<ElementImage> {
    let lambda = config.lambda.unwrap_or_else(|| default_lambda(s));
    Ok(finish(&tikhonov_raw(u, s, lambda)?, config.clamp, config.binarize))
}

/// Dispatches on `config.algorithm`.
pub fn reconstruct(u: &NormalizedFrame, s: &SensitivityMatrix, config: &ReconConfig) -> Result<ElementImage> {
    match config.algorithm {
        Algorithm::Lbp => Ok(finish(&lbp_raw(u, s)?, config.clamp, config.binarize)),
        Algorithm::Landweber => landweber(u, s, config),
        Algorithm::Tikhonov => tikhonov(u, s, config),
    }
}

/// A sensitivity matrix with the per-algorithm precomputation done once:
/// the Landweber gain and the Tikhonov factorization. Shareable across
/// threads.
pub struct Reconstructor {
    s: SensitivityMatrix,
    base: ReconConfig,
    alpha: Option<f64>,
    tikhonov: Option<TikhonovSolver>,
}

impl Reconstructor {
    pub fn new(s: SensitivityMatrix, base: ReconConfig, algorithms: &[Algorithm]) -> Result<Self> {
        let alpha = if algorithms.contains(&Algorithm::Landweber) {
            Some(checked_step(&s, base.step_size)?)
        } else {
            None
        };
        let tikhonov = if algorithms.contains(&Algorithm::Tikhonov) {
            let lambda = base.lambda.unwrap_or_else(|| default_lambda(&s));
            Some(TikhonovSolver::new(&s, lambda)?)
        } else {
            None
        };
        Ok(Self { s, base, alpha, tikhonov })
    }

    pub fn sensitivity(&self) -> &SensitivityMatrix {
        &self.s
    }

    pub fn step_size(&self) -> Option<f64> {
        self.alpha
    }

    pub fn lambda(&self) -> Option<f64> {
        self.tikhonov.as_ref().map(TikhonovSolver::lambda)
    }

    pub fn reconstruct(&self, u: &NormalizedFrame, algorithm: Algorithm) -> Result<ElementImage> {
        let not_prepared = || TomoError::Config(format!("reconstructor was not prepared for {algorithm}"));
        let raw = match algorithm {
            Algorithm::Lbp => lbp_raw(u, &self.s)?,
            Algorithm::Landweber => {
                let alpha = self.alpha.ok_or_else(not_prepared)?;
                landweber_raw(u, &self.s, self.base.iterations, alpha)?
            }
            Algorithm::Tikhonov => self.tikhonov.as_ref().ok_or_else(not_prepared)?.solve_raw(u, &self.s)?,
        };
        Ok(finish(&raw, self.base.clamp, self.base.binarize))
    }
}

/// Pixel-to-element lookup for a fixed mesh.
///
/// A pixel takes the value of the lowest-indexed triangle containing its
/// centre. In-disc pixels in the slivers between the polygonal boundary and
/// the circle take the nearest element; pixels outside the disc are 0.
pub struct Rasterizer {
    size: usize,
    n_elements: usize,
    owner: Vec<Option<u32>>,
}

impl Rasterizer {
    pub fn new(mesh: &DiscMesh) -> Self {
        Self::with_size(mesh, IMAGE_SIZE)
    }

    pub fn with_size(mesh: &DiscMesh, size: usize) -> Self {
        let probe = GrayImage::zeros(size, size);
        let mut owner: Vec<Option<u32>> = vec![None; size * size];
        let to_col = |x: f64| (x + 1.0) * size as f64 / 2.0 - 0.5;
        let to_row = |y: f64| (1.0 - y) * size as f64 / 2.0 - 0.5;
        let clip = |v: f64| v.clamp(0.0, (size - 1) as f64);
        for k in 0..mesh.n_triangles() {
            let [a, b, c] = mesh.triangle_points(k);
            let (xs, ys) = ([a.x, b.x, c.x], [a.y, b.y, c.y]);
            let lo = |v: [f64; 3]| v[0].min(v[1]).min(v[2]);
            let hi = |v: [f64; 3]| v[0].max(v[1]).max(v[2]);
            let c0 = clip(to_col(lo(xs)).floor()) as usize;
            let c1 = clip(to_col(hi(xs)).ceil()) as usize;
            let r0 = clip(to_row(hi(ys)).floor()) as usize;
            let r1 = clip(to_row(lo(ys)).ceil()) as usize;
            let eps = -1e-12 * signed_area(&a, &b, &c).abs();
            for r in r0..=r1 {
                for col in c0..=c1 {
                    let idx = r * size + col;
                    if owner[idx].is_some() {
                        continue;
                    }
                    let p = probe.pixel_center(r, col);
                    if signed_area(&a, &b, &p) >= eps && signed_area(&b, &c, &p) >= eps && signed_area(&c, &a, &p) >= eps {
                        owner[idx] = Some(k as u32);
                    }
                }
            }
        }
        let centroids = mesh.centroids();
        for r in 0..size {
            for col in 0..size {
                let idx = r * size + col;
                if !probe.in_disc(r, col) {
                    owner[idx] = None;
                } else if owner[idx].is_none() {
                    let p = probe.pixel_center(r, col);
                    owner[idx] = (0..centroids.len())
                        .min_by(|&i, &j| (centroids[i] - p).norm().total_cmp(&(centroids[j] - p).norm()))
                        .map(|k| k as u32);
                }
            }
        }
        Self {
            size,
            n_elements: mesh.n_triangles(),
            owner,
        }
    }

    pub fn owner(&self, row: usize, col: usize) -> Option<usize> {
        self.owner[row * self.size + col].map(|k| k as usize)
    }

    pub fn render(&self, g: &ElementImage) -> Result<GrayImage> {
        if g.len() != self.n_elements {
            return Err(TomoError::shape(format!("{} element values", self.n_elements), g.len()));
        }
        let pixels = self
            .owner
            .iter()
            .map(|o| o.map_or(0.0, |k| g.values()[k as usize]))
            .collect();
        GrayImage::from_pixels(self.size, self.size, pixels)
    }
}

pub fn rasterize(mesh: &DiscMesh, g: &ElementImage) -> Result<GrayImage> {
    Rasterizer::new(mesh).render(g)
}
