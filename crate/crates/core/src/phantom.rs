//! Random inclusion phantoms and their two renderings: a per-element
//! conductivity field for the forward model and a binary ground-truth image.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::forward::ConductivityField;
use crate::gray_image::{GrayImage, IMAGE_SIZE};
use crate::mesh::{DiscMesh, Point};

/// Rejection-sampling budget per inclusion.
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    /// Equilateral; `size` is the circumradius.
    Triangle,
    /// `size` is the half-side.
    Square,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Triangle, Shape::Square];

    /// Distance from the centre to the farthest point, per unit size.
    fn reach(self) -> f64 {
        match self {
            Shape::Circle | Shape::Triangle => 1.0,
            Shape::Square => std::f64::consts::SQRT_2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Inclusion {
    pub shape: Shape,
    pub center: [f64; 2],
    pub size: f64,
    pub rotation: f64,
    pub sigma: f64,
}

impl Inclusion {
    fn center(&self) -> Point {
        Point::new(self.center[0], self.center[1])
    }

    /// Polygon corners (empty for circles).
    pub fn vertices(&self) -> Vec<Point> {
        let (n, start) = match self.shape {
            Shape::Circle => return Vec::new(),
            Shape::Triangle => (3, FRAC_PI_2),
            Shape::Square => (4, PI / 4.0),
        };
        let r = self.size * self.shape.reach();
        (0..n)
            .map(|k| {
                let a = self.rotation + start + 2.0 * PI * k as f64 / n as f64;
                self.center() + nalgebra::Vector2::new(r * a.cos(), r * a.sin())
            })
            .collect()
    }

    pub fn contains(&self, p: &Point) -> bool {
        let d = p - self.center();
        // Into the inclusion's own frame.
        let (s, c) = (-self.rotation).sin_cos();
        let (x, y) = (c * d.x - s * d.y, s * d.x + c * d.y);
        match self.shape {
            Shape::Circle => x * x + y * y <= self.size * self.size,
            Shape::Square => x.abs() <= self.size && y.abs() <= self.size,
            Shape::Triangle => {
                // Apex up; the inradius is half the circumradius.
                let h = 0.5 * self.size;
                let (s30, c30) = (0.5, 3f64.sqrt() / 2.0);
                -y <= h && c30 * x + s30 * y <= h && -c30 * x + s30 * y <= h
            }
        }
    }

    /// True when the whole inclusion lies within radius `1 − margin`.
    pub fn fits(&self, margin: f64) -> bool {
        let limit = 1.0 - margin;
        match self.shape {
            Shape::Circle => self.center().coords.norm() + self.size <= limit,
            _ => self.vertices().iter().all(|v| v.coords.norm() <= limit),
        }
    }

    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Circle => PI * self.size * self.size,
            Shape::Square => 4.0 * self.size * self.size,
            Shape::Triangle => 0.75 * 3f64.sqrt() * self.size * self.size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub inclusions: Vec<Inclusion>,
    pub background_sigma: f64,
}

impl PhantomSpec {
    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(TomoError::file(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.inclusions.iter().any(|inc| inc.contains(p))
    }

    /// Conductivity at `p`: the first inclusion containing it wins.
    pub fn sigma_at(&self, p: &Point) -> f64 {
        self.inclusions
            .iter()
            .find(|inc| inc.contains(p))
            .map_or(self.background_sigma, |inc| inc.sigma)
    }
}

/// Distribution of [`sample_phantom`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub min_count: usize,
    pub max_count: usize,
    pub min_size: f64,
    pub max_size: f64,
    pub inclusion_sigma: f64,
    pub background_sigma: f64,
    /// Clearance kept between inclusions and the electrode ring.
    pub margin: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            min_count: 1,
            max_count: 3,
            min_size: 0.1,
            max_size: 0.4,
            inclusion_sigma: 2.5,
            background_sigma: 1.0,
            margin: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TomoError::Config(msg));
        if self.min_count < 1 || self.min_count > self.max_count {
            return bad(format!("inclusion count range [{}, {}] is invalid", self.min_count, self.max_count));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return bad(format!("size range [{}, {}] is invalid", self.min_size, self.max_size));
        }
        if !(self.inclusion_sigma > 0.0 && self.background_sigma > 0.0) {
            return bad("conductivities must be positive".into());
        }
        if !(0.0..1.0).contains(&self.margin) {
            return bad(format!("margin {} must lie in [0, 1)", self.margin));
        }
        for shape in Shape::ALL {
            if self.min_size * shape.reach() > 1.0 - self.margin {
                return bad(format!(
                    "a {shape:?} of size {} cannot fit inside the disc with margin {}",
                    self.min_size, self.margin
                ));
            }
        }
        Ok(())
    }
}

/// Deterministic phantom for `seed`: inclusion count, shapes, sizes,
/// rotations and centres are all drawn uniformly; each inclusion is
/// re-drawn until it fits inside the disc.
pub fn sample_phantom(seed: u64, config: &PhantomConfig) -> Result<PhantomSpec> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(config.min_count..=config.max_count);
    let mut inclusions = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = Shape::ALL[rng.random_range(0..3)];
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let size = if config.max_size > config.min_size {
                rng.random_range(config.min_size..=config.max_size)
            } else {
                config.min_size
            };
            let rotation = match shape {
                Shape::Circle => 0.0,
                _ => rng.random_range(0.0..2.0 * PI),
            };
            let radius = rng.random::<f64>().sqrt();
            let angle = rng.random_range(0.0..2.0 * PI);
            let candidate = Inclusion {
                shape,
                center: [radius * angle.cos(), radius * angle.sin()],
                size,
                rotation,
                sigma: config.inclusion_sigma,
            };
            if candidate.fits(config.margin) {
                placed = Some(candidate);
                break;
            }
        }
        inclusions.push(placed.ok_or_else(|| {
            TomoError::Config(format!("could not place a {shape:?} within {MAX_ATTEMPTS} attempts"))
        })?);
    }
    Ok(PhantomSpec {
        inclusions,
        background_sigma: config.background_sigma,
    })
}

/// Element `k` takes the conductivity of the first inclusion containing its
/// centroid, else the background.
pub fn phantom_to_sigma(mesh: &DiscMesh, spec: &PhantomSpec) -> Result<ConductivityField> {
    ConductivityField::new(mesh.centroids().iter().map(|c| spec.sigma_at(c)).collect())
}

/// Binary ground truth: 1 where a pixel centre falls in any inclusion.
pub fn phantom_to_image(spec: &PhantomSpec) -> GrayImage {
    GrayImage::from_fn(IMAGE_SIZE, |p| {
        if p.coords.norm_squared() <= 1.0 && spec.contains(&p) {
            1.0
        } else {
            0.0
        }
    })
}
