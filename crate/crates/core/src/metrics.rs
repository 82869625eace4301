//! Full-reference image quality: RMSE, windowed SSIM and PSNR.

use crate::error::{Result, TomoError};
use crate::gray_image::GrayImage;

/// SSIM exponents, stabilizing constants and Gaussian window.
///
/// The per-window score is `l^alpha · c^beta · s^gamma` with
/// `l = (2μxμy + m1)/(μx² + μy² + m1)`, `c = (2σxσy + m2)/(σx² + σy² + m2)`
/// and `s = (σxy + m3)/(σxσy + m3)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub window: usize,
    pub sigma: f64,
}

impl SsimParams {
    /// Conventional constants scaled to the dynamic range `peak`, with the
    /// luminance term switched off.
    pub fn for_peak(peak: f64) -> Self {
        let m2 = (0.03 * peak).powi(2);
        Self {
            alpha: 0.0,
            beta: 1.0,
            gamma: 1.0,
            m1: (0.01 * peak).powi(2),
            m2,
            m3: m2 / 2.0,
            window: 11,
            sigma: 1.5,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
            return Err(TomoError::Config("SSIM exponents must be non-negative".into()));
        }
        if [self.m1, self.m2, self.m3].iter().any(|m| !(*m > 0.0 && m.is_finite())) {
            return Err(TomoError::Config("SSIM constants must be positive".into()));
        }
        if self.window == 0 || !(self.sigma > 0.0) {
            return Err(TomoError::Config("SSIM window must be non-empty with positive sigma".into()));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - c).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / sum).collect()
    }
}

impl Default for SsimParams {
    fn default() -> Self {
        Self::for_peak(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub rmse: f64,
    pub ssim: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub peakval: f64,
}

impl MetricReport {
    pub fn psnr_is_infinite(&self) -> bool {
        self.psnr == f64::INFINITY
    }
}

fn check_shapes(truth: &GrayImage, estimate: &GrayImage) -> Result<()> {
    if truth.shape() != estimate.shape() {
        let (h, w) = truth.shape();
        let (h2, w2) = estimate.shape();
        return Err(TomoError::shape(format!("{h}x{w} image"), format!("{h2}x{w2} image")));
    }
    Ok(())
}

pub fn mse(truth: &GrayImage, estimate: &GrayImage) -> Result<f64> {
    check_shapes(truth, estimate)?;
    let n = truth.pixels().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = truth.pixels().iter().zip(estimate.pixels()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n as f64)
}

pub fn rmse(truth: &GrayImage, estimate: &GrayImage) -> Result<f64> {
    Ok(mse(truth, estimate)?.sqrt())
}

/// `10·log10(peak²/MSE)`; `+inf` when the images are identical.
pub fn psnr(truth: &GrayImage, estimate: &GrayImage, peakval: f64) -> Result<f64> {
    if !(peakval > 0.0 && peakval.is_finite()) {
        return Err(TomoError::Config(format!("peakval must be positive, got {peakval}")));
    }
    let e = mse(truth, estimate)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peakval * peakval / e).log10())
}

/// Sign-preserving power so negative structure terms survive fractional
/// exponents; `x^0 = 1` and `x^1 = x` exactly.
fn signed_pow(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else if e == 1.0 {
        x
    } else {
        x.signum() * x.abs().powf(e)
    }
}

/// Separable weighted sums over every fully contained window position.
fn filter_valid(data: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let ow = width - k + 1;
    let oh = height - k + 1;
    let mut rows = vec![0.0; height * ow];
    for r in 0..height {
        let line = &data[r * width..(r + 1) * width];
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().zip(&line[c..c + k]).map(|(w, v)| w * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(i, w)| w * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions.
pub fn ssim(truth: &GrayImage, estimate: &GrayImage, params: &SsimParams) -> Result<f64> {
    check_shapes(truth, estimate)?;
    params.validate()?;
    let (h, w) = truth.shape();
    if h < params.window || w < params.window {
        return Err(TomoError::shape(
            format!("images at least {0}x{0}", params.window),
            format!("{h}x{w} image"),
        ));
    }
    let taps = params.taps();
    let x = truth.pixels();
    let y = estimate.pixels();
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect::<Vec<_>>();
    let mx = filter_valid(x, w, h, &taps);
    let my = filter_valid(y, w, h, &taps);
    let mxx = filter_valid(&prod(|a, _| a * a), w, h, &taps);
    let myy = filter_valid(&prod(|_, b| b * b), w, h, &taps);
    let mxy = filter_valid(&prod(|a, b| a * b), w, h, &taps);

    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = (mxx[i] - ux * ux).max(0.0);
        let vy = (myy[i] - uy * uy).max(0.0);
        let cov = mxy[i] - ux * uy;
        let (sx, sy) = (vx.sqrt(), vy.sqrt());
        let l = (2.0 * ux * uy + params.m1) / (ux * ux + uy * uy + params.m1);
        let c = (2.0 * sx * sy + params.m2) / (vx + vy + params.m2);
        let s = (cov + params.m3) / (sx * sy + params.m3);
        total += signed_pow(l, params.alpha) * signed_pow(c, params.beta) * signed_pow(s, params.gamma);
    }
    Ok((total / mx.len() as f64).clamp(-1.0, 1.0))
}

/// All three metrics with default SSIM constants scaled to `peakval`.
pub fn evaluate(truth: &GrayImage, estimate: &GrayImage, peakval: f64) -> Result<MetricReport> {
    Ok(MetricReport {
        rmse: rmse(truth, estimate)?,
        ssim: ssim(truth, estimate, &SsimParams::for_peak(peakval))?,
        psnr: psnr(truth, estimate, peakval)?,
        peakval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(size: usize, seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_pixels(size, size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn constant(size: usize, v: f64) -> GrayImage {
        GrayImage::from_pixels(size, size, vec![v; size * size]).unwrap()
    }

    fn checkerboard(size: usize, cell: usize) -> GrayImage {
        let px = (0..size * size)
            .map(|i| (((i / size) / cell + (i % size) / cell) % 2) as f64)
            .collect();
        GrayImage::from_pixels(size, size, px).unwrap()
    }

    fn invert(img: &GrayImage) -> GrayImage {
        GrayImage::from_pixels(img.width(), img.height(), img.pixels().iter().map(|v| 1.0 - v).collect()).unwrap()
    }

    /// Direct per-window evaluation with a 2-D kernel.
    fn ssim_oracle(x: &GrayImage, y: &GrayImage, p: &SsimParams) -> f64 {
        let t = p.taps();
        let k = p.window;
        let (h, w) = x.shape();
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..=h - k {
            for c in 0..=w - k {
                let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let wt = t[i] * t[j];
                        let a = x.get(r + i, c + j);
                        let b = y.get(r + i, c + j);
                        ux += wt * a;
                        uy += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                let vx = (xx - ux * ux).max(0.0);
                let vy = (yy - uy * uy).max(0.0);
                let cov = xy - ux * uy;
                let cterm = (2.0 * (vx * vy).sqrt() + p.m2) / (vx + vy + p.m2);
                let sterm = (cov + p.m3) / ((vx * vy).sqrt() + p.m3);
                total += cterm * sterm;
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images() {
        let x = random_image(64, 1);
        assert_eq!(rmse(&x, &x).unwrap(), 0.0);
        assert!((ssim(&x, &x, &SsimParams::default()).unwrap() - 1.0).abs() <= 1e-12);
        let report = evaluate(&x, &x, 1.0).unwrap();
        assert!(report.psnr_is_infinite());
    }

    #[test]
    fn zeros_against_ones() {
        let (a, b) = (constant(32, 0.0), constant(32, 1.0));
        assert_eq!(rmse(&a, &b).unwrap(), 1.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rmse_matches_double_loop() {
        let (a, b) = (random_image(40, 2), random_image(40, 3));
        let mut acc = 0.0;
        for r in 0..40 {
            for c in 0..40 {
                acc += (a.get(r, c) - b.get(r, c)).powi(2);
            }
        }
        assert!((rmse(&a, &b).unwrap() - (acc / 1600.0).sqrt()).abs() <= 1e-12);
    }

    #[test]
    fn psnr_of_known_mse_is_twenty_db() {
        let a = constant(16, 0.2);
        let b = constant(16, 0.3);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_uses_squared_peak() {
        let a = constant(16, 0.2);
        let b = constant(16, 0.3);
        let gain = psnr(&a, &b, 2.0).unwrap() - psnr(&a, &b, 1.0).unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let truth = random_image(64, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..64 * 64).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut last = f64::INFINITY;
        for level in [0.01, 0.05, 0.1, 0.2, 0.4] {
            let px = truth.pixels().iter().zip(&noise).map(|(v, n)| (v + level * n).clamp(0.0, 1.0)).collect();
            let est = GrayImage::from_pixels(64, 64, px).unwrap();
            let p = psnr(&truth, &est, 1.0).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_matches_windowed_oracle() {
        let p = SsimParams::default();
        let (a, b) = (random_image(24, 6), random_image(24, 7));
        assert!((ssim(&a, &b, &p).unwrap() - ssim_oracle(&a, &b, &p)).abs() <= 1e-12);
    }

    #[test]
    fn ssim_of_inverted_binary_image_is_low() {
        let x = checkerboard(64, 4);
        let p = SsimParams::default();
        let v = ssim(&x, &invert(&x), &p).unwrap();
        assert!(v < 0.1, "{v}");
        assert!((v - ssim_oracle(&x, &invert(&x), &p)).abs() <= 1e-12);
    }

    #[test]
    fn ssim_ignores_luminance_offset() {
        let v = ssim(&constant(32, 0.2), &constant(32, 0.7), &SsimParams::default()).unwrap();
        assert!((v - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn ssim_shift_invariance() {
        let p = SsimParams::default();
        let scale = |img: &GrayImage, s: f64, o: f64| {
            GrayImage::from_pixels(img.width(), img.height(), img.pixels().iter().map(|v| v * s + o).collect()).unwrap()
        };
        let a = scale(&random_image(48, 8), 0.5, 0.0);
        let b = scale(&random_image(48, 9), 0.5, 0.0);
        let base = ssim(&a, &b, &p).unwrap();
        let shifted = ssim(&scale(&a, 1.0, 0.3), &scale(&b, 1.0, 0.3), &p).unwrap();
        assert!((base - shifted).abs() <= 1e-6);
    }

    #[test]
    fn invalid_parameters_and_shapes() {
        let a = random_image(16, 10);
        let bad = SsimParams {
            m2: 0.0,
            ..SsimParams::default()
        };
        assert!(ssim(&a, &a, &bad).is_err());
        assert!(ssim(&a, &random_image(8, 11), &SsimParams::default()).is_err());
        assert!(rmse(&a, &random_image(8, 11)).is_err());
        assert!(ssim(&random_image(8, 12), &random_image(8, 13), &SsimParams::default()).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(s1 in 0u64..10_000, s2 in 0u64..10_000) {
            let (a, b) = (random_image(20, s1), random_image(20, s2));
            let p = SsimParams::default();
            let ab = ssim(&a, &b, &p).unwrap();
            let ba = ssim(&b, &a, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() <= 1e-12);
            prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        }
    }
}
