//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Failures only change the exit status when `TOMO_ACCEPTANCE_STRICT=1`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomo_core::dataset::{corpus_hash, generate_dataset, DatasetConfig};
use tomo_core::forward::simulate_frame;
use tomo_core::mesh::build_disc_mesh;
use tomo_core::metrics::{psnr, rmse, ssim, SsimParams};
use tomo_core::phantom::{phantom_to_sigma, sample_phantom};
use tomo_core::recon::{landweber_raw, landweber_residuals, max_step_size, tikhonov_raw};
use tomo_core::sensitivity::{compute_sensitivity, normalize_frame, reference_frame};
use tomo_core::{
    Algorithm, ConductivityField, GrayImage, MeasurementProtocol, MeshParams, NormalizedFrame, PhantomConfig,
    SensitivityMatrix,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn reciprocity() -> Outcome {
    let mesh = build_disc_mesh(&MeshParams::default()).map_err(|e| e.to_string())?;
    let p = MeasurementProtocol::adjacent(32).map_err(|e| e.to_string())?;
    let field = ConductivityField::uniform(mesh.n_triangles(), 1.0).unwrap();
    let frame = simulate_frame(&mesh, &field, &p).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for m in 0..p.len() {
        let r = p.reciprocal_index(m).ok_or(format!("measurement {m} has no reciprocal"))?;
        let (x, y) = (frame.values[m], frame.values[r]);
        worst = worst.max((x - y).abs() / x.abs().max(y.abs()));
    }
    check(
        worst <= 1e-8,
        format!("{} elements, {} pairs, worst relative gap {worst:.2e}", mesh.n_triangles(), p.len()),
    )
}

fn rotation() -> Outcome {
    let mesh = build_disc_mesh(&MeshParams::default()).map_err(|e| e.to_string())?;
    let p = MeasurementProtocol::adjacent(32).map_err(|e| e.to_string())?;
    let field = ConductivityField::uniform(mesh.n_triangles(), 1.0).unwrap();
    let frame = simulate_frame(&mesh, &field, &p).map_err(|e| e.to_string())?;
    let scale = frame.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let perm = p.rotation_permutation(1);
    let worst = perm
        .iter()
        .enumerate()
        .map(|(m, &r)| (frame.values[m] - frame.values[r]).abs() / scale)
        .fold(0.0, f64::max);
    check(worst <= 1e-6, format!("worst relative deviation {worst:.2e}"))
}

fn sensitivity_oracle() -> Outcome {
    let mesh = build_disc_mesh(&MeshParams::default()).map_err(|e| e.to_string())?;
    let p = MeasurementProtocol::adjacent(32).map_err(|e| e.to_string())?;
    let s = compute_sensitivity(&mesh, 1.0, &p).map_err(|e| e.to_string())?;
    let reference = reference_frame(&mesh, 1.0, &p).map_err(|e| e.to_string())?;
    let floor = 1e-3 * s.entries().amax();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut pairs = Vec::new();
    while pairs.len() < 60 {
        let (m, k) = (rng.random_range(0..p.len()), rng.random_range(0..mesh.n_triangles()));
        if s.entries()[(m, k)].abs() >= floor && !pairs.iter().any(|&(_, kk)| kk == k) {
            pairs.push((m, k));
        }
    }
    let perturbed = |k: usize, factor: f64| -> Result<NormalizedFrame, String> {
        let mut sigma = vec![1.0; mesh.n_triangles()];
        sigma[k] = factor;
        let frame = simulate_frame(&mesh, &ConductivityField::new(sigma).unwrap(), &p).map_err(|e| e.to_string())?;
        normalize_frame(&frame, &reference).map_err(|e| e.to_string())
    };
    let (mut worst, mut worst_one_sided) = (0.0f64, 0.0f64);
    for &(m, k) in &pairs {
        let (up, down) = (perturbed(k, 1.01)?, perturbed(k, 0.99)?);
        let exact = s.entries()[(m, k)];
        let central = (up.values()[m] - down.values()[m]) / 0.02;
        let one_sided = up.values()[m] / 0.01;
        worst = worst.max((central - exact).abs() / exact.abs());
        worst_one_sided = worst_one_sided.max((one_sided - exact).abs() / exact.abs());
    }
    check(
        worst <= 1e-2,
        format!(
            "{} pairs with |S| >= 1e-3 max, worst relative error {worst:.2e} (+-1%), {worst_one_sided:.2e} (+1% only)",
            pairs.len()
        ),
    )
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

fn landweber() -> Outcome {
    let mesh = build_disc_mesh(&MeshParams::default()).map_err(|e| e.to_string())?;
    let p = MeasurementProtocol::adjacent(32).map_err(|e| e.to_string())?;
    let s = compute_sensitivity(&mesh, 1.0, &p).map_err(|e| e.to_string())?;
    let reference = reference_frame(&mesh, 1.0, &p).map_err(|e| e.to_string())?;
    let spec = sample_phantom(7, &PhantomConfig::default()).map_err(|e| e.to_string())?;
    let frame = simulate_frame(&mesh, &phantom_to_sigma(&mesh, &spec).unwrap(), &p).map_err(|e| e.to_string())?;
    let u = normalize_frame(&frame, &reference).map_err(|e| e.to_string())?;
    let alpha = max_step_size(&s).map_err(|e| e.to_string())?;
    let residuals = landweber_residuals(&u, &s, 200, alpha).map_err(|e| e.to_string())?;
    let worst_rise = residuals.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
    let monotone = worst_rise <= 1e-12;

    let a = random_matrix(10, 20, 99);
    let truth = DVector::from_fn(20, |i, _| (i as f64 * 0.61).cos());
    let small_u = NormalizedFrame::from_values((&a * &truth).as_slice().to_vec());
    let small = SensitivityMatrix::from_matrix(a.clone(), 1.0).unwrap();
    let oracle = a.transpose() * (&a * a.transpose()).lu().solve(small_u.values()).ok_or("singular SSᵀ")?;
    let g = landweber_raw(&small_u, &small, 10_000, max_step_size(&small).unwrap()).map_err(|e| e.to_string())?;
    let gap = (&g - &oracle).amax();
    check(
        monotone && gap <= 1e-4,
        format!("largest residual rise {worst_rise:.2e} over 200 iterations; 10x20 gap to min-norm oracle {gap:.2e}"),
    )
}

fn tikhonov() -> Outcome {
    let mut worst = 0.0f64;
    for (seed, lambda) in [(1u64, 1e-3), (2, 1e-1), (3, 10.0)] {
        let a = random_matrix(10, 20, 500 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = NormalizedFrame::from_values((0..10).map(|_| rng.random::<f64>() - 0.5).collect::<Vec<_>>());
        let normal = a.tr_mul(&a) + DMatrix::identity(20, 20) * lambda;
        let oracle = normal.try_inverse().ok_or("singular normal matrix")? * a.tr_mul(u.values());
        let g = tikhonov_raw(&u, &SensitivityMatrix::from_matrix(a, 1.0).unwrap(), lambda).map_err(|e| e.to_string())?;
        worst = worst.max((g - oracle).amax());
    }
    check(worst <= 1e-10, format!("worst max-abs gap {worst:.2e} over lambda in {{1e-3, 1e-1, 10}}"))
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = GrayImage::from_pixels(256, 256, (0..65536).map(|_| rng.random::<f64>()).collect()).unwrap();
    let same = ssim(&x, &x, &SsimParams::default()).map_err(|e| e.to_string())?;
    let zero = rmse(&x, &x).map_err(|e| e.to_string())?;
    let (black, white) = (GrayImage::zeros(256, 256), GrayImage::from_pixels(256, 256, vec![1.0; 65536]).unwrap());
    let db = psnr(&black, &white, 1.0).map_err(|e| e.to_string())?;
    let noise: Vec<f64> = (0..65536).map(|_| rng.random::<f64>() - 0.5).collect();
    let sweep: Vec<f64> = [0.02, 0.05, 0.1, 0.2, 0.4]
        .iter()
        .map(|level| {
            let px = x.pixels().iter().zip(&noise).map(|(v, n)| (v + level * n).clamp(0.0, 1.0)).collect();
            psnr(&x, &GrayImage::from_pixels(256, 256, px).unwrap(), 1.0).unwrap()
        })
        .collect();
    let decreasing = sweep.windows(2).all(|w| w[1] < w[0]);
    check(
        (same - 1.0).abs() <= 1e-12 && zero == 0.0 && db == 0.0 && decreasing,
        format!(
            "ssim(x,x)-1 = {:.1e}, rmse(x,x) = {zero}, psnr(0,1) = {db} dB, sweep {:?}",
            same - 1.0,
            sweep.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn tomo(args: &[&str], cache: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tomo"))
        .args(args)
        .env("TOMO_CACHE_DIR", cache)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("tomo {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(())
}

fn reproducibility(work: &Path) -> Outcome {
    let cache = work.join("cache");
    let run = |name: &str, extra: &[&str]| -> Result<String, String> {
        let dir = work.join(name);
        let dir_s = dir.to_str().unwrap().to_string();
        let mut args = vec!["dataset", "gen", "--count", "50", "--seed", "42", "--quiet", "--out-dir", &dir_s];
        args.extend_from_slice(extra);
        tomo(&args, &cache)?;
        corpus_hash(&dir).map_err(|e| e.to_string())
    };
    let a = run("a", &[])?;
    let b = run("b", &[])?;
    let t1 = run("t1", &["--threads", "1"])?;
    let t8 = run("t8", &["--threads", "8"])?;
    check(
        a == b && t1 == t8 && a == t1,
        format!("hashes {}, {}, threads 1 {}, threads 8 {}", &a[..12], &b[..12], &t1[..12], &t8[..12]),
    )
}

fn ssim_ordering(work: &Path) -> Outcome {
    let dir = work.join("ordering");
    let config = DatasetConfig {
        count: 100,
        ..DatasetConfig::default()
    };
    let manifest = generate_dataset(&config, &dir, Some(&work.join("cache"))).map_err(|e| e.to_string())?;
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for r in &manifest.records {
        let truth = GrayImage::load_png(dir.join(&r.target_image)).map_err(|e| e.to_string())?;
        let pred = GrayImage::load_png(dir.join(&r.input_image)).map_err(|e| e.to_string())?;
        let i = Algorithm::ALL.iter().position(|a| *a == r.algorithm).unwrap();
        sums[i] += ssim(&truth, &pred, &SsimParams::default()).map_err(|e| e.to_string())?;
        counts[i] += 1;
    }
    let mean = |i: usize| sums[i] / counts[i] as f64;
    let (lbp, lw, tk) = (mean(0), mean(1), mean(2));
    check(
        lbp <= lw && lbp <= tk,
        format!("mean SSIM lbp {lbp:.4}, landweber {lw:.4}, tikhonov {tk:.4}"),
    )
}

fn main() {
    // The harness passes filter arguments; a listing request gets an empty list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let work = tempfile::tempdir().expect("temp dir");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("reciprocity", Box::new(reciprocity)),
        ("rotational symmetry", Box::new(rotation)),
        ("sensitivity oracle", Box::new(sensitivity_oracle)),
        ("landweber", Box::new(landweber)),
        ("tikhonov", Box::new(tikhonov)),
        ("metrics", Box::new(metrics)),
        ("dataset reproducibility", Box::new(|| reproducibility(work.path()))),
        ("ssim ordering lbp <= landweber, tikhonov", Box::new(|| ssim_ordering(work.path()))),
    ];
    let mut failed = 0;
    for (name, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 && std::env::var("TOMO_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
