//! Manifest-driven scoring and figure grids.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use tomo_core::dataset::{read_manifest, ManifestRecord, Split};
use tomo_core::metrics::evaluate;
use tomo_core::{Algorithm, GrayImage};

/// Pixels between grid tiles and around the border.
pub const GRID_GAP: usize = 8;
/// Fill value of the gaps.
pub const GRID_FILL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Rmse,
    Ssim,
    Psnr,
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rmse" => Ok(Metric::Rmse),
            "ssim" => Ok(Metric::Ssim),
            "psnr" => Ok(Metric::Psnr),
            _ => Err(format!("unknown metric {s:?} (expected rmse, ssim or psnr)")),
        }
    }
}

pub fn fmt_value(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else {
        format!("{v:.6}")
    }
}

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub id: u64,
    pub algorithm: Algorithm,
    pub split: Split,
    pub rmse: f64,
    pub ssim: f64,
    pub psnr: f64,
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load(path: &Path) -> Result<GrayImage> {
    GrayImage::load_png(path).with_context(|| format!("reading {}", path.display()))
}

/// Enhanced counterpart of a record's input: same file name, other directory.
fn enhanced_path(dir: &Path, record: &ManifestRecord) -> Result<PathBuf> {
    let name = Path::new(&record.input_image)
        .file_name()
        .ok_or_else(|| anyhow!("record {} has no input file name", record.id))?;
    Ok(dir.join(name))
}

/// Scores every record (optionally one split), in manifest order.
pub fn batch_eval(manifest: &Path, split: Option<Split>, enhanced: Option<&Path>, peak: f64) -> Result<Vec<EvalRow>> {
    let base = base_dir(manifest);
    let records = read_manifest(manifest)?;
    records
        .par_iter()
        .filter(|r| split.is_none_or(|s| r.split == s))
        .map(|r| {
            let truth = load(&base.join(&r.target_image))?;
            let pred = match enhanced {
                Some(dir) => load(&enhanced_path(dir, r)?)?,
                None => load(&base.join(&r.input_image))?,
            };
            let m = evaluate(&truth, &pred, peak).with_context(|| format!("scoring record {} ({})", r.id, r.algorithm))?;
            Ok(EvalRow {
                id: r.id,
                algorithm: r.algorithm,
                split: r.split,
                rmse: m.rmse,
                ssim: m.ssim,
                psnr: m.psnr,
            })
        })
        .collect()
}

fn mean_row(label: &str, rows: &[&EvalRow]) -> String {
    let n = rows.len() as f64;
    let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    format!(
        "mean,{label},,{},{},{}\n",
        fmt_value(mean(|r| r.rmse)),
        fmt_value(mean(|r| r.ssim)),
        fmt_value(mean(|r| r.psnr))
    )
}

/// One row per pair, then a mean row per algorithm and an overall mean row.
pub fn to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("id,algorithm,split,rmse,ssim,psnr_db\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            r.algorithm,
            r.split,
            fmt_value(r.rmse),
            fmt_value(r.ssim),
            fmt_value(r.psnr)
        ));
    }
    for algorithm in Algorithm::ALL {
        let group: Vec<&EvalRow> = rows.iter().filter(|r| r.algorithm == algorithm).collect();
        if !group.is_empty() {
            out.push_str(&mean_row(algorithm.name(), &group));
        }
    }
    if !rows.is_empty() {
        out.push_str(&mean_row("all", &rows.iter().collect::<Vec<_>>()));
    }
    out
}

pub struct Grid {
    pub image: GrayImage,
    pub row_labels: Vec<String>,
}

/// Tiles one column per id: ground truth on top, then one row per algorithm,
/// then for each enhanced directory one row per algorithm.
pub fn compare_grid(manifest: &Path, ids: &[u64], algos: &[Algorithm], enhanced: &[PathBuf]) -> Result<Grid> {
    if ids.is_empty() {
        bail!("no ids given");
    }
    let base = base_dir(manifest);
    let records = read_manifest(manifest)?;
    let algos: Vec<Algorithm> = if algos.is_empty() {
        Algorithm::ALL
            .into_iter()
            .filter(|a| records.iter().any(|r| r.algorithm == *a))
            .collect()
    } else {
        algos.to_vec()
    };
    let find = |id: u64, algorithm: Algorithm| {
        records
            .iter()
            .find(|r| r.id == id && r.algorithm == algorithm)
            .ok_or_else(|| anyhow!("manifest has no {algorithm} record for id {id}"))
    };

    let mut row_labels = vec!["truth".to_string()];
    let mut rows: Vec<Vec<PathBuf>> = Vec::new();
    let mut truth = Vec::new();
    for &id in ids {
        let record = find(id, algos[0])?;
        truth.push(base.join(&record.target_image));
    }
    rows.push(truth);
    for &algorithm in &algos {
        row_labels.push(algorithm.to_string());
        rows.push(ids.iter().map(|&id| Ok(base.join(&find(id, algorithm)?.input_image))).collect::<Result<_>>()?);
    }
    for dir in enhanced {
        for &algorithm in &algos {
            row_labels.push(format!("{algorithm}@{}", dir.display()));
            rows.push(ids.iter().map(|&id| enhanced_path(dir, find(id, algorithm)?)).collect::<Result<_>>()?);
        }
    }

    let tile = tomo_core::gray_image::IMAGE_SIZE;
    let width = ids.len() * tile + (ids.len() + 1) * GRID_GAP;
    let height = rows.len() * tile + (rows.len() + 1) * GRID_GAP;
    let mut image = GrayImage::from_pixels(width, height, vec![GRID_FILL; width * height])?;
    for (ri, row) in rows.iter().enumerate() {
        for (ci, path) in row.iter().enumerate() {
            let img = load(path)?;
            if img.shape() != (tile, tile) {
                bail!("{} is {:?}, expected {tile}x{tile}", path.display(), img.shape());
            }
            let (y0, x0) = (GRID_GAP + ri * (tile + GRID_GAP), GRID_GAP + ci * (tile + GRID_GAP));
            for r in 0..tile {
                for c in 0..tile {
                    image.set(y0 + r, x0 + c, img.get(r, c));
                }
            }
        }
    }
    Ok(Grid { image, row_labels })
}
