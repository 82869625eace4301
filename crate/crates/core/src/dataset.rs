//! Paired corpus generation: for each phantom, one ground-truth image and
//! one reconstruction image per requested algorithm, plus a JSON Lines
//! manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! inputs/{id}_{algo}.png
//! targets/{id}.png
//! manifest.jsonl
//! config.json
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TomoError};
use crate::forward::{simulate_frame, MeasurementProtocol, ProtocolKind};
use crate::mesh::{build_disc_mesh, MeshParams};
use crate::phantom::{phantom_to_image, phantom_to_sigma, sample_phantom, PhantomConfig, PhantomSpec};
use crate::recon::{Algorithm, Rasterizer, ReconConfig, Reconstructor};
use crate::sensitivity::{compute_sensitivity, load_or_compute, normalize_frame, reference_frame};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const INPUT_DIR: &str = "inputs";
pub const TARGET_DIR: &str = "targets";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = TomoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(TomoError::Config(format!("unknown split {s:?} (expected train or test)"))),
        }
    }
}

/// Everything that determines a corpus. Written verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Number of phantoms; each yields one target and one input per algorithm.
    pub count: usize,
    pub algorithms: Vec<Algorithm>,
    pub base_seed: u64,
    pub test_fraction: f64,
    pub mesh: MeshParams,
    pub protocol: ProtocolKind,
    pub phantom: PhantomConfig,
    /// Shared reconstruction settings; the `algorithm` field is ignored.
    pub recon: ReconConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            count: 6000,
            algorithms: Algorithm::ALL.to_vec(),
            base_seed: 42,
            test_fraction: 0.3,
            mesh: MeshParams::default(),
            protocol: ProtocolKind::Adjacent,
            phantom: PhantomConfig::default(),
            recon: ReconConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(TomoError::Config("count must be at least 1".into()));
        }
        if self.algorithms.is_empty() {
            return Err(TomoError::Config("at least one algorithm is required".into()));
        }
        let mut seen = self.algorithms.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.algorithms.len() {
            return Err(TomoError::Config("algorithms must not repeat".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TomoError::Config(format!("test fraction {} must lie in [0, 1)", self.test_fraction)));
        }
        self.phantom.validate()
    }
}

/// One (input, target) pair. `id` is the phantom index, shared by the
/// records of every algorithm run on that phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: u64,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub algorithm: Algorithm,
    /// Relative to the corpus directory.
    pub input_image: String,
    pub target_image: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub config: DatasetConfig,
}

pub fn input_path(id: u64, algorithm: Algorithm) -> String {
    format!("{INPUT_DIR}/{id}_{algorithm}.png")
}

pub fn target_path(id: u64) -> String {
    format!("{TARGET_DIR}/{id}.png")
}

/// Offset in `[0, 1)` derived from the base seed.
fn split_phase(base_seed: u64) -> f64 {
    let digest = Sha256::digest(base_seed.to_le_bytes());
    let bits = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    (bits >> 11) as f64 / (1u64 << 53) as f64
}

/// Train/test assignment of phantom `id`.
///
/// `id` is in the test split when `⌊(id+1)f + θ⌋ − ⌊id·f + θ⌋ = 1`, a
/// Beatty-style sequence with phase `θ` hashed from the base seed. Every
/// prefix `0..n` then holds `n·f` test ids to within one, and growing the
/// corpus never reassigns an existing id.
pub fn split_assignment(id: u64, base_seed: u64, test_fraction: f64) -> Split {
    if !(test_fraction > 0.0) {
        return Split::Train;
    }
    let theta = split_phase(base_seed);
    let lo = (id as f64 * test_fraction + theta).floor();
    let hi = ((id + 1) as f64 * test_fraction + theta).floor();
    if hi > lo {
        Split::Test
    } else {
        Split::Train
    }
}

/// Generates the corpus into `out_dir`. The sensitivity matrix is read from
/// or stored in `cache_dir` when given.
///
/// Samples run in parallel on the current rayon pool; the output is a pure
/// function of `config`.
pub fn generate_dataset(config: &DatasetConfig, out_dir: &Path, cache_dir: Option<&Path>) -> Result<DatasetManifest> {
    config.validate()?;
    let mesh = build_disc_mesh(&config.mesh)?;
    let protocol = MeasurementProtocol::new(config.protocol, config.mesh.n_electrodes)?;
    let background = config.phantom.background_sigma;
    let reference = reference_frame(&mesh, background, &protocol)?;
    let s = match cache_dir {
        Some(dir) => load_or_compute(&mesh, &protocol, background, dir)?,
        None => compute_sensitivity(&mesh, background, &protocol)?,
    };
    let reconstructor = Reconstructor::new(s, config.recon.clone(), &config.algorithms)?;
    let rasterizer = Rasterizer::new(&mesh);

    for sub in [INPUT_DIR, TARGET_DIR] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(TomoError::file(&dir))?;
    }

    let per_sample: Vec<Vec<ManifestRecord>> = (0..config.count as u64)
        .into_par_iter()
        .map(|id| {
            let seed = config.base_seed.wrapping_add(id);
            let run = || -> Result<Vec<ManifestRecord>> {
                let phantom = sample_phantom(seed, &config.phantom)?;
                let field = phantom_to_sigma(&mesh, &phantom)?;
                let frame = simulate_frame(&mesh, &field, &protocol)?;
                let u = normalize_frame(&frame, &reference)?;
                let target = target_path(id);
                phantom_to_image(&phantom).save_png(out_dir.join(&target))?;
                let split = split_assignment(id, config.base_seed, config.test_fraction);
                config
                    .algorithms
                    .iter()
                    .map(|&algorithm| {
                        let g = reconstructor.reconstruct(&u, algorithm)?;
                        let input = input_path(id, algorithm);
                        rasterizer.render(&g)?.save_png(out_dir.join(&input))?;
                        Ok(ManifestRecord {
                            id,
                            seed,
                            phantom: phantom.clone(),
                            algorithm,
                            input_image: input,
                            target_image: target.clone(),
                            split,
                        })
                    })
                    .collect()
            };
            run().map_err(|e| TomoError::Sample { id, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let records: Vec<ManifestRecord> = per_sample.into_iter().flatten().collect();

    let mut manifest = String::new();
    for r in &records {
        manifest.push_str(&serde_json::to_string(r)?);
        manifest.push('\n');
    }
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(TomoError::file(&path))?;
    let path = out_dir.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(config)? + "\n").map_err(TomoError::file(&path))?;

    Ok(DatasetManifest {
        records,
        config: config.clone(),
    })
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(TomoError::file(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(TomoError::file(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| TomoError::Format {
            kind: "manifest",
            reason: format!("line {}: {e}", n + 1),
        })?;
        out.push(record);
    }
    Ok(out)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(TomoError::file(dir))? {
        let path = entry.map_err(TomoError::file(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 over every file's relative path and contents, in sorted path
/// order. Hex encoded.
pub fn corpus_hash(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for rel in files {
        let name = rel.to_string_lossy().replace('\\', "/");
        let full = dir.join(&rel);
        let data = fs::read(&full).map_err(TomoError::file(&full))?;
        hasher.update((name.len() as u64).to_le_bytes());
        hasher.update(name.as_bytes());
        hasher.update((data.len() as u64).to_le_bytes());
        hasher.update(&data);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
