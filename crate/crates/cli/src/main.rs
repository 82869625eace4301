//! `tomo`: simulate, reconstruct and score tomography images from the shell.
//!
//! Machine-readable results go to stdout, diagnostics to stderr. Exit codes:
//! 0 on success, 2 on a usage error, 1 when a stage fails at runtime.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tomo_core::dataset::{generate_dataset, DatasetConfig, Split};
use tomo_core::forward::simulate_frame;
use tomo_core::mesh::build_disc_mesh;
use tomo_core::metrics::{psnr, rmse, ssim, SsimParams};
use tomo_core::phantom::{phantom_to_image, phantom_to_sigma, sample_phantom};
use tomo_core::recon::{reconstruct, Rasterizer};
use tomo_core::sensitivity::{default_cache_dir, load_or_compute, normalize_frame, reference_frame};
use tomo_core::{
    Algorithm, ConductivityField, DiscMesh, GrayImage, MeasurementProtocol, MeshParams, PhantomConfig, PhantomSpec,
    ProtocolKind, ReconConfig, SensitivityMatrix, VoltageFrame,
};

#[derive(Parser, Debug)]
#[command(name = "tomo", version, about = "Electrical resistance tomography simulation and reconstruction")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the structured disc mesh.
    Mesh(MeshArgs),
    /// Sample a random phantom, or render one to a ground-truth image.
    Phantom(PhantomCmd),
    /// Simulate a voltage frame for a conductivity field.
    Simulate(SimulateArgs),
    /// Compute the sensitivity matrix at a homogeneous background.
    Sensitivity(SensitivityArgs),
    /// Reconstruct an image from a voltage frame.
    Reconstruct(ReconstructArgs),
    /// Paired corpus generation.
    Dataset {
        #[command(subcommand)]
        command: DatasetCmd,
    },
    /// Score images: one pair, or every pair in a manifest.
    Eval(EvalArgs),
    /// Assemble a figure grid of truth, reconstructions and enhanced images.
    Compare(CompareArgs),
}

#[derive(Args, Debug, Clone)]
struct MeshOpts {
    /// Number of concentric node rings.
    #[arg(long, default_value_t = 16)]
    rings: usize,
    /// Number of boundary electrodes.
    #[arg(long, default_value_t = 32)]
    electrodes: usize,
    /// Fraction of the boundary covered by electrodes.
    #[arg(long, default_value_t = 0.5)]
    coverage: f64,
}

impl MeshOpts {
    fn params(&self) -> MeshParams {
        MeshParams {
            n_rings: self.rings,
            n_electrodes: self.electrodes,
            electrode_coverage: self.coverage,
        }
    }
}

#[derive(Args, Debug)]
struct MeshArgs {
    #[command(flatten)]
    mesh: MeshOpts,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
struct PhantomCmd {
    #[command(subcommand)]
    render: Option<PhantomRender>,
    /// Phantom JSON output; printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PhantomRender {
    /// Render a phantom JSON to a 256x256 ground-truth PNG.
    Render {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    mesh: PathBuf,
    /// Per-element conductivity JSON: {"sigma": [...]}.
    #[arg(long, conflicts_with = "phantom", required_unless_present = "phantom")]
    sigma: Option<PathBuf>,
    /// Phantom JSON, mapped onto the mesh.
    #[arg(long)]
    phantom: Option<PathBuf>,
    #[arg(long, default_value = "adjacent")]
    protocol: ProtocolKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SensitivityArgs {
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value = "adjacent")]
    protocol: ProtocolKind,
    #[arg(long, default_value_t = 1.0)]
    background: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct ReconOpts {
    /// Landweber iterations.
    #[arg(long, default_value_t = 200)]
    iters: usize,
    /// Landweber gain; defaults to 1/‖SᵀS‖₂.
    #[arg(long)]
    step_size: Option<f64>,
    /// Tikhonov weight; defaults to 1e-2·trace(SᵀS)/K.
    #[arg(long)]
    lambda: Option<f64>,
    /// Threshold the rescaled image at 0.5.
    #[arg(long)]
    binarize: bool,
    /// Skip clamping the rescaled image to [0, 1].
    #[arg(long)]
    no_clamp: bool,
}

impl ReconOpts {
    fn config(&self, algorithm: Algorithm) -> ReconConfig {
        ReconConfig {
            algorithm,
            iterations: self.iters,
            step_size: self.step_size,
            lambda: self.lambda,
            clamp: !self.no_clamp,
            binarize: self.binarize,
        }
    }
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[arg(long, default_value = "landweber")]
    algo: Algorithm,
    #[command(flatten)]
    recon: ReconOpts,
    /// Measured frame.
    #[arg(long)]
    frame: PathBuf,
    /// Homogeneous reference frame; simulated from the mesh when absent.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    sens: PathBuf,
    #[arg(long)]
    mesh: PathBuf,
    #[arg(long, default_value = "adjacent")]
    protocol: ProtocolKind,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Generate paired reconstruction/ground-truth images. `--count` counts
    /// phantoms; each phantom yields one input image per algorithm.
    Gen(GenArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of phantoms.
    #[arg(long)]
    count: usize,
    #[arg(long, value_delimiter = ',', default_value = "lbp,landweber,tikhonov")]
    algos: Vec<Algorithm>,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "adjacent")]
    protocol: ProtocolKind,
    #[command(flatten)]
    mesh: MeshOpts,
    #[command(flatten)]
    recon: ReconOpts,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Reconstructed image (single-pair mode).
    #[arg(long, requires = "truth", conflicts_with = "manifest")]
    pred: Option<PathBuf>,
    /// Ground-truth image (single-pair mode).
    #[arg(long, requires = "pred")]
    truth: Option<PathBuf>,
    /// Metrics and column order for single-pair mode.
    #[arg(long, value_delimiter = ',', default_value = "rmse,ssim,psnr")]
    metrics: Vec<report::Metric>,
    /// Manifest to score every pair of (batch mode).
    #[arg(long, required_unless_present = "pred")]
    manifest: Option<PathBuf>,
    /// Restrict batch mode to one split.
    #[arg(long)]
    split: Option<Split>,
    /// Score enhanced images from this directory instead of the inputs;
    /// files are matched by input file name.
    #[arg(long)]
    enhanced_dir: Option<PathBuf>,
    /// Batch CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Peak value for PSNR and the SSIM constants.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Phantom ids, one grid column each.
    #[arg(long, value_delimiter = ',', required = true)]
    ids: Vec<u64>,
    /// Algorithms to show; every algorithm in the manifest when absent.
    #[arg(long, value_delimiter = ',')]
    algos: Vec<Algorithm>,
    /// Directory of enhanced images, adding one row per algorithm. Repeat for
    /// several checkpoints; rows follow the order given.
    #[arg(long)]
    enhanced: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("tomo: {}", msg.as_ref());
    }
}

fn read_mesh(path: &Path) -> Result<DiscMesh> {
    DiscMesh::read(path).with_context(|| format!("reading mesh {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .context("configuring worker threads")?;
    }
    let quiet = cli.quiet;
    match cli.command {
        Command::Mesh(args) => {
            let mesh = build_disc_mesh(&args.mesh.params()).context("building mesh")?;
            mesh.write(&args.out).context("writing mesh")?;
            println!(
                "{}",
                json!({
                    "nodes": mesh.n_nodes(),
                    "triangles": mesh.n_triangles(),
                    "electrodes": mesh.n_electrodes(),
                    "boundary_edges": mesh.boundary_edges().len(),
                })
            );
        }
        Command::Phantom(cmd) => match cmd.render {
            Some(PhantomRender::Render { input, out }) => {
                let spec = PhantomSpec::read_json(&input).with_context(|| format!("reading phantom {}", input.display()))?;
                phantom_to_image(&spec).save_png(&out).context("writing ground-truth image")?;
            }
            None => {
                let spec = sample_phantom(cli.seed, &PhantomConfig::default()).context("sampling phantom")?;
                let text = serde_json::to_string_pretty(&spec)?;
                match cmd.out {
                    Some(path) => fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?,
                    None => println!("{text}"),
                }
            }
        },
        Command::Simulate(args) => {
            let mesh = read_mesh(&args.mesh)?;
            let field = match (&args.sigma, &args.phantom) {
                (Some(path), _) => ConductivityField::read_json(path).with_context(|| format!("reading field {}", path.display()))?,
                (None, Some(path)) => {
                    let spec = PhantomSpec::read_json(path).with_context(|| format!("reading phantom {}", path.display()))?;
                    phantom_to_sigma(&mesh, &spec).context("mapping phantom onto mesh")?
                }
                (None, None) => bail!("either --sigma or --phantom is required"),
            };
            let protocol = MeasurementProtocol::new(args.protocol, mesh.n_electrodes()).context("building protocol")?;
            let frame = simulate_frame(&mesh, &field, &protocol).context("solving forward model")?;
            frame.write(&args.out).context("writing frame")?;
            println!("{}", json!({ "measurements": frame.len(), "protocol": protocol.tag() }));
        }
        Command::Sensitivity(args) => {
            let mesh = read_mesh(&args.mesh)?;
            let protocol = MeasurementProtocol::new(args.protocol, mesh.n_electrodes()).context("building protocol")?;
            log(quiet, format!("computing sensitivity for {}", protocol.tag()));
            let s = load_or_compute(&mesh, &protocol, args.background, &default_cache_dir()).context("computing sensitivity")?;
            s.write(&args.out).context("writing sensitivity matrix")?;
            println!("{}", json!({ "rows": s.n_measurements(), "cols": s.n_elements(), "protocol": protocol.tag() }));
        }
        Command::Reconstruct(args) => {
            let mesh = read_mesh(&args.mesh)?;
            let protocol = MeasurementProtocol::new(args.protocol, mesh.n_electrodes()).context("building protocol")?;
            let s = SensitivityMatrix::read(&args.sens).with_context(|| format!("reading sensitivity {}", args.sens.display()))?;
            if s.n_elements() != mesh.n_triangles() || s.n_measurements() != protocol.len() {
                bail!(
                    "sensitivity matrix is {}x{} but the mesh and protocol need {}x{}",
                    s.n_measurements(),
                    s.n_elements(),
                    protocol.len(),
                    mesh.n_triangles()
                );
            }
            let mut frame = VoltageFrame::read(&args.frame).with_context(|| format!("reading frame {}", args.frame.display()))?;
            let mut reference = match &args.reference {
                Some(path) => VoltageFrame::read(path).with_context(|| format!("reading reference {}", path.display()))?,
                None => reference_frame(&mesh, s.background(), &protocol).context("simulating reference frame")?,
            };
            // Frame files carry no protocol tag; both sides share this run's.
            frame.protocol = Some(protocol.tag());
            reference.protocol = Some(protocol.tag());
            let u = normalize_frame(&frame, &reference).context("normalizing frame")?;
            let g = reconstruct(&u, &s, &args.recon.config(args.algo)).context("reconstructing")?;
            Rasterizer::new(&mesh).render(&g)?.save_png(&args.out).context("writing image")?;
        }
        Command::Dataset {
            command: DatasetCmd::Gen(args),
        } => {
            let config = DatasetConfig {
                count: args.count,
                algorithms: args.algos.clone(),
                base_seed: cli.seed,
                test_fraction: args.test_fraction,
                mesh: args.mesh.params(),
                protocol: args.protocol,
                phantom: PhantomConfig::default(),
                recon: args.recon.config(Algorithm::Landweber),
            };
            config.validate().context("validating dataset options")?;
            log(quiet, format!("generating {} phantoms into {}", config.count, args.out_dir.display()));
            let manifest = generate_dataset(&config, &args.out_dir, Some(&default_cache_dir())).context("generating dataset")?;
            let test = manifest.records.iter().filter(|r| r.split == Split::Test).count();
            println!(
                "{}",
                json!({ "records": manifest.records.len(), "test_records": test, "out_dir": args.out_dir })
            );
        }
        Command::Eval(args) => match (&args.pred, &args.truth, &args.manifest) {
            (Some(pred), Some(truth), _) => {
                let p = GrayImage::load_png(pred).with_context(|| format!("reading {}", pred.display()))?;
                let t = GrayImage::load_png(truth).with_context(|| format!("reading {}", truth.display()))?;
                let values = args
                    .metrics
                    .iter()
                    .map(|m| {
                        Ok(match m {
                            report::Metric::Rmse => rmse(&t, &p)?,
                            report::Metric::Ssim => ssim(&t, &p, &SsimParams::for_peak(args.peak))?,
                            report::Metric::Psnr => psnr(&t, &p, args.peak)?,
                        })
                    })
                    .collect::<tomo_core::Result<Vec<_>>>()
                    .context("scoring images")?;
                let line: Vec<String> = values.iter().map(|v| report::fmt_value(*v)).collect();
                println!("{}", line.join(","));
            }
            (_, _, Some(manifest)) => {
                let rows = report::batch_eval(manifest, args.split, args.enhanced_dir.as_deref(), args.peak)
                    .context("scoring manifest")?;
                let csv = report::to_csv(&rows);
                match &args.out {
                    Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
                    None => print!("{csv}"),
                }
                log(quiet, format!("scored {} pairs", rows.len()));
            }
            _ => bail!("give --pred and --truth, or --manifest"),
        },
        Command::Compare(args) => {
            let grid = report::compare_grid(&args.manifest, &args.ids, &args.algos, &args.enhanced).context("assembling grid")?;
            grid.image.save_png(&args.out).context("writing grid")?;
            println!(
                "{}",
                json!({
                    "rows": grid.row_labels.len(),
                    "cols": args.ids.len(),
                    "width": grid.image.width(),
                    "height": grid.image.height(),
                    "row_labels": grid.row_labels,
                })
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("tomo: error: {err:#}");
            ExitCode::from(1)
        }
    }
}
