//! Simulation and classical reconstruction toolkit for electrical resistance
//! tomography (ERT).
//!
//! The pipeline runs in this order:
//!
//! 1. [`mesh`] builds a triangulated unit disc with boundary electrodes.
//! 2. [`phantom`] samples inclusion layouts and maps them to a
//!    [`forward::ConductivityField`] and a binary ground-truth image.
//! 3. [`forward`] solves the steady-current problem with P1 finite elements
//!    and stacks electrode voltages into a [`forward::VoltageFrame`].
//! 4. [`sensitivity`] linearizes the frame around a homogeneous background.
//! 5. [`recon`] reconstructs element images with back projection, Landweber
//!    iteration or Tikhonov regularization and rasterizes them.
//! 6. [`metrics`] scores reconstructions with RMSE, SSIM and PSNR.
//! 7. [`dataset`] ties everything together into paired image corpora.

pub mod binio;
pub mod dataset;
pub mod error;
pub mod forward;
pub mod gray_image;
pub mod mesh;
pub mod metrics;
pub mod phantom;
pub mod recon;
pub mod sensitivity;

pub use error::{Result, TomoError};
pub use forward::{ConductivityField, DrivePattern, MeasurementProtocol, NodalPotential, ProtocolKind, VoltageFrame};
pub use gray_image::GrayImage;
pub use mesh::{DiscMesh, MeshParams};
pub use phantom::{PhantomConfig, PhantomSpec};
pub use recon::{Algorithm, ElementImage, ReconConfig};
pub use sensitivity::{NormalizedFrame, SensitivityMatrix};
