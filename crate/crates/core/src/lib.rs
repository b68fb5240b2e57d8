//! Unsupervised saliency pseudo-label refinement.
//!
//! Classical saliency detectors produce noisy per-image pseudo-labels. Each
//! method's labels are refined in isolation by training a small network with
//! an image-level F-beta loss, ensembling its CRF-smoothed predictions through
//! per-sample moving averages, and retraining on those averages. A final
//! network is trained against all refined label sets at once.
//!
//! Numeric modules are generic over [`Scalar`]; the aliases below fix the
//! precision used by the training pipeline.

pub mod color;
pub mod config;
pub mod crf;
pub mod dataio;
pub mod error;
pub mod evalsuite;
pub mod handcrafted;
pub mod image;
pub mod model;
pub mod mva;
pub mod objective;
pub mod pipeline;
pub mod runner;
pub mod scalar;

pub use error::{Error, Result};
pub use image::{BinaryMask, Dataset, Image, MapSource, SampleRecord, SaliencyMap, Split};
pub use scalar::Scalar;

/// Pipeline precision for images.
pub type RgbImage = image::Image<f32>;
/// Pipeline precision for saliency maps.
pub type Map = image::SaliencyMap<f32>;
/// Double-precision map used by oracle checks.
pub type Map64 = image::SaliencyMap<f64>;
pub type Totals = objective::ContingencyTotals<f32>;
pub type Totals64 = objective::ContingencyTotals<f64>;
pub type Mva = mva::MvaState<f32>;
pub type Crf = crf::CrfKernel<f32>;
