//! RoI-aware volumetric U-Net.
//!
//! A shared encoder processes the whole volume, a 1×1×1 locator head marks
//! candidate regions on the coarsest feature map, and a decoder restores
//! full-resolution masks only inside the cropped regions of interest.
//!
//! Everything runs on the CPU in `f32` with a small tape-based reverse-mode
//! differentiator ([`tape`]).

pub mod analysis;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod morphology;
pub mod net;
pub mod io;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod preprocess;
pub mod roi;
pub mod tape;
pub mod volume;

pub use error::{Error, Result};
pub use ops::ConvParams;
pub use tape::{Gradients, Tape, TensorId};
pub use volume::{Shape, Spacing, Triple, Volume};
