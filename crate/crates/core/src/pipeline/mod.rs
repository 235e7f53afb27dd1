//! End-to-end orchestration: phantoms, training, inference, evaluation.

pub mod config;
pub mod eval;
pub mod infer;
pub mod synth;
pub mod train;

pub use config::Config;
pub use eval::{crossval, evaluate, CrossvalReport, EvalReport};
pub use infer::{ensemble_infer, infer, load_model, save_model, Inference};
pub use synth::{generate_phantom, synth, Dataset, PhantomSpec};
pub use train::{train, TrainOutcome};
