pub mod equitest;
pub mod error;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod nets;
pub mod numcore;
pub mod objective;
pub mod ortho;
pub mod sampler;
pub mod schedule;
pub mod symkernel;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{GroupElement, NBodyState};
pub use nets::{Model, NetConfig, Nets, ParamStore};
pub use numcore::{Activation, RngStream, Tape, Tensor, Var};
pub use objective::GammaKind;
pub use schedule::NoiseSchedule;
pub use train::{RunConfig, TrainMode};
