pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod multiconv;
pub mod nn;
pub mod tensor;

pub use encoder::{ConvBlockKind, EncoderConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use multiconv::FusionKind;
pub use tensor::{Array, Real, Tape, Var};
