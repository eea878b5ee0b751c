//! Small dense neural-network toolkit: matrices, a reverse-mode tape,
//! transformer encoders and Adam.

pub mod encoder;
pub mod mat;
pub mod optim;
pub mod params;
pub mod tape;

pub use encoder::{Encoder, EncoderShape, Mlp};
pub use mat::Mat;
pub use optim::{Adam, AdamConfig};
pub use params::ParamSet;
pub use tape::{NodeId, Tape};
