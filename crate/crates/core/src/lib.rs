//! Cross-lingual phonetic pre-training and phoneme-to-word transcoding at
//! desk scale.
//!
//! The acoustic side ([`unidata2vec`]) is a convolutional feature encoder
//! followed by a masked student transformer trained with CTC on phoneme
//! labels plus Smooth-L1 regression onto the averaged top layers of an EMA
//! teacher. The text side ([`transcoder`]) maps phoneme posterior sequences
//! to words, trained position-wise against `*`-padded word targets.
//! [`synth`] fabricates corpora with known ground truth and [`eval`] holds
//! the error-rate metrics and the clustering probe.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod transcoder;
pub mod unidata2vec;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::Tensor;
