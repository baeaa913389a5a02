//! Second-order geometric attention for volumetric segmentation.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`]: dense tensors and a define-by-run graph
//! - [`linalg`]: Jacobi eigensolver, spectral matrix functions, thin QR
//! - [`spd`]: SPD pooling, BiMap, ReEig, LogEig and vectorization layers
//! - [`optim`]: RMSprop and Riemannian descent on the Stiefel manifold
//! - [`attention`]: FOA / SOA / SOGA skip-connection heads
//! - [`segnet`]: the encoder-decoder network, loss, training and checkpoints
//! - [`synth`]: synthetic multi-channel lesion volumes and their file format
//! - [`eval`]: candidate extraction and detection/segmentation metrics
//! - [`gradcheck`]: finite-difference verification of every backward pass
//! - [`config`]: run configuration shared by the command-line tool

pub mod attention;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod segnet;
pub mod spd;
pub mod synth;
pub mod tensor;

pub use attention::{AttentionConfig, AttentionVariant};
pub use autodiff::{Graph, Var};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use linalg::{EigenPair, Matrix};
pub use optim::{Optimizer, RmspropConfig, RmspropState, StiefelParam};
pub use params::{ParamId, ParamKind, ParamStore};
pub use segnet::{SegModel, UNetConfig};
pub use spd::{BiMapLayer, SpdMatrix};
pub use synth::{SynthCase, SynthConfig};
pub use tensor::Tensor;
