//! Next-visit prediction of longitudinal OCT B-scans with a conditional GAN.
//!
//! The crate is self-contained: a small dense tensor type with reverse-mode
//! autodiff ([`autodiff`]), the generator and discriminator networks
//! ([`nn`]), losses and optimizers ([`objectives`], [`optim`]), the
//! alternating training protocol and checkpoints ([`train`]), SSIM and
//! friends ([`metrics`]), and the longitudinal dataset plus a synthetic
//! phantom generator ([`dataset`]).

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, BnMode, Gradients, Tape, Var};
pub use config::{RunConfig, TrainConfig};
pub use dataset::{Image, LongitudinalDataset, PhantomConfig, Sample, SplitSpec};
pub use error::{Error, Result};
pub use metrics::{EvalReport, SsimParams};
pub use tensor::{Fill, Real, Tensor};
pub use train::{Checkpoint, TrainReport, Trainer};
