//! Contrastive self-supervised pretraining of a CSP-style detector backbone
//! and its transfer to a single-class anchor-free detector.
//!
//! The crate is self-contained: [`autodiff`] provides the tensor engine,
//! [`augment`] the seeded image transforms, [`backbone`] and [`detector`] the
//! networks, [`pretrain`] and [`finetune`] the two training stages,
//! [`eval`] the COCO-style metrics and [`io`] every file format.

pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod boxes;
pub mod detector;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod io;
pub mod nn;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
