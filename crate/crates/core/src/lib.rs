//! Lightweight SAR ship detector with wavelet pooling, context-guided
//! convolution, star (element-wise multiplication) fusion, and a shared
//! detection head — plus the minimal rank-4 autodiff engine, synthetic
//! scene generator, and mAP evaluator needed to train and measure it on CPU.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Dtype, Element, Shape, Tensor};
