//! Dynamic weight sharing for locally connected networks.
//!
//! Locally connected layers learn a separate kernel per position. During a
//! sleep phase, lateral inhibition and anti-Hebbian plasticity pull the
//! kernels of each translation grid towards their mean, recovering most of
//! the benefit of convolutions without a weight-tying mechanism.
//!
//! * [`math`]: dense linear algebra and seeded random streams
//! * [`topology`]: convolutional and locally connected layers, grids
//! * [`sharing`]: sleep dynamics, fixed points, SNR
//! * [`ratecircuit`]: excitatory/inhibitory rate implementation
//! * [`trainer`]: small image classifier with periodic sharing

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod io;
pub mod math;
pub mod par;
pub mod ratecircuit;
pub mod sharing;
pub mod topology;
pub mod trainer;

pub use error::{Error, Result};
