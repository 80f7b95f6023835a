//! Symplectic positional embeddings and the StretchTime forecaster.
//!
//! The crate is organized bottom-up: [`numcore`] is a dense f64 tensor
//! engine with a reverse-mode tape; [`sype`] is the scalar flow kernel
//! (stability-parameterized 2x2 Hamiltonian flows, the matrix-exponential
//! oracle, and the rotary feasibility decision); [`warp`] turns token
//! content into a positive warped clock; [`attention`] and [`model`] build
//! the forecaster on the tape; [`data`], [`train`], [`config`] and [`cli`]
//! provide the synthetic benchmark, the training loop and the command-line
//! workflow; [`verify`] holds the executable check suites.

pub mod attention;
pub mod cli;
pub mod config;
pub mod data;
pub mod model;
pub mod numcore;
pub mod sype;
pub mod train;
pub mod verify;
pub mod warp;

pub use numcore::{NumError, Tape, Tensor, TensorId};

/// f64 instantiations of the scalar-generic flow kernel; every tolerance
/// in the verification suites is stated for these.
pub type HamiltonianBand = sype::HamiltonianBand<f64>;
pub type FlowMatrix = sype::Mat2<f64>;
pub type BandStack = sype::BandStack<f64>;
