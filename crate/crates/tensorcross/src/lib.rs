//! Low-rank tensor toolkit: tensor-train (TT) format, maxvol-driven
//! cross-approximation over black-box oracles (including out-of-core QTT
//! grids), analytic reverse-mode differentiation through the frozen-index
//! interpolation, TT-domain PCA feature projection, and a small end-to-end
//! training pipeline on synthetic volumetric data.

pub mod cross;
pub mod dense;
pub mod diffca;
pub mod error;
pub mod io;
pub mod linalg;
pub mod maxvol;
pub mod oracle;
pub mod pipeline;
pub mod projection;
pub mod qtt;
pub mod shape;
pub mod tt;
mod util;

pub use crate::dense::DenseTensor;
pub use crate::error::{Error, Result};
pub use crate::oracle::{DenseOracle, FnOracle, TensorOracle};
pub use crate::qtt::{QttMap, QttOracle};
pub use crate::shape::{MultiIndex, Shape};
pub use crate::tt::{TTTensor, Truncation};
pub use crate::util::set_threads;
