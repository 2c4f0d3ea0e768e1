//! Dense arithmetic, a small tanh network with exact forward- and
//! reverse-mode derivatives, Adam, and power-iteration spectral norms.

mod adam;
mod mat;
mod net;
mod spectral;

pub use adam::{Adam, AdamConfig};
pub use mat::{axpy, dist, dot, norm, scale, sub, Mat};
pub use net::{Activation, BatchTrace, DenseNet, NetGrads, Trace};
pub use spectral::{spectral_norm, FnMap, LinearMap, MatrixMap, PowerIterConfig, SpectralEstimate};
