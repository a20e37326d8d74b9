pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward};
pub use batchnorm::{BatchNorm, BnCache};
pub use conv::{conv2d, conv2d_backward, conv_out_extent};
pub use linear::{linear, linear_backward};
pub use loss::softmax_cross_entropy;
pub use pool::{global_mean_pool, global_mean_pool_backward};

/// Whether batch statistics are computed fresh (Train) or taken from the
/// running averages (Eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
