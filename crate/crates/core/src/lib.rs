//! Recursive specularity factorization of images.
//!
//! An image channel is split into `K` sparse factors by repeatedly running a
//! few unrolled ADMM steps of a sparse-plus-low-rank decomposition on what
//! earlier factors left behind. The factors sum to the input exactly. The
//! per-step thresholds and penalties are trained so each factor holds a
//! prescribed share of its input's energy, and a light fusion stage turns a
//! stack into an enhanced low-light image.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); solver
//! internals accumulate in `f64`.

pub mod adjoint;
pub mod admm;
pub mod error;
pub mod factorize;
pub mod fusion;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod prox;
pub mod scalar;
pub mod synth;
pub mod train;

pub use adjoint::{factorization_gradient, FactorizationGradient};
pub use admm::{
    admm_step, init_state, solve_factor, DualInit, FactorParams, SolverOptions, SolverState,
};
pub use error::{Error, Result};
pub use factorize::{
    export_factors, factor_differences, factorize, FactorStack, ParamVector, ThresholdUnits,
};
pub use fusion::{
    bilateral_filter, curve_adjust, enhance, enhance_from_stack, fuse_running_average,
    BilateralParams, CurveVariant, FusionConfig, FusionMode, MaskNorm,
};
pub use image::{rgb_to_luma, spectral_norm, ChannelMatrix, Image, LumaConvention};
pub use io::{read_image, write_image, BitDepth};
pub use losses::{
    loss_color, loss_exposure, loss_factorization, loss_smooth, loss_total, LossParts, LossWeights,
};
pub use metrics::{mse, psnr, psnr_y, ssim, MetricReport};
pub use prox::{low_rank_prox, singular_value_threshold, soft_threshold, LowRankProx};
pub use scalar::Scalar;
pub use train::{fd_gradient, train, Checkpoint, EpochRecord, TrainConfig, TrainOutcome};

pub type Image32 = Image<f32>;
pub type Image64 = Image<f64>;
pub type Matrix32 = ChannelMatrix<f32>;
pub type Matrix64 = ChannelMatrix<f64>;
