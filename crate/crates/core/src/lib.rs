//! Full-KL label distribution learning.
//!
//! A regression target is represented as a probability mass function over an
//! ordered grid of label bins, and a network with a softmax head is trained to
//! match it. Two loss families are provided:
//!
//! | Family | Components | Weighting |
//! |--------|------------|-----------|
//! | reference | `KL(P‖P̂) + λ·|μ − μ̂|` | hand-tuned `λ` |
//! | full KL | `KL(P‖P̂) + KL(N(μ,σ²)‖N(μ̂,σ̂²)) + ½[KL(P̂‖P̂ˢ) + KL(P̂ˢ‖P̂)]` | none |
//!
//! Every component of the full-KL family is measured in nats, so the sum needs
//! no weighting and is invariant under affine relabeling of the grid.
//!
//! The numeric core ([`grid`], [`losses`], [`verify`], [`model`], [`data`]) is
//! generic over the scalar type through [`Scalar`]; the aliases at the crate
//! root pin it to `f64`, which is what the experiment [`runner`] uses.
//!
//! ```rust
//! use fullkl::{full_kl_loss, make_grid, Pmf, NumericPolicy};
//!
//! let grid = make_grid(0.0, 1.0, 1.0).unwrap();
//! let target = Pmf::new(vec![0.5, 0.5]).unwrap();
//! let logits = [0.0, 3f64.ln()];
//! let loss = full_kl_loss(&target, &logits, &grid, &NumericPolicy::default()).unwrap();
//! assert!((loss.total - 0.607986).abs() < 1e-6);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod grid;
pub mod losses;
pub mod model;
pub mod runner;
pub mod scalar;
pub mod verify;

pub use data::{gen_synthetic, load_csv, split, write_csv, Dataset, LoadReport, Sample, Split};
pub use error::{Error, Result};
pub use grid::{discretize_gaussian, make_grid, moments, softmax, LabelGrid, Moments, NumericPolicy, Pmf};
pub use losses::{
    full_kl_grad, full_kl_loss, gaussian_kl, kl_div, l1_expectation, reference_grad, reference_loss, smoothness,
    Family, LossBreakdown, LossConfig, ReferenceLossConfig,
};
pub use model::{evaluate, init_mlp, lr_at, predict, train_step, Adam, Metrics, Mlp, TrainConfig};
pub use scalar::Scalar;
pub use verify::{check_grad, check_grad_norm, fd_grad, fd_grad_relative, numeric_gaussian_kl, GradCheckReport};

pub type LabelGrid64 = grid::LabelGrid<f64>;
pub type Pmf64 = grid::Pmf<f64>;
pub type Moments64 = grid::Moments<f64>;
pub type NumericPolicy64 = grid::NumericPolicy<f64>;
pub type LossBreakdown64 = losses::LossBreakdown<f64>;
pub type LossConfig64 = losses::LossConfig<f64>;
pub type Mlp64 = model::Mlp<f64>;
pub type Adam64 = model::Adam<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Sample64 = data::Sample<f64>;

pub type LabelGrid32 = grid::LabelGrid<f32>;
pub type Pmf32 = grid::Pmf<f32>;
pub type Mlp32 = model::Mlp<f32>;
