//! Federated-learning gradient capture and a two-step privacy attack on
//! adversarially trained classifiers: restore per-sample penultimate
//! features from the head's batch-averaged weight gradient, then invert
//! those features back to images.

#![allow(
    clippy::needless_range_loop,
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments
)]

pub mod attack;
pub mod checkpoint;
pub mod container;
pub mod data;
pub mod fl;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod report;
pub mod seed;
pub mod tensor;
pub mod training;
