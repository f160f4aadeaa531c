//! Two-class collaborative metric learning: joint user/item embeddings in
//! the unit ball trained from binarized feedback, where liked items are
//! pulled toward the user and explicitly disliked items are pushed away.
//!
//! The crate is generic over the scalar type ([`Real`], implemented for
//! `f32` and `f64`); checkpoints are stored as `f32` either way.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod sampler;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Model32 = model::EmbeddingModel<f32>;
pub type Model64 = model::EmbeddingModel<f64>;
pub type HyperParams32 = model::HyperParams<f32>;
pub type HyperParams64 = model::HyperParams<f64>;
pub type TrainConfig32 = trainer::TrainConfig<f32>;
pub type TrainConfig64 = trainer::TrainConfig<f64>;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "TCCML_THREADS";

/// Size the global worker pool from [`THREADS_ENV`]. A no-op when the pool
/// already exists or the variable is unset or unparsable.
pub fn init_thread_pool() {
    if let Ok(value) = std::env::var(THREADS_ENV) {
        if let Ok(n) = value.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
