//! Self-supervised ViT fine-tuning with global, regional and local
//! teacher-student distillation.

pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod correspondence;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod objectives;
pub mod params;
pub mod regions;
pub mod scalar;
pub mod training;
pub mod vit;

pub use error::{GlareError, Result};
pub use ndarray;
pub use scalar::Scalar;

pub type VisionTransformer32 = vit::VisionTransformer<f32>;
pub type VisionTransformer64 = vit::VisionTransformer<f64>;
pub type ProjectionHead32 = objectives::ProjectionHead<f32>;
pub type ProjectionHead64 = objectives::ProjectionHead<f64>;
pub type TrainerState32 = training::TrainerState<f32>;
pub type TrainerState64 = training::TrainerState<f64>;
