//! Visual in-context image editing on 2x2 image grids.
//!
//! A grid holds an example pair on the top row and a query image with its
//! (unknown) edited result on the bottom row. A small conditional diffusion
//! model learns to fill the bottom-right quadrant.

pub mod autodiff;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod editing_shift;
pub mod evaluator;
pub mod error;
pub mod image_grid;
pub mod instruction;
pub mod nn;
pub mod providers;
pub mod seed;
pub mod selective;
pub mod ssm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use image_grid::{compose, decompose, mask_query, Image, ImageGrid};
pub use tensor::Tensor;
