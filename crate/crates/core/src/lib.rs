pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod desk;
pub mod destyle;
pub mod error;
pub mod experiment;
pub mod filters;
pub mod image;
mod linalg;
pub mod moments;
pub mod network;
pub mod norm;
pub mod params;
pub mod report;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Gradients, PoolMode, Tape, Var};
pub use error::{Error, Result};
pub use image::Image;
pub use moments::{channel_moments, ChannelMoments, MomentScope};
pub use tensor::Tensor;
