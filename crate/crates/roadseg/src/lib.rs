//! Road extraction from satellite imagery as a self-contained Rust engine:
//! an encoder-decoder convolutional network trained with a combined binary
//! cross-entropy + soft-Jaccard objective, with paired geometric/photometric
//! augmentation, Adam optimization and 4-rotation test-time augmentation at
//! inference. Includes its own reverse-mode autodiff tensor core and a
//! finite-difference gradient-check harness, so the whole pipeline is
//! verifiable at desk scale.

pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod gradcheck;
pub mod infer;
pub mod loss;
pub mod model;
pub mod selfcheck;
pub mod synth;
pub mod tensor;
pub mod train;
