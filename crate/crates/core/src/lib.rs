pub mod backbone;
pub mod data;
pub mod features;
pub mod gaze;
pub mod imaging;
pub mod harness;
pub mod io;
pub mod nn;
pub mod recognition;
pub mod rng;
pub mod tensor;
pub mod transfer;
