pub mod diff;
pub mod tree;
pub mod segment;
pub mod env;
pub mod nn;
pub mod features;
pub mod trainer;
pub mod vlm;
