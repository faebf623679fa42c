pub mod backbone;
pub mod classifier;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod numerics;
pub mod pseudoclass;
pub mod trainer;
