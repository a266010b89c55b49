pub mod numerics;
pub mod features;
pub mod model;
pub mod decode;
pub mod data;
pub mod meta;
pub mod eval;
pub mod rng;
pub mod cli;
