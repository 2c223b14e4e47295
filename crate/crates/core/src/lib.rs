pub mod fsutil;
pub mod interpret;
pub mod mask;
pub mod model;
pub mod oracles;
pub mod preprocess;
pub mod rng;
pub mod synthgen;
pub mod tensor;
pub mod train;
