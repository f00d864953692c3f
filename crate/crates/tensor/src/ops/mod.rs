pub mod conv;
mod elementwise;
mod linalg;
mod nn;
mod pool;
mod reduce;
mod shape;
