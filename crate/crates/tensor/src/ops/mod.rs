pub mod conv;
pub mod elementwise;
pub mod matmul;
pub mod reduce;
pub mod shape_ops;
