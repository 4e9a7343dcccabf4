//! Raw forward/backward kernels. The [`Tape`](crate::Tape) wires these into the graph.

pub mod conv;
pub mod norm;
pub mod pool;
