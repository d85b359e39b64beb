//! Decomposition of EinSum computation graphs into kernel calls over
//! partitioned tensor relations, with a cost-driven partitioner, a placement
//! heuristic, and a simulated multi-machine runtime.

pub mod bundled;
pub mod cost;
pub mod doc;
pub mod einsum;
pub mod error;
pub mod execgraph;
pub mod optimizer;
pub mod par;
pub mod partition;
pub mod pipeline;
pub mod placement;
pub mod relation;
pub mod runtime;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Bound, Partition, Tensor};
