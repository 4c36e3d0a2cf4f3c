//! Mesh topology, graph adjacency and mesh coarsening.

mod adjacency;
mod coarsen;
mod mesh;
pub mod primitives;
mod sparse;

pub use adjacency::{adjacency_from_edges, build_adjacency, GraphAdjacency};
pub use coarsen::{coarsen, CoarseningPair};
pub use mesh::{load_obj, parse_obj, TemplateMesh};
pub use sparse::{sparse_dense_multiply, sparse_transpose_dense_multiply, SparseMatrix};
