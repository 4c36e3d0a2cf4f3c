use super::mesh::TemplateMesh;
use super::sparse::SparseMatrix;

/// Row-normalized adjacency with self-loops, `D⁻¹(A + I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAdjacency {
    matrix: SparseMatrix,
}

impl GraphAdjacency {
    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> SparseMatrix {
        self.matrix
    }

    pub fn num_vertices(&self) -> usize {
        self.matrix.rows()
    }
}

pub fn build_adjacency(mesh: &TemplateMesh) -> GraphAdjacency {
    adjacency_from_edges(mesh.num_vertices(), &mesh.edges())
}

/// Same construction for an explicit undirected edge list. Duplicate edges
/// must not be present.
pub fn adjacency_from_edges(n: usize, edges: &[(usize, usize)]) -> GraphAdjacency {
    let mut neighbors: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    for &(a, b) in edges {
        neighbors[a].push(b);
        neighbors[b].push(a);
    }
    let mut triplets = Vec::new();
    for (i, nb) in neighbors.iter_mut().enumerate() {
        nb.sort_unstable();
        let w = 1.0 / nb.len() as f64;
        triplets.extend(nb.iter().map(|&j| (i, j, w)));
    }
    GraphAdjacency {
        matrix: SparseMatrix::from_triplets(n, n, &triplets).expect("indices come from a valid mesh"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meshgraph::primitives::icosphere;

    #[test]
    fn triangle_rows_are_thirds() {
        let m = TemplateMesh::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]])
            .unwrap();
        let a = build_adjacency(&m);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(a.matrix().get(r, c), 1.0 / 3.0);
            }
        }
    }

    #[test]
    fn two_vertex_path_rows_are_halves() {
        let a = adjacency_from_edges(2, &[(0, 1)]);
        assert_eq!(a.matrix().to_dense(), vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn row_sums_are_one() {
        let a = build_adjacency(&icosphere(2));
        for s in a.matrix().row_sums() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        for r in 0..a.num_vertices() {
            assert!(a.matrix().get(r, r) > 0.0);
        }
    }
}
