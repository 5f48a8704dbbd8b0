use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Skeleton graph and its symmetrically normalized adjacency
/// `D^-1/2 (A + I) D^-1/2`. The learnable offset added to it lives in the
/// owning model's parameter set (`gcn.offset`), initialised to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjacencySpec {
    pub vertices: usize,
    pub edges: Vec<(usize, usize)>,
    /// `[V, V]`
    pub normalized: Tensor<f32>,
}

pub fn build_adjacency(edges: &[(usize, usize)], vertices: usize) -> Result<AdjacencySpec> {
    let mut a = vec![0f64; vertices * vertices];
    for i in 0..vertices {
        a[i * vertices + i] = 1.0;
    }
    for &(i, j) in edges {
        for idx in [i, j] {
            if idx >= vertices {
                return Err(Error::IndexOutOfRange { index: idx, vertices });
            }
        }
        a[i * vertices + j] = 1.0;
        a[j * vertices + i] = 1.0;
    }
    let inv_sqrt: Vec<f64> = a.chunks(vertices.max(1)).map(|row| 1.0 / row.iter().sum::<f64>().sqrt()).collect();
    let normalized = Tensor::from_fn(&[vertices, vertices], |k| {
        let (i, j) = (k / vertices, k % vertices);
        (inv_sqrt[i] * a[k] * inv_sqrt[j]) as f32
    });
    Ok(AdjacencySpec { vertices, edges: edges.to_vec(), normalized })
}
