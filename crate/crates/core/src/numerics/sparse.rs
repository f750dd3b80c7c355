use super::Tensor;

/// Square matrix stored as its nonzero entries in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn from_dense(m: &Tensor) -> Self {
        assert_eq!(m.rows(), m.cols(), "sparse matrix must be square");
        let n = m.rows();
        let mut entries = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let w = m.get(i, j);
                if w != 0.0 {
                    entries.push((i, j, w));
                }
            }
        }
        SparseMatrix { n, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n, self.n]);
        for &(i, j, w) in &self.entries {
            t.set(i, j, w);
        }
        t
    }
}
