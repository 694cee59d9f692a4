use super::Real;

/// A fixed sparse linear map between row spaces: output row `r` is
/// `Σ weight · input[src]` over the entries recorded for `r`.
///
/// Bilinear and trilinear sampling, im2col, scatter-mean and masked view
/// averaging are all instances. Rows without entries come out as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap<T> {
    src_rows: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Real> RowMap<T> {
    pub fn new(src_rows: usize) -> Self {
        RowMap {
            src_rows,
            offsets: vec![0],
            index: Vec::new(),
            weight: Vec::new(),
        }
    }

    pub fn with_capacity(src_rows: usize, rows: usize, entries: usize) -> Self {
        let mut offsets = Vec::with_capacity(rows + 1);
        offsets.push(0);
        RowMap {
            src_rows,
            offsets,
            index: Vec::with_capacity(entries),
            weight: Vec::with_capacity(entries),
        }
    }

    /// Appends one output row built from `(source row, weight)` pairs.
    pub fn push_row<I: IntoIterator<Item = (usize, T)>>(&mut self, entries: I) {
        for (src, w) in entries {
            assert!(src < self.src_rows, "row map source {src} out of range");
            self.index.push(src as u32);
            self.weight.push(w);
        }
        self.offsets.push(self.index.len());
    }

    pub fn push_empty(&mut self) {
        self.offsets.push(self.index.len());
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn src_rows(&self) -> usize {
        self.src_rows
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let span = self.offsets[r]..self.offsets[r + 1];
        self.index[span.clone()]
            .iter()
            .zip(&self.weight[span])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn apply(&self, src: &[T], width: usize) -> Vec<T> {
        debug_assert_eq!(src.len(), self.src_rows * width);
        let mut out = vec![T::zero(); self.rows() * width];
        for r in 0..self.rows() {
            let dst = &mut out[r * width..(r + 1) * width];
            for (s, w) in self.row(r) {
                let row = &src[s * width..(s + 1) * width];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d += w * v;
                }
            }
        }
        out
    }

    /// Adjoint: scatters `grad_out` back onto the source rows.
    pub fn apply_transpose_acc(&self, grad_out: &[T], width: usize, grad_src: &mut [T]) {
        for r in 0..self.rows() {
            let g = &grad_out[r * width..(r + 1) * width];
            for (s, w) in self.row(r) {
                let dst = &mut grad_src[s * width..(s + 1) * width];
                for (d, &v) in dst.iter_mut().zip(g) {
                    *d += w * v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_and_transpose_are_adjoint() {
        let mut map = RowMap::<f64>::new(3);
        map.push_row([(0, 0.5), (2, 0.5)]);
        map.push_empty();
        map.push_row([(1, 2.0)]);
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = map.apply(&src, 2);
        assert_eq!(out, vec![3.0, 4.0, 0.0, 0.0, 6.0, 8.0]);

        let g = [1.0, -1.0, 3.0, 3.0, 0.5, 0.25];
        let mut back = vec![0.0; 6];
        map.apply_transpose_acc(&g, 2, &mut back);
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = src.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
