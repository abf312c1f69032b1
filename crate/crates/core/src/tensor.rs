//! Dense row-major rank-3 tensor used for per-anchor token stacks.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Wraps row-major data; `None` if the length does not match the shape.
    pub fn from_vec(shape: [usize; 3], data: Vec<f64>) -> Option<Self> {
        (data.len() == shape.iter().product::<usize>()).then_some(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert!(i < self.shape[0] && j < self.shape[1] && c < self.shape[2]);
        (i * self.shape[1] + j) * self.shape[2] + c
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.offset(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, value: f64) {
        let o = self.offset(i, j, c);
        self.data[o] = value;
    }

    /// Row `[i][j][..]`.
    pub fn lane(&self, i: usize, j: usize) -> &[f64] {
        let start = self.offset(i, j, 0);
        &self.data[start..start + self.shape[2]]
    }

    pub fn lane_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let start = self.offset(i, j, 0);
        let len = self.shape[2];
        &mut self.data[start..start + len]
    }

    /// Slab `[i][..][..]` copied into a `shape[1] x shape[2]` matrix.
    pub fn slab(&self, i: usize) -> DMatrix<f64> {
        let len = self.shape[1] * self.shape[2];
        DMatrix::from_row_slice(self.shape[1], self.shape[2], &self.data[i * len..(i + 1) * len])
    }

    pub fn set_slab(&mut self, i: usize, m: &DMatrix<f64>) {
        assert_eq!((m.nrows(), m.ncols()), (self.shape[1], self.shape[2]));
        for j in 0..self.shape[1] {
            for c in 0..self.shape[2] {
                self.set(i, j, c, m[(j, c)]);
            }
        }
    }

    /// First `(i, j, c)` holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, usize, usize)> {
        let pos = self.data.iter().position(|v| !v.is_finite())?;
        let c = pos % self.shape[2];
        let j = (pos / self.shape[2]) % self.shape[1];
        let i = pos / (self.shape[1] * self.shape[2]);
        Some((i, j, c))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let t = Tensor3::from_vec([2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(1, 0, 2), 8.0);
        assert_eq!(t.lane(0, 1), &[3.0, 4.0, 5.0]);
        let slab = t.slab(1);
        assert_eq!(slab[(1, 0)], 9.0);
        assert!(Tensor3::from_vec([2, 2, 2], vec![0.0; 3]).is_none());
    }

    #[test]
    fn locates_non_finite() {
        let mut t = Tensor3::zeros([3, 2, 2]);
        assert_eq!(t.first_non_finite(), None);
        t.set(2, 1, 0, f64::NAN);
        assert_eq!(t.first_non_finite(), Some((2, 1, 0)));
    }
}
