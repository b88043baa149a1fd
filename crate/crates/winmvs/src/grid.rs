//! Dense N-dimensional real-valued grids.
//!
//! [`ValueGrid`] is the universal carrier for images, feature maps, cost
//! volumes and depth maps. Data is stored row-major (last axis fastest) in
//! double precision. Grids are plain values: construct, read, clone. The
//! differentiation machinery lives in [`crate::tape`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shapes {a:?} and {b:?} differ")]
    ShapeMismatch { a: Vec<usize>, b: Vec<usize> },
}

/// Dense N-dimensional grid of `f64` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueGrid {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl ValueGrid {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        ValueGrid {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wraps a data vector; the length must match `product(shape)`.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, GridError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(GridError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(ValueGrid {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Single-element grid (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        ValueGrid {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..len {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        ValueGrid {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row-major strides for the current shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (ax, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[ax], "index {i} out of bounds on axis {ax}");
            flat = flat * self.shape[ax] + i;
        }
        flat
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let flat = self.flat_index(idx);
        self.data[flat] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ValueGrid {
        ValueGrid {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ValueGrid, f: impl Fn(f64, f64) -> f64) -> Result<ValueGrid, GridError> {
        if self.shape != other.shape {
            return Err(GridError::ShapeMismatch {
                a: self.shape.clone(),
                b: other.shape.clone(),
            });
        }
        Ok(ValueGrid {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest absolute difference to `other`; `None` when shapes differ.
    pub fn max_abs_diff(&self, other: &ValueGrid) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(ValueGrid::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(ValueGrid::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn flat_index_row_major() {
        let g = ValueGrid::from_fn(&[2, 3, 4], |idx| (idx[0] * 12 + idx[1] * 4 + idx[2]) as f64);
        assert_eq!(g.at(&[1, 2, 3]), 23.0);
        assert_eq!(g.strides(), vec![12, 4, 1]);
    }

    #[test]
    fn from_fn_visits_in_order() {
        let g = ValueGrid::from_fn(&[2, 2], |idx| (idx[0] * 10 + idx[1]) as f64);
        assert_eq!(g.data(), &[0.0, 1.0, 10.0, 11.0]);
    }
}
