//! Dense 3D containers shared by voxel grids, kernels and responses.
//!
//! Axis order is always `(z, y, x)` with `z` vertical; storage is z-major
//! (x varies fastest).

use crate::error::{Error, Result};

/// Extent of a dense grid along `(z, y, x)`.
pub type Shape3 = [usize; 3];

pub fn check_shape(shape: Shape3) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidShape(shape));
    }
    Ok(())
}

/// Parse `"Z,Y,X"` (or a single `"N"` for a cube).
pub fn parse_shape(s: &str) -> Result<Shape3> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let nums = parts
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("bad shape component `{p}` in `{s}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = match nums.as_slice() {
        [n] => [*n; 3],
        [z, y, x] => [*z, *y, *x],
        _ => return Err(Error::Config(format!("shape `{s}` must be Z,Y,X or N"))),
    };
    check_shape(shape)?;
    Ok(shape)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Clone + Default> Grid3<T> {
    pub fn zeros(shape: Shape3) -> Self {
        Self::filled(shape, T::default())
    }
}

impl<T: Clone> Grid3<T> {
    pub fn filled(shape: Shape3, value: T) -> Self {
        let len = shape[0] * shape[1] * shape[2];
        Self {
            shape,
            data: vec![value; len],
        }
    }
}

impl<T> Grid3<T> {
    pub fn from_vec(shape: Shape3, data: Vec<T>) -> Result<Self> {
        let expected = shape[0] * shape[1] * shape[2];
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape3, mut f: impl FnMut([usize; 3]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape[0] * shape[1] * shape[2]);
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f([z, y, x]));
                }
            }
        }
        Self { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, [z, y, x]: [usize; 3]) -> usize {
        debug_assert!(z < self.shape[0] && y < self.shape[1] && x < self.shape[2]);
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn coords(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.shape[2];
        let rest = flat / self.shape[2];
        [rest / self.shape[1], rest % self.shape[1], x]
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> &T {
        &self.data[self.index(idx)]
    }

    #[inline]
    pub fn get_mut(&mut self, idx: [usize; 3]) -> &mut T {
        let i = self.index(idx);
        &mut self.data[i]
    }

    /// Bounds-checked lookup with signed coordinates.
    #[inline]
    pub fn get_signed(&self, [z, y, x]: [i64; 3]) -> Option<&T> {
        if z < 0 || y < 0 || x < 0 {
            return None;
        }
        let (z, y, x) = (z as usize, y as usize, x as usize);
        if z >= self.shape[0] || y >= self.shape[1] || x >= self.shape[2] {
            return None;
        }
        Some(&self.data[(z * self.shape[1] + y) * self.shape[2] + x])
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_shape(&self, expected: Shape3) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }
}

impl Grid3<f64> {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn l1_norm(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self − other‖_∞`.
    pub fn sup_distance(&self, other: &Grid3<f64>) -> Result<f64> {
        other.ensure_shape(self.shape)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g: Grid3<f64> = Grid3::zeros([3, 4, 5]);
        for flat in 0..g.len() {
            assert_eq!(g.index(g.coords(flat)), flat);
        }
        assert_eq!(g.index([1, 2, 3]), 20 + 10 + 3);
    }

    #[test]
    fn signed_lookup_bounds() {
        let g = Grid3::from_fn([2, 2, 2], |[z, y, x]| (z * 4 + y * 2 + x) as f64);
        assert_eq!(g.get_signed([1, 1, 1]), Some(&7.0));
        assert_eq!(g.get_signed([-1, 0, 0]), None);
        assert_eq!(g.get_signed([0, 2, 0]), None);
    }

    #[test]
    fn shape_strings() {
        assert_eq!(parse_shape("9,5,5").unwrap(), [9, 5, 5]);
        assert_eq!(parse_shape("64").unwrap(), [64, 64, 64]);
        assert!(parse_shape("9,5").is_err());
        assert!(parse_shape("0,5,5").is_err());
    }

    #[test]
    fn zero_component_rejected() {
        assert!(check_shape([1, 0, 3]).is_err());
        assert!(check_shape([1, 1, 1]).is_ok());
    }
}
