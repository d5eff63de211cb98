//! Fixed-rank NCHW shapes.

use crate::error::{Error, Result};

/// Shape of a tensor: exactly four extents `[N, C, H, W]`. Lower-rank data
/// uses leading size-1 extents (a length-L vector is `[1, 1, 1, L]`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(extents: [usize; 4]) -> Result<Self> {
        let mut numel: usize = 1;
        for (i, &e) in extents.iter().enumerate() {
            if e == 0 {
                return Err(Error::size(format!(
                    "extent {i} of {extents:?} is zero; all extents must be >= 1"
                )));
            }
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::size(format!("element count of {extents:?} overflows")))?;
        }
        Ok(Shape(extents))
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides.
    #[inline]
    pub fn strides(&self) -> [usize; 4] {
        let [_, c, h, w] = self.0;
        [c * h * w, h * w, w, 1]
    }

    /// Flat offset of `[n, c, h, w]`.
    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.0[1] + c) * self.0[2] + h) * self.0[3] + w
    }

    /// Product of extents before `axis` (outer) and after it (inner).
    #[inline]
    pub fn outer_inner(&self, axis: usize) -> (usize, usize) {
        let outer: usize = self.0[..axis].iter().product();
        let inner: usize = self.0[axis + 1..].iter().product();
        (outer, inner)
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        assert!(Shape::new([1, 0, 2, 2]).is_err());
    }

    #[test]
    fn rejects_overflow() {
        assert!(Shape::new([usize::MAX, 2, 2, 2]).is_err());
    }

    #[test]
    fn strides_and_offsets() {
        let s = Shape::new([2, 3, 4, 5]).unwrap();
        assert_eq!(s.numel(), 120);
        assert_eq!(s.strides(), [60, 20, 5, 1]);
        assert_eq!(s.at(1, 2, 3, 4), 60 + 40 + 15 + 4);
        assert_eq!(s.outer_inner(1), (2, 20));
    }
}
