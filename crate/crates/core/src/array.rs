use crate::error::{Error, Result};
use crate::real::Real;

/// Dense `paths × times × width` array stored path-major, so one path is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct PathArray<T> {
    paths: usize,
    times: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> PathArray<T> {
    pub fn filled(paths: usize, times: usize, width: usize, value: T) -> Self {
        Self {
            paths,
            times,
            width,
            data: vec![value; paths * times * width],
        }
    }

    pub fn from_vec(paths: usize, times: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != paths * times * width {
            return Err(Error::Shape(format!(
                "expected {} entries for {paths}x{times}x{width}, got {}",
                paths * times * width,
                data.len()
            )));
        }
        Ok(Self {
            paths,
            times,
            width,
            data,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn times(&self) -> usize {
        self.times
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    fn offset(&self, p: usize, i: usize) -> usize {
        (p * self.times + i) * self.width
    }

    #[inline]
    pub fn at(&self, p: usize, i: usize) -> &[T] {
        let o = self.offset(p, i);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize, i: usize) -> &mut [T] {
        let o = self.offset(p, i);
        &mut self.data[o..o + self.width]
    }

    /// First component at `(p, i)`; the natural accessor for scalar arrays.
    #[inline]
    pub fn get(&self, p: usize, i: usize) -> T {
        self.data[self.offset(p, i)]
    }

    #[inline]
    pub fn set(&mut self, p: usize, i: usize, v: T) {
        let o = self.offset(p, i);
        self.data[o] = v;
    }

    pub fn path(&self, p: usize) -> &[T] {
        let o = self.offset(p, 0);
        &self.data[o..o + self.times * self.width]
    }

    pub fn path_mut(&mut self, p: usize) -> &mut [T] {
        let o = self.offset(p, 0);
        let len = self.times * self.width;
        &mut self.data[o..o + len]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Entries per path (`times × width`).
    pub fn path_len(&self) -> usize {
        self.times * self.width
    }

    pub fn same_shape<U>(&self, other: &PathArray<U>) -> bool {
        self.paths == other.paths && self.times == other.times && self.width == other.width
    }

    /// Copies component `k` into a scalar array.
    pub fn component(&self, k: usize) -> PathArray<T> {
        let mut data = Vec::with_capacity(self.paths * self.times);
        for chunk in self.data.chunks(self.width) {
            data.push(chunk[k]);
        }
        PathArray {
            paths: self.paths,
            times: self.times,
            width: 1,
            data,
        }
    }
}

impl<T: Real> PathArray<T> {
    /// Largest absolute entry over time indices `from..times`, skipping non-finite entries.
    pub fn sup_abs_from(&self, from: usize) -> T {
        let mut best = T::zero();
        for p in 0..self.paths {
            for i in from..self.times {
                for &v in self.at(p, i) {
                    if v.is_finite() {
                        best = best.max(v.abs());
                    }
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_path_major() {
        let mut a = PathArray::filled(2, 3, 2, 0.0f64);
        a.at_mut(1, 2)[1] = 5.0;
        assert_eq!(a.data()[(3 + 2) * 2 + 1], 5.0);
        assert_eq!(a.path(1)[5], 5.0);
        assert_eq!(a.component(1).get(1, 2), 5.0);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(PathArray::from_vec(2, 2, 1, vec![0.0f32; 3]).is_err());
        assert!(PathArray::from_vec(2, 2, 1, vec![0.0f32; 4]).is_ok());
    }
}
