//! Dense row-major tensors and the integer vectors that describe them.
//!
//! A [`Bound`] gives the extent of every dimension; a [`Partition`] gives the
//! number of slices per dimension. Both are plain vectors of positive integers
//! wrapped so that the two are not mixed up by accident.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! index_vector {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<usize>);

        impl $name {
            pub fn new(entries: Vec<usize>) -> Self {
                Self(entries)
            }

            pub fn ones(rank: usize) -> Self {
                Self(vec![1; rank])
            }

            pub fn rank(&self) -> usize {
                self.0.len()
            }

            /// Product of all entries.
            pub fn volume(&self) -> usize {
                self.0.iter().product()
            }

            pub fn as_slice(&self) -> &[usize] {
                &self.0
            }

            pub fn into_inner(self) -> Vec<usize> {
                self.0
            }
        }

        impl Deref for $name {
            type Target = [usize];
            fn deref(&self) -> &[usize] {
                &self.0
            }
        }

        impl From<Vec<usize>> for $name {
            fn from(v: Vec<usize>) -> Self {
                Self(v)
            }
        }

        impl From<&[usize]> for $name {
            fn from(v: &[usize]) -> Self {
                Self(v.to_vec())
            }
        }

        impl<const N: usize> From<[usize; N]> for $name {
            fn from(v: [usize; N]) -> Self {
                Self(v.to_vec())
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "[")?;
                for (i, e) in self.0.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{e}")?;
                }
                write!(f, "]")
            }
        }
    };
}

index_vector!(Bound);
index_vector!(Partition);

impl Partition {
    /// Checks that every entry is positive and divides the matching bound entry.
    pub fn check_divides(&self, bound: &Bound) -> Result<()> {
        if self.rank() != bound.rank() {
            return Err(Error::Shape(format!(
                "partition {self} has rank {} but bound {bound} has rank {}",
                self.rank(),
                bound.rank()
            )));
        }
        for (dim, (&part, &b)) in self.iter().zip(bound.iter()).enumerate() {
            if part == 0 || b % part != 0 {
                return Err(Error::Chunking {
                    dim,
                    bound: b,
                    part,
                });
            }
        }
        Ok(())
    }

    /// Bound of every chunk, `bound / self` elementwise.
    pub fn chunk_bound(&self, bound: &Bound) -> Result<Bound> {
        self.check_divides(bound)?;
        Ok(Bound(
            bound.iter().zip(self.iter()).map(|(b, d)| b / d).collect(),
        ))
    }

    pub fn is_power_of_two(&self) -> bool {
        self.iter().all(|d| d.is_power_of_two())
    }
}

/// Row-major strides for `extent`.
pub fn strides(extent: &[usize]) -> Vec<usize> {
    let mut s = vec![1; extent.len()];
    for i in (0..extent.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * extent[i + 1];
    }
    s
}

/// Calls `f` on every index of `I(extent)` in lexicographic order.
pub fn for_each_index(extent: &[usize], mut f: impl FnMut(&[usize])) {
    if extent.contains(&0) {
        return;
    }
    let mut idx = vec![0; extent.len()];
    loop {
        f(&idx);
        let mut dim = extent.len();
        loop {
            if dim == 0 {
                return;
            }
            dim -= 1;
            idx[dim] += 1;
            if idx[dim] < extent[dim] {
                break;
            }
            idx[dim] = 0;
        }
    }
}

/// All indices of `I(extent)` in lexicographic order.
pub fn all_indices(extent: &[usize]) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(extent.iter().product());
    for_each_index(extent, |i| out.push(i.to_vec()));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    bound: Bound,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(bound: impl Into<Bound>, values: Vec<f64>) -> Result<Self> {
        let bound = bound.into();
        if bound.contains(&0) {
            return Err(Error::Shape(format!("bound {bound} has a zero extent")));
        }
        if bound.volume() != values.len() {
            return Err(Error::Shape(format!(
                "bound {bound} needs {} values, got {}",
                bound.volume(),
                values.len()
            )));
        }
        Ok(Self { bound, values })
    }

    pub fn filled(bound: impl Into<Bound>, value: f64) -> Self {
        let bound = bound.into();
        let n = bound.volume();
        Self {
            bound,
            values: vec![value; n],
        }
    }

    pub fn zeros(bound: impl Into<Bound>) -> Self {
        Self::filled(bound, 0.0)
    }

    pub fn from_fn(bound: impl Into<Bound>, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let bound = bound.into();
        let mut values = Vec::with_capacity(bound.volume());
        for_each_index(&bound, |i| values.push(f(i)));
        Self { bound, values }
    }

    pub fn bound(&self) -> &Bound {
        &self.bound
    }

    pub fn rank(&self) -> usize {
        self.bound.rank()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        let mut off = 0;
        for (&i, &b) in index.iter().zip(self.bound.iter()) {
            debug_assert!(i < b);
            off = off * b + i;
        }
        off
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.values[off] = value;
    }

    /// Copies out the block starting at `offset` with extent `extent`.
    pub fn block(&self, offset: &[usize], extent: &[usize]) -> Tensor {
        let mut pos = vec![0; self.rank()];
        Tensor::from_fn(extent.to_vec(), |local| {
            for d in 0..local.len() {
                pos[d] = offset[d] + local[d];
            }
            self.get(&pos)
        })
    }

    /// Writes `src` into this tensor starting at `offset`.
    pub fn write_block(&mut self, offset: &[usize], src: &Tensor) {
        let mut pos = vec![0; self.rank()];
        for_each_index(src.bound(), |local| {
            for d in 0..local.len() {
                pos[d] = offset[d] + local[d];
            }
            let v = src.get(local);
            self.set(&pos, v);
        });
    }

    /// Largest absolute elementwise difference; `None` when bounds differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.bound != other.bound {
            return None;
        }
        Some(
            self.values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        )
    }

    /// `max|self - reference| / max|reference|`, the infinity-norm relative error.
    pub fn max_rel_error(&self, reference: &Tensor) -> Option<f64> {
        let diff = self.max_abs_diff(reference)?;
        let scale = reference.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            Some(diff)
        } else {
            Some(diff / scale)
        }
    }
}
