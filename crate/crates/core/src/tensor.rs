//! Dense grids used throughout the crate.
//!
//! [`Tensor3`] stores an `h × w × c` grid of `f64` in row-major HWC order, so
//! the channel vector of a cell is a contiguous slice. [`Mask`] is the binary
//! `h × w` counterpart.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64) -> Self {
        Self { h, w, c, data: vec![value; h * w * c] }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            bail!(Shape, "expected {} values for {h}x{w}x{c}, got {}", h * w * c, data.len());
        }
        Ok(Self { h, w, c, data })
    }

    /// Builds a grid by evaluating `f(i, j, d)` for every entry.
    pub fn from_fn(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for d in 0..c {
                    data.push(f(i, j, d));
                }
            }
        }
        Self { h, w, c, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn cells(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.c;
        &self.data[o..o + self.c]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.w + j) * self.c;
        &mut self.data[o..o + self.c]
    }

    /// Channel vector of the cell with flat index `idx = i * w + j`.
    #[inline]
    pub fn cell_flat(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.c..(idx + 1) * self.c]
    }

    #[inline]
    pub fn cell_flat_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.data[idx * self.c..(idx + 1) * self.c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.data[(i * self.w + j) * self.c + d]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, d: usize, v: f64) {
        self.data[(i * self.w + j) * self.c + d] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.dims(), other.dims());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    /// Stacks `a` and `b` along the channel axis (`a` first).
    pub fn concat_channels(a: &Tensor3, b: &Tensor3) -> Result<Tensor3> {
        if a.h != b.h || a.w != b.w {
            bail!(Shape, "cannot concat {}x{} with {}x{}", a.h, a.w, b.h, b.w);
        }
        let c = a.c + b.c;
        let mut data = Vec::with_capacity(a.cells() * c);
        for idx in 0..a.cells() {
            data.extend_from_slice(a.cell_flat(idx));
            data.extend_from_slice(b.cell_flat(idx));
        }
        Ok(Tensor3 { h: a.h, w: a.w, c, data })
    }

    /// Inverse of [`Tensor3::concat_channels`]: splits off the first `first` channels.
    pub fn split_channels(&self, first: usize) -> Result<(Tensor3, Tensor3)> {
        if first > self.c {
            bail!(Shape, "cannot split {} channels off a {}-channel grid", first, self.c);
        }
        let rest = self.c - first;
        let mut a = Vec::with_capacity(self.cells() * first);
        let mut b = Vec::with_capacity(self.cells() * rest);
        for idx in 0..self.cells() {
            let cell = self.cell_flat(idx);
            a.extend_from_slice(&cell[..first]);
            b.extend_from_slice(&cell[first..]);
        }
        Ok((
            Tensor3 { h: self.h, w: self.w, c: first, data: a },
            Tensor3 { h: self.h, w: self.w, c: rest, data: b },
        ))
    }
}

/// Binary `h × w` grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![false; h * w] }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![true; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            bail!(Shape, "expected {} cells for {h}x{w}, got {}", h * w, data.len());
        }
        Ok(Self { h, w, data })
    }

    /// Builds a mask from rows of `0`/`1` (any nonzero counts as set).
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            let r = r.as_ref();
            if r.len() != w {
                bail!(Shape, "ragged mask rows");
            }
            data.extend(r.iter().map(|&v| v != 0));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for i in 0..h {
            for j in 0..w {
                data.push(f(i, j));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.w + j] = v;
    }

    #[inline]
    pub fn get_flat(&self, idx: usize) -> bool {
        self.data[idx]
    }

    #[inline]
    pub fn set_flat(&mut self, idx: usize, v: bool) {
        self.data[idx] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn is_full(&self) -> bool {
        self.data.iter().all(|&v| v)
    }

    pub fn not(&self) -> Mask {
        Mask { h: self.h, w: self.w, data: self.data.iter().map(|v| !v).collect() }
    }

    pub fn and(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Cells set in `self` but not in `other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        debug_assert_eq!(self.dims(), other.dims());
        Mask {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && !*b).collect(),
        }
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(a, b)| *a && *b)
    }

    /// Indices `i * w + j` of set cells, in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.data.iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i)
    }
}
