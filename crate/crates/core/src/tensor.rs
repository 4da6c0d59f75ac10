//! Rank-4 tensor container (batch, channel, height, width) and pointwise algebra.

use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Dense (B, C, H, W) array of f64, row-major with W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    data: Vec<f64>,
    b: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl Tensor4 {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor4 {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn filled(b: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor4 {
            data: vec![value; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f64>, b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        if data.len() != b * c * h * w {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} != {}x{}x{}x{}", data.len(), b, c, h, w),
            ));
        }
        Ok(Tensor4 { data, b, c, h, w })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn(b: usize, c: usize, h: usize, w: usize, std: f64, rng: &mut DetRng) -> Self {
        let mut t = Tensor4::zeros(b, c, h, w);
        let mut i = 0;
        while i + 1 < t.data.len() {
            let (x, y) = rng.normal_pair();
            t.data[i] = x * std;
            t.data[i + 1] = y * std;
            i += 2;
        }
        if i < t.data.len() {
            t.data[i] = rng.normal() * std;
        }
        t
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.b, self.c, self.h, self.w)
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.b
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.c
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
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(b, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.idx(b, c, h, w);
        self.data[i] = v;
    }

    /// The H*W slice of one (batch, channel) plane.
    #[inline]
    pub fn plane(&self, b: usize, c: usize) -> &[f64] {
        let start = (b * self.c + c) * self.h * self.w;
        &self.data[start..start + self.h * self.w]
    }

    #[inline]
    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [f64] {
        let start = (b * self.c + c) * self.h * self.w;
        let len = self.h * self.w;
        &mut self.data[start..start + len]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor4 {
            data: self.data.iter().map(|&x| f(x)).collect(),
            ..*self
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    fn check_same_dims(&self, other: &Tensor4, op: &'static str) -> Result<()> {
        if !self.same_dims(other) {
            return Err(Error::shape(
                op,
                format!("left {:?} vs right {:?}", self.dims(), other.dims()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor4 { data, ..*self })
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor4 { data, ..*self })
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor4) -> Result<Tensor4> {
        self.check_same_dims(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor4 { data, ..*self })
    }

    pub fn scale(&self, s: f64) -> Tensor4 {
        self.map(|x| x * s)
    }

    /// In-place `self += other`, used for gradient accumulation.
    pub fn accumulate(&mut self, other: &Tensor4) -> Result<()> {
        self.check_same_dims(other, "accumulate")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Stack `a` then `b` along the channel axis.
    pub fn concat_channels(a: &Tensor4, b: &Tensor4) -> Result<Tensor4> {
        if a.b != b.b || a.h != b.h || a.w != b.w {
            return Err(Error::shape(
                "concat_channels",
                format!("left {:?} vs right {:?}", a.dims(), b.dims()),
            ));
        }
        let mut out = Tensor4::zeros(a.b, a.c + b.c, a.h, a.w);
        for bi in 0..a.b {
            for c in 0..a.c {
                out.plane_mut(bi, c).copy_from_slice(a.plane(bi, c));
            }
            for c in 0..b.c {
                out.plane_mut(bi, a.c + c).copy_from_slice(b.plane(bi, c));
            }
        }
        Ok(out)
    }

    /// Inverse of [`Tensor4::concat_channels`]: first `c_first` channels, rest.
    pub fn split_channels(&self, c_first: usize) -> Result<(Tensor4, Tensor4)> {
        if c_first > self.c {
            return Err(Error::shape(
                "split_channels",
                format!("split at {} but only {} channels", c_first, self.c),
            ));
        }
        let mut a = Tensor4::zeros(self.b, c_first, self.h, self.w);
        let mut b = Tensor4::zeros(self.b, self.c - c_first, self.h, self.w);
        for bi in 0..self.b {
            for c in 0..c_first {
                a.plane_mut(bi, c).copy_from_slice(self.plane(bi, c));
            }
            for c in c_first..self.c {
                b.plane_mut(bi, c - c_first).copy_from_slice(self.plane(bi, c));
            }
        }
        Ok((a, b))
    }
}

/// Gradients of the Hadamard product: (g·b, g·a).
pub fn mul_backward(grad: &Tensor4, a: &Tensor4, b: &Tensor4) -> Result<(Tensor4, Tensor4)> {
    Ok((grad.mul(b)?, grad.mul(a)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(b: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        let n = b * c * h * w;
        Tensor4::from_vec((0..n).map(|i| i as f64).collect(), b, c, h, w).unwrap()
    }

    #[test]
    fn indexing_is_row_major() {
        let t = ramp(2, 3, 4, 5);
        assert_eq!(t.at(0, 0, 0, 0), 0.0);
        assert_eq!(t.at(0, 0, 0, 1), 1.0);
        assert_eq!(t.at(0, 0, 1, 0), 5.0);
        assert_eq!(t.at(0, 1, 0, 0), 20.0);
        assert_eq!(t.at(1, 0, 0, 0), 60.0);
    }

    #[test]
    fn add_identity() {
        let a = ramp(1, 2, 3, 3);
        let z = Tensor4::zeros(1, 2, 3, 3);
        assert_eq!(a.add(&z).unwrap(), a);
    }

    #[test]
    fn mul_identity() {
        let a = ramp(1, 2, 3, 3);
        let ones = Tensor4::filled(1, 2, 3, 3, 1.0);
        assert_eq!(a.mul(&ones).unwrap(), a);
    }

    #[test]
    fn dim_mismatch_is_shape_error() {
        let a = Tensor4::zeros(1, 2, 3, 3);
        let b = Tensor4::zeros(1, 2, 3, 4);
        assert!(matches!(a.add(&b), Err(Error::Shape { .. })));
        assert!(matches!(a.mul(&b), Err(Error::Shape { .. })));
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = ramp(2, 3, 4, 4);
        let b = ramp(2, 2, 4, 4).scale(-1.0);
        let cat = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.channels(), 5);
        // channel c of the output for c < C_a equals channel c of a
        for bi in 0..2 {
            for c in 0..3 {
                assert_eq!(cat.plane(bi, c), a.plane(bi, c));
            }
        }
        let (a2, b2) = cat.split_channels(3).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
    }

    #[test]
    fn concat_with_empty_is_identity() {
        let a = ramp(1, 3, 2, 2);
        let empty = Tensor4::zeros(1, 0, 2, 2);
        let cat = Tensor4::concat_channels(&a, &empty).unwrap();
        assert_eq!(cat, a);
    }

    #[test]
    fn concat_spatial_mismatch_errors() {
        let a = Tensor4::zeros(1, 1, 2, 2);
        let b = Tensor4::zeros(1, 1, 2, 3);
        assert!(Tensor4::concat_channels(&a, &b).is_err());
    }
}
