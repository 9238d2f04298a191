//! Dense row-major `f64` tensors.
//!
//! Everything in the crate works on single samples laid out as
//! `[channels, frames, depth, height, width]`; batching is done by running
//! several samples through the same tape.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    /// I.i.d. standard normal entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|x| x.clamp(lo, hi))
    }

    pub fn check_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return shape_err(format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    /// Splits the shape around `axis` into `(outer, axis_len, inner)`.
    pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return shape_err(format!(
                "slice {start}..{} of axis {axis} in {:?}",
                start + len,
                self.shape
            ));
        }
        let (outer, n, inner) = Self::axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn cat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| crate::Error::Empty("cat of nothing".into()))?;
        let mut shape = first.shape.clone();
        let mut total = 0;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape[i])
            {
                return shape_err(format!("cat along {axis}: {:?} vs {:?}", first.shape, p.shape));
            }
            total += p.shape[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = Self::axis_split(&first.shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let n = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * n..(o + 1) * n]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Reverses the order along `axis`.
    pub fn flip_axis(&self, axis: usize) -> Self {
        let (outer, n, inner) = Self::axis_split(&self.shape, axis);
        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for i in (0..n).rev() {
                let base = o * n * inner + i * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Self { shape: self.shape.clone(), data }
    }

    /// Mean pooling of the last three axes by an integer `factor`.
    pub fn avg_pool3(&self, factor: usize) -> Result<Self> {
        let r = self.rank();
        if r < 3 {
            return shape_err(format!("avg_pool3 needs rank >= 3, got {:?}", self.shape));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (d, h, w) = (self.shape[r - 3], self.shape[r - 2], self.shape[r - 1]);
        if d % factor != 0 || h % factor != 0 || w % factor != 0 {
            return shape_err(format!("{:?} not divisible by {factor}", self.shape));
        }
        let (od, oh, ow) = (d / factor, h / factor, w / factor);
        let lead: usize = self.shape[..r - 3].iter().product();
        let norm = 1.0 / (factor * factor * factor) as f64;
        let mut out = vec![0.0; lead * od * oh * ow];
        for l in 0..lead {
            let src = &self.data[l * d * h * w..(l + 1) * d * h * w];
            let dst = &mut out[l * od * oh * ow..(l + 1) * od * oh * ow];
            for z in 0..d {
                for y in 0..h {
                    let row = &src[(z * h + y) * w..(z * h + y + 1) * w];
                    let drow = ((z / factor) * oh + y / factor) * ow;
                    for (x, v) in row.iter().enumerate() {
                        dst[drow + x / factor] += v * norm;
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 3] = od;
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Ok(Self { shape, data: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slice_and_cat_invert() {
        let t = Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        let a = t.slice_axis(1, 0, 1).unwrap();
        let b = t.slice_axis(1, 1, 2).unwrap();
        assert_eq!(a.data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(Tensor::cat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn flip_twice_is_identity() {
        let t = Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(t.flip_axis(1).slice_axis(1, 0, 1).unwrap().data(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(t.flip_axis(1).flip_axis(1), t);
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let t = Tensor::full(&[2, 4, 4, 8], 0.25);
        let p = t.avg_pool3(2).unwrap();
        assert_eq!(p.shape(), &[2, 2, 2, 4]);
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(t.avg_pool3(3).is_err());
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 2], vec![0.0; 3]).is_err());
    }
}
