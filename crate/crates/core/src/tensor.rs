//! Dense channel-first tensors and the handful of kernels the attention code needs.
//!
//! Storage is a flat row-major `Vec` plus an extent list. Feature maps are laid
//! out as `C × spatial...`, so a "position" is a flat index into the trailing
//! extents and a channel vector is strided by the spatial volume.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. `f64` is the default everywhere; `f32` exists
/// for benchmark-style runs.
pub trait Scalar: Float + FromPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static {
    /// Byte width written into the CCT1 header.
    const WIDTH: u8;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to any float")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Scalar for f64 {
    const WIDTH: u8 = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
}

impl Scalar for f32 {
    const WIDTH: u8 = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be at least 1".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "every extent must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if data.len() != len {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("data holds {} elements, extents need {len}", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        })
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Leading extent, the channel count for feature maps.
    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Extents after the channel axis.
    pub fn spatial_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Number of spatial positions (product of the trailing extents).
    pub fn positions(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::ShapeMismatch {
                context: "multi-index",
                lhs: index.to_vec(),
                rhs: self.shape.clone(),
            });
        }
        let mut off = 0;
        for (&i, &n) in index.iter().zip(&self.shape) {
            if i >= n {
                return Err(Error::Index {
                    what: "tensor",
                    index: i,
                    len: n,
                });
            }
            off = off * n + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, "elementwise")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.same_shape(other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `max |a - b| / max(1, max |b|)`; the comparison metric used by the
    /// oracle-equivalence checks.
    pub fn max_rel_diff(&self, reference: &Self) -> Result<T> {
        let scale = reference.max_abs().max(T::one());
        Ok(self.max_abs_diff(reference)? / scale)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    fn same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Weights of a bias-free 1×1 (or 1×1×1) convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionWeights<T = f64> {
    out_channels: usize,
    in_channels: usize,
    weight: Vec<T>,
}

impl<T: Scalar> ProjectionWeights<T> {
    /// `weight` is row-major `out_channels × in_channels`.
    pub fn new(out_channels: usize, in_channels: usize, weight: Vec<T>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 {
            return Err(Error::InvalidShape {
                shape: vec![out_channels, in_channels],
                reason: "projection extents must be positive".into(),
            });
        }
        if weight.len() != out_channels * in_channels {
            return Err(Error::InvalidShape {
                shape: vec![out_channels, in_channels],
                reason: format!("weight holds {} entries", weight.len()),
            });
        }
        Ok(Self {
            out_channels,
            in_channels,
            weight,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize) -> Result<Self> {
        Self::new(out_channels, in_channels, vec![T::zero(); out_channels * in_channels])
    }

    pub fn identity(channels: usize) -> Result<Self> {
        let mut w = Self::zeros(channels, channels)?;
        for c in 0..channels {
            w.weight[c * channels + c] = T::one();
        }
        Ok(w)
    }

    /// Gaussian init with standard deviation `1/sqrt(in_channels)`.
    pub fn random<R: Rng + ?Sized>(out_channels: usize, in_channels: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (in_channels as f64).sqrt();
        let w = Tensor::<T>::randn(&[out_channels, in_channels], std, rng)?;
        Self::new(out_channels, in_channels, w.into_data())
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn weight(&self) -> &[T] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [T] {
        &mut self.weight
    }

    pub fn at(&self, out: usize, inp: usize) -> T {
        self.weight[out * self.in_channels + inp]
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        pointwise_project(x, self)
    }
}

/// `out[c, p] = Σ_k w[c, k] · x[k, p]` at every spatial position `p`.
pub fn pointwise_project<T: Scalar>(x: &Tensor<T>, w: &ProjectionWeights<T>) -> Result<Tensor<T>> {
    if x.rank() < 1 || x.channels() != w.in_channels {
        return Err(Error::ChannelMismatch {
            context: "pointwise projection input channels",
            expected: w.in_channels,
            found: x.channels(),
        });
    }
    let n = x.positions();
    let mut shape = x.shape.clone();
    shape[0] = w.out_channels;
    let mut out = vec![T::zero(); w.out_channels * n];
    for (c, row) in out.chunks_exact_mut(n).enumerate() {
        for k in 0..w.in_channels {
            let wck = w.weight[c * w.in_channels + k];
            if wck == T::zero() {
                continue;
            }
            let src = &x.data[k * n..(k + 1) * n];
            for (o, &s) in row.iter_mut().zip(src) {
                *o = *o + wck * s;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Reverse pass of [`pointwise_project`]: returns `(dL/dx, dL/dw)`.
pub fn project_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &ProjectionWeights<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, ProjectionWeights<T>)> {
    if d_out.channels() != w.out_channels || d_out.positions() != x.positions() {
        return Err(Error::ShapeMismatch {
            context: "projection backward",
            lhs: d_out.shape.clone(),
            rhs: x.shape.clone(),
        });
    }
    let n = x.positions();
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.weight.len()];
    for c in 0..w.out_channels {
        let g = &d_out.data[c * n..(c + 1) * n];
        for k in 0..w.in_channels {
            let xs = &x.data[k * n..(k + 1) * n];
            dw[c * w.in_channels + k] = g.iter().zip(xs).map(|(&a, &b)| a * b).sum();
            let wck = w.weight[c * w.in_channels + k];
            for (d, &gv) in dx[k * n..(k + 1) * n].iter_mut().zip(g) {
                *d = *d + wck * gv;
            }
        }
    }
    Ok((
        Tensor::new(x.shape.clone(), dx)?,
        ProjectionWeights::new(w.out_channels, w.in_channels, dw)?,
    ))
}

/// Max-stabilised softmax along `axis`.
pub fn softmax_axis<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::Index {
            what: "softmax axis",
            index: axis,
            len: x.rank(),
        });
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x.data[idx(j)]));
            let mut total = T::zero();
            for j in 0..len {
                let e = (x.data[idx(j)] - max).exp();
                out[idx(j)] = e;
                total = total + e;
            }
            for j in 0..len {
                out[idx(j)] = out[idx(j)] / total;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f64>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn identity_projection_of_ones() {
        let x = Tensor::<f64>::full(&[2, 1, 1], 1.0).unwrap();
        let w = ProjectionWeights::identity(2).unwrap();
        assert_eq!(pointwise_project(&x, &w).unwrap(), x);
    }

    #[test]
    fn permutation_projection() {
        let x = Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap();
        let w = ProjectionWeights::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pointwise_project(&x, &w).unwrap().data(), &[2.0, 1.0]);
    }

    #[test]
    fn projection_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[3, 4, 5], 1.0, &mut rng).unwrap();
        let w = ProjectionWeights::<f64>::random(2, 3, &mut rng).unwrap();
        let y = pointwise_project(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        for c in 0..2 {
            for r in 0..4 {
                for s in 0..5 {
                    let mut acc = 0.0;
                    for k in 0..3 {
                        acc += w.at(c, k) * x.get(&[k, r, s]).unwrap();
                    }
                    assert!((y.get(&[c, r, s]).unwrap() - acc).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn projection_channel_mismatch_names_extents() {
        let x = Tensor::<f64>::zeros(&[3, 2, 2]).unwrap();
        let w = ProjectionWeights::<f64>::zeros(2, 4).unwrap();
        let msg = pointwise_project(&x, &w).unwrap_err().to_string();
        assert!(msg.contains('4') && msg.contains('3'), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_two_point() {
        let x = Tensor::<f64>::full(&[5], 0.7).unwrap();
        for v in softmax_axis(&x, 0).unwrap().data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        let x = Tensor::new(vec![2], vec![0.0, 3f64.ln()]).unwrap();
        let s = softmax_axis(&x, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_middle_axis_only_touches_that_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[2, 3, 4], 2.0, &mut rng).unwrap();
        let s = softmax_axis(&x, 1).unwrap();
        for a in 0..2 {
            for c in 0..4 {
                let total: f64 = (0..3).map(|b| s.get(&[a, b, c]).unwrap()).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(softmax_axis(&x, 3), Err(Error::Index { .. })));
    }

    #[test]
    fn project_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[3, 2, 2], 1.0, &mut rng).unwrap();
        let g = Tensor::<f64>::randn(&[4, 2, 2], 1.0, &mut rng).unwrap();
        let w = ProjectionWeights::<f64>::random(4, 3, &mut rng).unwrap();
        let (dx, dw) = project_backward(&x, &w, &g).unwrap();
        // <g, W x> = <W^T g, x> = <g x^T, W>
        let lhs = g.dot(&pointwise_project(&x, &w).unwrap()).unwrap();
        assert!((lhs - dx.dot(&x).unwrap()).abs() < 1e-12);
        let rhs: f64 = dw.weight().iter().zip(w.weight()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
