//! Dense row-major tensors and the data-movement primitives the temporal
//! module is assembled from.
//!
//! Every operation materializes its result; there are no lazy views. This
//! keeps comparisons against the reference oracles bit-exact.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;

use crate::error::{shape_err, Error, Result};

/// Element type of a [`Tensor`]. Inference runs in `f32`; gradient checks use `f64`.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense N-dimensional array, last axis fastest.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<&T> = self.data.iter().take(8).collect();
        f.debug_struct("Tensor")
            .field("dims", &self.dims)
            .field("data", &preview)
            .finish()
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return shape_err("tensor rank must be at least 1");
    }
    if let Some(pos) = dims.iter().position(|&d| d == 0) {
        return shape_err(format!("axis {pos} has size 0 in {dims:?}"));
    }
    Ok(dims.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n = check_dims(&dims)?;
        if n != data.len() {
            return shape_err(format!(
                "dims {dims:?} hold {n} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn full(dims: &[usize], value: T) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, T::zero())
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            data: (0..n).map(f).collect(),
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![v],
        }
    }

    #[inline]
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.dims.len()
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of `axis`, or an axis error.
    pub fn dim(&self, axis: usize) -> Result<usize> {
        self.dims.get(axis).copied().ok_or(Error::Axis {
            axis,
            rank: self.rank(),
        })
    }

    fn axis_split(&self, axis: usize) -> Result<(usize, usize, usize)> {
        let n = self.dim(axis)?;
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        Ok((outer, n, inner))
    }

    pub fn reshape(&self, new_dims: &[usize]) -> Result<Self> {
        let n = check_dims(new_dims)?;
        if n != self.len() {
            return shape_err(format!(
                "cannot reshape {:?} ({} elements) into {new_dims:?} ({n} elements)",
                self.dims,
                self.len()
            ));
        }
        Ok(Self {
            dims: new_dims.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Collapses to rank 1.
    pub fn flatten(&self) -> Self {
        Self {
            dims: vec![self.len()],
            data: self.data.clone(),
        }
    }

    /// Swaps two axes and materializes the result row-major.
    pub fn transpose2(&self, axis_a: usize, axis_b: usize) -> Result<Self> {
        let rank = self.rank();
        for axis in [axis_a, axis_b] {
            if axis >= rank {
                return Err(Error::Axis { axis, rank });
            }
        }
        if axis_a == axis_b {
            return Err(Error::Invalid(format!(
                "transpose2 needs distinct axes, got {axis_a} twice"
            )));
        }
        let mut out_dims = self.dims.clone();
        out_dims.swap(axis_a, axis_b);

        let in_strides = strides(&self.dims);
        // stride in the input for each output axis
        let mut src_strides = in_strides.clone();
        src_strides.swap(axis_a, axis_b);

        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; rank];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            // odometer increment over out_dims
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_dims[ax] {
                    break;
                }
                src -= src_strides[ax] * out_dims[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self {
            dims: out_dims,
            data,
        })
    }

    /// Tiles the whole tensor `times` times along `axis`.
    pub fn repeat_axis(&self, axis: usize, times: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis)?;
        if times == 0 {
            return Err(Error::Invalid("repeat_axis needs times >= 1".into()));
        }
        let chunk = n * inner;
        let mut data = Vec::with_capacity(self.len() * times);
        for o in 0..outer {
            let src = &self.data[o * chunk..(o + 1) * chunk];
            for _ in 0..times {
                data.extend_from_slice(src);
            }
        }
        let mut dims = self.dims.clone();
        dims[axis] *= times;
        Ok(Self { dims, data })
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let (outer, n, inner) = self.axis_split(axis)?;
        if len == 0 || start + len > n {
            return shape_err(format!(
                "slice [{start}, {}) out of range for axis {axis} of size {n}",
                start + len
            ));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut dims = self.dims.clone();
        dims[axis] = len;
        Ok(Self { dims, data })
    }

    /// Joins `parts` along `axis`, preserving part order.
    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = match parts.first() {
            Some(p) => *p,
            None => return shape_err("concat of zero parts"),
        };
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Axis { axis, rank });
        }
        for p in parts {
            let agrees = p.rank() == rank
                && p.dims
                    .iter()
                    .zip(&first.dims)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !agrees {
                return shape_err(format!(
                    "concat on axis {axis}: {:?} does not match {:?}",
                    p.dims, first.dims
                ));
            }
        }
        let outer: usize = first.dims[..axis].iter().product();
        let inner: usize = first.dims[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.dims[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.dims[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = first.dims.clone();
        dims[axis] = total;
        Ok(Self { dims, data })
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            ));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for ax in (0..dims.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * dims[ax + 1];
    }
    s
}

/// Largest absolute elementwise difference. Panics on length mismatch.
pub fn max_abs_diff<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff on different lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

/// Normwise relative error of `got` against `reference`:
/// `max|got - ref| / max|ref|` (denominator floored at `f64::MIN_POSITIVE`).
pub fn max_rel_err<T: Scalar>(got: &[T], reference: &[T]) -> f64 {
    let scale = reference
        .iter()
        .map(|v| v.as_f64().abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    max_abs_diff(got, reference) / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(dims: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
    }

    #[test]
    fn reshape_keeps_flat_order() {
        let a = t(&[6], &[1., 2., 3., 4., 5., 6.]);
        let b = a.reshape(&[2, 3]).unwrap();
        assert_eq!(b.dims(), &[2, 3]);
        assert_eq!(b.data(), a.data());
        assert!(matches!(b.reshape(&[7]), Err(Error::Shape(_))));
    }

    #[test]
    fn reshape_192_round_trip() {
        let a = Tensor::<f32>::from_fn(&[192], |i| i as f32).unwrap();
        let back = a.reshape(&[64, 3]).unwrap().flatten();
        assert_eq!(back, a);
    }

    #[test]
    fn transpose_matches_definition() {
        let a = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b = a.transpose2(0, 1).unwrap();
        assert_eq!(b.dims(), &[3, 2]);
        assert_eq!(b.data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(b.transpose2(1, 0).unwrap(), a);
    }

    #[test]
    fn transpose_bad_axis() {
        let a = t(&[3], &[1., 2., 3.]);
        assert!(matches!(
            a.transpose2(0, 1),
            Err(Error::Axis { axis: 1, rank: 1 })
        ));
        assert!(a.transpose2(0, 0).is_err());
    }

    #[test]
    fn transpose_middle_axes_of_rank4() {
        let a = Tensor::<f32>::from_fn(&[2, 3, 4, 5], |i| i as f32).unwrap();
        let b = a.transpose2(1, 3).unwrap();
        assert_eq!(b.dims(), &[2, 5, 4, 3]);
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        let src = a.data()[((n * 3 + c) * 4 + h) * 5 + w];
                        let dst = b.data()[((n * 5 + w) * 4 + h) * 3 + c];
                        assert_eq!(src, dst);
                    }
                }
            }
        }
    }

    #[test]
    fn repeat_frames_three_times() {
        let a = t(&[3, 1], &[1., 2., 3.]);
        let r = a.repeat_axis(0, 3).unwrap();
        assert_eq!(r.data(), &[1., 2., 3., 1., 2., 3., 1., 2., 3.]);
        assert_eq!(a.repeat_axis(0, 1).unwrap(), a);
        let s = t(&[1], &[7.]).repeat_axis(0, 4).unwrap();
        assert_eq!(s.data(), &[7.; 4]);
        assert!(matches!(a.repeat_axis(2, 2), Err(Error::Axis { .. })));
    }

    #[test]
    fn concat_channels() {
        let a = Tensor::<f32>::full(&[2, 4, 4], 1.0).unwrap();
        let b = Tensor::<f32>::full(&[3, 4, 4], 2.0).unwrap();
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.dims(), &[5, 4, 4]);
        assert_eq!(Tensor::concat(&[&a], 0).unwrap(), a);
        let bad = Tensor::<f32>::full(&[3, 5, 4], 2.0).unwrap();
        assert!(matches!(
            Tensor::concat(&[&a, &bad], 0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn elementwise_basics() {
        let x = t(&[3], &[-1., 0., 2.]);
        assert_eq!(x.add(&Tensor::zeros(&[3]).unwrap()).unwrap(), x);
        assert_eq!(x.relu().data(), &[0., 0., 2.]);
        assert_eq!(x.sigmoid().data()[1], 0.5);
        assert!(x.add(&Tensor::zeros(&[4]).unwrap()).is_err());
        assert!(x.slice_axis(0, 2, 2).is_err());
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        let x = t(&[4], &[-30., -5., 5., 15.]);
        for &v in x.sigmoid().data() {
            assert!(v > 0.0 && v < 1.0 || v == 1.0, "{v}");
        }
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            prop::collection::vec(-10f32..10f32, n)
                .prop_map(move |data| Tensor::new(dims.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transpose_is_involution(a in arb_tensor(), ax in 0usize..4, shift in 1usize..4) {
            prop_assume!(a.rank() > 1);
            let ax = ax % a.rank();
            let bx = (ax + shift % (a.rank() - 1).max(1)).max(ax + 1) % a.rank();
            prop_assume!(ax != bx);
            let back = a.transpose2(ax, bx).unwrap().transpose2(ax, bx).unwrap();
            prop_assert_eq!(back, a);
        }

        #[test]
        fn repeat_blocks_slice_back(a in arb_tensor(), axis in 0usize..4, k in 1usize..4) {
            prop_assume!(axis < a.rank());
            let n = a.dims()[axis];
            let r = a.repeat_axis(axis, k).unwrap();
            for b in 0..k {
                prop_assert_eq!(&r.slice_axis(axis, b * n, n).unwrap(), &a);
            }
        }

        #[test]
        fn concat_then_slices_recovers(a in arb_tensor(), extra in 1usize..4, axis in 0usize..4) {
            prop_assume!(axis < a.rank());
            let mut dims = a.dims().to_vec();
            dims[axis] = extra;
            let b = Tensor::<f32>::from_fn(&dims, |i| i as f32 * 0.5).unwrap();
            let c = Tensor::concat(&[&a, &b], axis).unwrap();
            let n = a.dims()[axis];
            prop_assert_eq!(&c.slice_axis(axis, 0, n).unwrap(), &a);
            prop_assert_eq!(&c.slice_axis(axis, n, extra).unwrap(), &b);
        }
    }
}
