//! Dense row-major tensors of rank 0 to 4.
//!
//! Images are `[C, H, W]`, batches of images `[N, C, H, W]`. A `Tensor` is a
//! plain value; gradient bookkeeping lives on the [`Graph`](crate::Graph).

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, S::one())
    }

    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        Self::from_fn(shape, |_| S::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W)` view of an image or image batch; a rank-3 tensor is a
    /// batch of one.
    pub fn image_dims(&self) -> Result<(usize, usize, usize, usize)> {
        image_dims(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(T::nan))
                .collect(),
        }
    }

    pub fn sum(&self) -> S {
        self.data.iter().fold(S::zero(), |acc, &v| acc + v)
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return shape_err("dot", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc + a * b))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        if self.shape != other.shape {
            return shape_err("max_abs_diff", format!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(S::zero(), |acc, (&a, &b)| acc.max((a - b).abs())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<S>]) -> Result<Self> {
        let Some(first) = items.first() else {
            return invalid("stack", "no tensors to stack");
        };
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err("stack", format!("{:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        Self::new(&shape, data)
    }

    /// The `index`-th slice along the leading axis.
    pub fn slice_first(&self, index: usize) -> Result<Self> {
        if self.rank() == 0 || index >= self.shape[0] {
            return invalid("slice_first", format!("index {index} for shape {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        let data = self.data[index * inner..(index + 1) * inner].to_vec();
        Ok(Self {
            shape: self.shape[1..].to_vec(),
            data,
        })
    }

    pub fn unstack(&self) -> Result<Vec<Self>> {
        if self.rank() == 0 {
            return invalid("unstack", "scalar tensor");
        }
        (0..self.shape[0]).map(|i| self.slice_first(i)).collect()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.len() > MAX_RANK {
        return invalid("tensor", format!("rank {} exceeds {MAX_RANK}", shape.len()));
    }
    if shape.iter().any(|&d| d == 0) {
        return invalid("tensor", format!("zero extent in {shape:?}"));
    }
    Ok(())
}

pub(crate) fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => shape_err("image", format!("expected [C,H,W] or [N,C,H,W], got {shape:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_data_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rejects_zero_extent_and_high_rank() {
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[1, 1, 1, 1, 1]).is_err());
    }

    #[test]
    fn stack_and_unstack_are_inverse() {
        let a = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64).unwrap();
        let b = Tensor::<f64>::from_fn(&[2, 2], |i| 10.0 + i as f64).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.unstack().unwrap(), vec![a, b]);
    }

    #[test]
    fn rank3_is_a_batch_of_one() {
        let t = Tensor::<f32>::zeros(&[3, 4, 5]).unwrap();
        assert_eq!(t.image_dims().unwrap(), (1, 3, 4, 5));
    }
}
