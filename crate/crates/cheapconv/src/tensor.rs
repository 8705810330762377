use crate::error::{Error, Result};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt;

/// Floating-point element type for tensors. Training defaults to `f32`;
/// gradient checks instantiate everything at `f64` so central differences
/// have enough precision to resolve a 1e-4 relative tolerance.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + fmt::Debug + fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major N-dimensional array. Feature maps use `[N, C, H, W]`.
#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: fmt::Debug> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} wants {n} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![S::of(v); n] }
    }

    /// Rank-1 scalar carrier `[1]`, used as loss roots.
    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![S::of(v)] }
    }

    pub fn from_f64(shape: &[usize], vals: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), vals.iter().map(|&v| S::of(v)).collect())
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(N, C, H, W)` extents; panics if the tensor is not rank 4.
    #[inline]
    pub fn dim4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected rank-4 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    /// `(rows, cols)` extents; panics if not rank 2.
    #[inline]
    pub fn dim2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1])
    }

    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> S {
        let (_, cc, hh, ww) = self.dim4();
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// In-place `self += other` (shapes must match exactly).
    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        let v = S::of(v);
        for x in self.data.iter_mut() {
            *x = v;
        }
    }
}

/// A learnable tensor with its gradient and momentum buffers.
#[derive(Clone, Debug)]
pub struct Parameter<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    pub momentum: Tensor<S>,
    pub requires_grad: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, value: Tensor<S>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(&shape),
            momentum: Tensor::zeros(&shape),
            requires_grad: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Flat, index-addressed collection of parameters owned by one network
/// (or by the online teacher head).
#[derive(Clone, Debug, Default)]
pub struct ParamSet<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, p: Parameter<S>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter<S> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<S> {
        &mut self.params[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<S>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_mismatch_is_rejected() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn index4() {
        let t = Tensor::<f64>::from_f64(&[1, 2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        assert_eq!(t.at4(0, 1, 0, 1), 5.0);
    }

    #[test]
    fn param_buffers_share_shape() {
        let p = Parameter::new("w", Tensor::<f32>::zeros(&[3, 4]));
        assert_eq!(p.value.shape(), p.grad.shape());
        assert_eq!(p.value.shape(), p.momentum.shape());
    }
}
