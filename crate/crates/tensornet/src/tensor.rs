use crate::{Result, Scalar, TensorError};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense row-major array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) || n != data.len() {
            return Err(TensorError::Shape { expected: format!("{} values for {shape:?}", n), actual: vec![data.len()] });
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.iter().product()).map(|_| T::of(normal.sample(rng))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape { expected: format!("{shape:?}"), actual: self.shape });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|x| U::of(x.f64())).collect() }
    }

    /// `[N, C, H, W]` extents, or a shape error.
    pub fn nchw(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(TensorError::Shape { expected: "[N, C, H, W]".into(), actual: self.shape.clone() }),
        }
    }

    pub fn expect_shape(&self, expected: &[usize]) -> Result<()> {
        if self.shape != expected {
            return Err(TensorError::Shape { expected: format!("{expected:?}"), actual: self.shape.clone() });
        }
        Ok(())
    }

    /// Concatenate two NCHW tensors along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        let [n, ca, h, w] = a.nchw()?;
        let [nb, cb, hb, wb] = b.nchw()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::Shape { expected: format!("[{n}, _, {h}, {w}]"), actual: b.shape.clone() });
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(a.len() + b.len());
        for i in 0..n {
            data.extend_from_slice(&a.data[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.data[i * cb * plane..(i + 1) * cb * plane]);
        }
        Ok(Self { shape: vec![n, ca + cb, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`]: the first `ca` channels and the rest.
    pub fn split_channels(&self, ca: usize) -> Result<(Self, Self)> {
        let [n, c, h, w] = self.nchw()?;
        if ca == 0 || ca >= c {
            return Err(TensorError::Shape { expected: format!("more than {ca} channels"), actual: self.shape.clone() });
        }
        let cb = c - ca;
        let plane = h * w;
        let (mut a, mut b) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
        for i in 0..n {
            let s = &self.data[i * c * plane..(i + 1) * c * plane];
            a.extend_from_slice(&s[..ca * plane]);
            b.extend_from_slice(&s[ca * plane..]);
        }
        Ok((Self { shape: vec![n, ca, h, w], data: a }, Self { shape: vec![n, cb, h, w], data: b }))
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        other.expect_shape(&self.shape)?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x = *x + *y;
        }
        Ok(())
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of(self.data.len() as f64)
    }
}

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split() {
        let a = Tensor::<f32>::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f32>::new(&[2, 2, 1, 2], (5..13).map(|x| x as f32).collect()).unwrap();
        let c = Tensor::concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0]);
        let (x, y) = c.split_channels(1).unwrap();
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0, 2], vec![]).is_err());
        assert!(Tensor::<f32>::zeros(&[4]).nchw().is_err());
    }
}
