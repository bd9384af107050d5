use crate::{Result, Scalar, Tensor, TensorError};

fn check<T: Scalar>(cache: &Option<Tensor<T>>, g: &Tensor<T>, name: &'static str) -> Result<()> {
    match cache {
        None => Err(TensorError::StaleCache(name)),
        Some(c) => g.expect_shape(c.shape()),
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu<T: Scalar = f32> {
    pub slope: f64,
    input: Option<Tensor<T>>,
}

impl<T: Scalar> LeakyRelu<T> {
    pub fn new(slope: f64) -> Self {
        Self { slope, input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let s = T::of(self.slope);
        self.input = Some(x.clone());
        x.map(|v| if v > T::zero() { v } else { v * s })
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        check(&self.input, g, "leaky_relu")?;
        let x = self.input.take().expect("checked");
        let s = T::of(self.slope);
        let mut d = g.clone();
        d.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= T::zero() { *d = *d * s });
        Ok(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu<T: Scalar = f32> {
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Relu<T> {
    pub fn new() -> Self {
        Self { input: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        self.input = Some(x.clone());
        x.map(|v| v.max(T::zero()))
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        check(&self.input, g, "relu")?;
        let x = self.input.take().expect("checked");
        let mut d = g.clone();
        d.data_mut().iter_mut().zip(x.data()).for_each(|(d, &v)| if v <= T::zero() { *d = T::zero() });
        Ok(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid<T: Scalar = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Sigmoid<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        check(&self.output, g, "sigmoid")?;
        let y = self.output.take().expect("checked");
        let mut d = g.clone();
        d.data_mut().iter_mut().zip(y.data()).for_each(|(d, &s)| *d = *d * s * (T::one() - s));
        Ok(d)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tanh<T: Scalar = f32> {
    output: Option<Tensor<T>>,
}

impl<T: Scalar> Tanh<T> {
    pub fn new() -> Self {
        Self { output: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let y = x.map(|v| v.tanh());
        self.output = Some(y.clone());
        y
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        check(&self.output, g, "tanh")?;
        let y = self.output.take().expect("checked");
        let mut d = g.clone();
        d.data_mut().iter_mut().zip(y.data()).for_each(|(d, &t)| *d = *d * (T::one() - t * t));
        Ok(d)
    }
}
