use crate::gemm::gemm;
use crate::{Param, Result, Scalar, Tensor, TensorError};
use rand::Rng;

/// Geometry of a strided, zero-padded square-kernel window over a `c x h x w`
/// image, producing `oh x ow` positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn over(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Some(Self { c, h, w, k, stride, pad, oh, ow })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_row, col_index, image_index)` for every in-bounds tap.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        for c in 0..self.c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..self.oh {
                        let y = oy as isize * s - p + ki as isize;
                        if y < 0 || y >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + y as usize) * self.w;
                        for ox in 0..self.ow {
                            let x = ox as isize * s - p + kj as isize;
                            if x < 0 || x >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, base + x as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        cols.iter_mut().for_each(|v| *v = T::zero());
        let n = self.cols();
        self.for_each(|r, j, i| cols[r * n + j] = img[i]);
    }

    fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        let n = self.cols();
        self.for_each(|r, j, i| img[i] = img[i] + cols[r * n + j]);
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = *v + *b);
    }
}

fn accumulate_bias_grad<T: Scalar>(grad: &mut [T], g_out: &[T], plane: usize) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g = *g + g_out[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// 2D cross-correlation; weight `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar = f32> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Window, usize, Vec<T>)>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::new(Tensor::randn(&[out_ch, in_ch, kernel, kernel], init_std, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            cache: None,
        }
    }

    fn window(&self, x: &Tensor<T>) -> Result<(usize, Window)> {
        let [n, c, h, w] = x.nchw()?;
        let win = Window::over(c, h, w, self.kernel, self.stride, self.pad).filter(|_| c == self.in_ch);
        match win {
            Some(win) => Ok((n, win)),
            None => Err(TensorError::Shape {
                expected: format!("[N, {}, H, W] with H, W >= {}", self.in_ch, self.kernel.saturating_sub(2 * self.pad)),
                actual: x.shape().to_vec(),
            }),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, win) = self.window(x)?;
        let (rows, cols) = (win.rows(), win.cols());
        let img = win.c * win.h * win.w;
        let mut all_cols = vec![T::zero(); n * rows * cols];
        let mut out = vec![T::zero(); n * self.out_ch * cols];
        for i in 0..n {
            let c = &mut all_cols[i * rows * cols..(i + 1) * rows * cols];
            win.im2col(&x.data()[i * img..(i + 1) * img], c);
            let o = &mut out[i * self.out_ch * cols..(i + 1) * self.out_ch * cols];
            gemm(self.out_ch, rows, cols, T::one(), self.weight.value.data(), false, c, false, T::zero(), o);
            add_bias(o, self.bias.value.data(), cols);
        }
        self.cache = Some((win, n, all_cols));
        Tensor::new(&[n, self.out_ch, win.oh, win.ow], out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (win, n, all_cols) = self.cache.take().ok_or(TensorError::StaleCache("conv2d"))?;
        g.expect_shape(&[n, self.out_ch, win.oh, win.ow])?;
        let (rows, cols) = (win.rows(), win.cols());
        let img = win.c * win.h * win.w;
        let mut dx = vec![T::zero(); n * img];
        let mut dcols = vec![T::zero(); rows * cols];
        for i in 0..n {
            let go = &g.data()[i * self.out_ch * cols..(i + 1) * self.out_ch * cols];
            let c = &all_cols[i * rows * cols..(i + 1) * rows * cols];
            gemm(self.out_ch, cols, rows, T::one(), go, false, c, true, T::one(), self.weight.grad.data_mut());
            accumulate_bias_grad(self.bias.grad.data_mut(), go, cols);
            gemm(rows, self.out_ch, cols, T::one(), self.weight.value.data(), true, go, false, T::zero(), &mut dcols);
            win.col2im(&dcols, &mut dx[i * img..(i + 1) * img]);
        }
        Tensor::new(&[n, win.c, win.h, win.w], dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`] with the same geometry);
/// weight `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T: Scalar = f32> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<(Window, Tensor<T>)>,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init_std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::new(Tensor::randn(&[in_ch, out_ch, kernel, kernel], init_std, rng)),
            bias: Param::new(Tensor::zeros(&[out_ch])),
            cache: None,
        }
    }

    /// Output extent for an input extent.
    pub fn output_size(&self, h: usize) -> Option<usize> {
        ((h - 1) * self.stride + self.kernel).checked_sub(2 * self.pad)
    }

    fn window(&self, x: &Tensor<T>) -> Result<(usize, Window)> {
        let [n, c, h, w] = x.nchw()?;
        let bad = || TensorError::Shape { expected: format!("[N, {}, H, W]", self.in_ch), actual: x.shape().to_vec() };
        if c != self.in_ch {
            return Err(bad());
        }
        let (oh, ow) = (self.output_size(h).ok_or_else(bad)?, self.output_size(w).ok_or_else(bad)?);
        let win = Window::over(self.out_ch, oh, ow, self.kernel, self.stride, self.pad).ok_or_else(bad)?;
        if (win.oh, win.ow) != (h, w) {
            return Err(bad());
        }
        Ok((n, win))
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, win) = self.window(x)?;
        let (rows, cols) = (win.rows(), win.cols());
        let img = win.c * win.h * win.w;
        let mut out = vec![T::zero(); n * img];
        let mut c = vec![T::zero(); rows * cols];
        for i in 0..n {
            let xi = &x.data()[i * self.in_ch * cols..(i + 1) * self.in_ch * cols];
            gemm(rows, self.in_ch, cols, T::one(), self.weight.value.data(), true, xi, false, T::zero(), &mut c);
            let o = &mut out[i * img..(i + 1) * img];
            win.col2im(&c, o);
            add_bias(o, self.bias.value.data(), win.h * win.w);
        }
        self.cache = Some((win, x.clone()));
        Tensor::new(&[n, self.out_ch, win.h, win.w], out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (win, x) = self.cache.take().ok_or(TensorError::StaleCache("conv_transpose2d"))?;
        let n = x.shape()[0];
        g.expect_shape(&[n, self.out_ch, win.h, win.w])?;
        let (rows, cols) = (win.rows(), win.cols());
        let img = win.c * win.h * win.w;
        let mut dx = vec![T::zero(); x.len()];
        let mut c = vec![T::zero(); rows * cols];
        for i in 0..n {
            let gi = &g.data()[i * img..(i + 1) * img];
            win.im2col(gi, &mut c);
            accumulate_bias_grad(self.bias.grad.data_mut(), gi, win.h * win.w);
            let xi = &x.data()[i * self.in_ch * cols..(i + 1) * self.in_ch * cols];
            gemm(self.in_ch, cols, rows, T::one(), xi, false, &c, true, T::one(), self.weight.grad.data_mut());
            let dxi = &mut dx[i * self.in_ch * cols..(i + 1) * self.in_ch * cols];
            gemm(self.in_ch, rows, cols, T::one(), self.weight.value.data(), false, &c, false, T::zero(), dxi);
        }
        Tensor::new(x.shape(), dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}
