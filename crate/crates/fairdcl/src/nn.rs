//! Dense layer primitives shared by the autograd tape and the no-grad
//! evaluation paths. Convolutions are lowered to GEMM through im2col.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4};
use rand::Rng;

/// Scalar type used across the toolkit. Training runs in `f32`; numerical
/// tests instantiate `f64`.
pub trait Real:
    ndarray::NdFloat + num_traits::FromPrimitive + std::iter::Sum<Self> + Default
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 conversion")
    }
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}
impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower an NCHW batch into a `(N*OH*OW, C*K*K)` patch matrix.
pub fn im2col<F: Real>(
    x: &ArrayView4<F>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut cols = Array2::<F>::zeros((n * oh * ow, c * kernel * kernel));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("standard layout");
    let ckk = c * kernel * kernel;
    for bn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bn * oh + oy) * ow + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = ((bn * c + ch) * h + iy as usize) * w;
                        let dst = row + (ch * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cs[dst + kx] = xs[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add the patch-matrix gradient back onto the input layout.
pub fn col2im<F: Real>(
    grad_cols: &Array2<F>,
    input_dim: (usize, usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n, c, h, w) = input_dim;
    let oh = conv_out_size(h, kernel, stride, pad);
    let ow = conv_out_size(w, kernel, stride, pad);
    let mut gx = Array4::<F>::zeros((n, c, h, w));
    let gs = gx.as_slice_mut().expect("standard layout");
    let gc = grad_cols.as_slice().expect("standard layout");
    let ckk = c * kernel * kernel;
    for bn in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bn * oh + oy) * ow + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = ((bn * c + ch) * h + iy as usize) * w;
                        let src = row + (ch * kernel + ky) * kernel;
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            gs[dst + ix as usize] = gs[dst + ix as usize] + gc[src + kx];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// Convolution forward. Returns the output and the im2col matrix so the
/// backward pass can reuse it.
pub fn conv2d_forward<F: Real>(
    x: &ArrayView4<F>,
    w: &ArrayView4<F>,
    b: &Array1<F>,
    stride: usize,
    pad: usize,
) -> (Array4<F>, Array2<F>) {
    let (n, _c, h, wd) = x.dim();
    let (co, ci, kh, kw) = w.dim();
    assert_eq!(kh, kw, "square kernels only");
    assert_eq!(x.dim().1, ci, "conv channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kh, stride, pad);
    let cols = im2col(x, kh, stride, pad);
    let w_mat = w
        .to_shape((co, ci * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let mut out_mat = cols.dot(&w_mat.t());
    for mut row in out_mat.rows_mut() {
        row += b;
    }
    // (N*OH*OW, Co) -> (N, Co, OH, OW)
    let mut out = Array4::<F>::zeros((n, co, oh, ow));
    {
        let os = out.as_slice_mut().unwrap();
        let ms = out_mat.as_slice().unwrap();
        for bn in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = ((bn * oh + oy) * ow + ox) * co;
                    let base = (bn * co) * oh * ow + oy * ow + ox;
                    for ch in 0..co {
                        os[base + ch * oh * ow] = ms[r + ch];
                    }
                }
            }
        }
    }
    (out, cols)
}

/// Gradients of a convolution. `need_gx` skips the input gradient when the
/// input is a constant (e.g. the image batch).
pub fn conv2d_backward<F: Real>(
    grad_out: &ArrayView4<F>,
    cols: &Array2<F>,
    w: &ArrayView4<F>,
    input_dim: (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    need_gx: bool,
) -> (Option<Array4<F>>, Array4<F>, Array1<F>) {
    let (n, co, oh, ow) = grad_out.dim();
    let (_, ci, kh, kw) = w.dim();
    // (N, Co, OH, OW) -> (N*OH*OW, Co)
    let mut g_mat = Array2::<F>::zeros((n * oh * ow, co));
    {
        let gs = grad_out.as_standard_layout();
        let gs = gs.as_slice().unwrap();
        let ms = g_mat.as_slice_mut().unwrap();
        for bn in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let r = ((bn * oh + oy) * ow + ox) * co;
                    let base = (bn * co) * oh * ow + oy * ow + ox;
                    for ch in 0..co {
                        ms[r + ch] = gs[base + ch * oh * ow];
                    }
                }
            }
        }
    }
    let w_mat = w
        .to_shape((co, ci * kh * kw))
        .expect("weight reshape")
        .to_owned();
    let gw_mat = g_mat.t().dot(cols);
    let gw = gw_mat
        .into_shape_with_order((co, ci, kh, kw))
        .expect("grad reshape");
    let gb = g_mat.sum_axis(ndarray::Axis(0));
    let gx = if need_gx {
        let grad_cols = g_mat.dot(&w_mat);
        Some(col2im(&grad_cols, input_dim, kh, stride, pad))
    } else {
        None
    };
    (gx, gw, gb)
}

/// He-style normal initialization via Box-Muller.
pub fn he_normal<F: Real, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    while data.len() < count {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(F::of(r * theta.cos() * std));
        if data.len() < count {
            data.push(F::of(r * theta.sin() * std));
        }
    }
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("init shape")
}

/// Adam with decoupled-from-nothing classic L2 weight decay added to the
/// gradient, matching the pre-training optimizer settings.
#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    pub weight_decay: F,
    t: i32,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[&[usize]]) -> Self {
        Adam {
            lr: F::of(lr),
            beta1: F::of(0.9),
            beta2: F::of(0.999),
            eps: F::of(1e-8),
            weight_decay: F::of(weight_decay),
            t: 0,
            m: shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<F>], grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let one = F::one();
        let bc1 = one - self.beta1.powi(self.t);
        let bc2 = one - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + self.weight_decay * *p;
                    *m = self.beta1 * *m + (one - self.beta1) * g;
                    *v = self.beta2 * *v + (one - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }

    /// Raw optimizer state, for checkpointing.
    pub fn state(&self) -> (i32, &[ArrayD<F>], &[ArrayD<F>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: i32, m: Vec<ArrayD<F>>, v: Vec<ArrayD<F>>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// SGD with classical momentum, used for segmentation fine-tuning.
#[derive(Debug, Clone)]
pub struct SgdMomentum<F: Real> {
    pub lr: F,
    pub momentum: F,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Real> SgdMomentum<F> {
    pub fn new(lr: f64, momentum: f64, shapes: &[&[usize]]) -> Self {
        SgdMomentum {
            lr: F::of(lr),
            momentum: F::of(momentum),
            velocity: shapes.iter().map(|s| ArrayD::zeros(s.to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut ArrayD<F>], grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len());
        for ((p, g), vel) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.velocity.iter_mut())
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(vel)
                .for_each(|p, &g, vel| {
                    *vel = self.momentum * *vel + g;
                    *p = *p - self.lr * *vel;
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input.
        let x = Array4::<f64>::from_shape_fn((1, 1, 3, 3), |(_, _, i, j)| (i * 3 + j) as f64);
        let w = Array4::<f64>::ones((1, 1, 1, 1));
        let b = Array1::<f64>::zeros(1);
        let (y, _) = conv2d_forward(&x.view(), &w.view(), &b, 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_known_sum() {
        // 3x3 all-ones kernel with pad 1 computes neighborhood sums.
        let x = Array4::<f64>::ones((1, 1, 3, 3));
        let w = Array4::<f64>::ones((1, 1, 3, 3));
        let b = Array1::<f64>::zeros(1);
        let (y, _) = conv2d_forward(&x.view(), &w.view(), &b, 1, 1);
        assert_eq!(y[[0, 0, 1, 1]], 9.0);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 0, 1]], 6.0);
    }

    #[test]
    fn conv_stride_two_shape() {
        let x = Array4::<f64>::zeros((2, 3, 8, 8));
        let w = Array4::<f64>::zeros((5, 3, 3, 3));
        let b = Array1::<f64>::zeros(5);
        let (y, _) = conv2d_forward(&x.view(), &w.view(), &b, 2, 1);
        assert_eq!(y.dim(), (2, 5, 4, 4));
    }

    #[test]
    fn adam_moves_toward_minimum() {
        let mut p: ArrayD<f64> = array![4.0].into_dyn();
        let mut opt = Adam::<f64>::new(0.1, 0.0, &[&[1]]);
        for _ in 0..200 {
            let g = p.mapv(|x| 2.0 * x); // d/dx x^2
            opt.step(&mut [&mut p], &[g]);
        }
        assert!(p[[0]].abs() < 0.1);
    }
}
