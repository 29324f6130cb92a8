//! Minimal single-threaded f32 layers with explicit backward passes.
//!
//! Tensors are `[N, C, H, W]` for feature maps and `[N, D]` for vectors.
//! Each layer caches what its backward pass needs during a training-mode
//! forward call, so a layer must see exactly one forward before each
//! backward.

mod conv;
mod dense;
mod gemm;

pub use conv::{Conv2d, ConvTranspose2d};
pub use dense::{Flatten, GlobalAvgPool, Linear, Relu, Reshape};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A trainable array with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param {
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut p = Param::zeros(shape);
        let bound = (6.0 / fan_in.max(1) as f32).sqrt();
        for w in &mut p.value {
            *w = rng.random_range(-bound..bound);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&self.shape, self.value.clone()).expect("param shape")
    }

    pub fn load(&mut self, t: &Tensor) -> Result<()> {
        if t.shape() != self.shape.as_slice() {
            return Err(Error::Shape {
                expected: self.shape.clone(),
                got: t.shape().to_vec(),
            });
        }
        self.value.copy_from_slice(t.data());
        Ok(())
    }
}

pub trait Layer: std::fmt::Debug {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, dy: &Tensor) -> Result<Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
}

#[derive(Debug, Default)]
pub struct Sequential {
    layers: Vec<Box<dyn Layer>>,
}

impl Sequential {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer + 'static) {
        self.layers.push(Box::new(layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl Layer for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = layer.forward(&h, train)?;
        }
        Ok(h)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u32,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, step: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// One update over `params`; gradients are zeroed afterwards.
    pub fn step(&mut self, params: Vec<&mut Param>) {
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for p in params {
            for i in 0..p.value.len() {
                let g = p.grad[i] + c.weight_decay * p.value[i];
                p.m[i] = c.beta1 * p.m[i] + (1.0 - c.beta1) * g;
                p.v[i] = c.beta2 * p.v[i] + (1.0 - c.beta2) * g * g;
                let mh = p.m[i] / bc1;
                let vh = p.v[i] / bc2;
                p.value[i] -= c.lr * mh / (vh.sqrt() + c.eps);
                p.grad[i] = 0.0;
            }
        }
    }
}

pub fn zero_grads(params: Vec<&mut Param>) {
    for p in params {
        p.zero_grad();
    }
}

/// Checks that `x` is `[N, C, H, W]` with the given channel count.
pub(crate) fn expect_nchw(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() != 4 || s[1] != channels {
        return Err(Error::Shape {
            expected: vec![0, channels, 0, 0],
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[2], s[3]))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Compares analytic input and parameter gradients of `layer` for the
    /// scalar objective `Σ y ⊙ r` against central differences.
    pub fn check(layer: &mut dyn Layer, x: &Tensor, seed: u64, tol: f32) {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = layer.forward(x, true).unwrap();
        let r: Vec<f32> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dy = Tensor::from_vec(y.shape(), r.clone()).unwrap();
        for p in layer.params_mut() {
            p.zero_grad();
        }
        let dx = layer.backward(&dy).unwrap();
        let objective = |layer: &mut dyn Layer, x: &Tensor| -> f64 {
            let y = layer.forward(x, false).unwrap();
            y.data().iter().zip(&r).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let eps = 1e-2f32;
        let close = |fd: f64, an: f32| (fd - an as f64).abs() <= tol as f64 * (1.0 + fd.abs());
        for i in (0..x.len()).step_by((x.len() / 23).max(1)) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * eps as f64);
            assert!(close(fd, dx.data()[i]), "input {i}: fd {fd} vs {}", dx.data()[i]);
        }
        let n_params = layer.params().len();
        for pi in 0..n_params {
            let len = layer.params()[pi].len();
            for i in (0..len).step_by((len / 17).max(1)) {
                let analytic = layer.params()[pi].grad[i];
                let orig = layer.params()[pi].value[i];
                layer.params_mut()[pi].value[i] = orig + eps;
                let fp = objective(layer, x);
                layer.params_mut()[pi].value[i] = orig - eps;
                let fm = objective(layer, x);
                layer.params_mut()[pi].value[i] = orig;
                let fd = (fp - fm) / (2.0 * eps as f64);
                assert!(close(fd, analytic), "param {pi}[{i}]: fd {fd} vs {analytic}");
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Param::zeros(&[2]);
        p.grad = vec![1.0, -1.0];
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..Default::default()
        });
        opt.step(vec![&mut p]);
        assert!((p.value[0] + 0.1).abs() < 1e-5);
        assert!((p.value[1] - 0.1).abs() < 1e-5);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn sequential_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Sequential::new();
        net.push(Conv2d::new(2, 3, 3, 2, 1, &mut rng));
        net.push(Relu::default());
        net.push(GlobalAvgPool::default());
        net.push(Linear::new(3, 4, &mut rng));
        let x = Tensor::from_vec(&[2, 2, 6, 6], (0..144).map(|i| ((i * 37 % 19) as f32 - 9.0) / 9.0).collect())
            .unwrap();
        gradcheck::check(&mut net, &x, 1, 2e-2);
    }
}
