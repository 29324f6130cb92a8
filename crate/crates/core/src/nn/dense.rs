use rand_chacha::ChaCha8Rng;

use super::gemm::sgemm;
use super::{Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn missing_cache(layer: &str) -> Error {
    Error::invalid(format!("{layer} backward without training forward"))
}

/// `y = x·Wᵀ + b` on `[N, in]` inputs.
#[derive(Debug)]
pub struct Linear {
    in_dim: usize,
    out_dim: usize,
    weight: Param,
    bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            in_dim,
            out_dim,
            weight: Param::fan_in_uniform(&[out_dim, in_dim], in_dim, rng),
            bias: Param::zeros(&[out_dim]),
            cache: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        if x.ndim() != 2 || x.shape()[1] != self.in_dim {
            return Err(Error::Shape {
                expected: vec![0, self.in_dim],
                got: x.shape().to_vec(),
            });
        }
        let n = x.batch();
        let mut out = Tensor::zeros(&[n, self.out_dim]);
        for row in out.data_mut().chunks_mut(self.out_dim) {
            row.copy_from_slice(&self.bias.value);
        }
        sgemm(n, self.in_dim, self.out_dim, 1.0, x.data(), false, &self.weight.value, true, 1.0, out.data_mut());
        self.cache = train.then(|| x.clone());
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_cache("linear"))?;
        let n = x.batch();
        sgemm(self.out_dim, n, self.in_dim, 1.0, dy.data(), true, x.data(), false, 1.0, &mut self.weight.grad);
        for row in dy.data().chunks(self.out_dim) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        let mut dx = Tensor::zeros(&[n, self.in_dim]);
        sgemm(n, self.out_dim, self.in_dim, 1.0, dy.data(), false, &self.weight.value, false, 0.0, dx.data_mut());
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

#[derive(Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.mask = train.then(|| x.data().iter().map(|&v| v > 0.0).collect());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        let mut dx = dy.clone();
        for (d, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *d = 0.0;
            }
        }
        Ok(dx)
    }
}

/// Mean over the spatial axes: `[N, C, H, W] → [N, C]`.
#[derive(Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                expected: vec![0, 0, 0, 0],
                got: s.to_vec(),
            });
        }
        let plane = s[2] * s[3];
        let data = x.data().chunks(plane).map(|c| c.iter().sum::<f32>() / plane as f32).collect();
        self.shape = train.then(|| s.to_vec());
        Tensor::from_vec(&[s[0], s[1]], data)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let shape = self.shape.take().ok_or_else(|| missing_cache("pool"))?;
        let plane = shape[2] * shape[3];
        let mut dx = Tensor::zeros(&shape);
        for (chunk, d) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
            chunk.fill(d / plane as f32);
        }
        Ok(dx)
    }
}

/// `[N, …] → [N, ∏…]`.
#[derive(Debug, Default)]
pub struct Flatten {
    shape: Option<Vec<usize>>,
}

impl Layer for Flatten {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        self.shape = train.then(|| x.shape().to_vec());
        x.clone().reshape(&[x.batch(), x.item_len()])
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let shape = self.shape.take().ok_or_else(|| missing_cache("flatten"))?;
        dy.clone().reshape(&shape)
    }
}

/// `[N, D] → [N, dims…]`.
#[derive(Debug)]
pub struct Reshape {
    dims: Vec<usize>,
}

impl Reshape {
    pub fn new(dims: &[usize]) -> Self {
        Reshape { dims: dims.to_vec() }
    }
}

impl Layer for Reshape {
    fn forward(&mut self, x: &Tensor, _train: bool) -> Result<Tensor> {
        let mut shape = vec![x.batch()];
        shape.extend(&self.dims);
        x.clone().reshape(&shape)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let n = dy.batch();
        dy.clone().reshape(&[n, dy.item_len()])
    }
}
