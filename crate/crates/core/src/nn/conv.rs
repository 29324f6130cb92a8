use rand_chacha::ChaCha8Rng;

use super::gemm::sgemm;
use super::{expect_nchw, Layer, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::invalid(format!(
                "input {height}x{width} smaller than kernel {kernel}"
            )));
        }
        Ok(Geometry {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, o: usize, k: usize) -> Option<usize> {
        let v = (o * self.stride + k) as isize - self.pad as isize;
        (v >= 0).then_some(v as usize)
    }

    /// `col[(c, ky, kx), off + (oy, ox)] = img[c, oy·s − p + ky, ox·s − p + kx]`
    /// for a column matrix with row stride `ld`.
    fn im2col(&self, img: &[f32], col: &mut [f32], ld: usize, off: usize) {
        let cols = self.col_cols();
        let (k, ow) = (self.kernel, self.out_w);
        for c in 0..self.channels {
            let plane = &img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * ld + off..row * ld + off + cols];
                    for oy in 0..self.out_h {
                        let iy = self.source(oy, ky).filter(|&y| y < self.height);
                        for ox in 0..ow {
                            dst[oy * ow + ox] = match (iy, self.source(ox, kx)) {
                                (Some(y), Some(x)) if x < self.width => plane[y * self.width + x],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatters-adds columns back into an image.
    fn col2im(&self, col: &[f32], img: &mut [f32], ld: usize, off: usize) {
        let cols = self.col_cols();
        let (k, ow) = (self.kernel, self.out_w);
        for c in 0..self.channels {
            let plane = &mut img[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * ld + off..row * ld + off + cols];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ky).filter(|&y| y < self.height) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(x) = self.source(ox, kx).filter(|&x| x < self.width) {
                                plane[y * self.width + x] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with square kernel, zero padding and bias.
#[derive(Debug)]
pub struct Conv2d {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    bias: Param,
    cache: Option<(Geometry, usize, Vec<f32>)>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_c * kernel * kernel;
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::fan_in_uniform(&[out_c, in_c, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_c]),
            cache: None,
        }
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, h, w) = expect_nchw(x, self.in_c)?;
        let g = Geometry::new(self.in_c, h, w, self.kernel, self.stride, self.pad)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let ld = n * cols;
        let mut col = vec![0.0; rows * ld];
        for b in 0..n {
            g.im2col(x.item(b), &mut col, ld, b * cols);
        }
        let mut y = vec![0.0; self.out_c * ld];
        sgemm(self.out_c, rows, ld, 1.0, &self.weight.value, false, &col, false, 0.0, &mut y);
        let mut out = Tensor::zeros(&[n, self.out_c, g.out_h, g.out_w]);
        for b in 0..n {
            let dst = out.item_mut(b);
            for oc in 0..self.out_c {
                let bias = self.bias.value[oc];
                let src = &y[oc * ld + b * cols..oc * ld + (b + 1) * cols];
                for (d, &v) in dst[oc * cols..(oc + 1) * cols].iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        self.cache = train.then_some((g, n, col));
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (g, n, col) = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("conv backward without training forward"))?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let ld = n * cols;
        let mut d = vec![0.0; self.out_c * ld];
        for b in 0..n {
            let src = dy.item(b);
            for oc in 0..self.out_c {
                let chunk = &src[oc * cols..(oc + 1) * cols];
                self.bias.grad[oc] += chunk.iter().sum::<f32>();
                d[oc * ld + b * cols..oc * ld + (b + 1) * cols].copy_from_slice(chunk);
            }
        }
        sgemm(self.out_c, ld, rows, 1.0, &d, false, &col, true, 1.0, &mut self.weight.grad);
        let mut dcol = vec![0.0; rows * ld];
        sgemm(rows, self.out_c, ld, 1.0, &self.weight.value, true, &d, false, 0.0, &mut dcol);
        let mut dx = Tensor::zeros(&[n, self.in_c, g.height, g.width]);
        for b in 0..n {
            g.col2im(&dcol, dx.item_mut(b), ld, b * cols);
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution (the adjoint of `Conv2d` geometry), with bias.
/// Output size is `(H − 1)·s − 2p + k`; with `k = 4, s = 2, p = 1` it doubles.
#[derive(Debug)]
pub struct ConvTranspose2d {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    weight: Param,
    bias: Param,
    /// Input in channel-major layout `[C, N·H·W]`.
    cache: Option<Vec<f32>>,
}

/// `[N, C, H, W]` to `[C, N·H·W]`.
fn to_channel_major(x: &Tensor, c: usize, plane: usize) -> Vec<f32> {
    let n = x.batch();
    let ld = n * plane;
    let mut out = vec![0.0; c * ld];
    for b in 0..n {
        let src = x.item(b);
        for ch in 0..c {
            out[ch * ld + b * plane..ch * ld + (b + 1) * plane].copy_from_slice(&src[ch * plane..(ch + 1) * plane]);
        }
    }
    out
}

impl ConvTranspose2d {
    pub fn new(in_c: usize, out_c: usize, kernel: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_c * kernel * kernel / (stride * stride)).max(1);
        ConvTranspose2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad,
            weight: Param::fan_in_uniform(&[in_c, out_c, kernel, kernel], fan_in, rng),
            bias: Param::zeros(&[out_c]),
            cache: None,
        }
    }

    fn geometry(&self, h: usize, w: usize) -> Result<Geometry> {
        let out_h = ((h - 1) * self.stride + self.kernel)
            .checked_sub(2 * self.pad)
            .ok_or_else(|| Error::invalid("transposed conv output would be empty"))?;
        let out_w = ((w - 1) * self.stride + self.kernel) - 2 * self.pad;
        let g = Geometry::new(self.out_c, out_h, out_w, self.kernel, self.stride, self.pad)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, w));
        Ok(g)
    }
}

impl Layer for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, h, w) = expect_nchw(x, self.in_c)?;
        let g = self.geometry(h, w)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let ld = n * cols;
        let xm = to_channel_major(x, self.in_c, cols);
        let mut col = vec![0.0; rows * ld];
        sgemm(rows, self.in_c, ld, 1.0, &self.weight.value, true, &xm, false, 0.0, &mut col);
        let mut out = Tensor::zeros(&[n, self.out_c, g.height, g.width]);
        let plane = g.height * g.width;
        for b in 0..n {
            let y = out.item_mut(b);
            g.col2im(&col, y, ld, b * cols);
            for (oc, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += self.bias.value[oc]);
            }
        }
        self.cache = train.then_some(xm);
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let xm = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("deconv backward without training forward"))?;
        let n = dy.batch();
        let (out_h, out_w) = (dy.shape()[2], dy.shape()[3]);
        let g = Geometry::new(self.out_c, out_h, out_w, self.kernel, self.stride, self.pad)?;
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let ld = n * cols;
        let plane = out_h * out_w;
        let mut dcol = vec![0.0; rows * ld];
        for b in 0..n {
            let d = dy.item(b);
            for (oc, chunk) in d.chunks(plane).enumerate() {
                self.bias.grad[oc] += chunk.iter().sum::<f32>();
            }
            g.im2col(d, &mut dcol, ld, b * cols);
        }
        let mut dxm = vec![0.0; self.in_c * ld];
        sgemm(self.in_c, rows, ld, 1.0, &self.weight.value, false, &dcol, false, 0.0, &mut dxm);
        sgemm(self.in_c, ld, rows, 1.0, &xm, false, &dcol, true, 1.0, &mut self.weight.grad);
        let mut dx = Tensor::zeros(&[n, self.in_c, g.out_h, g.out_w]);
        for b in 0..n {
            let dst = dx.item_mut(b);
            for c in 0..self.in_c {
                dst[c * cols..(c + 1) * cols].copy_from_slice(&dxm[c * ld + b * cols..c * ld + (b + 1) * cols]);
            }
        }
        Ok(dx)
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck;
    use rand::{Rng, SeedableRng};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        conv.bias.value = vec![0.1, -0.2, 0.3];
        let x = random(&[1, 2, 5, 6], 4);
        let y = conv.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3, 3]);
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = conv.bias.value[oc];
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                acc += conv.weight.value[((oc * 2 + ic) * 3 + ky) * 3 + kx]
                                    * x.data()[(ic * 5 + iy as usize) * 6 + ix as usize];
                            }
                        }
                    }
                    assert!((y.data()[(oc * 3 + oy) * 3 + ox] - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn deconv_matches_scatter_loop_and_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut de = ConvTranspose2d::new(2, 3, 4, 2, 1, &mut rng);
        let x = random(&[1, 2, 3, 4], 6);
        let y = de.forward(&x, false).unwrap();
        assert_eq!(y.shape(), &[1, 3, 6, 8]);
        let mut want = vec![0.0f32; 3 * 6 * 8];
        for ic in 0..2 {
            for iy in 0..3 {
                for ix in 0..4 {
                    for oc in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let oy = (iy * 2 + ky) as isize - 1;
                                let ox = (ix * 2 + kx) as isize - 1;
                                if oy < 0 || ox < 0 || oy >= 6 || ox >= 8 {
                                    continue;
                                }
                                want[(oc * 6 + oy as usize) * 8 + ox as usize] += x.data()[(ic * 3 + iy) * 4 + ix]
                                    * de.weight.value[((ic * 3 + oc) * 4 + ky) * 4 + kx];
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut conv = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        gradcheck::check(&mut conv, &random(&[2, 2, 6, 5], 8), 9, 1e-2);
        let mut conv = Conv2d::new(3, 2, 3, 1, 1, &mut rng);
        gradcheck::check(&mut conv, &random(&[1, 3, 4, 4], 10), 11, 1e-2);
    }

    #[test]
    fn deconv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut de = ConvTranspose2d::new(3, 2, 4, 2, 1, &mut rng);
        gradcheck::check(&mut de, &random(&[2, 3, 3, 3], 13), 14, 1e-2);
    }

    #[test]
    fn wrong_channels_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut conv = Conv2d::new(3, 2, 3, 1, 1, &mut rng);
        assert!(conv.forward(&Tensor::zeros(&[1, 2, 4, 4]), false).is_err());
    }
}
