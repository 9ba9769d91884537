//! Layer primitives with hand-written backward passes.
//!
//! Every forward function here has a matching `*_backward` that maps the
//! upstream gradient to the input gradient (and accumulates parameter
//! gradients where there are parameters).

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{bail, Result};
use crate::tensor::Tensor3;

/// A square `k × k` convolution with stride 1 and zero "same" padding.
///
/// Weights are laid out `[ky][kx][c_in][c_out]` so the innermost loop of the
/// forward pass walks output channels contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv {
    pub fn zeros(kernel: usize, c_in: usize, c_out: usize) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        Self {
            kernel,
            c_in,
            c_out,
            weight: vec![0.0; kernel * kernel * c_in * c_out],
            bias: vec![0.0; c_out],
        }
    }

    /// Glorot-uniform weights scaled by the tanh gain 5/3; zero biases.
    pub fn init<R: Rng + ?Sized>(kernel: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        let mut conv = Self::zeros(kernel, c_in, c_out);
        let fans = (kernel * kernel * (c_in + c_out)) as f64;
        let bound = 5.0 / 3.0 * libm::sqrt(6.0 / fans);
        for w in conv.weight.iter_mut() {
            *w = rng.gen_range(-bound..bound);
        }
        conv
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kernel, self.c_in, self.c_out)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    #[inline]
    fn w_index(&self, ky: usize, kx: usize, ci: usize) -> usize {
        ((ky * self.kernel + kx) * self.c_in + ci) * self.c_out
    }

    /// Multiply-accumulate count for one forward pass over an `h × w` grid.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        (h * w * self.kernel * self.kernel * self.c_in * self.c_out) as u64
    }

    pub fn forward(&self, x: &Tensor3) -> Result<Tensor3> {
        if x.channels() != self.c_in {
            bail!(Shape, "conv expects {} input channels, got {}", self.c_in, x.channels());
        }
        let (h, w, _) = x.dims();
        let r = self.kernel / 2;
        let mut y = Tensor3::zeros(h, w, self.c_out);
        for i in 0..h {
            for j in 0..w {
                let out = y.cell_mut(i, j);
                out.copy_from_slice(&self.bias);
                for ky in 0..self.kernel {
                    let Some(yi) = (i + ky).checked_sub(r).filter(|&v| v < h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(xj) = (j + kx).checked_sub(r).filter(|&v| v < w) else { continue };
                        let xs = x.cell(yi, xj);
                        for (ci, &xv) in xs.iter().enumerate() {
                            let o = self.w_index(ky, kx, ci);
                            let row = &self.weight[o..o + self.c_out];
                            for (acc, &wv) in out.iter_mut().zip(row) {
                                *acc += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Accumulates parameter gradients into `grad` and, if `want_dx`, returns
    /// the gradient w.r.t. the input `x`.
    pub fn backward(&self, x: &Tensor3, dy: &Tensor3, grad: &mut Conv, want_dx: bool) -> Option<Tensor3> {
        let (h, w, _) = x.dims();
        let r = self.kernel / 2;
        let mut dx = want_dx.then(|| Tensor3::zeros(h, w, self.c_in));
        for i in 0..h {
            for j in 0..w {
                let g = dy.cell(i, j);
                for (b, &gv) in grad.bias.iter_mut().zip(g) {
                    *b += gv;
                }
                for ky in 0..self.kernel {
                    let Some(yi) = (i + ky).checked_sub(r).filter(|&v| v < h) else { continue };
                    for kx in 0..self.kernel {
                        let Some(xj) = (j + kx).checked_sub(r).filter(|&v| v < w) else { continue };
                        for ci in 0..self.c_in {
                            let xv = x.get(yi, xj, ci);
                            let o = self.w_index(ky, kx, ci);
                            let rows = grad.weight[o..o + self.c_out].iter_mut().zip(&self.weight[o..o + self.c_out]);
                            let mut acc = 0.0;
                            for ((gw, &wv), &gv) in rows.zip(g) {
                                *gw += xv * gv;
                                acc += wv * gv;
                            }
                            if let Some(dx) = dx.as_mut() {
                                dx.cell_mut(yi, xj)[ci] += acc;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn tensors(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn tanh(x: &Tensor3) -> Tensor3 {
    let (h, w, c) = x.dims();
    let data = x.as_slice().iter().map(|&v| libm::tanh(v)).collect();
    Tensor3::from_vec(h, w, c, data).expect("same shape")
}

/// Backward of `y = tanh(x)` expressed through the output `y`.
pub fn tanh_backward(y: &Tensor3, dy: &Tensor3) -> Tensor3 {
    let (h, w, c) = y.dims();
    let data = y.as_slice().iter().zip(dy.as_slice()).map(|(&y, &g)| g * (1.0 - y * y)).collect();
    Tensor3::from_vec(h, w, c, data).expect("same shape")
}

/// Non-overlapping `f × f` average pooling. `h` and `w` must be multiples of `f`.
pub fn avg_pool(x: &Tensor3, f: usize) -> Tensor3 {
    if f == 1 {
        return x.clone();
    }
    let (h, w, c) = x.dims();
    let (oh, ow) = (h / f, w / f);
    let scale = 1.0 / (f * f) as f64;
    let mut y = Tensor3::zeros(oh, ow, c);
    for i in 0..h {
        for j in 0..w {
            let src = x.cell(i, j);
            for (d, v) in y.cell_mut(i / f, j / f).iter_mut().zip(src) {
                *d += v * scale;
            }
        }
    }
    y
}

pub fn avg_pool_backward(dy: &Tensor3, f: usize) -> Tensor3 {
    if f == 1 {
        return dy.clone();
    }
    let (oh, ow, c) = dy.dims();
    let scale = 1.0 / (f * f) as f64;
    Tensor3::from_fn(oh * f, ow * f, c, |i, j, d| dy.get(i / f, j / f, d) * scale)
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor3, f: usize) -> Tensor3 {
    if f == 1 {
        return x.clone();
    }
    let (h, w, c) = x.dims();
    Tensor3::from_fn(h * f, w * f, c, |i, j, d| x.get(i / f, j / f, d))
}

pub fn upsample_nearest_backward(dy: &Tensor3, f: usize) -> Tensor3 {
    if f == 1 {
        return dy.clone();
    }
    let (h, w, c) = dy.dims();
    let mut dx = Tensor3::zeros(h / f, w / f, c);
    for i in 0..h {
        for j in 0..w {
            let src = dy.cell(i, j);
            for (d, v) in dx.cell_mut(i / f, j / f).iter_mut().zip(src) {
                *d += v;
            }
        }
    }
    dx
}

/// Two-way softmax cross-entropy averaged over all cells.
///
/// `logits` is `h × w × 2` (channel 0 = background, channel 1 = foreground);
/// `target[i]` selects the correct channel. Returns the loss and
/// `d loss / d logits`.
pub fn cross_entropy(logits: &Tensor3, target: &[bool]) -> Result<(f64, Tensor3)> {
    if logits.channels() != 2 || logits.cells() != target.len() {
        bail!(Shape, "cross-entropy expects h*w*2 logits matching the target");
    }
    if !logits.is_finite() {
        bail!(NonFinite, "logits");
    }
    let n = target.len() as f64;
    let mut grad = Tensor3::zeros(logits.height(), logits.width(), 2);
    let mut total = 0.0;
    for (idx, &t) in target.iter().enumerate() {
        let z = logits.cell_flat(idx);
        let m = z[0].max(z[1]);
        let e0 = libm::exp(z[0] - m);
        let e1 = libm::exp(z[1] - m);
        let lse = m + libm::log(e0 + e1);
        let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
        total += lse - if t { z[1] } else { z[0] };
        let g = grad.cell_flat_mut(idx);
        g[0] = (p0 - if t { 0.0 } else { 1.0 }) / n;
        g[1] = (p1 - if t { 1.0 } else { 0.0 }) / n;
    }
    Ok((total / n, grad))
}

/// Flat views over a parameter container, used by optimisers, gradient
/// checks, and checkpoint IO.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Reads the `idx`-th scalar in flattened order.
    fn get_param(&self, mut idx: usize) -> f64 {
        for t in self.tensors() {
            if idx < t.len() {
                return t[idx];
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn set_param(&mut self, mut idx: usize, value: f64) {
        for t in self.tensors_mut() {
            if idx < t.len() {
                t[idx] = value;
                return;
            }
            idx -= t.len();
        }
        panic!("parameter index out of range")
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor3::from_fn(4, 6, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let y = Tensor3::from_fn(2, 3, 2, |i, j, d| (i + 2 * j + 5 * d) as f64);
        // <pool(x), y> == <x, pool^T(y)>
        let lhs: f64 = avg_pool(&x, 2).as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum();
        let rhs: f64 =
            x.as_slice().iter().zip(avg_pool_backward(&y, 2).as_slice()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let up = upsample_nearest(&y, 2);
        let lhs: f64 = up.as_slice().iter().zip(x.as_slice()).map(|(a, b)| a * b).sum();
        let rhs: f64 = y
            .as_slice()
            .iter()
            .zip(upsample_nearest_backward(&x, 2).as_slice())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv::init(3, 2, 3, &mut rng);
        let x = Tensor3::from_fn(4, 5, 2, |_, _, _| rng.gen_range(-1.0..1.0));
        let probe = Tensor3::from_fn(4, 5, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        let objective = |x: &Tensor3| -> f64 {
            conv.forward(x).unwrap().as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum()
        };
        let mut grad = conv.zeros_like();
        let dx = conv.backward(&x, &probe, &mut grad, true).unwrap();
        let h = 1e-6;
        for k in 0..x.as_slice().len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[k] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[k] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - dx.as_slice()[k]).abs() < 1e-8, "entry {k}: {fd} vs {}", dx.as_slice()[k]);
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let logits = Tensor3::zeros(2, 2, 2);
        let (loss, _) = cross_entropy(&logits, &[true, false, true, false]).unwrap();
        assert!((loss - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_nan() {
        let logits = Tensor3::filled(1, 1, 2, f64::NAN);
        assert!(matches!(cross_entropy(&logits, &[true]), Err(crate::Error::NonFinite(_))));
    }
}
