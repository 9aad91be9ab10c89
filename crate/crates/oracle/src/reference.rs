//! Direct-loop f64 forwards.
//!
//! Operators that have kinks (ReLU, clamp) push one byte per element into a
//! `pattern` so finite-difference probes that cross a kink can be detected.

use std::collections::BTreeMap;

use reroof::numerics::{ParamStore, Tensor};
use reroof::vae::VaeArch;

#[derive(Clone, Debug, PartialEq)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?}");
        Arr {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Arr::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Arr::new(t.shape(), t.data().iter().map(|&v| v as f64).collect())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Arr {
        Arr::new(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip(&self, other: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
        assert_eq!(self.shape, other.shape);
        Arr::new(&self.shape, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn dot(&self, other: &Arr) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

pub fn relu(x: &Arr, pattern: &mut Vec<u8>) -> Arr {
    pattern.extend(x.data.iter().map(|&v| (v > 0.0) as u8));
    x.map(|v| v.max(0.0))
}

pub fn clamp(x: &Arr, lo: f64, hi: f64, pattern: &mut Vec<u8>) -> Arr {
    pattern.extend(x.data.iter().map(|&v| if v < lo { 0 } else if v > hi { 2 } else { 1 }));
    x.map(|v| v.clamp(lo, hi))
}

pub fn sigmoid(x: &Arr) -> Arr {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
pub fn dense(x: &Arr, w: &Arr, b: &Arr) -> Arr {
    let (n, din) = (x.shape[0], x.shape[1]);
    let dout = w.shape[1];
    assert_eq!(w.shape[0], din);
    let mut y = Arr::zeros(&[n, dout]);
    for r in 0..n {
        for o in 0..dout {
            let mut acc = b.data[o];
            for i in 0..din {
                acc += x.data[r * din + i] * w.data[i * dout + o];
            }
            y.data[r * dout + o] = acc;
        }
    }
    y
}

/// `x: [n, cin, h, w]`, `k: [cout, cin, kh, kw]`.
pub fn conv2d(x: &Arr, k: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, kc, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    assert_eq!(kc, cin);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut y = Arr::zeros(&[n, cout, oh, ow]);
    for s in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += x.data[((s * cin + ci) * h + iy as usize) * w + ix as usize]
                                    * k.data[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    y.data[((s * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    y
}

/// Scatter form: every input pixel adds `x · k[ci, co]` into the output
/// window it maps to. `k: [cin, cout, kh, kw]`.
pub fn conv_transpose2d(x: &Arr, k: &Arr, b: &Arr, stride: usize, pad: usize) -> Arr {
    let (n, cin, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kc, cout, kh, kw) = (k.shape[0], k.shape[1], k.shape[2], k.shape[3]);
    assert_eq!(kc, cin);
    let oh = (h - 1) * stride + kh - 2 * pad;
    let ow = (w - 1) * stride + kw - 2 * pad;
    let mut y = Arr::zeros(&[n, cout, oh, ow]);
    for s in 0..n {
        for co in 0..cout {
            for p in 0..oh * ow {
                y.data[(s * cout + co) * oh * ow + p] = b.data[co];
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..w {
                    let v = x.data[((s * cin + ci) * h + iy) * w + ix];
                    for co in 0..cout {
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                y.data[((s * cout + co) * oh + oy as usize) * ow + ox as usize] +=
                                    v * k.data[((ci * cout + co) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// `(1/N) Σ ½ (p − t)²` with `N` the leading dimension.
pub fn half_squared_error(pred: &Arr, target: &Arr) -> f64 {
    let n = pred.shape[0] as f64;
    pred.data.iter().zip(&target.data).map(|(p, t)| 0.5 * (p - t) * (p - t)).sum::<f64>() / n
}

/// `(1/N) Σ ½ (μ² + e^{lv} − 1 − lv)`.
pub fn gaussian_kl(mu: &Arr, log_var: &Arr) -> f64 {
    let n = mu.shape[0] as f64;
    mu.data
        .iter()
        .zip(&log_var.data)
        .map(|(m, lv)| 0.5 * (m * m + lv.exp_m1() - lv))
        .sum::<f64>()
        / n
}

/// `Σ w·(log(1 + e^z) − y·z) / Σ w`.
pub fn bce_with_logits(z: &Arr, y: &[f64], w: &[f64]) -> f64 {
    let total: f64 = z
        .data
        .iter()
        .zip(y)
        .zip(w)
        .map(|((&z, &y), &w)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / w.iter().sum::<f64>()
}

pub type Params = BTreeMap<String, Arr>;

pub fn params_from_store(store: &ParamStore) -> Params {
    store
        .iter()
        .map(|(name, p)| (name.to_string(), Arr::from_tensor(&p.value)))
        .collect()
}

pub fn residual_block(p: &Params, prefix: &str, h: &Arr, pattern: &mut Vec<u8>) -> Arr {
    let get = |s: &str| &p[&format!("{prefix}.{s}")];
    let a = relu(&dense(h, get("w1"), get("b1")), pattern);
    let f = dense(&a, get("w2"), get("b2"));
    h.zip(&f, |x, y| x + y)
}

/// Encoder outputs `(μ, log σ²)` for `x: [n, 3, S, S]`.
pub fn vae_encode(arch: &VaeArch, p: &Params, x: &Arr, pattern: &mut Vec<u8>) -> (Arr, Arr) {
    let n = x.shape[0];
    let l = arch.latent_dim;
    let mut h = x.clone();
    for i in 0..arch.conv_channels.len() {
        h = relu(&conv2d(&h, &p[&format!("enc.conv{i}.w")], &p[&format!("enc.conv{i}.b")], 2, 1), pattern);
    }
    let flat = h.data.len() / n;
    let h = h.reshape(&[n, flat]);
    let mut h = relu(&dense(&h, &p["enc.fc.w"], &p["enc.fc.b"]), pattern);
    for j in 0..arch.residual_blocks {
        h = residual_block(p, &format!("enc.res{j}"), &h, pattern);
    }
    let out = dense(&h, &p["enc.head.w"], &p["enc.head.b"]);
    let mut mu = Arr::zeros(&[n, l]);
    let mut lv = Arr::zeros(&[n, l]);
    for r in 0..n {
        for d in 0..l {
            mu.data[r * l + d] = out.data[r * 2 * l + d];
            lv.data[r * l + d] = out.data[r * 2 * l + l + d];
        }
    }
    (mu, clamp(&lv, -10.0, 10.0, pattern))
}

pub fn vae_decode(arch: &VaeArch, p: &Params, z: &Arr, pattern: &mut Vec<u8>) -> Arr {
    let n = z.shape[0];
    let layers = arch.conv_channels.len();
    let c = arch.conv_channels[layers - 1];
    let side = arch.image_size >> layers;
    let mut h = relu(&dense(z, &p["dec.fc.w"], &p["dec.fc.b"]), pattern).reshape(&[n, c, side, side]);
    for i in 0..layers {
        let y = conv_transpose2d(&h, &p[&format!("dec.deconv{i}.w")], &p[&format!("dec.deconv{i}.b")], 2, 1);
        h = if i + 1 == layers { sigmoid(&y) } else { relu(&y, pattern) };
    }
    h
}

/// `½‖x − x̂‖² + β·KL` per image, averaged, with fixed noise `eps`.
pub fn vae_loss(arch: &VaeArch, p: &Params, x: &Arr, eps: &Arr, beta: f64, pattern: &mut Vec<u8>) -> f64 {
    let (mu, lv) = vae_encode(arch, p, x, pattern);
    let z = Arr::new(
        &mu.shape,
        mu.data
            .iter()
            .zip(&lv.data)
            .zip(&eps.data)
            .map(|((m, v), e)| m + (0.5 * v).exp() * e)
            .collect(),
    );
    let recon = vae_decode(arch, p, &z, pattern);
    half_squared_error(&recon, x) + beta * gaussian_kl(&mu, &lv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_and_transpose_are_adjoint() {
        let x = Arr::new(&[1, 2, 5, 5], (0..50).map(|i| (i as f64 * 0.37).sin()).collect());
        let k = Arr::new(&[3, 2, 3, 3], (0..54).map(|i| (i as f64 * 0.11).cos()).collect());
        let y = conv2d(&x, &k, &Arr::zeros(&[3]), 2, 1);
        let u = Arr::new(&y.shape, (0..y.data.len()).map(|i| (i as f64 * 0.7).sin()).collect());
        let xt = conv_transpose2d(&u, &k, &Arr::zeros(&[2]), 2, 1);
        assert_eq!(xt.shape, x.shape);
        assert!((y.dot(&u) - x.dot(&xt)).abs() < 1e-9);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let v = bce_with_logits(&Arr::new(&[1], vec![0.0]), &[1.0], &[1.0]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
