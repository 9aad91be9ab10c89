//! Central finite-difference checks of analytic gradients against the f64
//! reference forwards.

use rand::seq::index::sample;
use rand::Rng as _;
use reroof::numerics::{Graph, ParamStore, Tensor, Var};
use reroof::rng::{self, Rng};
use reroof::vae::{elbo_loss_with_noise, VaeArch, VaeParams};

use crate::reference::{self as r, Arr};

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub rel: f64,
    pub abs: f64,
    pub step: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            rel: 1e-3,
            abs: 1e-5,
            step: 1e-3,
        }
    }
}

impl Tolerance {
    /// `|g − fd| ≤ max(rel · max(|g|, |fd|), abs)`.
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        self.excess(analytic, numeric) <= 1.0
    }

    /// Error as a multiple of the allowed error.
    fn excess(&self, analytic: f64, numeric: f64) -> f64 {
        let allowed = (self.rel * analytic.abs().max(numeric.abs())).max(self.abs);
        (analytic - numeric).abs() / allowed
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub name: String,
    pub instances: usize,
    pub checked: usize,
    /// Probes skipped because `±step` crossed a ReLU or clamp kink.
    pub skipped: usize,
    /// Largest error as a fraction of the allowed error.
    pub worst: f64,
    pub failures: Vec<String>,
}

impl Report {
    pub fn new(name: &str) -> Self {
        Report {
            name: name.to_string(),
            ..Report::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {} instances, {} coordinates, {} kink skips, worst {:.3} of tolerance{}",
            self.name,
            self.instances,
            self.checked,
            self.skipped,
            self.worst,
            match self.failures.first() {
                Some(f) => format!(", first failure: {f}"),
                None => String::new(),
            }
        )
    }
}

type Reference<'a> = dyn Fn(&[Arr], &mut Vec<u8>) -> f64 + 'a;

/// Probes up to `max_coords` coordinates of every input (all of them when
/// there are fewer) and records the comparison in `report`.
pub fn check_instance(
    report: &mut Report,
    inputs: &[(String, Tensor)],
    analytic: &[Tensor],
    reference: &Reference,
    max_coords: usize,
    tol: Tolerance,
    rng: &mut Rng,
) {
    report.instances += 1;
    let base: Vec<Arr> = inputs.iter().map(|(_, t)| Arr::from_tensor(t)).collect();
    let mut base_pattern = Vec::new();
    reference(&base, &mut base_pattern);
    for (k, (name, t)) in inputs.iter().enumerate() {
        let n = t.len();
        let idx: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            sample(rng, n, max_coords).into_vec()
        };
        for i in idx {
            let mut probe = base.clone();
            let x0 = base[k].data[i];
            probe[k].data[i] = x0 + tol.step;
            let mut pat_hi = Vec::new();
            let hi = reference(&probe, &mut pat_hi);
            probe[k].data[i] = x0 - tol.step;
            let mut pat_lo = Vec::new();
            let lo = reference(&probe, &mut pat_lo);
            if pat_hi != base_pattern || pat_lo != base_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (hi - lo) / (2.0 * tol.step);
            let g = analytic[k].data()[i] as f64;
            report.checked += 1;
            let e = tol.excess(g, numeric);
            report.worst = report.worst.max(e);
            if e > 1.0 {
                report
                    .failures
                    .push(format!("{name}[{i}] analytic {g:.6e} vs numeric {numeric:.6e}"));
            }
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Gradients of `build(graph, inputs)` with every input recorded as a leaf.
/// Inputs the loss does not reach get zeros.
pub fn graph_grads(inputs: &[(String, Tensor)], build: impl Fn(&mut Graph, &[Var]) -> Var) -> Vec<Tensor> {
    let mut g = Graph::training();
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.input(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");
    vars.iter()
        .zip(inputs)
        .map(|(v, (_, t))| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

/// Every recorded operation with a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Sigmoid,
    Exp,
    Square,
    Scale,
    Add,
    Mul,
    Clamp,
    Sum,
    Mean,
    Reshape,
    SliceCols,
    ConcatCols,
    Dropout,
    ResidualBlock,
    HalfSquaredError,
    GaussianKl,
    BceWithLogits,
}

impl Layer {
    pub const ALL: [Layer; 21] = [
        Layer::Dense,
        Layer::Conv2d,
        Layer::ConvTranspose2d,
        Layer::Relu,
        Layer::Sigmoid,
        Layer::Exp,
        Layer::Square,
        Layer::Scale,
        Layer::Add,
        Layer::Mul,
        Layer::Clamp,
        Layer::Sum,
        Layer::Mean,
        Layer::Reshape,
        Layer::SliceCols,
        Layer::ConcatCols,
        Layer::Dropout,
        Layer::ResidualBlock,
        Layer::HalfSquaredError,
        Layer::GaussianKl,
        Layer::BceWithLogits,
    ];
}

fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Weighted readout `Σ c ⊙ y` so every output element gets a distinct
/// upstream gradient.
fn readout(g: &mut Graph, y: Var, c: &Tensor) -> Var {
    let cv = g.input(c.clone());
    let p = g.mul(y, cv).expect("readout shape");
    g.sum(p)
}

/// Checks `layer` on `instances` random small problems.
pub fn check_layer(layer: Layer, instances: usize, seed: u64, tol: Tolerance) -> Report {
    let mut report = Report::new(&format!("{layer:?}"));
    let mut rng = rng::seeded(seed);
    for _ in 0..instances {
        let rows = rng.random_range(1..4usize);
        let cols = rng.random_range(1..6usize);
        let v = uniform(&mut rng, &[rows, cols], -1.0, 1.0);
        let c = uniform(&mut rng, &[rows, cols], -1.0, 1.0);
        let elementwise = |name: &str, t: &Tensor, op: fn(&mut Graph, Var) -> Var, f: fn(f64) -> f64| {
            let inputs = named(vec![(name, t.clone())]);
            let c2 = c.clone();
            let analytic = graph_grads(&inputs, |g, v| {
                let y = op(g, v[0]);
                readout(g, y, &c2)
            });
            let cr = Arr::from_tensor(&c);
            let reference = move |a: &[Arr], _: &mut Vec<u8>| a[0].map(f).dot(&cr);
            (inputs, analytic, Box::new(reference) as Box<Reference>)
        };
        let (inputs, analytic, reference): (Vec<(String, Tensor)>, Vec<Tensor>, Box<Reference>) = match layer {
            Layer::Dense => {
                let (din, dout) = (rng.random_range(1..6usize), rng.random_range(1..6usize));
                let inputs = named(vec![
                    ("x", uniform(&mut rng, &[rows, din], -1.0, 1.0)),
                    ("w", uniform(&mut rng, &[din, dout], -1.0, 1.0)),
                    ("b", uniform(&mut rng, &[dout], -1.0, 1.0)),
                ]);
                let c = uniform(&mut rng, &[rows, dout], -1.0, 1.0);
                let cr = Arr::from_tensor(&c);
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.dense(v[0], v[1], v[2]).unwrap();
                    readout(g, y, &c)
                });
                (inputs, analytic, Box::new(move |a: &[Arr], _: &mut Vec<u8>| r::dense(&a[0], &a[1], &a[2]).dot(&cr)))
            }
            Layer::Conv2d | Layer::ConvTranspose2d => {
                let transposed = layer == Layer::ConvTranspose2d;
                let (cin, cout) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
                let k = rng.random_range(1..5usize);
                let stride = rng.random_range(1..3usize);
                let pad = rng.random_range(0..k.min(3));
                let (h, w) = if transposed {
                    (rng.random_range(2..5usize), rng.random_range(2..5usize))
                } else {
                    (rng.random_range(k.max(2)..k + 5), rng.random_range(k.max(2)..k + 5))
                };
                if transposed && ((h - 1) * stride + k <= 2 * pad || (w - 1) * stride + k <= 2 * pad) {
                    continue;
                }
                let kshape = if transposed { [cin, cout, k, k] } else { [cout, cin, k, k] };
                let inputs = named(vec![
                    ("x", uniform(&mut rng, &[2, cin, h, w], -1.0, 1.0)),
                    ("w", uniform(&mut rng, &kshape, -1.0, 1.0)),
                    ("b", uniform(&mut rng, &[cout], -1.0, 1.0)),
                ]);
                let a0: Vec<Arr> = inputs.iter().map(|(_, t)| Arr::from_tensor(t)).collect();
                let fwd = move |a: &[Arr]| {
                    if transposed {
                        r::conv_transpose2d(&a[0], &a[1], &a[2], stride, pad)
                    } else {
                        r::conv2d(&a[0], &a[1], &a[2], stride, pad)
                    }
                };
                let out_shape = fwd(&a0).shape;
                let c = uniform(&mut rng, &out_shape, -1.0, 1.0);
                let cr = Arr::from_tensor(&c);
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = if transposed {
                        g.conv_transpose2d(v[0], v[1], v[2], stride, pad).unwrap()
                    } else {
                        g.conv2d(v[0], v[1], v[2], stride, pad).unwrap()
                    };
                    readout(g, y, &c)
                });
                (inputs, analytic, Box::new(move |a: &[Arr], _: &mut Vec<u8>| fwd(a).dot(&cr)))
            }
            Layer::Relu => {
                let inputs = named(vec![("x", v.clone())]);
                let c2 = c.clone();
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.relu(v[0]);
                    readout(g, y, &c2)
                });
                let cr = Arr::from_tensor(&c);
                (inputs, analytic, Box::new(move |a: &[Arr], p: &mut Vec<u8>| r::relu(&a[0], p).dot(&cr)))
            }
            Layer::Clamp => {
                let x = uniform(&mut rng, &[rows, cols], -2.0, 2.0);
                let inputs = named(vec![("x", x)]);
                let c2 = c.clone();
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.clamp(v[0], -1.0, 1.0);
                    readout(g, y, &c2)
                });
                let cr = Arr::from_tensor(&c);
                (inputs, analytic, Box::new(move |a: &[Arr], p: &mut Vec<u8>| r::clamp(&a[0], -1.0, 1.0, p).dot(&cr)))
            }
            Layer::Sigmoid => elementwise("x", &uniform(&mut rng, &[rows, cols], -4.0, 4.0), Graph::sigmoid, |x| {
                1.0 / (1.0 + (-x).exp())
            }),
            Layer::Exp => elementwise("x", &v, Graph::exp, f64::exp),
            Layer::Square => elementwise("x", &v, Graph::square, |x| x * x),
            Layer::Scale => elementwise("x", &v, |g, x| g.scale(x, -1.75), |x| -1.75 * x),
            Layer::Sum | Layer::Mean => {
                let mean = layer == Layer::Mean;
                let inputs = named(vec![("x", v.clone())]);
                let analytic = graph_grads(&inputs, |g, v| {
                    let s = if mean { g.mean(v[0]) } else { g.sum(v[0]) };
                    g.scale(s, 0.5)
                });
                let n = v.len() as f64;
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| {
                        let s: f64 = a[0].data.iter().sum();
                        0.5 * if mean { s / n } else { s }
                    }),
                )
            }
            Layer::Add | Layer::Mul => {
                let mul = layer == Layer::Mul;
                let inputs = named(vec![("a", v.clone()), ("b", uniform(&mut rng, &[rows, cols], -1.0, 1.0))]);
                let c2 = c.clone();
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = if mul { g.mul(v[0], v[1]) } else { g.add(v[0], v[1]) }.unwrap();
                    readout(g, y, &c2)
                });
                let cr = Arr::from_tensor(&c);
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| {
                        a[0].zip(&a[1], |x, y| if mul { x * y } else { x + y }).dot(&cr)
                    }),
                )
            }
            Layer::Reshape => {
                let inputs = named(vec![("x", v.clone())]);
                let c_flat = uniform(&mut rng, &[rows * cols], -1.0, 1.0);
                let cr = Arr::from_tensor(&c_flat);
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.reshape(v[0], &[rows * cols]).unwrap();
                    readout(g, y, &c_flat)
                });
                (inputs, analytic, Box::new(move |a: &[Arr], _: &mut Vec<u8>| a[0].dot(&cr)))
            }
            Layer::SliceCols => {
                let start = rng.random_range(0..cols);
                let len = rng.random_range(1..=cols - start);
                let inputs = named(vec![("x", v.clone())]);
                let cs = uniform(&mut rng, &[rows, len], -1.0, 1.0);
                let cr = Arr::from_tensor(&cs);
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.slice_cols(v[0], start, len).unwrap();
                    readout(g, y, &cs)
                });
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| {
                        let mut s = 0.0;
                        for i in 0..rows {
                            for j in 0..len {
                                s += a[0].data[i * cols + start + j] * cr.data[i * len + j];
                            }
                        }
                        s
                    }),
                )
            }
            Layer::ConcatCols => {
                let other = rng.random_range(1..4usize);
                let inputs = named(vec![("a", v.clone()), ("b", uniform(&mut rng, &[rows, other], -1.0, 1.0))]);
                let width = cols + other;
                let cc = uniform(&mut rng, &[rows, width], -1.0, 1.0);
                let cr = Arr::from_tensor(&cc);
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.concat_cols(v[0], v[1]).unwrap();
                    readout(g, y, &cc)
                });
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| {
                        let mut s = 0.0;
                        for i in 0..rows {
                            for j in 0..width {
                                let x = if j < cols { a[0].data[i * cols + j] } else { a[1].data[i * other + j - cols] };
                                s += x * cr.data[i * width + j];
                            }
                        }
                        s
                    }),
                )
            }
            Layer::Dropout => {
                let rate: f32 = rng.random_range(0.1..0.6);
                let mask_seed: u64 = rng.random();
                let inputs = named(vec![("x", v.clone())]);
                let c2 = c.clone();
                let analytic = graph_grads(&inputs, |g, v| {
                    let y = g.dropout(v[0], rate, &mut rng::seeded(mask_seed)).unwrap();
                    readout(g, y, &c2)
                });
                // One uniform draw per element in row-major order; kept
                // elements are rescaled by 1 / (1 − rate).
                let mut mrng = rng::seeded(mask_seed);
                let keep = 1.0 / (1.0 - rate as f64);
                let mask: Vec<f64> = (0..v.len())
                    .map(|_| if mrng.random::<f32>() < rate { 0.0 } else { keep })
                    .collect();
                let cr = Arr::from_tensor(&c);
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| {
                        a[0].data.iter().zip(&mask).zip(&cr.data).map(|((x, m), c)| x * m * c).sum()
                    }),
                )
            }
            Layer::ResidualBlock => {
                let width = rng.random_range(1..6usize);
                let inputs = named(vec![
                    ("h", uniform(&mut rng, &[rows, width], -1.0, 1.0)),
                    ("res.w1", uniform(&mut rng, &[width, width], -1.0, 1.0)),
                    ("res.b1", uniform(&mut rng, &[width], -0.5, 0.5)),
                    ("res.w2", uniform(&mut rng, &[width, width], -1.0, 1.0)),
                    ("res.b2", uniform(&mut rng, &[width], -0.5, 0.5)),
                ]);
                let mut store = ParamStore::new();
                for (name, t) in &inputs[1..] {
                    store.insert(name, t.clone()).unwrap();
                }
                let c = uniform(&mut rng, &[rows, width], -1.0, 1.0);
                let cr = Arr::from_tensor(&c);
                let mut g = Graph::training();
                let h = g.input(inputs[0].1.clone());
                let y = reroof::vae::residual_block(&mut g, &store, "res", h).unwrap();
                let loss = readout(&mut g, y, &c);
                let grads = g.backward(loss).unwrap();
                let by_name = g.param_grads(&grads);
                let mut analytic = vec![grads.get(h).unwrap().clone()];
                for (name, _) in &inputs[1..] {
                    analytic.push(by_name.iter().find(|(n, _)| n == name).unwrap().1.clone());
                }
                let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], p: &mut Vec<u8>| {
                        let params: r::Params = names[1..].iter().cloned().zip(a[1..].iter().cloned()).collect();
                        r::residual_block(&params, "res", &a[0], p).dot(&cr)
                    }),
                )
            }
            Layer::HalfSquaredError => {
                let inputs = named(vec![("pred", v.clone()), ("target", c.clone())]);
                let analytic = graph_grads(&inputs, |g, v| g.half_squared_error(v[0], v[1]).unwrap());
                (
                    inputs,
                    analytic,
                    Box::new(|a: &[Arr], _: &mut Vec<u8>| r::half_squared_error(&a[0], &a[1])),
                )
            }
            Layer::GaussianKl => {
                let inputs = named(vec![("mu", v.clone()), ("log_var", uniform(&mut rng, &[rows, cols], -3.0, 3.0))]);
                let analytic = graph_grads(&inputs, |g, v| g.gaussian_kl(v[0], v[1]).unwrap());
                (inputs, analytic, Box::new(|a: &[Arr], _: &mut Vec<u8>| r::gaussian_kl(&a[0], &a[1])))
            }
            Layer::BceWithLogits => {
                let n = rows * cols;
                let targets: Vec<f32> = (0..n).map(|_| rng.random_range(0..2) as f32).collect();
                let weights: Vec<f32> = (0..n).map(|_| rng.random_range(0.2..3.0)).collect();
                let inputs = named(vec![("logits", uniform(&mut rng, &[n], -4.0, 4.0))]);
                let (t2, w2) = (targets.clone(), weights.clone());
                let analytic = graph_grads(&inputs, |g, v| g.bce_with_logits(v[0], &t2, &w2).unwrap());
                let t64: Vec<f64> = targets.iter().map(|&v| v as f64).collect();
                let w64: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
                (
                    inputs,
                    analytic,
                    Box::new(move |a: &[Arr], _: &mut Vec<u8>| r::bce_with_logits(&a[0], &t64, &w64)),
                )
            }
        };
        check_instance(&mut report, &inputs, &analytic, &*reference, 64, tol, &mut rng);
    }
    report
}

/// Small architectures with varying depth and width.
pub fn small_arch(rng: &mut Rng) -> VaeArch {
    let layers = rng.random_range(1..3usize);
    VaeArch {
        image_size: 4 << layers,
        conv_channels: (0..layers).map(|_| rng.random_range(2..5)).collect(),
        kernel: 4,
        latent_dim: rng.random_range(2..6),
        residual_blocks: rng.random_range(0..3),
    }
}

/// Full loss gradient with respect to every parameter tensor, probing up to
/// `max_coords` coordinates per tensor.
pub fn check_elbo(arch: &VaeArch, batch: usize, seed: u64, max_coords: usize, tol: Tolerance, report: &mut Report) {
    let mut rng = rng::seeded(seed);
    let params = VaeParams::init(arch.clone(), &mut rng).expect("arch");
    let s = arch.image_size;
    let x = uniform(&mut rng, &[batch, 3, s, s], 0.0, 1.0);
    let eps = uniform(&mut rng, &[batch, arch.latent_dim], -2.0, 2.0);
    let beta: f32 = rng.random_range(0.0..2.0);
    let eval = elbo_loss_with_noise(&params, &x, beta, &eps).expect("loss");
    let grads = eval.graph.backward(eval.loss).expect("backward");
    let by_name = eval.graph.param_grads(&grads);
    let inputs: Vec<(String, Tensor)> = params
        .store()
        .iter()
        .map(|(n, p)| (n.to_string(), p.value.clone()))
        .collect();
    let analytic: Vec<Tensor> = inputs
        .iter()
        .map(|(name, t)| {
            let mut total = Tensor::zeros(t.shape());
            for (_, g) in by_name.iter().filter(|(n, _)| n == name) {
                total.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
            }
            total
        })
        .collect();
    let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
    let xr = Arr::from_tensor(&x);
    let er = Arr::from_tensor(&eps);
    let arch2 = arch.clone();
    let reference = move |a: &[Arr], p: &mut Vec<u8>| {
        let params: r::Params = names.iter().cloned().zip(a.iter().cloned()).collect();
        r::vae_loss(&arch2, &params, &xr, &er, beta as f64, p)
    };
    check_instance(report, &inputs, &analytic, &reference, max_coords, tol, &mut rng);
}

/// `instances` random small architectures, every parameter tensor probed.
pub fn check_elbo_small(instances: usize, seed: u64, tol: Tolerance) -> Report {
    let mut report = Report::new("ELBO (small architectures)");
    let mut rng = rng::seeded(seed);
    for _ in 0..instances {
        let arch = small_arch(&mut rng);
        let batch = rng.random_range(1..3);
        check_elbo(&arch, batch, rng.random(), 24, tol, &mut report);
    }
    report
}
