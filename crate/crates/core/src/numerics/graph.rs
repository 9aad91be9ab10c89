//! Recording graph for reverse-mode differentiation.
//!
//! Each op evaluates eagerly and appends a node; [`Graph::backward`] walks the
//! nodes in reverse. Ops are single-threaded; data parallelism happens one
//! level up by running independent graphs (micro-batches, buildings) at once.

use rand::Rng as _;

use super::linalg::{col2im, gemm, im2col, ConvGeom};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Clamp {
        x: Var,
        lo: f32,
        hi: f32,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Var, Var),
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    HalfSquaredError {
        pred: Var,
        target: Var,
    },
    GaussianKl {
        mu: Var,
        log_var: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f32>,
        weights: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eagerly evaluated computation graph.
pub struct Graph {
    nodes: Vec<Node>,
    training: bool,
}

/// Gradients of one scalar with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())))
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `μ² + σ² − 1 − log σ²` for one latent dimension.
pub(crate) fn kl_element(mu: f64, log_var: f64) -> f64 {
    mu * mu + log_var.exp() - 1.0 - log_var
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f32) -> f32 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// NCHW → `[N * H * W, C]`.
fn nchw_to_rows(x: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n {
        for ch in 0..c {
            let plane = &x[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (p, v) in plane.iter().enumerate() {
                out[(s * hw + p) * c + ch] = *v;
            }
        }
    }
    out
}

/// `[N * H * W, C]` → NCHW.
fn rows_to_nchw(rows: &[f32], n: usize, c: usize, hw: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows.len()];
    for s in 0..n {
        for ch in 0..c {
            let plane = &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw];
            for (p, v) in plane.iter_mut().enumerate() {
                *v = rows[(s * hw + p) * c + ch];
            }
        }
    }
    out
}

impl Graph {
    /// A graph in training mode (dropout active).
    pub fn training() -> Self {
        Graph {
            nodes: Vec::new(),
            training: true,
        }
    }

    /// A graph in evaluation mode (dropout is the identity).
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            training: false,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf holding a copy of the named parameter.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let mut out = ta.clone();
        out.add_assign(tb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f32::exp);
        self.push(out, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        self.push(out, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f32);
        self.push(out, Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(out, Op::Clamp { x, lo, hi })
    }

    /// Columns `[start, start + len)` of a `[N, D]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2("slice_cols")?;
        if len == 0 || start + len > d {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of [{n}, {d}]", start + len),
                format!("{:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n * len);
        for row in t.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![n, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    /// `[N, Da] ++ [N, Db] → [N, Da + Db]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, da) = ta.dims2("concat_cols")?;
        let (nb, db) = tb.dims2("concat_cols")?;
        if n != nb {
            return Err(Error::shape(
                "concat_cols",
                format!("{:?}", ta.shape()),
                format!("{:?}", tb.shape()),
            ));
        }
        let mut data = Vec::with_capacity(n * (da + db));
        for (ra, rb) in ta.data().chunks(da).zip(tb.data().chunks(db)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let out = Tensor::new(vec![n, da + db], data)?;
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` (one uniform draw per element, row-major) and the
    /// survivors are scaled by `1 / (1 - rate)`. Identity in eval mode.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let t = self.value(x);
        let mask: Vec<f32> = (0..t.len())
            .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    /// `x · w + b` with `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, din) = tx.dims2("dense")?;
        let (win, dout) = tw.dims2("dense")?;
        if din != win || tb.shape() != [dout] {
            return Err(Error::shape(
                "dense",
                format!("input [{n}, {win}] and bias [{dout}]"),
                format!("input {:?}, weight {:?}, bias {:?}", tx.shape(), tw.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; n * dout];
        for row in out.chunks_mut(dout) {
            row.copy_from_slice(tb.data());
        }
        gemm(n, din, dout, tx.data(), false, tw.data(), false, 1.0, &mut out);
        let out = Tensor::new(vec![n, dout], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    fn conv_geom(
        op: &'static str,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        transposed: bool,
    ) -> Result<(usize, ConvGeom, usize)> {
        let (n, c, h, wd) = x.dims4(op)?;
        let (w0, w1, k, k2) = w.dims4(op)?;
        let (cin, cout) = if transposed { (w0, w1) } else { (w1, w0) };
        if stride == 0 {
            return Err(Error::InvalidConfig(format!("{op}: stride must be at least 1")));
        }
        if c != cin || k != k2 || b.shape() != [cout] {
            return Err(Error::shape(
                op,
                format!("input with {cin} channels, square kernel, bias [{cout}]"),
                format!("input {:?}, weight {:?}, bias {:?}", x.shape(), w.shape(), b.shape()),
            ));
        }
        let geom = if transposed {
            // A transposed convolution is the adjoint of a convolution over
            // the (larger) output image.
            let oh = ((h - 1) * stride + k).checked_sub(2 * pad);
            let ow = ((wd - 1) * stride + k).checked_sub(2 * pad);
            match (oh, ow) {
                (Some(oh), Some(ow)) if oh > 0 && ow > 0 => ConvGeom {
                    channels: cout,
                    height: oh,
                    width: ow,
                    kernel: k,
                    stride,
                    pad,
                },
                _ => return Err(Error::shape(op, "positive output size", format!("{:?}", x.shape()))),
            }
        } else {
            ConvGeom {
                channels: c,
                height: h,
                width: wd,
                kernel: k,
                stride,
                pad,
            }
        };
        let out = geom
            .output()
            .ok_or_else(|| Error::shape(op, format!("kernel {k} fitting the padded input"), format!("{:?}", x.shape())))?;
        if transposed && out != (h, wd) {
            return Err(Error::shape(op, format!("{:?}", out), format!("{:?}", (h, wd))));
        }
        Ok((n, geom, cout))
    }

    /// 2-D convolution: `x: [N, Cin, H, W]`, `w: [Cout, Cin, K, K]`, `b: [Cout]`.
    ///
    /// Output spatial size is `floor((H + 2·pad − K) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, g, cout) = Self::conv_geom("conv2d", tx, tw, tb, stride, pad, false)?;
        let (oh, ow) = g.output().expect("validated");
        let hw_out = oh * ow;
        let plen = g.patch_len();
        let img_len = g.channels * g.height * g.width;
        let mut cols = vec![0.0; n * hw_out * plen];
        for s in 0..n {
            im2col(
                &tx.data()[s * img_len..(s + 1) * img_len],
                &g,
                &mut cols[s * hw_out * plen..(s + 1) * hw_out * plen],
            );
        }
        let mut rows = vec![0.0; n * hw_out * cout];
        for row in rows.chunks_mut(cout) {
            row.copy_from_slice(tb.data());
        }
        gemm(n * hw_out, plen, cout, &cols, false, tw.data(), true, 1.0, &mut rows);
        let out = Tensor::new(vec![n, cout, oh, ow], rows_to_nchw(&rows, n, cout, hw_out))?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Transposed convolution: `x: [N, Cin, H, W]`, `w: [Cin, Cout, K, K]`.
    ///
    /// Output spatial size is `(H − 1)·stride − 2·pad + K`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, g, cout) = Self::conv_geom("conv_transpose2d", tx, tw, tb, stride, pad, true)?;
        let cin = tx.shape()[1];
        let (h, wd) = (tx.shape()[2], tx.shape()[3]);
        let hw_in = h * wd;
        let plen = g.patch_len();
        let xrows = nchw_to_rows(tx.data(), n, cin, hw_in);
        let mut cols = vec![0.0; n * hw_in * plen];
        gemm(n * hw_in, cin, plen, &xrows, false, tw.data(), false, 0.0, &mut cols);
        let img_len = cout * g.height * g.width;
        let mut out = vec![0.0; n * img_len];
        for s in 0..n {
            let img = &mut out[s * img_len..(s + 1) * img_len];
            col2im(&cols[s * hw_in * plen..(s + 1) * hw_in * plen], &g, img);
            let plane = g.height * g.width;
            for (c, bias) in tb.data().iter().enumerate() {
                img[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bias);
            }
        }
        let out = Tensor::new(vec![n, cout, g.height, g.width], out)?;
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, stride, pad }))
    }

    /// `(1/N) Σ_n ½ Σ_i (pred − target)²` over a leading batch axis.
    pub fn half_squared_error(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape("half_squared_error", tp, tt)?;
        let n = tp.shape().first().copied().unwrap_or(1);
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum();
        let out = Tensor::scalar((0.5 * total / n as f64) as f32);
        Ok(self.push(out, Op::HalfSquaredError { pred, target }))
    }

    /// Closed-form `KL(N(μ, σ²) ‖ N(0, I))` summed over the latent axis and
    /// averaged over the batch: `(1/N) Σ_n ½ Σ_d (μ² + σ² − 1 − log σ²)`.
    pub fn gaussian_kl(&mut self, mu: Var, log_var: Var) -> Result<Var> {
        let (tm, tv) = (self.value(mu), self.value(log_var));
        same_shape("gaussian_kl", tm, tv)?;
        let (n, _) = tm.dims2("gaussian_kl")?;
        let total: f64 = tm
            .data()
            .iter()
            .zip(tv.data())
            .map(|(&m, &lv)| kl_element(m as f64, lv as f64))
            .sum();
        let out = Tensor::scalar((0.5 * total / n as f64) as f32);
        Ok(self.push(out, Op::GaussianKl { mu, log_var }))
    }

    /// Weighted binary cross-entropy on logits: `Σ w·ℓ / Σ w`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32], weights: &[f32]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != targets.len() || t.len() != weights.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} targets and weights", t.len()),
                format!("{} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let wsum: f32 = weights.iter().sum();
        if !(wsum > 0.0) {
            return Err(Error::Precondition("bce weights must have a positive sum".into()));
        }
        let total: f32 = t
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &y), &w)| w * (softplus(z) - y * z))
            .sum();
        let out = Tensor::scalar(total / wsum);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::NonScalarLoss(seed.shape().to_vec()));
        }
        seed.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backward_node(&node.op, &node.value, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and adds each parameter's gradient into
    /// `store`. Parameters that do not influence `loss` get a zero gradient.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store)
    }

    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            if store.grad(name).is_none() {
                let shape = store.value(name)?.shape().to_vec();
                store.accumulate_grad(name, &Tensor::zeros(&shape))?;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(name), Some(g)) = (&node.op, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    /// `(name, gradient)` for every recorded parameter leaf reached by the
    /// reverse pass, in recording order.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> Vec<(&'a str, &'a Tensor)> {
        self.nodes
            .iter()
            .zip(&grads.grads)
            .filter_map(|(node, g)| match (&node.op, g) {
                (Op::Param(name), Some(g)) => Some((name.as_str(), g)),
                _ => None,
            })
            .collect()
    }

    fn backward_node(
        &self,
        op: &Op,
        y: &Tensor,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        let with_shape = |like: &Tensor, data: Vec<f32>| Tensor::new(like.shape().to_vec(), data);
        let zip_map = |a: &Tensor, b: &Tensor, f: &dyn Fn(f32, f32) -> f32| -> Vec<f32> {
            a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect()
        };

        match op {
            Op::Input | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, gy.clone());
                acc(*b, gy.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                acc(*a, with_shape(ta, zip_map(gy, tb, &|g, q| g * q))?);
                acc(*b, with_shape(tb, zip_map(gy, ta, &|g, p| g * p))?);
            }
            Op::Scale(x, f) => acc(*x, gy.map(|g| g * f)),
            Op::Relu(x) => {
                let tx = val(x);
                acc(*x, with_shape(tx, zip_map(gy, tx, &|g, v| if v > 0.0 { g } else { 0.0 }))?);
            }
            Op::Sigmoid(x) => acc(*x, with_shape(y, zip_map(gy, y, &|g, s| g * s * (1.0 - s)))?),
            Op::Exp(x) => acc(*x, with_shape(y, zip_map(gy, y, &|g, e| g * e))?),
            Op::Square(x) => {
                let tx = val(x);
                acc(*x, with_shape(tx, zip_map(gy, tx, &|g, v| 2.0 * g * v))?);
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                acc(*x, Tensor::full(val(x).shape(), g));
            }
            Op::Mean(x) => {
                let tx = val(x);
                acc(*x, Tensor::full(tx.shape(), gy.data()[0] / tx.len() as f32));
            }
            Op::Reshape(x) => acc(*x, gy.clone().reshape(val(x).shape())?),
            Op::Clamp { x, lo, hi } => {
                let tx = val(x);
                let g = zip_map(gy, tx, &|g, v| if v >= *lo && v <= *hi { g } else { 0.0 });
                acc(*x, with_shape(tx, g)?);
            }
            Op::SliceCols { x, start } => {
                let tx = val(x);
                let (n, d) = tx.dims2("slice_cols")?;
                let len = gy.shape()[1];
                let mut g = vec![0.0; n * d];
                for (dst, src) in g.chunks_mut(d).zip(gy.data().chunks(len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                acc(*x, with_shape(tx, g)?);
            }
            Op::ConcatCols(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (da, db) = (ta.shape()[1], tb.shape()[1]);
                let mut ga = Vec::with_capacity(ta.len());
                let mut gb = Vec::with_capacity(tb.len());
                for row in gy.data().chunks(da + db) {
                    ga.extend_from_slice(&row[..da]);
                    gb.extend_from_slice(&row[da..]);
                }
                acc(*a, with_shape(ta, ga)?);
                acc(*b, with_shape(tb, gb)?);
            }
            Op::Dropout { x, mask } => {
                let g = gy.data().iter().zip(mask).map(|(g, m)| g * m).collect();
                acc(*x, with_shape(gy, g)?);
            }
            Op::Dense { x, w, b } => {
                let (tx, tw) = (val(x), val(w));
                let (n, din) = tx.dims2("dense")?;
                let dout = tw.shape()[1];
                let mut gx = vec![0.0; n * din];
                gemm(n, dout, din, gy.data(), false, tw.data(), true, 0.0, &mut gx);
                let mut gw = vec![0.0; din * dout];
                gemm(din, n, dout, tx.data(), true, gy.data(), false, 0.0, &mut gw);
                let mut gb = vec![0.0; dout];
                for row in gy.data().chunks(dout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*x, with_shape(tx, gx)?);
                acc(*w, with_shape(tw, gw)?);
                acc(*b, Tensor::new(vec![dout], gb)?);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (tx, tw, tb) = (val(x), val(w), val(b));
                let (n, g, cout) = Self::conv_geom("conv2d", tx, tw, tb, *stride, *pad, false)?;
                let (oh, ow) = g.output().expect("validated");
                let hw_out = oh * ow;
                let plen = g.patch_len();
                let img_len = g.channels * g.height * g.width;
                let gy_rows = nchw_to_rows(gy.data(), n, cout, hw_out);

                let mut cols = vec![0.0; n * hw_out * plen];
                for s in 0..n {
                    im2col(
                        &tx.data()[s * img_len..(s + 1) * img_len],
                        &g,
                        &mut cols[s * hw_out * plen..(s + 1) * hw_out * plen],
                    );
                }
                let mut gw = vec![0.0; cout * plen];
                gemm(cout, n * hw_out, plen, &gy_rows, true, &cols, false, 0.0, &mut gw);
                // Reuse the patch buffer for the input gradient patches.
                gemm(n * hw_out, cout, plen, &gy_rows, false, tw.data(), false, 0.0, &mut cols);
                let mut gx = vec![0.0; tx.len()];
                for s in 0..n {
                    col2im(
                        &cols[s * hw_out * plen..(s + 1) * hw_out * plen],
                        &g,
                        &mut gx[s * img_len..(s + 1) * img_len],
                    );
                }
                let mut gb = vec![0.0; cout];
                for row in gy_rows.chunks(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                acc(*x, with_shape(tx, gx)?);
                acc(*w, with_shape(tw, gw)?);
                acc(*b, Tensor::new(vec![cout], gb)?);
            }
            Op::ConvTranspose2d { x, w, b, stride, pad } => {
                let (tx, tw, tb) = (val(x), val(w), val(b));
                let (n, g, cout) =
                    Self::conv_geom("conv_transpose2d", tx, tw, tb, *stride, *pad, true)?;
                let cin = tx.shape()[1];
                let hw_in = tx.shape()[2] * tx.shape()[3];
                let plen = g.patch_len();
                let img_len = cout * g.height * g.width;

                let mut cols = vec![0.0; n * hw_in * plen];
                for s in 0..n {
                    im2col(
                        &gy.data()[s * img_len..(s + 1) * img_len],
                        &g,
                        &mut cols[s * hw_in * plen..(s + 1) * hw_in * plen],
                    );
                }
                let xrows = nchw_to_rows(tx.data(), n, cin, hw_in);
                let mut gx_rows = vec![0.0; n * hw_in * cin];
                gemm(n * hw_in, plen, cin, &cols, false, tw.data(), true, 0.0, &mut gx_rows);
                let mut gw = vec![0.0; cin * plen];
                gemm(cin, n * hw_in, plen, &xrows, true, &cols, false, 0.0, &mut gw);
                let plane = g.height * g.width;
                let mut gb = vec![0.0; cout];
                for s in 0..n {
                    for (c, acc_b) in gb.iter_mut().enumerate() {
                        let start = s * img_len + c * plane;
                        *acc_b += gy.data()[start..start + plane].iter().sum::<f32>();
                    }
                }
                acc(*x, with_shape(tx, rows_to_nchw(&gx_rows, n, cin, hw_in))?);
                acc(*w, with_shape(tw, gw)?);
                acc(*b, Tensor::new(vec![cout], gb)?);
            }
            Op::HalfSquaredError { pred, target } => {
                let (tp, tt) = (val(pred), val(target));
                let n = tp.shape().first().copied().unwrap_or(1) as f32;
                let s = gy.data()[0] / n;
                acc(*pred, with_shape(tp, zip_map(tp, tt, &|p, t| s * (p - t)))?);
                acc(*target, with_shape(tt, zip_map(tp, tt, &|p, t| s * (t - p)))?);
            }
            Op::GaussianKl { mu, log_var } => {
                let (tm, tv) = (val(mu), val(log_var));
                let s = gy.data()[0] / tm.shape()[0] as f32;
                acc(*mu, tm.map(|m| s * m));
                acc(*log_var, tv.map(|lv| 0.5 * s * (lv.exp() - 1.0)));
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let tz = val(logits);
                let wsum: f32 = weights.iter().sum();
                let s = gy.data()[0] / wsum;
                let g = tz
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&z, &t), &w)| s * w * (sigmoid(z) - t))
                    .collect();
                acc(*logits, with_shape(tz, g)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn store_with(name: &str, value: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, value).unwrap();
        s
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut store = store_with("w", t(&[3], &[0.5, -1.0, 2.0]));
        let mut g = Graph::training();
        let w = g.param(&store, "w").unwrap();
        let loss = g.sum(w);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut store = store_with("w", t(&[2], &[1.0, 2.0]));
        let mut g = Graph::training();
        let w = g.param(&store, "w").unwrap();
        let sq = g.square(w);
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut store = store_with("used", t(&[1], &[3.0]));
        store.insert("unused", t(&[2], &[1.0, 1.0])).unwrap();
        let mut g = Graph::training();
        let w = g.param(&store, "used").unwrap();
        let loss = g.sum(w);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::training();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn conv_with_unit_kernel_is_identity() {
        let mut g = Graph::eval();
        let x = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.input(t(&[1, 1, 1, 1], &[1.0]));
        let b = g.input(t(&[1], &[0.0]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y), &Tensor::full(&[1, 1, 3, 3], 1.0));
    }

    #[test]
    fn conv_with_zero_kernel_is_bias() {
        let mut g = Graph::eval();
        let x = g.input(Tensor::from_fn(&[2, 3, 5, 5], |i| i as f32 * 0.1));
        let w = g.input(Tensor::zeros(&[4, 3, 3, 3]));
        let b = g.input(t(&[4], &[0.5, 0.5, 0.5, 0.5]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn same_padding_preserves_shape() {
        let mut g = Graph::eval();
        let x = g.input(Tensor::from_fn(&[1, 2, 7, 6], |i| (i as f32).sin()));
        let mut kernel = Tensor::zeros(&[2, 2, 3, 3]);
        kernel.data_mut()[4] = 1.0; // out 0 <- in 0 centre tap
        kernel.data_mut()[18 + 9 + 4] = 1.0; // out 1 <- in 1 centre tap
        let w = g.input(kernel);
        let b = g.input(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn conv_shape_mismatch_reports_both_shapes() {
        let mut g = Graph::eval();
        let x = g.input(Tensor::zeros(&[1, 3, 8, 8]));
        let w = g.input(Tensor::zeros(&[4, 2, 3, 3]));
        let b = g.input(Tensor::zeros(&[4]));
        let msg = g.conv2d(x, w, b, 1, 0).unwrap_err().to_string();
        assert!(msg.contains("[1, 3, 8, 8]") && msg.contains("[4, 2, 3, 3]"), "{msg}");
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut g = Graph::eval();
        let x = g.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = g.input(Tensor::zeros(&[2]));
        let y = g.dense(x, eye, zero).unwrap();
        assert_eq!(g.value(y), g.value(x));

        let zw = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(t(&[3], &[1.0, -1.0, 0.5]));
        let y = g.dense(x, zw, b).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 0.5, 1.0, -1.0, 0.5]);
        assert!(g.dense(x, b, zero).is_err());
    }

    #[test]
    fn transposed_conv_doubles_spatial_size() {
        let mut g = Graph::eval();
        let x = g.input(Tensor::full(&[2, 3, 4, 4], 1.0));
        let w = g.input(Tensor::full(&[3, 5, 4, 4], 0.1));
        let b = g.input(Tensor::zeros(&[5]));
        let y = g.conv_transpose2d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }

    #[test]
    fn dropout_is_identity_in_eval_and_rescales_in_training() {
        let mut rng = crate::rng::seeded(3);
        let mut g = Graph::eval();
        let x = g.input(Tensor::full(&[4, 64], 1.0));
        assert_eq!(g.dropout(x, 0.5, &mut rng).unwrap(), x);

        let mut g = Graph::training();
        let x = g.input(Tensor::full(&[4, 64], 1.0));
        let y = g.dropout(x, 0.5, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = vals.iter().filter(|&&v| v > 0.0).count();
        assert!((64..192).contains(&kept), "kept {kept} of 256");
    }

    #[test]
    fn kl_is_zero_at_the_prior_and_half_for_unit_mean() {
        let mut g = Graph::eval();
        let mu = g.input(Tensor::zeros(&[1, 128]));
        let lv = g.input(Tensor::zeros(&[1, 128]));
        let kl = g.gaussian_kl(mu, lv).unwrap();
        assert_eq!(g.value(kl).item(), Some(0.0));

        let mut m = Tensor::zeros(&[1, 128]);
        m.data_mut()[7] = 1.0;
        let mu = g.input(m);
        let kl = g.gaussian_kl(mu, lv).unwrap();
        assert_eq!(g.value(kl).item(), Some(0.5));
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut g = Graph::eval();
        let z = g.input(Tensor::zeros(&[4, 1]));
        let l = g.bce_with_logits(z, &[0.0, 1.0, 1.0, 0.0], &[1.0, 2.0, 1.0, 3.0]).unwrap();
        assert!((g.value(l).item().unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
