//! Wengert tape for reverse-mode differentiation.
//!
//! Forward operators append a node holding the computed value. A node only
//! keeps its backward rule when at least one input needs a gradient, so
//! frozen sub-graphs cost nothing at backward time. [`Tape::backward`]
//! consumes the tape; a fresh tape is built for every training step.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower/upper clamp applied to every sigmoid output.
pub const PROB_EPS: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    UpsampleNearest2 {
        input: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    Sigmoid {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ConcatChannels {
        a: Var,
        b: Var,
    },
    GlobalAvgPool {
        input: Var,
    },
    L1Loss {
        pred: Var,
        reference: Var,
    },
    BceTerms {
        p: Var,
        target: f64,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of leaves produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf copied from `t`; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        self.push_leaf(t.detached(), needs)
    }

    /// Records a differentiable leaf that takes ownership of `t`'s data.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, mut t: Tensor, needs_grad: bool) -> Var {
        t.clear_grad();
        t.set_requires_grad(needs_grad);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Hash of every discrete branch taken by recorded (differentiable)
    /// nodes: activation signs, pooling winners, L1 signs and sigmoid
    /// clamping. Two evaluations with equal signatures lie on the same
    /// smooth piece of the computed function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: u64| {
            h ^= bit;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        let sign = |x: f64| (x > 0.0) as u64 + 2 * (x < 0.0) as u64;
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } | Op::LeakyRelu { input, .. } => {
                    self.value(*input).data().iter().for_each(|&x| feed(sign(x)));
                }
                Op::MaxPool2 { argmax, .. } => argmax.iter().for_each(|&i| feed(i as u64)),
                Op::L1Loss { pred, reference } => {
                    let (p, r) = (self.value(*pred).data(), self.value(*reference).data());
                    p.iter().zip(r).for_each(|(a, b)| feed(sign(a - b)));
                }
                Op::Sigmoid { .. } => node
                    .value
                    .data()
                    .iter()
                    .for_each(|&y| feed((y <= PROB_EPS || y >= 1.0 - PROB_EPS) as u64)),
                _ => {}
            }
        }
        h
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.value(*v).all_finite()) {
            debug_assert!(
                data.iter().all(|x| x.is_finite()),
                "non-finite output from finite inputs in {op:?}"
            );
        }
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        let value = Tensor::new(shape, data).expect("operator produced consistent shape");
        self.nodes.push(Node {
            value,
            op: if needs_grad { op } else { Op::Leaf },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match *self.shape(v) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, s, &[0, 0, 0, 0])),
        }
    }

    /// 2-D cross-correlation. `input` is `[n, cin, h, w]`, `kernel` is
    /// `[cout, cin, kh, kw]`, optional `bias` is `[cout]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let [n, cin, h, w] = self.dims4("conv2d", input)?;
        let [cout, kcin, kh, kw] = self.dims4("conv2d", kernel)?;
        if kcin != cin || stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", self.shape(input), self.shape(kernel)));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let mut ins = vec![input, kernel];
        ins.extend(bias);
        Ok(self.push(
            vec![n, cout, geom.ho, geom.wo],
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            &ins,
        ))
    }

    pub fn upsample_nearest2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("upsample_nearest2", input)?;
        let x = self.value(input).data();
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for p in 0..n * c {
            let src = &x[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
            for y in 0..h2 {
                for xx in 0..w2 {
                    dst[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.push(vec![n, c, h2, w2], out, Op::UpsampleNearest2 { input }, &[input]))
    }

    /// 2×2 max pooling with stride 2; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("maxpool2", input)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("maxpool2", self.shape(input), &[n, c, h / 2 * 2, w / 2 * 2]));
        }
        let x = self.value(input).data();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    let o = p * ho * wo + oy * wo + ox;
                    out[o] = x[best];
                    argmax[o] = best;
                }
            }
        }
        Ok(self.push(vec![n, c, ho, wo], out, Op::MaxPool2 { input, argmax }, &[input]))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::Relu { input }, &[input]))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::LeakyRelu { input, slope }, &[input]))
    }

    /// Logistic sigmoid clamped to `[PROB_EPS, 1 − PROB_EPS]`.
    pub fn sigmoid(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let out = t
            .data()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-v).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS))
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::Sigmoid { input }, &[input]))
    }

    /// `input [n, in] · weightᵀ [in, out] + bias [out]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, fin) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("linear", s, self.shape(weight))),
        };
        let fout = match *self.shape(weight) {
            [o, i] if i == fin => o,
            ref s => return Err(Error::shape("linear", self.shape(input), s)),
        };
        if let Some(b) = bias {
            if self.shape(b) != [fout] {
                return Err(Error::shape("linear bias", self.shape(b), &[fout]));
            }
        }
        let mut out = vec![0.0; n * fout];
        kernels::gemm(
            n,
            fin,
            fout,
            self.value(input).data(),
            (fin, 1),
            self.value(weight).data(),
            (1, fin),
            0.0,
            &mut out,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
            }
        }
        let mut ins = vec![input, weight];
        ins.extend(bias);
        Ok(self.push(vec![n, fout], out, Op::Linear { input, weight, bias }, &ins))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.dims4("concat_channels", a)?;
        let [nb, cb, hb, wb] = self.dims4("concat_channels", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::shape("concat_channels", self.shape(a), self.shape(b)));
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (la + lb));
        for s in 0..n {
            out.extend_from_slice(&xa[s * la..(s + 1) * la]);
            out.extend_from_slice(&xb[s * lb..(s + 1) * lb]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::ConcatChannels { a, b }, &[a, b]))
    }

    /// `[n, c, h, w] → [n, c]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = self.dims4("global_avg_pool", input)?;
        let hw = (h * w) as f64;
        let out = self
            .value(input)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool { input }, &[input]))
    }

    /// Sum of absolute differences, `‖pred − reference‖₁`, as a scalar.
    pub fn l1_loss(&mut self, pred: Var, reference: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, reference)?;
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(reference).data())
            .map(|(p, r)| (p - r).abs())
            .sum();
        Ok(self.push(vec![1], vec![s], Op::L1Loss { pred, reference }, &[pred, reference]))
    }

    /// Elementwise binary cross-entropy `−[t·ln p + (1−t)·ln(1−p)]` against a
    /// constant label `target`. Every `p` must lie strictly inside (0, 1).
    pub fn bce_terms(&mut self, p: Var, target: f64) -> Result<Var> {
        let t = self.value(p);
        if let Some(bad) = t.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(Error::Domain {
                op: "bce_terms",
                detail: format!("probability {bad} not in (0, 1)"),
            });
        }
        let out = t
            .data()
            .iter()
            .map(|&v| -(target * v.ln() + (1.0 - target) * (1.0 - v).ln()))
            .collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::BceTerms { p, target }, &[p]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let t = self.value(input);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(shape, out, Op::Scale { input, factor }, &[input]))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input).data().iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum { input }, &[input]))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        Ok(self.push(vec![1], vec![s], Op::Mean { input }, &[input]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// differentiable leaf and frees the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidTensor("backward on an empty tape".into()));
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        // Only leaves carry meaningful gradients past this point.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut dx = self.needs(*input).then(|| vec![0.0; val(*input).len()]);
                let mut dw = self.needs(*kernel).then(|| vec![0.0; val(*kernel).len()]);
                let mut db = bias
                    .filter(|b| self.needs(*b))
                    .map(|b| vec![0.0; val(b).len()]);
                kernels::conv2d_backward(
                    val(*input),
                    val(*kernel),
                    g,
                    geom,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    add_into(grads, *input, &dx);
                }
                if let Some(dw) = dw {
                    add_into(grads, *kernel, &dw);
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    add_into(grads, *b, &db);
                }
            }
            Op::UpsampleNearest2 { input } => {
                let [n, c, h, w] = dims(self.nodes[input.0].value.shape());
                let w2 = 2 * w;
                let mut dx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    for (idx, v) in src.iter().enumerate() {
                        let (y, x) = (idx / w2, idx % w2);
                        dst[(y / 2) * w + x / 2] += v;
                    }
                }
                add_into(grads, *input, &dx);
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; val(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                add_into(grads, *input, &dx);
            }
            Op::Relu { input } => {
                let dx: Vec<f64> = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 })
                    .collect();
                add_into(grads, *input, &dx);
            }
            Op::LeakyRelu { input, slope } => {
                let dx: Vec<f64> = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| if x > 0.0 { gy } else { slope * gy })
                    .collect();
                add_into(grads, *input, &dx);
            }
            Op::Sigmoid { input } => {
                let dx: Vec<f64> = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gy)| {
                        if y <= PROB_EPS || y >= 1.0 - PROB_EPS {
                            0.0
                        } else {
                            gy * y * (1.0 - y)
                        }
                    })
                    .collect();
                add_into(grads, *input, &dx);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let [n, fin] = [self.shape(*input)[0], self.shape(*input)[1]];
                let fout = self.shape(*weight)[0];
                if self.needs(*input) {
                    let mut dx = vec![0.0; n * fin];
                    kernels::gemm(n, fout, fin, g, (fout, 1), val(*weight), (fin, 1), 0.0, &mut dx);
                    add_into(grads, *input, &dx);
                }
                if self.needs(*weight) {
                    let mut dw = vec![0.0; fout * fin];
                    kernels::gemm(fout, n, fin, g, (1, fout), val(*input), (fin, 1), 0.0, &mut dw);
                    add_into(grads, *weight, &dw);
                }
                if let Some(b) = bias.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    add_into(grads, b, &db);
                }
            }
            Op::ConcatChannels { a, b } => {
                let [n, ca, h, w] = dims(self.shape(*a));
                let cb = self.shape(*b)[1];
                let (la, lb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * la);
                let mut db = Vec::with_capacity(n * lb);
                for s in 0..n {
                    let chunk = &g[s * (la + lb)..(s + 1) * (la + lb)];
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                if self.needs(*a) {
                    add_into(grads, *a, &da);
                }
                if self.needs(*b) {
                    add_into(grads, *b, &db);
                }
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = dims(self.shape(*input));
                let hw = h * w;
                let dx: Vec<f64> = g
                    .iter()
                    .flat_map(|&gy| std::iter::repeat_n(gy / hw as f64, hw))
                    .collect();
                add_into(grads, *input, &dx);
            }
            Op::L1Loss { pred, reference } => {
                let sign: Vec<f64> = val(*pred)
                    .iter()
                    .zip(val(*reference))
                    .map(|(p, r)| {
                        let d = p - r;
                        g[0] * if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.needs(*reference) {
                    let neg: Vec<f64> = sign.iter().map(|v| -v).collect();
                    add_into(grads, *reference, &neg);
                }
                if self.needs(*pred) {
                    add_into(grads, *pred, &sign);
                }
            }
            Op::BceTerms { p, target } => {
                let dx: Vec<f64> = val(*p)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gy)| gy * (-target / v + (1.0 - target) / (1.0 - v)))
                    .collect();
                add_into(grads, *p, &dx);
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(grads, *a, g);
                }
                if self.needs(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<f64> = val(*b).iter().zip(g).map(|(y, gy)| y * gy).collect();
                    add_into(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = val(*a).iter().zip(g).map(|(x, gy)| x * gy).collect();
                    add_into(grads, *b, &db);
                }
            }
            Op::Scale { input, factor } => {
                let dx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                add_into(grads, *input, &dx);
            }
            Op::Sum { input } => {
                let dx = vec![g[0]; val(*input).len()];
                add_into(grads, *input, &dx);
            }
            Op::Mean { input } => {
                let n = val(*input).len();
                let dx = vec![g[0] / n as f64; n];
                add_into(grads, *input, &dx);
            }
        }
    }
}

fn dims(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn unit_kernel_of_two_doubles_pixels() {
        let mut tape = Tape::new();
        let img: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 1.0).collect();
        let x = tape.constant(t(&[1, 1, 3, 4], &img));
        let k = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let y = tape.conv2d(x, k, None, 1, 0).unwrap();
        let want: Vec<f64> = img.iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(y).data(), &want[..]);
    }

    #[test]
    fn l1_of_identical_tensors_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.3, -1.0, 4.0, 2.5]));
        let b = tape.constant(t(&[2, 2], &[0.3, -1.0, 4.0, 2.5]));
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let loss = tape.sum(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_fixed_input() {
        let mut tape = Tape::new();
        let xs = [0.5, -2.0, 3.25, 7.0];
        let w = tape.variable(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.constant(t(&[4], &xs));
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &xs);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn l1_against_zero_gives_sign() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[3.0, -2.0]));
        let z = tape.constant(Tensor::zeros(&[2]));
        let loss = tape.l1_loss(x, z).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[2], &[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(s)) if s == vec![2]));
    }

    #[test]
    fn bce_rejects_probabilities_outside_open_interval() {
        let mut tape = Tape::new();
        let p = tape.variable(t(&[2], &[0.5, 1.0]));
        assert!(matches!(tape.bce_terms(p, 1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn sigmoid_is_clamped() {
        let mut tape = Tape::new();
        let x = tape.variable(t(&[3], &[-100.0, 0.0, 100.0]));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[PROB_EPS, 0.5, 1.0 - PROB_EPS]);
    }

    #[test]
    fn shape_errors_name_the_operator() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = tape.conv2d(x, k, None, 1, 1).unwrap_err();
        assert!(err.to_string().starts_with("conv2d"), "{err}");
        let a = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        let b = tape.constant(Tensor::zeros(&[1, 1, 2, 4]));
        assert!(matches!(tape.concat_channels(a, b), Err(Error::ShapeMismatch { op: "concat_channels", .. })));
    }

    #[test]
    fn frozen_inputs_record_no_backward_rule() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[1.0, -1.0]));
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }
}
