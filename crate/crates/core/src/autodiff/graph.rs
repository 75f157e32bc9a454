//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied during one forward pass; calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradients of
//! a scalar with respect to every input and parameter that asked for one.

use std::collections::HashMap;

use rand::Rng;

use super::kernels::{self, ConvGeom, ConvSpec};
use super::params::{ParamId, Params};
use crate::error::{shape_err, PcqError, Result};
use crate::tensor::{lit, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        n: usize,
        m: usize,
    },
    Relu {
        x: Var,
        mask: Vec<bool>,
    },
    Sigmoid(Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    Concat0(Vec<Var>),
    Narrow0 {
        x: Var,
        start: usize,
    },
    Mean0(Var),
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    MaxPool2 {
        x: Var,
        idx: Vec<usize>,
    },
    Bilinear(Var),
    Reshape(Var),
    Transpose2(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    SoftmaxCe {
        logits: Var,
        label: usize,
        probs: Vec<F>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p Params<F>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    replay: Option<(ActivationPattern, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Decision {
    Relu(Vec<bool>),
    MaxPool(Vec<usize>),
}

/// The non-smooth decisions of one forward pass, see
/// [`Graph::activation_pattern`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActivationPattern {
    decisions: Vec<Decision>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<F> {
    leaves: HashMap<Var, Tensor<F>>,
    params: Vec<(ParamId, Tensor<F>)>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of an input created with [`Graph::input_with_grad`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<F>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p Params<F>) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            replay: None,
        }
    }

    /// A graph whose ReLU and max-pool ops reuse the decisions of `pattern`
    /// in order instead of deciding from their inputs. Building the same
    /// computation then evaluates the smooth piece `pattern` was taken on,
    /// continued past its kinks.
    pub fn with_pattern(params: &'p Params<F>, pattern: ActivationPattern) -> Self {
        Graph {
            replay: Some((pattern, 0)),
            ..Graph::new(params)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a parameter on the tape (once per graph; later calls reuse it).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: self.params.get(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    /// Every non-smooth decision taken so far: ReLU signs and max-pool
    /// winners. Evaluations with equal patterns lie on the same smooth piece.
    pub fn activation_pattern(&self) -> ActivationPattern {
        let decisions = self
            .nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Relu { mask, .. } => Some(Decision::Relu(mask.clone())),
                Op::MaxPool2 { idx, .. } => Some(Decision::MaxPool(idx.clone())),
                _ => None,
            })
            .collect();
        ActivationPattern { decisions }
    }

    /// Next replayed decision, if replaying and it fits an op of `len` outputs.
    fn replayed(&mut self, len: usize) -> Option<Decision> {
        let (pattern, cursor) = self.replay.as_mut()?;
        let d = pattern.decisions.get(*cursor)?.clone();
        *cursor += 1;
        let fits = match &d {
            Decision::Relu(m) => m.len() == len,
            Decision::MaxPool(i) => i.len() == len,
        };
        fits.then_some(d)
    }

    // ----- ops -----

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in/groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (cin, h, wd) = self.value(x).dims3()?;
        let (cout, cin_g, kh, kw) = match self.shape(w) {
            &[a, b, c, d] => (a, b, c, d),
            s => return Err(shape_err!("conv weight must be rank 4, got {:?}", s)),
        };
        if spec.groups == 0 || cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(shape_err!(
                "channels {cin}->{cout} not divisible by groups {}",
                spec.groups
            ));
        }
        if cin / spec.groups != cin_g {
            return Err(shape_err!(
                "conv weight expects {} input channels per group, input has {}",
                cin_g,
                cin / spec.groups
            ));
        }
        if spec.dilation.0 == 0 || spec.dilation.1 == 0 {
            return Err(shape_err!("dilation must be >= 1"));
        }
        let oh = spec
            .out_dim(h, kh, 0)
            .ok_or_else(|| shape_err!("kernel {kh} does not fit height {h}"))?;
        let ow = spec
            .out_dim(wd, kw, 1)
            .ok_or_else(|| shape_err!("kernel {kw} does not fit width {wd}"))?;
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            oh,
            ow,
            spec,
        };
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &geom);
        let value = Tensor::new(&[cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, geom }, &[x, w]))
    }

    /// `y = x W^T + b` applied along the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (m, n) = match self.shape(w) {
            &[m, n] => (m, n),
            s => return Err(shape_err!("linear weight must be rank 2, got {:?}", s)),
        };
        if *xs.last().unwrap() != n {
            return Err(shape_err!("linear expects last dim {n}, input is {:?}", xs));
        }
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(shape_err!(
                    "linear bias must be [{m}], got {:?}",
                    self.shape(b)
                ));
            }
        }
        let rows = self.value(x).len() / n;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![F::zero(); rows * m];
        for r in 0..rows {
            let xr = &xd[r * n..(r + 1) * n];
            for j in 0..m {
                let wr = &wd[j * n..(j + 1) * n];
                out[r * m + j] = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for r in 0..rows {
                for j in 0..m {
                    out[r * m + j] += bd[j];
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let value = Tensor::new(&shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(
            value,
            Op::Linear {
                x,
                w,
                b,
                rows,
                n,
                m,
            },
            &parents,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mask = match self.replayed(n) {
            Some(Decision::Relu(m)) => m,
            _ => self
                .value(x)
                .data()
                .iter()
                .map(|&v| v > F::zero())
                .collect(),
        };
        let mut value = self.value(x).clone();
        for (v, &keep) in value.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *v = F::zero();
            }
        }
        self.push(value, Op::Relu { x, mask }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// Elementwise product with broadcasting over size-1 dims (equal rank).
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b))?;
        let out = broadcast_binary(self.value(a), self.value(b), &shape, |x, y| x * y);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "add needs equal shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let value = self.value(x).map(|v| v * s);
        self.push(value, Op::Scale(x, s), &[x])
    }

    /// Concatenates rank-3 maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let (_, h, w) = self.value(first).dims3()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).dims3()?;
            if (ph, pw) != (h, w) {
                return Err(shape_err!(
                    "concat spatial mismatch {:?} vs {:?}",
                    (h, w),
                    (ph, pw)
                ));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(&[c_total, h, w], data)?;
        Ok(self.push(value, Op::Concat0(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` of a rank-3 map.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if len == 0 || start + len > c {
            return Err(shape_err!("channel slice {start}+{len} out of {c}"));
        }
        let plane = h * w;
        let data = self.value(x).data()[start * plane..(start + len) * plane].to_vec();
        let value = Tensor::new(&[len, h, w], data)?;
        Ok(self.push(value, Op::Narrow0 { x, start }, &[x]))
    }

    /// Mean over the channel axis, keeping it as size 1: `[C,H,W] -> [1,H,W]`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let xd = self.value(x).data();
        let inv = F::one() / F::from_usize(c).unwrap();
        let mut out = vec![F::zero(); plane];
        for ch in 0..c {
            for (o, &v) in out.iter_mut().zip(&xd[ch * plane..(ch + 1) * plane]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::new(&[1, h, w], out)?;
        Ok(self.push(value, Op::Mean0(x), &[x]))
    }

    /// `[C,H,W] -> [C]`, the mean of every channel plane.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let inv = F::one() / F::from_usize(plane).unwrap();
        let xd = self.value(x).data();
        let out = (0..c)
            .map(|ch| xd[ch * plane..(ch + 1) * plane].iter().copied().sum::<F>() * inv)
            .collect();
        let value = Tensor::new(&[c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn adaptive_avg_pool(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(shape_err!(
                "adaptive pool target {out_h}x{out_w} must be within {h}x{w}"
            ));
        }
        let out = kernels::adaptive_avg_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let value = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// 2x2/stride-2 max pool, floor semantics.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h < 2 || w < 2 {
            return Err(shape_err!("max pool needs at least 2x2, got {h}x{w}"));
        }
        let (out, idx) = match self.replayed(c * (h / 2) * (w / 2)) {
            Some(Decision::MaxPool(idx)) => {
                let xs = self.value(x).data();
                (idx.iter().map(|&i| xs[i]).collect(), idx)
            }
            _ => kernels::max_pool2_forward(self.value(x).data(), c, h, w),
        };
        let value = Tensor::new(&[c, h / 2, w / 2], out)?;
        Ok(self.push(value, Op::MaxPool2 { x, idx }, &[x]))
    }

    /// Bilinear resize with half-pixel centres (align-corners = false).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err!("resize target must be positive"));
        }
        let out = kernels::bilinear_forward(self.value(x).data(), c, h, w, out_h, out_w);
        let value = Tensor::new(&[c, out_h, out_w], out)?;
        Ok(self.push(value, Op::Bilinear(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Transposes a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            &[r, c] => (r, c),
            s => return Err(shape_err!("transpose needs rank 2, got {:?}", s)),
        };
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                out.push(xd[i * c + j]);
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        Ok(self.push(value, Op::Transpose2(x), &[x]))
    }

    /// Inverted dropout. `rng == None` (evaluation) is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Var {
        let Some(rng) = rng.filter(|_| p > 0.0) else {
            return x;
        };
        let keep = lit::<F>(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|_| {
                if rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mut value = self.value(x).clone();
        for (v, &m) in value.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.push(value, Op::Dropout { x, mask }, &[x])
    }

    /// Softmax cross-entropy of a logit vector against a class index.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let k = match self.shape(logits) {
            &[k] => k,
            s => return Err(shape_err!("logits must be rank 1, got {:?}", s)),
        };
        if label >= k {
            return Err(PcqError::InvalidInput(format!(
                "label {label} outside [0, {k})"
            )));
        }
        let probs = softmax(self.value(logits).data());
        let loss = -probs[label].ln();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                label,
                probs,
            },
            &[logits],
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    // ----- backward -----

    /// Back-propagates from `loss`, which must hold a single element.
    pub fn backward(self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            ));
        }
        let Graph { nodes, .. } = self;
        let mut grads: Vec<Option<Tensor<F>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), F::one()));
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |v: Var, t: Tensor<F>| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(e) => e.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Input => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                Op::Conv2d { x, w, geom } => {
                    let (gx, gw) =
                        kernels::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), geom);
                    acc(*x, Tensor::new(val(*x).shape(), gx)?);
                    acc(*w, Tensor::new(val(*w).shape(), gw)?);
                }
                Op::Linear {
                    x,
                    w,
                    b,
                    rows,
                    n,
                    m,
                } => {
                    let (rows, n, m) = (*rows, *n, *m);
                    let gd = g.data();
                    let xd = val(*x).data();
                    let wd = val(*w).data();
                    let mut gx = vec![F::zero(); rows * n];
                    let mut gw = vec![F::zero(); m * n];
                    for r in 0..rows {
                        let xr = &xd[r * n..(r + 1) * n];
                        let gxr = &mut gx[r * n..(r + 1) * n];
                        for j in 0..m {
                            let d = gd[r * m + j];
                            let wr = &wd[j * n..(j + 1) * n];
                            let gwr = &mut gw[j * n..(j + 1) * n];
                            for k in 0..n {
                                gxr[k] += d * wr[k];
                                gwr[k] += d * xr[k];
                            }
                        }
                    }
                    acc(*x, Tensor::new(val(*x).shape(), gx)?);
                    acc(*w, Tensor::new(&[m, n], gw)?);
                    if let Some(b) = b {
                        let mut gb = vec![F::zero(); m];
                        for r in 0..rows {
                            for j in 0..m {
                                gb[j] += gd[r * m + j];
                            }
                        }
                        acc(*b, Tensor::new(&[m], gb)?);
                    }
                }
                Op::Relu { x, mask } => {
                    let mut gx = g;
                    for (d, &keep) in gx.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *d = F::zero();
                        }
                    }
                    acc(*x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (d, &s) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *d *= s * (F::one() - s);
                    }
                    acc(*x, gx);
                }
                Op::Mul(a, b) => {
                    let shape = node.value.shape();
                    let ga = broadcast_binary(&g, val(*b), shape, |d, y| d * y);
                    let gb = broadcast_binary(&g, val(*a), shape, |d, y| d * y);
                    acc(*a, reduce_to(&ga, shape, val(*a).shape())?);
                    acc(*b, reduce_to(&gb, shape, val(*b).shape())?);
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(*x, g.map(|d| d * s));
                }
                Op::Concat0(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        let t = Tensor::new(val(p).shape(), g.data()[off..off + n].to_vec())?;
                        off += n;
                        acc(p, t);
                    }
                }
                Op::Narrow0 { x, start } => {
                    let xs = val(*x).shape();
                    let plane = xs[1] * xs[2];
                    let mut gx = vec![F::zero(); val(*x).len()];
                    gx[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                    acc(*x, Tensor::new(xs, gx)?);
                }
                Op::Mean0(x) => {
                    let xs = val(*x).shape();
                    let inv = F::one() / F::from_usize(xs[0]).unwrap();
                    let scaled: Vec<F> = g.data().iter().map(|&d| d * inv).collect();
                    let gx = scaled.repeat(xs[0]);
                    acc(*x, Tensor::new(xs, gx)?);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = val(*x).shape();
                    let plane = xs[1] * xs[2];
                    let inv = F::one() / F::from_usize(plane).unwrap();
                    let mut gx = Vec::with_capacity(val(*x).len());
                    for &d in g.data() {
                        gx.extend(std::iter::repeat_n(d * inv, plane));
                    }
                    acc(*x, Tensor::new(xs, gx)?);
                }
                Op::AdaptiveAvgPool(x) => {
                    let (c, h, w) = val(*x).dims3()?;
                    let (_, oh, ow) = node.value.dims3()?;
                    let gx = kernels::adaptive_avg_backward(g.data(), c, h, w, oh, ow);
                    acc(*x, Tensor::new(&[c, h, w], gx)?);
                }
                Op::MaxPool2 { x, idx } => {
                    let mut gx = vec![F::zero(); val(*x).len()];
                    for (&j, &d) in idx.iter().zip(g.data()) {
                        gx[j] += d;
                    }
                    acc(*x, Tensor::new(val(*x).shape(), gx)?);
                }
                Op::Bilinear(x) => {
                    let (c, h, w) = val(*x).dims3()?;
                    let (_, oh, ow) = node.value.dims3()?;
                    let gx = kernels::bilinear_backward(g.data(), c, h, w, oh, ow);
                    acc(*x, Tensor::new(&[c, h, w], gx)?);
                }
                Op::Reshape(x) => {
                    acc(*x, g.reshape(val(*x).shape())?);
                }
                Op::Transpose2(x) => {
                    let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                    // g is [c, r]
                    let gd = g.data();
                    let mut gx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx.push(gd[j * r + i]);
                        }
                    }
                    acc(*x, Tensor::new(&[r, c], gx)?);
                }
                Op::Dropout { x, mask } => {
                    let mut gx = g;
                    for (d, &m) in gx.data_mut().iter_mut().zip(mask) {
                        *d *= m;
                    }
                    acc(*x, gx);
                }
                Op::SoftmaxCe {
                    logits,
                    label,
                    probs,
                } => {
                    let d = g.data()[0];
                    let gl: Vec<F> = probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| {
                            let t = if k == *label { F::one() } else { F::zero() };
                            (p - t) * d
                        })
                        .collect();
                    acc(*logits, Tensor::new(val(*logits).shape(), gl)?);
                }
                Op::Sum(x) => {
                    let d = g.data()[0];
                    acc(*x, Tensor::full(val(*x).shape(), d));
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

#[inline]
fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<F: Scalar>(logits: &[F]) -> Vec<F> {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let exps: Vec<F> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: F = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err!(
            "broadcast needs equal rank, got {:?} and {:?}",
            a,
            b
        ));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    out
}

/// Row-major strides of `shape`, with zero stride on broadcast (size-1) axes.
fn broadcast_strides(shape: &[usize], full: &[usize]) -> [usize; 4] {
    let s = pad4(shape);
    let f = pad4(full);
    let mut strides = [0; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        strides[d] = if s[d] == 1 && f[d] != 1 { 0 } else { acc };
        acc *= s[d];
    }
    strides
}

fn broadcast_binary<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    full: &[usize],
    f: impl Fn(F, F) -> F,
) -> Vec<F> {
    let dims = pad4(full);
    let sa = broadcast_strides(a.shape(), full);
    let sb = broadcast_strides(b.shape(), full);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(full.iter().product());
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..dims[3] {
                    out.push(f(ad[ba + i3 * sa[3]], bd[bb + i3 * sb[3]]));
                }
            }
        }
    }
    out
}

/// Sums a full-shape gradient back down to a broadcast operand's shape.
fn reduce_to<F: Scalar>(g: &[F], full: &[usize], target: &[usize]) -> Result<Tensor<F>> {
    if full == target {
        return Tensor::new(target, g.to_vec());
    }
    let dims = pad4(full);
    let st = broadcast_strides(target, full);
    let mut out = vec![F::zero(); target.iter().product()];
    let mut k = 0;
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let base = i0 * st[0] + i1 * st[1] + i2 * st[2];
                for i3 in 0..dims[3] {
                    out[base + i3 * st[3]] += g[k];
                    k += 1;
                }
            }
        }
    }
    Tensor::new(target, out)
}
