//! Reverse-mode differentiation over a recorded tape.
//!
//! Every forward op appends one node; [`Tape::backward`] walks the nodes in
//! reverse and applies the matching backward kernel. The topology of our
//! models is fixed, so there is no graph rewriting of any kind.

use crate::error::{dim_err, Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, k: Var, b: Var, stride: usize },
    Relu(Var),
    Tanh(Var),
    Gap(Var),
    Upsample(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Dot(Var, Var),
    MatVec { m: Var, v: Var },
    Stack(Vec<Var>),
    Softmax(Var),
    WeightedSum { weights: Var, maps: Vec<Var> },
    CrossEntropy { logits: Var, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    // `None` for parameters, whose value lives in the store.
    value: Option<Tensor>,
}

/// A single forward pass over a borrowed [`ParamStore`].
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    input_grads: Option<Vec<Option<Tensor>>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            input_grads: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id),
            _ => node.value.as_ref().expect("non-parameter nodes carry values"),
        }
    }

    /// A constant leaf; its gradient is available after [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Linear { x, w, b }, y))
    }

    pub fn conv3x3(&mut self, x: Var, k: Var, b: Var, stride: usize) -> Result<Var> {
        let y = tensor::conv3x3_forward(self.value(x), self.value(k), stride, self.value(b))?;
        Ok(self.push(Op::Conv { x, k, b, stride }, y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        self.push(Op::Relu(x), y)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), y)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = tensor::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::Gap(x), y))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = tensor::nearest_upsample2x(self.value(x))?;
        Ok(self.push(Op::Upsample(x), y))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let y = tensor::concat_channels(&vals)?;
        Ok(self.push(Op::Concat(parts.to_vec()), y))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(Op::Add(a, b), y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let y = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), y)
    }

    /// Inner product of two equal-length tensors, giving a `[1]` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return dim_err(format!("dot of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        Ok(self.push(Op::Dot(a, b), Tensor::scalar(s)))
    }

    /// `M v` for `M: [rows, cols]`, `v: [cols]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        tm.expect_rank(2, "matvec matrix")?;
        let (rows, cols) = (tm.shape()[0], tm.shape()[1]);
        if tv.len() != cols {
            return dim_err(format!("matvec of {:?} with {:?}", tm.shape(), tv.shape()));
        }
        let y = tm
            .data()
            .chunks(cols)
            .map(|row| row.iter().zip(tv.data()).map(|(a, b)| a * b).sum())
            .collect::<Vec<f64>>();
        debug_assert_eq!(y.len(), rows);
        Ok(self.push(Op::MatVec { m, v }, Tensor::vector(y)))
    }

    /// Stacks `[1]` scalars into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Result<Var> {
        let mut vals = Vec::with_capacity(scalars.len());
        for &s in scalars {
            let t = self.value(s);
            if t.len() != 1 {
                return dim_err(format!("stack expects scalars, got {:?}", t.shape()));
            }
            vals.push(t.data()[0]);
        }
        Ok(self.push(Op::Stack(scalars.to_vec()), Tensor::vector(vals)))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        t.expect_rank(1, "softmax")?;
        let y = tensor::softmax_rows(t)?;
        Ok(self.push(Op::Softmax(x), y))
    }

    /// `Σ_i weights[i] * maps[i]` over equally shaped maps.
    pub fn weighted_sum(&mut self, weights: Var, maps: &[Var]) -> Result<Var> {
        let w = self.value(weights);
        if w.len() != maps.len() || maps.is_empty() {
            return dim_err(format!("{} weights for {} maps", w.len(), maps.len()));
        }
        let w = w.data().to_vec();
        let mut y = Tensor::zeros(self.value(maps[0]).shape());
        for (&wi, &m) in w.iter().zip(maps) {
            y.axpy(wi, self.value(m))?;
        }
        Ok(self.push(
            Op::WeightedSum {
                weights,
                maps: maps.to_vec(),
            },
            y,
        ))
    }

    /// Mean per-cell cross-entropy of `[C, H, W]` logits against `H*W` labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let l = cross_entropy_value(self.value(logits), labels)?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            Tensor::scalar(l),
        ))
    }

    /// Runs the reverse pass from a scalar `loss` node.
    ///
    /// Returns the gradient for every parameter touched by this tape. Input
    /// gradients are kept on the tape and can be read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward called before any forward op".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::State(format!("loss node {} not on this tape", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return dim_err(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut out = Gradients {
            per_param: vec![None; self.params.len()],
        };

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {
                    grads[i] = Some(g);
                }
                Op::Param(id) => match &mut out.per_param[*id] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                },
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = tensor::linear_backward(self.value(*x), self.value(*w), &g);
                    accum(&mut grads, *x, dx)?;
                    accum(&mut grads, *w, dw)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::Conv { x, k, b, stride } => {
                    let (dx, dk, db) = tensor::conv3x3_backward(self.value(*x), self.value(*k), *stride, &g);
                    accum(&mut grads, *x, dx)?;
                    accum(&mut grads, *k, dk)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let mut d = g;
                    for (dv, &v) in d.data_mut().iter_mut().zip(xv.data()) {
                        if v <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accum(&mut grads, *x, d)?;
                }
                Op::Tanh(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let mut d = g;
                    for (dv, &t) in d.data_mut().iter_mut().zip(y.data()) {
                        *dv *= 1.0 - t * t;
                    }
                    accum(&mut grads, *x, d)?;
                }
                Op::Gap(x) => {
                    let (c, h, w) = self.value(*x).chw()?;
                    let inv = 1.0 / (h * w) as f64;
                    let mut d = Vec::with_capacity(c * h * w);
                    for &gc in g.data() {
                        d.extend(std::iter::repeat_n(gc * inv, h * w));
                    }
                    accum(&mut grads, *x, Tensor::new(&[c, h, w], d)?)?;
                }
                Op::Upsample(x) => {
                    let d = tensor::upsample2x_backward(self.value(*x).shape(), &g);
                    accum(&mut grads, *x, d)?;
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[0];
                        let d = tensor::slice_channels(&g, start, start + c)?;
                        accum(&mut grads, p, d)?;
                        start += c;
                    }
                }
                Op::Reshape(x) => {
                    let d = g.reshape(self.value(*x).shape())?;
                    accum(&mut grads, *x, d)?;
                }
                Op::Add(a, b) => {
                    accum(&mut grads, *b, g.clone())?;
                    accum(&mut grads, *a, g)?;
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accum(&mut grads, *x, g.map(|v| v * c))?;
                }
                Op::Dot(a, b) => {
                    let s = g.data()[0];
                    let da = self.value(*b).map(|v| v * s).reshape(self.value(*a).shape())?;
                    let db = self.value(*a).map(|v| v * s).reshape(self.value(*b).shape())?;
                    accum(&mut grads, *a, da)?;
                    accum(&mut grads, *b, db)?;
                }
                Op::MatVec { m, v } => {
                    let (tm, tv) = (self.value(*m), self.value(*v));
                    let cols = tm.shape()[1];
                    let mut dm = vec![0.0; tm.len()];
                    let mut dv = vec![0.0; cols];
                    for (r, &gr) in g.data().iter().enumerate() {
                        let row = &tm.data()[r * cols..(r + 1) * cols];
                        let drow = &mut dm[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            drow[c] = gr * tv.data()[c];
                            dv[c] += gr * row[c];
                        }
                    }
                    let dm = Tensor::new(tm.shape(), dm)?;
                    let dv = Tensor::new(tv.shape(), dv)?;
                    accum(&mut grads, *m, dm)?;
                    accum(&mut grads, *v, dv)?;
                }
                Op::Stack(scalars) => {
                    for (&s, &gv) in scalars.iter().zip(g.data()) {
                        let shape = self.value(s).shape().to_vec();
                        accum(&mut grads, s, Tensor::full(&shape, gv))?;
                    }
                }
                Op::Softmax(x) => {
                    let y = self.nodes[i].value.as_ref().unwrap();
                    let dotp: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    let d = y.data().iter().zip(g.data()).map(|(yv, gv)| yv * (gv - dotp)).collect();
                    accum(&mut grads, *x, Tensor::new(y.shape(), d)?)?;
                }
                Op::WeightedSum { weights, maps } => {
                    let w = self.value(*weights).clone();
                    let mut dw = Vec::with_capacity(maps.len());
                    for (&wi, &m) in w.data().iter().zip(maps) {
                        let mv = self.value(m);
                        dw.push(mv.data().iter().zip(g.data()).map(|(a, b)| a * b).sum());
                        accum(&mut grads, m, g.map(|v| v * wi))?;
                    }
                    accum(&mut grads, *weights, Tensor::new(w.shape(), dw)?)?;
                }
                Op::CrossEntropy { logits, labels } => {
                    let s = g.data()[0];
                    let d = cross_entropy_grad(self.value(*logits), labels, s)?;
                    accum(&mut grads, *logits, d)?;
                }
            }
        }
        self.input_grads = Some(grads);
        Ok(out)
    }

    /// Gradient of the last backward pass with respect to an input node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.input_grads.as_ref()?.get(v.0)?.as_ref()
    }
}

fn accum(grads: &mut [Option<Tensor>], v: Var, d: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&d),
        slot => {
            *slot = Some(d);
            Ok(())
        }
    }
}

fn check_labels(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (c, h, w) = logits.chw()?;
    if labels.len() != h * w {
        return dim_err(format!("{} labels for logits {:?}", labels.len(), logits.shape()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= c) {
        return dim_err(format!("label {bad} out of range for {c} classes"));
    }
    Ok((c, h * w))
}

/// Mean over cells of `-log softmax(logits)[label]`.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (c, hw) = check_labels(logits, labels)?;
    let d = logits.data();
    let mut total = 0.0;
    for (cell, &label) in labels.iter().enumerate() {
        let max = (0..c).map(|k| d[k * hw + cell]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + (0..c).map(|k| (d[k * hw + cell] - max).exp()).sum::<f64>().ln();
        total += lse - d[label * hw + cell];
    }
    Ok(total / hw as f64)
}

fn cross_entropy_grad(logits: &Tensor, labels: &[usize], scale: f64) -> Result<Tensor> {
    let (c, hw) = check_labels(logits, labels)?;
    let d = logits.data();
    let mut out = vec![0.0; d.len()];
    let s = scale / hw as f64;
    let mut probs = vec![0.0; c];
    for (cell, &label) in labels.iter().enumerate() {
        for (k, p) in probs.iter_mut().enumerate() {
            *p = d[k * hw + cell];
        }
        tensor::softmax_in_place(&mut probs);
        for (k, p) in probs.iter().enumerate() {
            let target = if k == label { 1.0 } else { 0.0 };
            out[k * hw + cell] = s * (p - target);
        }
    }
    Tensor::new(logits.shape(), out)
}
