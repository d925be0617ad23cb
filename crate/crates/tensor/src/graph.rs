//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every op evaluates eagerly, stores its
//! output and records enough of its inputs to run the chain rule later. Node
//! order is therefore always a valid topological order, and
//! [`Graph::backward`] walks the tape once in reverse, accumulating into each
//! input in a fixed order so repeated runs are bit-reproducible.

use std::collections::HashMap;
use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::kernels::{add_assign, gemm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_shape, numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Abs,
    Square,
    Recip,
    /// Wraps angles into `(-π, π]`; the derivative is one almost everywhere.
    WrapAngle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Debug)]
enum Bcast {
    Same,
    /// `b` repeats every `len` elements of `a`.
    Suffix { len: usize },
    /// each element of `b` covers `inner` consecutive elements of `a`.
    Prefix { inner: usize },
    General { a_shape: Vec<usize>, b_strides: Vec<usize> },
}

impl Bcast {
    fn resolve(a: &[usize], b: &[usize]) -> Option<Bcast> {
        if a == b {
            return Some(Bcast::Same);
        }
        if b.len() > a.len() {
            return None;
        }
        let mut aligned = vec![1; a.len() - b.len()];
        aligned.extend_from_slice(b);
        let equal: Vec<bool> = a.iter().zip(&aligned).map(|(x, y)| x == y).collect();
        if a.iter().zip(&aligned).any(|(x, y)| x != y && *y != 1) {
            return None;
        }
        // dims where a has extent 1 match either way; treat them as equal
        let split = (0..=a.len()).find(|&s| equal[s..].iter().all(|&e| e));
        if let Some(s) = split {
            if aligned[..s].iter().all(|&d| d == 1) {
                return Some(Bcast::Suffix {
                    len: numel(&a[s..]),
                });
            }
        }
        let split = (0..=a.len()).find(|&s| aligned[s..].iter().all(|&d| d == 1));
        if let Some(s) = split {
            if equal[..s].iter().all(|&e| e) {
                return Some(Bcast::Prefix {
                    inner: numel(&a[s..]),
                });
            }
        }
        let mut b_strides = vec![0; a.len()];
        let mut stride = 1;
        for d in (0..a.len()).rev() {
            if aligned[d] != 1 {
                b_strides[d] = stride;
            }
            stride *= aligned[d];
        }
        Some(Bcast::General {
            a_shape: a.to_vec(),
            b_strides,
        })
    }

    fn map(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix { len } => i % len,
            Bcast::Prefix { inner } => i / inner,
            Bcast::General { a_shape, b_strides } => {
                let mut rem = i;
                let mut j = 0;
                for d in (0..a_shape.len()).rev() {
                    j += (rem % a_shape[d]) * b_strides[d];
                    rem /= a_shape[d];
                }
                j
            }
        }
    }
}

enum Op {
    Leaf,
    Param,
    Unary(Var, Unary),
    Scale(Var, f64),
    AddScalar(Var),
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
        bcast: Bcast,
    },
    MatMul {
        a: Var,
        b: Var,
        rows: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SumAxis {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    SumAll(Var),
    Concat {
        xs: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        width: usize,
        start: usize,
        len: usize,
    },
    IndexSelect {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
        idx: Vec<usize>,
    },
    Pad {
        x: Var,
        outer: usize,
        width: usize,
        before: usize,
        out_width: usize,
    },
    Expand {
        x: Var,
        count: usize,
    },
    SelectCols {
        x: Var,
        cols: usize,
        k: usize,
        idx: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
        classes: usize,
    },
    Im2Col {
        x: Var,
        geom: ConvGeom,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Splits `shape` around `axis` into `(outer, extent, inner)`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok((
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    ))
}

pub fn wrap_angle(x: f64) -> f64 {
    let r = x.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Append-only autodiff tape.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }
}

impl<'p> Graph<'p> {
    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a parameter on the tape, once per graph.
    ///
    /// # Panics
    /// When the graph was built without a parameter store.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .params
            .expect("Graph::param called on a graph without a parameter store");
        let value = store.get(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let src = &self.nodes[x.0].value;
        let f: fn(f64) -> f64 = match kind {
            Unary::Neg => |v| -v,
            Unary::Relu => |v| if v < 0.0 { 0.0 } else { v },
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
            Unary::Square => |v| v * v,
            Unary::Recip => |v| 1.0 / v,
            Unary::WrapAngle => wrap_angle,
        };
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Unary(x, kind), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Recip)
    }
    pub fn wrap_angle(&mut self, x: Var) -> Var {
        self.unary(x, Unary::WrapAngle)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|v| v * c).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|v| v + c).collect();
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    /// Elementwise `a ∘ b`, where `b` broadcasts into `a`'s shape
    /// (right-aligned; each extent of `b` equals `a`'s or is 1).
    pub fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let bcast = Bcast::resolve(&a_shape, &b_shape).ok_or(TensorError::Dimension {
            op: "broadcast",
            lhs: a_shape.clone(),
            rhs: b_shape,
        })?;
        let ad = self.data(a);
        let bd = self.data(b);
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match &bcast {
            Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Suffix { len } => ad
                .chunks(*len)
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect(),
            Bcast::Prefix { inner } => ad
                .chunks(*inner)
                .zip(bd)
                .flat_map(|(chunk, &y)| chunk.iter().map(move |&x| f(x, y)))
                .collect(),
            general => ad
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[general.map(i)]))
                .collect(),
        };
        let value = Tensor::from_parts(a_shape, data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary { a, b, kind, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Matrix product.
    ///
    /// * `a: [.., m, k]`, `b: [k, n]` applies `b` to every row of `a`.
    /// * `a: [.., m, k]`, `b: [.., k, n]` with equal leading extents is a
    ///   batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let a_shape = self.shape(a).to_vec();
        let b_shape = self.shape(b).to_vec();
        let mismatch = || TensorError::Dimension {
            op: "matmul",
            lhs: a_shape.clone(),
            rhs: b_shape.clone(),
        };
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(mismatch());
        }
        let k = a_shape[a_shape.len() - 1];
        let m = a_shape[a_shape.len() - 2];
        if b_shape.len() == 2 {
            let (bk, n) = (b_shape[0], b_shape[1]);
            if bk != k {
                return Err(mismatch());
            }
            let rows = numel(&a_shape[..a_shape.len() - 1]);
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, self.data(a), false, self.data(b), false, &mut out);
            let mut shape = a_shape.clone();
            *shape.last_mut().unwrap() = n;
            let rg = self.rg(a) || self.rg(b);
            return Ok(self.push(
                Tensor::from_parts(shape, out),
                Op::MatMul { a, b, rows, k, n },
                rg,
            ));
        }
        let lead = &a_shape[..a_shape.len() - 2];
        if b_shape.len() != a_shape.len()
            || &b_shape[..b_shape.len() - 2] != lead
            || b_shape[b_shape.len() - 2] != k
        {
            return Err(mismatch());
        }
        let n = b_shape[b_shape.len() - 1];
        let batch = numel(lead);
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for t in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[t * m * k..(t + 1) * m * k],
                    false,
                    &bd[t * k * n..(t + 1) * k * n],
                    false,
                    &mut out[t * m * n..(t + 1) * m * n],
                );
            }
        }
        let mut shape = a_shape.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", shape.len()),
            });
        }
        let data = permute_data(self.data(x), &shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let src = self.value(x);
        if numel(shape) != src.len() {
            return Err(TensorError::Dimension {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), src.data().to_vec());
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let cols = *src.shape().last().unwrap();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::from_parts(src.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(value, Op::Softmax { x, cols }, rg)
    }

    /// Normalizes each row of the last axis to zero mean and unit variance
    /// (`eps` added to the variance), then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap();
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(TensorError::Dimension {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xd = self.data(x);
        let gd = self.data(gain);
        let bd = self.data(bias);
        let rows = xd.len() / cols;
        let mut xhat = vec![0.0; xd.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gd[c] + bd[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("sum_axis", &shape, axis)?;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_assign(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::SumAxis { x, outer, n, inner },
            rg,
        ))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self.shape(x).get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            rank: self.shape(x).len(),
        })?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut widths = Vec::with_capacity(xs.len());
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[axis] * inner);
            total += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                outer,
                widths,
            },
            rg,
        ))
    }

    /// Stacks equally shaped tensors along a new axis at `axis`.
    pub fn stack(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let mut expanded = Vec::with_capacity(xs.len());
        for &v in xs {
            let mut s = self.shape(v).to_vec();
            if axis > s.len() {
                return Err(TensorError::Axis {
                    op: "stack",
                    axis,
                    rank: s.len(),
                });
            }
            s.insert(axis, 1);
            expanded.push(self.reshape(v, &s)?);
        }
        self.concat(&expanded, axis)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("slice", &shape, axis)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside extent {n}", start + len),
            });
        }
        let xd = self.data(x);
        let width = n * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * width + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Slice {
                x,
                outer,
                width,
                start: start * inner,
                len: len * inner,
            },
            rg,
        ))
    }

    /// Gathers entries of `axis` in the order given by `idx` (repeats allowed).
    pub fn index_select(&mut self, x: Var, axis: usize, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("index_select", &shape, axis)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("indices must be in 0..{n} and non-empty"),
            });
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx {
                let base = (o * n + i) * inner;
                out.extend_from_slice(&xd[base..base + inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::IndexSelect {
                x,
                outer,
                n,
                inner,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Zero-pads `axis` with `before` and `after` entries.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis("pad", &shape, axis)?;
        let width = n * inner;
        let out_width = (n + before + after) * inner;
        let xd = self.data(x);
        let mut out = vec![0.0; outer * out_width];
        for o in 0..outer {
            let dst = o * out_width + before * inner;
            out[dst..dst + width].copy_from_slice(&xd[o * width..(o + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = n + before + after;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Pad {
                x,
                outer,
                width,
                before: before * inner,
                out_width,
            },
            rg,
        ))
    }

    /// Repeats `x` along a new leading axis of extent `count`.
    pub fn expand(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(TensorError::InvalidShape(vec![0]));
        }
        let src = self.value(x);
        let mut shape = vec![count];
        shape.extend_from_slice(src.shape());
        let data = src.data().repeat(count);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Expand { x, count }, rg))
    }

    /// For `x: [rows, cols]`, picks `k` columns per row: `idx[r * k + j]`.
    pub fn select_cols(&mut self, x: Var, idx: &[usize], k: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || k == 0 || idx.len() != shape[0] * k || idx.iter().any(|&c| c >= shape[1]) {
            return Err(TensorError::Invalid {
                op: "select_cols",
                msg: format!("{} indices for shape {shape:?} and k={k}", idx.len()),
            });
        }
        let cols = shape[1];
        let xd = self.data(x);
        let out = idx
            .iter()
            .enumerate()
            .map(|(i, &c)| xd[(i / k) * cols + c])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![shape[0], k], out),
            Op::SelectCols {
                x,
                cols,
                k,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits: [rows, classes]` against class targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || targets.len() != shape[0] || targets.iter().any(|&t| t >= shape[1]) {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} targets for logits {shape:?}", targets.len()),
            });
        }
        let classes = shape[1];
        let mut probs = self.data(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(classes).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    /// Unfolds square `kernel` patches of a channels-last image batch
    /// `[b, h, w, c]` into `[b, ho, wo, kernel·kernel·c]` with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || kernel == 0 || stride == 0 || shape[1] + 2 * pad < kernel || shape[2] + 2 * pad < kernel {
            return Err(TensorError::Invalid {
                op: "im2col",
                msg: format!("cannot unfold {shape:?} with kernel {kernel}, stride {stride}, pad {pad}"),
            });
        }
        let (batch, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let geom = ConvGeom {
            batch,
            h,
            w,
            c,
            ho,
            wo,
            kernel,
            stride,
            pad,
        };
        let xd = self.data(x);
        let patch = kernel * kernel * c;
        let mut out = vec![0.0; batch * ho * wo * patch];
        for_each_tap(&geom, |dst, src| out[dst..dst + c].copy_from_slice(&xd[src..src + c]));
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![batch, ho, wo, patch], out),
            Op::Im2Col { x, geom },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(TensorError::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let keep = matches!(node.op, Op::Leaf | Op::Param);
            let Some(gout) = (if keep { grads[i].clone() } else { grads[i].take() }) else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
        }
        Ok(Gradients {
            grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Unary(x, kind) => {
                let xd = self.data(*x);
                let kind = *kind;
                acc(*x, &mut |g| {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Relu => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Exp => y[i],
                            Unary::Log => 1.0 / xd[i],
                            Unary::Softplus => sigmoid(xd[i]),
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Abs => {
                                if xd[i] > 0.0 {
                                    1.0
                                } else if xd[i] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Square => 2.0 * xd[i],
                            Unary::Recip => -y[i] * y[i],
                            Unary::WrapAngle => 1.0,
                        };
                        g[i] += gout[i] * d;
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |g| {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += go * c;
                }
            }),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, &mut |g| add_assign(g, gout)),
            Op::Binary { a, b, kind, bcast } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, &mut |g| match kind {
                    Binary::Add | Binary::Sub => add_assign(g, gout),
                    Binary::Mul => {
                        for i in 0..g.len() {
                            g[i] += gout[i] * bd[bcast.map(i)];
                        }
                    }
                    Binary::Div => {
                        for i in 0..g.len() {
                            g[i] += gout[i] / bd[bcast.map(i)];
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..gout.len() {
                        let j = bcast.map(i);
                        g[j] += match kind {
                            Binary::Add => gout[i],
                            Binary::Sub => -gout[i],
                            Binary::Mul => gout[i] * ad[i],
                            Binary::Div => -gout[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                });
            }
            Op::MatMul { a, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, &mut |g| {
                    let mut tmp = vec![0.0; rows * k];
                    gemm(rows, n, k, gout, false, bd, true, &mut tmp);
                    add_assign(g, &tmp);
                });
                acc(*b, &mut |g| {
                    let mut tmp = vec![0.0; k * n];
                    gemm(k, rows, n, ad, true, gout, false, &mut tmp);
                    add_assign(g, &tmp);
                });
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc(*a, &mut |g| {
                    let mut tmp = vec![0.0; m * k];
                    for t in 0..batch {
                        gemm(m, n, k, &gout[t * m * n..(t + 1) * m * n], false, &bd[t * k * n..(t + 1) * k * n], true, &mut tmp);
                        add_assign(&mut g[t * m * k..(t + 1) * m * k], &tmp);
                    }
                });
                acc(*b, &mut |g| {
                    let mut tmp = vec![0.0; k * n];
                    for t in 0..batch {
                        gemm(k, m, n, &ad[t * m * k..(t + 1) * m * k], true, &gout[t * m * n..(t + 1) * m * n], false, &mut tmp);
                        add_assign(&mut g[t * k * n..(t + 1) * k * n], &tmp);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute_data(gout, node.value.shape(), &inv);
                acc(*x, &mut |g| add_assign(g, &back));
            }
            Op::Softmax { x, cols } => acc(*x, &mut |g| {
                for ((gr, yr), gor) in g.chunks_mut(*cols).zip(y.chunks(*cols)).zip(gout.chunks(*cols)) {
                    let dot: f64 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                    for c in 0..*cols {
                        gr[c] += yr[c] * (gor[c] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).len();
                let gd = self.data(*gain);
                acc(*x, &mut |g| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let base = r * cols;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..cols {
                            let gh = gout[base + c] * gd[c];
                            m1 += gh;
                            m2 += gh * xhat[base + c];
                        }
                        m1 /= cols as f64;
                        m2 /= cols as f64;
                        for c in 0..cols {
                            let gh = gout[base + c] * gd[c];
                            g[base + c] += rs * (gh - m1 - xhat[base + c] * m2);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (i, (go, h)) in gout.iter().zip(xhat).enumerate() {
                        g[i % cols] += go * h;
                    }
                });
                acc(*bias, &mut |g| {
                    for (i, go) in gout.iter().enumerate() {
                        g[i % cols] += go;
                    }
                });
            }
            Op::SumAxis { x, outer, n, inner } => acc(*x, &mut |g| {
                for o in 0..*outer {
                    let src = &gout[o * inner..(o + 1) * inner];
                    for j in 0..*n {
                        let base = (o * n + j) * inner;
                        add_assign(&mut g[base..base + inner], src);
                    }
                }
            }),
            Op::SumAll(x) => acc(*x, &mut |g| {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }),
            Op::Concat { xs, outer, widths } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    acc(v, &mut |g| {
                        for o in 0..*outer {
                            let src = &gout[o * row + offset..o * row + offset + w];
                            add_assign(&mut g[o * w..(o + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                width,
                start,
                len,
            } => acc(*x, &mut |g| {
                for o in 0..*outer {
                    let dst = o * width + start;
                    add_assign(&mut g[dst..dst + len], &gout[o * len..(o + 1) * len]);
                }
            }),
            Op::IndexSelect {
                x,
                outer,
                n,
                inner,
                idx,
            } => acc(*x, &mut |g| {
                let m = idx.len();
                for o in 0..*outer {
                    for (j, &i) in idx.iter().enumerate() {
                        let src = (o * m + j) * inner;
                        let dst = (o * n + i) * inner;
                        add_assign(&mut g[dst..dst + inner], &gout[src..src + inner]);
                    }
                }
            }),
            Op::Pad {
                x,
                outer,
                width,
                before,
                out_width,
            } => acc(*x, &mut |g| {
                for o in 0..*outer {
                    let src = o * out_width + before;
                    add_assign(&mut g[o * width..(o + 1) * width], &gout[src..src + width]);
                }
            }),
            Op::Expand { x, count } => acc(*x, &mut |g| {
                let len = g.len();
                for t in 0..*count {
                    add_assign(g, &gout[t * len..(t + 1) * len]);
                }
            }),
            Op::SelectCols { x, cols, k, idx } => acc(*x, &mut |g| {
                for (i, &c) in idx.iter().enumerate() {
                    g[(i / k) * cols + c] += gout[i];
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
            } => acc(*logits, &mut |g| {
                let scale = gout[0] / targets.len() as f64;
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..*classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        g[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }),
            Op::Im2Col { x, geom } => {
                let c = geom.c;
                acc(*x, &mut |g| {
                    for_each_tap(geom, |dst, src| add_assign(&mut g[src..src + c], &gout[dst..dst + c]));
                });
            }
        }
    }
}

/// Visits every in-bounds `(column offset, image offset)` pair of an im2col
/// unfolding; each pair covers `c` contiguous channels.
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize)) {
    let ConvGeom {
        batch,
        h,
        w,
        c,
        ho,
        wo,
        kernel,
        stride,
        pad,
    } = *geom;
    let patch = kernel * kernel * c;
    for b in 0..batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let col_base = ((b * ho + oy) * wo + ox) * patch;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = col_base + (ky * kernel + kx) * c;
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        f(dst, src);
                    }
                }
            }
        }
    }
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; rank];
    for _ in 0..src.len() {
        let offset: usize = counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum();
        out.push(src[offset]);
        for d in (0..rank).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    out
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    param_vars: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient for a leaf created with [`Graph::input`] or [`Graph::param`].
    /// `None` means the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.param_vars.get(&id).and_then(|&v| self.wrt(v))
    }

    /// Parameter gradient, with zeros for parameters the loss ignores.
    pub fn param_or_zero(&self, id: ParamId, len: usize) -> Vec<f64> {
        self.param(id).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}
