//! Parameterized building blocks composed from [`Graph`] ops.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Additive logit offset for disallowed attention pairs.
pub const MASK_BIAS: f64 = -1e9;

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("uniform: shape must have positive extents")
}

fn zeros(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape.to_vec()).expect("zeros: shape must have positive extents")
}

/// Affine map `x · w + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let w = uniform(rng, &[d_in, d_out], bound);
        Self::with_weight(store, name, w)
    }

    /// All-zero weights and bias, for residual heads that start as identity.
    pub fn zeroed(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_weight(store, name, zeros(&[d_in, d_out]))
    }

    fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let weight = store.add(format!("{name}.weight"), ParamKind::Weight, w);
        let bias = store.add(format!("{name}.bias"), ParamKind::Bias, zeros(&[d_out]));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Stack of [`Linear`] layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims` lists every width, input first: `[d_in, hidden.., d_out]`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least an input and an output width");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, |l| l.d_out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.add(
            format!("{name}.gain"),
            ParamKind::Norm,
            Tensor::full(vec![d], 1.0).expect("layer norm width must be positive"),
        );
        let bias = store.add(format!("{name}.bias"), ParamKind::Norm, zeros(&[d]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

/// Boolean attention mask of shape `[batch, lq, lk]`; `true` allows a pair.
/// A mask with `batch == 1` applies to every batch entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    batch: usize,
    lq: usize,
    lk: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        if batch * lq * lk == 0 || allowed.len() != batch * lq * lk {
            return Err(TensorError::Length {
                shape: vec![batch, lq, lk],
                expected: batch * lq * lk,
                actual: allowed.len(),
            });
        }
        Ok(Self {
            batch,
            lq,
            lk,
            allowed,
        })
    }

    /// Each query of batch entry `b` sees keys `0..valid[b]`.
    pub fn key_prefix(lq: usize, lk: usize, valid: &[usize]) -> Result<Self> {
        let allowed = valid
            .iter()
            .flat_map(|&v| (0..lq).flat_map(move |_| (0..lk).map(move |j| j < v)))
            .collect();
        Self::new(valid.len(), lq, lk, allowed)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    pub fn allows_all(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Additive logit bias `[batch·heads, lq, lk]`, repeating each batch
    /// entry's mask for every head.
    fn bias(&self, batch: usize, heads: usize) -> Result<Tensor> {
        if self.batch != 1 && self.batch != batch {
            return Err(TensorError::Dimension {
                op: "attention mask",
                lhs: vec![batch, self.lq, self.lk],
                rhs: vec![self.batch, self.lq, self.lk],
            });
        }
        let plane = self.lq * self.lk;
        for (r, row) in self.allowed.chunks(self.lk).enumerate() {
            if !row.iter().any(|&a| a) {
                return Err(TensorError::FullyMasked { row: r });
            }
        }
        let mut data = Vec::with_capacity(batch * heads * plane);
        for b in 0..batch {
            let src = if self.batch == 1 { 0 } else { b };
            let block = &self.allowed[src * plane..(src + 1) * plane];
            for _ in 0..heads {
                data.extend(block.iter().map(|&a| if a { 0.0 } else { MASK_BIAS }));
            }
        }
        Tensor::new(vec![batch * heads, self.lq, self.lk], data)
    }
}

/// `softmax(q·kᵀ/√d + mask)·v` for `q: [lq, d]` or `[bt, lq, d]` and matching
/// `k`, `v`. Masks are ignored when they allow every pair.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&AttnMask>) -> Result<Var> {
    attention_heads(g, q, k, v, mask, 1)
}

fn attention_heads(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<&AttnMask>, heads: usize) -> Result<Var> {
    let qs = g.shape(q).to_vec();
    let ks = g.shape(k).to_vec();
    let vs = g.shape(v).to_vec();
    let d = *qs.last().unwrap();
    if qs.len() != ks.len()
        || ks.len() != vs.len()
        || !(2..=3).contains(&qs.len())
        || ks.last() != Some(&d)
        || ks[..ks.len() - 1] != vs[..vs.len() - 1]
        || qs[..qs.len() - 2] != ks[..ks.len() - 2]
    {
        return Err(TensorError::Dimension {
            op: "attention",
            lhs: qs,
            rhs: ks,
        });
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d as f64).sqrt());
    if let Some(mask) = mask.filter(|m| !m.allows_all()) {
        let lq = qs[qs.len() - 2];
        let lk = ks[ks.len() - 2];
        if mask.lq != lq || mask.lk != lk {
            return Err(TensorError::Dimension {
                op: "attention mask",
                lhs: vec![lq, lk],
                rhs: vec![mask.lq, mask.lk],
            });
        }
        let bt = if qs.len() == 3 { qs[0] } else { 1 };
        let bias = mask.bias(bt / heads, heads)?;
        let bias = if qs.len() == 2 { bias.reshape(vec![lq, lk])? } else { bias };
        let bias = g.constant(bias);
        logits = g.add(logits, bias)?;
    }
    let weights = g.softmax(logits);
    g.matmul(weights, v)
}

/// Multi-head attention with learned projections over `[b, l, d]` inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub d_model: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && d_model % heads == 0, "d_model {d_model} is not divisible by {heads} heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            heads,
            d_model,
        }
    }

    /// Queries `xq: [b, lq, d]` attend to `xkv: [b, lk, d]`.
    pub fn forward(&self, g: &mut Graph, xq: Var, xkv: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let qs = g.shape(xq).to_vec();
        let ks = g.shape(xkv).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d_model || ks[2] != self.d_model {
            return Err(TensorError::Dimension {
                op: "multi-head attention",
                lhs: qs,
                rhs: ks,
            });
        }
        let (b, lq, lk) = (qs[0], qs[1], ks[1]);
        let q = self.q.forward(g, xq)?;
        let k = self.k.forward(g, xkv)?;
        let v = self.v.forward(g, xkv)?;
        let q = self.split_heads(g, q, b, lq)?;
        let k = self.split_heads(g, k, b, lk)?;
        let v = self.split_heads(g, v, b, lk)?;
        let o = attention_heads(g, q, k, v, mask, self.heads)?;
        let o = self.merge_heads(g, o, b, lq)?;
        self.out.forward(g, o)
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, l: usize) -> Result<Var> {
        let (h, dh) = (self.heads, self.d_model / self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, l, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, l, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, b: usize, l: usize) -> Result<Var> {
        let (h, dh) = (self.heads, self.d_model / self.heads);
        if h == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, h, l, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b, l, self.d_model])
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

/// Gated recurrent unit with reset, update and candidate gates stored
/// side by side in that order:
///
/// ```text
/// r = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(format!("{name}.w_ih"), ParamKind::Weight, uniform(rng, &[d_in, 3 * hidden], bound));
        let w_hh = store.add(format!("{name}.w_hh"), ParamKind::Weight, uniform(rng, &[hidden, 3 * hidden], bound));
        let b_ih = store.add(format!("{name}.b_ih"), ParamKind::Bias, zeros(&[3 * hidden]));
        let b_hh = store.add(format!("{name}.b_hh"), ParamKind::Bias, zeros(&[3 * hidden]));
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            d_in,
            hidden,
        }
    }

    /// One step for `x: [b, d_in]`, `h: [b, hidden]`.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let w_ih = g.param(self.w_ih);
        let w_hh = g.param(self.w_hh);
        let b_ih = g.param(self.b_ih);
        let b_hh = g.param(self.b_hh);
        let gi = g.matmul(x, w_ih)?;
        let gi = g.add(gi, b_ih)?;
        let gh = g.matmul(h, w_hh)?;
        let gh = g.add(gh, b_hh)?;
        let last = g.shape(gi).len() - 1;
        let gi_rz = g.slice(gi, last, 0, 2 * n)?;
        let gh_rz = g.slice(gh, last, 0, 2 * n)?;
        let rz = g.add(gi_rz, gh_rz)?;
        let rz = g.sigmoid(rz);
        let r = g.slice(rz, last, 0, n)?;
        let z = g.slice(rz, last, n, n)?;
        let gi_n = g.slice(gi, last, 2 * n, n)?;
        let gh_n = g.slice(gh, last, 2 * n, n)?;
        let rn = g.mul(r, gh_n)?;
        let cand = g.add(gi_n, rn)?;
        let cand = g.tanh(cand);
        let diff = g.sub(h, cand)?;
        let carry = g.mul(z, diff)?;
        g.add(cand, carry)
    }
}
