//! Parameterized transformer layers.

use crate::autograd::{BoundParams, Var};
use crate::error::{shape_err, Result};
use crate::nn::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

/// Initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    XavierUniform,
}

impl Init {
    pub fn tensor<E: Element>(self, shape: &[usize], rng: &mut SeededRng) -> Tensor<E> {
        match self {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, E::one()),
            Init::Normal(std) => rng.normal_tensor::<E>(shape).scale(E::from_f64(std)),
            Init::XavierUniform => {
                let fan: usize = match shape {
                    [a, b] => a + b,
                    _ => 2 * shape.iter().product::<usize>(),
                };
                let a = (6.0 / fan as f64).sqrt();
                rng.uniform_tensor(shape, -a, a)
            }
        }
    }
}

/// Registers parameters under a dotted name prefix.
pub struct ParamBuilder<'a, E: Element> {
    store: &'a mut ParamStore<E>,
    rng: &'a mut SeededRng,
    prefix: String,
}

impl<'a, E: Element> ParamBuilder<'a, E> {
    pub fn new(store: &'a mut ParamStore<E>, rng: &'a mut SeededRng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, E>) -> Result<R>) -> Result<R> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut inner = ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut inner)
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let value = init.tensor(shape, self.rng);
        self.store.add(full, value)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[fan_in, fan_out], init)?,
                bias: Some(b.param("bias", &[fan_out], Init::Zeros)?),
                fan_in,
                fan_out,
            })
        })
    }

    pub fn without_bias<E: Element>(
        b: &mut ParamBuilder<'_, E>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                weight: b.param("weight", &[fan_in, fan_out], init)?,
                bias: None,
                fan_in,
                fan_out,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>) -> Result<Var<'g, E>> {
        let y = x.matmul(&p[self.weight])?;
        match self.bias {
            Some(b) => y.add_bias(&p[b]),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, width: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                gamma: b.param("gamma", &[width], Init::Ones)?,
                beta: b.param("beta", &[width], Init::Zeros)?,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>) -> Result<Var<'g, E>> {
        x.layer_norm(Some((&p[self.gamma], &p[self.beta])))
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, width: usize, hidden: usize, out_init: Init) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                fc1: Linear::new(b, "fc1", width, hidden, Init::XavierUniform)?,
                fc2: Linear::new(b, "fc2", hidden, width, out_init)?,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>) -> Result<Var<'g, E>> {
        let h = self.fc1.forward(p, x)?.gelu();
        self.fc2.forward(p, &h)
    }
}

/// Fused-QKV multi-head self-attention with an output projection. The QKV
/// projection has no bias: a key bias cannot change any softmax output.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
    pub width: usize,
}

impl SelfAttention {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, width: usize, heads: usize, out_init: Init) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(shape_err("self_attention", format!("width {width} not divisible by {heads} heads")));
        }
        b.scoped(name, |b| {
            Ok(Self {
                qkv: Linear::without_bias(b, "qkv", width, 3 * width, Init::XavierUniform)?,
                proj: Linear::new(b, "proj", width, width, out_init)?,
                heads,
                width,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>, mask: &AttentionMask) -> Result<Var<'g, E>> {
        let qkv = self.qkv.forward(p, x)?;
        let w = self.width;
        let q = qkv.slice_cols(0, w)?;
        let k = qkv.slice_cols(w, w)?;
        let v = qkv.slice_cols(2 * w, w)?;
        let a = q.attention(&k, &v, mask, self.heads)?;
        self.proj.forward(p, &a)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: SelfAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerBlock {
    pub fn new<E: Element>(
        b: &mut ParamBuilder<'_, E>,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        out_init: Init,
    ) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                ln1: LayerNorm::new(b, "ln1", width)?,
                attn: SelfAttention::new(b, "attn", width, heads, out_init)?,
                ln2: LayerNorm::new(b, "ln2", width)?,
                mlp: Mlp::new(b, "mlp", width, width * mlp_ratio, out_init)?,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>, mask: &AttentionMask) -> Result<Var<'g, E>> {
        let a = self.attn.forward(p, &self.ln1.forward(p, x)?, mask)?;
        let x = x.add(&a)?;
        let m = self.mlp.forward(p, &self.ln2.forward(p, &x)?)?;
        x.add(&m)
    }
}

/// Run `tokens` (`[batch * seq, width]`, `seq = mask.size()`) through a
/// stack of pre-norm blocks. An empty stack is the identity.
pub fn transformer_forward<'g, E: Element>(
    tokens: &Var<'g, E>,
    mask: &AttentionMask,
    params: &BoundParams<'g, E>,
    blocks: &[TransformerBlock],
) -> Result<Var<'g, E>> {
    let (rows, width) = tokens.value().expect_2d("transformer_forward")?;
    if rows % mask.size() != 0 {
        return Err(shape_err(
            "transformer_forward",
            format!("{rows} tokens vs mask size {}", mask.size()),
        ));
    }
    if let Some(b) = blocks.iter().find(|b| b.attn.width != width) {
        return Err(shape_err(
            "transformer_forward",
            format!("token width {width} vs block width {}", b.attn.width),
        ));
    }
    let mut x = *tokens;
    for block in blocks {
        x = block.forward(params, &x, mask)?;
    }
    Ok(x)
}

/// DiT block with adaptive layer-norm-zero conditioning. The per-sequence
/// conditioning vector produces shift/scale/gate for both sub-layers.
#[derive(Debug, Clone)]
pub struct AdaLnBlock {
    pub attn: SelfAttention,
    pub mlp: Mlp,
    pub modulation: Linear,
    pub width: usize,
}

impl AdaLnBlock {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, width: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                attn: SelfAttention::new(b, "attn", width, heads, Init::XavierUniform)?,
                mlp: Mlp::new(b, "mlp", width, width * mlp_ratio, Init::XavierUniform)?,
                modulation: Linear::new(b, "ada", width, 6 * width, Init::Zeros)?,
                width,
            })
        })
    }

    /// `x` is `[batch * seq, width]`, `cond` is `[batch, width]` (already
    /// passed through SiLU).
    pub fn forward<'g, E: Element>(
        &self,
        p: &BoundParams<'g, E>,
        x: &Var<'g, E>,
        cond: &Var<'g, E>,
        mask: &AttentionMask,
    ) -> Result<Var<'g, E>> {
        let seq = mask.size();
        let w = self.width;
        let m = self.modulation.forward(p, cond)?;
        let chunk = |i: usize| m.slice_cols(i * w, w);
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let h = x.layer_norm(None)?.modulate(&shift1, &scale1, seq)?;
        let a = self.attn.forward(p, &h, mask)?.gate(&gate1, seq)?;
        let x = x.add(&a)?;
        let h = x.layer_norm(None)?.modulate(&shift2, &scale2, seq)?;
        let f = self.mlp.forward(p, &h)?.gate(&gate2, seq)?;
        x.add(&f)
    }
}

/// Final adaptive-norm projection of a DiT.
#[derive(Debug, Clone)]
pub struct AdaLnFinal {
    pub modulation: Linear,
    pub out: Linear,
    pub width: usize,
}

impl AdaLnFinal {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, name: &str, width: usize, out_dim: usize) -> Result<Self> {
        b.scoped(name, |b| {
            Ok(Self {
                modulation: Linear::new(b, "ada", width, 2 * width, Init::Zeros)?,
                out: Linear::new(b, "proj", width, out_dim, Init::Zeros)?,
                width,
            })
        })
    }

    pub fn forward<'g, E: Element>(&self, p: &BoundParams<'g, E>, x: &Var<'g, E>, cond: &Var<'g, E>, seq: usize) -> Result<Var<'g, E>> {
        let m = self.modulation.forward(p, cond)?;
        let shift = m.slice_cols(0, self.width)?;
        let scale = m.slice_cols(self.width, self.width)?;
        let h = x.layer_norm(None)?.modulate(&shift, &scale, seq)?;
        self.out.forward(p, &h)
    }
}

/// Sinusoidal features of `t` (scaled by 1000), shape `[t.len(), dim]`:
/// cosines in the first half, sines in the second.
pub fn timestep_embedding<E: Element>(ts: &[f64], dim: usize) -> Result<Tensor<E>> {
    if dim == 0 || dim % 2 != 0 || ts.is_empty() {
        return Err(shape_err("timestep_embedding", format!("dim {dim} for {} times", ts.len())));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        let t = t * 1000.0;
        let freqs = (0..half).map(|i| (-(10000f64).ln() * i as f64 / half as f64).exp());
        let args: Vec<f64> = freqs.map(|f| t * f).collect();
        out.extend(args.iter().map(|a| E::from_f64(a.cos())));
        out.extend(args.iter().map(|a| E::from_f64(a.sin())));
    }
    Tensor::from_vec(&[ts.len(), dim], out)
}
