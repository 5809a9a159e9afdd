//! Diffusion-transformer velocity decoder. Condition tokens are prepended to
//! the noisy latent tokens under full attention; the timestep enters through
//! adaptive layer norm.

use crate::autograd::{concat_rows, BoundParams, Var};
use crate::error::{shape_err, Result};
use crate::model::config::ModelConfig;
use crate::nn::{timestep_embedding, AdaLnBlock, AdaLnFinal, AttentionMask, Init, Linear, ParamBuilder};
use crate::params::ParamId;
use crate::tensor::Element;

#[derive(Debug, Clone)]
pub struct Decoder {
    pub latent_proj: Linear,
    pub cond_proj: Linear,
    /// Maps the `patch_split` of the condition onto the latent tokens.
    pub cond_local: Linear,
    /// Learned stand-in condition block for unconditional velocities.
    pub null_cond: ParamId,
    pub latent_pos: ParamId,
    pub cond_pos: ParamId,
    pub time_fc1: Linear,
    pub time_fc2: Linear,
    pub blocks: Vec<AdaLnBlock>,
    pub final_layer: AdaLnFinal,
}

impl Decoder {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, c: &ModelConfig) -> Result<Self> {
        let w = c.dec_width;
        b.scoped("decoder", |b| {
            Ok(Self {
                latent_proj: Linear::new(b, "latent_proj", c.d, w, Init::XavierUniform)?,
                cond_proj: Linear::new(b, "cond_proj", c.cond_dim(), w, Init::XavierUniform)?,
                cond_local: Linear::new(b, "cond_local", c.d, w, Init::XavierUniform)?,
                null_cond: b.param("null_cond", &[c.cond_tokens(), c.cond_dim()], Init::Normal(1.0))?,
                latent_pos: b.param("latent_pos", &[c.latent_tokens(), w], Init::Normal(0.02))?,
                cond_pos: b.param("cond_pos", &[c.cond_tokens(), w], Init::Normal(0.02))?,
                time_fc1: Linear::new(b, "time_fc1", c.time_embed_dim, w, Init::Normal(0.02))?,
                time_fc2: Linear::new(b, "time_fc2", w, w, Init::Normal(0.02))?,
                blocks: (0..c.dec_depth)
                    .map(|i| AdaLnBlock::new(b, &format!("blocks.{i}"), w, c.dec_heads, c.mlp_ratio))
                    .collect::<Result<_>>()?,
                final_layer: AdaLnFinal::new(b, "final", w, c.d)?,
            })
        })
    }
}

/// Row `r` of the reshaped condition `[batch * cond_tokens * f^2, d]` that
/// lands on each latent token, in `(item, row, col)` order. This is the
/// index form of `patch_split`.
fn split_index(c: &ModelConfig, batch: usize) -> Vec<usize> {
    let (f, wf) = (c.f, c.w / c.f);
    let mut idx = Vec::with_capacity(batch * c.latent_tokens());
    for b in 0..batch {
        for i in 0..c.h {
            for j in 0..c.w {
                let patch = b * c.cond_tokens() + (i / f) * wf + j / f;
                idx.push(patch * f * f + (i % f) * f + j % f);
            }
        }
    }
    idx
}

/// Velocities for a batch of noisy latents.
///
/// `x_t` is `[batch * latent_tokens, d]`, `ts` has one time per item.
/// `cond` is `[batch * cond_tokens, cond_dim]` in item order, or `None` for
/// all-null; items with `use_null[b]` take the learned null block instead.
pub(crate) fn velocity<'g, E: Element>(
    dec: &Decoder,
    c: &ModelConfig,
    p: &BoundParams<'g, E>,
    x_t: &Var<'g, E>,
    ts: &[f64],
    cond: Option<&Var<'g, E>>,
    use_null: &[bool],
) -> Result<Var<'g, E>> {
    let batch = ts.len();
    let (hw, nc) = (c.latent_tokens(), c.cond_tokens());
    if x_t.shape() != [batch * hw, c.d] {
        return Err(shape_err(
            "decode_velocity",
            format!("x_t {:?} for {batch} items of [{hw}, {}]", x_t.shape(), c.d),
        ));
    }
    if use_null.len() != batch {
        return Err(shape_err("decode_velocity", "null flags must match batch"));
    }

    let cond_rows = match cond {
        Some(cv) => {
            if cv.shape() != [batch * nc, c.cond_dim()] {
                return Err(shape_err(
                    "decode_velocity",
                    format!("condition {:?}, expected [{}, {}]", cv.shape(), batch * nc, c.cond_dim()),
                ));
            }
            if use_null.iter().any(|&u| u) {
                let with_null = concat_rows(&[*cv, p[dec.null_cond]])?;
                let idx: Vec<usize> = (0..batch)
                    .flat_map(|b| (0..nc).map(move |t| if use_null[b] { batch * nc + t } else { b * nc + t }))
                    .collect();
                with_null.gather_rows(&idx)?
            } else {
                *cv
            }
        }
        None => {
            let idx: Vec<usize> = (0..batch).flat_map(|_| 0..nc).collect();
            p[dec.null_cond].gather_rows(&idx)?
        }
    };

    let cond_pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..nc).collect();
    let cond_tok = dec
        .cond_proj
        .forward(p, &cond_rows)?
        .add(&p[dec.cond_pos].gather_rows(&cond_pos_idx)?)?;
    // Each condition token also feeds the latent cells of its own patch.
    let local = cond_rows
        .reshape(&[batch * nc * c.f * c.f, c.d])?
        .gather_rows(&split_index(c, batch))?;
    let lat_pos_idx: Vec<usize> = (0..batch).flat_map(|_| 0..hw).collect();
    let lat_tok = dec
        .latent_proj
        .forward(p, x_t)?
        .add(&dec.cond_local.forward(p, &local)?)?
        .add(&p[dec.latent_pos].gather_rows(&lat_pos_idx)?)?;

    let seq = nc + hw;
    let both = concat_rows(&[cond_tok, lat_tok])?;
    let order: Vec<usize> = (0..batch)
        .flat_map(|b| (0..nc).map(move |t| b * nc + t).chain((0..hw).map(move |t| batch * nc + b * hw + t)))
        .collect();
    let mut x = both.gather_rows(&order)?;

    let graph = x_t.graph();
    let temb = graph.constant(timestep_embedding(ts, c.time_embed_dim)?);
    let temb = dec.time_fc2.forward(p, &dec.time_fc1.forward(p, &temb)?.silu())?;
    let cvec = temb.silu();

    let mask = AttentionMask::zeros(seq);
    for block in &dec.blocks {
        x = block.forward(p, &x, &cvec, &mask)?;
    }
    let noisy_idx: Vec<usize> = (0..batch).flat_map(|b| (0..hw).map(move |t| b * seq + nc + t)).collect();
    let x = x.gather_rows(&noisy_idx)?;
    dec.final_layer.forward(p, &x, &cvec, hw)
}
