//! Autoregressive transformer encoder: `[class | mask | image_0 | ...]`
//! token sequences to one condition block per causal block.

use crate::autograd::{concat_rows, BoundParams, Var};
use crate::error::{shape_err, Result};
use crate::model::config::ModelConfig;
use crate::nn::{build_mask_1step, build_mask_mrar, AttentionMask, BlockLayout, Init, LayerNorm, Linear, ParamBuilder, TransformerBlock};
use crate::params::ParamId;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone)]
pub struct Encoder {
    /// `[n_classes * n_class_tokens, width]`
    pub class_embed: ParamId,
    /// `[1, cond_dim]`, repeated over every mask token.
    pub mask_embed: ParamId,
    /// `cond_dim -> width`, shared by mask and reference tokens.
    pub input_proj: Linear,
    /// `[n_class_tokens, width]`
    pub class_pos: ParamId,
    /// `[cond_tokens, width]`
    pub spatial_pos: ParamId,
    /// `[2 + max_references, width]`: class, mask, image_0, image_1, ...
    pub segment_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Encoder {
    pub fn new<E: Element>(b: &mut ParamBuilder<'_, E>, c: &ModelConfig) -> Result<Self> {
        let w = c.enc_width;
        let emb = Init::Normal(0.02);
        b.scoped("encoder", |b| {
            Ok(Self {
                class_embed: b.param("class_embed", &[c.n_classes * c.n_class_tokens, w], emb)?,
                mask_embed: b.param("mask_embed", &[1, c.cond_dim()], Init::Normal(1.0))?,
                input_proj: Linear::new(b, "input_proj", c.cond_dim(), w, Init::XavierUniform)?,
                class_pos: b.param("class_pos", &[c.n_class_tokens, w], emb)?,
                spatial_pos: b.param("spatial_pos", &[c.cond_tokens(), w], emb)?,
                segment_embed: b.param("segment_embed", &[2 + c.max_references, w], emb)?,
                blocks: (0..c.enc_depth)
                    .map(|i| TransformerBlock::new(b, &format!("blocks.{i}"), w, c.enc_heads, c.mlp_ratio, Init::XavierUniform))
                    .collect::<Result<_>>()?,
                norm: LayerNorm::new(b, "norm", w)?,
                head: Linear::new(b, "head", w, c.cond_dim(), Init::XavierUniform)?,
            })
        })
    }
}

/// Layout and mask for a sequence with `refs` reference images.
pub fn layout_for(c: &ModelConfig, refs: usize) -> Result<(BlockLayout, AttentionMask)> {
    let layout = BlockLayout::mrar(c.n_class_tokens, c.cond_tokens(), c.cond_tokens(), refs)?;
    let mask = if refs == 0 {
        build_mask_1step(&layout)?
    } else {
        build_mask_mrar(&layout)
    };
    Ok((layout, mask))
}

/// Embed a batch of sequences. `refs` holds the patch-merged references in
/// `(batch, reference, token)` row order, `[batch * n_refs * cond_tokens, cond_dim]`.
/// Returns `[batch * seq_len, enc_width]` in `(batch, position)` order.
pub(crate) fn embed<'g, E: Element>(
    enc: &Encoder,
    c: &ModelConfig,
    p: &BoundParams<'g, E>,
    class_ids: &[usize],
    refs: Option<&Tensor<E>>,
    n_refs: usize,
) -> Result<Var<'g, E>> {
    let batch = class_ids.len();
    let (nct, nc) = (c.n_class_tokens, c.cond_tokens());
    let graph = p[enc.mask_embed].graph();
    let seq = nct + (1 + n_refs) * nc;

    let class_idx: Vec<usize> = class_ids
        .iter()
        .flat_map(|&k| (0..nct).map(move |i| k * nct + i))
        .collect();
    let class_rows = p[enc.class_embed].gather_rows(&class_idx)?;

    let mask_rows = p[enc.mask_embed].gather_rows(&vec![0; batch * nc])?;
    let spatial_in = match (refs, n_refs) {
        (_, 0) => mask_rows,
        (Some(r), n) => {
            if r.shape() != [batch * n * nc, c.cond_dim()] {
                return Err(shape_err(
                    "encoder embed",
                    format!("references {:?} for batch {batch} x {n} refs", r.shape()),
                ));
            }
            concat_rows(&[mask_rows, graph.constant(r.clone())])?
        }
        (None, _) => return Err(shape_err("encoder embed", "missing reference tokens")),
    };
    let spatial_rows = enc.input_proj.forward(p, &spatial_in)?;
    let all = concat_rows(&[class_rows, spatial_rows])?;

    // Reorder into (batch, position) and build matching positional rows.
    let mut order = Vec::with_capacity(batch * seq);
    let mut pos_idx = Vec::with_capacity(batch * seq);
    let mut seg_idx = Vec::with_capacity(batch * seq);
    let class_total = batch * nct;
    for b in 0..batch {
        for i in 0..nct {
            order.push(b * nct + i);
            pos_idx.push(i);
            seg_idx.push(0);
        }
        for j in 0..=n_refs {
            for t in 0..nc {
                let row = if j == 0 {
                    b * nc + t
                } else {
                    batch * nc + (b * n_refs + j - 1) * nc + t
                };
                order.push(class_total + row);
                pos_idx.push(nct + t);
                seg_idx.push(1 + j);
            }
        }
    }
    let tokens = all.gather_rows(&order)?;
    let pos_table = concat_rows(&[p[enc.class_pos], p[enc.spatial_pos]])?;
    let pos = pos_table.gather_rows(&pos_idx)?;
    let seg = p[enc.segment_embed].gather_rows(&seg_idx)?;
    tokens.add(&pos)?.add(&seg)
}

/// Run embedded tokens through the encoder and read out condition blocks in
/// `(batch, block, token)` order: block 0 from the mask segment, block `j`
/// from image segment `j - 1`. Output `[batch * (n_refs + 1) * cond_tokens, cond_dim]`,
/// or `[batch * cond_tokens, cond_dim]` when `only` selects a single block.
pub(crate) fn conditions<'g, E: Element>(
    enc: &Encoder,
    c: &ModelConfig,
    p: &BoundParams<'g, E>,
    tokens: &Var<'g, E>,
    mask: &AttentionMask,
    n_refs: usize,
    only: Option<usize>,
) -> Result<Var<'g, E>> {
    let seq = mask.size();
    let rows = tokens.value().rows();
    let batch = rows / seq;
    let (nct, nc) = (c.n_class_tokens, c.cond_tokens());
    if seq != nct + (1 + n_refs) * nc {
        return Err(shape_err("encoder", format!("mask size {seq} for {n_refs} references")));
    }
    let mut idx = Vec::with_capacity(batch * (n_refs + 1) * nc);
    for b in 0..batch {
        let blocks = match only {
            Some(j) => j..j + 1,
            None => 0..n_refs + 1,
        };
        for j in blocks {
            idx.extend((0..nc).map(|t| b * seq + nct + j * nc + t));
        }
    }
    let x = crate::nn::transformer_forward(tokens, mask, p, &enc.blocks)?;
    // Only condition rows feed the head.
    let x = x.gather_rows(&idx)?;
    enc.head.forward(p, &enc.norm.forward(p, &x)?)
}
