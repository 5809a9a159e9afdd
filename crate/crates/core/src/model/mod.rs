//! The TransDiff model: an autoregressive transformer encoder producing
//! condition blocks and a flow-matching transformer decoder consuming them.

pub mod config;
mod decoder;
mod encoder;

use crate::autograd::{BoundParams, Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::nn::{patch_merge, AttentionMask, BlockLayout, ParamBuilder};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::sampler::{sample_latent, SamplerConfig};
use crate::tensor::{Element, Tensor};

pub use config::ModelConfig;
pub use decoder::Decoder;
pub use encoder::{layout_for, Encoder};

/// Encoder output for one image, `[(h/f)(w/f), d f^2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBlock<E: Element>(Tensor<E>);

impl<E: Element> ConditionBlock<E> {
    pub fn new(tokens: Tensor<E>, config: &ModelConfig) -> Result<Self> {
        if tokens.shape() != config.cond_shape() {
            return Err(shape_err(
                "ConditionBlock",
                format!("{:?}, expected {:?}", tokens.shape(), config.cond_shape()),
            ));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &Tensor<E> {
        &self.0
    }

    pub fn into_tokens(self) -> Tensor<E> {
        self.0
    }
}

/// Embedded encoder input for one sequence.
#[derive(Debug, Clone)]
pub struct AssembledInput<E: Element> {
    pub tokens: Tensor<E>,
    pub layout: BlockLayout,
    pub mask: AttentionMask,
    pub class_id: usize,
}

impl<E: Element> AssembledInput<E> {
    pub fn references(&self) -> usize {
        self.layout.image_segments()
    }
}

/// A latent image tagged with its class.
#[derive(Debug, Clone)]
pub struct LabeledLatent<E: Element> {
    pub class_id: usize,
    pub latent: Tensor<E>,
}

/// Random inputs of one loss evaluation, one entry per (sequence, position)
/// in sequence-major order.
#[derive(Debug, Clone)]
pub struct LossDraws<E: Element> {
    pub t: Vec<f64>,
    pub eps: Vec<Tensor<E>>,
    /// Replace this position's condition by the learned null block.
    pub drop: Vec<bool>,
}

impl<E: Element> LossDraws<E> {
    pub fn sample(config: &ModelConfig, items: usize, rng: &mut SeededRng) -> Self {
        let mut t = Vec::with_capacity(items);
        let mut eps = Vec::with_capacity(items);
        let mut drop = Vec::with_capacity(items);
        for _ in 0..items {
            t.push(rng.uniform());
            eps.push(rng.normal_tensor(&config.latent_shape()));
            drop.push(rng.bernoulli(config.p_cond_drop));
        }
        Self { t, eps, drop }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Every latent and condition produced by one batched generation run.
#[derive(Debug, Clone)]
pub struct Generation<E: Element> {
    /// `images[i]` is `[batch * h * w, d]`: the `i`-th generated image of every item.
    pub images: Vec<Tensor<E>>,
    /// `conditions[i]` is `[batch * cond_tokens, cond_dim]`, the blocks `images[i]` was decoded from.
    pub conditions: Vec<Tensor<E>>,
}

impl<E: Element> Generation<E> {
    /// Final image of item `b`.
    pub fn item(&self, b: usize, config: &ModelConfig) -> Result<Tensor<E>> {
        let last = self.images.last().ok_or_else(|| Error::InvalidArgument("empty generation".into()))?;
        let n = config.latent_tokens();
        last.slice_rows(b * n, n)
    }
}

#[derive(Debug, Clone)]
pub struct TransDiff<E: Element> {
    config: ModelConfig,
    params: ParamStore<E>,
    encoder: Encoder,
    decoder: Decoder,
}

impl<E: Element> TransDiff<E> {
    /// Freshly initialized model; parameter draws depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = SeededRng::new(seed, 0);
        let mut b = ParamBuilder::new(&mut params, &mut rng);
        let encoder = Encoder::new(&mut b, &config)?;
        let decoder = Decoder::new(&mut b, &config)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
        })
    }

    /// Model with the given parameter values, which must cover every tensor.
    pub fn from_values(config: ModelConfig, values: impl IntoIterator<Item = (String, Tensor<E>)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_values(values)?;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.params
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    /// Same model at another precision.
    pub fn cast<F: Element>(&self) -> TransDiff<F> {
        TransDiff {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.config.n_classes {
            return Err(Error::ClassOutOfRange {
                class_id,
                n_classes: self.config.n_classes,
            });
        }
        Ok(())
    }

    fn check_latent(&self, x: &Tensor<E>, what: &'static str) -> Result<()> {
        if x.shape() != self.config.latent_shape() {
            return Err(shape_err(
                what,
                format!("latent {:?}, expected {:?}", x.shape(), self.config.latent_shape()),
            ));
        }
        Ok(())
    }

    /// Patch-merged references, `refs[b]` for item `b`, all lists of length `n`.
    fn merged_refs(&self, refs: &[&[Tensor<E>]], n: usize) -> Result<Option<Tensor<E>>> {
        if n > self.config.max_references {
            return Err(Error::TooManyReferences {
                given: n,
                max: self.config.max_references,
            });
        }
        if n == 0 {
            return Ok(None);
        }
        let c = &self.config;
        let mut merged = Vec::with_capacity(refs.len() * n);
        for item in refs {
            if item.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "every item needs {n} references, got {}",
                    item.len()
                )));
            }
            for x in item.iter() {
                self.check_latent(x, "references")?;
                merged.push(patch_merge(x, c.h, c.w, c.f)?);
            }
        }
        let views: Vec<&Tensor<E>> = merged.iter().collect();
        Tensor::concat_rows(&views).map(Some)
    }

    /// Embedded tokens for the 1-step paradigm: class block then mask block.
    pub fn assemble_1step(&self, class_id: usize) -> Result<AssembledInput<E>> {
        self.assemble_mrar(class_id, &[])
    }

    /// Embedded tokens for `[class, mask, ref_0, ..., ref_{n-1}]` with the
    /// block-causal mask. With no references this is [`Self::assemble_1step`].
    pub fn assemble_mrar(&self, class_id: usize, prev: &[Tensor<E>]) -> Result<AssembledInput<E>> {
        self.check_class(class_id)?;
        let refs = self.merged_refs(&[prev], prev.len())?;
        let (layout, mask) = layout_for(&self.config, prev.len())?;
        let g = Graph::new();
        let p = g.bind(&self.params);
        let tokens = encoder::embed(&self.encoder, &self.config, &p, &[class_id], refs.as_ref(), prev.len())?;
        Ok(AssembledInput {
            tokens: tokens.value().as_ref().clone(),
            layout,
            mask,
            class_id,
        })
    }

    /// One condition block per causal block: from the mask segment, then from
    /// every reference segment.
    pub fn encode_conditions(&self, input: &AssembledInput<E>) -> Result<Vec<ConditionBlock<E>>> {
        let n = input.references();
        if input.tokens.shape() != [input.mask.size(), self.config.enc_width] {
            return Err(shape_err(
                "encode_conditions",
                format!("tokens {:?} for mask size {}", input.tokens.shape(), input.mask.size()),
            ));
        }
        let g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(input.tokens.clone());
        let c = encoder::conditions(&self.encoder, &self.config, &p, &x, &input.mask, n, None)?;
        let c = c.value();
        let nc = self.config.cond_tokens();
        (0..=n)
            .map(|i| ConditionBlock::new(c.slice_rows(i * nc, nc)?, &self.config))
            .collect()
    }

    /// Condition blocks for a batch of sequences sharing the reference count:
    /// `[batch * (n + 1) * cond_tokens, cond_dim]` in (item, block) order, or
    /// only block `only` of every item when given.
    pub fn encode_batch(&self, class_ids: &[usize], refs: &[&[Tensor<E>]], only: Option<usize>) -> Result<Tensor<E>> {
        if class_ids.is_empty() || refs.len() != class_ids.len() {
            return Err(Error::InvalidArgument("need one reference list per class id".into()));
        }
        for &k in class_ids {
            self.check_class(k)?;
        }
        let n = refs[0].len();
        if only.is_some_and(|j| j > n) {
            return Err(Error::InvalidArgument(format!("block {} of {}", only.unwrap_or(0), n + 1)));
        }
        let merged = self.merged_refs(refs, n)?;
        let (_, mask) = layout_for(&self.config, n)?;
        let g = Graph::new();
        let p = g.bind(&self.params);
        let tokens = encoder::embed(&self.encoder, &self.config, &p, class_ids, merged.as_ref(), n)?;
        let c = encoder::conditions(&self.encoder, &self.config, &p, &tokens, &mask, n, only)?;
        Ok(c.value().as_ref().clone())
    }

    /// Velocity at the noisy tokens, conditioned on `condition` or on the
    /// learned null block when `None`.
    pub fn decode_velocity(&self, x_t: &Tensor<E>, t: f64, condition: Option<&ConditionBlock<E>>) -> Result<Tensor<E>> {
        self.check_latent(x_t, "decode_velocity")?;
        self.decode_batch(x_t, t, condition.map(|c| c.tokens()))
    }

    /// Batched [`Self::decode_velocity`] at a shared time: `x_t` is
    /// `[batch * h * w, d]`, `cond` is `[batch * cond_tokens, cond_dim]`.
    pub fn decode_batch(&self, x_t: &Tensor<E>, t: f64, cond: Option<&Tensor<E>>) -> Result<Tensor<E>> {
        let hw = self.config.latent_tokens();
        let (rows, _) = x_t.expect_2d("decode_velocity")?;
        if rows == 0 || rows % hw != 0 {
            return Err(shape_err("decode_velocity", format!("{rows} rows, not a multiple of {hw}")));
        }
        let batch = rows / hw;
        let g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(x_t.clone());
        let c = cond.map(|c| g.constant(c.clone()));
        let v = decoder::velocity(
            &self.decoder,
            &self.config,
            &p,
            &x,
            &vec![t; batch],
            c.as_ref(),
            &vec![false; batch],
        )?;
        Ok(v.value().as_ref().clone())
    }

    /// Mean flow-matching loss over every (sequence, position) pair, as a
    /// differentiable node. Sequence `s` of length `n + 1` is encoded with
    /// references `x_0..x_{n-1}`; position `i` is decoded from condition `i`
    /// and regressed onto `eps - x_i`. All sequences must share `n`.
    pub fn joint_loss_var<'g>(
        &self,
        p: &BoundParams<'g, E>,
        batch: &[Vec<LabeledLatent<E>>],
        draws: &LossDraws<E>,
    ) -> Result<Var<'g, E>> {
        let c = &self.config;
        let first = batch.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let len = first.len();
        if len == 0 {
            return Err(Error::InvalidArgument("empty sequence".into()));
        }
        let n = len - 1;
        let mut class_ids = Vec::with_capacity(batch.len());
        let mut ref_lists: Vec<Vec<Tensor<E>>> = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.len() != len {
                return Err(Error::InvalidArgument("sequences in a batch must share their length".into()));
            }
            let k = seq[0].class_id;
            self.check_class(k)?;
            if let Some(bad) = seq.iter().find(|l| l.class_id != k) {
                return Err(Error::InvalidArgument(format!(
                    "class mismatch within a sequence: {k} and {}",
                    bad.class_id
                )));
            }
            for l in seq {
                self.check_latent(&l.latent, "joint_loss")?;
            }
            class_ids.push(k);
            ref_lists.push(seq[..n].iter().map(|l| l.latent.clone()).collect());
        }
        let items = batch.len() * len;
        if draws.t.len() != items || draws.eps.len() != items || draws.drop.len() != items {
            return Err(Error::InvalidArgument(format!(
                "loss draws cover {} positions, batch has {items}",
                draws.len()
            )));
        }

        let refs: Vec<&[Tensor<E>]> = ref_lists.iter().map(|r| r.as_slice()).collect();
        let merged = self.merged_refs(&refs, n)?;
        let (_, mask) = layout_for(c, n)?;
        let tokens = encoder::embed(&self.encoder, c, p, &class_ids, merged.as_ref(), n)?;
        let conds = encoder::conditions(&self.encoder, c, p, &tokens, &mask, n, None)?;

        let mut x_t = Vec::with_capacity(items);
        let mut target = Vec::with_capacity(items);
        for (j, l) in batch.iter().flatten().enumerate() {
            let (x, eps, t) = (&l.latent, &draws.eps[j], draws.t[j]);
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
            }
            x_t.push(crate::flow::interpolate(x, eps, t)?);
            target.push(crate::flow::velocity_target(x, eps)?);
        }
        let g = p[self.encoder.mask_embed].graph();
        let x_t = g.constant(Tensor::concat_rows(&x_t.iter().collect::<Vec<_>>())?);
        let target = g.constant(Tensor::concat_rows(&target.iter().collect::<Vec<_>>())?);
        let v = decoder::velocity(&self.decoder, c, p, &x_t, &draws.t, Some(&conds), &draws.drop)?;
        v.mse(&target)
    }

    /// Value of [`Self::joint_loss_var`].
    pub fn joint_loss(&self, batch: &[Vec<LabeledLatent<E>>], draws: &LossDraws<E>) -> Result<f64> {
        let g = Graph::new();
        let p = g.bind(&self.params);
        Ok(self.joint_loss_var(&p, batch, draws)?.value().item().as_f64())
    }

    /// Loss value; the parameter gradients are overwritten with its gradient.
    pub fn loss_and_grad(&mut self, batch: &[Vec<LabeledLatent<E>>], draws: &LossDraws<E>) -> Result<f64> {
        let grads = {
            let g = Graph::new();
            let p = g.bind(&self.params);
            let loss = self.joint_loss_var(&p, batch, draws)?;
            let value = loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteObjective);
            }
            (g.backward(loss)?, value)
        };
        self.params.zero_grad();
        grads.0.accumulate_into(&mut self.params);
        Ok(grads.1)
    }

    /// Batched generation. Step `i = 0..=n_refs` re-encodes each item with
    /// its `i` previously generated images and decodes image `i` from
    /// condition `i`; all items share `rng`.
    pub fn generate(&self, class_ids: &[usize], n_refs: usize, cfg: &SamplerConfig, rng: &mut SeededRng) -> Result<Generation<E>> {
        cfg.validate()?;
        if n_refs > self.config.max_references {
            return Err(Error::TooManyReferences {
                given: n_refs,
                max: self.config.max_references,
            });
        }
        if class_ids.is_empty() {
            return Err(Error::InvalidArgument("no classes to generate".into()));
        }
        let hw = self.config.latent_tokens();
        let batch = class_ids.len();
        let mut per_item: Vec<Vec<Tensor<E>>> = vec![Vec::new(); batch];
        let mut out = Generation {
            images: Vec::with_capacity(n_refs + 1),
            conditions: Vec::with_capacity(n_refs + 1),
        };
        for i in 0..=n_refs {
            let refs: Vec<&[Tensor<E>]> = per_item.iter().map(|r| r.as_slice()).collect();
            let cond = self.encode_batch(class_ids, &refs, Some(i))?;
            let img = self.sample_with(&cond, batch, cfg, rng)?;
            for (b, item) in per_item.iter_mut().enumerate() {
                item.push(img.slice_rows(b * hw, hw)?);
            }
            out.images.push(img);
            out.conditions.push(cond);
        }
        Ok(out)
    }

    /// Sample `batch` latents from stacked condition blocks.
    pub fn sample_with(&self, cond: &Tensor<E>, batch: usize, cfg: &SamplerConfig, rng: &mut SeededRng) -> Result<Tensor<E>> {
        let c = &self.config;
        if cond.shape() != [batch * c.cond_tokens(), c.cond_dim()] {
            return Err(shape_err("sample", format!("condition {:?} for batch {batch}", cond.shape())));
        }
        let velocity = |x: &Tensor<E>, t: f64| self.decode_batch(x, t, Some(cond));
        let uncond = |x: &Tensor<E>, t: f64| self.decode_batch(x, t, None);
        sample_latent(velocity, Some(uncond), cfg, &[batch * c.latent_tokens(), c.d], rng)
    }

    /// One-step generation of a single latent.
    pub fn infer_1step(&self, class_id: usize, cfg: &SamplerConfig, rng: &mut SeededRng) -> Result<Tensor<E>> {
        self.infer_mrar(class_id, 0, cfg, rng)
    }

    /// Multi-reference generation of a single latent; returns the image
    /// decoded after `n_refs` generated references.
    pub fn infer_mrar(&self, class_id: usize, n_refs: usize, cfg: &SamplerConfig, rng: &mut SeededRng) -> Result<Tensor<E>> {
        self.check_class(class_id)?;
        let g = self.generate(&[class_id], n_refs, cfg, rng)?;
        g.item(0, &self.config)
    }
}
