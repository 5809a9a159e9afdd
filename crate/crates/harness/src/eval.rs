//! Evaluation: distribution fidelity, class consistency, condition
//! diversity and fusion probes on a trained model.

use transdiff_core::analysis::{
    class_centroids, centroid_accuracy, diversity_metric, fuse_conditions, sliced_wasserstein, FusionMode, MetricReport,
};
use transdiff_core::model::TransDiff;
use transdiff_core::sampler::SamplerConfig;
use transdiff_core::{SeededRng, Tensor};

use crate::dataset::{gen_held_out, gen_synthetic, SyntheticDatasetSpec};
use crate::error::Result;

/// Items generated per batched sampler call.
pub const GENERATION_CHUNK: usize = 128;

/// Stack latents as rows of flattened samples, `[n, h * w * d]`.
pub fn flatten(samples: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let dim = samples.first().map_or(0, |s| s.len());
    let data: Vec<f32> = samples.iter().flat_map(|s| s.data().iter().copied()).collect();
    Ok(Tensor::from_vec(&[samples.len(), dim], data)?)
}

/// `n` samples of class `k` after `n_refs` generated references.
pub fn generate_class(
    model: &TransDiff<f32>,
    k: usize,
    n: usize,
    n_refs: usize,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let m = GENERATION_CHUNK.min(n - out.len());
        let g = model.generate(&vec![k; m], n_refs, cfg, rng)?;
        for b in 0..m {
            out.push(g.item(b, model.config())?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub samples_per_class: usize,
    pub n_refs: usize,
    pub projections: usize,
    /// Real samples per class used for centroids.
    pub centroid_samples: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            samples_per_class: 512,
            n_refs: 0,
            projections: 128,
            centroid_samples: 256,
            seed: 0,
        }
    }
}

/// Real-data class centroids from training indices.
pub fn real_centroids(spec: &SyntheticDatasetSpec, per_class: usize) -> Result<Vec<Vec<f64>>> {
    let mut labeled = Vec::with_capacity(spec.n_classes * per_class);
    for k in 0..spec.n_classes {
        labeled.extend(gen_synthetic(spec, k, per_class)?.into_iter().map(|x| (k, x)));
    }
    Ok(class_centroids(&labeled, spec.n_classes)?)
}

/// Per-class sliced Wasserstein distance to held-out data, and nearest
/// real-centroid accuracy over all generated samples.
pub fn evaluate(
    model: &TransDiff<f32>,
    spec: &SyntheticDatasetSpec,
    cfg: &SamplerConfig,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let centroids = real_centroids(spec, opts.centroid_samples)?;
    let mut report = MetricReport::default();
    let mut labeled = Vec::new();
    let mut swd_sum = 0.0;
    for k in 0..spec.n_classes {
        let mut rng = SeededRng::new(opts.seed, 2000 + k as u64);
        let gen = generate_class(model, k, opts.samples_per_class, opts.n_refs, cfg, &mut rng)?;
        let held = gen_held_out(spec, k, opts.samples_per_class)?;
        let mut proj_rng = SeededRng::new(opts.seed, 3000 + k as u64);
        let swd = sliced_wasserstein(&flatten(&gen)?, &flatten(&held)?, opts.projections, &mut proj_rng)?;
        report.push(format!("swd.class{k}"), swd);
        swd_sum += swd;
        labeled.extend(gen.into_iter().map(|x| (k, x)));
    }
    report.push("swd.mean", swd_sum / spec.n_classes as f64);
    report.push("centroid_accuracy", centroid_accuracy(&labeled, &centroids)?);
    Ok(report)
}

/// Diversity of the 1-step condition block of class `k`.
pub fn one_step_diversity(model: &TransDiff<f32>, k: usize) -> Result<f64> {
    let c = model.encode_conditions(&model.assemble_1step(k)?)?;
    Ok(diversity_metric(c[0].tokens())?)
}

/// Mean diversity of the condition blocks that decode image `n_refs` over
/// `samples` generations of class `k`.
pub fn mrar_diversity(
    model: &TransDiff<f32>,
    k: usize,
    n_refs: usize,
    samples: usize,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<f64> {
    let g = model.generate(&vec![k; samples], n_refs, cfg, rng)?;
    let cond = &g.conditions[n_refs];
    let nc = model.config().cond_tokens();
    let mut total = 0.0;
    for b in 0..samples {
        total += diversity_metric(&cond.slice_rows(b * nc, nc)?)?;
    }
    Ok(total / samples as f64)
}

/// Samples decoded from the fusion of the 1-step conditions of classes `a`
/// and `b`, taking `k` token rows from `a`.
pub fn fused_samples(
    model: &TransDiff<f32>,
    a: usize,
    b: usize,
    k: usize,
    mode: FusionMode,
    n: usize,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Vec<Tensor<f32>>> {
    let ca = model.encode_conditions(&model.assemble_1step(a)?)?.remove(0);
    let cb = model.encode_conditions(&model.assemble_1step(b)?)?.remove(0);
    let fused = fuse_conditions(ca.tokens(), cb.tokens(), k, mode)?;
    let stacked = Tensor::concat_rows(&vec![&fused; n])?;
    let x = model.sample_with(&stacked, n, cfg, rng)?;
    let hw = model.config().latent_tokens();
    (0..n).map(|i| Ok(x.slice_rows(i * hw, hw)?)).collect()
}

/// Elementwise mean of flattened samples.
pub fn sample_mean(samples: &[Tensor<f32>]) -> Vec<f64> {
    let dim = samples.first().map_or(0, |s| s.len());
    let mut m = vec![0.0; dim];
    for s in samples {
        for (a, v) in m.iter_mut().zip(s.data()) {
            *a += *v as f64;
        }
    }
    m.iter_mut().for_each(|v| *v /= samples.len().max(1) as f64);
    m
}
