//! Finite-difference check of the joint loss on the micro configuration.

use transdiff_core::gradcheck::{grad_check_params, ParamCheckReport};
use transdiff_core::model::{LabeledLatent, LossDraws, ModelConfig, TransDiff};
use transdiff_core::SeededRng;

use crate::error::Result;

/// Checks every parameter coordinate of a randomly perturbed micro model on
/// a batch of two 3-image sequences in 64-bit precision.
pub fn joint_loss_gradcheck(seed: u64) -> Result<ParamCheckReport> {
    let c = ModelConfig::micro();
    let mut model = TransDiff::<f64>::new(c.clone(), seed)?;
    // Move zero-initialized tensors away from zero so every path carries gradient.
    let mut rng = SeededRng::new(seed, 7);
    for p in model.params_mut().iter_mut() {
        for v in p.value.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    let batch: Vec<Vec<LabeledLatent<f64>>> = [1usize, 6]
        .iter()
        .map(|&k| {
            (0..3)
                .map(|_| LabeledLatent {
                    class_id: k,
                    latent: rng.normal_tensor(&c.latent_shape()),
                })
                .collect()
        })
        .collect();
    let mut draws = LossDraws::sample(&c, 6, &mut rng);
    draws.drop[4] = true;
    Ok(grad_check_params(model.params(), |_, p| model.joint_loss_var(p, &batch, &draws), 1e-4)?)
}
