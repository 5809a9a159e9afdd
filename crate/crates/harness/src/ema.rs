//! Exponential moving average of parameters.

use transdiff_core::{Error, ParamStore, Result, Tensor};

/// `ema <- decay * ema + (1 - decay) * params`, elementwise.
pub fn ema_update(ema: &mut [Tensor<f32>], params: &[&Tensor<f32>], decay: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::InvalidArgument(format!("ema decay {decay} outside [0, 1]")));
    }
    if ema.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} shadow tensors for {} parameters",
            ema.len(),
            params.len()
        )));
    }
    for (e, p) in ema.iter().zip(params) {
        e.same_shape(p, "ema_update")?;
    }
    if decay == 1.0 {
        return Ok(());
    }
    let (d, keep) = (decay as f32, (1.0 - decay) as f32);
    for (e, p) in ema.iter_mut().zip(params) {
        if decay == 0.0 {
            *e = (*p).clone();
            continue;
        }
        for (a, b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + keep * b;
        }
    }
    Ok(())
}

/// Shadow copy of every parameter in a store.
#[derive(Debug, Clone, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub shadow: Vec<Tensor<f32>>,
}

impl Ema {
    pub fn new(store: &ParamStore<f32>, decay: f64) -> Self {
        Self {
            decay,
            shadow: store.iter().map(|(_, p)| p.value.clone()).collect(),
        }
    }

    pub fn update(&mut self, store: &ParamStore<f32>) -> Result<()> {
        let params: Vec<&Tensor<f32>> = store.iter().map(|(_, p)| &p.value).collect();
        ema_update(&mut self.shadow, &params, self.decay)
    }

    /// `(name, shadow)` pairs in store order.
    pub fn named(&self, store: &ParamStore<f32>) -> Vec<(String, Tensor<f32>)> {
        store
            .iter()
            .zip(&self.shadow)
            .map(|((_, p), s)| (p.name.clone(), s.clone()))
            .collect()
    }
}
