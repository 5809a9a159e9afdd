//! Reverse-time integrators from noise (`t = 1`) to data (`t = 0`).
//!
//! The stochastic step is a scaled Euler–Maruyama update
//!
//! ```text
//! d      = v - 0.5 * sigma(t)^2 * score(x, t)
//! x_next = x + s1 * d * dt + s2 * amp(t) * sqrt(|dt|) * z,   z ~ N(0, I)
//! ```
//!
//! with `amp(t) = sqrt(sigma(t))` (paper-literal) or `sigma(t)` (standard).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{velocity_to_score, DEFAULT_T_FLOOR};
use crate::rng::SeededRng;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Ode,
    Sde,
}

/// How the diffusion increment is scaled by `sigma(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaForm {
    /// `sqrt(sigma(t)) * dW`
    PaperLiteral,
    /// `sigma(t) * dW`
    Standard,
}

/// Functional form of `sigma(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSchedule {
    /// `sigma_base * t`: noiseless at the data end.
    Linear,
    /// `sigma_base` everywhere.
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub s1: f64,
    pub s2: f64,
    pub sigma_base: f64,
    pub sigma_form: SigmaForm,
    pub sigma_schedule: SigmaSchedule,
    pub t_floor: f64,
    pub cfg_scale: f64,
    pub mode: SamplerMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            s1: 1.0,
            s2: 1.0,
            sigma_base: 1.0,
            sigma_form: SigmaForm::PaperLiteral,
            sigma_schedule: SigmaSchedule::Linear,
            t_floor: DEFAULT_T_FLOOR,
            cfg_scale: 1.0,
            mode: SamplerMode::Ode,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.steps == 0 {
            return bad("sampler steps must be >= 1".into());
        }
        if self.sigma_base < 0.0 || !self.sigma_base.is_finite() {
            return bad(format!("sigma_base must be >= 0, got {}", self.sigma_base));
        }
        if self.t_floor <= 0.0 {
            return bad(format!("t_floor must be > 0, got {}", self.t_floor));
        }
        if self.cfg_scale < 0.0 || !self.cfg_scale.is_finite() {
            return bad(format!("cfg_scale must be >= 0, got {}", self.cfg_scale));
        }
        if !self.s1.is_finite() || !self.s2.is_finite() {
            return bad("s1 and s2 must be finite".into());
        }
        Ok(())
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self.sigma_schedule {
            SigmaSchedule::Linear => self.sigma_base * t,
            SigmaSchedule::Constant => self.sigma_base,
        }
    }

    /// Multiplier of `sqrt(|dt|) * z` before `s2`.
    pub fn noise_amplitude(&self, t: f64) -> f64 {
        let s = self.sigma(t);
        match self.sigma_form {
            SigmaForm::PaperLiteral => s.sqrt(),
            SigmaForm::Standard => s,
        }
    }

    /// Uniform reverse-time grid `1 = t_0 > t_1 > ... > t_steps = 0`.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|i| (self.steps - i) as f64 / self.steps as f64)
            .collect()
    }
}

/// Explicit Euler step `x + v dt`.
pub fn ode_step<E: Element>(x: &Tensor<E>, v: &Tensor<E>, dt: f64) -> Result<Tensor<E>> {
    let dt = E::from_f64(dt);
    x.zip_map(v, "ode_step", |x, v| x + v * dt)
}

/// One scaled Euler–Maruyama step at time `t` with (negative) step `dt`.
pub fn em_sde_step<E: Element>(
    x: &Tensor<E>,
    t: f64,
    dt: f64,
    v: &Tensor<E>,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<E>> {
    x.same_shape(v, "em_sde_step")?;
    let sigma = cfg.sigma(t);
    let drift = if sigma == 0.0 {
        v.clone()
    } else {
        let score = velocity_to_score(v, x, t, cfg.t_floor)?;
        v.axpy(E::from_f64(-0.5 * sigma * sigma), &score)?
    };
    let s1 = E::from_f64(cfg.s1);
    let dt_e = E::from_f64(dt);
    let mut next = x.zip_map(&drift, "em_sde_step", |x, d| x + s1 * d * dt_e)?;
    let noise_scale = cfg.s2 * cfg.noise_amplitude(t) * dt.abs().sqrt();
    if noise_scale != 0.0 {
        for o in next.data_mut() {
            *o += E::from_f64(noise_scale * rng.normal());
        }
    }
    Ok(next)
}

/// Guided velocity `v_uncond + w (v_cond - v_uncond)`; exact passthrough at
/// `w = 1` and `w = 0`.
pub fn cfg_combine<E: Element>(v_cond: &Tensor<E>, v_uncond: &Tensor<E>, w: f64) -> Result<Tensor<E>> {
    v_cond.same_shape(v_uncond, "cfg_combine")?;
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    let w = E::from_f64(w);
    v_cond.zip_map(v_uncond, "cfg_combine", |c, u| u + w * (c - u))
}

/// Integrate from `x ~ N(0, I)` at `t = 1` to `t = 0` on a uniform grid.
///
/// When `uncond` is given and `cfg.cfg_scale != 1`, velocities are guided with
/// [`cfg_combine`]; at scale 1 the unconditional field is never evaluated.
pub fn sample_latent<E, V, U>(
    mut velocity: V,
    mut uncond: Option<U>,
    cfg: &SamplerConfig,
    shape: &[usize],
    rng: &mut SeededRng,
) -> Result<Tensor<E>>
where
    E: Element,
    V: FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
    U: FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
{
    cfg.validate()?;
    let x0 = rng.normal_tensor(shape);
    integrate_from(x0, &mut velocity, uncond.as_mut(), cfg, rng)
}

/// [`sample_latent`] from a given starting point at `t = 1`.
pub fn integrate_from<E, V, U>(
    mut x: Tensor<E>,
    velocity: &mut V,
    mut uncond: Option<&mut U>,
    cfg: &SamplerConfig,
    rng: &mut SeededRng,
) -> Result<Tensor<E>>
where
    E: Element,
    V: FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
    U: FnMut(&Tensor<E>, f64) -> Result<Tensor<E>>,
{
    cfg.validate()?;
    let grid = cfg.time_grid();
    for w in grid.windows(2) {
        let (t, dt) = (w[0], w[1] - w[0]);
        let mut v = velocity(&x, t)?;
        if cfg.cfg_scale != 1.0 {
            if let Some(u) = uncond.as_mut() {
                let vu = u(&x, t)?;
                v = cfg_combine(&v, &vu, cfg.cfg_scale)?;
            }
        }
        x = match cfg.mode {
            SamplerMode::Ode => ode_step(&x, &v, dt)?,
            SamplerMode::Sde => em_sde_step(&x, t, dt, &v, cfg, rng)?,
        };
        if !x.all_finite() {
            return Err(Error::NonFinite("sampler step"));
        }
    }
    Ok(x)
}

/// Placeholder type for calls without an unconditional field.
pub type NoGuidance<E> = fn(&Tensor<E>, f64) -> Result<Tensor<E>>;

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[v.len()], v).unwrap()
    }

    #[test]
    fn ode_step_examples() {
        let x = t1(&[1.0, 2.0]);
        assert_eq!(ode_step(&x, &t1(&[0.0, 0.0]), -0.1).unwrap(), x);
        let y = ode_step(&t1(&[1.0]), &t1(&[2.0]), -0.1).unwrap();
        assert!((y.data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn linear_ode_against_exponential() {
        // dx/dt = -x from t=1 (x=1) back to t=0: exact x(0) = e^{1}.
        let cfg = SamplerConfig {
            steps: 1000,
            ..Default::default()
        };
        let mut f = |x: &Tensor<f64>, _t: f64| Ok(x.scale(-1.0));
        let out = integrate_from(t1(&[1.0]), &mut f, None::<&mut NoGuidance<f64>>, &cfg, &mut SeededRng::new(0, 0)).unwrap();
        let exact = std::f64::consts::E;
        assert!(((out.data()[0] - exact) / exact).abs() <= 1e-2);
    }

    #[test]
    fn sde_reduces_to_ode_without_noise() {
        let cfg = SamplerConfig {
            s1: 1.0,
            s2: 0.0,
            sigma_base: 0.0,
            mode: SamplerMode::Sde,
            ..Default::default()
        };
        let mut rng = SeededRng::new(1, 0);
        let x: Tensor<f64> = rng.normal_tensor(&[16]);
        let v: Tensor<f64> = rng.normal_tensor(&[16]);
        let a = em_sde_step(&x, 0.7, -0.1, &v, &cfg, &mut rng).unwrap();
        assert_eq!(a, ode_step(&x, &v, -0.1).unwrap());
        let frozen = SamplerConfig { s1: 0.0, ..cfg };
        assert_eq!(em_sde_step(&x, 0.7, -0.1, &v, &frozen, &mut rng).unwrap(), x);
    }

    #[test]
    fn cfg_examples() {
        let c = t1(&[1.0, 0.3]);
        let u = t1(&[0.0, -7.0]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&t1(&[1.0]), &t1(&[0.0]), 2.0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn time_grid_covers_unit_interval() {
        for steps in [1, 3, 7, 100] {
            let g = SamplerConfig { steps, ..Default::default() }.time_grid();
            assert_eq!(g.len(), steps + 1);
            assert_eq!(g[0], 1.0);
            assert!(g[steps].abs() <= 1e-12);
        }
    }

    #[test]
    fn validation() {
        assert!(SamplerConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { t_floor: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { sigma_base: -1.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig::default().validate().is_ok());
    }
}
