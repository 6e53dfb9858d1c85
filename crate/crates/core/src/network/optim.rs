use crate::error::{Error, Result};

use super::{ClassifierParams, GeneratorParams, ParamBlocks};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moments of one parameter block and its own step count, so
/// blocks updated on different schedules keep correct bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &AdamConfig) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub generator: Vec<AdamMoments>,
    pub classifier: Vec<AdamMoments>,
}

fn moments_for(p: &impl ParamBlocks) -> Vec<AdamMoments> {
    p.blocks()
        .iter()
        .map(|(_, b)| AdamMoments::new(b.len()))
        .collect()
}

fn check_grads(grads: &impl ParamBlocks, params: &impl ParamBlocks) -> Result<()> {
    for ((name, g), (_, p)) in grads.blocks().iter().zip(params.blocks().iter()) {
        if g.len() != p.len() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                found: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient block {name}")));
        }
    }
    Ok(())
}

fn apply<P: ParamBlocks>(
    moments: &mut [AdamMoments],
    params: &mut P,
    grads: &P,
    cfg: &AdamConfig,
) -> Result<()> {
    check_grads(grads, params)?;
    let gblocks = grads.blocks();
    for ((_, p), (mom, (_, g))) in params
        .blocks_mut()
        .into_iter()
        .zip(moments.iter_mut().zip(gblocks.iter()))
    {
        mom.update(p, g, cfg);
    }
    Ok(())
}

impl OptimizerState {
    pub fn new(gen: &GeneratorParams, cls: &ClassifierParams, config: AdamConfig) -> Self {
        Self {
            config,
            generator: moments_for(gen),
            classifier: moments_for(cls),
        }
    }

    pub fn step_generator(
        &mut self,
        gen: &mut GeneratorParams,
        grads: &GeneratorParams,
    ) -> Result<()> {
        let cfg = self.config;
        apply(&mut self.generator, gen, grads, &cfg)
    }

    pub fn step_classifier(
        &mut self,
        cls: &mut ClassifierParams,
        grads: &ClassifierParams,
    ) -> Result<()> {
        let cfg = self.config;
        apply(&mut self.classifier, cls, grads, &cfg)
    }
}

/// Bias-corrected Adam update of both networks at learning rate `lr`.
/// Gradients are validated before anything is modified.
pub fn adam_step(
    gen: &mut GeneratorParams,
    cls: &mut ClassifierParams,
    grad_gen: &GeneratorParams,
    grad_cls: &ClassifierParams,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    check_grads(grad_gen, gen)?;
    check_grads(grad_cls, cls)?;
    state.config.lr = lr;
    state.step_generator(gen, grad_gen)?;
    state.step_classifier(cls, grad_cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut gen = GeneratorParams::zeros(2, 3, 2);
        gen.w1.fill(0.3);
        let mut cls = ClassifierParams::zeros(2, 2, 2);
        cls.b2.fill(-1.0);
        let before = (gen.clone(), cls.clone());
        let mut state = OptimizerState::new(&gen, &cls, AdamConfig::default());
        let (gg, gc) = (gen.zeros_like(), cls.zeros_like());
        adam_step(&mut gen, &mut cls, &gg, &gc, &mut state, 1e-3).unwrap();
        assert_eq!((gen, cls), before);
    }

    #[test]
    fn first_step_matches_scalar_formula() {
        let cfg = AdamConfig::with_lr(0.01);
        let g = 0.37;
        let mut p = [2.0];
        let mut mom = AdamMoments::new(1);
        mom.update(&mut p, &[g], &cfg);
        // m_hat = g, v_hat = g^2 after bias correction
        let m_hat = (1.0 - 0.9) * g / (1.0 - 0.9);
        let v_hat = (1.0 - 0.999) * g * g / (1.0 - 0.999);
        let want = 2.0 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - want).abs() < 1e-15);
        assert!((p[0] - (2.0 - 0.01)).abs() < 1e-9);
        assert_eq!(mom.t, 1);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let cfg = AdamConfig::with_lr(0.1);
        let mut x = [5.0];
        let mut mom = AdamMoments::new(1);
        for _ in 0..200 {
            let g = 2.0 * x[0];
            mom.update(&mut x, &[g], &cfg);
        }
        assert!(x[0].abs() < 0.5, "x = {}", x[0]);
    }

    #[test]
    fn non_finite_gradient_names_block_and_changes_nothing() {
        let mut gen = GeneratorParams::zeros(1, 1, 1);
        let mut cls = ClassifierParams::zeros(1, 1, 2);
        let mut state = OptimizerState::new(&gen, &cls, AdamConfig::default());
        let mut gg = gen.zeros_like();
        gg.b1[0] = 0.5;
        let mut gc = cls.zeros_like();
        gc.w2[[0, 1]] = f64::NAN;
        let err = adam_step(&mut gen, &mut cls, &gg, &gc, &mut state, 1e-3).unwrap_err();
        assert!(err.to_string().contains("cls.w2"), "{err}");
        assert_eq!(gen, GeneratorParams::zeros(1, 1, 1));
        assert_eq!(state.generator[1].t, 0);
    }
}
