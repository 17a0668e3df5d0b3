use serde::{Deserialize, Serialize};

use super::net::{DenseNet, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over a flat parameter slice.
///
/// `t` is the 1-based step index after increment.
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Moment accumulators for one [`DenseNet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(net: &DenseNet, cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.m
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.v
    }

    /// Applies one update; rejects non-finite gradients before touching anything.
    pub fn step(&mut self, net: &mut DenseNet, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.layers.len() != net.layers.len()
            || grads
                .layers
                .iter()
                .zip(&net.layers)
                .any(|(g, l)| g.w.len() != l.w.len() || g.b.len() != l.b.len())
        {
            return Err(Error::contract("gradient shapes do not match the network"));
        }
        for (i, g) in grads.layers.iter().enumerate() {
            let bad = g
                .w
                .iter()
                .position(|v| !v.is_finite())
                .map(|k| format!("layer {i} weight grad[{k}] = {}", g.w[k]))
                .or_else(|| {
                    g.b.iter()
                        .position(|v| !v.is_finite())
                        .map(|k| format!("layer {i} bias grad[{k}] = {}", g.b[k]))
                });
            if let Some(detail) = bad {
                return Err(Error::NonFinite {
                    context: format!("Adam step {}", self.step + 1),
                    detail,
                });
            }
        }
        self.step += 1;
        for ((layer, g), (m, v)) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(self.m.layers.iter_mut().zip(self.v.layers.iter_mut()))
        {
            adam_update(&mut layer.w, &g.w, &mut m.w, &mut v.w, self.step, lr, &self.cfg);
            adam_update(&mut layer.b, &g.b, &mut m.b, &mut v.b, self.step, lr, &self.cfg);
        }
        if let Some(detail) = net.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("parameters after Adam step {}", self.step),
                detail,
            });
        }
        Ok(())
    }
}

/// Step-decay schedule: `base · factor^(epoch / every)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base: f64,
    pub factor: f64,
    pub every: usize,
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            return self.base;
        }
        self.base * self.factor.powi((epoch / self.every) as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Activation, Layer};

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = [0.7];
        let mut m = [0.5];
        let mut v = [0.25];
        adam_update(&mut p, &[0.0], &mut m, &mut v, 3, 1e-4, &cfg);
        assert!((m[0] - 0.45).abs() < 1e-15);
        assert!((v[0] - 0.24975).abs() < 1e-15);
        // the bias-corrected momentum still moves p; with fresh moments it does not
        let mut p = [0.7];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, 1e-4, &cfg);
        assert_eq!(p[0], 0.7);
    }

    #[test]
    fn first_step_unit_gradient() {
        let cfg = AdamConfig::default();
        let mut p = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 1e-4, &cfg);
        let expected = -1e-4 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn moments_make_the_optimizer_stateful() {
        let cfg = AdamConfig::default();
        let mut a = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut a, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg);
        adam_update(&mut a, &[-0.3], &mut m, &mut v, 2, 1e-3, &cfg);

        let mut b = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut b, &[1.0], &mut m, &mut v, 1, 1e-3, &cfg);
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut b, &[-0.3], &mut m, &mut v, 1, 1e-3, &cfg);
        assert_ne!(a[0], b[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut net = DenseNet::from_layers(vec![Layer {
            rows: 1,
            cols: 2,
            w: vec![0.1, 0.2],
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let before = net.clone();
        let mut st = AdamState::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].w[1] = f64::NAN;
        let err = st.step(&mut net, &g, 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        assert!(err.to_string().contains("weight grad[1]"));
        assert_eq!(net, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn step_counter_increases() {
        let mut net = DenseNet::from_layers(vec![Layer {
            rows: 1,
            cols: 1,
            w: vec![0.1],
            b: vec![0.0],
            act: Activation::Identity,
        }])
        .unwrap();
        let mut st = AdamState::new(&net, AdamConfig::default());
        let mut g = Gradients::zeros_like(&net);
        g.layers[0].w[0] = 1.0;
        for k in 1..=3 {
            st.step(&mut net, &g, 1e-2).unwrap();
            assert_eq!(st.step, k);
        }
        assert_eq!(st.first_moment().layers[0].w.len(), 1);
        assert!(st.second_moment().layers[0].w[0] > 0.0);
    }

    #[test]
    fn schedule_halves_every_period() {
        let s = LrSchedule {
            base: 1e-4,
            factor: 0.5,
            every: 15,
        };
        assert_eq!(s.at_epoch(0), 1e-4);
        assert_eq!(s.at_epoch(14), 1e-4);
        assert_eq!(s.at_epoch(15), 5e-5);
        assert_eq!(s.at_epoch(59), 1.25e-5);
    }
}
