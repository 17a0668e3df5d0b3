//! Retraining the confidence head on real resampled and synthetic features.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorParams;
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Activation, DenseNet, Gradients, LrSchedule};
use crate::resample::DataPoint;
use crate::rng::{self, derive};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Start from the pretrained head instead of a fresh initialization.
    pub warm_start: bool,
    /// Real points per step; the synthetic batch is sized so both sets are
    /// traversed once per epoch.
    pub batch_size: usize,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        RetrainConfig {
            epochs: 30,
            schedule: LrSchedule {
                base: 1e-4,
                factor: 0.5,
                every: 15,
            },
            warm_start: true,
            batch_size: 64,
        }
    }
}

fn accumulate(head: &DenseNet, points: &[&DataPoint], target: Option<f64>, g: &mut Gradients) -> Result<f64> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let n = points.len() as f64;
    let mut loss = 0.0;
    for p in points {
        let (c, tape) = head.forward(&p.f)?;
        let d = c[0] - target.unwrap_or(p.conf);
        loss += d * d / n;
        head.backward_accumulate(&tape, &[2.0 * d / n], Some(g))?;
    }
    Ok(loss)
}

/// `mean_{D_res} (Conf(f) − p̂)² + mean_{D_syn} (Conf(f̂) − 1)²`, each term
/// averaged over its own set; an empty synthetic set contributes nothing.
pub fn confidence_loss(head: &DenseNet, dres: &[DataPoint], dsyn: &[DataPoint]) -> Result<(f64, Gradients)> {
    let mut g = Gradients::zeros_like(head);
    let real: Vec<&DataPoint> = dres.iter().collect();
    let syn: Vec<&DataPoint> = dsyn.iter().collect();
    let l = accumulate(head, &real, None, &mut g)? + accumulate(head, &syn, Some(1.0), &mut g)?;
    Ok((l, g))
}

#[derive(Debug, Clone)]
pub struct RetrainOutput {
    pub head: DenseNet,
    /// Mean per-step loss for each epoch.
    pub trace: Vec<f64>,
}

pub fn retrain_confidence(
    pretrained: &DenseNet,
    dres: &[DataPoint],
    dsyn: &[DataPoint],
    cfg: &RetrainConfig,
    seed: u64,
) -> Result<RetrainOutput> {
    if dres.is_empty() {
        return Err(Error::data("confidence retraining needs a nonempty resampled pool"));
    }
    let mut head = if cfg.warm_start {
        pretrained.clone()
    } else {
        let hidden: Vec<(usize, Activation)> = pretrained.layers.iter().map(|l| (l.rows, l.act)).collect();
        DenseNet::new(pretrained.input_dim(), &hidden, &mut rng::rng(derive(seed, "init")))?
    };
    let mut st = AdamState::new(&head, AdamConfig::default());
    let mut shuffle = rng::rng(derive(seed, "shuffle"));
    let mut real: Vec<usize> = (0..dres.len()).collect();
    let mut syn: Vec<usize> = (0..dsyn.len()).collect();
    let br = cfg.batch_size.max(1);
    let steps = dres.len().div_ceil(br);
    let bs = dsyn.len().div_ceil(steps);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.at_epoch(epoch);
        real.shuffle(&mut shuffle);
        syn.shuffle(&mut shuffle);
        let mut total = 0.0;
        for s in 0..steps {
            let rb: Vec<&DataPoint> = real[s * br..((s + 1) * br).min(real.len())].iter().map(|&i| &dres[i]).collect();
            let sb: Vec<&DataPoint> = if bs == 0 {
                Vec::new()
            } else {
                syn[(s * bs).min(syn.len())..((s + 1) * bs).min(syn.len())].iter().map(|&i| &dsyn[i]).collect()
            };
            let mut g = Gradients::zeros_like(&head);
            let l = accumulate(&head, &rb, None, &mut g)? + accumulate(&head, &sb, Some(1.0), &mut g)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("confidence retraining, epoch {epoch}"),
                    detail: format!("loss = {l}"),
                });
            }
            total += l;
            st.step(&mut head, &g, lr)?;
        }
        trace.push(total / steps as f64);
    }
    Ok(RetrainOutput { head, trace })
}

/// The detector with its confidence head replaced.
pub fn plug_back(detector: &DetectorParams, head: DenseNet) -> Result<DetectorParams> {
    detector.with_conf_head(head)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn head() -> DenseNet {
        DenseNet::new(3, &[(4, Activation::Relu), (1, Activation::Sigmoid)], &mut rng::rng(5)).unwrap()
    }

    fn pt(f: [f64; 3], conf: f64) -> DataPoint {
        DataPoint { f: f.to_vec(), conf, class: 0 }
    }

    #[test]
    fn empty_synthetic_set_is_the_real_term() {
        let h = head();
        let real = vec![pt([0.1, 0.2, 0.3], 0.9), pt([-1.0, 0.0, 2.0], 0.1)];
        let (l, _) = confidence_loss(&h, &real, &[]).unwrap();
        let want: f64 = real
            .iter()
            .map(|p| (h.predict(&p.f).unwrap()[0] - p.conf).powi(2))
            .sum::<f64>()
            / 2.0;
        assert!((l - want).abs() < 1e-15);
    }

    #[test]
    fn terms_are_normalized_per_set() {
        let h = head();
        let real = vec![pt([0.1, 0.2, 0.3], 0.9)];
        let one = vec![pt([1.0, 1.0, 1.0], 1.0)];
        let many = vec![one[0].clone(); 7];
        let (a, _) = confidence_loss(&h, &real, &one).unwrap();
        let (b, _) = confidence_loss(&h, &real, &many).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn zero_epochs_returns_the_pretrained_head() {
        let h = head();
        let cfg = RetrainConfig { epochs: 0, ..RetrainConfig::default() };
        let out = retrain_confidence(&h, &[pt([0.0; 3], 0.5)], &[], &cfg, 1).unwrap();
        assert_eq!(out.head, h);
        assert!(retrain_confidence(&h, &[], &[], &cfg, 1).is_err());
    }
}
