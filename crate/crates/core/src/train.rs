//! Minibatch SGD with momentum for toy networks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::dendrite::ConvMode;
use crate::error::{Error, Result};
use crate::net::{LayerGrad, Network};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Shuffle seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy over the whole training set after the epoch's updates.
    pub train_accuracy: f64,
}

/// Fraction of samples classified correctly.
pub fn accuracy(net: &Network, data: &Dataset, mode: ConvMode) -> Result<f64> {
    let hits = par::map_range(data.len(), |i| net.predict(&data.inputs[i], mode).map(|p| p == data.labels[i]))
        .into_iter()
        .collect::<Result<Vec<bool>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// Train `net` in place. Per-sample gradients are computed concurrently and
/// summed in sample order, so results do not depend on the thread count.
pub fn train(net: &mut Network, data: &Dataset, mode: ConvMode, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let classes = net.spec.num_classes()?;
    if classes != data.classes {
        return Err(Error::shape("train: classes", classes, data.classes));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<[Vec<f64>; 2]> = Vec::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = par::map_slice(batch, |&i| net.loss_and_grads(&data.inputs[i], data.labels[i], mode));
            let mut total: Option<Vec<LayerGrad>> = None;
            for r in per_sample {
                let (loss, grads) = r?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                loss_sum += loss;
                match &mut total {
                    None => total = Some(grads),
                    Some(t) => add_grads(t, &grads),
                }
            }
            let total = total.expect("chunks are non-empty");
            if velocity.is_empty() {
                velocity = total
                    .iter()
                    .map(|g| match g {
                        LayerGrad::Conv(w) => [vec![0.0; w.len()], Vec::new()],
                        LayerGrad::Dense { w, b } => [vec![0.0; w.len()], vec![0.0; b.len()]],
                        LayerGrad::None => [Vec::new(), Vec::new()],
                    })
                    .collect();
            }
            let scale = 1.0 / batch.len() as f64;
            let (lr, mu) = (cfg.learning_rate, cfg.momentum);
            net.apply_update(
                |layer, slot, idx, g| {
                    let v = &mut velocity[layer][slot][idx];
                    *v = mu * *v + g * scale;
                    lr * *v
                },
                &total,
            );
        }
        let mean_loss = loss_sum / data.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        history.push(EpochStats {
            epoch,
            mean_loss,
            train_accuracy: accuracy(net, data, mode)?,
        });
    }
    Ok(history)
}

fn add_grads(acc: &mut [LayerGrad], g: &[LayerGrad]) {
    for (a, b) in acc.iter_mut().zip(g) {
        match (a, b) {
            (LayerGrad::Conv(x), LayerGrad::Conv(y)) => x.iter_mut().zip(y).for_each(|(p, q)| *p += q),
            (LayerGrad::Dense { w, b }, LayerGrad::Dense { w: gw, b: gb }) => {
                w.iter_mut().zip(gw).for_each(|(p, q)| *p += q);
                b.iter_mut().zip(gb).for_each(|(p, q)| *p += q);
            }
            _ => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::separable;
    use crate::net::{NetSpec, WeightArchive};
    use crate::partition::CrossbarConfig;

    /// Plain logistic regression by full-batch gradient descent.
    fn logistic_oracle(data: &Dataset) -> f64 {
        let dim = data.inputs[0].len();
        let mut w = vec![0.0; dim + 1];
        for _ in 0..500 {
            let mut g = vec![0.0; dim + 1];
            for (x, &y) in data.inputs.iter().zip(&data.labels) {
                let z = w[dim] + x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
                for (gi, xi) in g.iter_mut().zip(x.data()) {
                    *gi += err * xi;
                }
                g[dim] += err;
            }
            for (wi, gi) in w.iter_mut().zip(&g) {
                *wi -= 0.5 * gi / data.len() as f64;
            }
        }
        let hits = data
            .inputs
            .iter()
            .zip(&data.labels)
            .filter(|(x, &y)| {
                let z = w[dim] + x.data().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                usize::from(z > 0.0) == y
            })
            .count();
        hits as f64 / data.len() as f64
    }

    fn small_net() -> NetSpec {
        NetSpec::from_toml(
            r#"
            input = [1, 4, 4]
            [[layers]]
            kind = "conv"
            c_out = 4
            kernel = [3, 3]
            padding = 1
            [[layers]]
            kind = "dense"
            out = 2
            "#,
        )
        .unwrap()
    }

    #[test]
    fn separable_set_is_learned() {
        let data = separable(200, [1, 4, 4], 0.5, 11).unwrap();
        assert!(logistic_oracle(&data) >= 0.99);
        let spec = small_net();
        let w = WeightArchive::init(&spec, 1).unwrap();
        let mut net = Network::new(&spec, &w, CrossbarConfig::square(4)).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let hist = train(&mut net, &data, ConvMode::Cadc, &cfg).unwrap();
        assert_eq!(hist.len(), 30);
        let first_hit = hist.iter().position(|e| e.train_accuracy >= 0.95);
        assert!(first_hit.is_some(), "{hist:?}");
    }

    #[test]
    fn divergence_is_reported() {
        let data = separable(32, [1, 4, 4], 0.5, 2).unwrap();
        let spec = small_net();
        let w = WeightArchive::init(&spec, 1).unwrap();
        let mut net = Network::new(&spec, &w, CrossbarConfig::square(4)).unwrap();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e200,
            momentum: 0.0,
            ..TrainConfig::default()
        };
        match train(&mut net, &data, ConvMode::VConv, &cfg) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
