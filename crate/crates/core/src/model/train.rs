//! Mini-batch AdamW training with a one-step learning-rate drop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Model;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, Targets, Weighting};
use crate::scene::SceneRecord;
use crate::tensor::{AdamW, Tape, Tensor};

pub const LOSS_CSV_HEADER: &str = "epoch,l_zvp,l_hl,l_fov,l_class,l_score,total";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Shuffling seed.
    pub seed: u64,
    pub weighting: Weighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 2e-4,
            batch_size: 4,
            weight_decay: 1e-4,
            seed: 0,
            weighting: Weighting::CameraFirst,
        }
    }
}

/// Base rate for the first two thirds of the epochs, a tenth of it after.
pub fn learning_rate(base: f64, epoch: usize, epochs: usize) -> f64 {
    let drop = (epochs as f64 * 2.0 / 3.0).round() as usize;
    if epoch < drop {
        base
    } else {
        base / 10.0
    }
}

/// Mean losses over one epoch (1-based), as seen during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    /// Samples whose horizon term was dropped this epoch.
    pub hl_excluded: usize,
}

/// Trains in place. `on_epoch` sees each epoch's summary as it finishes.
pub fn train(
    model: &mut Model,
    data: &[SceneRecord],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<Vec<EpochLosses>> {
    if data.is_empty() {
        return Err(Error::contract("training needs at least one record"));
    }
    if config.batch_size == 0 {
        return Err(Error::contract("batch size must be ≥ 1"));
    }
    for r in data {
        model.check_record(r)?;
    }
    let targets = data
        .iter()
        .map(|r| Targets::from_record(r, model.config.n_lines))
        .collect::<Result<Vec<_>>>()?;

    let mut opt = AdamW::new(config.lr);
    opt.weight_decay = config.weight_decay;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        opt.lr = learning_rate(config.lr, epoch, config.epochs);
        order.shuffle(&mut rng);
        let mut sum = LossBreakdown::default();
        let mut hl_excluded = 0;
        for batch in order.chunks(config.batch_size) {
            let mut acc: Vec<Vec<f64>> = model.params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            for &i in batch {
                let mut tape = Tape::new();
                let p = model.params.bind(&mut tape, true);
                let pred = model.forward(&mut tape, &p, &data[i].image, &data[i].lines)?;
                let loss = total_loss(&mut tape, &pred, &targets[i], config.weighting)?;
                if !loss.breakdown.is_finite() {
                    return Err(Error::Diverged { epoch: epoch + 1, step });
                }
                sum.accumulate(&loss.breakdown);
                hl_excluded += usize::from(loss.hl_excluded);
                let grads = tape.backward(loss.total)?;
                for (a, g) in acc.iter_mut().zip(p.gradients(&grads)) {
                    a.iter_mut().zip(g.data()).for_each(|(a, g)| *a += g);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let grads: Vec<Tensor> = acc
                .into_iter()
                .zip(model.params.tensors())
                .map(|(a, t)| Tensor::new(t.shape().to_vec(), a.into_iter().map(|g| g * scale).collect()))
                .collect::<Result<_>>()?;
            opt.step(model.params.tensors_mut(), &grads)?;
            step += 1;
        }
        let summary = EpochLosses {
            epoch: epoch + 1,
            lr: opt.lr,
            losses: sum.scaled(1.0 / data.len() as f64),
            hl_excluded,
        };
        on_epoch(&summary);
        history.push(summary);
    }
    Ok(history)
}

pub fn write_loss_csv(epochs: &[EpochLosses], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for e in epochs {
        let l = &e.losses;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            e.epoch, l.l_zvp, l.l_hl, l.l_fov, l.l_class, l.l_score, l.total
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_drops_at_two_thirds() {
        assert_eq!(learning_rate(2e-4, 19, 30), 2e-4);
        assert_eq!(learning_rate(2e-4, 20, 30), 2e-5);
        assert_eq!(learning_rate(1.0, 0, 1), 1.0);
    }
}
