use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, check_input, loss, loss_and_gradients, AdamState, Example, NetworkSpec, NetworkWeights};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 64,
            epochs: 40,
            seed: 0,
            validation_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog(pub Vec<EpochLoss>);

impl LossLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.0 {
            out.push_str(&format!("{},{:e},{:e}\n", e.epoch, e.train_loss, e.val_loss));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss seen.
    pub weights: NetworkWeights,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub log: LossLog,
}

/// Trains from a seeded initialization, holding out `validation_fraction` of
/// the examples for model selection. A single example serves as its own
/// validation set.
pub fn train(examples: &[Example], spec: &NetworkSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if examples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0000_0000_0001);
    order.shuffle(&mut rng);
    let (train_idx, val_idx) = if examples.len() == 1 {
        (vec![0], vec![0])
    } else {
        let n_val = ((config.validation_fraction * examples.len() as f64).round() as usize)
            .clamp(1, examples.len() - 1);
        (order[n_val..].to_vec(), order[..n_val].to_vec())
    };
    let train_set: Vec<&Example> = train_idx.iter().map(|&i| &examples[i]).collect();
    let val_set: Vec<&Example> = val_idx.iter().map(|&i| &examples[i]).collect();
    train_from(NetworkWeights::init(spec, config.seed), &train_set, &val_set, config)
}

/// Mini-batch ADAM from `init` with a fresh optimizer state.
pub fn train_from(
    init: NetworkWeights,
    train_set: &[&Example],
    val_set: &[&Example],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Empty("training or validation set"));
    }
    for ex in train_set.iter().chain(val_set) {
        check_input(&init.spec, &ex.input)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut weights = init;
    let mut state = AdamState::new(weights.params.len());
    let mut best_val_loss = loss(val_set, &weights)?;
    let mut best = weights.clone();
    let mut best_epoch = 0;
    let mut log = LossLog::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| train_set[i]).collect();
            let (batch_loss, grads) = loss_and_gradients(&batch, &weights)?;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: batch_loss,
                });
            }
            adam_step(&mut weights, &grads, &mut state, config).map_err(|e| match e {
                Error::NonFiniteGradient { .. } => Error::Diverged {
                    epoch,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            sum += batch_loss * batch.len() as f64;
        }
        let train_loss = sum / train_set.len() as f64;
        let val_loss = loss(val_set, &weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: val_loss,
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.3e} val {val_loss:.3e}");
        log.0.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val_loss {
            best_val_loss = val_loss;
            best = weights.clone();
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        weights: best,
        best_epoch,
        best_val_loss,
        log,
    })
}
