use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kinematics::extract_params;
use crate::regressor::{loss, train_from, Example, LossLog, NetworkSpec, NetworkWeights, TrainConfig};
use crate::render::splat_metric;

use super::{
    generate_dataset, mix_seed, predict_iterative, DataRecord, Dataset, GenerateConfig, Observer,
    Provenance, Split,
};

const AUGMENT_STREAM: u64 = 0x6175_6700;
const HOLDOUT_STREAM: u64 = 0x686f_6c00;
const RETRAIN_STREAM: u64 = 0x7274_7200;

#[derive(Clone, Debug, PartialEq)]
pub struct LoopConfig {
    pub channels: [usize; 5],
    /// Records augmented per outer round.
    pub n_aug: usize,
    /// Outer rounds after the initial training; 0 gives the Baseline.
    pub outer_rounds_max: usize,
    /// Relative change of the validation loss below which the loop stops.
    pub stop_epsilon: f64,
    /// Initial training; its seed also seeds initialization and augmentation.
    pub train: TrainConfig,
    /// Epochs of each warm-started retraining.
    pub retrain_epochs: usize,
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(self.stop_epsilon >= 0.0) {
            return Err(Error::Config("stop_epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    /// No outer rounds were requested.
    Baseline,
    Plateau { round: usize },
    MaxRounds,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    /// Prediction steps used to augment in this round (0 for the initial training).
    pub n_pred: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_augmented: usize,
    /// Augmented records dropped because nothing stayed in view.
    pub n_dropped: usize,
    pub mean_projection_residual: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Validation loss on generated records only, comparable across rounds.
    pub val_generated_loss: f64,
    pub log: LossLog,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub rounds: Vec<RoundReport>,
    pub stop: StopReason,
}

impl RunReport {
    pub fn n_pred_sequence(&self) -> Vec<usize> {
        self.rounds.iter().skip(1).map(|r| r.n_pred).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "round,n_pred,n_train,n_val,n_augmented,n_dropped,mean_projection_residual,best_epoch,best_val_loss,val_generated_loss,seconds\n",
        );
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:e},{},{:e},{:e},{:.3}",
                r.round,
                r.n_pred,
                r.n_train,
                r.n_val,
                r.n_augmented,
                r.n_dropped,
                r.mean_projection_residual,
                r.best_epoch,
                r.best_val_loss,
                r.val_generated_loss,
                r.seconds
            );
        }
        out
    }

    /// Per-epoch losses of every round, `round,epoch,train_loss,val_loss`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("round,epoch,train_loss,val_loss\n");
        for r in &self.rounds {
            for e in &r.log.0 {
                let _ = writeln!(out, "{},{},{:e},{:e}", r.round, e.epoch, e.train_loss, e.val_loss);
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            let _ = writeln!(
                out,
                "round {}: n_pred {}, {} train / {} val, +{} augmented, val loss {:.4e} (generated {:.4e}), {:.1} s",
                r.round,
                r.n_pred,
                r.n_train,
                r.n_val,
                r.n_augmented,
                r.best_val_loss,
                r.val_generated_loss,
                r.seconds
            );
        }
        let _ = writeln!(out, "stopped: {:?}", self.stop);
        out
    }
}

#[derive(Clone, Debug)]
pub struct RunResult {
    /// Weights after the initial training only.
    pub baseline: NetworkWeights,
    pub weights: NetworkWeights,
    pub report: RunReport,
}

/// Runs the network on `n_aug` generated training records, starting each
/// from its own label, and returns the transformed observations labelled
/// with the cumulative transform and the original configuration.
pub fn augment(
    dataset: &Dataset,
    w: &NetworkWeights,
    n_aug: usize,
    n_pred: usize,
    round: u32,
    seed: u64,
) -> Result<(Vec<DataRecord>, usize)> {
    let obs = dataset.observer()?;
    let pool: Vec<usize> = dataset
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Train && r.provenance == Provenance::Generated)
        .map(|(i, _)| i)
        .collect();
    if n_aug > pool.len() {
        return Err(Error::Config(format!(
            "n_aug = {n_aug} exceeds the {} generated training records",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ AUGMENT_STREAM, u64::from(round)));
    let mut chosen: Vec<usize> = index::sample(&mut rng, pool.len(), n_aug)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    chosen.sort_unstable();
    let produced: Vec<Result<Option<DataRecord>>> = chosen
        .par_iter()
        .map(|&i| augment_one(&dataset.records[i], w, n_pred, round, &obs, i))
        .collect();
    let mut out = Vec::with_capacity(n_aug);
    let mut dropped = 0;
    for r in produced {
        match r? {
            Some(rec) => out.push(rec),
            None => dropped += 1,
        }
    }
    Ok((out, dropped))
}

fn augment_one(
    rec: &DataRecord,
    w: &NetworkWeights,
    n_pred: usize,
    round: u32,
    obs: &Observer,
    id: usize,
) -> Result<Option<DataRecord>> {
    let cloud = rec.cloud(&obs.camera);
    let pred = predict_iterative(&rec.depth, &cloud, &rec.transform, w, n_pred, obs, id)?;
    if pred.depth.occupied() == 0 {
        return Ok(None);
    }
    let (theta, residual) = extract_params(&pred.cumulative, &obs.task.schema);
    Ok(Some(DataRecord {
        depth: pred.depth,
        cloud_depth: splat_metric(&pred.cloud, &obs.camera),
        theta,
        gamma: rec.gamma.clone(),
        transform: pred.cumulative,
        residual,
        provenance: Provenance::Augmented(round),
        split: Split::Train,
        source_index: rec.source_index,
    }))
}

/// Initial training followed by rounds of augmentation and warm-started
/// retraining. Augmented records are appended to `dataset`. `on_round` sees
/// every finished round with its weights.
pub fn train_loop(
    dataset: &mut Dataset,
    config: &LoopConfig,
    on_round: &mut dyn FnMut(&RoundReport, &NetworkWeights) -> Result<()>,
) -> Result<RunResult> {
    config.validate()?;
    let obs = dataset.observer()?;
    let (w, h) = obs.net_size();
    let spec = NetworkSpec::new(w, h, config.channels, obs.task.schema.len())?;
    let seed = config.train.seed;

    // Validation holds out whole source records, so augmented descendants of a
    // validation record never reach the training set.
    let mut sources: Vec<u32> = dataset
        .split(Split::Train)
        .filter(|r| r.provenance == Provenance::Generated)
        .map(|r| r.source_index)
        .collect();
    if sources.is_empty() {
        return Err(Error::Empty("training split"));
    }
    sources.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, HOLDOUT_STREAM)));
    let holdout: HashSet<u32> = if sources.len() == 1 {
        HashSet::new()
    } else {
        let n_val = ((config.train.validation_fraction * sources.len() as f64).round() as usize)
            .clamp(1, sources.len() - 1);
        sources[..n_val].iter().copied().collect()
    };

    let mut rounds = Vec::new();
    let start = Instant::now();
    let (baseline, report) = fit(dataset, &holdout, NetworkWeights::init(&spec, seed), &config.train, 0, 0, (0, 0, 0.0))?;
    log::info!("initial training: val loss {:.4e} in {:.1} s", report.best_val_loss, start.elapsed().as_secs_f64());
    on_round(&report, &baseline)?;
    let mut previous = report.val_generated_loss;
    rounds.push(report);

    let mut weights = baseline.clone();
    let mut stop = if config.outer_rounds_max == 0 {
        StopReason::Baseline
    } else {
        StopReason::MaxRounds
    };
    for round in 1..=config.outer_rounds_max {
        let start = Instant::now();
        let n_pred = round;
        let (new, dropped) = augment(dataset, &weights, config.n_aug, n_pred, round as u32, seed)?;
        let added = new.len();
        let residual = if added == 0 {
            0.0
        } else {
            new.iter().map(|r| r.residual).sum::<f64>() / added as f64
        };
        dataset.records.extend(new);
        let retrain = TrainConfig {
            epochs: config.retrain_epochs,
            seed: mix_seed(seed ^ RETRAIN_STREAM, round as u64),
            ..config.train.clone()
        };
        let (next, report) = fit(dataset, &holdout, weights, &retrain, round, n_pred, (added, dropped, residual))?;
        weights = next;
        log::info!(
            "round {round}: +{added} augmented, val loss {:.4e} in {:.1} s",
            report.best_val_loss,
            start.elapsed().as_secs_f64()
        );
        on_round(&report, &weights)?;
        let current = report.val_generated_loss;
        rounds.push(report);
        if previous > 0.0 && ((previous - current).abs() / previous) < config.stop_epsilon {
            stop = StopReason::Plateau { round };
            break;
        }
        previous = current;
    }
    Ok(RunResult {
        baseline,
        weights,
        report: RunReport { rounds, stop },
    })
}

fn fit(
    dataset: &Dataset,
    holdout: &HashSet<u32>,
    init: NetworkWeights,
    config: &TrainConfig,
    round: usize,
    n_pred: usize,
    (n_augmented, n_dropped, residual): (usize, usize, f64),
) -> Result<(NetworkWeights, RoundReport)> {
    let start = Instant::now();
    let mut train: Vec<Example> = Vec::new();
    let mut val: Vec<Example> = Vec::new();
    let mut val_generated = Vec::new();
    for r in dataset.split(Split::Train) {
        if holdout.contains(&r.source_index) {
            if r.provenance == Provenance::Generated {
                val_generated.push(val.len());
            }
            val.push(r.example());
        } else {
            train.push(r.example());
        }
    }
    let train_refs: Vec<&Example> = train.iter().collect();
    let val_refs: Vec<&Example> = if val.is_empty() { train_refs.clone() } else { val.iter().collect() };
    let out = train_from(init, &train_refs, &val_refs, config)?;
    let gen_refs: Vec<&Example> = if val_generated.is_empty() {
        val_refs.clone()
    } else {
        val_generated.iter().map(|&i| &val[i]).collect()
    };
    let val_generated_loss = loss(&gen_refs, &out.weights)?;
    Ok((
        out.weights,
        RoundReport {
            round,
            n_pred,
            n_train: train_refs.len(),
            n_val: val_refs.len(),
            n_augmented,
            n_dropped,
            mean_projection_residual: residual,
            best_epoch: out.best_epoch,
            best_val_loss: out.best_val_loss,
            val_generated_loss,
            log: out.log,
            seconds: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Generates a dataset and runs [`train_loop`] on it.
pub fn run(obs: &Observer, generate: &GenerateConfig, config: &LoopConfig) -> Result<(Dataset, RunResult)> {
    let mut dataset = generate_dataset(obs, generate)?;
    let result = train_loop(&mut dataset, config, &mut |_, _| Ok(()))?;
    Ok((dataset, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::tests::observer;
    use crate::scene::Task;

    fn small_config(rounds: usize) -> LoopConfig {
        LoopConfig {
            channels: [2, 2, 2, 2, 2],
            n_aug: 4,
            outer_rounds_max: rounds,
            stop_epsilon: 0.0,
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 5,
                ..TrainConfig::default()
            },
            retrain_epochs: 1,
        }
    }

    #[test]
    fn zero_rounds_is_the_baseline() {
        let obs = observer(Task::BoxA);
        let (ds, result) = run(&obs, &GenerateConfig::new(20, 1), &small_config(0)).unwrap();
        assert_eq!(result.report.stop, StopReason::Baseline);
        assert_eq!(result.report.rounds.len(), 1);
        assert_eq!(result.baseline, result.weights);
        assert!(ds.records.iter().all(|r| r.provenance == Provenance::Generated));
    }

    #[test]
    fn rounds_increment_n_pred_and_keep_test_clean() {
        let obs = observer(Task::BoxB);
        let (ds, result) = run(&obs, &GenerateConfig::new(20, 2), &small_config(3)).unwrap();
        assert_eq!(result.report.n_pred_sequence(), vec![1, 2, 3]);
        assert_eq!(result.report.stop, StopReason::MaxRounds);
        for r in &ds.records {
            if let Provenance::Augmented(_) = r.provenance {
                assert_eq!(r.split, Split::Train);
                let src = &ds.records[r.source_index as usize];
                assert_eq!(src.split, Split::Train);
                assert_eq!(src.gamma, r.gamma);
            }
        }
        assert_eq!(ds.count(Split::Test), 4);
        let csv = result.report.to_csv();
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn zero_network_augments_with_the_original_label() {
        let obs = observer(Task::BoxC);
        let ds = generate_dataset(&obs, &GenerateConfig::new(10, 3)).unwrap();
        let (w, h) = obs.net_size();
        let spec = NetworkSpec::new(w, h, [2, 2, 2, 2, 2], 5).unwrap();
        let (recs, dropped) = augment(&ds, &NetworkWeights::zeros(&spec), 5, 2, 1, 9).unwrap();
        assert_eq!(dropped, 0);
        for r in &recs {
            let src = &ds.records[r.source_index as usize];
            assert_eq!(r.transform, src.transform);
            for (a, b) in r.theta.iter().zip(&src.theta) {
                assert!((a - b).abs() < 1e-12);
            }
            assert!(r.residual < 1e-12);
        }
    }

    #[test]
    fn augmentation_is_seeded() {
        let obs = observer(Task::BoxA);
        let ds = generate_dataset(&obs, &GenerateConfig::new(30, 3)).unwrap();
        let (w, h) = obs.net_size();
        let spec = NetworkSpec::new(w, h, [2, 2, 2, 2, 2], 2).unwrap();
        let net = NetworkWeights::init(&spec, 1);
        let a = augment(&ds, &net, 6, 1, 1, 9).unwrap();
        let b = augment(&ds, &net, 6, 1, 1, 9).unwrap();
        let c = augment(&ds, &net, 6, 1, 2, 9).unwrap();
        assert_eq!(a, b);
        let src = |v: &(Vec<DataRecord>, usize)| v.0.iter().map(|r| r.source_index).collect::<Vec<_>>();
        assert_ne!(src(&a), src(&c));
        assert!(augment(&ds, &net, 25, 1, 1, 9).is_err());
    }
}
