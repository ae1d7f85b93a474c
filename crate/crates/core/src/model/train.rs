use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{augment_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::checkpoint::{save_checkpoint, Checkpoint};
use crate::model::network::{argmax_rows, ModelParams, Network};
use crate::model::optim::{lr_at, nesterov_step, TrainConfig};
use crate::model::scalar::Scalar;
use crate::model::ConvNetConfig;

/// Images per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Rate used by the first update of the epoch.
    pub lr: f64,
    /// Mean training loss (cross-entropy plus L2) over the epoch's batches,
    /// weighted by batch size.
    pub train_loss: f64,
    /// Error of the training-mode predictions made during the epoch.
    pub train_error: f64,
    /// Error on each evaluation set after the epoch, keyed by set name.
    #[serde(default)]
    pub eval_errors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("history serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("history parse: {e}")))
    }

    /// One row per epoch; evaluation columns in name order.
    pub fn to_csv(&self) -> String {
        let names: Vec<&String> = self.epochs.first().map(|r| r.eval_errors.keys().collect()).unwrap_or_default();
        let mut out = String::from("epoch,lr,train_loss,train_error");
        for n in &names {
            let _ = write!(out, ",{n}_error");
        }
        out.push('\n');
        for r in &self.epochs {
            let _ = write!(out, "{},{},{},{}", r.epoch, r.lr, r.train_loss, r.train_error);
            for n in &names {
                let _ = write!(out, ",{}", r.eval_errors.get(*n).copied().unwrap_or(f64::NAN));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    /// Where to write `diverged.ckpt` if the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

/// Everything needed to continue training at an epoch boundary. The
/// shuffling and augmentation streams of epoch `e` are derived from
/// `(train.seed, e)`, so no generator state is carried.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub network: Network,
    pub train: TrainConfig,
    pub params: ModelParams<f32>,
    pub velocity: Vec<Vec<f32>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Parameter updates made so far.
    pub updates: u64,
}

impl TrainState {
    pub fn new(model: &ConvNetConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let network = Network::new(model)?;
        let params = network.init_params::<f32>();
        let velocity = params.zeros_like();
        Ok(TrainState {
            network,
            train: train.clone(),
            params,
            velocity,
            epoch: 0,
            updates: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.network.config().clone(),
            train: self.train.clone(),
            epoch: self.epoch,
            updates: self.updates,
            params: self.params.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        let network = Network::new(&ckpt.model)?;
        network.check_params(&ckpt.params)?;
        Ok(TrainState {
            network,
            train: ckpt.train,
            params: ckpt.params,
            velocity: ckpt.velocity,
            epoch: ckpt.epoch,
            updates: ckpt.updates,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.train.epochs
    }

    /// Trains until `until` epochs are complete (capped at the configured
    /// count) and returns one record per epoch run.
    pub fn run(
        &mut self,
        dataset: &LabeledDataset,
        eval_sets: &[(&str, &LabeledDataset)],
        options: &TrainOptions,
        until: usize,
    ) -> Result<Vec<EpochRecord>> {
        let config = self.network.config();
        if dataset.shape() != config.input {
            return Err(Error::ShapeMismatch {
                expected: config.input.to_string(),
                actual: dataset.shape().to_string(),
            });
        }
        if dataset.classes() > config.classes {
            return Err(Error::InvalidParameter(format!(
                "dataset has {} classes, model {}",
                dataset.classes(),
                config.classes
            )));
        }
        if dataset.is_empty() {
            return Err(Error::InvalidParameter("empty training set".into()));
        }
        let shape = dataset.shape();
        let len = shape.len();
        let pixels: Vec<f32> = dataset.pixels().iter().map(|&v| v as f32).collect();
        let mut records = Vec::new();
        while self.epoch < until.min(self.train.epochs) {
            let epoch = self.epoch;
            let mut rng = ChaCha8Rng::seed_from_u64(self.train.seed);
            rng.set_stream(epoch as u64 + 1);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            let first_lr = lr_at(&self.train, epoch, self.updates);
            let (mut loss_sum, mut wrong) = (0.0, 0usize);
            for idx in order.chunks(self.train.batch_size) {
                let mut batch = Vec::with_capacity(idx.len() * len);
                let mut labels = Vec::with_capacity(idx.len());
                for &i in idx {
                    batch.extend_from_slice(&pixels[i * len..(i + 1) * len]);
                    labels.push(dataset.labels()[i]);
                }
                if self.train.augment {
                    batch = augment_batch(&batch, shape, rng.next_u64())?;
                }
                let lr = lr_at(&self.train, epoch, self.updates);
                let step = self
                    .network
                    .loss_and_grad(&self.params, &batch, &labels, self.train.l2, options.exec)
                    .map_err(|e| match e {
                        Error::Numerical(_) => self.diverged(e, options),
                        other => other,
                    })?;
                nesterov_step(&mut self.params.tensors, &mut self.velocity, &step.grads, lr, self.train.momentum);
                self.params.update_running(&step.batch_stats);
                self.updates += 1;
                if !self.params.is_finite() {
                    return Err(self.diverged(Error::Numerical("non-finite parameters after update".into()), options));
                }
                loss_sum += step.loss * idx.len() as f64;
                let predicted = argmax_rows(&step.logits, config.classes);
                wrong += predicted.iter().zip(&labels).filter(|(p, l)| **p != **l as usize).count();
            }
            self.epoch += 1;
            let mut eval_errors = BTreeMap::new();
            for (name, set) in eval_sets {
                eval_errors.insert(name.to_string(), evaluate(&self.network, &self.params, set, options.exec)?);
            }
            records.push(EpochRecord {
                epoch,
                lr: first_lr,
                train_loss: loss_sum / dataset.len() as f64,
                train_error: wrong as f64 / dataset.len() as f64,
                eval_errors,
            });
        }
        Ok(records)
    }

    fn diverged(&self, cause: Error, options: &TrainOptions) -> Error {
        let mut message = format!("training diverged at epoch {} update {}: {cause}", self.epoch, self.updates);
        if let Some(dir) = &options.dump_dir {
            let path = dir.join("diverged.ckpt");
            match save_checkpoint(&self.to_checkpoint(), &path) {
                Ok(()) => {
                    let _ = write!(message, "; state dumped to {}", path.display());
                }
                Err(e) => {
                    let _ = write!(message, "; state dump failed: {e}");
                }
            }
        }
        Error::Numerical(message)
    }
}

/// Trains a fresh network for the configured number of epochs.
pub fn train(
    dataset: &LabeledDataset,
    eval_sets: &[(&str, &LabeledDataset)],
    model: &ConvNetConfig,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<(TrainState, TrainHistory)> {
    let mut state = TrainState::new(model, config)?;
    let epochs = state.run(dataset, eval_sets, options, config.epochs)?;
    Ok((state, TrainHistory { epochs }))
}

/// Predicted class per image (argmax of the evaluation-mode logits, ties to
/// the lowest index).
pub fn predict<T: Scalar>(
    network: &Network,
    params: &ModelParams<T>,
    dataset: &LabeledDataset,
    exec: Execution,
) -> Result<Vec<usize>> {
    let len = dataset.shape().len();
    let classes = network.config().classes;
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.pixels().chunks(EVAL_CHUNK * len) {
        let batch: Vec<T> = chunk.iter().map(|&v| T::of(v)).collect();
        let logits = network.forward(params, &batch, chunk.len() / len, exec)?;
        out.extend(argmax_rows(&logits, classes));
    }
    Ok(out)
}

/// Fraction of images whose predicted class differs from the label.
pub fn evaluate<T: Scalar>(
    network: &Network,
    params: &ModelParams<T>,
    dataset: &LabeledDataset,
    exec: Execution,
) -> Result<f64> {
    if dataset.is_empty() {
        return Ok(0.0);
    }
    let predicted = predict(network, params, dataset, exec)?;
    let wrong = predicted.iter().zip(dataset.labels()).filter(|(p, l)| **p != **l as usize).count();
    Ok(wrong as f64 / dataset.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{DatasetManifest, Variant};
    use crate::model::{load_checkpoint, LrBoost};
    use crate::spectral::Shape;
    use rand::Rng;

    fn dataset(n: usize, shape: Shape, classes: usize, seed: u64) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % classes) as u8).collect();
        let mut pixels = Vec::with_capacity(n * shape.len());
        for &l in &labels {
            // Class-dependent brightness plus noise.
            pixels.extend((0..shape.len()).map(|_| l as f64 * 0.5 + rng.random_range(-0.5..0.5)));
        }
        LabeledDataset::new(pixels, labels, DatasetManifest::new("toy", shape, n, classes, Variant::Unfiltered)).unwrap()
    }

    fn small() -> (ConvNetConfig, TrainConfig) {
        let model = ConvNetConfig {
            widths: vec![4, 8],
            blocks: vec![1, 1],
            input: Shape::new(1, 8, 8),
            classes: 3,
            residual: true,
            seed: 0,
        };
        let train = TrainConfig {
            epochs: 4,
            batch_size: 10,
            base_lr: 0.01,
            boost: Some(LrBoost {
                target: 0.05,
                after_updates: 5,
            }),
            momentum: 0.9,
            l2: 1e-4,
            decay_epochs: vec![3],
            seed: 7,
            augment: false,
        };
        (model, train)
    }

    #[test]
    fn history_shape_and_determinism() {
        let (model, cfg) = small();
        let data = dataset(45, model.input, 3, 1);
        let test = dataset(30, model.input, 3, 2);
        let sets = [("test", &test), ("train_eval", &data)];
        let opts = TrainOptions::default();
        let (s1, h1) = train(&data, &sets, &model, &cfg, &opts).unwrap();
        let (s2, h2) = train(&data, &sets, &model, &cfg, &opts).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(s1.params, s2.params);
        assert_eq!(h1.epochs.len(), 4);
        assert!(h1.epochs.iter().all(|r| r.eval_errors.len() == 2));
        // 5 updates per epoch: boost kicks in at epoch 1, decay at 3.
        assert_eq!(s1.updates, 20);
        let lrs: Vec<f64> = h1.epochs.iter().map(|r| r.lr).collect();
        assert_eq!(lrs[..3], [0.01, 0.05, 0.05]);
        assert!((lrs[3] - 0.005).abs() < 1e-15);
        assert!(h1.epochs.last().unwrap().train_loss < h1.epochs[0].train_loss);

        let seq = TrainOptions {
            exec: Execution::Sequential,
            ..TrainOptions::default()
        };
        let (s3, h3) = train(&data, &sets, &model, &cfg, &seq).unwrap();
        assert_eq!(h1, h3);
        assert_eq!(s1.params, s3.params);
    }

    #[test]
    fn history_serializations() {
        let (model, cfg) = small();
        let data = dataset(20, model.input, 3, 1);
        let (_, h) = train(&data, &[("test", &data)], &model, &TrainConfig { epochs: 2, decay_epochs: vec![], ..cfg }, &TrainOptions::default()).unwrap();
        assert_eq!(TrainHistory::from_toml(&h.to_toml().unwrap()).unwrap(), h);
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,lr,train_loss,train_error,test_error\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn resume_from_checkpoint_matches_uninterrupted_run() {
        let (model, cfg) = small();
        let cfg = TrainConfig { augment: true, ..cfg };
        let model = ConvNetConfig {
            input: Shape::new(1, 32, 32),
            widths: vec![2],
            blocks: vec![1],
            ..model
        };
        let data = dataset(30, model.input, 3, 4);
        let opts = TrainOptions::default();
        let (full, full_h) = train(&data, &[], &model, &cfg, &opts).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut state = TrainState::new(&model, &cfg).unwrap();
        let mut records = state.run(&data, &[], &opts, 2).unwrap();
        save_checkpoint(&state.to_checkpoint(), &path).unwrap();
        let mut resumed = TrainState::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(resumed.epoch, 2);
        records.extend(resumed.run(&data, &[], &opts, usize::MAX).unwrap());
        assert!(resumed.is_finished());
        assert_eq!(records, full_h.epochs);
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.velocity, full.velocity);
    }

    #[test]
    fn divergence_dumps_state() {
        let (model, cfg) = small();
        let cfg = TrainConfig {
            base_lr: 1e30,
            boost: None,
            ..cfg
        };
        let data = dataset(20, model.input, 3, 1);
        let dir = tempfile::tempdir().unwrap();
        let opts = TrainOptions {
            exec: Execution::Sequential,
            dump_dir: Some(dir.path().to_path_buf()),
        };
        let err = train(&data, &[], &model, &cfg, &opts).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(err.to_string().contains("diverged"));
        assert!(dir.path().join("diverged.ckpt").exists());
    }

    #[test]
    fn rejects_mismatched_data() {
        let (model, cfg) = small();
        let data = dataset(10, Shape::new(1, 4, 4), 3, 1);
        assert!(train(&data, &[], &model, &cfg, &TrainOptions::default()).is_err());
    }

    #[test]
    fn evaluate_examples() {
        // Single-stem net with a hand-set classifier: bias decides the class.
        let model = ConvNetConfig {
            widths: vec![1],
            blocks: vec![0],
            input: Shape::new(1, 4, 4),
            classes: 10,
            residual: true,
            seed: 0,
        };
        let net = Network::new(&model).unwrap();
        let mut p = net.init_params::<f64>();
        let n = p.tensors.len();
        p.tensors[n - 2].iter_mut().for_each(|v| *v = 0.0);
        p.tensors[n - 1][4] = 1.0;
        let data = dataset(10, model.input, 10, 3);
        let err = evaluate(&net, &p, &data, Execution::Sequential).unwrap();
        assert!((err - 0.9).abs() < 1e-15);

        let reordered = data.subset(&[9, 3, 5, 0, 1, 8, 2, 7, 6, 4]).unwrap();
        assert_eq!(evaluate(&net, &p, &reordered, Execution::Parallel).unwrap(), err);

        let all_four = LabeledDataset::new(data.pixels().to_vec(), vec![4; 10], data.manifest().clone()).unwrap();
        assert_eq!(evaluate(&net, &p, &all_four, Execution::Sequential).unwrap(), 0.0);
    }
}
