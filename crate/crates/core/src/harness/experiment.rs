//! The train-on-one, test-on-all grid.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::datasets::{
    load_cifar10, load_variant, preprocess, synth_twoclass, Cifar10Split, GcnStats, LabeledDataset, PreprocessMode,
    TwoClassSpec, Variant,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::filtering::{build_variants_with, Variants};
use crate::harness::export::export_mask;
use crate::harness::report::{emit_report, GapReport, GapRow, ReportFormat, ReportMetadata, TEST_VARIANTS};
use crate::masks::{radial_mask, random_mask};
use crate::model::{evaluate, save_checkpoint, train, ConvNetConfig, TrainConfig, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// CIFAR-10 binary batches. `train_count` selects a class-balanced
    /// subset; `test_count` likewise for the test batch.
    Cifar10 {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_count: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_count: Option<usize>,
    },
    /// Synthetic two-class gratings.
    Twoclass { train: TwoClassSpec, test: TwoClassSpec },
    /// Previously saved unfiltered datasets.
    Files { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub radius: f64,
    pub drop_prob: f64,
    /// Random-mask seed, shared by the train and test splits.
    #[serde(with = "crate::seed_serde")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preprocess: PreprocessMode,
    pub train_variants: Vec<Variant>,
    /// Evaluate every test variant after each epoch (recorded in the
    /// histories). When off, only the final evaluation runs.
    #[serde(default = "default_true")]
    pub eval_each_epoch: bool,
    pub data: DataSource,
    pub masks: MaskConfig,
    pub model: ConvNetConfig,
    pub train: TrainConfig,
    /// Schedule for the augmented row, if it differs from `train`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_augmented: Option<TrainConfig>,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// Desk-scale CIFAR-10 grid: 10000 class-balanced training images, the
    /// full test batch, r = 11, p = 0.1, GCN, the default network and
    /// 20-epoch schedule (24 epochs for the augmented row).
    pub fn desk_cifar10(path: impl Into<PathBuf>) -> Self {
        let train = TrainConfig::default();
        ExperimentConfig {
            preprocess: PreprocessMode::Gcn,
            train_variants: vec![Variant::Unfiltered, Variant::Radial, Variant::Random, Variant::Augmented],
            eval_each_epoch: false,
            data: DataSource::Cifar10 {
                path: path.into(),
                train_count: Some(10_000),
                test_count: None,
            },
            masks: MaskConfig {
                radius: 11.0,
                drop_prob: 0.1,
                seed: 0,
            },
            model: ConvNetConfig::default(),
            train_augmented: Some(TrainConfig {
                epochs: 24,
                decay_epochs: vec![12, 18],
                ..train.clone()
            }),
            train,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("experiment config serialization: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_variants.is_empty() {
            return Err(Error::Config("no training variants requested".into()));
        }
        let mut seen = Vec::new();
        for &v in &self.train_variants {
            if v == Variant::Synthetic {
                return Err(Error::Config("'synthetic' is not a training variant".into()));
            }
            if seen.contains(&v) {
                return Err(Error::Config(format!("training variant {v} listed twice")));
            }
            seen.push(v);
        }
        self.model.validate()?;
        self.train.validate()?;
        if let Some(t) = &self.train_augmented {
            t.validate()?;
        }
        Ok(())
    }

    fn schedule_for(&self, variant: Variant) -> &TrainConfig {
        match (variant, &self.train_augmented) {
            (Variant::Augmented, Some(t)) => t,
            _ => &self.train,
        }
    }

    fn dataset_name(&self) -> String {
        match &self.data {
            DataSource::Cifar10 { .. } => "cifar10".into(),
            DataSource::Twoclass { .. } => "synthetic/twoclass".into(),
            DataSource::Files { train, .. } => train.display().to_string(),
        }
    }
}

/// Loads the unfiltered train and test splits named by a data source.
pub fn load_source(source: &DataSource, exec: Execution) -> Result<(LabeledDataset, LabeledDataset)> {
    match source {
        DataSource::Cifar10 {
            path,
            train_count,
            test_count,
        } => {
            let pick = |ds: LabeledDataset, count: &Option<usize>| match count {
                Some(c) => ds.class_balanced_subset(*c),
                None => Ok(ds),
            };
            let train = pick(load_cifar10(path, Cifar10Split::Train)?, train_count)?;
            let test = pick(load_cifar10(path, Cifar10Split::Test)?, test_count)?;
            Ok((train, test))
        }
        DataSource::Twoclass { train, test } => {
            let mut tr = synth_twoclass(train, exec)?;
            tr.manifest_mut().source = "synthetic/twoclass/train".into();
            let mut te = synth_twoclass(test, exec)?;
            te.manifest_mut().source = "synthetic/twoclass/test".into();
            Ok((tr, te))
        }
        DataSource::Files { train, test } => Ok((load_variant(train)?, load_variant(test)?)),
    }
}

/// Final errors of one trained model, persisted next to its history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub train_variant: Variant,
    pub errors: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timing {
    total_seconds: f64,
    rows: BTreeMap<String, f64>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds all variants of both splits with one pair of masks, trains one
/// model per requested training variant, evaluates it on the unfiltered,
/// radial and random test sets, and writes every artifact under `run_dir`:
///
/// ```text
/// config.toml
/// masks/radial.pgm, masks/random.{pgm,ppm}
/// <variant>/history.toml, history.csv, model.ckpt, eval.toml
/// report.toml, report.csv, report.md
/// timing.toml
/// ```
///
/// On failure `error.txt` records the cause and earlier artifacts stay.
pub fn run_experiment(config: &ExperimentConfig, run_dir: &Path, exec: Execution) -> Result<GapReport> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let result = run_inner(config, run_dir, exec);
    if let Err(e) = &result {
        let _ = fs::write(run_dir.join("error.txt"), format!("{e}\n"));
    }
    result
}

fn run_inner(config: &ExperimentConfig, run_dir: &Path, exec: Execution) -> Result<GapReport> {
    let started = Instant::now();
    config.validate()?;
    write_text(&run_dir.join("config.toml"), &config.to_toml()?)?;
    let (train_raw, test_raw) = load_source(&config.data, exec)?;
    if train_raw.shape() != test_raw.shape() {
        return Err(Error::ShapeMismatch {
            expected: train_raw.shape().to_string(),
            actual: test_raw.shape().to_string(),
        });
    }
    let s = train_raw.shape();
    let radial = radial_mask(s.height, s.width, s.channels, config.masks.radius)?;
    let random = random_mask(s.height, s.width, s.channels, config.masks.drop_prob, config.masks.seed)?;
    let mask_dir = run_dir.join("masks");
    export_mask(&radial, &mask_dir, "radial")?;
    export_mask(&random, &mask_dir, "random")?;
    let train_sets = build_variants_with(&train_raw, &radial, &random, exec)?;
    let test_sets = build_variants_with(&test_raw, &radial, &random, exec)?;

    let mut rows = Vec::new();
    let mut timing = Timing {
        total_seconds: 0.0,
        rows: BTreeMap::new(),
    };
    for &variant in &config.train_variants {
        let row_start = Instant::now();
        rows.push(run_row(config, variant, &train_sets, &test_sets, run_dir, exec)?);
        timing.rows.insert(variant.to_string(), row_start.elapsed().as_secs_f64());
    }

    let report = GapReport {
        metadata: ReportMetadata {
            dataset: config.dataset_name(),
            train_count: train_raw.len(),
            test_count: test_raw.len(),
            radius: config.masks.radius,
            drop_prob: config.masks.drop_prob,
            mask_seed: config.masks.seed,
            preprocess: config.preprocess,
            model: config.model.clone(),
            train: config.train.clone(),
            train_augmented: config.train_augmented.clone(),
        },
        rows,
    };
    write_text(&run_dir.join("report.toml"), &emit_report(&report, ReportFormat::Toml)?)?;
    write_text(&run_dir.join("report.csv"), &emit_report(&report, ReportFormat::Csv)?)?;
    write_text(&run_dir.join("report.md"), &emit_report(&report, ReportFormat::Markdown)?)?;
    timing.total_seconds = started.elapsed().as_secs_f64();
    let timing_text = toml::to_string(&timing).map_err(|e| Error::Config(format!("timing serialization: {e}")))?;
    write_text(&run_dir.join("timing.toml"), &timing_text)?;
    Ok(report)
}

fn normalize(
    mode: PreprocessMode,
    train: &LabeledDataset,
    variant: Variant,
    tests: [&LabeledDataset; 3],
) -> Result<(LabeledDataset, [LabeledDataset; 3])> {
    match mode {
        PreprocessMode::Gcn => {
            let stats = GcnStats::fit(train, format!("train/{variant}"))?;
            let [a, b, c] = tests;
            Ok((stats.apply(train)?, [stats.apply(a)?, stats.apply(b)?, stats.apply(c)?]))
        }
        other => {
            let [a, b, c] = tests;
            Ok((
                preprocess(train, other)?,
                [preprocess(a, other)?, preprocess(b, other)?, preprocess(c, other)?],
            ))
        }
    }
}

fn run_row(
    config: &ExperimentConfig,
    variant: Variant,
    train_sets: &Variants,
    test_sets: &Variants,
    run_dir: &Path,
    exec: Execution,
) -> Result<GapRow> {
    let row_dir = run_dir.join(variant.name());
    fs::create_dir_all(&row_dir).map_err(|e| Error::io(&row_dir, e))?;
    let train_set = train_sets.get(variant).expect("validated training variant");
    let tests = TEST_VARIANTS.map(|v| test_sets.get(v).expect("test variants always exist"));
    let (train_set, tests) = normalize(config.preprocess, train_set, variant, tests)?;
    let names = TEST_VARIANTS.map(|v| v.name());
    let eval_sets: Vec<(&str, &LabeledDataset)> = if config.eval_each_epoch {
        names.iter().copied().zip(tests.iter()).collect()
    } else {
        Vec::new()
    };
    let options = TrainOptions {
        exec,
        dump_dir: Some(row_dir.clone()),
    };
    let (state, history) = train(&train_set, &eval_sets, &config.model, config.schedule_for(variant), &options)?;
    write_text(&row_dir.join("history.toml"), &history.to_toml()?)?;
    write_text(&row_dir.join("history.csv"), &history.to_csv())?;
    save_checkpoint(&state.to_checkpoint(), row_dir.join("model.ckpt"))?;

    let mut errors = BTreeMap::new();
    for (name, set) in names.iter().zip(&tests) {
        let err = match history.epochs.last().and_then(|r| r.eval_errors.get(*name)) {
            Some(&e) => e,
            None => evaluate(&state.network, &state.params, set, exec)?,
        };
        errors.insert(name.to_string(), err);
    }
    let record = EvalRecord {
        train_variant: variant,
        errors,
    };
    let text = toml::to_string(&record).map_err(|e| Error::Config(format!("eval record serialization: {e}")))?;
    write_text(&row_dir.join("eval.toml"), &text)?;
    let e = &record.errors;
    GapRow::new(variant, e["unfiltered"], e["radial"], e["random"])
}
