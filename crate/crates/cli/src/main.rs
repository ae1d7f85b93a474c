//! `fgap`: build Fourier-filtered dataset variants, train classifiers on
//! them and report cross-variant generalization gaps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use fgap_core::datasets::{
    load_cifar10, load_variant, save_variant, synth_powerlaw, synth_twoclass, Cifar10Split, GcnStats, LabeledDataset,
    PowerLawSpec, PreprocessMode, TwoClassSpec,
};
use fgap_core::filtering::build_variants;
use fgap_core::harness::{
    dataset_spectrum_fit, emit_report, export_images, export_mask, run_experiment, DisplayScale, ExperimentConfig,
    ReportFormat,
};
use fgap_core::masks::{radial_mask, random_mask, FourierMask};
use fgap_core::model::{load_checkpoint, save_checkpoint, ConvNetConfig, TrainConfig, TrainOptions, TrainState};
use fgap_core::spectral::Shape;
use fgap_core::{Error, ErrorClass, Execution, Result};

#[derive(Parser, Debug)]
#[command(name = "fgap", version, about = "Fourier-filtered generalization-gap experiments")]
struct Cli {
    /// Seed overriding every seed of the command (masks, noise, init, shuffling).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// TOML configuration (experiment config for `gap`, model/train tables for `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write radial and random mask bitmaps plus keep statistics.
    Masks(MasksArgs),
    /// Build unfiltered, radial, random and augmented variant files.
    Filter(FilterArgs),
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a single model on a stored variant.
    Train(TrainArgs),
    /// Run the full train/test grid and write the gap report.
    Gap(GapArgs),
    /// Radially averaged power spectrum and power-law fit of a dataset.
    Spectra(SpectraArgs),
    /// Export images of a stored dataset as PGM/PPM.
    ExportImages(ExportArgs),
}

#[derive(Args, Debug, Clone, Copy)]
struct MaskParams {
    #[arg(long, default_value_t = 11.0)]
    radius: f64,
    #[arg(long, default_value_t = 0.1)]
    drop_prob: f64,
}

#[derive(Args, Debug)]
struct MasksArgs {
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[command(flatten)]
    mask: MaskParams,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct FilterArgs {
    /// CIFAR-10 binary file or batch directory, or a stored variant (`.manifest`).
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    /// Class-balanced subset size.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    mask: MaskParams,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(subcommand)]
    kind: SynthKind,
}

#[derive(Subcommand, Debug)]
enum SynthKind {
    /// Images with power spectrum A / |w|^(2 - eta).
    Powerlaw {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 1.0)]
        amplitude: f64,
        #[arg(long, default_value_t = 0.3)]
        eta: f64,
    },
    /// Two-class gratings at a low and a high frequency over power-law noise.
    Twoclass {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        cue_low: usize,
        #[arg(long, default_value_t = 10)]
        cue_high: usize,
        #[arg(long, default_value_t = 0.05)]
        grating_amplitude: f64,
        #[arg(long, default_value_t = 1.0)]
        noise_amplitude: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_eta: f64,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetArg {
    Desk,
    Svhn,
    Cifar,
    CifarAugmented,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PreprocessArg {
    None,
    UnitScale,
    Gcn,
}

impl From<PreprocessArg> for PreprocessMode {
    fn from(p: PreprocessArg) -> Self {
        match p {
            PreprocessArg::None => PreprocessMode::None,
            PreprocessArg::UnitScale => PreprocessMode::UnitScale,
            PreprocessArg::Gcn => PreprocessMode::Gcn,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Stored training variant.
    #[arg(long)]
    train: PathBuf,
    /// Stored evaluation sets, evaluated after every epoch.
    #[arg(long)]
    eval: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: PresetArg,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, value_enum, default_value = "gcn")]
    preprocess: PreprocessArg,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GapArgs {
    /// CIFAR-10 batch directory; runs the desk-scale grid when no --config is given.
    #[arg(long)]
    cifar_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SpectraArgs {
    /// Stored dataset.
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Stored dataset.
    #[arg(long)]
    input: PathBuf,
    /// Image indices, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    indices: Vec<usize>,
    /// Map [LO, HI] to [0, 255] instead of clipping raw intensities.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    range: Option<Vec<f64>>,
}

/// Model and schedule for `train --config`.
#[derive(Debug, Serialize, Deserialize)]
struct TrainFileConfig {
    #[serde(default)]
    preprocess: Option<PreprocessMode>,
    model: Option<ConvNetConfig>,
    train: Option<TrainConfig>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numerical => 3,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidParameter("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let needs_config = matches!(cli.command, Command::Gap(_) | Command::Train(_));
    if cli.config.is_some() && !needs_config {
        return Err(Error::InvalidParameter("--config applies only to `gap` and `train`".into()));
    }
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::io(&cli.out_dir, e))?;
    let exec = Execution::Parallel;
    match &cli.command {
        Command::Masks(a) => cmd_masks(&cli, a),
        Command::Filter(a) => cmd_filter(&cli, a, exec),
        Command::Synth(a) => cmd_synth(&cli, a, exec),
        Command::Train(a) => cmd_train(&cli, a, exec),
        Command::Gap(a) => cmd_gap(&cli, a, exec),
        Command::Spectra(a) => cmd_spectra(&cli, a, exec),
        Command::ExportImages(a) => cmd_export(&cli, a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("serialization: {e}")))
}

#[derive(Serialize)]
struct MaskStats {
    height: usize,
    width: usize,
    channels: usize,
    radius: f64,
    radial_kept_per_channel: usize,
    radial_keep_fraction: f64,
    drop_prob: f64,
    #[serde(serialize_with = "seed_as_i64")]
    seed: u64,
    random_kept: Vec<usize>,
    random_keep_fraction: f64,
    random_conjugate_symmetric: bool,
}

fn seed_as_i64<S: serde::Serializer>(seed: &u64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_i64(*seed as i64)
}

fn kept_per_channel(mask: &FourierMask) -> Vec<usize> {
    let s = mask.shape();
    (0..s.channels)
        .map(|c| mask.plane(c).iter().filter(|&&b| b != 0).count())
        .collect()
}

fn cmd_masks(cli: &Cli, a: &MasksArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let radial = radial_mask(a.height, a.width, a.channels, a.mask.radius)?;
    let random = random_mask(a.height, a.width, a.channels, a.mask.drop_prob, seed)?;
    let dir = &cli.out_dir;
    let mut written = export_mask(&radial, dir, "radial_mask")?;
    written.extend(export_mask(&random, dir, "random_mask")?);
    let stats = MaskStats {
        height: a.height,
        width: a.width,
        channels: a.channels,
        radius: a.mask.radius,
        radial_kept_per_channel: kept_per_channel(&radial)[0],
        radial_keep_fraction: radial.keep_fraction(),
        drop_prob: a.mask.drop_prob,
        seed,
        random_kept: kept_per_channel(&random),
        random_keep_fraction: random.keep_fraction(),
        random_conjugate_symmetric: random.is_conjugate_symmetric(),
    };
    let text = to_toml(&stats)?;
    write_text(&dir.join("masks.toml"), &text)?;
    print!("{text}");
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn load_input(path: &Path, split: SplitArg) -> Result<LabeledDataset> {
    if path.extension().is_some_and(|e| e == "manifest") {
        return load_variant(path);
    }
    let split = match split {
        SplitArg::Train => Cifar10Split::Train,
        SplitArg::Test => Cifar10Split::Test,
    };
    load_cifar10(path, split)
}

fn cmd_filter(cli: &Cli, a: &FilterArgs, exec: Execution) -> Result<()> {
    let mut data = load_input(&a.input, a.split)?;
    if let Some(count) = a.count {
        data = data.class_balanced_subset(count)?;
    }
    let seed = cli.seed.unwrap_or(0);
    let variants = build_variants(&data, a.mask.radius, a.mask.drop_prob, seed, exec)?;
    let split = match a.split {
        SplitArg::Train => "train",
        SplitArg::Test => "test",
    };
    for (name, set) in [
        ("unfiltered", &variants.unfiltered),
        ("radial", &variants.radial),
        ("random", &variants.random),
        ("augmented", &variants.augmented),
    ] {
        let paths = save_variant(set, cli.out_dir.join(format!("{split}_{name}")))?;
        println!(
            "wrote {} ({} images, max imaginary residual {:e})",
            paths.manifest.display(),
            set.len(),
            set.manifest().max_imag_residual
        );
    }
    Ok(())
}

fn cmd_synth(cli: &Cli, a: &SynthArgs, exec: Execution) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (data, stem) = match a.kind {
        SynthKind::Powerlaw {
            count,
            channels,
            height,
            width,
            amplitude,
            eta,
        } => {
            let spec = PowerLawSpec { amplitude, eta, seed };
            (synth_powerlaw(count, channels, height, width, &spec, exec)?, "powerlaw")
        }
        SynthKind::Twoclass {
            count,
            size,
            cue_low,
            cue_high,
            grating_amplitude,
            noise_amplitude,
            noise_eta,
        } => {
            let spec = TwoClassSpec {
                count,
                height: size,
                width: size,
                cue_low,
                cue_high,
                grating_amplitude,
                noise: PowerLawSpec {
                    amplitude: noise_amplitude,
                    eta: noise_eta,
                    seed,
                },
            };
            (synth_twoclass(&spec, exec)?, "twoclass")
        }
    };
    let paths = save_variant(&data, cli.out_dir.join(stem))?;
    println!("wrote {} ({} images)", paths.manifest.display(), data.len());
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs, exec: Execution) -> Result<()> {
    let train_raw = load_variant(&a.train)?;
    let evals_raw = a.eval.iter().map(load_variant).collect::<Result<Vec<_>>>()?;
    let file: Option<TrainFileConfig> = match &cli.config {
        Some(p) => Some(toml::from_str(&read_text(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let preprocess = file
        .as_ref()
        .and_then(|f| f.preprocess)
        .unwrap_or(a.preprocess.into());

    let mut state = match &a.resume {
        Some(path) => TrainState::from_checkpoint(load_checkpoint(path)?)?,
        None => {
            let mut model = file.as_ref().and_then(|f| f.model.clone()).unwrap_or_else(|| ConvNetConfig {
                input: train_raw.shape(),
                classes: train_raw.classes().max(2),
                ..ConvNetConfig::default()
            });
            let mut train = match file.as_ref().and_then(|f| f.train.clone()) {
                Some(t) => t,
                None => TrainConfig::preset(match a.preset {
                    PresetArg::Desk => "desk",
                    PresetArg::Svhn => "svhn",
                    PresetArg::Cifar => "cifar",
                    PresetArg::CifarAugmented => "cifar-augmented",
                })?,
            };
            if let Some(e) = a.epochs {
                train.epochs = e;
                train.decay_epochs.retain(|&d| d < e);
            }
            if train.augment && train_raw.shape() != Shape::new(train_raw.shape().channels, 32, 32) {
                train.augment = false;
            }
            if let Some(s) = cli.seed {
                model.seed = s;
                train.seed = s;
            }
            TrainState::new(&model, &train)?
        }
    };

    let (train_set, evals) = match preprocess {
        PreprocessMode::Gcn => {
            let stats = GcnStats::fit(&train_raw, train_raw.manifest().source.clone())?;
            let evals = evals_raw.iter().map(|e| stats.apply(e)).collect::<Result<Vec<_>>>()?;
            (stats.apply(&train_raw)?, evals)
        }
        mode => {
            let evals = evals_raw
                .iter()
                .map(|e| fgap_core::datasets::preprocess(e, mode))
                .collect::<Result<Vec<_>>>()?;
            (fgap_core::datasets::preprocess(&train_raw, mode)?, evals)
        }
    };
    let names: Vec<String> = a
        .eval
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let eval_sets: Vec<(&str, &LabeledDataset)> = names.iter().map(String::as_str).zip(evals.iter()).collect();
    let options = TrainOptions {
        exec,
        dump_dir: Some(cli.out_dir.clone()),
    };
    let records = state.run(&train_set, &eval_sets, &options, usize::MAX)?;
    let history = fgap_core::model::TrainHistory { epochs: records };
    write_text(&cli.out_dir.join("history.toml"), &history.to_toml()?)?;
    write_text(&cli.out_dir.join("history.csv"), &history.to_csv())?;
    save_checkpoint(&state.to_checkpoint(), cli.out_dir.join("model.ckpt"))?;
    print!("{}", history.to_csv());
    Ok(())
}

fn cmd_gap(cli: &Cli, a: &GapArgs, exec: Execution) -> Result<()> {
    let mut config = match (&cli.config, &a.cifar_dir) {
        (Some(p), _) => ExperimentConfig::from_toml(&read_text(p)?)?,
        (None, Some(dir)) => ExperimentConfig::desk_cifar10(dir),
        (None, None) => {
            return Err(Error::InvalidParameter("gap needs --config or --cifar-dir".into()));
        }
    };
    if let Some(s) = cli.seed {
        config.masks.seed = s;
        config.model.seed = s;
        config.train.seed = s;
        if let Some(t) = &mut config.train_augmented {
            t.seed = s;
        }
    }
    let report = run_experiment(&config, &cli.out_dir, exec)?;
    print!("{}", emit_report(&report, ReportFormat::Markdown)?);
    Ok(())
}

#[derive(Serialize)]
struct SpectraOutput {
    source: String,
    variant: String,
    fit: fgap_core::harness::PowerLawFit,
}

fn cmd_spectra(cli: &Cli, a: &SpectraArgs, exec: Execution) -> Result<()> {
    let data = load_variant(&a.input)?;
    let (profile, fit) = dataset_spectrum_fit(&data, exec)?;
    let mut csv = String::from("bin,radius,mean_power,modes\n");
    for i in 0..profile.bins.len() {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            profile.bins[i], profile.radius[i], profile.mean_power[i], profile.modes[i]
        ));
    }
    write_text(&cli.out_dir.join("profile.csv"), &csv)?;
    let out = SpectraOutput {
        source: data.manifest().source.clone(),
        variant: data.variant().to_string(),
        fit,
    };
    let text = to_toml(&out)?;
    write_text(&cli.out_dir.join("fit.toml"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_export(cli: &Cli, a: &ExportArgs) -> Result<()> {
    let data = load_variant(&a.input)?;
    let scale = match a.range.as_deref() {
        Some([lo, hi]) if hi > lo => DisplayScale::Range { lo: *lo, hi: *hi },
        Some(_) => return Err(Error::InvalidParameter("--range needs LO,HI with LO < HI".into())),
        None => DisplayScale::Clip,
    };
    let prefix = a
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    for p in export_images(&data, &a.indices, &cli.out_dir, &prefix, scale)? {
        println!("wrote {}", p.display());
    }
    if let Some(mask) = data.manifest().mask {
        for p in export_mask(&mask.regenerate(data.shape())?, &cli.out_dir, &format!("{prefix}_mask"))? {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}
