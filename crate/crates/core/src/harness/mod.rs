//! Experiment orchestration: the train/test variant grid, gap reports,
//! spectral power-law fits and image exports.

mod experiment;
mod export;
mod report;
mod spectra;

pub use experiment::{load_source, run_experiment, DataSource, EvalRecord, ExperimentConfig, MaskConfig};
pub use export::{decode_pnm, encode_pnm, export_images, export_mask, DisplayScale};
pub use report::{
    emit_report, gap_of_row, parse_report_csv, parse_report_markdown, parse_report_toml, GapReport, GapRow,
    ReportFormat, ReportMetadata, TEST_VARIANTS,
};
pub use spectra::{dataset_spectrum_fit, fit_power_law, mean_power_spectrum, radial_profile, PowerLawFit, RadialProfile};
