//! Radially averaged power spectra and power-law fits `P(w) = A / |w|^(2 - eta)`.

use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::spectral::{centered_offset, SpectralPlan};

/// Mean power in integer-radius annuli around the centered DC mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialProfile {
    /// Annulus index `b`: modes with `round(|w|) == b`.
    pub bins: Vec<usize>,
    /// Mean `|w|` of the modes in each annulus.
    pub radius: Vec<f64>,
    pub mean_power: Vec<f64>,
    pub modes: Vec<usize>,
}

/// Bins `1..min(H, W)/2`: the annuli that fit entirely inside the array.
/// DC and the corners are left out.
pub fn radial_profile(power: &[f64], height: usize, width: usize) -> Result<RadialProfile> {
    if power.len() != height * width {
        return Err(Error::ShapeMismatch {
            expected: format!("{height}x{width} power array"),
            actual: format!("{} values", power.len()),
        });
    }
    let last = (height.min(width) / 2).saturating_sub(1);
    let mut sum_p = vec![0.0; last + 1];
    let mut sum_r = vec![0.0; last + 1];
    let mut modes = vec![0usize; last + 1];
    for i in 0..height {
        let di = centered_offset(i, height);
        for j in 0..width {
            let dj = centered_offset(j, width);
            let r = di.hypot(dj);
            let b = r.round() as usize;
            if b == 0 || b > last {
                continue;
            }
            sum_p[b] += power[i * width + j];
            sum_r[b] += r;
            modes[b] += 1;
        }
    }
    let bins: Vec<usize> = (1..=last).collect();
    Ok(RadialProfile {
        radius: bins.iter().map(|&b| sum_r[b] / modes[b] as f64).collect(),
        mean_power: bins.iter().map(|&b| sum_p[b] / modes[b] as f64).collect(),
        modes: bins.iter().map(|&b| modes[b]).collect(),
        bins,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub amplitude: f64,
    pub eta: f64,
    /// Mean squared residual of the log-log fit.
    pub residual: f64,
    pub bins_used: usize,
    /// Bins left out for having zero power.
    pub excluded: usize,
    /// Set when zero-power bins were excluded, e.g. beyond a low-pass cutoff.
    pub truncated: bool,
}

/// Least squares of `ln P` on `ln |w|` over bins with positive power:
/// slope `s`, intercept `ln A`, `eta = 2 + s`.
pub fn fit_power_law(profile: &RadialProfile) -> Result<PowerLawFit> {
    // Power below this is treated as masked out rather than measured.
    const ZERO: f64 = 1e-20;
    let points: Vec<(f64, f64)> = profile
        .radius
        .iter()
        .zip(&profile.mean_power)
        .filter(|(_, &p)| p > ZERO)
        .map(|(&r, &p)| (r.ln(), p.ln()))
        .collect();
    let excluded = profile.mean_power.len() - points.len();
    if points.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "power-law fit needs 3 bins with positive power, got {}",
            points.len()
        )));
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(Error::NonFinite("radial profile".into()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = points
        .iter()
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum::<f64>()
        / n;
    Ok(PowerLawFit {
        amplitude: intercept.exp(),
        eta: 2.0 + slope,
        residual,
        bins_used: points.len(),
        excluded,
        truncated: excluded > 0,
    })
}

/// Power spectrum averaged over images and channels, `H x W` centered.
pub fn mean_power_spectrum(dataset: &LabeledDataset, exec: Execution) -> Result<Vec<f64>> {
    let shape = dataset.shape();
    let plan = SpectralPlan::new(shape.height, shape.width)?;
    let plane = shape.plane();
    let per_image = exec.map_indexed(dataset.len(), |i| {
        let mut acc = vec![0.0; plane];
        let mut spec = vec![num_complex::Complex64::default(); plane];
        for p in dataset.image(i).chunks_exact(plane) {
            plan.forward_plane(p, &mut spec);
            acc.iter_mut().zip(&spec).for_each(|(a, z)| *a += z.norm_sqr());
        }
        acc
    });
    let mut total = vec![0.0; plane];
    for acc in per_image {
        total.iter_mut().zip(&acc).for_each(|(t, a)| *t += a);
    }
    let count = (dataset.len() * shape.channels).max(1) as f64;
    total.iter_mut().for_each(|t| *t /= count);
    Ok(total)
}

/// Profile and fit of a dataset's mean power spectrum.
pub fn dataset_spectrum_fit(dataset: &LabeledDataset, exec: Execution) -> Result<(RadialProfile, PowerLawFit)> {
    let s = dataset.shape();
    let profile = radial_profile(&mean_power_spectrum(dataset, exec)?, s.height, s.width)?;
    let fit = fit_power_law(&profile)?;
    Ok((profile, fit))
}
