//! Fusion quality metrics: signal-to-reconstruction error, mean spectral
//! angle, and the relative global dimensionless error.

use crate::cube::HSCube;
use crate::error::{Error, Result};
use crate::scalar::{count, real, Scalar};
use std::fmt;

/// Sentinel reported for a zero-error reconstruction instead of infinity.
pub const SRE_SENTINEL_DB: f64 = 300.0;

#[derive(Debug, Clone)]
pub struct MetricReport<T> {
    /// `10·log₁₀(‖ref‖² / ‖est − ref‖²)` in dB; [`SRE_SENTINEL_DB`] when the
    /// error is exactly zero.
    pub sre_db: T,
    /// Mean per-pixel spectral angle in degrees, zero-norm pixels excluded.
    pub sam_degrees: T,
    /// `100·(1/ratio)·sqrt(mean_bands (RMSE/band mean)²)`.
    pub ergas: T,
    pub per_band_rmse: Vec<T>,
    /// Pixels excluded from the angle mean because either spectrum had zero
    /// norm.
    pub skipped_pixels: usize,
}

impl<T: Scalar> MetricReport<T> {
    pub fn csv_header() -> &'static str {
        "sre_db,sam_degrees,ergas,skipped_pixels"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.sre_db.to_f64_lossy(),
            self.sam_degrees.to_f64_lossy(),
            self.ergas.to_f64_lossy(),
            self.skipped_pixels
        )
    }
}

impl<T: Scalar> fmt::Display for MetricReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "sre_db: {:.6}", self.sre_db.to_f64_lossy())?;
        writeln!(f, "sam_degrees: {:.6}", self.sam_degrees.to_f64_lossy())?;
        writeln!(f, "ergas: {:.6}", self.ergas.to_f64_lossy())?;
        writeln!(f, "skipped_pixels: {}", self.skipped_pixels)?;
        for (l, r) in self.per_band_rmse.iter().enumerate() {
            writeln!(f, "rmse_band_{l}: {:.6e}", r.to_f64_lossy())?;
        }
        Ok(())
    }
}

/// Compare a reconstruction to its reference. `resolution_ratio` is the
/// spatial downsampling factor between the fused product and the coarse
/// input; it only scales the ERGAS value.
pub fn evaluate<T: Scalar>(
    estimate: &HSCube<T>,
    reference: &HSCube<T>,
    resolution_ratio: T,
) -> Result<MetricReport<T>> {
    if estimate.bands() != reference.bands()
        || estimate.width() != reference.width()
        || estimate.height() != reference.height()
    {
        return Err(Error::dims(format!(
            "estimate is {} bands {}x{}, reference is {} bands {}x{}",
            estimate.bands(),
            estimate.width(),
            estimate.height(),
            reference.bands(),
            reference.width(),
            reference.height()
        )));
    }
    if !(resolution_ratio > T::zero()) || !resolution_ratio.is_finite() {
        return Err(Error::invalid("resolution ratio must be positive and finite"));
    }
    let bands = reference.bands();
    let n = reference.pixels();
    let ref_energy = reference.data().norm_squared();
    if ref_energy == T::zero() {
        return Err(Error::invalid("reference cube is identically zero"));
    }
    let err = estimate.data() - reference.data();
    let err_energy = err.norm_squared();
    let ten = real::<T>(10.0);
    let sre_db = if err_energy == T::zero() {
        real(SRE_SENTINEL_DB)
    } else {
        ten * (ref_energy / err_energy).log10()
    };

    let mut angle_sum = T::zero();
    let mut counted = 0usize;
    let mut skipped = 0usize;
    let deg = real::<T>(180.0) / T::PI();
    for p in 0..n {
        let a = estimate.data().column(p);
        let b = reference.data().column(p);
        let na = a.norm();
        let nb = b.norm();
        if na == T::zero() || nb == T::zero() {
            skipped += 1;
            continue;
        }
        let cosine = (a.dot(&b) / (na * nb)).clamp(-T::one(), T::one());
        angle_sum += cosine.acos() * deg;
        counted += 1;
    }
    let sam_degrees = if counted > 0 { angle_sum / count::<T>(counted) } else { T::zero() };

    let inv_n = T::one() / count::<T>(n);
    let mut per_band_rmse = Vec::with_capacity(bands);
    let mut ergas_acc = T::zero();
    for l in 0..bands {
        let mut se = T::zero();
        let mut mean = T::zero();
        for p in 0..n {
            let d = err[(l, p)];
            se += d * d;
            mean += reference.data()[(l, p)];
        }
        let rmse = (se * inv_n).sqrt();
        let mean = mean * inv_n;
        if mean == T::zero() {
            return Err(Error::invalid(format!("band {l} of the reference has zero mean")));
        }
        per_band_rmse.push(rmse);
        let rel = rmse / mean;
        ergas_acc += rel * rel;
    }
    let ergas = real::<T>(100.0) / resolution_ratio * (ergas_acc / count::<T>(bands)).sqrt();

    Ok(MetricReport { sre_db, sam_degrees, ergas, per_band_rmse, skipped_pixels: skipped })
}
