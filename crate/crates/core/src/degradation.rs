//! Observation operators for sharpening: cyclic blur, regular subsampling,
//! and the band spectral response, plus the container tying them together.
//!
//! All kernels and responses are computed in `f64` and converted once, so a
//! model built for `f32` matches the `f64` one to rounding.

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::scalar::{real, Scalar};
use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::FftNum;

/// Cyclic 2-D blur kernel stored as taps `(drow, dcol, weight)` around the
/// origin. Applied by periodizing onto the target grid, so supports larger
/// than the image alias by wrap-around addition.
#[derive(Debug, Clone)]
pub struct BlurKernel<T> {
    taps: Vec<(isize, isize, T)>,
}

impl<T: Scalar> BlurKernel<T> {
    /// Identity kernel.
    pub fn delta() -> Self {
        BlurKernel { taps: vec![(0, 0, T::one())] }
    }

    /// Normalized isotropic Gaussian on an odd `support x support` window.
    pub fn gaussian(std: f64, support: usize) -> Result<Self> {
        if !(std > 0.0) || !std.is_finite() {
            return Err(Error::invalid("blur standard deviation must be positive"));
        }
        if support == 0 || support % 2 == 0 {
            return Err(Error::invalid("blur support must be odd"));
        }
        let half = (support / 2) as isize;
        let mut weights = Vec::with_capacity(support * support);
        let mut total = 0.0f64;
        for dr in -half..=half {
            for dc in -half..=half {
                let w = (-((dr * dr + dc * dc) as f64) / (2.0 * std * std)).exp();
                weights.push((dr, dc, w));
                total += w;
            }
        }
        let taps = weights
            .into_iter()
            .map(|(dr, dc, w)| (dr, dc, real::<T>(w / total)))
            .collect();
        Ok(BlurKernel { taps })
    }

    /// Convention used throughout for a downsampling factor `d`: Gaussian of
    /// standard deviation `d/2` on a `(4d+1)` window.
    pub fn for_downsampling(factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsampling factor must be at least 1"));
        }
        if factor == 1 {
            return Ok(Self::delta());
        }
        Self::gaussian(factor as f64 / 2.0, 4 * factor + 1)
    }

    pub fn taps(&self) -> &[(isize, isize, T)] {
        &self.taps
    }

    pub fn sum(&self) -> T {
        self.taps.iter().fold(T::zero(), |a, &(_, _, w)| a + w)
    }

    /// Full-grid kernel image with the center at the flat origin; taps
    /// falling outside the grid wrap around and add.
    pub fn periodize(&self, width: usize, height: usize) -> Result<Vec<T>> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        let mut out = vec![T::zero(); width * height];
        for &(dr, dc, w) in &self.taps {
            let r = dr.rem_euclid(height as isize) as usize;
            let c = dc.rem_euclid(width as isize) as usize;
            out[r * width + c] += w;
        }
        Ok(out)
    }
}

/// Frequency-domain transfer function of the kernel on the FFT's grid.
pub fn kernel_transfer<T: Scalar + FftNum>(
    kernel: &BlurKernel<T>,
    fft: &Fft2<T>,
) -> Result<Vec<Complex<T>>> {
    Ok(fft.forward(&kernel.periodize(fft.width(), fft.height())?))
}

/// Regular subsampling lattice keeping the top-left pixel of each
/// `factor x factor` cell. Pixel columns are row-major over the full grid;
/// kept indices are row-major over the low-resolution grid.
#[derive(Debug, Clone)]
pub struct SubsampleMask {
    width: usize,
    height: usize,
    factor: usize,
    keep: Vec<usize>,
}

impl SubsampleMask {
    pub fn new(width: usize, height: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("subsampling factor must be at least 1"));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid dimensions must be positive"));
        }
        if width % factor != 0 || height % factor != 0 {
            return Err(Error::invalid(format!(
                "subsampling factor {factor} must divide grid dimensions {width}x{height}"
            )));
        }
        let mut keep = Vec::with_capacity((width / factor) * (height / factor));
        for r in (0..height).step_by(factor) {
            for c in (0..width).step_by(factor) {
                keep.push(r * width + c);
            }
        }
        Ok(SubsampleMask { width, height, factor, keep })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn low_width(&self) -> usize {
        self.width / self.factor
    }

    pub fn low_height(&self) -> usize {
        self.height / self.factor
    }

    /// Kept full-grid pixel indices, one per low-resolution pixel.
    pub fn keep_indices(&self) -> &[usize] {
        &self.keep
    }

    /// Number of kept pixels.
    pub fn count(&self) -> usize {
        self.keep.len()
    }

    /// Binary full-grid mask.
    pub fn full_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.width * self.height];
        for &i in &self.keep {
            m[i] = true;
        }
        m
    }

    /// Select the kept columns of a bands-by-pixels matrix.
    pub fn downsample_cols<T: Scalar>(&self, mat: &DMatrix<T>) -> Result<DMatrix<T>> {
        if mat.ncols() != self.width * self.height {
            return Err(Error::dims(format!(
                "matrix has {} columns, mask grid has {} pixels",
                mat.ncols(),
                self.width * self.height
            )));
        }
        let mut out = DMatrix::<T>::zeros(mat.nrows(), self.keep.len());
        for (low, &p) in self.keep.iter().enumerate() {
            out.column_mut(low).copy_from(&mat.column(p));
        }
        Ok(out)
    }

    /// Adjoint of [`Self::downsample_cols`]: place low-resolution columns at
    /// their lattice positions, zeros elsewhere.
    pub fn embed_cols<T: Scalar>(&self, mat: &DMatrix<T>) -> Result<DMatrix<T>> {
        if mat.ncols() != self.keep.len() {
            return Err(Error::dims(format!(
                "matrix has {} columns, mask keeps {} pixels",
                mat.ncols(),
                self.keep.len()
            )));
        }
        let mut out = DMatrix::<T>::zeros(mat.nrows(), self.width * self.height);
        for (low, &p) in self.keep.iter().enumerate() {
            out.column_mut(p).copy_from(&mat.column(low));
        }
        Ok(out)
    }

    /// Zero-order-hold upsampling: every pixel of a `factor x factor` cell
    /// takes the cell's low-resolution value.
    pub fn upsample_nearest<T: Scalar>(&self, mat: &DMatrix<T>) -> Result<DMatrix<T>> {
        if mat.ncols() != self.keep.len() {
            return Err(Error::dims(format!(
                "matrix has {} columns, mask keeps {} pixels",
                mat.ncols(),
                self.keep.len()
            )));
        }
        let lw = self.low_width();
        let mut out = DMatrix::<T>::zeros(mat.nrows(), self.width * self.height);
        for r in 0..self.height {
            for c in 0..self.width {
                let low = (r / self.factor) * lw + c / self.factor;
                out.column_mut(r * self.width + c).copy_from(&mat.column(low));
            }
        }
        Ok(out)
    }
}

/// Synthetic spectral response: one normalized Gaussian bump per output band,
/// centers evenly spaced over the input band index range.
pub fn synthetic_response<T: Scalar>(ms_bands: usize, hs_bands: usize) -> Result<DMatrix<T>> {
    if ms_bands == 0 || hs_bands == 0 {
        return Err(Error::invalid("band counts must be positive"));
    }
    if ms_bands > hs_bands {
        return Err(Error::invalid("cannot synthesize more output bands than input bands"));
    }
    let spacing = hs_bands as f64 / ms_bands as f64;
    let std = (spacing / 2.0).max(0.5);
    let mut rows = DMatrix::<T>::zeros(ms_bands, hs_bands);
    for j in 0..ms_bands {
        let center = (j as f64 + 0.5) * spacing - 0.5;
        let mut row = vec![0.0f64; hs_bands];
        let mut total = 0.0;
        for (l, v) in row.iter_mut().enumerate() {
            *v = (-((l as f64 - center).powi(2)) / (2.0 * std * std)).exp();
            total += *v;
        }
        for (l, v) in row.iter().enumerate() {
            rows[(j, l)] = real::<T>(v / total);
        }
    }
    Ok(rows)
}

/// The full observation model: blur and subsample on the spatial side,
/// spectral response on the band side.
#[derive(Debug, Clone)]
pub struct DegradationModel<T: Scalar> {
    blur: BlurKernel<T>,
    mask: SubsampleMask,
    response: DMatrix<T>,
}

impl<T: Scalar> DegradationModel<T> {
    /// Validates the normalization invariants: kernel weights sum to one and
    /// every response row is non-negative and sums to one.
    pub fn new(blur: BlurKernel<T>, mask: SubsampleMask, response: DMatrix<T>) -> Result<Self> {
        let ksum = blur.sum().to_f64_lossy();
        if (ksum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("blur kernel sums to {ksum}, expected 1")));
        }
        for j in 0..response.nrows() {
            let mut total = 0.0f64;
            for l in 0..response.ncols() {
                let v = response[(j, l)].to_f64_lossy();
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::invalid(format!("response row {j} has a negative or non-finite entry")));
                }
                total += v;
            }
            if (total - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("response row {j} sums to {total}, expected 1")));
            }
        }
        Ok(DegradationModel { blur, mask, response })
    }

    pub fn blur(&self) -> &BlurKernel<T> {
        &self.blur
    }

    pub fn mask(&self) -> &SubsampleMask {
        &self.mask
    }

    /// `ms_bands x hs_bands` spectral response.
    pub fn response(&self) -> &DMatrix<T> {
        &self.response
    }

    pub fn hs_bands(&self) -> usize {
        self.response.ncols()
    }

    pub fn ms_bands(&self) -> usize {
        self.response.nrows()
    }
}
