//! Small 2-D FFT layer over `rustfft`, used for circular convolution.
//!
//! All spatial operators in the sharpening model act cyclically, so every
//! convolution, adjoint and deconvolution is a pointwise operation on the
//! 2-D spectrum. Images are row-major `height x width` slices.

use nalgebra::DMatrix;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftNum, FftPlanner};
use std::sync::Arc;

/// Cached FFT plans for one image size.
pub struct Fft2<T: FftNum> {
    width: usize,
    height: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: FftNum> Fft2<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            width,
            height,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    fn len(&self) -> usize {
        self.width * self.height
    }

    fn pass(&self, buf: &mut [Complex<T>], rows: &Arc<dyn Fft<T>>, cols: &Arc<dyn Fft<T>>) {
        for row in buf.chunks_exact_mut(self.width) {
            rows.process(row);
        }
        let mut col = vec![Complex::new(T::zero(), T::zero()); self.height];
        for c in 0..self.width {
            for r in 0..self.height {
                col[r] = buf[r * self.width + c];
            }
            cols.process(&mut col);
            for r in 0..self.height {
                buf[r * self.width + c] = col[r];
            }
        }
    }

    /// Unnormalized forward transform of a real image.
    pub fn forward(&self, values: &[T]) -> Vec<Complex<T>> {
        assert_eq!(values.len(), self.len(), "image size mismatch");
        let mut buf: Vec<Complex<T>> = values.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.pass(&mut buf, &self.row_fwd, &self.col_fwd);
        buf
    }

    /// Inverse transform, returning the real part scaled by `1/(width*height)`.
    pub fn inverse(&self, mut buf: Vec<Complex<T>>) -> Vec<T> {
        assert_eq!(buf.len(), self.len(), "spectrum size mismatch");
        self.pass(&mut buf, &self.row_inv, &self.col_inv);
        let scale = T::one() / T::from_usize(self.len()).unwrap();
        buf.into_iter().map(|c| c.re * scale).collect()
    }

    /// Filter one real image in the frequency domain: `out = F⁻¹(g(F(x)))`.
    pub fn filter(&self, values: &[T], g: impl Fn(Complex<T>, usize) -> Complex<T>) -> Vec<T> {
        let mut spec = self.forward(values);
        for (i, c) in spec.iter_mut().enumerate() {
            *c = g(*c, i);
        }
        self.inverse(spec)
    }
}

/// Circular convolution of a real image with a precomputed transfer function.
pub fn convolve_image<T: FftNum>(values: &[T], fft: &Fft2<T>, transfer: &[Complex<T>]) -> Vec<T> {
    fft.filter(values, |c, i| c * transfer[i])
}

/// Adjoint of [`convolve_image`]: convolution with the spatially reversed kernel.
pub fn correlate_image<T: FftNum>(values: &[T], fft: &Fft2<T>, transfer: &[Complex<T>]) -> Vec<T> {
    fft.filter(values, |c, i| c * transfer[i].conj())
}

fn map_rows<T: FftNum>(
    mat: &DMatrix<T>,
    fft: &Fft2<T>,
    g: impl Fn(Complex<T>, usize) -> Complex<T>,
) -> DMatrix<T> {
    assert_eq!(mat.ncols(), fft.len(), "row length must equal image size");
    let mut out = mat.clone_owned();
    let mut buf = vec![T::zero(); fft.len()];
    for l in 0..mat.nrows() {
        for (j, v) in buf.iter_mut().enumerate() {
            *v = mat[(l, j)];
        }
        let filtered = fft.filter(&buf, &g);
        for (j, v) in filtered.into_iter().enumerate() {
            out[(l, j)] = v;
        }
    }
    out
}

/// Per-row circular convolution of a bands-by-pixels matrix (`X ↦ XB`).
pub fn convolve_rows<T: FftNum>(
    mat: &DMatrix<T>,
    fft: &Fft2<T>,
    transfer: &[Complex<T>],
) -> DMatrix<T> {
    map_rows(mat, fft, |c, i| c * transfer[i])
}

/// Per-row adjoint convolution (`X ↦ XBᵀ`).
pub fn correlate_rows<T: FftNum>(
    mat: &DMatrix<T>,
    fft: &Fft2<T>,
    transfer: &[Complex<T>],
) -> DMatrix<T> {
    map_rows(mat, fft, |c, i| c * transfer[i].conj())
}

/// Per-row solve against the shifted normal operator (`X ↦ X(BBᵀ + shift·I)⁻¹`).
///
/// `BBᵀ` is circulant, so the solve is a pointwise division by `|b̂|² + shift`.
pub fn solve_rows_shifted<T: FftNum>(
    mat: &DMatrix<T>,
    fft: &Fft2<T>,
    transfer: &[Complex<T>],
    shift: T,
) -> DMatrix<T> {
    map_rows(mat, fft, |c, i| {
        let t = transfer[i];
        c / (t * t.conj() + Complex::new(shift, T::zero()))
    })
}
