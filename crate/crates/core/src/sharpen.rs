//! Subspace-based hyperspectral sharpening by operator splitting.
//!
//! The latent image `X` (subspace coefficients, one row per latent band)
//! explains both observations: `Yh = E X B M + noise` on the low-resolution
//! grid and `Ym = R E X + noise` on the full grid. The solver minimizes
//!
//! `½‖EXBM − Yh‖² + (λ/2)‖REX − Ym‖² + g(X)`
//!
//! where `g` is the convex quadratic implicitly defined by the fixed-weight
//! denoiser (applied at noise variance `τ/ρ`). Splitting variables are
//! attached to `XB`, `X`, `X`; every update is a closed form: an FFT solve
//! for `X`, two small Cholesky solves for the data blocks, and one denoiser
//! application for the prior block.

use crate::cube::HSCube;
use crate::degradation::{kernel_transfer, DegradationModel};
use crate::denoiser::{apply_fixed, materialize_operator, FixedWeightPlan};
use crate::error::{Error, Result};
use crate::fft::{convolve_rows, correlate_rows, solve_rows_shifted, Fft2};
use crate::image::BandImage;
use crate::scalar::{count, real, Scalar};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftNum;

/// Pixel-count ceiling for automatic dense evaluation of the regularizer
/// term inside objectives and traces.
pub const TRACE_REG_CAP: usize = 1024;

/// Orthonormal basis of the band subspace with the full correlation
/// spectrum.
#[derive(Debug, Clone)]
pub struct SubspaceBasis<T: Scalar> {
    basis: DMatrix<T>,
    eigenvalues: DVector<T>,
}

impl<T: Scalar> SubspaceBasis<T> {
    /// Wrap a basis, validating column orthonormality (defect ≤ 1e-10) and a
    /// non-increasing eigenvalue list covering every band.
    pub fn new(basis: DMatrix<T>, eigenvalues: DVector<T>) -> Result<Self> {
        if basis.ncols() == 0 || basis.ncols() > basis.nrows() {
            return Err(Error::invalid("subspace dimension must be in [1, band count]"));
        }
        if eigenvalues.len() != basis.nrows() {
            return Err(Error::dims("one eigenvalue per band required".to_string()));
        }
        let gram = basis.transpose() * &basis;
        let mut defect = T::zero();
        for r in 0..gram.nrows() {
            for c in 0..gram.ncols() {
                let want = if r == c { T::one() } else { T::zero() };
                defect = defect.max((gram[(r, c)] - want).abs());
            }
        }
        if defect > real::<T>(1e-10) {
            return Err(Error::invalid(format!(
                "basis columns not orthonormal: defect {:.3e}",
                defect.to_f64_lossy()
            )));
        }
        for i in 1..eigenvalues.len() {
            if eigenvalues[i] > eigenvalues[i - 1] {
                return Err(Error::invalid("eigenvalues must be non-increasing"));
            }
        }
        Ok(SubspaceBasis { basis, eigenvalues })
    }

    /// `band_count x subspace_dim`, orthonormal columns.
    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    /// All band-correlation eigenvalues, non-increasing.
    pub fn eigenvalues(&self) -> &DVector<T> {
        &self.eigenvalues
    }

    pub fn band_count(&self) -> usize {
        self.basis.nrows()
    }

    pub fn subspace_dim(&self) -> usize {
        self.basis.ncols()
    }
}

/// Top eigenvectors of the band correlation matrix `Yh Yhᵀ / pixels`, sorted
/// by eigenvalue, each column signed so its largest-magnitude entry is
/// positive.
pub fn learn_subspace<T: Scalar>(yh: &HSCube<T>, subspace_dim: usize) -> Result<SubspaceBasis<T>> {
    let lh = yh.bands();
    if subspace_dim == 0 || subspace_dim > lh {
        return Err(Error::invalid(format!(
            "subspace dimension must be in [1, {lh}], got {subspace_dim}"
        )));
    }
    let scale = T::one() / count::<T>(yh.pixels());
    let corr = yh.data() * yh.data().transpose() * scale;
    let corr = (&corr + corr.transpose()) * real::<T>(0.5);
    let eig = SymmetricEigen::new(corr);
    let mut order: Vec<usize> = (0..lh).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });
    let mut basis = DMatrix::<T>::zeros(lh, subspace_dim);
    for (k, &idx) in order.iter().take(subspace_dim).enumerate() {
        let col = eig.eigenvectors.column(idx);
        let mut lead = 0;
        for r in 1..lh {
            if col[r].abs() > col[lead].abs() {
                lead = r;
            }
        }
        let sign = if col[lead] < T::zero() { -T::one() } else { T::one() };
        for r in 0..lh {
            basis[(r, k)] = col[r] * sign;
        }
    }
    let eigenvalues = DVector::from_iterator(lh, order.iter().map(|&i| eig.eigenvalues[i]));
    SubspaceBasis::new(basis, eigenvalues)
}

/// Solver parameters. `tau = 0` disables the prior block: its update becomes
/// an exact pass-through and the regularizer term is exactly zero.
#[derive(Debug, Clone, Copy)]
pub struct SolverParams<T> {
    /// Splitting penalty, fixed across iterations.
    pub rho: T,
    /// Weight of the full-grid data term.
    pub lambda: T,
    /// Weight of the prior; the denoiser runs at noise variance `tau/rho`.
    pub tau: T,
    pub max_iters: usize,
    /// Residual tolerance per degree of freedom; the loop stops when the
    /// summed primal and dual residual norms drop below
    /// `tol · sqrt(3 · latent entries)`.
    pub tol: T,
}

impl<T: Scalar> Default for SolverParams<T> {
    fn default() -> Self {
        SolverParams {
            rho: real(0.05),
            lambda: T::one(),
            tau: real(1e-3),
            max_iters: 200,
            tol: real(1e-6),
        }
    }
}

impl<T: Scalar> SolverParams<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > T::zero()) || !self.rho.is_finite() {
            return Err(Error::invalid("rho must be positive and finite"));
        }
        if self.lambda < T::zero() || !self.lambda.is_finite() {
            return Err(Error::invalid("lambda must be non-negative and finite"));
        }
        if self.tau < T::zero() || !self.tau.is_finite() {
            return Err(Error::invalid("tau must be non-negative and finite"));
        }
        if self.tol < T::zero() || !self.tol.is_finite() {
            return Err(Error::invalid("tol must be non-negative and finite"));
        }
        Ok(())
    }
}

/// All iterates of the splitting loop. Fields are public so diagnostics can
/// inspect or drive single steps.
#[derive(Debug, Clone)]
pub struct SolverState<T> {
    /// Latent subspace image, `subspace_dim x pixels`.
    pub latent: DMatrix<T>,
    /// Splitting variable attached to `XB` (low-resolution data block).
    pub hs_split: DMatrix<T>,
    /// Splitting variable attached to `X` (full-grid data block).
    pub ms_split: DMatrix<T>,
    /// Splitting variable attached to `X` (prior block).
    pub prior_split: DMatrix<T>,
    pub hs_dual: DMatrix<T>,
    pub ms_dual: DMatrix<T>,
    pub prior_dual: DMatrix<T>,
    pub iteration: usize,
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord<T> {
    pub iteration: usize,
    /// Objective at the current latent image; includes the regularizer term
    /// only when the instance is small enough to materialize (see
    /// [`TRACE_REG_CAP`]), otherwise it is the data-term lower bound.
    pub objective: T,
    pub primal_residual: T,
    pub dual_residual: T,
}

/// Render a trace as CSV.
pub fn trace_to_csv<T: Scalar>(trace: &[IterationRecord<T>]) -> String {
    let mut out = String::from("iteration,objective,primal_residual,dual_residual\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration,
            r.objective.to_f64_lossy(),
            r.primal_residual.to_f64_lossy(),
            r.dual_residual.to_f64_lossy()
        ));
    }
    out
}

/// Objective decomposition. `total = hs_data + lambda·ms_data + regularizer`
/// when the regularizer is available; without it, `total` is a lower bound.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveValue<T> {
    pub total: T,
    /// `½‖EXBM − Yh‖²`.
    pub hs_data: T,
    /// `½‖REX − Ym‖²`, unweighted.
    pub ms_data: T,
    /// The prior term including its weight, `ρ · Σ_bands ½ xᵀ(W⁻¹ − I)x`;
    /// `None` when the operator is too large to materialize or has no
    /// symmetric quadratic interpretation.
    pub regularizer: Option<T>,
}

enum RegEval<T> {
    /// Prior disabled (`tau = 0`).
    Zero,
    /// Dense `W⁻¹ − I`.
    Dense(DMatrix<T>),
    /// Too large or not a symmetric quadratic.
    Omitted,
}

/// Precomputed context for one sharpening instance: FFT plans, the blur
/// transfer function, both small Cholesky factors and the constant parts of
/// the data-block right-hand sides.
pub struct SharpeningProblem<'a, T: Scalar + FftNum> {
    basis: &'a SubspaceBasis<T>,
    model: &'a DegradationModel<T>,
    plan: &'a FixedWeightPlan<T>,
    params: SolverParams<T>,
    yh: &'a HSCube<T>,
    ym: &'a HSCube<T>,
    fft: Fft2<T>,
    transfer: Vec<Complex<T>>,
    hs_factor: Cholesky<T, Dyn>,
    ms_factor: Cholesky<T, Dyn>,
    /// `Eᵀ · (Yh zero-filled onto the full grid)`.
    et_yh: DMatrix<T>,
    /// `λ(RE)ᵀ Ym`.
    gt_ym_scaled: DMatrix<T>,
    mask_flags: Vec<bool>,
    sigma: T,
    reg: RegEval<T>,
}

/// Result of a solve: the sharpened cube `Ẑ = E X̂`, the latent image, and
/// the per-iteration trace.
#[derive(Debug, Clone)]
pub struct SharpenOutput<T: Scalar> {
    pub cube: HSCube<T>,
    pub latent: DMatrix<T>,
    pub trace: Vec<IterationRecord<T>>,
    pub converged: bool,
}

impl<'a, T: Scalar + FftNum> SharpeningProblem<'a, T> {
    pub fn new(
        yh: &'a HSCube<T>,
        ym: &'a HSCube<T>,
        basis: &'a SubspaceBasis<T>,
        model: &'a DegradationModel<T>,
        plan: &'a FixedWeightPlan<T>,
        params: SolverParams<T>,
    ) -> Result<Self> {
        params.validate()?;
        let mask = model.mask();
        let (w, h) = (mask.width(), mask.height());
        if ym.width() != w || ym.height() != h {
            return Err(Error::dims(format!(
                "full-grid cube is {}x{}, mask grid is {w}x{h}",
                ym.width(),
                ym.height()
            )));
        }
        if yh.width() != mask.low_width() || yh.height() != mask.low_height() {
            return Err(Error::dims(format!(
                "low-resolution cube is {}x{}, mask lattice is {}x{}",
                yh.width(),
                yh.height(),
                mask.low_width(),
                mask.low_height()
            )));
        }
        if yh.bands() != model.hs_bands() || basis.band_count() != model.hs_bands() {
            return Err(Error::dims("band count disagrees between cube, basis and response".to_string()));
        }
        if ym.bands() != model.ms_bands() {
            return Err(Error::dims("full-grid cube bands disagree with response rows".to_string()));
        }
        if plan.geometry().width() != w || plan.geometry().height() != h {
            return Err(Error::dims("denoiser plan geometry does not match the full grid".to_string()));
        }

        let fft = Fft2::new(w, h);
        let transfer = kernel_transfer(model.blur(), &fft)?;
        let e = basis.basis();
        let ls = basis.subspace_dim();
        let eye = DMatrix::<T>::identity(ls, ls);
        let hs_gram = e.transpose() * e + &eye * params.rho;
        let hs_factor = Cholesky::new(hs_gram)
            .ok_or_else(|| Error::invalid("low-resolution block normal matrix not positive definite"))?;
        let ge = model.response() * e;
        let ms_gram = ge.transpose() * &ge * params.lambda + &eye * params.rho;
        let ms_factor = Cholesky::new(ms_gram)
            .ok_or_else(|| Error::invalid("full-grid block normal matrix not positive definite"))?;
        let et_yh = e.transpose() * mask.embed_cols(yh.data())?;
        let gt_ym_scaled = ge.transpose() * ym.data() * params.lambda;
        let sigma = (params.tau / params.rho).sqrt();
        let reg = Self::build_reg(plan, sigma, w * h);
        Ok(SharpeningProblem {
            basis,
            model,
            plan,
            params,
            yh,
            ym,
            fft,
            transfer,
            hs_factor,
            ms_factor,
            et_yh,
            gt_ym_scaled,
            mask_flags: mask.full_mask(),
            sigma,
            reg,
        })
    }

    fn build_reg(plan: &FixedWeightPlan<T>, sigma: T, n: usize) -> RegEval<T> {
        if sigma == T::zero() {
            return RegEval::Zero;
        }
        if n > TRACE_REG_CAP {
            return RegEval::Omitted;
        }
        let w = match materialize_operator(plan, sigma, Some(TRACE_REG_CAP)) {
            Ok(w) => w,
            Err(_) => return RegEval::Omitted,
        };
        let scale = w.abs().max().max(T::one());
        if (&w - w.transpose()).abs().max() > real::<T>(1e-8) * scale {
            return RegEval::Omitted;
        }
        let sym = (&w + w.transpose()) * real::<T>(0.5);
        match Cholesky::new(sym) {
            Some(chol) => {
                let mut m = chol.inverse();
                for i in 0..n {
                    m[(i, i)] -= T::one();
                }
                RegEval::Dense(m)
            }
            None => RegEval::Omitted,
        }
    }

    pub fn params(&self) -> &SolverParams<T> {
        &self.params
    }

    /// Denoiser noise level used by the prior block, `sqrt(tau/rho)`.
    pub fn prior_sigma(&self) -> T {
        self.sigma
    }

    /// Initialization: latent = `Eᵀ · (zero-order-upsampled Yh)`, splitting
    /// variables at their constraint values, duals at zero.
    pub fn initial_state(&self) -> Result<SolverState<T>> {
        let up = self.model.mask().upsample_nearest(self.yh.data())?;
        let latent = self.basis.basis().transpose() * up;
        let hs_split = convolve_rows(&latent, &self.fft, &self.transfer);
        let (ls, n) = (latent.nrows(), latent.ncols());
        Ok(SolverState {
            hs_split,
            ms_split: latent.clone(),
            prior_split: latent.clone(),
            hs_dual: DMatrix::zeros(ls, n),
            ms_dual: DMatrix::zeros(ls, n),
            prior_dual: DMatrix::zeros(ls, n),
            latent,
            iteration: 0,
        })
    }

    /// Latent update: `X = [(V₁+D₁)Bᵀ + V₂+D₂ + V₃+D₃]·(BBᵀ+2I)⁻¹`, solved
    /// per band in the frequency domain.
    pub fn update_latent(&self, state: &SolverState<T>) -> DMatrix<T> {
        let sum = correlate_rows(&(&state.hs_split + &state.hs_dual), &self.fft, &self.transfer)
            + (&state.ms_split + &state.ms_dual)
            + (&state.prior_split + &state.prior_dual);
        solve_rows_shifted(&sum, &self.fft, &self.transfer, real(2.0))
    }

    /// Low-resolution block: at kept pixels `(EᵀE+ρI)⁻¹(EᵀYh + ρ(XB−D₁))`,
    /// elsewhere `XB−D₁`.
    pub fn update_hs_block(&self, xb: &DMatrix<T>, hs_dual: &DMatrix<T>) -> DMatrix<T> {
        let a = xb - hs_dual;
        let rhs = &self.et_yh + &a * self.params.rho;
        let mut v = self.hs_factor.solve(&rhs);
        for (p, &kept) in self.mask_flags.iter().enumerate() {
            if !kept {
                v.column_mut(p).copy_from(&a.column(p));
            }
        }
        v
    }

    /// Full-grid block: `(λ(RE)ᵀ(RE)+ρI)⁻¹(λ(RE)ᵀYm + ρ(X−D₂))`.
    pub fn update_ms_block(&self, x: &DMatrix<T>, ms_dual: &DMatrix<T>) -> DMatrix<T> {
        let rhs = &self.gt_ym_scaled + (x - ms_dual) * self.params.rho;
        self.ms_factor.solve(&rhs)
    }

    /// Prior block: the fixed-weight denoiser applied to each latent band of
    /// `X−D₃` at noise level `sqrt(tau/rho)`; pass-through when `tau = 0`.
    pub fn update_prior_block(&self, x: &DMatrix<T>, prior_dual: &DMatrix<T>) -> Result<DMatrix<T>> {
        let a = x - prior_dual;
        if self.sigma == T::zero() {
            return Ok(a);
        }
        let (w, h) = (self.fft.width(), self.fft.height());
        let rows: Result<Vec<Vec<T>>> = (0..a.nrows())
            .into_par_iter()
            .map(|l| {
                let vals: Vec<T> = a.row(l).iter().copied().collect();
                let img = BandImage::new(w, h, vals)?;
                Ok(apply_fixed(self.plan, &img, self.sigma)?.into_values())
            })
            .collect();
        let rows = rows?;
        let mut v = DMatrix::zeros(a.nrows(), a.ncols());
        for (l, vals) in rows.into_iter().enumerate() {
            for (p, val) in vals.into_iter().enumerate() {
                v[(l, p)] = val;
            }
        }
        Ok(v)
    }

    /// One full iteration in place; returns the trace record.
    pub fn step(&self, state: &mut SolverState<T>) -> Result<IterationRecord<T>> {
        let x = self.update_latent(state);
        let xb = convolve_rows(&x, &self.fft, &self.transfer);
        let v1 = self.update_hs_block(&xb, &state.hs_dual);
        let v2 = self.update_ms_block(&x, &state.ms_dual);
        let v3 = self.update_prior_block(&x, &state.prior_dual)?;

        let primal = ((&xb - &v1).norm_squared()
            + (&x - &v2).norm_squared()
            + (&x - &v3).norm_squared())
        .sqrt();
        let dual_mat = correlate_rows(&(&v1 - &state.hs_split), &self.fft, &self.transfer)
            + (&v2 - &state.ms_split)
            + (&v3 - &state.prior_split);
        let dual = dual_mat.norm() * self.params.rho;

        state.hs_dual += &v1 - &xb;
        state.ms_dual += &v2 - &x;
        state.prior_dual += &v3 - &x;
        state.hs_split = v1;
        state.ms_split = v2;
        state.prior_split = v3;
        state.latent = x;
        state.iteration += 1;
        if state.latent.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("solver iterates"));
        }
        let objective = self.objective_value(&state.latent).total;
        Ok(IterationRecord {
            iteration: state.iteration,
            objective,
            primal_residual: primal,
            dual_residual: dual,
        })
    }

    /// Objective decomposition at an arbitrary latent image.
    pub fn objective_value(&self, latent: &DMatrix<T>) -> ObjectiveValue<T> {
        let half = real::<T>(0.5);
        let xb = convolve_rows(latent, &self.fft, &self.transfer);
        let exb = self.basis.basis() * xb;
        let low = self
            .model
            .mask()
            .downsample_cols(&exb)
            .expect("shapes validated at construction");
        let hs_data = (low - self.yh.data()).norm_squared() * half;
        let re = self.model.response() * self.basis.basis();
        let ms_data = (re * latent - self.ym.data()).norm_squared() * half;
        let regularizer = match &self.reg {
            RegEval::Zero => Some(T::zero()),
            RegEval::Omitted => None,
            RegEval::Dense(m) => {
                let mut acc = T::zero();
                for l in 0..latent.nrows() {
                    let xv = latent.row(l).transpose();
                    acc += xv.dot(&(m * &xv));
                }
                Some(acc * half * self.params.rho)
            }
        };
        let total = hs_data + self.params.lambda * ms_data + regularizer.unwrap_or(T::zero());
        ObjectiveValue { total, hs_data, ms_data, regularizer }
    }

    /// Run the loop to convergence or the iteration cap.
    pub fn run(&self) -> Result<SharpenOutput<T>> {
        let mut state = self.initial_state()?;
        let dof = 3 * state.latent.nrows() * state.latent.ncols();
        let threshold = self.params.tol * count::<T>(dof).sqrt();
        let mut trace = Vec::new();
        let mut converged = false;
        for _ in 0..self.params.max_iters {
            let rec = self.step(&mut state)?;
            let done = rec.primal_residual + rec.dual_residual < threshold;
            trace.push(rec);
            if done {
                converged = true;
                break;
            }
        }
        let cube = HSCube::new(
            self.fft.width(),
            self.fft.height(),
            self.basis.basis() * &state.latent,
        )?;
        Ok(SharpenOutput { cube, latent: state.latent, trace, converged })
    }
}

/// Convenience wrapper: build the problem and run it.
pub fn solve<T: Scalar + FftNum>(
    yh: &HSCube<T>,
    ym: &HSCube<T>,
    basis: &SubspaceBasis<T>,
    model: &DegradationModel<T>,
    plan: &FixedWeightPlan<T>,
    params: SolverParams<T>,
) -> Result<SharpenOutput<T>> {
    SharpeningProblem::new(yh, ym, basis, model, plan, params)?.run()
}

/// Objective at a given latent image (see [`ObjectiveValue`] for the exact
/// decomposition and when the regularizer is included).
pub fn objective<T: Scalar + FftNum>(
    latent: &DMatrix<T>,
    yh: &HSCube<T>,
    ym: &HSCube<T>,
    basis: &SubspaceBasis<T>,
    model: &DegradationModel<T>,
    plan: &FixedWeightPlan<T>,
    params: SolverParams<T>,
) -> Result<ObjectiveValue<T>> {
    let problem = SharpeningProblem::new(yh, ym, basis, model, plan, params)?;
    if latent.nrows() != basis.subspace_dim() || latent.ncols() != ym.pixels() {
        return Err(Error::dims("latent image shape does not match basis and grid".to_string()));
    }
    Ok(problem.objective_value(latent))
}

/// Low-resolution forward model `E X B M` as a cube on the mask lattice.
pub fn forward_hs<T: Scalar + FftNum>(
    latent: &DMatrix<T>,
    basis: &SubspaceBasis<T>,
    model: &DegradationModel<T>,
) -> Result<HSCube<T>> {
    let mask = model.mask();
    let n = mask.width() * mask.height();
    if latent.nrows() != basis.subspace_dim() || latent.ncols() != n {
        return Err(Error::dims("latent image shape does not match basis and grid".to_string()));
    }
    if basis.band_count() != model.hs_bands() {
        return Err(Error::dims("basis band count disagrees with response".to_string()));
    }
    let fft = Fft2::new(mask.width(), mask.height());
    let transfer = kernel_transfer(model.blur(), &fft)?;
    let z = basis.basis() * latent;
    let zb = convolve_rows(&z, &fft, &transfer);
    HSCube::new(mask.low_width(), mask.low_height(), mask.downsample_cols(&zb)?)
}

/// Full-grid forward model `R E X`.
pub fn forward_ms<T: Scalar>(
    latent: &DMatrix<T>,
    basis: &SubspaceBasis<T>,
    model: &DegradationModel<T>,
) -> Result<HSCube<T>> {
    let mask = model.mask();
    let n = mask.width() * mask.height();
    if latent.nrows() != basis.subspace_dim() || latent.ncols() != n {
        return Err(Error::dims("latent image shape does not match basis and grid".to_string()));
    }
    if basis.band_count() != model.hs_bands() {
        return Err(Error::dims("basis band count disagrees with response".to_string()));
    }
    HSCube::new(mask.width(), mask.height(), model.response() * basis.basis() * latent)
}
