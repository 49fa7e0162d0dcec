//! Patch-based MMSE denoising under the mixture prior, and its fixed-weight
//! linear variant.
//!
//! The MMSE estimate of a centered patch `y` observed at noise level `σ` is
//! `x̂ = Σ_j β_j(y) · C_j (C_j + σ²I)⁻¹ y` with posterior weights `β_j(y)`.
//! Freezing `β` at values computed once from a training image makes the map
//! linear in the input; averaged over all patches it becomes a single matrix
//!
//! `W = (1/patch_dim) Σ_i Pᵢᵀ Fᵢ Pᵢ,  Fᵢ = Σ_j βᵢⱼ C_j (C_j + σ²I)⁻¹`,
//!
//! which is symmetric, positive definite and a strict contraction. That makes
//! `W y` the proximity operator of an explicit convex quadratic, and the
//! diagnostics in this module verify exactly those properties numerically.

use crate::error::{Error, Result};
use crate::gmm::{responsibilities, GmmModel, Responsibilities};
use crate::image::{
    aggregate_patches, build_partition, extract_patches, BandImage, PatchGeometry, PatchSet,
};
use crate::scalar::{count, real, Scalar};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use std::fmt;
use std::sync::Arc;

/// Default ceiling on the pixel count for dense materialization.
pub const MATERIALIZE_CAP: usize = 4096;

/// A denoising plan with posterior weights frozen from a training image.
///
/// `mean_handling` controls whether patch means are removed before filtering
/// and re-injected after (the default, matching [`denoise_mmse`]). The
/// spectral diagnostics concern the operator with mean handling disabled:
/// re-injected means pass straight through the map, which parks an eigenvalue
/// at exactly one and breaks symmetry.
#[derive(Debug, Clone)]
pub struct FixedWeightPlan<T: Scalar> {
    model: Arc<GmmModel<T>>,
    beta: Responsibilities<T>,
    geometry: PatchGeometry,
    mean_handling: bool,
}

impl<T: Scalar> FixedWeightPlan<T> {
    pub fn model(&self) -> &GmmModel<T> {
        &self.model
    }

    pub fn beta(&self) -> &Responsibilities<T> {
        &self.beta
    }

    pub fn geometry(&self) -> &PatchGeometry {
        &self.geometry
    }

    pub fn mean_handling(&self) -> bool {
        self.mean_handling
    }

    /// Toggle per-patch mean removal/re-injection at apply time.
    pub fn with_mean_handling(mut self, on: bool) -> Self {
        self.mean_handling = on;
        self
    }
}

/// Compute posterior weights on the training image (centered patches, noise
/// level `sigma_train`) and freeze them into a reusable plan.
pub fn freeze_weights<T: Scalar>(
    model: Arc<GmmModel<T>>,
    training: &BandImage<T>,
    sigma_train: T,
    geometry: &PatchGeometry,
) -> Result<FixedWeightPlan<T>> {
    geometry.matches(training)?;
    if geometry.patch_dim() != model.patch_dim() {
        return Err(Error::dims(format!(
            "model patch dimension {} does not match geometry patch dimension {}",
            model.patch_dim(),
            geometry.patch_dim()
        )));
    }
    let patches = extract_patches(training, geometry, true)?;
    let beta = responsibilities(&model, patches.data(), sigma_train)?;
    Ok(FixedWeightPlan { model, beta, geometry: *geometry, mean_handling: true })
}

/// `Σ_j colscale(U_j diag(f_j) U_jᵀ Y, β_j)`: apply the per-component MMSE
/// filters in their eigenbases and blend with the given weights. Never forms
/// any per-patch filter densely.
fn apply_component_filters<T: Scalar>(
    model: &GmmModel<T>,
    beta: &DMatrix<T>,
    patches: &DMatrix<T>,
    sigma: T,
) -> DMatrix<T> {
    let np = patches.nrows();
    let n = patches.ncols();
    let k = model.component_count();
    let parts: Vec<DMatrix<T>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let eig = model.eigen(j);
            let f = eig.filter_diagonal(sigma);
            let mut w = eig.vectors().transpose() * patches;
            for r in 0..np {
                let fr = f[r];
                for i in 0..n {
                    w[(r, i)] *= fr;
                }
            }
            let mut filtered = eig.vectors() * w;
            for i in 0..n {
                let b = beta[(j, i)];
                for r in 0..np {
                    filtered[(r, i)] *= b;
                }
            }
            filtered
        })
        .collect();
    let mut out = DMatrix::<T>::zeros(np, n);
    for p in parts {
        out += p;
    }
    out
}

fn check_sigma<T: Scalar>(sigma: T) -> Result<()> {
    if !(sigma > T::zero()) || !sigma.is_finite() {
        return Err(Error::invalid("noise standard deviation must be positive and finite"));
    }
    Ok(())
}

/// Full MMSE denoiser: posterior weights recomputed from the noisy input.
pub fn denoise_mmse<T: Scalar>(
    model: &GmmModel<T>,
    img: &BandImage<T>,
    sigma: T,
    geometry: &PatchGeometry,
) -> Result<BandImage<T>> {
    check_sigma(sigma)?;
    geometry.matches(img)?;
    let patches = extract_patches(img, geometry, true)?;
    let beta = responsibilities(model, patches.data(), sigma)?;
    let filtered = apply_component_filters(model, beta.beta(), patches.data(), sigma);
    let out = PatchSet::new(*geometry, filtered, patches.means().cloned())?;
    aggregate_patches(&out)
}

/// Linear denoiser with the plan's frozen weights.
pub fn apply_fixed<T: Scalar>(
    plan: &FixedWeightPlan<T>,
    img: &BandImage<T>,
    sigma: T,
) -> Result<BandImage<T>> {
    check_sigma(sigma)?;
    plan.geometry.matches(img)?;
    let patches = extract_patches(img, &plan.geometry, plan.mean_handling)?;
    let filtered = apply_component_filters(&plan.model, plan.beta.beta(), patches.data(), sigma);
    let out = PatchSet::new(plan.geometry, filtered, patches.means().cloned())?;
    aggregate_patches(&out)
}

/// Assemble the plan's linear map as a dense pixels-by-pixels matrix.
///
/// Columns agree with [`apply_fixed`] on unit impulses. Guarded by a pixel
/// cap (default [`MATERIALIZE_CAP`]) because the dense form is quadratic in
/// the image size.
pub fn materialize_operator<T: Scalar>(
    plan: &FixedWeightPlan<T>,
    sigma: T,
    cap: Option<usize>,
) -> Result<DMatrix<T>> {
    check_sigma(sigma)?;
    let geometry = plan.geometry;
    let n = geometry.patch_count();
    let cap = cap.unwrap_or(MATERIALIZE_CAP);
    if n > cap {
        return Err(Error::invalid(format!(
            "refusing to materialize a {n}x{n} operator (cap {cap})"
        )));
    }
    let np = geometry.patch_dim();
    let filters = component_filters_dense(&plan.model, sigma);
    let inv_np = T::one() / count::<T>(np);
    let j_entry = inv_np; // entries of the patch-mean projector J = 11ᵀ/np
    let mut w = DMatrix::<T>::zeros(n, n);
    let mut f_i = DMatrix::<T>::zeros(np, np);
    for i in 0..n {
        f_i.fill(T::zero());
        for (j, g) in filters.iter().enumerate() {
            let b = plan.beta.beta()[(j, i)];
            f_i += g * b;
        }
        if plan.mean_handling {
            // G = F(I − J) + J, applied patch-locally.
            let mut g_i = DMatrix::<T>::zeros(np, np);
            for a in 0..np {
                let mut row_sum = T::zero();
                for b in 0..np {
                    row_sum += f_i[(a, b)];
                }
                for b in 0..np {
                    g_i[(a, b)] = f_i[(a, b)] - row_sum * j_entry + j_entry;
                }
            }
            f_i.copy_from(&g_i);
        } else {
            let sym = (&f_i + f_i.transpose()) * real::<T>(0.5);
            f_i.copy_from(&sym);
        }
        for a in 0..np {
            let pa = geometry.pixel_index(i, a);
            for b in 0..np {
                w[(pa, geometry.pixel_index(i, b))] += f_i[(a, b)] * inv_np;
            }
        }
    }
    Ok(w)
}

/// Dense per-component filters `U diag(f) Uᵀ`, reused across patches.
fn component_filters_dense<T: Scalar>(model: &GmmModel<T>, sigma: T) -> Vec<DMatrix<T>> {
    (0..model.component_count())
        .map(|j| {
            let eig = model.eigen(j);
            let f = eig.filter_diagonal(sigma);
            let mut scaled = eig.vectors().clone();
            for r in 0..f.len() {
                let fr = f[r];
                for a in 0..scaled.nrows() {
                    scaled[(a, r)] *= fr;
                }
            }
            scaled * eig.vectors().transpose()
        })
        .collect()
}

/// Numerical verdict on the fixed-weight operator's claimed properties.
#[derive(Debug, Clone)]
pub struct DenoiserReport<T> {
    pub n: usize,
    pub patch_dim: usize,
    pub sigma: T,
    /// `max |W - Wᵀ|` of the materialized operator.
    pub symmetry_defect: T,
    pub min_eigenvalue: T,
    pub max_eigenvalue: T,
    /// Equals `max_eigenvalue` for a positive definite operator.
    pub spectral_norm: T,
    /// Per component: the analytic eigenvalue range of its filter,
    /// `[ς_min/(ς_min+σ²), ς_max/(ς_max+σ²)]`.
    pub component_bounds: Vec<(T, T)>,
    /// Convex hull of the component bounds; the spectrum must lie inside.
    pub analytic_hull: (T, T),
    /// Eigenvalue ranges of the per-offset-class operators, when the patch
    /// side divides the image dimensions.
    pub subset_ranges: Option<Vec<(T, T)>>,
    /// `‖Wv - λv‖_∞` for the extreme eigenpairs.
    pub extreme_eigen_residual: T,
}

impl<T: Scalar> fmt::Display for DenoiserReport<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fixed-weight denoiser operator: {0}x{0} pixels, patch_dim {1}, sigma {2:.6}",
            self.n, self.patch_dim, self.sigma.to_f64_lossy())?;
        writeln!(f, "symmetry_defect: {:.3e}", self.symmetry_defect.to_f64_lossy())?;
        writeln!(
            f,
            "eigenvalues: [{:.12}, {:.12}] (spectral norm {:.12})",
            self.min_eigenvalue.to_f64_lossy(),
            self.max_eigenvalue.to_f64_lossy(),
            self.spectral_norm.to_f64_lossy()
        )?;
        writeln!(
            f,
            "analytic hull: [{:.12}, {:.12}]",
            self.analytic_hull.0.to_f64_lossy(),
            self.analytic_hull.1.to_f64_lossy()
        )?;
        writeln!(f, "extreme eigenpair residual: {:.3e}", self.extreme_eigen_residual.to_f64_lossy())?;
        for (j, (lo, hi)) in self.component_bounds.iter().enumerate() {
            writeln!(f, "component {j}: filter range [{:.9}, {:.9}]", lo.to_f64_lossy(), hi.to_f64_lossy())?;
        }
        if let Some(ranges) = &self.subset_ranges {
            for (j, (lo, hi)) in ranges.iter().enumerate() {
                writeln!(f, "offset class {j}: eigenvalue range [{:.9}, {:.9}]", lo.to_f64_lossy(), hi.to_f64_lossy())?;
            }
        }
        Ok(())
    }
}

/// Materialize the operator and verify symmetry, a spectrum strictly inside
/// `(0, 1)`, and containment in the analytic hull. Returns the measurements
/// on success; any violated property is an error.
pub fn verify_spectrum<T: Scalar>(plan: &FixedWeightPlan<T>, sigma: T) -> Result<DenoiserReport<T>> {
    let w = materialize_operator(plan, sigma, None)?;
    let n = w.nrows();
    let scale = w.abs().max().max(T::one());
    let symmetry_defect = (&w - w.transpose()).abs().max();
    let mut violations: Vec<String> = Vec::new();
    if symmetry_defect > real::<T>(1e-12) * scale {
        violations.push(format!(
            "operator not symmetric: defect {:.3e} (mean handling on?)",
            symmetry_defect.to_f64_lossy()
        ));
    }

    let sym = (&w + w.transpose()) * real::<T>(0.5);
    let eig = SymmetricEigen::new(sym);
    let mut min_idx = 0;
    let mut max_idx = 0;
    for i in 0..n {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[max_idx] {
            max_idx = i;
        }
    }
    let min_eigenvalue = eig.eigenvalues[min_idx];
    let max_eigenvalue = eig.eigenvalues[max_idx];

    let s2 = sigma * sigma;
    let component_bounds: Vec<(T, T)> = (0..plan.model.component_count())
        .map(|j| {
            let vals = plan.model.eigen(j).values();
            let hi = vals[0];
            let lo = vals[vals.len() - 1];
            (lo / (lo + s2), hi / (hi + s2))
        })
        .collect();
    let analytic_hull = component_bounds.iter().fold(
        (T::max_value().unwrap(), T::min_value().unwrap()),
        |(lo, hi), &(l, h)| (lo.min(l), hi.max(h)),
    );

    if !(min_eigenvalue > T::zero()) {
        violations.push(format!("min eigenvalue {:.3e} not positive", min_eigenvalue.to_f64_lossy()));
    }
    if !(max_eigenvalue < T::one()) {
        violations.push(format!("max eigenvalue {:.12} not below one", max_eigenvalue.to_f64_lossy()));
    }
    let slack = real::<T>(1e-10);
    if min_eigenvalue < analytic_hull.0 - slack || max_eigenvalue > analytic_hull.1 + slack {
        violations.push(format!(
            "spectrum [{:.12}, {:.12}] escapes analytic hull [{:.12}, {:.12}]",
            min_eigenvalue.to_f64_lossy(),
            max_eigenvalue.to_f64_lossy(),
            analytic_hull.0.to_f64_lossy(),
            analytic_hull.1.to_f64_lossy()
        ));
    }

    let mut extreme_eigen_residual = T::zero();
    for idx in [min_idx, max_idx] {
        let v = eig.eigenvectors.column(idx);
        let res = (&w * v - v * eig.eigenvalues[idx]).abs().max();
        extreme_eigen_residual = extreme_eigen_residual.max(res);
    }
    if extreme_eigen_residual > real::<T>(1e-9) * scale {
        violations.push(format!(
            "extreme eigenpair residual {:.3e} too large",
            extreme_eigen_residual.to_f64_lossy()
        ));
    }

    let subset_ranges = subset_eigen_ranges(plan, sigma)?;
    let report = DenoiserReport {
        n,
        patch_dim: plan.geometry.patch_dim(),
        sigma,
        symmetry_defect,
        min_eigenvalue,
        max_eigenvalue,
        spectral_norm: min_eigenvalue.abs().max(max_eigenvalue.abs()),
        component_bounds,
        analytic_hull,
        subset_ranges,
        extreme_eigen_residual,
    };
    if violations.is_empty() {
        Ok(report)
    } else {
        Err(Error::DiagnosticFailure(format!("{}\n{report}", violations.join("; "))))
    }
}

/// Eigenvalue range of each offset class's block-diagonal operator: the
/// classes tile the image, so each range is the union over the class's
/// per-patch filter spectra.
fn subset_eigen_ranges<T: Scalar>(
    plan: &FixedWeightPlan<T>,
    sigma: T,
) -> Result<Option<Vec<(T, T)>>> {
    let geometry = plan.geometry;
    let side = geometry.patch_side();
    if geometry.width() % side != 0 || geometry.height() % side != 0 {
        return Ok(None);
    }
    let partition = build_partition(&geometry)?;
    let filters = component_filters_dense(&plan.model, sigma);
    let np = geometry.patch_dim();
    let ranges: Vec<(T, T)> = partition
        .subsets()
        .par_iter()
        .map(|subset| {
            let mut lo = T::max_value().unwrap();
            let mut hi = T::min_value().unwrap();
            let mut f_i = DMatrix::<T>::zeros(np, np);
            for &i in subset {
                f_i.fill(T::zero());
                for (j, g) in filters.iter().enumerate() {
                    f_i += g * plan.beta.beta()[(j, i)];
                }
                let sym = (&f_i + f_i.transpose()) * real::<T>(0.5);
                let eig = SymmetricEigen::new(sym);
                for v in eig.eigenvalues.iter() {
                    lo = lo.min(*v);
                    hi = hi.max(*v);
                }
            }
            (lo, hi)
        })
        .collect();
    Ok(Some(ranges))
}

/// Defect of the proximity identity: the patch-wise fixed-weight output must
/// match a dense route that inverts the materialized operator and solves the
/// prox normal equations. Returns `‖x_dense - x_patchwise‖_∞`.
pub fn prox_defect<T: Scalar>(
    plan: &FixedWeightPlan<T>,
    sigma: T,
    y: &BandImage<T>,
) -> Result<T> {
    plan.geometry.matches(y)?;
    let w = materialize_operator(plan, sigma, None)?;
    let scale = w.abs().max().max(T::one());
    let defect = (&w - w.transpose()).abs().max();
    if defect > real::<T>(1e-10) * scale {
        return Err(Error::invalid(
            "prox interpretation requires a symmetric operator; disable mean handling",
        ));
    }
    let sym = (&w + w.transpose()) * real::<T>(0.5);
    let chol = Cholesky::new(sym)
        .ok_or_else(|| Error::DiagnosticFailure("operator not positive definite".to_string()))?;
    let w_inv = chol.inverse();
    // minimize ½‖x−y‖² + ½xᵀ(W⁻¹−I)x  ⇔  (I + W⁻¹ − I) x = y.
    let a = w_inv;
    let chol_a = Cholesky::new(a)
        .ok_or_else(|| Error::DiagnosticFailure("inverse operator not positive definite".to_string()))?;
    let rhs = DVector::from_column_slice(y.values());
    let x = chol_a.solve(&rhs);
    let direct = apply_fixed(plan, y, sigma)?;
    let mut worst = T::zero();
    for (a, b) in x.iter().zip(direct.values()) {
        worst = worst.max((*a - *b).abs());
    }
    Ok(worst)
}

/// Scalar (one-pixel patch, two component) MMSE map on a grid: the posterior
/// weights move with the input, so the map is nonlinear and can locally
/// expand.
pub fn scalar_mmse_curve<T: Scalar>(
    alpha: [T; 2],
    variances: [T; 2],
    sigma: T,
    grid: &[T],
) -> Vec<T> {
    let s2 = sigma * sigma;
    let half = real::<T>(0.5);
    grid.iter()
        .map(|&y| {
            let mut logw = [T::zero(); 2];
            for j in 0..2 {
                let lam = variances[j] + s2;
                logw[j] = alpha[j].ln() - half * ((T::TAU() * lam).ln() + y * y / lam);
            }
            let m = logw[0].max(logw[1]);
            let w0 = (logw[0] - m).exp();
            let w1 = (logw[1] - m).exp();
            let b0 = w0 / (w0 + w1);
            let b1 = w1 / (w0 + w1);
            let gain = b0 * variances[0] / (variances[0] + s2) + b1 * variances[1] / (variances[1] + s2);
            gain * y
        })
        .collect()
}

/// The companion linear map with frozen scalar weights: constant slope
/// `Σ_j β_j c_j/(c_j+σ²)`, strictly inside `(0, 1)`.
pub fn scalar_fixed_curve<T: Scalar>(
    beta: [T; 2],
    variances: [T; 2],
    sigma: T,
    grid: &[T],
) -> Vec<T> {
    let s2 = sigma * sigma;
    let slope =
        beta[0] * variances[0] / (variances[0] + s2) + beta[1] * variances[1] / (variances[1] + s2);
    grid.iter().map(|&y| slope * y).collect()
}

/// Largest forward difference quotient of sampled curve values.
pub fn max_difference_quotient<T: Scalar>(grid: &[T], values: &[T]) -> T {
    assert_eq!(grid.len(), values.len());
    let mut worst = T::min_value().unwrap();
    for i in 1..grid.len() {
        let dq = (values[i] - values[i - 1]) / (grid[i] - grid[i - 1]);
        worst = worst.max(dq);
    }
    worst
}
