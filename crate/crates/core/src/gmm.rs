//! Zero-mean Gaussian mixture prior over image patches.
//!
//! Patches are modeled as `y ~ Σ_j α_j N(0, C_j)` after per-patch mean
//! removal. Every covariance keeps its symmetric eigendecomposition cached:
//! the same factors drive density evaluation, EM, and the per-component
//! spectral filters of the denoiser.

use crate::error::{Error, Result};
use crate::scalar::{count, real, Scalar};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Eigendecomposition of one component covariance, eigenvalues non-increasing,
/// eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct ComponentEigen<T: Scalar> {
    vectors: DMatrix<T>,
    values: DVector<T>,
}

impl<T: Scalar> ComponentEigen<T> {
    fn from_covariance(cov: &DMatrix<T>) -> Result<Self> {
        let eig = SymmetricEigen::new(cov.clone());
        let dim = cov.nrows();
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .expect("finite eigenvalues")
        });
        let mut vectors = DMatrix::<T>::zeros(dim, dim);
        let mut values = DVector::<T>::zeros(dim);
        for (dst, &src) in order.iter().enumerate() {
            values[dst] = eig.eigenvalues[src];
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        let gram = vectors.transpose() * &vectors;
        let tol = real::<T>(1e-8).max(T::default_epsilon() * real(100.0));
        let defect = (&gram - DMatrix::<T>::identity(dim, dim)).abs().max();
        if defect > tol {
            return Err(Error::DiagnosticFailure(format!(
                "eigenvector basis not orthonormal (defect {:.3e})",
                defect.to_f64_lossy()
            )));
        }
        Ok(ComponentEigen { vectors, values })
    }

    /// Orthonormal eigenvector columns.
    pub fn vectors(&self) -> &DMatrix<T> {
        &self.vectors
    }

    /// Eigenvalues, non-increasing.
    pub fn values(&self) -> &DVector<T> {
        &self.values
    }

    /// Shrinkage factors `ς/(ς+σ²)` of the MMSE filter at noise level `sigma`.
    pub fn filter_diagonal(&self, sigma: T) -> DVector<T> {
        let s2 = sigma * sigma;
        self.values.map(|v| v / (v + s2))
    }
}

/// Zero-mean Gaussian mixture over patch vectors.
#[derive(Debug, Clone)]
pub struct GmmModel<T: Scalar> {
    alpha: Vec<T>,
    means: Vec<DVector<T>>,
    covariances: Vec<DMatrix<T>>,
    eigens: Vec<ComponentEigen<T>>,
}

impl<T: Scalar> GmmModel<T> {
    /// Build a model from weights and covariances. Weights are normalized to
    /// the simplex; covariances are symmetrized and must be positive definite.
    pub fn new(alpha: Vec<T>, covariances: Vec<DMatrix<T>>) -> Result<Self> {
        if alpha.is_empty() || alpha.len() != covariances.len() {
            return Err(Error::dims(
                "one weight per covariance required, at least one component".to_string(),
            ));
        }
        if alpha.iter().any(|&a| !a.is_finite() || a <= T::zero()) {
            return Err(Error::invalid("mixture weights must be positive and finite"));
        }
        let dim = covariances[0].nrows();
        if dim == 0 {
            return Err(Error::invalid("patch dimension must be positive"));
        }
        let total: T = alpha.iter().fold(T::zero(), |a, &b| a + b);
        let alpha: Vec<T> = alpha.into_iter().map(|a| a / total).collect();
        let mut symmetrized = Vec::with_capacity(covariances.len());
        let mut eigens = Vec::with_capacity(covariances.len());
        for (j, c) in covariances.into_iter().enumerate() {
            if c.nrows() != dim || c.ncols() != dim {
                return Err(Error::dims(format!(
                    "component {j} covariance is {}x{}, expected {dim}x{dim}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("covariance entries"));
            }
            let scale = c.abs().max().max(T::one());
            let defect = (&c - c.transpose()).abs().max();
            if defect > real::<T>(1e-8) * scale {
                return Err(Error::invalid(format!(
                    "component {j} covariance is not symmetric (defect {:.3e})",
                    defect.to_f64_lossy()
                )));
            }
            let sym = (&c + c.transpose()) * real::<T>(0.5);
            let eig = ComponentEigen::from_covariance(&sym)?;
            if eig.values[dim - 1] <= T::zero() {
                return Err(Error::invalid(format!(
                    "component {j} covariance is not positive definite (min eigenvalue {:.3e})",
                    eig.values[dim - 1].to_f64_lossy()
                )));
            }
            symmetrized.push(sym);
            eigens.push(eig);
        }
        let means = vec![DVector::<T>::zeros(dim); alpha.len()];
        Ok(GmmModel { alpha, means, covariances: symmetrized, eigens })
    }

    pub fn component_count(&self) -> usize {
        self.alpha.len()
    }

    pub fn patch_dim(&self) -> usize {
        self.covariances[0].nrows()
    }

    /// Simplex weights.
    pub fn alpha(&self) -> &[T] {
        &self.alpha
    }

    /// Component means; identically zero by construction.
    pub fn means(&self) -> &[DVector<T>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<T>] {
        &self.covariances
    }

    pub fn eigen(&self, j: usize) -> &ComponentEigen<T> {
        &self.eigens[j]
    }

    /// Smallest covariance eigenvalue over all components.
    pub fn min_eigenvalue(&self) -> T {
        self.eigens
            .iter()
            .map(|e| e.values[e.values.len() - 1])
            .fold(T::max_value().unwrap(), |a, b| a.min(b))
    }

    /// `log(α_j) + log N(yᵢ; 0, C_j + σ²I)` for every component and patch,
    /// one column per patch.
    pub fn log_joint(&self, patches: &DMatrix<T>, sigma: T) -> Result<DMatrix<T>> {
        let np = self.patch_dim();
        if patches.nrows() != np {
            return Err(Error::dims(format!(
                "patches have dimension {}, model expects {np}",
                patches.nrows()
            )));
        }
        if sigma < T::zero() || !sigma.is_finite() {
            return Err(Error::invalid("noise standard deviation must be non-negative"));
        }
        let n = patches.ncols();
        let k = self.component_count();
        let s2 = sigma * sigma;
        let half = real::<T>(0.5);
        let norm_const = count::<T>(np) * T::TAU().ln();
        let rows: Vec<Vec<T>> = (0..k)
            .into_par_iter()
            .map(|j| {
                let eig = &self.eigens[j];
                // Whitened coordinates: w = diag(1/sqrt(ς+σ²)) Uᵀ y.
                let mut w = eig.vectors.transpose() * patches;
                let mut logdet = T::zero();
                for r in 0..np {
                    let lam = eig.values[r] + s2;
                    logdet += lam.ln();
                    let inv_sqrt = T::one() / lam.sqrt();
                    for i in 0..n {
                        w[(r, i)] *= inv_sqrt;
                    }
                }
                let base = self.alpha[j].ln() - half * (norm_const + logdet);
                (0..n)
                    .map(|i| {
                        let quad = w.column(i).norm_squared();
                        base - half * quad
                    })
                    .collect()
            })
            .collect();
        let mut out = DMatrix::<T>::zeros(k, n);
        for (j, row) in rows.into_iter().enumerate() {
            for (i, v) in row.into_iter().enumerate() {
                out[(j, i)] = v;
            }
        }
        Ok(out)
    }
}

/// Posterior component weights for a set of patches, one column per patch;
/// columns sum to one.
#[derive(Debug, Clone)]
pub struct Responsibilities<T: Scalar> {
    beta: DMatrix<T>,
}

impl<T: Scalar> Responsibilities<T> {
    /// `component_count x patch_count` column-stochastic matrix.
    pub fn beta(&self) -> &DMatrix<T> {
        &self.beta
    }

    pub fn component_count(&self) -> usize {
        self.beta.nrows()
    }

    pub fn patch_count(&self) -> usize {
        self.beta.ncols()
    }
}

fn logsumexp_column<T: Scalar>(col: &[T]) -> T {
    let m = col.iter().fold(T::min_value().unwrap(), |a, &b| a.max(b));
    let sum = col.iter().fold(T::zero(), |a, &b| a + (b - m).exp());
    m + sum.ln()
}

/// Posterior weights `β_j(yᵢ) ∝ α_j N(yᵢ; 0, C_j + σ²I)`, computed in the
/// log domain.
pub fn responsibilities<T: Scalar>(
    model: &GmmModel<T>,
    patches: &DMatrix<T>,
    sigma: T,
) -> Result<Responsibilities<T>> {
    let logj = model.log_joint(patches, sigma)?;
    let k = logj.nrows();
    let mut beta = logj;
    let mut col = vec![T::zero(); k];
    for i in 0..beta.ncols() {
        for j in 0..k {
            col[j] = beta[(j, i)];
        }
        let lse = logsumexp_column(&col);
        for j in 0..k {
            beta[(j, i)] = (col[j] - lse).exp();
        }
    }
    Ok(Responsibilities { beta })
}

/// Total log-likelihood of the patches under the noisy mixture
/// `Σ_j α_j N(0, C_j + σ²I)`.
pub fn log_likelihood<T: Scalar>(
    model: &GmmModel<T>,
    patches: &DMatrix<T>,
    sigma: T,
) -> Result<T> {
    let logj = model.log_joint(patches, sigma)?;
    let k = logj.nrows();
    let mut col = vec![T::zero(); k];
    let mut total = T::zero();
    for i in 0..logj.ncols() {
        for j in 0..k {
            col[j] = logj[(j, i)];
        }
        total += logsumexp_column(&col);
    }
    Ok(total)
}

/// Knobs for [`train_em`].
#[derive(Debug, Clone)]
pub struct EmOptions<T> {
    pub max_iters: usize,
    /// Stop when the relative log-likelihood change falls below this.
    pub rel_tol: T,
    pub seed: u64,
    /// Noise standard deviation the training patches are assumed to carry.
    /// Zero means clean training data (plain EM).
    pub sigma_train: T,
    /// Covariance ridge, as a fraction of the mean patch variance.
    pub eps_reg_scale: T,
}

impl<T: Scalar> Default for EmOptions<T> {
    fn default() -> Self {
        EmOptions {
            max_iters: 200,
            rel_tol: real(1e-6),
            seed: 0,
            sigma_train: T::zero(),
            eps_reg_scale: real(1e-6),
        }
    }
}

/// Convergence record of one EM run.
#[derive(Debug, Clone)]
pub struct EmReport<T> {
    /// Log-likelihood after each E-step.
    pub log_likelihoods: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    /// Ridge actually added to every covariance.
    pub eps_reg: T,
}

/// Fit a zero-mean mixture to (already centered) patch columns.
///
/// With `sigma_train > 0` the patches are treated as noisy observations of
/// the modeled clean patches: the E-step works against `C_j + σ²I` and the
/// M-step accumulates conditional second moments, so the observed-data
/// log-likelihood is still non-decreasing. At `sigma_train = 0` this reduces
/// to standard EM.
pub fn train_em<T: Scalar>(
    patches: &DMatrix<T>,
    k: usize,
    opts: &EmOptions<T>,
) -> Result<(GmmModel<T>, EmReport<T>)> {
    let np = patches.nrows();
    let n = patches.ncols();
    if k == 0 {
        return Err(Error::invalid("at least one component required"));
    }
    if np == 0 || n == 0 {
        return Err(Error::invalid("patch matrix must be non-empty"));
    }
    if k > n {
        return Err(Error::invalid(format!("{k} components but only {n} patches")));
    }
    if patches.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training patches"));
    }
    if opts.sigma_train < T::zero() {
        return Err(Error::invalid("training noise level must be non-negative"));
    }
    if n < k * np {
        log::warn!("EM training with {n} patches for {k} components of dimension {np}; fits may be poor below {} patches", k * np);
    }

    let mean_var = patches.iter().fold(T::zero(), |a, &v| a + v * v) / count::<T>(np * n);
    let eps_reg = if mean_var > T::zero() {
        opts.eps_reg_scale * mean_var
    } else {
        // Degenerate (all-zero) data still needs a strictly positive ridge.
        opts.eps_reg_scale
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut beta = DMatrix::<T>::zeros(k, n);
    for i in 0..n {
        let mut colsum = T::zero();
        for j in 0..k {
            let v = real::<T>(rng.gen::<f64>() + 1e-3);
            beta[(j, i)] = v;
            colsum += v;
        }
        for j in 0..k {
            beta[(j, i)] /= colsum;
        }
    }

    // First M-step from the random responsibilities; no model exists yet, so
    // no noise correction can be applied here.
    let mut model = m_step(patches, &beta, None, T::zero(), eps_reg, n)?;

    let mut lls: Vec<T> = Vec::new();
    let mut converged = false;
    for _ in 0..opts.max_iters {
        let logj = model.log_joint(patches, opts.sigma_train)?;
        let mut ll = T::zero();
        let mut col = vec![T::zero(); k];
        for i in 0..n {
            for j in 0..k {
                col[j] = logj[(j, i)];
            }
            let lse = logsumexp_column(&col);
            ll += lse;
            for j in 0..k {
                beta[(j, i)] = (col[j] - lse).exp();
            }
        }
        let prev = lls.last().copied();
        lls.push(ll);
        if let Some(p) = prev {
            if (ll - p).abs() <= opts.rel_tol * ll.abs() {
                converged = true;
                break;
            }
        }
        model = m_step(patches, &beta, Some(&model), opts.sigma_train, eps_reg, n)?;
    }

    let iterations = lls.len();
    Ok((model, EmReport { log_likelihoods: lls, iterations, converged, eps_reg }))
}

fn m_step<T: Scalar>(
    patches: &DMatrix<T>,
    beta: &DMatrix<T>,
    current: Option<&GmmModel<T>>,
    sigma: T,
    eps_reg: T,
    n: usize,
) -> Result<GmmModel<T>> {
    let np = patches.nrows();
    let k = beta.nrows();
    let s2 = sigma * sigma;
    let weight_floor = real::<T>(1e-12);
    let parts: Vec<(T, DMatrix<T>)> = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut nj = T::zero();
            for i in 0..n {
                nj += beta[(j, i)];
            }
            let nj_safe = nj.max(weight_floor);
            // Conditional mean of the clean patch given component j; with
            // sigma = 0 this is the patch itself.
            let (v, cond_cov) = match (current, sigma > T::zero()) {
                (Some(m), true) => {
                    let eig = m.eigen(j);
                    let f = eig.filter_diagonal(sigma);
                    let mut w = eig.vectors().transpose() * patches;
                    for r in 0..np {
                        let fr = f[r];
                        for i in 0..n {
                            w[(r, i)] *= fr;
                        }
                    }
                    let v = eig.vectors() * w;
                    // Conditional covariance σ²·C(C+σ²I)⁻¹, shared by all patches.
                    let mut s = DMatrix::<T>::zeros(np, np);
                    for r in 0..np {
                        let lam = s2 * f[r];
                        for a in 0..np {
                            for b in 0..np {
                                s[(a, b)] += eig.vectors()[(a, r)] * lam * eig.vectors()[(b, r)];
                            }
                        }
                    }
                    (v, Some(s))
                }
                _ => (patches.clone(), None),
            };
            let mut scaled = v.clone();
            for i in 0..n {
                let b = beta[(j, i)];
                for r in 0..np {
                    scaled[(r, i)] *= b;
                }
            }
            let mut cov = (&scaled * v.transpose()) / nj_safe;
            if let Some(s) = cond_cov {
                cov += s;
            }
            for d in 0..np {
                cov[(d, d)] += eps_reg;
            }
            let cov = (&cov + cov.transpose()) * real::<T>(0.5);
            (nj, cov)
        })
        .collect();

    let total: T = parts.iter().fold(T::zero(), |a, (nj, _)| a + *nj);
    let alpha: Vec<T> = parts
        .iter()
        .map(|(nj, _)| (*nj / total).max(weight_floor))
        .collect();
    let covs: Vec<DMatrix<T>> = parts.into_iter().map(|(_, c)| c).collect();
    GmmModel::new(alpha, covs)
}

const MODEL_MAGIC: &[u8; 4] = b"GMM1";

/// Write a model as a flat little-endian binary container plus a text
/// manifest (same path with `.txt` appended) mirroring the dimensions.
pub fn save_model<T: Scalar>(model: &GmmModel<T>, path: &Path) -> Result<()> {
    let k = model.component_count();
    let np = model.patch_dim();
    let mut bytes = Vec::with_capacity(4 + 8 + 8 * k * (1 + np * np));
    bytes.extend_from_slice(MODEL_MAGIC);
    bytes.extend_from_slice(&(k as u32).to_le_bytes());
    bytes.extend_from_slice(&(np as u32).to_le_bytes());
    for &a in model.alpha() {
        bytes.extend_from_slice(&a.to_f64_lossy().to_le_bytes());
    }
    for c in model.covariances() {
        for r in 0..np {
            for q in 0..np {
                bytes.extend_from_slice(&c[(r, q)].to_f64_lossy().to_le_bytes());
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    let manifest = manifest_path(path);
    let text = format!(
        "format: GMM1\ncomponents: {k}\npatch_dim: {np}\nvalue_type: f64\nbyte_order: little\n"
    );
    std::fs::write(manifest, text)?;
    Ok(())
}

fn manifest_path(path: &Path) -> PathBuf {
    PathBuf::from(format!("{}.txt", path.display()))
}

/// Read a model written by [`save_model`]. Covariances are re-validated
/// (symmetry, positive definiteness) on load.
pub fn load_model<T: Scalar>(path: &Path) -> Result<GmmModel<T>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(Error::format(path, "too short for a model header"));
    }
    if &bytes[0..4] != MODEL_MAGIC {
        return Err(Error::format(path, "bad magic, expected GMM1"));
    }
    let k = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let np = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if k == 0 || np == 0 || k > 1_000_000 || np > 1_000_000 {
        return Err(Error::format(path, format!("implausible dimensions k={k}, patch_dim={np}")));
    }
    let expect = 12 + 8 * k + 8 * k * np * np;
    if bytes.len() != expect {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {expect}", bytes.len()),
        ));
    }
    let mut off = 12;
    let mut read_f64 = || {
        let v = f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        off += 8;
        v
    };
    let alpha: Vec<T> = (0..k).map(|_| real(read_f64())).collect();
    let mut covs = Vec::with_capacity(k);
    for _ in 0..k {
        let mut c = DMatrix::<T>::zeros(np, np);
        for r in 0..np {
            for q in 0..np {
                c[(r, q)] = real(read_f64());
            }
        }
        covs.push(c);
    }
    GmmModel::new(alpha, covs)
        .map_err(|e| Error::format(path, format!("stored model invalid: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model_1d(alpha: &[f64], vars: &[f64]) -> GmmModel<f64> {
        let covs = vars.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect();
        GmmModel::new(alpha.to_vec(), covs).unwrap()
    }

    #[test]
    fn standard_normal_log_density_at_origin() {
        let m = model_1d(&[1.0], &[1.0]);
        let y = DMatrix::from_element(1, 1, 0.0);
        let lj = m.log_joint(&y, 0.0).unwrap();
        let expect = -0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lj[(0, 0)] - expect).abs() < 1e-14);
    }

    #[test]
    fn responsibilities_pick_matching_variance() {
        let m = model_1d(&[0.5, 0.5], &[0.1, 10.0]);
        let y = DMatrix::from_element(1, 1, 5.0);
        let r = responsibilities(&m, &y, 0.0).unwrap();
        // Direct two-term Bayes computation.
        let dens = |v: f64| (-0.5 * (5.0f64 * 5.0 / v + (2.0 * std::f64::consts::PI * v).ln())).exp();
        let expect = 0.5 * dens(10.0) / (0.5 * dens(0.1) + 0.5 * dens(10.0));
        assert!((r.beta()[(1, 0)] - expect).abs() < 1e-12);
        assert!(r.beta()[(1, 0)] > 0.999);
    }

    #[test]
    fn responsibility_columns_sum_to_one() {
        let covs = vec![
            DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0])),
            DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 0.1])),
            DMatrix::from_fn(2, 2, |r, c| if r == c { 1.0 } else { 0.3 }),
        ];
        let m = GmmModel::new(vec![0.2, 0.5, 0.3], covs).unwrap();
        let y = DMatrix::from_fn(2, 7, |r, c| ((r + 2 * c) as f64 * 0.37).sin() * 3.0);
        let r = responsibilities(&m, &y, 0.4).unwrap();
        for i in 0..7 {
            let s: f64 = (0..3).map(|j| r.beta()[(j, i)]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_rescaling_leaves_posteriors_unchanged() {
        let a = model_1d(&[0.3, 0.7], &[1.0, 4.0]);
        let b = model_1d(&[0.9, 2.1], &[1.0, 4.0]); // same ratios, 3x scale
        let y = DMatrix::from_fn(1, 5, |_, c| c as f64 - 2.0);
        let ra = responsibilities(&a, &y, 0.2).unwrap();
        let rb = responsibilities(&b, &y, 0.2).unwrap();
        let diff = (ra.beta() - rb.beta()).abs().max();
        assert!(diff < 1e-14, "posteriors differ by {diff} after weight rescaling");
    }

    #[test]
    fn single_component_posterior_is_one() {
        let m = model_1d(&[1.0], &[2.5]);
        let y = DMatrix::from_fn(1, 4, |_, c| c as f64);
        let r = responsibilities(&m, &y, 0.1).unwrap();
        assert!(r.beta().iter().all(|&b| (b - 1.0).abs() < 1e-15));
    }

    fn random_patches(np: usize, n: usize, seed: u64) -> DMatrix<f64> {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(np, n, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn em_log_likelihood_is_monotone() {
        for (sigma, seed) in [(0.0, 1u64), (0.5, 2), (0.0, 3)] {
            let patches = random_patches(4, 300, seed);
            let opts = EmOptions { sigma_train: sigma, max_iters: 40, seed, ..Default::default() };
            let (_, report) = train_em(&patches, 3, &opts).unwrap();
            for w in report.log_likelihoods.windows(2) {
                let slack = 1e-8 * w[1].abs().max(1.0);
                assert!(w[1] >= w[0] - slack, "LL decreased: {} -> {} (sigma={sigma})", w[0], w[1]);
            }
        }
    }

    #[test]
    fn single_component_fit_is_sample_covariance() {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 2000;
        let mut patches = DMatrix::<f64>::zeros(2, n);
        for i in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            patches[(0, i)] = a * 2.0f64.sqrt();
            patches[(1, i)] = b;
        }
        let opts = EmOptions::default();
        let (model, report) = train_em(&patches, 1, &opts).unwrap();
        let sample = (&patches * patches.transpose()) / n as f64;
        let diff = (&model.covariances()[0] - &sample).abs().max();
        assert!(diff <= report.eps_reg + 1e-12, "diff {diff}");
    }

    #[test]
    fn degenerate_zero_patches_hit_regularization_floor() {
        let patches = DMatrix::<f64>::zeros(4, 200);
        let opts = EmOptions { max_iters: 5, ..Default::default() };
        let (model, report) = train_em(&patches, 3, &opts).unwrap();
        assert!(report.eps_reg > 0.0);
        for c in model.covariances() {
            for r in 0..4 {
                for q in 0..4 {
                    let expect = if r == q { report.eps_reg } else { 0.0 };
                    assert!((c[(r, q)] - expect).abs() < 1e-15);
                }
            }
        }
        for &a in model.alpha() {
            assert!((a - 1.0 / 3.0).abs() < 0.05, "alpha {a} far from uniform");
        }
    }

    #[test]
    fn em_is_deterministic_given_seed() {
        let patches = random_patches(3, 150, 11);
        let opts = EmOptions { max_iters: 15, seed: 42, ..Default::default() };
        let (a, _) = train_em(&patches, 2, &opts).unwrap();
        let (b, _) = train_em(&patches, 2, &opts).unwrap();
        assert_eq!(a.alpha(), b.alpha());
        for (ca, cb) in a.covariances().iter().zip(b.covariances()) {
            assert_eq!(ca, cb);
        }
    }

    #[test]
    fn save_load_roundtrip_exact() {
        let patches = random_patches(4, 200, 5);
        let (model, _) = train_em(&patches, 2, &EmOptions { max_iters: 8, ..Default::default() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gmm");
        save_model(&model, &path).unwrap();
        let loaded: GmmModel<f64> = load_model(&path).unwrap();
        assert_eq!(model.alpha(), loaded.alpha());
        for (a, b) in model.covariances().iter().zip(loaded.covariances()) {
            assert_eq!(a, b);
        }
        let manifest = std::fs::read_to_string(dir.path().join("model.gmm.txt")).unwrap();
        assert!(manifest.contains("components: 2"));
        assert!(manifest.contains("patch_dim: 4"));
    }

    #[test]
    fn load_rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("bad.gmm");
        std::fs::write(&bad_magic, b"NOPE\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(matches!(load_model::<f64>(&bad_magic), Err(Error::Format { .. })));

        let truncated = dir.path().join("trunc.gmm");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"GMM1");
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f64.to_le_bytes());
        std::fs::write(&truncated, bytes).unwrap();
        assert!(matches!(load_model::<f64>(&truncated), Err(Error::Format { .. })));
    }

    #[test]
    fn model_rejects_indefinite_covariance() {
        let c = DMatrix::from_fn(2, 2, |r, q| if r == q { 0.0 } else { 1.0 });
        assert!(GmmModel::new(vec![1.0], vec![c]).is_err());
    }
}
