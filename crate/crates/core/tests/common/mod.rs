//! Dense reference implementations shared by the integration suites.
//!
//! Everything here is built the slow, literal way: explicit convolution and
//! selection matrices, explicit patch projectors, Kronecker-assembled normal
//! equations. The library under test must agree with these within tight
//! tolerances.

// Each test target compiles its own copy and uses a subset of the helpers.
#![allow(dead_code)]

use gmmfuse::denoiser::{freeze_weights, materialize_operator};
use gmmfuse::gmm::train_em;
use gmmfuse::image::extract_patches;
use gmmfuse::{
    BandImage, BlurKernel, DegradationModel, EmOptions, FixedWeightPlan, GmmModel, HSCube,
    PatchGeometry, SolverParams, SubsampleMask, SubspaceBasis,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Circular convolution as an explicit matrix: `(x ⊛ k)[q] = (x · B)[q]`.
pub fn blur_matrix(kernel: &BlurKernel<f64>, width: usize, height: usize) -> DMatrix<f64> {
    let kimg = kernel.periodize(width, height).unwrap();
    let n = width * height;
    DMatrix::from_fn(n, n, |p, q| {
        let (pr, pc) = ((p / width) as isize, (p % width) as isize);
        let (qr, qc) = ((q / width) as isize, (q % width) as isize);
        let dr = (qr - pr).rem_euclid(height as isize) as usize;
        let dc = (qc - pc).rem_euclid(width as isize) as usize;
        kimg[dr * width + dc]
    })
}

/// Column-selection matrix `S` with `X·S = downsample_cols(X)`.
pub fn mask_matrix(mask: &SubsampleMask) -> DMatrix<f64> {
    let n = mask.width() * mask.height();
    let mut s = DMatrix::<f64>::zeros(n, mask.count());
    for (low, &p) in mask.keep_indices().iter().enumerate() {
        s[(p, low)] = 1.0;
    }
    s
}

/// Patch projector `P_i` with `P_i·x` the i-th patch of the vectorized image.
pub fn patch_matrix(geometry: &PatchGeometry, i: usize) -> DMatrix<f64> {
    let mut p = DMatrix::<f64>::zeros(geometry.patch_dim(), geometry.width() * geometry.height());
    for s in 0..geometry.patch_dim() {
        p[(s, geometry.pixel_index(i, s))] = 1.0;
    }
    p
}

/// Component filter built from the covariance itself: `C (C + σ²I)⁻¹`.
pub fn dense_filter(model: &GmmModel<f64>, j: usize, sigma: f64) -> DMatrix<f64> {
    let c = &model.covariances()[j];
    let np = c.nrows();
    let shifted = c + DMatrix::<f64>::identity(np, np) * (sigma * sigma);
    let inv = shifted.try_inverse().expect("covariance plus noise is invertible");
    c * inv
}

/// The frozen-weight denoising operator assembled patch by patch from
/// explicit projectors: `W = (1/n_p) Σ_i P_iᵀ G_i P_i`.
pub fn dense_denoiser_matrix(plan: &FixedWeightPlan<f64>, sigma: f64) -> DMatrix<f64> {
    let g = plan.geometry();
    let model = plan.model();
    let np = g.patch_dim();
    let n = g.width() * g.height();
    let filters: Vec<DMatrix<f64>> =
        (0..model.component_count()).map(|j| dense_filter(model, j, sigma)).collect();
    let ones = DMatrix::<f64>::from_element(np, np, 1.0 / np as f64);
    let eye = DMatrix::<f64>::identity(np, np);
    let beta = plan.beta().beta();
    let mut w = DMatrix::<f64>::zeros(n, n);
    for i in 0..g.patch_count() {
        let p = patch_matrix(g, i);
        let mut gi = DMatrix::<f64>::zeros(np, np);
        for (j, f) in filters.iter().enumerate() {
            gi += f * beta[(j, i)];
        }
        if plan.mean_handling() {
            gi = &gi * (&eye - &ones) + &ones;
        }
        w += p.transpose() * gi * p;
    }
    w / np as f64
}

/// Posterior-mean denoiser evaluated patch by patch with explicit projectors
/// and covariance-solve filters; weights recomputed from the input patches.
pub fn dense_mmse_reference(
    model: &GmmModel<f64>,
    img: &BandImage<f64>,
    sigma: f64,
    geometry: &PatchGeometry,
) -> BandImage<f64> {
    let np = geometry.patch_dim();
    let n = geometry.width() * geometry.height();
    let x = DVector::from_column_slice(img.values());
    let k = model.component_count();
    let filters: Vec<DMatrix<f64>> = (0..k).map(|j| dense_filter(model, j, sigma)).collect();

    // Centered patches feed the library's posterior-weight computation.
    let mut centered = DMatrix::<f64>::zeros(np, geometry.patch_count());
    let mut means = Vec::with_capacity(geometry.patch_count());
    for i in 0..geometry.patch_count() {
        let p = patch_matrix(geometry, i) * &x;
        let m = p.sum() / np as f64;
        means.push(m);
        centered.column_mut(i).copy_from(&p.add_scalar(-m));
    }
    let beta = gmmfuse::gmm::responsibilities(model, &centered, sigma).unwrap();

    let mut out = DVector::<f64>::zeros(n);
    for i in 0..geometry.patch_count() {
        let mut filtered = DVector::<f64>::zeros(np);
        for (j, f) in filters.iter().enumerate() {
            filtered += f * centered.column(i) * beta.beta()[(j, i)];
        }
        let filtered = filtered.add_scalar(means[i]);
        out += patch_matrix(geometry, i).transpose() * filtered;
    }
    out /= np as f64;
    BandImage::new(geometry.width(), geometry.height(), out.as_slice().to_vec()).unwrap()
}

/// Train a mixture on one image's centered patches and freeze its weights.
pub fn trained_plan(
    img: &BandImage<f64>,
    patch_side: usize,
    components: usize,
    sigma_train: f64,
    seed: u64,
    mean_handling: bool,
) -> FixedWeightPlan<f64> {
    let geometry = PatchGeometry::new(patch_side, img.width(), img.height()).unwrap();
    let patches = extract_patches(img, &geometry, true).unwrap();
    let opts = EmOptions { max_iters: 30, seed, ..EmOptions::default() };
    let (model, _) = train_em(patches.data(), components, &opts).unwrap();
    freeze_weights(Arc::new(model), img, sigma_train, &geometry)
        .unwrap()
        .with_mean_handling(mean_handling)
}

/// Piecewise-smooth random test image: cosine waves plus mild noise.
pub fn textured_image(width: usize, height: usize, seed: u64) -> BandImage<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(1.0..5.0),
                rng.gen_range(1.0..5.0),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut img = BandImage::from_fn(width, height, |r, c| {
        waves
            .iter()
            .map(|&(fr, fc, a, ph)| {
                a * (std::f64::consts::TAU * (fr * r as f64 / height as f64 + fc * c as f64 / width as f64)
                    + ph)
                    .cos()
            })
            .sum()
    });
    let vals = img.values().to_vec();
    img = BandImage::new(
        width,
        height,
        vals.into_iter().map(|v| v + rng.gen_range(-0.05..0.05)).collect(),
    )
    .unwrap();
    img
}

/// Exact minimizer and objective of the full quadratic the splitting solver
/// targets, assembled with Kronecker products and solved densely.
pub struct GlobalQuadratic {
    pub latent: DMatrix<f64>,
    pub objective: f64,
}

pub fn dense_global_solve(
    yh: &HSCube<f64>,
    ym: &HSCube<f64>,
    basis: &SubspaceBasis<f64>,
    model: &DegradationModel<f64>,
    plan: &FixedWeightPlan<f64>,
    params: &SolverParams<f64>,
) -> GlobalQuadratic {
    let mask = model.mask();
    let (w, h) = (mask.width(), mask.height());
    let n = w * h;
    let ls = basis.subspace_dim();
    let sigma = (params.tau / params.rho).sqrt();

    let b = blur_matrix(model.blur(), w, h);
    let s = mask_matrix(mask);
    let e = basis.basis().clone();
    let re = model.response() * &e;

    // vec(E X (B S)) = ((B S)ᵀ ⊗ E) vec(X), columns of X stacked.
    let bs = &b * &s;
    let a1 = bs.transpose().kronecker(&e);
    let b1 = DVector::from_column_slice(yh.data().as_slice());

    let mut hmat = a1.transpose() * &a1;
    // (Iₙ ⊗ RE)ᵀ(Iₙ ⊗ RE) = Iₙ ⊗ (RE)ᵀ(RE).
    let gtg = re.transpose() * &re;
    hmat += DMatrix::<f64>::identity(n, n).kronecker(&gtg) * params.lambda;
    let mut rhs = a1.transpose() * &b1;
    let gt_ym = re.transpose() * ym.data() * params.lambda;
    rhs += DVector::from_column_slice(gt_ym.as_slice());

    let mut reg_q = None;
    if params.tau > 0.0 {
        let wmat = materialize_operator(plan, sigma, None).unwrap();
        let wsym = (&wmat + wmat.transpose()) * 0.5;
        assert!(
            (&wmat - wmat.transpose()).abs().max() <= 1e-10 * wmat.abs().max(),
            "denoising operator must be symmetric for the quadratic oracle"
        );
        let winv = Cholesky::new(wsym).unwrap().inverse();
        let q = winv - DMatrix::<f64>::identity(n, n);
        hmat += q.kronecker(&DMatrix::<f64>::identity(ls, ls)) * params.rho;
        reg_q = Some(q);
    }

    let chol = Cholesky::new(hmat).expect("global quadratic is positive definite");
    let xvec = chol.solve(&rhs);
    let latent = DMatrix::from_column_slice(ls, n, xvec.as_slice());

    // Objective evaluated from the same dense pieces.
    let r1 = &e * &latent * &bs - yh.data();
    let r2 = &re * &latent - ym.data();
    let mut obj = 0.5 * r1.norm_squared() + 0.5 * params.lambda * r2.norm_squared();
    if let Some(q) = &reg_q {
        let mut acc = 0.0;
        for l in 0..ls {
            let xr = latent.row(l).transpose();
            acc += xr.dot(&(q * &xr));
        }
        obj += 0.5 * params.rho * acc;
    }
    GlobalQuadratic { latent, objective: obj }
}

/// A complete small sharpening instance shared by the dense checks.
pub struct SmallInstance {
    pub yh: HSCube<f64>,
    pub ym: HSCube<f64>,
    pub basis: SubspaceBasis<f64>,
    pub model: DegradationModel<f64>,
    pub plan: FixedWeightPlan<f64>,
}

/// Build a seeded 16×16 instance with 6 bands, 2 latent dimensions and
/// factor-2 downsampling, exercising blur, mask, response and prior at once.
pub fn small_instance(seed: u64) -> SmallInstance {
    use gmmfuse::sim::{degrade, generate_scene, SceneSpec, SnrTarget};
    use gmmfuse::sharpen::learn_subspace;

    let spec = SceneSpec { width: 16, height: 16, bands: 6, endmembers: 2 };
    let z = generate_scene::<f64>(&spec, seed).unwrap();
    let blur = BlurKernel::for_downsampling(2).unwrap();
    let mask = SubsampleMask::new(16, 16, 2).unwrap();
    let response = gmmfuse::degradation::synthetic_response(3, 6).unwrap();
    let model = DegradationModel::new(blur, mask, response).unwrap();
    let snr = SnrTarget::UniformDb(45.0);
    let d = degrade(&z, &model, &snr, &snr, seed + 100).unwrap();
    let basis = learn_subspace(&d.yh, 2).unwrap();

    // Train the prior on the mean of the full-grid observation bands.
    let pan = d.ym.band_mean();
    let plan = trained_plan(&pan, 2, 2, 0.5, seed + 200, false);
    SmallInstance { yh: d.yh, ym: d.ym, basis, model, plan }
}

/// Dense gradient of the latent-update subproblem at `x`.
pub fn latent_gradient(
    x: &DMatrix<f64>,
    b: &DMatrix<f64>,
    v1: &DMatrix<f64>,
    d1: &DMatrix<f64>,
    v2: &DMatrix<f64>,
    d2: &DMatrix<f64>,
    v3: &DMatrix<f64>,
    d3: &DMatrix<f64>,
) -> DMatrix<f64> {
    (x * b - v1 - d1) * b.transpose() + (x - v2 - d2) + (x - v3 - d3)
}

/// Worst normal-equation residuals (∞-norm) of the latent, low-resolution
/// and full-grid block updates after a few real iterations, measured against
/// dense operator matrices.
pub fn block_residuals(inst: &SmallInstance, params: SolverParams<f64>, steps: usize) -> [f64; 3] {
    let problem = gmmfuse::SharpeningProblem::new(
        &inst.yh, &inst.ym, &inst.basis, &inst.model, &inst.plan, params,
    )
    .unwrap();
    let mut state = problem.initial_state().unwrap();
    for _ in 0..steps {
        problem.step(&mut state).unwrap();
    }

    let mask = inst.model.mask();
    let b = blur_matrix(inst.model.blur(), mask.width(), mask.height());
    let s = mask_matrix(mask);
    let e = inst.basis.basis().clone();
    let re = inst.model.response() * &e;

    let x = problem.update_latent(&state);
    let g = latent_gradient(
        &x,
        &b,
        &state.hs_split,
        &state.hs_dual,
        &state.ms_split,
        &state.ms_dual,
        &state.prior_split,
        &state.prior_dual,
    );

    let xb = &x * &b;
    let v1 = problem.update_hs_block(&xb, &state.hs_dual);
    let g1 = e.transpose() * (&e * &v1 * &s - inst.yh.data()) * s.transpose()
        + (&v1 - (&xb - &state.hs_dual)) * params.rho;

    let v2 = problem.update_ms_block(&x, &state.ms_dual);
    let g2 = re.transpose() * (&re * &v2 - inst.ym.data()) * params.lambda
        + (&v2 - (&x - &state.ms_dual)) * params.rho;

    [g.abs().max(), g1.abs().max(), g2.abs().max()]
}
