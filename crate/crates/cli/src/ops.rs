//! The work behind each subcommand. Every function takes the merged
//! configuration (file first, flags layered on top) plus the paths from the
//! command line, and reports errors through `anyhow` so `main` can map them
//! to exit codes.

use anyhow::Context;
use gmmfuse::cube::{read_cube, write_cube};
use gmmfuse::degradation::{synthetic_response, BlurKernel, DegradationModel, SubsampleMask};
use gmmfuse::denoiser::{
    apply_fixed, denoise_mmse, freeze_weights, max_difference_quotient, prox_defect,
    scalar_fixed_curve, scalar_mmse_curve, verify_spectrum,
};
use gmmfuse::gmm::{load_model, save_model, train_em, EmOptions};
use gmmfuse::image::extract_patches;
use gmmfuse::sharpen::{learn_subspace, solve, trace_to_csv};
use gmmfuse::{
    degrade, evaluate, generate_scene, BandImage, Error, HSCube, KeyValues, MetricReport,
    PatchGeometry, Real, SceneSpec, SimulationConfig, SolverParams,
};
use nalgebra::DMatrix;
use std::path::Path;
use std::sync::Arc;

/// Patch geometry implied by a trained model: patches are square, so the
/// model's patch dimension must be a perfect square.
fn geometry_for(patch_dim: usize, width: usize, height: usize) -> anyhow::Result<PatchGeometry> {
    let side = (patch_dim as f64).sqrt().round() as usize;
    if side * side != patch_dim {
        anyhow::bail!("model patch dimension {patch_dim} does not describe square patches");
    }
    Ok(PatchGeometry::new(side, width, height)?)
}

fn band_cube(img: &BandImage<Real>) -> anyhow::Result<HSCube<Real>> {
    Ok(HSCube::new(
        img.width(),
        img.height(),
        DMatrix::from_row_slice(1, img.len(), img.values()),
    )?)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn simulate(kv: &KeyValues, out: &Path) -> anyhow::Result<()> {
    let cfg = SimulationConfig::<Real>::from_keys(kv)?;
    let truth = generate_scene(&cfg.scene, cfg.seed)?;
    let model = cfg.build_degradation()?;
    // The noise stream is seeded one past the scene seed so the two stay
    // decoupled while the whole run remains a function of one seed.
    let obs = degrade(&truth, &model, &cfg.snr_hs, &cfg.snr_ms, cfg.seed.wrapping_add(1))?;

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    write_cube(&truth, &out.join("truth.bin"))?;
    write_cube(&obs.yh, &out.join("observed_lowres.bin"))?;
    write_cube(&obs.ym, &out.join("observed_fullgrid.bin"))?;

    println!(
        "truth: {}x{}, {} bands (rank {})",
        truth.width(),
        truth.height(),
        truth.bands(),
        cfg.scene.endmembers
    );
    println!(
        "observed_lowres: {}x{}, {} bands; observed_fullgrid: {}x{}, {} bands",
        obs.yh.width(),
        obs.yh.height(),
        obs.yh.bands(),
        obs.ym.width(),
        obs.ym.height(),
        obs.ym.bands()
    );
    println!("wrote 3 cubes to {}", out.display());
    Ok(())
}

pub fn train_gmm(
    kv: &KeyValues,
    input: &Path,
    out: &Path,
    band: Option<usize>,
) -> anyhow::Result<()> {
    let cube = read_cube::<Real>(input)?;
    let training = match band {
        Some(l) if l < cube.bands() => cube.band(l),
        Some(l) => anyhow::bail!("band {l} out of range: input has {} bands", cube.bands()),
        None => cube.band_mean(),
    };
    let side = kv.usize_or("patch_side", 8)?;
    let k = kv.usize_or("components", 20)?;
    let geometry = PatchGeometry::new(side, cube.width(), cube.height())?;
    let patches = extract_patches(&training, &geometry, true)?;
    let opts = EmOptions {
        max_iters: kv.usize_or("em_iters", 200)?,
        seed: kv.u64_or("seed", 0)?,
        sigma_train: kv.f64_or("sigma_train", 0.0)?,
        ..EmOptions::default()
    };
    let (model, report) = train_em(patches.data(), k, &opts)?;
    save_model(&model, out)?;
    println!(
        "fitted {} components to {} patches of dimension {} in {} iterations (converged: {})",
        k,
        patches.patch_count(),
        geometry.patch_dim(),
        report.iterations,
        report.converged
    );
    if let Some(ll) = report.log_likelihoods.last() {
        println!("final log-likelihood: {ll:.6e}");
    }
    println!("wrote model to {}", out.display());
    Ok(())
}

/// Spatial factor between the two observations, which must nest exactly.
fn infer_factor(ym: &HSCube<Real>, yh: &HSCube<Real>) -> anyhow::Result<usize> {
    let (w, h) = (ym.width(), ym.height());
    let (lw, lh) = (yh.width(), yh.height());
    if w % lw != 0 || h % lh != 0 || w / lw != h / lh {
        anyhow::bail!(
            "full grid {w}x{h} is not an integer multiple of the low-resolution grid {lw}x{lh}"
        );
    }
    Ok(w / lw)
}

pub fn sharpen(
    kv: &KeyValues,
    hs: &Path,
    ms: &Path,
    model_path: &Path,
    out: &Path,
    trace_path: &Path,
) -> anyhow::Result<()> {
    let yh = read_cube::<Real>(hs)?;
    let ym = read_cube::<Real>(ms)?;
    let model = Arc::new(load_model::<Real>(model_path)?);

    let factor = infer_factor(&ym, &yh)?;
    let degradation = DegradationModel::new(
        BlurKernel::for_downsampling(factor)?,
        SubsampleMask::new(ym.width(), ym.height(), factor)?,
        synthetic_response(ym.bands(), yh.bands())?,
    )?;
    let basis = learn_subspace(&yh, kv.usize_or("subspace", 4)?)?;
    let geometry = geometry_for(model.patch_dim(), ym.width(), ym.height())?;
    let pan = ym.band_mean();
    let plan = freeze_weights(model, &pan, kv.f64_or("sigma_train", 0.0)?, &geometry)?
        .with_mean_handling(kv.bool_or("mean_handling", true)?);

    let d = SolverParams::<Real>::default();
    let params = SolverParams {
        rho: kv.f64_or("rho", d.rho)?,
        lambda: kv.f64_or("lambda", d.lambda)?,
        tau: kv.f64_or("tau", d.tau)?,
        max_iters: kv.usize_or("iters", d.max_iters)?,
        tol: kv.f64_or("tol", d.tol)?,
    };
    let result = solve(&yh, &ym, &basis, &degradation, &plan, params)?;

    write_cube(&result.cube, out)?;
    write_text(trace_path, &trace_to_csv(&result.trace))?;

    println!(
        "factor {factor}, subspace dimension {}, denoiser noise level {:.6}",
        basis.subspace_dim(),
        (params.tau / params.rho).sqrt()
    );
    match result.trace.last() {
        Some(rec) => println!(
            "{} iterations (converged: {}), primal residual {:.3e}, dual residual {:.3e}",
            rec.iteration, result.converged, rec.primal_residual, rec.dual_residual
        ),
        None => println!("0 iterations: output is the upsampled initialization"),
    }
    println!("wrote {} and {}", out.display(), trace_path.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn denoise(
    kv: &KeyValues,
    input: &Path,
    model_path: &Path,
    out: &Path,
    sigma: f64,
    fixed: bool,
    band: Option<usize>,
    train: Option<&Path>,
) -> anyhow::Result<()> {
    let cube = read_cube::<Real>(input)?;
    let l = match band {
        Some(l) if l < cube.bands() => l,
        Some(l) => anyhow::bail!("band {l} out of range: input has {} bands", cube.bands()),
        None if cube.bands() == 1 => 0,
        None => anyhow::bail!("input has {} bands; pick one with --band", cube.bands()),
    };
    let noisy = cube.band(l);
    let model = Arc::new(load_model::<Real>(model_path)?);
    let geometry = geometry_for(model.patch_dim(), cube.width(), cube.height())?;

    let denoised = if fixed {
        let training = match train {
            Some(p) => read_cube::<Real>(p)?.band_mean(),
            None => noisy.clone(),
        };
        let plan = freeze_weights(model, &training, kv.f64_or("sigma_train", sigma)?, &geometry)?
            .with_mean_handling(kv.bool_or("mean_handling", true)?);
        apply_fixed(&plan, &noisy, sigma)?
    } else {
        denoise_mmse(&model, &noisy, sigma, &geometry)?
    };

    write_cube(&band_cube(&denoised)?, out)?;
    println!(
        "denoised band {l} ({}x{}) at noise level {sigma} in {} mode",
        cube.width(),
        cube.height(),
        if fixed { "fixed-weight" } else { "posterior-mean" }
    );
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(kv: &KeyValues, estimate: &Path, reference: &Path, out: &Path) -> anyhow::Result<()> {
    let est = read_cube::<Real>(estimate)?;
    let reference = read_cube::<Real>(reference)?;
    let ratio = kv.f64_or("ratio", 1.0)?;
    if !(ratio > 0.0) {
        anyhow::bail!("resolution ratio must be positive, got {ratio}");
    }
    let report = evaluate(&est, &reference, ratio)?;
    let csv = format!("{}\n{}\n", MetricReport::<Real>::csv_header(), report.to_csv_row());
    write_text(out, &csv)?;
    print!("{report}");
    println!("wrote {}", out.display());
    Ok(())
}

fn curve_table(grid: &[Real], values: &[Real]) -> String {
    let mut text = String::from("input,output\n");
    for (x, y) in grid.iter().zip(values) {
        text.push_str(&format!("{x},{y}\n"));
    }
    text
}

pub fn diagnose(kv: &KeyValues, out: &Path) -> anyhow::Result<()> {
    let size = kv.usize_or("size", 16)?;
    let side = kv.usize_or("patch_side", 2)?;
    let k = kv.usize_or("components", 2)?;
    let sigma = kv.f64_or("sigma", 0.5)?;
    let sigma_train = kv.f64_or("sigma_train", 0.5)?;
    let seed = kv.u64_or("seed", 0)?;
    let mean_handling = kv.bool_or("mean_handling", false)?;

    // A small synthetic scene stands in for a training image; its band mean
    // plays the role the panchromatic band plays in sharpening.
    let scene = SceneSpec { width: size, height: size, bands: 4, endmembers: 3 };
    let training = generate_scene::<Real>(&scene, seed)?.band_mean();
    let geometry = PatchGeometry::new(side, size, size)?;
    let patches = extract_patches(&training, &geometry, true)?;
    let opts = EmOptions { max_iters: 60, seed, sigma_train, ..EmOptions::default() };
    let (model, _) = train_em(patches.data(), k, &opts)?;
    let plan = freeze_weights(Arc::new(model), &training, sigma_train, &geometry)?
        .with_mean_handling(mean_handling);

    let spectrum = verify_spectrum(&plan, sigma)?;
    let defect = prox_defect(&plan, sigma, &training)?;
    if !(defect <= 1e-8) {
        return Err(Error::DiagnosticFailure(format!(
            "denoiser output drifts from the proximity route by {defect:.3e} (tolerance 1e-8)"
        ))
        .into());
    }

    // Scalar witness: with posterior weights the one-pixel map can expand;
    // with frozen weights it is a strict contraction toward zero.
    let grid: Vec<Real> = (-600..=600).map(|i| Real::from(i) / 100.0).collect();
    let mmse = scalar_mmse_curve([0.5, 0.5], [0.1, 10.0], 1.0, &grid);
    let frozen = scalar_fixed_curve([0.5, 0.5], [0.1, 10.0], 1.0, &grid);
    let mmse_slope = max_difference_quotient(&grid, &mmse);
    let frozen_slope = max_difference_quotient(&grid, &frozen);
    if !(mmse_slope > 1.0) {
        return Err(Error::DiagnosticFailure(format!(
            "posterior-weight scalar map should expand somewhere, max slope {mmse_slope:.4}"
        ))
        .into());
    }
    if !(frozen_slope > 0.0 && frozen_slope < 1.0) {
        return Err(Error::DiagnosticFailure(format!(
            "frozen-weight scalar map slope {frozen_slope:.4} escapes (0, 1)"
        ))
        .into());
    }

    std::fs::create_dir_all(out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    write_text(&out.join("scalar_mmse.csv"), &curve_table(&grid, &mmse))?;
    write_text(&out.join("scalar_fixed.csv"), &curve_table(&grid, &frozen))?;

    let mut report = format!("{spectrum}");
    report.push_str(&format!(
        "spectral norm strictly below one: {} ({:.12})\n",
        spectrum.spectral_norm < 1.0,
        spectrum.spectral_norm
    ));
    report.push_str(&format!("prox identity defect: {defect:.3e} (tolerance 1e-8)\n"));
    report.push_str(&format!(
        "posterior-weight scalar map max slope: {mmse_slope:.4} (expands above 1)\n"
    ));
    report.push_str(&format!(
        "frozen-weight scalar map slope: {frozen_slope:.4} (contracts inside (0, 1))\n"
    ));
    write_text(&out.join("report.txt"), &report)?;
    print!("{report}");
    println!("wrote report and scalar map tables to {}", out.display());
    Ok(())
}
