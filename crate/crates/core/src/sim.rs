//! Synthetic scenes and their degraded observations.
//!
//! Scenes are abundance mixtures: a few random endmember spectra combined
//! through piecewise-smooth simplex abundance maps, so the ground truth has
//! exact low rank. All randomness is drawn in `f64` from a seeded stream, so
//! cubes are identical across scalar types and runs.

use crate::config::KeyValues;
use crate::cube::HSCube;
use crate::degradation::{synthetic_response, BlurKernel, DegradationModel, SubsampleMask};
use crate::error::{Error, Result};
use crate::fft::{convolve_rows, Fft2};
use crate::scalar::{real, Scalar};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftNum;

/// Dimensions and spectral complexity of a synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Spectral band count of the ground truth.
    pub bands: usize,
    /// Number of endmembers; the exact rank of the generated cube.
    pub endmembers: usize,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("scene dimensions must be positive"));
        }
        if self.bands == 0 {
            return Err(Error::invalid("scene must have at least one band"));
        }
        if self.endmembers == 0 {
            return Err(Error::invalid("scene must have at least one endmember"));
        }
        Ok(())
    }
}

/// Generate a ground-truth cube: smooth random cosine fields plus a Voronoi
/// region boost per endmember, pushed through `exp` and normalized to the
/// simplex per pixel, then mixed with positive random spectra.
pub fn generate_scene<T: Scalar>(spec: &SceneSpec, seed: u64) -> Result<HSCube<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let abundances = abundance_maps(spec, &mut rng);
    let spectra = endmember_spectra(spec, &mut rng);
    let z = spectra * abundances;
    let data = DMatrix::from_fn(spec.bands, spec.width * spec.height, |l, p| real::<T>(z[(l, p)]));
    HSCube::new(spec.width, spec.height, data)
}

/// Per-pixel simplex abundances, one row per endmember.
pub(crate) fn abundance_maps(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (w, h, ne) = (spec.width, spec.height, spec.endmembers);
    let n = w * h;

    // Smooth log-abundance fields.
    let mut fields = vec![vec![0.0f64; n]; ne];
    for field in fields.iter_mut() {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fr = rng.gen_range(1..4) as f64;
                let fc = rng.gen_range(1..4) as f64;
                let amp = rng.gen_range(0.3..1.0);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                (fr, fc, amp, phase)
            })
            .collect();
        for r in 0..h {
            for c in 0..w {
                let mut v = 0.0;
                for &(fr, fc, amp, phase) in &waves {
                    let arg = std::f64::consts::TAU
                        * (fr * r as f64 / h as f64 + fc * c as f64 / w as f64)
                        + phase;
                    v += amp * arg.cos();
                }
                field[r * w + c] = v;
            }
        }
    }

    // Voronoi regions make one endmember dominate per cell.
    let centers: Vec<(f64, f64)> = (0..ne)
        .map(|_| (rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64)))
        .collect();
    for r in 0..h {
        for c in 0..w {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (e, &(cr, cc)) in centers.iter().enumerate() {
                let d = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                if d < best_d {
                    best_d = d;
                    best = e;
                }
            }
            fields[best][r * w + c] += 2.5;
        }
    }

    // Softmax across endmembers: positive abundances on the simplex.
    let mut abundances = DMatrix::<f64>::zeros(ne, n);
    for p in 0..n {
        let mx = fields.iter().map(|f| f[p]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in 0..ne {
            let v = (fields[e][p] - mx).exp();
            abundances[(e, p)] = v;
            total += v;
        }
        for e in 0..ne {
            abundances[(e, p)] /= total;
        }
    }
    abundances
}

/// Positive spectra: a floor plus a few Gaussian bumps over band index.
pub(crate) fn endmember_spectra(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let ne = spec.endmembers;
    let mut spectra = DMatrix::<f64>::zeros(spec.bands, ne);
    for e in 0..ne {
        let bumps: Vec<(f64, f64, f64)> = (0..3)
            .map(|_| {
                let center = rng.gen_range(0.0..spec.bands as f64);
                let width = rng.gen_range(0.05..0.25) * spec.bands as f64;
                let amp = rng.gen_range(0.3..1.2);
                (center, width, amp)
            })
            .collect();
        for l in 0..spec.bands {
            let mut v = 0.2;
            for &(center, width, amp) in &bumps {
                v += amp * (-((l as f64 - center).powi(2)) / (2.0 * width * width)).exp();
            }
            spectra[(l, e)] = v;
        }
    }
    spectra
}

/// Noise level specification for one observation cube.
#[derive(Debug, Clone, PartialEq)]
pub enum SnrTarget<T> {
    /// No noise.
    Infinite,
    /// One SNR in dB for the whole cube.
    UniformDb(T),
    /// `(band_count, dB)` groups, in band order, covering every band.
    GroupsDb(Vec<(usize, T)>),
}

impl<T: Scalar> SnrTarget<T> {
    /// Expand to per-band dB targets (`None` meaning noiseless).
    fn band_targets(&self, bands: usize) -> Result<Vec<Option<T>>> {
        match self {
            SnrTarget::Infinite => Ok(vec![None; bands]),
            SnrTarget::UniformDb(db) => {
                if !db.is_finite() {
                    return Err(Error::invalid("SNR target must be finite"));
                }
                Ok(vec![Some(*db); bands])
            }
            SnrTarget::GroupsDb(groups) => {
                let total: usize = groups.iter().map(|&(c, _)| c).sum();
                if total != bands {
                    return Err(Error::invalid(format!(
                        "SNR groups cover {total} bands, cube has {bands}"
                    )));
                }
                let mut out = Vec::with_capacity(bands);
                for &(count, db) in groups {
                    if !db.is_finite() {
                        return Err(Error::invalid("SNR target must be finite"));
                    }
                    out.extend(std::iter::repeat(Some(db)).take(count));
                }
                Ok(out)
            }
        }
    }

    /// Parse `inf`, a single dB number, or comma-separated `db*count` groups.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.eq_ignore_ascii_case("inf") || text.eq_ignore_ascii_case("infinite") {
            return Ok(SnrTarget::Infinite);
        }
        if !text.contains('*') {
            let db: f64 = text
                .parse()
                .map_err(|_| Error::invalid(format!("bad SNR value {text:?}")))?;
            return Ok(SnrTarget::UniformDb(real(db)));
        }
        let mut groups = Vec::new();
        for part in text.split(',') {
            let (db, count) = part
                .split_once('*')
                .ok_or_else(|| Error::invalid(format!("bad SNR group {part:?}")))?;
            let db: f64 = db
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad SNR group dB {db:?}")))?;
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad SNR group count {count:?}")))?;
            groups.push((count, real(db)));
        }
        Ok(SnrTarget::GroupsDb(groups))
    }
}

/// Degraded observations plus the noise levels actually used.
#[derive(Debug, Clone)]
pub struct Degraded<T: Scalar> {
    /// Low-resolution cube on the mask lattice.
    pub yh: HSCube<T>,
    /// Full-grid cube through the spectral response.
    pub ym: HSCube<T>,
    pub hs_noise_std: Vec<T>,
    pub ms_noise_std: Vec<T>,
}

/// Per-band noise standard deviations hitting the SNR targets; the signal
/// power is averaged over each target group.
fn group_stds<T: Scalar>(clean: &DMatrix<T>, target: &SnrTarget<T>) -> Result<Vec<T>> {
    let bands = clean.nrows();
    let per_band = target.band_targets(bands)?;
    let n = clean.ncols();
    // Group bands by identical target so group power is shared.
    let mut stds = vec![T::zero(); bands];
    let mut l = 0;
    while l < bands {
        let mut r = l + 1;
        while r < bands && per_band[r] == per_band[l] {
            r += 1;
        }
        if let Some(db) = per_band[l] {
            let mut power = T::zero();
            for b in l..r {
                power += clean.row(b).norm_squared();
            }
            power /= crate::scalar::count::<T>((r - l) * n);
            let ratio = real::<T>(10.0).powf(db / real::<T>(10.0));
            let std = (power / ratio).sqrt();
            for s in stds.iter_mut().take(r).skip(l) {
                *s = std;
            }
        }
        l = r;
    }
    Ok(stds)
}

/// Apply the observation model and add seeded Gaussian noise at the given
/// SNR targets. Noise is drawn in `f64` (low-resolution cube first, then the
/// full-grid cube, band by band).
pub fn degrade<T: Scalar + FftNum>(
    z: &HSCube<T>,
    model: &DegradationModel<T>,
    snr_hs: &SnrTarget<T>,
    snr_ms: &SnrTarget<T>,
    seed: u64,
) -> Result<Degraded<T>> {
    let mask = model.mask();
    if z.width() != mask.width() || z.height() != mask.height() {
        return Err(Error::dims("scene grid does not match the mask grid".to_string()));
    }
    if z.bands() != model.hs_bands() {
        return Err(Error::dims("scene bands do not match the spectral response".to_string()));
    }
    let fft = Fft2::new(z.width(), z.height());
    let transfer = crate::degradation::kernel_transfer(model.blur(), &fft)?;
    let blurred = convolve_rows(z.data(), &fft, &transfer);
    let clean_h = mask.downsample_cols(&blurred)?;
    let clean_m = model.response() * z.data();

    let hs_noise_std = group_stds(&clean_h, snr_hs)?;
    let ms_noise_std = group_stds(&clean_m, snr_ms)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut add_noise = |clean: &DMatrix<T>, stds: &[T]| -> DMatrix<T> {
        let mut out = clean.clone();
        for l in 0..out.nrows() {
            let std = stds[l].to_f64_lossy();
            for p in 0..out.ncols() {
                let g: f64 = StandardNormal.sample(&mut rng);
                out[(l, p)] += real::<T>(g * std);
            }
        }
        out
    };
    let yh_data = add_noise(&clean_h, &hs_noise_std);
    let ym_data = add_noise(&clean_m, &ms_noise_std);

    Ok(Degraded {
        yh: HSCube::new(mask.low_width(), mask.low_height(), yh_data)?,
        ym: HSCube::new(mask.width(), mask.height(), ym_data)?,
        hs_noise_std,
        ms_noise_std,
    })
}

/// Everything needed to simulate one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig<T> {
    pub scene: SceneSpec,
    pub ms_bands: usize,
    /// Spatial downsampling factor between the two observations.
    pub factor: usize,
    pub snr_hs: SnrTarget<T>,
    pub snr_ms: SnrTarget<T>,
    pub seed: u64,
}

impl<T: Scalar> Default for SimulationConfig<T> {
    fn default() -> Self {
        SimulationConfig {
            scene: SceneSpec { width: 64, height: 64, bands: 32, endmembers: 4 },
            ms_bands: 8,
            factor: 4,
            snr_hs: SnrTarget::UniformDb(real(50.0)),
            snr_ms: SnrTarget::UniformDb(real(50.0)),
            seed: 0,
        }
    }
}

impl<T: Scalar> SimulationConfig<T> {
    /// Read recognized keys from a parsed config, using defaults elsewhere.
    pub fn from_keys(kv: &KeyValues) -> Result<Self> {
        let d = Self::default();
        let scene = SceneSpec {
            width: kv.usize_or("width", d.scene.width)?,
            height: kv.usize_or("height", d.scene.height)?,
            bands: kv.usize_or("bands", d.scene.bands)?,
            endmembers: kv.usize_or("endmembers", d.scene.endmembers)?,
        };
        let snr_hs = match kv.get("snr_hs_db") {
            Some(text) => SnrTarget::parse(text)?,
            None => d.snr_hs,
        };
        let snr_ms = match kv.get("snr_ms_db") {
            Some(text) => SnrTarget::parse(text)?,
            None => d.snr_ms,
        };
        Ok(SimulationConfig {
            scene,
            ms_bands: kv.usize_or("ms_bands", d.ms_bands)?,
            factor: kv.usize_or("factor", d.factor)?,
            snr_hs,
            snr_ms,
            seed: kv.u64_or("seed", d.seed)?,
        })
    }

    /// Build the matching observation model.
    pub fn build_degradation(&self) -> Result<DegradationModel<T>> {
        let blur = BlurKernel::for_downsampling(self.factor)?;
        let mask = SubsampleMask::new(self.scene.width, self.scene.height, self.factor)?;
        let response = synthetic_response(self.ms_bands, self.scene.bands)?;
        DegradationModel::new(blur, mask, response)
    }
}
