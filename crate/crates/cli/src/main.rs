//! `gmmfuse`: simulate, train, sharpen, denoise, evaluate and diagnose from
//! the command line.
//!
//! Every command reads an optional `key: value` config file; flags override
//! individual keys. Exit codes: 0 success, 1 usage error, 2 data or IO
//! error, 3 failed diagnostic check.

mod ops;

use clap::{Parser, Subcommand, ValueEnum};
use gmmfuse::KeyValues;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gmmfuse", version, about = "Hyperspectral sharpening with a scene-adapted Gaussian-mixture prior")]
struct Cli {
    /// Key-value configuration file; command-line flags win on conflicts.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads. Outputs are identical for every value.
    #[arg(long, global = true, default_value_t = 1, value_name = "N")]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene plus its two degraded observations.
    Simulate(SimulateArgs),
    /// Fit a Gaussian mixture to centered patches of a training band.
    TrainGmm(TrainGmmArgs),
    /// Fuse a low-resolution cube with a full-grid cube.
    Sharpen(SharpenArgs),
    /// Denoise a single band with a trained mixture.
    Denoise(DenoiseArgs),
    /// Score an estimate against a reference cube.
    Eval(EvalArgs),
    /// Check the fixed-weight denoiser's spectrum and prox identity.
    Diagnose(DiagnoseArgs),
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Directory for truth.bin, observed_lowres.bin, observed_fullgrid.bin.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Band count of the ground truth and the low-resolution cube.
    #[arg(long)]
    bands: Option<usize>,
    /// Band count of the full-grid cube.
    #[arg(long)]
    ms_bands: Option<usize>,
    #[arg(long)]
    endmembers: Option<usize>,
    /// Spatial downsampling factor between the observations.
    #[arg(long)]
    factor: Option<usize>,
    /// SNR in dB: `inf`, one number, or `db*count,...` groups.
    #[arg(long, value_name = "SNR")]
    snr_hs: Option<String>,
    #[arg(long, value_name = "SNR")]
    snr_ms: Option<String>,
}

#[derive(clap::Args)]
struct TrainGmmArgs {
    /// Cube supplying the training band.
    #[arg(long, value_name = "CUBE")]
    input: PathBuf,
    /// Model file to write (a text manifest is written alongside).
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Train on this band instead of the mean of all bands.
    #[arg(long, value_name = "INDEX")]
    band: Option<usize>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    /// Noise level assumed on the training band.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct SharpenArgs {
    /// Low-resolution cube (payload path; header sits next to it).
    #[arg(long, value_name = "CUBE")]
    hs: PathBuf,
    /// Full-grid cube.
    #[arg(long, value_name = "CUBE")]
    ms: PathBuf,
    /// Trained mixture model.
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Output cube.
    #[arg(long, value_name = "CUBE")]
    out: PathBuf,
    /// Trace CSV path; defaults to `<out>.trace.csv`.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// Latent subspace dimension.
    #[arg(long)]
    subspace: Option<usize>,
    /// Noise level assumed when freezing the denoiser weights.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DenoiseMode {
    /// Posterior-mean denoiser; weights recomputed from the input.
    Mmse,
    /// Linear denoiser with weights frozen from the training band.
    Fixed,
}

#[derive(clap::Args)]
struct DenoiseArgs {
    /// Noisy cube; must have one band unless --band picks one.
    #[arg(long, value_name = "CUBE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "CUBE")]
    out: PathBuf,
    /// Noise standard deviation.
    #[arg(long)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = DenoiseMode::Mmse)]
    mode: DenoiseMode,
    /// Band index of --input to denoise.
    #[arg(long, value_name = "INDEX")]
    band: Option<usize>,
    /// Training cube for fixed mode; defaults to the input itself.
    #[arg(long, value_name = "CUBE")]
    train: Option<PathBuf>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_name = "CUBE")]
    estimate: PathBuf,
    #[arg(long, value_name = "CUBE")]
    reference: PathBuf,
    /// CSV report path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Resolution ratio entering the ERGAS normalization.
    #[arg(long)]
    ratio: Option<f64>,
}

#[derive(clap::Args)]
struct DiagnoseArgs {
    /// Directory for report.txt and the scalar map tables.
    #[arg(long, value_name = "DIR", default_value = "diagnostics")]
    out: PathBuf,
    /// Square image size of the tiny training scene.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    patch_side: Option<usize>,
    #[arg(long)]
    components: Option<usize>,
    /// Noise level the operator is checked at.
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep per-patch mean handling on (the strict checks then fail).
    #[arg(long)]
    mean_handling: bool,
}

fn set_if<T: ToString>(kv: &mut KeyValues, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        kv.set(key, v.to_string());
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<KeyValues> {
    match path {
        None => Ok(KeyValues::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", p.display()))?;
            Ok(KeyValues::parse(&text)?)
        }
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut kv = load_config(&cli.config)?;
    match cli.command {
        Command::Simulate(a) => {
            set_if(&mut kv, "seed", &a.seed);
            set_if(&mut kv, "width", &a.width);
            set_if(&mut kv, "height", &a.height);
            set_if(&mut kv, "bands", &a.bands);
            set_if(&mut kv, "ms_bands", &a.ms_bands);
            set_if(&mut kv, "endmembers", &a.endmembers);
            set_if(&mut kv, "factor", &a.factor);
            set_if(&mut kv, "snr_hs_db", &a.snr_hs);
            set_if(&mut kv, "snr_ms_db", &a.snr_ms);
            ops::simulate(&kv, &a.out)
        }
        Command::TrainGmm(a) => {
            set_if(&mut kv, "patch_side", &a.patch_side);
            set_if(&mut kv, "components", &a.components);
            set_if(&mut kv, "sigma_train", &a.sigma);
            set_if(&mut kv, "seed", &a.seed);
            ops::train_gmm(&kv, &a.input, &a.out, a.band)
        }
        Command::Sharpen(a) => {
            set_if(&mut kv, "rho", &a.rho);
            set_if(&mut kv, "lambda", &a.lambda);
            set_if(&mut kv, "tau", &a.tau);
            set_if(&mut kv, "iters", &a.iters);
            set_if(&mut kv, "tol", &a.tol);
            set_if(&mut kv, "subspace", &a.subspace);
            set_if(&mut kv, "sigma_train", &a.sigma);
            let trace = a.trace.unwrap_or_else(|| {
                let mut t = a.out.as_os_str().to_owned();
                t.push(".trace.csv");
                PathBuf::from(t)
            });
            ops::sharpen(&kv, &a.hs, &a.ms, &a.model, &a.out, &trace)
        }
        Command::Denoise(a) => {
            let fixed = matches!(a.mode, DenoiseMode::Fixed);
            ops::denoise(&kv, &a.input, &a.model, &a.out, a.sigma, fixed, a.band, a.train.as_deref())
        }
        Command::Eval(a) => {
            set_if(&mut kv, "ratio", &a.ratio);
            ops::eval(&kv, &a.estimate, &a.reference, &a.out)
        }
        Command::Diagnose(a) => {
            set_if(&mut kv, "size", &a.size);
            set_if(&mut kv, "patch_side", &a.patch_side);
            set_if(&mut kv, "components", &a.components);
            set_if(&mut kv, "sigma", &a.sigma);
            set_if(&mut kv, "seed", &a.seed);
            if a.mean_handling {
                kv.set("mean_handling", "true");
            }
            ops::diagnose(&kv, &a.out)
        }
    }
}

fn is_diagnostic_failure(err: &anyhow::Error) -> bool {
    err.chain().any(|cause| {
        matches!(cause.downcast_ref::<gmmfuse::Error>(), Some(gmmfuse::Error::DiagnosticFailure(_)))
    })
}

fn main() -> ExitCode {
    // Die quietly on a closed pipe like other Unix filters.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }

    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's rendered help/version output belongs on stdout with
            // success; real usage errors exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) =
        rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global()
    {
        eprintln!("error: cannot configure {} worker threads: {e}", cli.jobs);
        return ExitCode::from(2);
    }

    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_diagnostic_failure(&e) {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
