//! `pulse`: latent-space super-resolution from the command line.
//!
//! Exit codes: 0 success, 1 error, 2 search finished without reaching ε.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pulse_core::autodiff::Power;
use pulse_core::bench::{
    noise_control_experiment, recovery_experiment, robustness_experiment, success_rate, BenchReport, Protocol,
    DEFAULT_RUNS_PER_IMAGE,
};
use pulse_core::generator::init_random_generator;
use pulse_core::image::Degradation;
use pulse_core::io::{read_image, read_weights, write_image, write_weights};
use pulse_core::metrics::{mse, psnr, ssim};
use pulse_core::objective::{CrossVariant, DEFAULT_EPSILON, DEFAULT_GEOCROSS_WEIGHT};
use pulse_core::par::execution_for_jobs;
use pulse_core::sphere::{
    gaussian_norm_stats, multi_restart, Descent, RestartMode, Retraction, RunResult, DEFAULT_LEARNING_RATE,
    DEFAULT_RESTARTS, DEFAULT_STEPS,
};
use pulse_core::{build_downscaler, Execution, GeneratorConfig, GeneratorSpec, Kernel, ObjectiveConfig, OptimConfig};

const EXIT_NOT_FOUND: u8 = 2;

#[derive(Parser)]
#[command(name = "pulse", version, about = "Super-resolution by searching a generator's latent sphere")]
struct Cli {
    /// Worker threads for restarts and bench items (1 = sequential, 0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve one low-resolution image.
    Upscale(UpscaleArgs),
    /// Write several converged candidates for one input.
    Sample(SampleArgs),
    /// Corrupt an image with noise, blur or salt-and-pepper.
    Degrade(DegradeArgs),
    /// Seeded experiments and success-rate tables.
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Print mse, psnr and ssim between two images.
    Metrics(MetricsArgs),
    /// Write a random-weight generator.
    GenInit(GenInitArgs),
    /// Norm concentration of standard Gaussian samples.
    Soapbubble(SoapArgs),
}

#[derive(Args, Clone)]
struct SeedArg {
    /// Master seed; falls back to PULSE_SEED, then to a fresh random seed that is printed.
    #[arg(long, env = "PULSE_SEED")]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> u64 {
        self.seed.unwrap_or_else(|| {
            let s = rand::random::<u64>();
            eprintln!("seed={s}");
            s
        })
    }
}

#[derive(Args, Clone)]
struct SearchArgs {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Convergence threshold on the downscaling loss.
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    eps: f64,
    /// Weight of the style-tying regularizer.
    #[arg(long, default_value_t = DEFAULT_GEOCROSS_WEIGHT)]
    geocross: f64,
    /// euclidean or geodesic.
    #[arg(long, default_value = "geodesic")]
    cross: CrossVariant,
    /// Exponent p of the downscaling loss (1 or 2).
    #[arg(long, default_value_t = 2)]
    norm: u32,
    /// Leading noise layers that take gradient steps [default: ceil(k/3)].
    #[arg(long)]
    trainable_noise: Option<usize>,
    /// bicubic or box.
    #[arg(long, default_value = "bicubic")]
    kernel: Kernel,
    /// tangent or renorm.
    #[arg(long, default_value = "tangent")]
    retraction: Retraction,
    /// adam, momentum or plain.
    #[arg(long, default_value = "adam")]
    descent: Descent,
}

impl SearchArgs {
    fn objective(&self) -> Result<ObjectiveConfig> {
        let cfg = ObjectiveConfig {
            power: Power::from_exponent(self.norm)?,
            geocross_weight: self.geocross,
            cross: self.cross,
            epsilon: self.eps,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn optim(&self, seed: u64, restarts: usize, mode: RestartMode, execution: Execution) -> OptimConfig {
        OptimConfig {
            steps: self.steps,
            learning_rate: self.lr,
            restarts,
            seed,
            retraction: self.retraction,
            trainable_noise: self.trainable_noise,
            restart_mode: mode,
            descent: self.descent,
            execution,
        }
    }
}

#[derive(Args)]
struct UpscaleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    /// Downscaling factor between the generator output and the input.
    #[arg(long)]
    scale: usize,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long)]
    output: PathBuf,
    /// Write `step,loss` of the best run.
    #[arg(long)]
    save_trajectory: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    n: usize,
    /// restart (fresh latents) or noise (fresh noise, same latent start).
    #[arg(long, default_value = "restart")]
    mode: RestartMode,
    #[arg(long)]
    outdir: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    input: PathBuf,
    /// gaussian (std on 0..255), blur (length at 1024 px) or saltpepper (density).
    #[arg(long)]
    op: String,
    #[arg(long)]
    param: f64,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args, Clone)]
struct GeneratorSource {
    /// Generator weights; without it a desk generator is built from --gen-seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    gen_seed: u64,
}

impl GeneratorSource {
    fn load(&self) -> Result<GeneratorSpec> {
        match &self.weights {
            Some(p) => Ok(read_weights(p)?),
            None => Ok(init_random_generator(&GeneratorConfig::desk(), self.gen_seed)?),
        }
    }
}

#[derive(Args)]
struct BenchCommon {
    #[command(flatten)]
    generator: GeneratorSource,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    restarts: usize,
    /// Also write the CSV to this file.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    seed: SeedArg,
}

impl BenchCommon {
    fn protocol(&self, seed: u64, exec: Execution) -> Result<Protocol> {
        Ok(Protocol {
            kernel: self.search.kernel,
            factor: self.scale,
            objective: self.search.objective()?,
            optim: self.search.optim(seed, self.restarts, RestartMode::Restart, exec),
        })
    }
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Recover downscaled generator samples.
    Recover {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Add a row for random-noise inputs under the same budget.
        #[arg(long)]
        control: bool,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// Recovery with corrupted inputs; reports the denoising statistic.
    Robust {
        #[arg(long, default_value = "gaussian")]
        op: String,
        #[arg(long, default_value_t = 25.0)]
        param: f64,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        /// Per-trial statistics CSV.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[command(flatten)]
        common: BenchCommon,
    },
    /// Per-group success rates over `<root>/<group>/<image>`.
    SuccessRate {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RUNS_PER_IMAGE)]
        runs_per_image: usize,
        #[command(flatten)]
        common: BenchCommon,
    },
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct GenInitArgs {
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 6)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    r0: usize,
    /// Comma-separated channel widths, one per resolution stage [default: 16, 12, 8, 4, ...].
    #[arg(long, value_delimiter = ',')]
    widths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    seed: SeedArg,
}

#[derive(Args)]
struct SoapArgs {
    #[arg(long, default_value_t = 512)]
    d: usize,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[command(flatten)]
    seed: SeedArg,
}

fn write_trajectory(path: &Path, run: &RunResult) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in run.trajectory.iter().enumerate() {
        out.push_str(&format!("{i},{l:e}\n"));
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn marker_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".unconverged");
    PathBuf::from(name)
}

fn search(
    input: &Path,
    weights: &Path,
    scale: usize,
    args: &SearchArgs,
    opt: &OptimConfig,
) -> Result<Vec<RunResult>> {
    let lr = read_image(input)?;
    let spec = read_weights(weights)?;
    let ds = build_downscaler(args.kernel, spec.output_dims(), scale)?;
    if ds.lr_dims() != lr.dims() || lr.channels() != spec.config().image_channels {
        let (h, w) = spec.output_dims();
        bail!(
            "input is {}x{} with {} channel(s); generator output {w}x{h} / {scale} needs {}x{} with {}",
            lr.width(),
            lr.height(),
            lr.channels(),
            ds.lr_dims().1,
            ds.lr_dims().0,
            spec.config().image_channels
        );
    }
    Ok(multi_restart(&lr, &spec, &ds, &args.objective()?, opt, opt.restarts)?)
}

fn upscale(a: UpscaleArgs, exec: Execution) -> Result<u8> {
    let seed = a.seed.resolve();
    let opt = a.search.optim(seed, a.restarts, RestartMode::Restart, exec);
    println!(
        "steps={} lr={} eps={} restarts={} seed={seed}",
        opt.steps, opt.learning_rate, a.search.eps, opt.restarts
    );
    let runs = search(&a.input, &a.weights, a.scale, &a.search, &opt)?;
    let best = &runs[0];
    write_image(&a.output, &best.image)?;
    if let Some(p) = &a.save_trajectory {
        write_trajectory(p, best)?;
    }
    let marker = marker_path(&a.output);
    if best.converged {
        if marker.exists() {
            fs::remove_file(&marker).with_context(|| format!("removing stale {}", marker.display()))?;
        }
        println!("converged loss={:e} step={} restart={}", best.best_loss, best.best_step, best.restart);
        Ok(0)
    } else {
        fs::write(&marker, format!("best_loss={:e}\n", best.best_loss))
            .with_context(|| format!("writing {}", marker.display()))?;
        println!("no image found: best loss={:e} > eps={}", best.best_loss, a.search.eps);
        Ok(EXIT_NOT_FOUND)
    }
}

fn sample(a: SampleArgs, exec: Execution) -> Result<u8> {
    let seed = a.seed.resolve();
    let opt = a.search.optim(seed, a.n, a.mode, exec);
    let mut runs = search(&a.input, &a.weights, a.scale, &a.search, &opt)?;
    runs.sort_by_key(|r| r.restart);
    fs::create_dir_all(&a.outdir).with_context(|| format!("creating {}", a.outdir.display()))?;
    let mut written = 0;
    for r in &runs {
        if r.converged {
            let path = a.outdir.join(format!("candidate_{:03}.pgm", r.restart));
            write_image(&path, &r.image)?;
            println!("{} loss={:e}", path.display(), r.best_loss);
            written += 1;
        } else {
            eprintln!("restart {} did not converge (best loss {:e})", r.restart, r.best_loss);
        }
    }
    Ok(if written > 0 { 0 } else { EXIT_NOT_FOUND })
}

fn degrade(a: DegradeArgs) -> Result<u8> {
    let seed = a.seed.resolve();
    let img = read_image(&a.input)?;
    let out = Degradation::from_name(&a.op, a.param)?.apply(&img, seed)?;
    write_image(&a.output, &out)?;
    Ok(0)
}

fn emit(report: &BenchReport, csv: Option<&Path>) -> Result<()> {
    let text = report.to_csv();
    print!("{text}");
    std::io::stdout().flush()?;
    eprint!("{}", report.to_table());
    if let Some(p) = csv {
        fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench(cmd: BenchCommand, exec: Execution) -> Result<u8> {
    match cmd {
        BenchCommand::Recover { trials, control, common } => {
            let seed = common.seed.resolve();
            let spec = common.generator.load()?;
            let protocol = common.protocol(seed, exec)?;
            let mut report = recovery_experiment(&spec, &protocol, trials, seed)?.report;
            if control {
                report
                    .rows
                    .extend(noise_control_experiment(&spec, &protocol, trials, seed)?.report.rows);
            }
            emit(&report, common.csv.as_deref())?;
        }
        BenchCommand::Robust {
            op,
            param,
            trials,
            stats,
            common,
        } => {
            let seed = common.seed.resolve();
            let spec = common.generator.load()?;
            let degradation = Degradation::from_name(&op, param)?;
            let exp = robustness_experiment(&spec, &degradation, &common.protocol(seed, exec)?, trials, seed)?;
            emit(&exp.experiment.report, common.csv.as_deref())?;
            let wins = exp.stats.iter().filter(|s| s.denoised()).count();
            eprintln!("closer to the clean input than the corrupted input in {wins}/{} trials", exp.stats.len());
            if let Some(p) = stats {
                let mut out = String::from("trial,seed,best_loss,output_to_clean,input_to_clean,output_to_noisy,denoised\n");
                for (t, s) in exp.experiment.trials.iter().zip(&exp.stats) {
                    out.push_str(&format!(
                        "{},{},{:e},{:e},{:e},{:e},{}\n",
                        t.index,
                        t.seed,
                        t.best().best_loss,
                        s.output_to_clean,
                        s.input_to_clean,
                        s.output_to_noisy,
                        s.denoised()
                    ));
                }
                fs::write(&p, out).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        BenchCommand::SuccessRate {
            root,
            runs_per_image,
            common,
        } => {
            let seed = common.seed.resolve();
            let spec = common.generator.load()?;
            let report = success_rate(&root, &spec, &common.protocol(seed, exec)?, runs_per_image)?;
            emit(&report, common.csv.as_deref())?;
        }
    }
    Ok(0)
}

fn metrics(a: MetricsArgs) -> Result<u8> {
    let x = read_image(&a.a)?;
    let y = read_image(&a.b)?;
    println!("mse={:e} psnr={} ssim={:.6}", mse(&x, &y)?, psnr(&x, &y)?, ssim(&x, &y)?);
    Ok(0)
}

fn default_widths(stages: usize) -> Vec<usize> {
    (0..stages).map(|i| 16usize.saturating_sub(4 * i).max(4)).collect()
}

fn gen_init(a: GenInitArgs) -> Result<u8> {
    let seed = a.seed.resolve();
    let config = GeneratorConfig {
        latent_dim: a.d,
        styles: a.k,
        base_resolution: a.r0,
        widths: a.widths.unwrap_or_else(|| default_widths(a.k.div_ceil(2))),
        image_channels: a.channels,
        ..GeneratorConfig::desk()
    };
    let spec = init_random_generator(&config, seed)?;
    write_weights(&a.output, &spec)?;
    let (h, w) = spec.output_dims();
    println!("wrote {} (d={} k={} output {w}x{h})", a.output.display(), a.d, a.k);
    Ok(0)
}

fn soapbubble(a: SoapArgs, exec: Execution) -> Result<u8> {
    let seed = a.seed.resolve();
    let s = gaussian_norm_stats(a.d, a.n, seed, exec)?;
    println!(
        "d={} n={} sqrt_d={:.4} mean_norm={:.4} std_norm={:.4} fraction_within_10pct={:.4}",
        a.d,
        a.n,
        (a.d as f64).sqrt(),
        s.mean_norm,
        s.std_norm,
        s.fraction_near_sphere
    );
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    let exec = execution_for_jobs(cli.jobs)?;
    match cli.command {
        Command::Upscale(a) => upscale(a, exec),
        Command::Sample(a) => sample(a, exec),
        Command::Degrade(a) => degrade(a),
        Command::Bench(c) => bench(c, exec),
        Command::Metrics(a) => metrics(a),
        Command::GenInit(a) => gen_init(a),
        Command::Soapbubble(a) => soapbubble(a, exec),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
