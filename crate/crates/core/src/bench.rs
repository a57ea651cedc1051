//! Seeded experiment protocols and the per-group success-rate table.
//!
//! A success is an item for which at least one run reaches downscaling loss
//! ≤ ε. The metric only says that some image was found; it says nothing about
//! how varied the found images are.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::generator::{GeneratorSpec, LatentState};
use crate::image::{build_downscaler, Degradation, Image, Kernel, LinearResampler};
use crate::io::read_image;
use crate::objective::ObjectiveConfig;
use crate::par::map_range;
use crate::rng::{derive_seed, hash_str, rng};
use crate::sphere::{multi_restart, OptimConfig, RunResult};

const TARGET_STREAM: u64 = 11;
const SEARCH_STREAM: u64 = 12;
const DEGRADE_STREAM: u64 = 13;
const CONTROL_STREAM: u64 = 14;

pub const DEFAULT_RUNS_PER_IMAGE: usize = 5;

/// Downscaler, objective and optimizer shared by every trial of an experiment.
/// `optim.restarts` runs are made per item.
#[derive(Clone, Debug)]
pub struct Protocol {
    pub kernel: Kernel,
    pub factor: usize,
    pub objective: ObjectiveConfig,
    pub optim: OptimConfig,
}

impl Default for Protocol {
    /// Bicubic ×4 with default objective and optimizer settings.
    fn default() -> Self {
        Protocol {
            kernel: Kernel::Bicubic,
            factor: 4,
            objective: ObjectiveConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl Protocol {
    pub fn resampler(&self, spec: &GeneratorSpec) -> Result<LinearResampler> {
        build_downscaler(self.kernel, spec.output_dims(), self.factor)
    }

    fn search(&self, lr: &Image, spec: &GeneratorSpec, ds: &LinearResampler, seed: u64) -> Result<Vec<RunResult>> {
        let opt = OptimConfig {
            seed,
            ..self.optim.clone()
        };
        multi_restart(lr, spec, ds, &self.objective, &opt, self.optim.restarts)
    }
}

/// One row of a success table.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRow {
    pub group: String,
    /// Items attempted.
    pub attempts: usize,
    /// Items with at least one converged run.
    pub successes: usize,
    pub runs: usize,
    pub runs_converged: usize,
}

impl GroupRow {
    /// `None` for an empty group.
    pub fn rate(&self) -> Option<f64> {
        (self.attempts > 0).then(|| self.successes as f64 / self.attempts as f64)
    }

    fn rate_text(&self) -> String {
        self.rate().map_or_else(|| "n/a".to_owned(), |r| format!("{r:.4}"))
    }
}

/// Inputs that could not be used, with the reason.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Skipped {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<GroupRow>,
    pub skipped: Vec<Skipped>,
}

pub const CSV_HEADER: &str = "group,attempts,successes,rate";

impl BenchReport {
    pub fn row(&self, group: &str) -> Option<&GroupRow> {
        self.rows.iter().find(|r| r.group == group)
    }

    /// `group,attempts,successes,rate`; empty groups print `n/a`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let group = if r.group.contains([',', '"', '\n']) {
                format!("\"{}\"", r.group.replace('"', "\"\""))
            } else {
                r.group.clone()
            };
            writeln!(out, "{group},{},{},{}", r.attempts, r.successes, r.rate_text()).expect("string write");
        }
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.group.len()).max().unwrap_or(0).max(5);
        let mut out = format!("{:<width$}  {:>8}  {:>9}  {:>7}\n", "group", "attempts", "successes", "rate");
        for r in &self.rows {
            let rate = r.rate().map_or_else(|| "n/a".to_owned(), |v| format!("{:.1}%", 100.0 * v));
            writeln!(out, "{:<width$}  {:>8}  {:>9}  {:>7}", r.group, r.attempts, r.successes, rate)
                .expect("string write");
        }
        for s in &self.skipped {
            writeln!(out, "skipped {}: {}", s.path.display(), s.reason).expect("string write");
        }
        out
    }
}

/// Result of one seeded trial.
#[derive(Clone, Debug)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    /// The search input (possibly degraded).
    pub lr: Image,
    /// Runs sorted by best loss.
    pub runs: Vec<RunResult>,
}

impl Trial {
    pub fn converged(&self) -> bool {
        self.runs.iter().any(|r| r.converged)
    }

    pub fn best(&self) -> &RunResult {
        &self.runs[0]
    }
}

#[derive(Clone, Debug)]
pub struct Experiment {
    pub report: BenchReport,
    pub trials: Vec<Trial>,
}

fn summarize(group: &str, trials: &[Trial]) -> GroupRow {
    GroupRow {
        group: group.to_owned(),
        attempts: trials.len(),
        successes: trials.iter().filter(|t| t.converged()).count(),
        runs: trials.iter().map(|t| t.runs.len()).sum(),
        runs_converged: trials.iter().flat_map(|t| &t.runs).filter(|r| r.converged).count(),
    }
}

pub fn trial_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Clean LR image of trial `seed`: a tiled latent with fresh noise, synthesized and downscaled.
pub fn recovery_target(spec: &GeneratorSpec, ds: &LinearResampler, seed: u64) -> Result<(Image, Image)> {
    let target = LatentState::sample(spec, derive_seed(seed, TARGET_STREAM), 0);
    let hr = spec.synthesize(&target)?;
    let lr = ds.apply(&hr)?;
    Ok((hr, lr))
}

fn run_trials<F>(spec: &GeneratorSpec, protocol: &Protocol, trials: usize, seed: u64, make_lr: F) -> Result<Vec<Trial>>
where
    F: Fn(&LinearResampler, u64) -> Result<Image> + Sync,
{
    let ds = protocol.resampler(spec)?;
    map_range(protocol.optim.execution, trials, |index| {
        let seed = trial_seed(seed, index);
        let lr = make_lr(&ds, seed)?;
        let runs = protocol.search(&lr, spec, &ds, derive_seed(seed, SEARCH_STREAM))?;
        Ok(Trial { index, seed, lr, runs })
    })
    .into_iter()
    .collect()
}

/// Self-consistency protocol: each trial downscales a generator sample and
/// searches for any latent that re-attains it within ε.
pub fn recovery_experiment(spec: &GeneratorSpec, protocol: &Protocol, trials: usize, seed: u64) -> Result<Experiment> {
    let trials = run_trials(spec, protocol, trials, seed, |ds, s| Ok(recovery_target(spec, ds, s)?.1))?;
    Ok(Experiment {
        report: BenchReport {
            rows: vec![summarize("recovery", &trials)],
            skipped: Vec::new(),
        },
        trials,
    })
}

/// i.i.d. uniform LR pixels; the feasible set should almost never be reached.
pub fn noise_control_experiment(
    spec: &GeneratorSpec,
    protocol: &Protocol,
    trials: usize,
    seed: u64,
) -> Result<Experiment> {
    let trials = run_trials(spec, protocol, trials, seed, |ds, s| {
        let (h, w) = ds.lr_dims();
        let c = spec.config().image_channels;
        let mut r = rng(derive_seed(s, CONTROL_STREAM));
        Image::from_planes(h, w, c, (0..h * w * c).map(|_| r.random::<f64>()).collect())
    })?;
    Ok(Experiment {
        report: BenchReport {
            rows: vec![summarize("noise-control", &trials)],
            skipped: Vec::new(),
        },
        trials,
    })
}

/// Denoising statistic of one trial.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DenoiseStat {
    /// `‖DS(I_SR) − lr_clean‖₂`
    pub output_to_clean: f64,
    /// `‖lr_noisy − lr_clean‖₂`
    pub input_to_clean: f64,
    /// `‖DS(I_SR) − lr_noisy‖₂`
    pub output_to_noisy: f64,
}

impl DenoiseStat {
    pub fn denoised(&self) -> bool {
        self.output_to_clean < self.input_to_clean
    }
}

#[derive(Clone, Debug)]
pub struct RobustnessExperiment {
    pub experiment: Experiment,
    pub stats: Vec<DenoiseStat>,
}

impl RobustnessExperiment {
    pub fn denoised_fraction(&self) -> Option<f64> {
        let n = self.stats.len();
        (n > 0).then(|| self.stats.iter().filter(|s| s.denoised()).count() as f64 / n as f64)
    }
}

/// Recovery protocol with the LR input corrupted by `degradation`; the
/// search runs against the corrupted input.
pub fn robustness_experiment(
    spec: &GeneratorSpec,
    degradation: &Degradation,
    protocol: &Protocol,
    trials: usize,
    seed: u64,
) -> Result<RobustnessExperiment> {
    let ds = protocol.resampler(spec)?;
    let trials = run_trials(spec, protocol, trials, seed, |ds, s| {
        let clean = recovery_target(spec, ds, s)?.1;
        degradation.apply(&clean, derive_seed(s, DEGRADE_STREAM))
    })?;
    let stats = trials
        .iter()
        .map(|t| {
            let clean = recovery_target(spec, &ds, t.seed)?.1;
            let out = ds.apply(&t.best().image)?;
            Ok(DenoiseStat {
                output_to_clean: out.l2_distance(&clean)?,
                input_to_clean: t.lr.l2_distance(&clean)?,
                output_to_noisy: out.l2_distance(&t.lr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RobustnessExperiment {
        experiment: Experiment {
            report: BenchReport {
                rows: vec![summarize("robustness", &trials)],
                skipped: Vec::new(),
            },
            trials,
        },
        stats,
    })
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Per-group success table over `root/<group>/<image>` with
/// `runs_per_image` seeded runs per image.
///
/// Unreadable or mis-sized files are listed in `skipped`. A group with no
/// usable images reports its rate as `n/a`.
pub fn success_rate(
    root: &Path,
    spec: &GeneratorSpec,
    protocol: &Protocol,
    runs_per_image: usize,
) -> Result<BenchReport> {
    if runs_per_image == 0 {
        return Err(Error::invalid("runs per image must be >= 1"));
    }
    let ds = protocol.resampler(spec)?;
    let (lh, lw) = ds.lr_dims();
    let channels = spec.config().image_channels;
    let protocol = Protocol {
        optim: OptimConfig {
            restarts: runs_per_image,
            ..protocol.optim.clone()
        },
        ..protocol.clone()
    };
    let mut report = BenchReport::default();
    for group_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let group = group_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut items = Vec::new();
        for path in sorted_entries(&group_dir)?.into_iter().filter(|p| p.is_file()) {
            match read_image(&path) {
                Ok(img) if img.dims() == (lh, lw) && img.channels() == channels => items.push((path, img)),
                Ok(img) => report.skipped.push(Skipped {
                    reason: format!(
                        "expected {lw}x{lh} with {channels} channel(s), found {}x{} with {}",
                        img.width(),
                        img.height(),
                        img.channels()
                    ),
                    path,
                }),
                Err(e) => report.skipped.push(Skipped {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
        let trials = map_range(protocol.optim.execution, items.len(), |i| {
            let (path, lr) = &items[i];
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let seed = derive_seed(protocol.optim.seed, hash_str(&format!("{group}/{name}")));
            let runs = protocol.search(lr, spec, &ds, seed)?;
            Ok(Trial {
                index: i,
                seed,
                lr: lr.clone(),
                runs,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        report.rows.push(summarize(&group, &trials));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(group: &str, attempts: usize, successes: usize) -> GroupRow {
        GroupRow {
            group: group.into(),
            attempts,
            successes,
            runs: attempts,
            runs_converged: successes,
        }
    }

    #[test]
    fn csv_layout() {
        let report = BenchReport {
            rows: vec![row("a", 4, 3), row("empty", 0, 0), row("x,y", 1, 0)],
            skipped: vec![],
        };
        assert_eq!(
            report.to_csv(),
            "group,attempts,successes,rate\na,4,3,0.7500\nempty,0,0,n/a\n\"x,y\",1,0,0.0000\n"
        );
        assert!(report.to_table().contains("n/a"));
    }

    #[test]
    fn empty_group_rate_is_none() {
        assert_eq!(row("g", 0, 0).rate(), None);
        assert_eq!(row("g", 2, 1).rate(), Some(0.5));
    }
}
