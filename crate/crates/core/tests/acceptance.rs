//! Acceptance gate: every criterion prints one PASS/FAIL line; the process
//! exits non-zero if any fails.

use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::Arc;
use std::time::{Duration, Instant};

use pulse_core::autodiff::finite_difference_check;
use pulse_core::bench::{noise_control_experiment, recovery_experiment, recovery_target, robustness_experiment, success_rate, Protocol};
use pulse_core::generator::{init_random_generator, sample_noise};
use pulse_core::image::Degradation;
use pulse_core::io::{decode_pnm, encode_pnm, encode_weights, read_weights, write_image, write_weights};
use pulse_core::metrics::{pixelwise_mean_minimizer, sum_squared_distance};
use pulse_core::objective::{geocross_loss, ObjectiveGraph};
use pulse_core::rng::{derive_seed, rng};
use pulse_core::sphere::{gaussian_norm_stats, multi_restart, run_pulse, sample_sphere, squared_norm_descent, Retraction};
use pulse_core::{build_downscaler, Execution, GeneratorConfig, GeneratorSpec, Image, Kernel, LatentState, OptimConfig};
use rand::Rng;

const SEED: u64 = 2020;
const TRIALS: usize = 20;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn desk() -> GeneratorSpec {
    init_random_generator(&GeneratorConfig::desk(), 1).expect("desk generator")
}

fn gradient_correctness() -> Outcome {
    let shapes = [
        (64, 6, 8, vec![16, 12, 8]),
        (64, 6, 8, vec![8, 8, 4]),
        (32, 4, 8, vec![8, 6]),
        (16, 2, 8, vec![6]),
        (64, 5, 4, vec![8, 8, 4]),
    ];
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (i, (d, k, r0, widths)) in shapes.iter().cycle().take(10).enumerate() {
        let config = GeneratorConfig {
            latent_dim: *d,
            styles: *k,
            base_resolution: *r0,
            widths: widths.clone(),
            image_channels: if i % 3 == 2 { 3 } else { 1 },
            ..GeneratorConfig::desk()
        };
        let seed = derive_seed(SEED, i as u64);
        let spec = init_random_generator(&config, seed).map_err(|e| e.to_string())?;
        let ds = Arc::new(build_downscaler(Kernel::Bicubic, spec.output_dims(), 4).map_err(|e| e.to_string())?);
        let (_, lr) = recovery_target(&spec, &ds, seed).map_err(|e| e.to_string())?;
        let trainable = config.default_trainable_noise();
        let state = LatentState {
            styles: (0..*k).map(|j| sample_sphere(*d, derive_seed(seed, 100 + j as u64))).collect(),
            noise: sample_noise(&spec, derive_seed(seed, 7)),
            trainable_noise: trainable,
        };
        let power = if i % 2 == 0 { pulse_core::autodiff::Power::L2 } else { pulse_core::autodiff::Power::L1 };
        let obj = pulse_core::ObjectiveConfig {
            power,
            geocross_weight: 0.05,
            ..Default::default()
        };
        let graph = ObjectiveGraph::build(&spec, ds, &lr, &obj, trainable).map_err(|e| e.to_string())?;
        let bindings = state.bindings(&spec).map_err(|e| e.to_string())?;
        let report = finite_difference_check(graph.graph(), &bindings, 1e-5, 1e-4).map_err(|e| e.to_string())?;
        let params = report.parameters.len();
        if params != k + trainable {
            return Err(format!("config {i}: checked {params} parameters, expected {}", k + trainable));
        }
        worst = worst.max(report.max_relative_error());
        count += 1;
    }
    check(worst <= 1e-4, format!("{count} configs, worst relative error {worst:.2e} (tol 1e-4)"))
}

fn sphere_invariant() -> Outcome {
    let spec = desk();
    let ds = build_downscaler(Kernel::Bicubic, spec.output_dims(), 4).map_err(|e| e.to_string())?;
    let (_, lr) = recovery_target(&spec, &ds, SEED).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for retraction in [Retraction::Tangent, Retraction::Renormalize] {
        let opt = OptimConfig {
            seed: SEED,
            retraction,
            ..Default::default()
        };
        let run = run_pulse(&lr, &spec, &ds, &Default::default(), &opt).map_err(|e| e.to_string())?;
        if run.trajectory.len() != 101 {
            return Err(format!("trajectory has {} entries", run.trajectory.len()));
        }
        worst = worst.max(run.max_norm_error);
    }
    check(worst <= 1e-9, format!("100 steps x 2 retractions, max |norm - sqrt d|/sqrt d = {worst:.1e}"))
}

fn downscaler_exactness() -> Outcome {
    let mut r = rng(SEED);
    let (mut apply_err, mut adj_err): (f64, f64) = (0.0, 0.0);
    for kernel in [Kernel::Bicubic, Kernel::Box] {
        for factor in [2, 4, 8] {
            for (h, w) in [(32, 32), (16, 24), (8, 32)] {
                let ds = build_downscaler(kernel, (h, w), factor).map_err(|e| e.to_string())?;
                let (lh, lw) = ds.lr_dims();
                let dense = ds.to_dense();
                let x: Vec<f64> = (0..h * w).map(|_| r.random::<f64>() - 0.5).collect();
                let y: Vec<f64> = (0..lh * lw).map(|_| r.random::<f64>() - 0.5).collect();
                let ax = ds.apply_planes(1, &x).map_err(|e| e.to_string())?;
                for (row, &v) in ax.iter().enumerate() {
                    let expect: f64 = dense[row * h * w..(row + 1) * h * w].iter().zip(&x).map(|(a, b)| a * b).sum();
                    apply_err = apply_err.max((v - expect).abs());
                }
                let aty = ds.adjoint_planes(1, &y).map_err(|e| e.to_string())?;
                let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
                adj_err = adj_err.max((lhs - rhs).abs());
            }
        }
    }
    check(
        apply_err <= 1e-12 && adj_err <= 1e-10,
        format!("bicubic+box x{{2,4,8}}: |Ax - dense x| {apply_err:.1e} (tol 1e-12), |<Ax,y>-<x,A*y>| {adj_err:.1e} (tol 1e-10)"),
    )
}

fn recovery() -> Outcome {
    let spec = desk();
    let start = Instant::now();
    let exp = recovery_experiment(&spec, &Protocol::default(), TRIALS, SEED).map_err(|e| e.to_string())?;
    let row = &exp.report.rows[0];
    let rate = row.rate().unwrap_or(0.0);
    let per_run = start.elapsed() / row.runs.max(1) as u32;
    check(
        rate >= 0.9 && per_run < Duration::from_secs(10),
        format!(
            "{}/{} trials converged (rate {rate:.2}, need >= 0.90), {}/{} runs, {:.2} s per run",
            row.successes,
            row.attempts,
            row.runs_converged,
            row.runs,
            per_run.as_secs_f64()
        ),
    )
}

fn negative_control() -> Outcome {
    let exp = noise_control_experiment(&desk(), &Protocol::default(), TRIALS, SEED).map_err(|e| e.to_string())?;
    let row = &exp.report.rows[0];
    let best = exp.trials.iter().map(|t| t.best().best_loss).fold(f64::INFINITY, f64::min);
    check(
        row.successes * 10 <= row.attempts,
        format!(
            "{}/{} noise inputs converged (need <= 10%), lowest loss {best:.2e}",
            row.successes, row.attempts
        ),
    )
}

fn soap_bubble() -> Outcome {
    let d = 512;
    let stats = gaussian_norm_stats(d, 10_000, SEED, Execution::Parallel).map_err(|e| e.to_string())?;
    let free = squared_norm_descent(d, 0.1, 50, SEED, None).map_err(|e| e.to_string())?;
    let decreasing = free.windows(2).all(|w| w[1] < w[0]);
    let root = (d as f64).sqrt();
    let mut held: f64 = 0.0;
    for mode in [Retraction::Tangent, Retraction::Renormalize] {
        let norms = squared_norm_descent(d, 0.1, 50, SEED, Some(mode)).map_err(|e| e.to_string())?;
        held = held.max(norms.iter().map(|n| (n - root).abs() / root).fold(0.0, f64::max));
    }
    check(
        stats.fraction_near_sphere >= 0.99 && decreasing && held <= 1e-9,
        format!(
            "fraction within 10% of sqrt 512: {:.4} (need >= 0.99); free descent strictly decreasing: {decreasing} ({:.1} -> {:.2e}); constrained drift {held:.1e}",
            stats.fraction_near_sphere,
            free[0],
            free[free.len() - 1]
        ),
    )
}

fn averaging() -> Outcome {
    const STEPS: usize = 100;
    let mut r = rng(derive_seed(SEED, 7));
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_offset: f64 = 0.0;
    for _ in 0..5 {
        let images: Vec<Image> = (0..3)
            .map(|_| Image::from_planes(2, 2, 1, (0..4).map(|_| r.random::<f64>()).collect()).unwrap())
            .collect();
        // cost[p][g]: pixel p's contribution at grid value g / STEPS.
        let cost: Vec<Vec<f64>> = (0..4)
            .map(|p| {
                (0..=STEPS)
                    .map(|g| {
                        let v = g as f64 / STEPS as f64;
                        images.iter().map(|im| (im.data()[p] - v).powi(2)).sum()
                    })
                    .collect()
            })
            .collect();
        let (mut best, mut arg) = (f64::INFINITY, [0usize; 4]);
        for a in 0..=STEPS {
            for b in 0..=STEPS {
                let ab = cost[0][a] + cost[1][b];
                for c in 0..=STEPS {
                    let abc = ab + cost[2][c];
                    for (e, &ce) in cost[3].iter().enumerate() {
                        if abc + ce < best {
                            best = abc + ce;
                            arg = [a, b, c, e];
                        }
                    }
                }
            }
        }
        let mean = pixelwise_mean_minimizer(&images).map_err(|e| e.to_string())?;
        let at_mean = sum_squared_distance(&images, &mean).map_err(|e| e.to_string())?;
        worst_gap = worst_gap.max(at_mean - best);
        for (p, &g) in arg.iter().enumerate() {
            worst_offset = worst_offset.max((g as f64 / STEPS as f64 - mean.data()[p]).abs());
        }
    }
    check(
        worst_gap <= 0.0 && worst_offset <= 0.5 / STEPS as f64 + 1e-12,
        format!("5 sets: loss(mean) - grid min <= {worst_gap:.2e}; grid argmin within {worst_offset:.4} of mean (half-step 0.005)"),
    )
}

fn geocross_analytics() -> Outcome {
    let v = vec![0.3, -1.2, 2.0];
    let equal = geocross_loss(&[v.clone(), v.clone(), v]).map_err(|e| e.to_string())?;
    let orth = geocross_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]]).map_err(|e| e.to_string())?;
    let anti = geocross_loss(&[vec![1.0, 2.0], vec![-1.0, -2.0]]).map_err(|e| e.to_string())?;
    let full = GeneratorConfig::full_scale();
    let k = full.styles;
    // Styles at angles 0.01·j: the loss is a sum over all C(k,2) pairs of ((j−i)·0.01)².
    let spread: Vec<Vec<f64>> = (0..k).map(|j| vec![(j as f64 * 0.01).cos(), (j as f64 * 0.01).sin()]).collect();
    let spread_loss = geocross_loss(&spread).map_err(|e| e.to_string())?;
    let expected_spread: f64 = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| ((j - i) as f64 * 0.01).powi(2)))
        .sum();
    let pair_terms = (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).count();
    check(
        equal == 0.0
            && (orth - FRAC_PI_2 * FRAC_PI_2).abs() <= 1e-9
            && anti.is_finite()
            && (anti - PI * PI).abs() <= 1e-9
            && (spread_loss - expected_spread).abs() <= 1e-9
            && pair_terms == 153,
        format!(
            "equal {equal}, orthogonal {orth:.12} (target {:.12}), antipodal {anti:.6}, k={k} gives {pair_terms} pair terms",
            FRAC_PI_2 * FRAC_PI_2
        ),
    )
}

fn implicit_denoising() -> Outcome {
    let exp = robustness_experiment(&desk(), &Degradation::Gaussian { std: 25.0 }, &Protocol::default(), TRIALS, SEED)
        .map_err(|e| e.to_string())?;
    let wins = exp.stats.iter().filter(|s| s.denoised()).count();
    let ratio: f64 =
        exp.stats.iter().map(|s| s.output_to_clean / s.input_to_clean).sum::<f64>() / exp.stats.len() as f64;
    check(
        wins * 2 > exp.stats.len(),
        format!(
            "{wins}/{} trials with |DS(SR) - clean| < |noisy - clean| (need > 50%), mean ratio {ratio:.3}",
            exp.stats.len()
        ),
    )
}

fn multiplicity() -> Outcome {
    let spec = desk();
    let ds = build_downscaler(Kernel::Bicubic, spec.output_dims(), 4).map_err(|e| e.to_string())?;
    let (_, lr) = recovery_target(&spec, &ds, SEED).map_err(|e| e.to_string())?;
    let opt = OptimConfig {
        seed: derive_seed(SEED, 3),
        ..Default::default()
    };
    let runs = multi_restart(&lr, &spec, &ds, &Default::default(), &opt, 5).map_err(|e| e.to_string())?;
    let converged = runs.iter().filter(|r| r.converged && r.best_loss <= 1e-3).count();
    let mut min_diff = f64::INFINITY;
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            min_diff = min_diff.min(runs[i].image.max_abs_diff(&runs[j].image).map_err(|e| e.to_string())?);
        }
    }
    let worst = runs.iter().map(|r| r.best_loss).fold(0.0, f64::max);
    check(
        converged == 5 && min_diff > 0.01,
        format!("{converged}/5 restarts converged (worst loss {worst:.2e}), min pairwise max-abs diff {min_diff:.3} (need > 0.01)"),
    )
}

fn determinism() -> Outcome {
    let spec = desk();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let protocol = Protocol::default();
    let ds = protocol.resampler(&spec).map_err(|e| e.to_string())?;
    for (group, generated) in [("generated", true), ("noise", false)] {
        let gdir = dir.path().join(group);
        std::fs::create_dir(&gdir).map_err(|e| e.to_string())?;
        for i in 0..2u64 {
            let img = if generated {
                recovery_target(&spec, &ds, derive_seed(SEED, 50 + i)).map_err(|e| e.to_string())?.1
            } else {
                let mut r = rng(derive_seed(SEED, 60 + i));
                Image::from_planes(8, 8, 1, (0..64).map(|_| r.random::<f64>()).collect()).unwrap()
            };
            write_image(gdir.join(format!("{i}.pgm")), &img).map_err(|e| e.to_string())?;
        }
    }
    std::fs::create_dir(dir.path().join("empty")).map_err(|e| e.to_string())?;
    let first = success_rate(dir.path(), &spec, &protocol, 2).map_err(|e| e.to_string())?.to_csv();
    let second = success_rate(dir.path(), &spec, &protocol, 2).map_err(|e| e.to_string())?.to_csv();

    let wpath = dir.path().join("w.plsw");
    write_weights(&wpath, &spec).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&wpath).map_err(|e| e.to_string())?;
    let reloaded = read_weights(&wpath).map_err(|e| e.to_string())?;
    let weights_same = encode_weights(&reloaded).map_err(|e| e.to_string())? == bytes
        && encode_weights(&desk()).map_err(|e| e.to_string())? == bytes;

    let (hr, _) = recovery_target(&spec, &ds, SEED).map_err(|e| e.to_string())?;
    let pgm = encode_pnm(&hr);
    let pgm_same = encode_pnm(&decode_pnm(&pgm).map_err(|e| e.to_string())?) == pgm;

    check(
        first == second && weights_same && pgm_same,
        format!(
            "csv identical: {}, PLSW identical: {weights_same}, PGM identical: {pgm_same}; csv: {}",
            first == second,
            first.trim().replace('\n', " | ")
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("gradient correctness", gradient_correctness),
        ("sphere invariant", sphere_invariant),
        ("downscaler exactness", downscaler_exactness),
        ("recovery protocol", recovery),
        ("negative control", negative_control),
        ("soap-bubble statistic", soap_bubble),
        ("averaging property", averaging),
        ("geocross analytics", geocross_analytics),
        ("implicit denoising", implicit_denoising),
        ("restart multiplicity", multiplicity),
        ("harness and format determinism", determinism),
    ];
    let total = Instant::now();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("[{tag}] {:>2}. {name}: {detail} ({:.1} s)", i + 1, start.elapsed().as_secs_f64());
    }
    println!(
        "acceptance: {}/{} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        total.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
