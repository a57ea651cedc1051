use std::fs;
use std::path::Path;

use pulse_core::bench::{recovery_experiment, recovery_target, robustness_experiment, success_rate, Protocol};
use pulse_core::generator::init_random_generator;
use pulse_core::image::Degradation;
use pulse_core::io::write_image;
use pulse_core::rng::rng;
use pulse_core::{Execution, GeneratorConfig, GeneratorSpec, Image, OptimConfig};
use rand::Rng;

fn small() -> GeneratorSpec {
    let config = GeneratorConfig {
        latent_dim: 16,
        styles: 4,
        widths: vec![8, 6],
        ..GeneratorConfig::desk()
    };
    init_random_generator(&config, 3).unwrap()
}

fn quick(restarts: usize) -> Protocol {
    Protocol {
        optim: OptimConfig {
            steps: 30,
            restarts,
            seed: 9,
            execution: Execution::Sequential,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn dataset(root: &Path, spec: &GeneratorSpec) {
    let protocol = quick(1);
    let ds = protocol.resampler(spec).unwrap();
    let (h, w) = ds.lr_dims();
    for g in ["a_generated", "b_noise", "c_empty"] {
        fs::create_dir(root.join(g)).unwrap();
    }
    for i in 0..3u64 {
        let lr = recovery_target(spec, &ds, 100 + i).unwrap().1;
        write_image(root.join("a_generated").join(format!("{i}.pgm")), &lr).unwrap();
        let mut r = rng(200 + i);
        let noise = Image::from_planes(h, w, 1, (0..h * w).map(|_| r.random()).collect()).unwrap();
        write_image(root.join("b_noise").join(format!("{i}.pgm")), &noise).unwrap();
    }
    fs::write(root.join("b_noise").join("broken.pgm"), b"P5\n4 4\n255\n").unwrap();
    write_image(root.join("b_noise").join("wrong_size.pgm"), &Image::filled(3, 3, 1, 0.5)).unwrap();
}

#[test]
fn success_rate_controls_and_reporting() {
    let spec = small();
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), &spec);
    let report = success_rate(dir.path(), &spec, &quick(1), 3).unwrap();
    let a = report.row("a_generated").unwrap();
    let b = report.row("b_noise").unwrap();
    let c = report.row("c_empty").unwrap();
    assert_eq!((a.attempts, b.attempts, c.attempts), (3, 3, 0));
    assert_eq!(a.runs, 9);
    assert!(a.rate().unwrap() > b.rate().unwrap(), "{}", report.to_table());
    assert_eq!(c.rate(), None);
    assert!(report.to_csv().contains("c_empty,0,0,n/a"));
    assert_eq!(report.skipped.len(), 2);
    let reasons: Vec<String> = report.skipped.iter().map(|s| s.path.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(reasons, ["broken.pgm", "wrong_size.pgm"]);
    let again = success_rate(dir.path(), &spec, &quick(1), 3).unwrap();
    assert_eq!(again, report);
}

#[test]
fn more_restarts_never_lower_the_rate() {
    let spec = small();
    let dir = tempfile::tempdir().unwrap();
    dataset(dir.path(), &spec);
    let few = success_rate(dir.path(), &spec, &quick(1), 1).unwrap();
    let many = success_rate(dir.path(), &spec, &quick(1), 4).unwrap();
    for (f, m) in few.rows.iter().zip(&many.rows) {
        assert!(m.successes >= f.successes, "{}: {} < {}", f.group, m.successes, f.successes);
    }
}

#[test]
fn zero_noise_robustness_reduces_to_recovery() {
    let spec = small();
    let protocol = quick(2);
    let plain = recovery_experiment(&spec, &protocol, 3, 5).unwrap();
    let robust = robustness_experiment(&spec, &Degradation::Gaussian { std: 0.0 }, &protocol, 3, 5).unwrap();
    assert_eq!(robust.stats.len(), 3);
    for (a, b) in plain.trials.iter().zip(&robust.experiment.trials) {
        assert_eq!(a.best().best_loss, b.best().best_loss);
        assert_eq!(a.best().image, b.best().image);
    }
    assert!(robust.stats.iter().all(|s| s.input_to_clean == 0.0));
    assert_eq!(plain.report.rows[0].successes, robust.experiment.report.rows[0].successes);
}

#[test]
fn parallel_and_sequential_agree() {
    let spec = small();
    let seq = recovery_experiment(&spec, &quick(2), 3, 1).unwrap();
    let mut par = quick(2);
    par.optim.execution = Execution::Parallel;
    let par = recovery_experiment(&spec, &par, 3, 1).unwrap();
    assert_eq!(seq.report, par.report);
    for (a, b) in seq.trials.iter().zip(&par.trials) {
        let la: Vec<f64> = a.runs.iter().map(|r| r.best_loss).collect();
        let lb: Vec<f64> = b.runs.iter().map(|r| r.best_loss).collect();
        assert_eq!(la, lb);
    }
}

#[test]
fn empty_experiment() {
    let exp = recovery_experiment(&small(), &quick(1), 0, 1).unwrap();
    assert_eq!(exp.report.rows[0].attempts, 0);
    assert_eq!(exp.report.rows[0].rate(), None);
}
