use pulse_core::generator::{init_random_generator, LatentState};
use pulse_core::io::{
    decode_pnm, decode_weight_entries, decode_weights, encode_pnm, encode_weights, read_image, read_weights,
    write_image, write_weights,
};
use pulse_core::rng::rng;
use pulse_core::{GeneratorConfig, Image};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn weights_forward_pass_survives_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.plsw");
    let spec = init_random_generator(&GeneratorConfig::desk(), 17).unwrap();
    write_weights(&path, &spec).unwrap();
    let back = read_weights(&path).unwrap();
    for seed in 0..3 {
        let state = LatentState::sample(&spec, seed, 0);
        let a = spec.synthesize(&state).unwrap();
        let b = back.synthesize(&state).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn colour_generator_roundtrip() {
    let config = GeneratorConfig {
        image_channels: 3,
        styles: 4,
        widths: vec![8, 6],
        latent_dim: 16,
        ..GeneratorConfig::desk()
    };
    let spec = init_random_generator(&config, 2).unwrap();
    let bytes = encode_weights(&spec).unwrap();
    assert_eq!(decode_weights(&bytes).unwrap().config(), spec.config());
}

#[test]
fn entries_are_in_canonical_order() {
    let spec = init_random_generator(&GeneratorConfig::desk(), 1).unwrap();
    let entries = decode_weight_entries(&encode_weights(&spec).unwrap()).unwrap();
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names[..4], ["meta", "mapping.matrix", "mapping.bias", "synthesis.constant"]);
    assert_eq!(names.last(), Some(&"to_image.bias"));
    assert_eq!(names.len(), 1 + 3 + 7 * 6 + 2);
}

#[test]
fn every_truncation_is_an_explicit_error() {
    let spec = init_random_generator(&GeneratorConfig::desk(), 1).unwrap();
    let bytes = encode_weights(&spec).unwrap();
    let step = bytes.len() / 97;
    for cut in (0..bytes.len()).step_by(step.max(1)) {
        let err = decode_weights(&bytes[..cut]).unwrap_err().to_string();
        assert!(!err.is_empty());
    }
}

#[test]
fn singular_mapping_rejected_at_load() {
    let spec = init_random_generator(&GeneratorConfig::desk(), 1).unwrap();
    let mut bytes = encode_weights(&spec).unwrap();
    // mapping.matrix is the second entry; zero its payload.
    let entries = decode_weight_entries(&bytes).unwrap();
    let meta_len = 4 + 4 + 4 + 4 + 4 * entries[0].1.len();
    let start = 8 + meta_len + 4 + "mapping.matrix".len() + 4 + 8;
    let d = 64;
    bytes[start..start + 4 * d * d].fill(0);
    let err = decode_weights(&bytes).unwrap_err().to_string();
    assert!(err.contains("ill-conditioned"), "{err}");
}

#[test]
fn write_clamps_and_reads_scaled() {
    let img = Image::from_planes(1, 4, 1, vec![-0.5, 0.25, 0.75, 1.5]).unwrap();
    let back = decode_pnm(&encode_pnm(&img)).unwrap();
    assert_eq!(back.data(), &[0.0, 64.0 / 255.0, 191.0 / 255.0, 1.0]);
}

#[test]
fn files_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let img = Image::filled(5, 3, 3, 0.4);
    let p = dir.path().join("x.ppm");
    write_image(&p, &img).unwrap();
    let back = read_image(&p).unwrap();
    assert_eq!(back.dims(), (5, 3));
    assert_eq!(back.channels(), 3);
    assert!(read_image(dir.path().join("missing.pgm")).is_err());
}

proptest! {
    #[test]
    fn pnm_roundtrip_within_quantization(h in 1usize..9, w in 1usize..9, colour in any::<bool>(), seed in any::<u64>()) {
        let c = if colour { 3 } else { 1 };
        let mut r = rng(seed);
        let img = Image::from_planes(h, w, c, (0..h * w * c).map(|_| r.random()).collect()).unwrap();
        let bytes = encode_pnm(&img);
        let back = decode_pnm(&bytes).unwrap();
        prop_assert!(img.max_abs_diff(&back).unwrap() <= 1.0 / 510.0 + 1e-12);
        prop_assert_eq!(encode_pnm(&back), bytes);
    }

    #[test]
    fn pnm_parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let mut input = b"P5\n".to_vec();
        input.extend(bytes);
        let _ = decode_pnm(&input);
    }

    #[test]
    fn weight_parser_never_panics(tail in prop::collection::vec(any::<u8>(), 0..128)) {
        let mut input = b"PLSW\x01\0\0\0".to_vec();
        input.extend(tail);
        let _ = decode_weights(&input);
    }
}
