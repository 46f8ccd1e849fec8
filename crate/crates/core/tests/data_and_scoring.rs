use std::fs;

use cda_core::config::ArchConfig;
use cda_core::data::{generate_synthetic, iterate_batches, write_synthetic, Split, SyntheticSpec};
use cda_core::metrics::{score_model, ScoringNet};
use cda_core::networks::{init_target_from_source, ModelBundle};
use cda_core::par::ExecMode;

fn spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_subdomains: 3,
        samples_per_subdomain: 12,
        base_seed: seed,
        source_train: 10,
        source_val: 4,
        flat_dim: Some(5),
        ..SyntheticSpec::default()
    }
}

#[test]
fn regeneration_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_synthetic(&spec(7), a.path()).unwrap();
    write_synthetic(&spec(7), b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let (pa, pb) = (a.path().join(&name), b.path().join(&name));
        if pa.is_file() {
            assert_eq!(fs::read(&pa).unwrap(), fs::read(&pb).unwrap(), "{name:?} differs");
        }
    }
}

#[test]
fn batch_sizes_and_replay() {
    let (source, _) = generate_synthetic(&spec(1)).unwrap();
    let active: Vec<usize> = (0..10).collect();
    let sizes: Vec<usize> = iterate_batches(&source, 4, 3, Some(&active)).unwrap().map(|b| b.len()).collect();
    assert_eq!(sizes, [4, 4, 2]);
    let first: Vec<_> = iterate_batches(&source, 4, 3, Some(&active)).unwrap().collect();
    let again: Vec<_> = iterate_batches(&source, 4, 3, Some(&active)).unwrap().collect();
    assert_eq!(first, again);
    assert_eq!(iterate_batches(&source, 16, 0, Some(&[0, 1, 2])).unwrap().count(), 1);
}

#[test]
fn scores_are_probabilities_and_repeatable() {
    let (source, target) = generate_synthetic(&spec(2)).unwrap();
    let arch = ArchConfig::for_input(source.shape());
    let mut n = 0;
    for seed in 0..30 {
        let bundle = init_target_from_source(ModelBundle::new(arch.clone(), seed).unwrap()).unwrap();
        let run = |mode| score_model(&bundle, None, ScoringNet::Target, &target, Split::Test, 32, mode).unwrap();
        let a = run(ExecMode::Parallel);
        assert_eq!(a, run(ExecMode::Sequential));
        for s in &a.samples {
            assert!((0.0..=1.0).contains(&s.score));
            n += 1;
        }
    }
    assert!(n >= 300);
}
