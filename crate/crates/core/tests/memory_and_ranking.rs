use cda_core::data::Label;
use cda_core::dsn::{domain_distances, CurriculumRanking, CurriculumSchedule};
use cda_core::memory::{build_memory_from_features, enhance, fuse_memory, MemoryModule};
use cda_core::par::ExecMode;
use proptest::prelude::*;

fn memory(live: Vec<f64>, spoof: Vec<f64>) -> MemoryModule {
    build_memory_from_features(&[(live, Label::Live), (spoof, Label::Spoof)], "test").unwrap()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[test]
fn two_by_two_centroids() {
    let feats = vec![
        (vec![1.0, 0.0], Label::Live),
        (vec![3.0, 0.0], Label::Live),
        (vec![0.0, 2.0], Label::Spoof),
        (vec![0.0, 4.0], Label::Spoof),
    ];
    let m = build_memory_from_features(&feats, "h").unwrap();
    assert_eq!(m.live(), &[2.0, 0.0]);
    assert_eq!(m.spoof(), &[0.0, 3.0]);
}

#[test]
fn coincident_centroids_make_fusion_constant() {
    let m = memory(vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0]);
    let ones = vec![1.0; 3];
    let a = enhance(&ones, &fuse_memory(&[3.0, -1.0], &m)).unwrap();
    let b = enhance(&ones, &fuse_memory(&[-7.0, 4.0], &m)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn single_source_point_gives_plain_distance() {
    let src = vec![vec![1.0, 2.0, 2.0]];
    let tgt = vec![vec![1.0, 2.0, 2.0], vec![0.0, 0.0, 0.0]];
    let d = domain_distances(&tgt, &src, ExecMode::Sequential);
    assert_eq!(d[0], 0.0);
    assert!((d[1] - 3.0).abs() < 1e-12);
}

#[test]
fn full_schedule_activates_everything_from_the_start() {
    let s = CurriculumSchedule::new(1.0, 3, 6).unwrap();
    assert!((0..6).all(|e| s.active_count(e, 17) == 17));
}

#[test]
fn ranking_puts_closest_first() {
    let r = CurriculumRanking::from_distances(vec![("far".into(), 3.0), ("near".into(), 0.5), ("mid".into(), 1.0)], 4);
    assert_eq!(r.ids().collect::<Vec<_>>(), ["near", "mid", "far"]);
}

fn vecs(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

proptest! {
    #[test]
    fn fusion_is_the_softmax_weighted_sum(
        y in prop::array::uniform2(-30.0f64..30.0),
        live in prop::collection::vec(-3.0f64..3.0, 5),
        spoof in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let m = memory(live.clone(), spoof.clone());
        let p_live = 1.0 / (1.0 + (y[1] - y[0]).exp());
        let z = fuse_memory(&y, &m);
        for k in 0..5 {
            let oracle = p_live * live[k] + (1.0 - p_live) * spoof[k];
            prop_assert!((z[k] - oracle).abs() < 1e-9);
        }
        // z_m lies on the segment between the centroids
        let gap = euclid(&live, &spoof);
        prop_assert!((euclid(&z, &live) + euclid(&z, &spoof) - gap).abs() < 1e-9);
    }

    #[test]
    fn centroids_match_brute_force_means(
        feats in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 8), any::<bool>()), 2..100),
    ) {
        let feats: Vec<(Vec<f64>, Label)> = feats
            .into_iter()
            .map(|(f, live)| (f, if live { Label::Live } else { Label::Spoof }))
            .collect();
        prop_assume!(feats.iter().any(|f| f.1 == Label::Live) && feats.iter().any(|f| f.1 == Label::Spoof));
        let m = build_memory_from_features(&feats, "h").unwrap();
        for label in Label::ALL {
            let group: Vec<&Vec<f64>> = feats.iter().filter(|f| f.1 == label).map(|f| &f.0).collect();
            for k in 0..8 {
                let mean = group.iter().map(|f| f[k]).sum::<f64>() / group.len() as f64;
                prop_assert!((m.row(label)[k] - mean).abs() <= 1e-6 * mean.abs().max(1.0));
            }
        }
    }

    #[test]
    fn distances_match_double_loop(tgt in vecs(1..20, 8), src in vecs(1..30, 8)) {
        let seq = domain_distances(&tgt, &src, ExecMode::Sequential);
        let par = domain_distances(&tgt, &src, ExecMode::Parallel);
        prop_assert_eq!(&seq, &par);
        for (t, d) in tgt.iter().zip(&seq) {
            let oracle = src.iter().map(|s| euclid(t, s)).sum::<f64>() / src.len() as f64;
            prop_assert!((d - oracle).abs() <= 1e-6 * oracle.max(1e-12));
        }
    }

    #[test]
    fn schedules_are_nested_and_end_full(f0 in 0.01f64..=1.0, ramp in 0usize..10, total in 1usize..15, n in 1usize..500) {
        let s = CurriculumSchedule::new(f0, ramp, total).unwrap();
        let counts: Vec<usize> = (0..total).map(|e| s.active_count(e, n)).collect();
        prop_assert!(counts.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(counts[0] >= 1);
        prop_assert_eq!(*counts.last().unwrap(), n);
    }
}
