use super::*;
use proptest::prelude::*;

fn small_spec(n: usize, seed: u64) -> DatasetSpec {
    DatasetSpec::new(EnvConfig::distractor_grid(), n, Policy::pretrain_default(), seed)
}

#[test]
fn roundtrip_100_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&small_spec(100, 3)).unwrap();
    assert_eq!(ds.manifest.counts.transitions, 100);
    write_dataset(&ds, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back, ds);
    for (a, b) in ds.iter().zip(back.iter()) {
        assert_eq!(a, b);
    }
    let obs_len = std::fs::metadata(dir.path().join("obs.bin")).unwrap().len();
    assert_eq!(obs_len as usize, 100 * 2 * 32 * 32 * 3);
}

#[test]
fn continuous_actions_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = DatasetSpec::new(EnvConfig::point_mass(), 40, Policy::UniformRandom, 5);
    let m = generate_dataset(&spec, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, m);
    assert!(matches!(back.actions[0], Action::Continuous(..)));
    assert_eq!(std::fs::metadata(dir.path().join("actions.bin")).unwrap().len(), 40 * 8);
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_dataset(&small_spec(60, 9), a.path()).unwrap();
    generate_dataset(&small_spec(60, 9), b.path()).unwrap();
    for f in ["manifest.json", "obs.bin", "flow_rgb.bin", "flow_uv.bin", "masks.bin", "actions.bin", "episodes.bin"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn truncated_obs_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small_spec(20, 1), dir.path()).unwrap();
    let p = dir.path().join("obs.bin");
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 10]).unwrap();
    match read_dataset(dir.path()) {
        Err(Error::Corruption { file, .. }) => assert!(file.ends_with("obs.bin")),
        other => panic!("expected corruption error, got {other:?}"),
    }
}

#[test]
fn transitions_are_consecutive_frames() {
    let ds = Dataset::generate(&small_spec(200, 4)).unwrap();
    for e in 0..ds.manifest.counts.episodes {
        let r = ds.episode_range(e);
        for i in r.start..r.end - 1 {
            assert_eq!(ds.next_obs(i), ds.obs(i + 1));
        }
    }
}

#[test]
fn flow_rgb_is_masked_to_the_agent() {
    let ds = Dataset::generate(&small_spec(50, 2)).unwrap();
    for t in ds.iter() {
        for (p, &m) in t.flow_rgb.data.chunks(3).zip(&t.mask.data) {
            if m == 0 {
                assert_eq!(p, [0, 0, 0]);
            }
        }
    }
}

#[test]
fn out_of_order_episodes_rejected() {
    let c = EnvConfig::distractor_grid();
    let ds = Dataset::generate(&small_spec(30, 2)).unwrap();
    let mut ts: Vec<Transition> = ds.iter().collect();
    ts.swap(0, 1);
    assert!(Dataset::from_transitions(&c, ts.into_iter().map(Ok), 0.2, 0).is_err());
}

#[test]
fn ratio_one_labels_everything_and_one_percent_counts() {
    let train: Vec<usize> = (0..20_000).collect();
    let (l, u) = split_action_ratio(&train, 1.0, 0).unwrap();
    assert_eq!(l.len(), 20_000);
    assert!(u.is_empty());
    let (l, u) = split_action_ratio(&train, 0.01, 0).unwrap();
    assert_eq!(l.len(), 200);
    assert_eq!(u.len(), 19_800);
    for bad in [0.0, -0.1, 1.5, f64::NAN] {
        assert!(split_action_ratio(&train, bad, 0).is_err());
    }
}

#[test]
fn labeled_overlap_matches_hypergeometric() {
    // two independent draws of m from n overlap by m^2/n in expectation
    let n = 20_000usize;
    let train: Vec<usize> = (0..n).collect();
    let ratio = 0.3;
    let m = (ratio * n as f64).round();
    let mean = m * m / n as f64;
    let var = mean * (1.0 - m / n as f64) * (n as f64 - m) / (n as f64 - 1.0);
    for seed in 0..5u64 {
        let (a, _) = split_action_ratio(&train, ratio, seed).unwrap();
        let (b, _) = split_action_ratio(&train, ratio, seed + 100).unwrap();
        let set: std::collections::HashSet<_> = a.iter().collect();
        let overlap = b.iter().filter(|x| set.contains(x)).count() as f64;
        assert!((overlap - mean).abs() <= 3.0 * var.sqrt(), "overlap {overlap}, expected {mean}");
    }
}

#[test]
fn batches_cover_split() {
    let ids: Vec<usize> = (0..10).collect();
    let sizes: Vec<usize> = batch_iterator(&ids, 4, 1, 0).unwrap().map(|b| b.len()).collect();
    assert_eq!(sizes, [4, 4, 2]);
    let mut all: Vec<usize> = batch_iterator(&ids, 4, 1, 0).unwrap().flatten().collect();
    all.sort_unstable();
    assert_eq!(all, ids);
    let a: Vec<_> = batch_iterator(&ids, 3, 5, 2).unwrap().collect();
    let b: Vec<_> = batch_iterator(&ids, 3, 5, 2).unwrap().collect();
    assert_eq!(a, b);
    assert!(batch_iterator(&ids, 0, 1, 0).is_err());
    assert!(batch_iterator(&[], 4, 1, 0).is_err());
}

#[test]
fn manifest_records_requested_ratio_splits() {
    let mut spec = small_spec(120, 8);
    spec.ratios = vec![0.1, 0.5];
    spec.ratio_seeds = vec![0, 1];
    let ds = Dataset::generate(&spec).unwrap();
    assert_eq!(ds.manifest.ratios.len(), 4);
    let train = ds.train_ids();
    for r in &ds.manifest.ratios {
        assert_eq!(r.labeled.len(), (r.ratio * train.len() as f64).round() as usize);
    }
}

proptest! {
    #[test]
    fn ratio_split_partitions_train(n in 1usize..400, ratio in 0.001f64..=1.0, seed in any::<u64>()) {
        let train: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let (l, u) = split_action_ratio(&train, ratio, seed).unwrap();
        let mut all = [l.clone(), u.clone()].concat();
        all.sort_unstable();
        prop_assert_eq!(&all, &train);
        prop_assert!((l.len() as f64 - ratio * n as f64).abs() <= 0.5 + 1e-9);
        // lambda from the split reproduces the ratio
        let lambda = l.len() as f64 / (l.len() + u.len()) as f64;
        prop_assert!((lambda - ratio).abs() <= 1.0 / n as f64);
    }

    #[test]
    fn episode_splits_are_disjoint_and_exhaustive(e in 1usize..200, frac in 0.0f64..0.9, seed in any::<u64>()) {
        let s = split_episodes(e, frac, seed);
        let mut all = [s.train.clone(), s.test.clone()].concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..e as u32).collect::<Vec<_>>());
    }
}
