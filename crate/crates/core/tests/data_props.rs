use oescn::data::{
    accuracy_stats, inter_subject_std, kfold_split, load_dataset, save_dataset, stratified_kfold, synth_dataset,
    Dataset, FoldPlan, SynthSpec,
};
use oescn::signal::{welch_psd, WelchConfig};
use proptest::prelude::*;

fn tiny_spec(classes: usize, trials: usize) -> SynthSpec {
    SynthSpec::with_default_signatures(classes, trials, 3, 400, 1000.0)
}

fn assert_partition(plan: &FoldPlan, n: usize) {
    let mut seen = plan.assignment();
    assert_eq!(seen.len(), n);
    for f in 0..plan.k {
        for &i in plan.validation(f) {
            assert_eq!(seen[i], f);
            seen[i] = usize::MAX;
        }
        let train = plan.training(f);
        assert_eq!(train.len() + plan.validation(f).len(), n);
        assert!(train.iter().all(|i| !plan.validation(f).contains(i)));
    }
    assert!(seen.iter().all(|&s| s == usize::MAX));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kfold_is_a_balanced_partition(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let plan = kfold_split(n, k, seed).unwrap();
        assert_partition(&plan, n);
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(kfold_split(n, k, seed).unwrap(), plan);
    }

    #[test]
    fn stratified_folds_balance_every_class(
        labels in prop::collection::vec(0usize..5, 10..120),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let plan = stratified_kfold(&labels, k, seed).unwrap();
        assert_partition(&plan, labels.len());
        for c in 0..5 {
            let per: Vec<usize> = plan.folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == c).count()).collect();
            let (lo, hi) = (per.iter().min().unwrap(), per.iter().max().unwrap());
            prop_assert!(hi - lo <= 1, "class {} spread {:?}", c, per);
        }
        let csv = plan.to_csv(&labels);
        // The CSV records assignments only, not the seed or split kind.
        prop_assert_eq!(FoldPlan::from_csv(&csv).unwrap().folds, plan.folds);
    }

    #[test]
    fn stats_ignore_order(mut v in prop::collection::vec(0.0f64..1.0, 2..20), rot in 0usize..20) {
        let (m, s) = accuracy_stats(&v).unwrap();
        let len = v.len();
        v.rotate_left(rot % len);
        v.reverse();
        let (m2, s2) = accuracy_stats(&v).unwrap();
        prop_assert!((m - m2).abs() < 1e-12 && (s - s2).abs() < 1e-12);
        prop_assert!((inter_subject_std(&v).unwrap() - s).abs() < 1e-12);
        prop_assert!(s >= 0.0);
    }

    #[test]
    fn constant_accuracies_have_zero_spread(v in 0.0f64..1.0, n in 1usize..12) {
        let (m, s) = accuracy_stats(&vec![v; n]).unwrap();
        prop_assert!((m - v).abs() < 1e-12);
        prop_assert!(s.abs() < 1e-12);
    }

    #[test]
    fn dataset_bytes_round_trip(classes in 1usize..4, trials in 1usize..4, seed in any::<u64>()) {
        let d = synth_dataset(&tiny_spec(classes, trials), seed).unwrap();
        let bytes = d.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, d);
    }
}

#[test]
fn synthesis_is_deterministic_per_seed() {
    let spec = tiny_spec(3, 4);
    let a = synth_dataset(&spec, 11).unwrap();
    assert_eq!(a, synth_dataset(&spec, 11).unwrap());
    assert_ne!(a.trials[0].samples, synth_dataset(&spec, 12).unwrap().trials[0].samples);
    assert_eq!(a.class_counts(), vec![4, 4, 4]);
}

#[test]
fn dataset_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let d = synth_dataset(&tiny_spec(2, 2), 5).unwrap();
    save_dataset(&d, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), d);
    let bytes = std::fs::read(&path).unwrap();
    assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut bad = bytes.clone();
    bad[..8].copy_from_slice(b"NOTADSET");
    assert!(Dataset::from_bytes(&bad).is_err());
}

#[test]
fn full_size_preset_dimensions() {
    let s = SynthSpec::paper_shape();
    assert_eq!((s.n_classes, s.trials_per_class, s.channels, s.len), (13, 35, 30, 10000));
    assert_eq!(s.n_classes * s.trials_per_class, 455);
    s.validate().unwrap();
}

#[test]
fn default_classes_are_separable_by_nearest_centroid() {
    // 13 classes with the default signatures; log-PSD centroids from the
    // training half classify the held-out half.
    let spec = SynthSpec::with_default_signatures(13, 12, 8, 2000, 1000.0);
    let d = synth_dataset(&spec, 2024).unwrap();
    let cfg = WelchConfig::default();
    let feats: Vec<Vec<f64>> = d
        .trials
        .iter()
        .map(|t| welch_psd(t, &cfg).unwrap().values.as_slice().iter().map(|v| v.ln_1p()).collect())
        .collect();
    let plan = stratified_kfold(&d.labels(), 2, 7).unwrap();
    let (train, test) = (plan.training(0), plan.validation(0).to_vec());
    let dim = feats[0].len();
    let mut centroids = vec![vec![0.0; dim]; 13];
    let mut counts = [0usize; 13];
    for &i in &train {
        let l = d.trials[i].label;
        counts[l] += 1;
        centroids[l].iter_mut().zip(&feats[i]).for_each(|(c, f)| *c += f);
    }
    for (c, n) in centroids.iter_mut().zip(counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let correct = test
        .iter()
        .filter(|&&i| {
            let best = (0..13)
                .min_by(|&a, &b| dist(&feats[i], &centroids[a]).total_cmp(&dist(&feats[i], &centroids[b])))
                .unwrap();
            best == d.trials[i].label
        })
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.8, "nearest-centroid accuracy {acc}");
}
