//! Cube handling, split sampling, synthetic scenes and accuracy metrics.

use fcspn_core::data::{
    nearest_centroid_oa, render_scene, sample_split, synth_scene, voronoi_labels, HsiCube, LabelMap, SplitCell,
    SplitMask, SplitStrategy, SynthSpec,
};
use fcspn_core::metrics::{aa, confusion, kappa, oa, ConfusionMatrix, Report};
use fcspn_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn labels(rows: usize, cols: usize, ids: Vec<u16>, classes: usize) -> LabelMap {
    LabelMap::new(rows, cols, ids, LabelMap::default_names(classes)).unwrap()
}

#[test]
fn normalize_examples() {
    let cube = HsiCube::from_vec(2, 1, 3, vec![2.0, 4.0, 6.0, 7.0, 7.0, 7.0]).unwrap();
    let n = cube.normalize();
    assert_eq!(n.values().data(), &[0.0, 0.5, 1.0, 0.0, 0.0, 0.0]);
    assert_eq!(n.normalize(), n);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data: Vec<f64> = (0..5 * 6 * 7).map(|_| rng.random_range(-50.0..80.0)).collect();
    let n = HsiCube::from_vec(5, 6, 7, data).unwrap().normalize();
    assert!(n.values().data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    assert_eq!(n.normalize(), n);
}

/// Label map with `sizes[k]` pixels of class `k + 1` followed by unlabeled padding.
fn class_blocks(sizes: &[usize]) -> LabelMap {
    let total: usize = sizes.iter().sum();
    let cols = 100;
    let rows = total.div_ceil(cols) + 1;
    let mut ids = Vec::with_capacity(rows * cols);
    for (k, &n) in sizes.iter().enumerate() {
        ids.extend(std::iter::repeat_n(k as u16 + 1, n));
    }
    ids.resize(rows * cols, 0);
    labels(rows, cols, ids, sizes.len())
}

fn check_split(l: &LabelMap, split: &SplitMask) {
    split.check_against(l).unwrap();
    for (&cell, &id) in split.cells().iter().zip(l.ids()) {
        assert_eq!(cell == SplitCell::Unlabeled, id == 0);
    }
}

#[test]
fn per_class_split_counts() {
    let l = class_blocks(&[2000, 20, 46, 300, 9]);
    let split = sample_split(&l, &SplitStrategy::per_class(200), 7).unwrap();
    check_split(&l, &split);
    assert_eq!(split.class_counts(&l, SplitCell::Train), [200, 4, 10, 200, 2]);
    assert_eq!(split.class_counts(&l, SplitCell::Test), [1800, 16, 36, 100, 7]);

    let mut overrides = std::collections::BTreeMap::new();
    overrides.insert(2, 10);
    let strategy = SplitStrategy::PerClass { n: 200, overrides };
    let split = sample_split(&l, &strategy, 7).unwrap();
    assert_eq!(split.class_counts(&l, SplitCell::Train)[1], 10);
}

#[test]
fn indian_pines_small_classes() {
    let mut sizes = vec![500; 16];
    for (class, n) in [(1, 46), (7, 28), (9, 20), (16, 93)] {
        sizes[class - 1] = n;
    }
    let l = class_blocks(&sizes);
    let split = sample_split(&l, &SplitStrategy::indian_pines(), 0).unwrap();
    let train = split.class_counts(&l, SplitCell::Train);
    assert_eq!([train[0], train[6], train[8], train[15]], [10, 6, 10, 9]);
    assert_eq!(train[1], 200);
}

#[test]
fn fraction_split_counts() {
    let l = class_blocks(&[100, 37, 1, 250]);
    let split = sample_split(&l, &SplitStrategy::Fraction(0.05), 3).unwrap();
    check_split(&l, &split);
    assert_eq!(split.class_counts(&l, SplitCell::Train), [5, 2, 1, 13]);
    let again = sample_split(&l, &SplitStrategy::Fraction(0.05), 3).unwrap();
    assert_eq!(split, again);
    let other = sample_split(&l, &SplitStrategy::Fraction(0.05), 4).unwrap();
    assert_ne!(split, other);
}

#[test]
fn split_preconditions() {
    let l = labels(1, 4, vec![1, 1, 0, 1], 2);
    assert_eq!(
        sample_split(&l, &SplitStrategy::per_class(5), 0),
        Err(Error::EmptyClass(2))
    );
    let ok = class_blocks(&[10]);
    assert!(sample_split(&ok, &SplitStrategy::Fraction(0.0), 0).is_err());
    assert!(sample_split(&ok, &SplitStrategy::per_class(0), 0).is_err());
    assert!(LabelMap::new(1, 2, vec![1, 3], LabelMap::default_names(2)).is_err());
}

#[test]
fn synthetic_scenes() {
    let (cube, l) = synth_scene(&SynthSpec::default()).unwrap();
    assert_eq!((cube.bands(), cube.rows(), cube.cols()), (20, 32, 32));
    assert!(l.ids().iter().all(|&id| (1..=3).contains(&id)));
    assert!(nearest_centroid_oa(&cube, &l).unwrap() > 0.99);
    assert_eq!(synth_scene(&SynthSpec::default()).unwrap(), (cube, l));

    let spec = SynthSpec {
        noise: 0.0,
        seed: 5,
        ..SynthSpec::default()
    };
    let (cube, l) = synth_scene(&spec).unwrap();
    let mut first: Vec<Option<Vec<f64>>> = vec![None; 3];
    for i in 0..32 {
        for j in 0..32 {
            let k = l.ids()[i * 32 + j] as usize - 1;
            let s = cube.spectrum(i, j);
            match &first[k] {
                Some(f) => assert_eq!(f, &s),
                None => first[k] = Some(s),
            }
        }
    }

    let noisy = SynthSpec {
        noise: 10.0,
        ..SynthSpec::default()
    };
    let (cube, l) = synth_scene(&noisy).unwrap();
    assert!(nearest_centroid_oa(&cube, &l).unwrap() < 0.9);

    let one = SynthSpec {
        classes: 1,
        ..SynthSpec::default()
    };
    assert!(synth_scene(&one).is_err());
}

#[test]
fn identical_signatures_are_indistinguishable() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut ids = voronoi_labels(2, 64, 64, &mut rng).unwrap();
    // Balance the regions: left half class 1, right half class 2.
    for (p, id) in ids.iter_mut().enumerate() {
        *id = if p % 64 < 32 { 1 } else { 2 };
    }
    let sig = vec![(0..20).map(|b| 0.3 + 0.01 * b as f64).collect::<Vec<_>>(); 2];
    let cube = render_scene(&ids, 64, 64, &sig, 0.05, &mut rng).unwrap();
    let oa = nearest_centroid_oa(&cube, &labels(64, 64, ids, 2)).unwrap();
    assert!((oa - 0.5).abs() < 0.05, "oa {oa}");
}

fn hand_maps() -> (LabelMap, LabelMap) {
    let mut r = Vec::new();
    let mut p = Vec::new();
    for (rv, pv, n) in [(1, 1, 45), (1, 2, 5), (2, 1, 10), (2, 2, 40)] {
        r.extend(std::iter::repeat_n(rv, n));
        p.extend(std::iter::repeat_n(pv, n));
    }
    (labels(10, 10, p, 2), labels(10, 10, r, 2))
}

#[test]
fn confusion_hand_case() {
    let (pred, reference) = hand_maps();
    let test = SplitMask::uniform(&reference, SplitCell::Test);
    let cm = confusion(&pred, &reference, &test, false).unwrap();
    assert_eq!(cm.counts(), &[45, 5, 10, 40]);
    assert_eq!(oa(&cm).unwrap(), 0.85);
    assert!((kappa(&cm).unwrap() - 0.70).abs() <= 1e-12);

    let cm = confusion(&reference, &reference, &test, false).unwrap();
    assert_eq!(cm.counts(), &[50, 0, 0, 50]);

    let train = SplitMask::uniform(&reference, SplitCell::Train);
    assert!(confusion(&pred, &reference, &train, false).is_err());
    assert_eq!(confusion(&pred, &reference, &train, true).unwrap().total(), 100);

    let bad = labels(10, 10, vec![0; 100], 2);
    assert!(matches!(
        confusion(&bad, &reference, &test, false),
        Err(Error::LabelOutOfRange { .. })
    ));
    let small = labels(5, 20, reference.ids().to_vec(), 2);
    assert!(confusion(&small, &reference, &test, false).is_err());
}

#[test]
fn confusion_counts_only_test_pixels() {
    let (pred, reference) = hand_maps();
    let cells = (0..100)
        .map(|p| if p % 2 == 0 { SplitCell::Train } else { SplitCell::Test })
        .collect();
    let split = SplitMask::new(10, 10, cells).unwrap();
    let cm = confusion(&pred, &reference, &split, false).unwrap();
    assert_eq!(cm.total(), 50);
}

#[test]
fn random_predictions_have_near_zero_kappa() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 4;
        let r: Vec<u16> = (0..10_000).map(|_| rng.random_range(1..=c)).collect();
        let p: Vec<u16> = (0..10_000).map(|_| rng.random_range(1..=c)).collect();
        let reference = labels(100, 100, r, c as usize);
        let pred = labels(100, 100, p, c as usize);
        let cm = confusion(
            &pred,
            &reference,
            &SplitMask::uniform(&reference, SplitCell::Test),
            false,
        )
        .unwrap();
        let k = kappa(&cm).unwrap();
        assert!(k.abs() < 0.05, "seed {seed}: kappa {k}");
    }
}

#[test]
fn metric_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..200 {
        let c = rng.random_range(2..=5);
        let counts: Vec<u64> = (0..c * c)
            .map(|i| {
                if i % (c + 1) == 0 {
                    rng.random_range(5..50)
                } else {
                    rng.random_range(0..10)
                }
            })
            .collect();
        let cm = ConfusionMatrix::from_counts(c, counts.clone()).unwrap();
        let (o, k) = (oa(&cm).unwrap(), kappa(&cm).unwrap());
        assert!(k <= o + 1e-15 && o <= 1.0);

        let perm: Vec<usize> = (0..c).rev().collect();
        let mut permuted = vec![0; c * c];
        for r in 0..c {
            for p in 0..c {
                permuted[perm[r] * c + perm[p]] = counts[r * c + p];
            }
        }
        let pk = kappa(&ConfusionMatrix::from_counts(c, permuted).unwrap()).unwrap();
        assert!((pk - k).abs() < 1e-14);
    }
    let diag = ConfusionMatrix::from_counts(3, vec![3, 0, 0, 0, 9, 0, 0, 0, 2]).unwrap();
    assert_eq!(
        (oa(&diag).unwrap(), aa(&diag).unwrap(), kappa(&diag).unwrap()),
        (1.0, 1.0, 1.0)
    );
    assert!(oa(&ConfusionMatrix::new(2)).is_err());
    let degenerate = ConfusionMatrix::from_counts(2, vec![3, 2, 0, 0]).unwrap();
    assert!(kappa(&degenerate).is_ok());
    let single = ConfusionMatrix::from_counts(2, vec![0, 4, 0, 0]).unwrap();
    assert_eq!(kappa(&single).unwrap(), 0.0);
    let constant = ConfusionMatrix::from_counts(2, vec![4, 0, 0, 0]).unwrap();
    assert_eq!(kappa(&constant).unwrap(), 1.0);
}

#[test]
fn report_rows_follow_class_order() {
    let (pred, reference) = hand_maps();
    let cm = confusion(
        &pred,
        &reference,
        &SplitMask::uniform(&reference, SplitCell::Test),
        false,
    )
    .unwrap();
    let names = vec!["Corn".to_string(), "Oats".to_string()];
    let r = Report::new(&cm, &names).unwrap();
    assert_eq!(r.classes.len(), 2);
    assert_eq!((r.classes[0].class_id, r.classes[0].name.as_str()), (1, "Corn"));
    assert!((r.classes[0].accuracy - 90.0).abs() < 1e-10);
    assert!((r.classes[1].accuracy - 80.0).abs() < 1e-10);
    assert!((r.oa - 85.0).abs() < 1e-10);
    assert!((r.aa - 85.0).abs() < 1e-10);
    assert!((r.kappa - 70.0).abs() < 1e-10);
    assert!(Report::new(&cm, &names[..1]).is_err());
}
