use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use colearn_core::clinical::read_clinical_csv;
use colearn_core::dataset::{read_labels_csv, PreprocessConfig};
use colearn_core::evalmetrics::auc;
use colearn_core::gbdt::GbdtConfig;
use colearn_core::network::NetworkConfig;
use colearn_core::phantom::{
    generate_phantom_dataset, read_manifest, split_dataset, subject_dir, subject_id, PhantomConfig, Preset,
};
use colearn_core::pipeline::{crossval, mask_bbox, CrossvalConfig, RunConfig};
use colearn_core::train::TrainConfig;
use colearn_core::volume::read_volume;

/// Every file below `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn small(n: usize, seed: u64) -> PhantomConfig {
    PhantomConfig {
        n_subjects: n,
        side: 16,
        nodule_radius_min: 1.5,
        nodule_radius_max: 2.5,
        seed,
        ..PhantomConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_bytes() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_phantom_dataset(&small(12, 4), a.path()).unwrap();
    generate_phantom_dataset(&small(12, 4), b.path()).unwrap();
    generate_phantom_dataset(&small(12, 5), c.path()).unwrap();
    let snap = snapshot(a.path());
    assert_eq!(snap.len(), 3 + 12 * 6);
    assert_eq!(snap, snapshot(b.path()));
    assert_ne!(snap, snapshot(c.path()));
}

#[test]
fn balanced_labels_are_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        class_balance: 0.5,
        ..small(100, 1)
    };
    let m = generate_phantom_dataset(&cfg, dir.path()).unwrap();
    let labels = read_labels_csv(dir.path().join("labels.csv")).unwrap();
    let positives = labels.values().filter(|&&l| l == 1).count();
    assert_eq!((positives, labels.len() - positives), (50, 50));
    assert!(m.subjects.iter().all(|s| labels[&s.subject_id] == s.label));
}

#[test]
fn nodule_intensity_alone_separates_the_classes() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_phantom_dataset(&PhantomConfig::default(), dir.path()).unwrap();
    let hu: Vec<f64> = m.subjects.iter().map(|s| s.nodule_mean_hu).collect();
    let y: Vec<u8> = m.subjects.iter().map(|s| s.label).collect();
    let a = auc(&hu, &y).unwrap();
    assert!(a >= 0.95, "auc {a}");
}

#[test]
fn masks_are_the_planted_voxels() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_phantom_dataset(&small(10, 2), dir.path()).unwrap();
    for s in &m.subjects {
        let mask = read_volume(subject_dir(dir.path(), &s.subject_id).join("nodule_mask.mvol.json")).unwrap();
        assert_eq!(mask.count_nonzero(), s.nodule_voxels);
        assert_eq!(mask_bbox(&mask), Some(s.nodule_bbox));
        // Every mask voxel lies within the perturbed ellipsoid's reach of the planted center.
        let reach = s.nodule_radii.iter().cloned().fold(0.0, f64::max) * (1.0 + s.spiculation);
        for (i, &v) in mask.data().iter().enumerate() {
            if v == 1.0 {
                let p = [i / 256, (i / 16) % 16, i % 16];
                let d2: f64 = (0..3).map(|a| (p[a] as f64 - s.nodule_center[a]).powi(2)).sum();
                assert!(d2.sqrt() <= reach + 1e-9);
            }
        }
    }
}

#[test]
fn clinical_means_follow_their_configured_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig {
        class_balance: 0.5,
        ..small(600, 8)
    };
    generate_phantom_dataset(&cfg, dir.path()).unwrap();
    let recs = read_clinical_csv(dir.path().join("clinical.csv")).unwrap();
    let fx = cfg.clinical_effects;
    // (name, accessor, base mean, sd, malignant shift in sd units)
    type Get = fn(&colearn_core::clinical::ClinicalRecord) -> Option<f64>;
    let features: [(&str, Get, f64, f64, f64); 4] = [
        ("bmi", |r| Some(r.bmi), 27.5, 6.5, fx.bmi),
        ("age_started_smoking", |r| r.age_started_smoking, 19.4, 7.5, fx.age_started_smoking),
        ("cigs_per_day", |r| r.cigs_per_day, 26.9, 14.2, fx.cigs_per_day),
        ("smoking_duration", |r| r.smoking_duration, 37.3, 13.6, fx.smoking_duration),
    ];
    for (name, get, mean, sd, shift) in features {
        for label in [0u8, 1] {
            let xs: Vec<f64> = recs.iter().filter(|r| r.label == Some(label)).filter_map(get).collect();
            let expect = mean + if label == 1 { shift * sd } else { 0.0 };
            let got = xs.iter().sum::<f64>() / xs.len() as f64;
            let tol = 3.0 * sd / (xs.len() as f64).sqrt();
            assert!((got - expect).abs() <= tol, "{name} label {label}: {got} vs {expect} ± {tol}");
        }
    }
}

#[test]
fn presets_dial_the_image_signal() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_phantom_dataset(&PhantomConfig::preset(Preset::Complementary, 200, 16, 3), dir.path()).unwrap();
    assert!(m.subjects.iter().filter(|s| s.label == 0).all(|s| s.appearance == 0));
    let malignant: Vec<_> = m.subjects.iter().filter(|s| s.label == 1).collect();
    let visible = malignant.iter().filter(|s| s.appearance == 1).count() as f64 / malignant.len() as f64;
    assert!((0.35..=0.65).contains(&visible), "visible fraction {visible}");
    let strong = PhantomConfig::preset(Preset::ImgStrong, 10, 16, 3);
    assert_eq!(strong.malignant_visible_fraction, 1.0);
    assert!("complementary".parse::<Preset>().is_ok());
    assert!("other".parse::<Preset>().is_err());
}

#[test]
fn split_partitions_the_cohort() {
    let ids: Vec<String> = (0..277).map(subject_id).collect();
    let s = split_dataset(&ids, 0.2, 4, 11).unwrap();
    assert_eq!(s.test.len(), 55);
    let mut sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
    sizes.sort();
    assert_eq!(sizes, vec![55, 55, 56, 56]);
    let mut all: Vec<String> = s.test.iter().chain(s.folds.iter().flatten()).cloned().collect();
    all.sort();
    assert_eq!(all, ids);
    for k in 0..4 {
        let train = s.train_ids(k);
        assert_eq!(train.len() + s.val_ids(k).len(), 222);
        assert!(train.iter().all(|id| !s.val_ids(k).contains(id) && !s.test.contains(id)));
    }
    assert_eq!(s, split_dataset(&ids, 0.2, 4, 11).unwrap());
    assert_ne!(s.test, split_dataset(&ids, 0.2, 4, 12).unwrap().test);
    assert!(split_dataset(&ids[..5], 0.2, 4, 1).is_err());
}

fn tiny_run() -> RunConfig {
    RunConfig {
        preprocess: PreprocessConfig {
            side: 16,
            ..PreprocessConfig::default()
        },
        network: NetworkConfig {
            input_side: 16,
            stage_channels: vec![4, 6, 8, 8],
            sag_intermediate_channels: 4,
            ..NetworkConfig::default()
        },
        train: TrainConfig {
            epochs: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        },
        gbdt: GbdtConfig {
            num_rounds: 10,
            ..GbdtConfig::default()
        },
        crossval: CrossvalConfig::default(),
        ..RunConfig::default()
    }
}

#[test]
fn crossval_is_reproducible_and_leak_free() {
    let data = tempfile::tempdir().unwrap();
    generate_phantom_dataset(&PhantomConfig::preset(Preset::Complementary, 30, 16, 6), data.path()).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny_run();
    let ra = crossval(&cfg, data.path(), 6, a.path()).unwrap();
    let rb = crossval(&cfg, data.path(), 6, b.path()).unwrap();
    ra.audit().unwrap();
    assert_eq!(rb.test, ra.test);
    assert_eq!(ra.test.len(), 6);
    assert_eq!(ra.folds.len(), 4);
    assert_eq!(ra.fusion_train.len(), 24);
    assert!(ra.fusion_train.iter().all(|id| !ra.test.contains(id)));
    for f in &ra.folds {
        assert!(f.val.iter().all(|id| !f.train.contains(id) && !ra.test.contains(id)));
    }
    for arm in ["image", "clinical", "fusion"] {
        assert!(ra.comparison.auc(arm).is_some(), "{arm}");
    }
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
    let m = read_manifest(data.path()).unwrap();
    assert!(m.split.is_none());
}
