//! Synthetic labeled chest phantoms with correlated clinical records.
//!
//! Every subject has a lung region of air-like texture inside a soft-tissue
//! body and one ellipsoidal nodule. Malignant nodules are brighter, noisier
//! and spiculated (radial sinusoidal boundary perturbation); benign nodules
//! are smooth. Clinical features are drawn around cohort-like means, shifted
//! for malignant subjects.
//!
//! Layout under the output directory:
//!
//! ```text
//! subjects/<id>/ct.mvol.json + ct.raw            raw HU, 1 mm spacing
//! subjects/<id>/nodule_mask.mvol.json + .raw     planted nodule voxels
//! subjects/<id>/lung_mask.mvol.json + .raw       synthetic lung region
//! clinical.csv  labels.csv  manifest.json
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clinical::{write_clinical_csv, ClinicalRecord, Gender, Label, SmokerStatus};
use crate::error::{invalid, Error, Result};
use crate::seeds::{self, stream};
use crate::volume::{write_volume, Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Preset {
    /// Nodule appearance determines the label; clinical features carry little signal.
    ImgStrong,
    /// Image and clinical features each carry independent, partial signal.
    Complementary,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "IMG_STRONG" => Ok(Preset::ImgStrong),
            "COMPLEMENTARY" => Ok(Preset::Complementary),
            _ => Err(invalid!("unknown phantom preset `{s}` (IMG_STRONG or COMPLEMENTARY)")),
        }
    }
}

/// Mean shift of each clinical feature for malignant subjects, in units of
/// that feature's standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClinicalEffects {
    pub bmi: f64,
    pub age_started_smoking: f64,
    pub cigs_per_day: f64,
    pub pack_years: f64,
    pub smoking_duration: f64,
    pub male: f64,
}

impl Default for ClinicalEffects {
    fn default() -> Self {
        Self {
            bmi: -0.2,
            age_started_smoking: -0.2,
            cigs_per_day: 0.2,
            pack_years: 0.3,
            smoking_duration: 0.3,
            male: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub n_subjects: usize,
    pub side: usize,
    /// Fraction of malignant subjects.
    pub class_balance: f64,
    pub nodule_radius_min: f64,
    pub nodule_radius_max: f64,
    pub benign_hu: f64,
    pub malignant_hu: f64,
    /// Spread of the per-subject nodule mean around its class center.
    pub nodule_mean_sd: f64,
    pub benign_texture_sd: f64,
    pub malignant_texture_sd: f64,
    /// Relative amplitude of the malignant boundary perturbation.
    pub spiculation: f64,
    /// Probability that a malignant subject's nodule looks malignant.
    /// Benign subjects always show the benign appearance.
    pub malignant_visible_fraction: f64,
    pub clinical_effects: ClinicalEffects,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            n_subjects: 100,
            side: 32,
            class_balance: 125.0 / 165.0,
            nodule_radius_min: 3.0,
            nodule_radius_max: 5.0,
            benign_hu: -50.0,
            malignant_hu: 30.0,
            nodule_mean_sd: 15.0,
            benign_texture_sd: 10.0,
            malignant_texture_sd: 40.0,
            spiculation: 0.35,
            malignant_visible_fraction: 1.0,
            clinical_effects: ClinicalEffects::default(),
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn preset(preset: Preset, n_subjects: usize, side: usize, seed: u64) -> Self {
        let base = Self {
            n_subjects,
            side,
            class_balance: 0.5,
            nodule_radius_min: 0.1 * side as f64,
            nodule_radius_max: 0.16 * side as f64,
            seed,
            ..Self::default()
        };
        match preset {
            Preset::ImgStrong => Self {
                clinical_effects: ClinicalEffects {
                    bmi: 0.0,
                    age_started_smoking: 0.0,
                    cigs_per_day: 0.1,
                    pack_years: 0.1,
                    smoking_duration: 0.0,
                    male: 0.0,
                },
                ..base
            },
            Preset::Complementary => Self {
                malignant_visible_fraction: 0.5,
                clinical_effects: ClinicalEffects {
                    bmi: -0.3,
                    age_started_smoking: -0.3,
                    cigs_per_day: 0.4,
                    pack_years: 0.6,
                    smoking_duration: 0.5,
                    male: 0.1,
                },
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.side < 8 {
            return Err(invalid!("need at least one subject and side >= 8"));
        }
        if !(0.0..=1.0).contains(&self.class_balance) || !(0.0..=1.0).contains(&self.malignant_visible_fraction) {
            return Err(invalid!("class_balance and malignant_visible_fraction must lie in [0, 1]"));
        }
        let nonneg = [
            self.nodule_mean_sd,
            self.benign_texture_sd,
            self.malignant_texture_sd,
            self.spiculation,
            self.nodule_radius_min,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid!("effect sizes and spreads must be non-negative"));
        }
        if !(self.nodule_radius_min <= self.nodule_radius_max && self.nodule_radius_max < self.side as f64 / 4.0) {
            return Err(invalid!(
                "nodule radius range [{}, {}] must be ordered and below side/4",
                self.nodule_radius_min,
                self.nodule_radius_max
            ));
        }
        Ok(())
    }
}

/// Ground truth recorded for one generated subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub label: Label,
    /// Class whose appearance the nodule was drawn from.
    pub appearance: Label,
    pub nodule_center: [f64; 3],
    pub nodule_radii: [f64; 3],
    pub nodule_mean_hu: f64,
    pub spiculation: f64,
    /// Inclusive-exclusive voxel bounds `[z0, y0, x0, z1, y1, x1]` of the nodule mask.
    pub nodule_bbox: [usize; 6],
    pub nodule_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub seed: u64,
    pub test_frac: f64,
    pub test: Vec<String>,
    pub folds: Vec<Vec<String>>,
}

impl Split {
    /// Training ids of a fold: every other fold.
    pub fn train_ids(&self, fold: usize) -> Vec<String> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().cloned())
            .collect()
    }

    pub fn val_ids(&self, fold: usize) -> &[String] {
        &self.folds[fold]
    }

    /// Checks that test and folds are pairwise disjoint.
    pub fn audit(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.test.iter().chain(self.folds.iter().flatten()) {
            if !seen.insert(id) {
                return Err(invalid!("subject `{id}` appears in more than one partition"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub generator: PhantomConfig,
    pub subjects: Vec<SubjectTruth>,
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }
}

pub fn subject_dir(root: &Path, id: &str) -> PathBuf {
    root.join("subjects").join(id)
}

pub fn read_manifest(root: impl AsRef<Path>) -> Result<DatasetManifest> {
    canonical::read(root.as_ref().join("manifest.json"))
}

pub fn write_manifest(m: &DatasetManifest, root: impl AsRef<Path>) -> Result<()> {
    canonical::write(m, root.as_ref().join("manifest.json"))
}

struct Subject {
    truth: SubjectTruth,
    clinical: ClinicalRecord,
    ct: Volume,
    nodule: Volume,
    lung: Volume,
}

/// Smooth noise: a coarse Gaussian grid interpolated trilinearly to `side³`.
fn smooth_noise(rng: &mut impl Rng, side: usize, cells: usize, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("valid sd");
    let g = cells + 1;
    let grid: Vec<f64> = (0..g * g * g).map(|_| normal.sample(rng)).collect();
    let scale = cells as f64 / (side - 1) as f64;
    let tap = |i: usize| {
        let p = i as f64 * scale;
        let lo = (p.floor() as usize).min(cells - 1);
        (lo, p - lo as f64)
    };
    let mut out = Vec::with_capacity(side.pow(3));
    for z in 0..side {
        let (z0, fz) = tap(z);
        for y in 0..side {
            let (y0, fy) = tap(y);
            for x in 0..side {
                let (x0, fx) = tap(x);
                let mut v = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            v += wz * wy * wx * grid[((z0 + dz) * g + y0 + dy) * g + x0 + dx];
                        }
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

fn lung_geometry(side: usize) -> ([f64; 3], [f64; 3]) {
    let c = (side as f64 - 1.0) / 2.0;
    let s = side as f64;
    ([c; 3], [0.42 * s, 0.38 * s, 0.38 * s])
}

fn in_ellipsoid(p: [f64; 3], center: [f64; 3], radii: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum()
}

fn clinical_record<R: Rng>(rng: &mut R, id: &str, label: Label, fx: &ClinicalEffects) -> ClinicalRecord {
    let shift = |effect: f64| if label == 1 { effect } else { 0.0 };
    let gauss = |rng: &mut R, mean: f64, sd: f64, effect: f64| {
        Normal::new(mean + shift(effect) * sd, sd).unwrap().sample(rng)
    };
    let male_p = (0.61 + shift(fx.male)).clamp(0.0, 1.0);
    let gender = if rng.random::<f64>() < male_p { Gender::Male } else { Gender::Female };
    let bmi = gauss(rng, 27.5, 6.5, fx.bmi).clamp(15.0, 55.0);
    let u: f64 = rng.random();
    let smoker_status = if u < 0.07 {
        SmokerStatus::Never
    } else if u < 0.31 {
        SmokerStatus::Current
    } else {
        SmokerStatus::Ex
    };
    let round1 = |v: f64| (v * 10.0).round() / 10.0;
    let mut rec = ClinicalRecord {
        subject_id: id.to_string(),
        gender,
        bmi: round1(bmi),
        age_started_smoking: None,
        age_quit_smoking: None,
        cigs_per_day: None,
        smoker_status,
        pack_years: None,
        smoking_duration: None,
        label: Some(label),
    };
    if smoker_status == SmokerStatus::Never {
        return rec;
    }
    let started = gauss(rng, 19.4, 7.5, fx.age_started_smoking).clamp(10.0, 50.0);
    let duration = gauss(rng, 37.3, 13.6, fx.smoking_duration).clamp(1.0, 70.0);
    let cigs = gauss(rng, 26.9, 14.2, fx.cigs_per_day).clamp(1.0, 100.0);
    let pack_noise = gauss(rng, 0.0, 20.0, fx.pack_years);
    rec.age_started_smoking = Some(round1(started));
    rec.smoking_duration = Some(round1(duration));
    rec.cigs_per_day = Some(cigs.round());
    rec.pack_years = Some(round1((cigs / 20.0 * duration * 0.75 + pack_noise).max(0.5)));
    if smoker_status == SmokerStatus::Ex {
        rec.age_quit_smoking = Some(round1(started + duration));
    }
    rec
}

fn generate_subject(cfg: &PhantomConfig, index: usize, id: String, label: Label) -> Result<Subject> {
    let mut rng = seeds::rng(cfg.seed, &[stream::SUBJECT, index as u64]);
    let s = cfg.side;
    let (lung_c, lung_r) = lung_geometry(s);

    let appearance = u8::from(label == 1 && rng.random::<f64>() < cfg.malignant_visible_fraction);
    let malignant_look = appearance == 1;
    let class_hu = if malignant_look { cfg.malignant_hu } else { cfg.benign_hu };
    let nodule_mean_hu = class_hu + Normal::new(0.0, cfg.nodule_mean_sd).unwrap().sample(&mut rng);
    let spiculation = if malignant_look { cfg.spiculation } else { 0.0 };
    let r = rng.random_range(cfg.nodule_radius_min..=cfg.nodule_radius_max);
    let radii: [f64; 3] = std::array::from_fn(|_| r * rng.random_range(0.85..=1.15));
    let reach = radii.iter().cloned().fold(0.0, f64::max) * (1.0 + spiculation) + 1.0;
    let phases: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));

    let mut center = None;
    for _ in 0..1000 {
        let p: [f64; 3] = std::array::from_fn(|a| rng.random_range(lung_c[a] - lung_r[a]..=lung_c[a] + lung_r[a]));
        let shrunk: [f64; 3] = std::array::from_fn(|a| lung_r[a] - reach);
        if shrunk.iter().all(|&v| v > 0.0) && in_ellipsoid(p, lung_c, shrunk) <= 1.0 {
            center = Some(p);
            break;
        }
    }
    let center = center.ok_or_else(|| invalid!("nodule of radius {r:.2} cannot fit inside the lung region at side {s}"))?;

    let lung_noise = smooth_noise(&mut rng, s, 4, 50.0);
    let white = Normal::new(0.0, 20.0).unwrap();
    let texture_sd = if malignant_look { cfg.malignant_texture_sd } else { cfg.benign_texture_sd };
    let nodule_texture = Normal::new(0.0, texture_sd.max(f64::MIN_POSITIVE)).unwrap();

    let n = s.pow(3);
    let (mut ct, mut nodule, mut lung) = (vec![0f32; n], vec![0f32; n], vec![0f32; n]);
    let mut bbox = [usize::MAX, usize::MAX, usize::MAX, 0, 0, 0];
    let mut count = 0;
    for z in 0..s {
        for y in 0..s {
            for x in 0..s {
                let i = (z * s + y) * s + x;
                let p = [z as f64, y as f64, x as f64];
                let d: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / radii[a]);
                let rho = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let theta = d[1].atan2(d[2]);
                let phi = if rho > 0.0 { (d[0] / rho).acos() } else { 0.0 };
                let boundary = 1.0 + spiculation * ((5.0 * theta + phases[0]).sin() * (4.0 * phi + phases[1]).cos());
                let inside_lung = in_ellipsoid(p, lung_c, lung_r) <= 1.0;
                let noise = white.sample(&mut rng);
                let value = if rho <= boundary {
                    nodule[i] = 1.0;
                    count += 1;
                    for (a, &c) in [z, y, x].iter().enumerate() {
                        bbox[a] = bbox[a].min(c);
                        bbox[a + 3] = bbox[a + 3].max(c + 1);
                    }
                    nodule_mean_hu + nodule_texture.sample(&mut rng)
                } else if inside_lung {
                    -850.0 + lung_noise[i] + noise
                } else {
                    40.0 + noise
                };
                if inside_lung {
                    lung[i] = 1.0;
                }
                ct[i] = value as f32;
            }
        }
    }
    if count == 0 {
        return Err(invalid!("nodule of subject {id} covers no voxel"));
    }

    let mut crng = seeds::rng(cfg.seed, &[stream::SUBJECT, index as u64, 1]);
    let clinical = clinical_record(&mut crng, &id, label, &cfg.clinical_effects);
    let spacing = Some([1.0; 3]);
    Ok(Subject {
        truth: SubjectTruth {
            subject_id: id,
            label,
            appearance,
            nodule_center: center,
            nodule_radii: radii,
            nodule_mean_hu,
            spiculation,
            nodule_bbox: bbox,
            nodule_voxels: count,
        },
        clinical,
        ct: Volume::new([s; 3], spacing, VolumeKind::Hu, ct)?,
        nodule: Volume::new([s; 3], spacing, VolumeKind::Mask, nodule)?,
        lung: Volume::new([s; 3], spacing, VolumeKind::Mask, lung)?,
    })
}

pub fn subject_id(index: usize) -> String {
    format!("s{:04}", index + 1)
}

/// Exactly `round(n · class_balance)` malignant labels in seeded random order.
pub fn draw_labels(cfg: &PhantomConfig) -> Vec<Label> {
    let n = cfg.n_subjects;
    let positives = (n as f64 * cfg.class_balance).round() as usize;
    let mut labels: Vec<Label> = (0..n).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut seeds::rng(cfg.seed, &[stream::LABELS]));
    labels
}

pub fn generate_phantom_dataset(cfg: &PhantomConfig, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out = out.as_ref();
    let labels = draw_labels(cfg);
    let subjects = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let s = generate_subject(cfg, i, subject_id(i), label)?;
            let dir = subject_dir(out, &s.truth.subject_id);
            write_volume(&s.ct, dir.join("ct.mvol.json"))?;
            write_volume(&s.nodule, dir.join("nodule_mask.mvol.json"))?;
            write_volume(&s.lung, dir.join("lung_mask.mvol.json"))?;
            Ok((s.truth, s.clinical))
        })
        .collect::<Result<Vec<_>>>()?;
    let (truths, records): (Vec<_>, Vec<_>) = subjects.into_iter().unzip();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_clinical_csv(&records, out.join("clinical.csv"))?;
    write_labels_csv(&truths, out.join("labels.csv"))?;
    let manifest = DatasetManifest {
        generator: cfg.clone(),
        subjects: truths,
        split: None,
    };
    write_manifest(&manifest, out)?;
    Ok(manifest)
}

fn write_labels_csv(truths: &[SubjectTruth], path: PathBuf) -> Result<()> {
    let mut text = String::from("subject_id,label\n");
    for t in truths {
        text.push_str(&format!("{},{}\n", t.subject_id, t.label));
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Withholds `round(test_frac · n)` subjects and deals the rest into `folds` folds.
pub fn split_dataset(ids: &[String], test_frac: f64, folds: usize, seed: u64) -> Result<Split> {
    let n = ids.len();
    if folds < 2 || n < folds + 2 {
        return Err(invalid!("{n} subjects are too few for {folds} folds plus a test set"));
    }
    if !(0.0..1.0).contains(&test_frac) {
        return Err(invalid!("test fraction {test_frac} must lie in [0, 1)"));
    }
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != n {
        return Err(invalid!("subject ids are not unique"));
    }
    let mut order: Vec<String> = ids.to_vec();
    order.shuffle(&mut seeds::rng(seed, &[stream::SPLIT]));
    let n_test = (n as f64 * test_frac).round() as usize;
    if n - n_test < folds {
        return Err(invalid!("no subjects left for {folds} folds"));
    }
    let rest = order.split_off(n_test);
    let mut test = order;
    test.sort();
    let mut fold_ids = vec![Vec::new(); folds];
    for (i, id) in rest.into_iter().enumerate() {
        fold_ids[i % folds].push(id);
    }
    fold_ids.iter_mut().for_each(|f| f.sort());
    let split = Split {
        seed,
        test_frac,
        test,
        folds: fold_ids,
    };
    split.audit()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_of_277() {
        let ids: Vec<String> = (0..277).map(subject_id).collect();
        let s = split_dataset(&ids, 0.2, 4, 3).unwrap();
        assert_eq!(s.test.len(), 55);
        let sizes: Vec<usize> = s.folds.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![56, 56, 55, 55]);
        assert_eq!(s, split_dataset(&ids, 0.2, 4, 3).unwrap());
    }

    #[test]
    fn label_counts_are_exact() {
        let cfg = PhantomConfig {
            n_subjects: 100,
            class_balance: 0.5,
            ..PhantomConfig::default()
        };
        assert_eq!(draw_labels(&cfg).iter().filter(|&&l| l == 1).count(), 50);
    }

    #[test]
    fn too_few_subjects() {
        let ids: Vec<String> = (0..5).map(subject_id).collect();
        assert!(split_dataset(&ids, 0.2, 4, 0).is_err());
    }
}
