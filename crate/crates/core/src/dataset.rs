//! Loading subjects from a dataset directory into network inputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clinical::Label;
use crate::error::{invalid, Error, Result};
use crate::phantom::subject_dir;
use crate::preprocess::{
    apply_lung_mask, assemble_input, crop_or_pad, fallback_lung_segment, normalize_hu, normalize_value,
    resample_isotropic, InputTensor, DEFAULT_PAD_HU, DEFAULT_WINDOW,
};
use crate::train::Sample;
use crate::volume::{read_volume, write_volume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub window: (f64, f64),
    pub side: usize,
    pub pad_hu: f64,
    pub target_spacing_mm: f64,
    /// Segment lungs by thresholding even when a lung mask file exists.
    pub force_fallback_lung: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: DEFAULT_WINDOW,
            side: 32,
            pad_hu: DEFAULT_PAD_HU,
            target_spacing_mm: 1.0,
            force_fallback_lung: false,
        }
    }
}

impl PreprocessConfig {
    /// Normalized CT value used for padding.
    pub fn ct_pad(&self) -> f32 {
        normalize_value(self.pad_hu, self.window)
    }
}

/// Raw files of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectFiles {
    pub ct: PathBuf,
    pub nodule_mask: PathBuf,
    pub lung_mask: Option<PathBuf>,
}

impl SubjectFiles {
    pub fn locate(root: &Path, id: &str) -> Result<Self> {
        let dir = subject_dir(root, id);
        let ct = dir.join("ct.mvol.json");
        let nodule_mask = dir.join("nodule_mask.mvol.json");
        for p in [&ct, &nodule_mask] {
            if !p.exists() {
                return Err(Error::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "missing volume")));
            }
        }
        let lung = dir.join("lung_mask.mvol.json");
        Ok(Self {
            ct,
            nodule_mask,
            lung_mask: lung.exists().then_some(lung),
        })
    }
}

fn resample_if_needed(v: Volume, target: f64) -> Result<Volume> {
    match v.spacing_mm() {
        Some(s) if s.iter().any(|&x| x != target) => resample_isotropic(&v, target),
        _ => Ok(v),
    }
}

/// Resample, pad non-lung voxels, normalize and fit to the cubic side.
pub fn preprocess_subject(ct: Volume, nodule: Volume, lung: Option<Volume>, cfg: &PreprocessConfig) -> Result<InputTensor> {
    let ct = resample_if_needed(ct, cfg.target_spacing_mm)?;
    let nodule = resample_if_needed(nodule, cfg.target_spacing_mm)?;
    let lung = match lung {
        Some(l) if !cfg.force_fallback_lung => resample_if_needed(l, cfg.target_spacing_mm)?,
        _ => fallback_lung_segment(&ct),
    };
    if nodule.shape() != ct.shape() {
        return Err(invalid!("nodule mask {:?} does not match CT {:?}", nodule.shape(), ct.shape()));
    }
    let masked = apply_lung_mask(&ct, &lung, cfg.pad_hu)?;
    let norm = normalize_hu(&masked, cfg.window)?;
    let ct = crop_or_pad(&norm, cfg.side, cfg.ct_pad())?;
    let nodule = crop_or_pad(&nodule, cfg.side, 0.0)?;
    assemble_input(&ct, &nodule)
}

pub fn load_subject(root: &Path, id: &str, cfg: &PreprocessConfig) -> Result<InputTensor> {
    let files = SubjectFiles::locate(root, id)?;
    let lung = files.lung_mask.as_ref().map(read_volume).transpose()?;
    preprocess_subject(read_volume(&files.ct)?, read_volume(&files.nodule_mask)?, lung, cfg)
}

/// `subject_id,label` table.
pub fn read_labels_csv(path: impl AsRef<Path>) -> Result<HashMap<String, Label>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = HashMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let label = match row.get(1).map(str::trim) {
            Some("0") => 0,
            Some("1") => 1,
            other => {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    line,
                    column: "label".into(),
                    message: format!("`{}` is not 0 or 1", other.unwrap_or("")),
                })
            }
        };
        if out.insert(row[0].to_string(), label).is_some() {
            return Err(Error::format(path, format!("duplicate subject_id `{}`", &row[0])));
        }
    }
    Ok(out)
}

/// Loads and preprocesses `ids` from `root`, labels taken from `root/labels.csv`.
pub fn load_samples(root: &Path, ids: &[String], cfg: &PreprocessConfig) -> Result<Vec<Sample>> {
    let labels = read_labels_csv(root.join("labels.csv"))?;
    ids.par_iter()
        .map(|id| {
            let label = *labels.get(id).ok_or_else(|| invalid!("subject {id} has no label"))?;
            Ok(Sample {
                subject_id: id.clone(),
                input: load_subject(root, id, cfg)?,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessEntry {
    pub subject_id: String,
    pub inputs: SubjectFiles,
    pub ct_out: PathBuf,
    pub nodule_out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub config: PreprocessConfig,
    pub subjects: Vec<PreprocessEntry>,
}

/// Writes both channels of every subject under `out/subjects/<id>/` plus a manifest.
pub fn preprocess_dataset(root: &Path, ids: &[String], cfg: &PreprocessConfig, out: &Path) -> Result<PreprocessManifest> {
    let subjects = ids
        .par_iter()
        .map(|id| {
            let inputs = SubjectFiles::locate(root, id)?;
            let t = load_subject(root, id, cfg)?;
            let dir = subject_dir(out, id);
            let ct_out = dir.join("input_ct.mvol.json");
            let nodule_out = dir.join("input_nodule_mask.mvol.json");
            write_volume(&t.ct_volume(), &ct_out)?;
            write_volume(&t.mask_volume(), &nodule_out)?;
            Ok(PreprocessEntry {
                subject_id: id.clone(),
                inputs,
                ct_out,
                nodule_out,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = PreprocessManifest {
        config: cfg.clone(),
        subjects,
    };
    canonical::write(&manifest, out.join("preprocess_manifest.json"))?;
    Ok(manifest)
}
