//! Pipeline stages wired from a run configuration: CNN training and
//! inference, clinical/fusion boosting, score comparison, attention export
//! and the cross-validation protocol.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use colearn_autograd::{Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clinical::{read_clinical_csv, ClinicalRecord, Label};
use crate::dataset::{load_samples, read_labels_csv, PreprocessConfig};
use crate::error::{invalid, Error, Result};
use crate::evalmetrics::roc_curve;
use crate::gbdt::{
    encode_clinical, feature_importance, fit_gbdt, importance_svg, predict_gbdt, save_model, write_importance_csv,
    GbdtConfig, GbdtModel,
};
use crate::network::{build_network, load_checkpoint, save_checkpoint, NetworkConfig, ParamGraph, INPUT_CHANNELS};
use crate::phantom::{read_manifest, split_dataset, Split};
use crate::plots::{line_chart, Series};
use crate::preprocess::InputTensor;
use crate::report::{write_metrics, MetricsReport};
use crate::seeds::{self, stream};
use crate::train::{
    fit, history_svg, predict, write_history_csv, write_predictions_csv, FitData, History, Prediction, Sample,
    TrainConfig,
};
use crate::volume::{write_pgm_slices, write_volume, Volume};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint directory read by inference stages.
    pub checkpoint: Option<PathBuf>,
    /// Predictions CSV with `image_feature_0/1` used by fusion.
    pub image_features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossvalConfig {
    pub test_frac: f64,
    pub folds: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self {
            test_frac: 0.2,
            folds: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preprocess: PreprocessConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub gbdt: GbdtConfig,
    pub crossval: CrossvalConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.gbdt.validate()?;
        if self.network.input_side != self.preprocess.side {
            return Err(invalid!(
                "network.input_side {} differs from preprocess.side {}",
                self.network.input_side,
                self.preprocess.side
            ));
        }
        Ok(())
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.gbdt.seed = seed;
        self
    }

    /// Writes the effective configuration next to a stage's outputs.
    pub fn echo(&self, out: &Path) -> Result<()> {
        canonical::write(self, out.join("config.json"))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Split stored in the dataset manifest, or a fresh one from `seed`.
pub fn dataset_split(data: &Path, cv: &CrossvalConfig, seed: u64) -> Result<Split> {
    let manifest = read_manifest(data)?;
    match manifest.split {
        Some(s) => {
            s.audit()?;
            Ok(s)
        }
        None => split_dataset(&manifest.ids(), cv.test_frac, cv.folds, seed),
    }
}

fn load_aux(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.train.aux_training_manifest {
        None => Ok(Vec::new()),
        Some(root) => {
            let ids = read_manifest(root)?.ids();
            load_samples(root, &ids, &cfg.preprocess)
        }
    }
}

/// Trains one CNN and writes history plus best and last checkpoints under `out`.
pub fn train_cnn(
    cfg: &RunConfig,
    data: &Path,
    train_ids: &[String],
    val_ids: &[String],
    init_seed: u64,
    out: &Path,
) -> Result<(History, ParamGraph<f32>)> {
    let train = load_samples(data, train_ids, &cfg.preprocess)?;
    let val = load_samples(data, val_ids, &cfg.preprocess)?;
    let mut aux = load_aux(cfg)?;
    let train_set: HashSet<&str> = train_ids.iter().chain(val_ids).map(String::as_str).collect();
    aux.retain(|s| !train_set.contains(s.subject_id.as_str()));
    let pg = build_network::<f32>(&cfg.network, init_seed)?;
    let data = FitData {
        train: &train,
        val: &val,
        aux: &aux,
        ct_pad: cfg.preprocess.ct_pad(),
    };
    let outcome = fit(pg, &data, &cfg.train, |_| {})?;
    create_dir(out)?;
    write_history_csv(&outcome.history, out.join("history.csv"))?;
    write_text(&out.join("history.svg"), &history_svg(&outcome.history))?;
    save_checkpoint(&outcome.best, out.join("best"))?;
    save_checkpoint(&outcome.last, out.join("last"))?;
    Ok((outcome.history, outcome.best))
}

pub fn predict_cnn(checkpoint: &Path, data: &Path, ids: &[String], cfg: &RunConfig) -> Result<Vec<Prediction>> {
    let pg = load_checkpoint::<f32>(checkpoint)?;
    let samples = load_samples(data, ids, &cfg.preprocess)?;
    predict(&pg, &samples, cfg.train.batch_size)
}

pub fn read_clinical(data: &Path) -> Result<BTreeMap<String, ClinicalRecord>> {
    let mut records = read_clinical_csv(data.join("clinical.csv"))?;
    let labels = read_labels_csv(data.join("labels.csv"))?;
    for r in &mut records {
        if r.label.is_none() {
            r.label = labels.get(&r.subject_id).copied();
        }
    }
    Ok(records.into_iter().map(|r| (r.subject_id.clone(), r)).collect())
}

fn select(records: &BTreeMap<String, ClinicalRecord>, ids: &[String]) -> Result<Vec<ClinicalRecord>> {
    ids.iter()
        .map(|id| records.get(id).cloned().ok_or_else(|| invalid!("no clinical record for subject {id}")))
        .collect()
}

fn feature_map(preds: &[Prediction]) -> HashMap<String, [f64; 2]> {
    preds.iter().map(|p| (p.subject_id.clone(), p.probs)).collect()
}

/// Boosted model on clinical columns, plus image features when given.
pub fn train_fusion(
    records: &BTreeMap<String, ClinicalRecord>,
    image: Option<&[Prediction]>,
    train_ids: &[String],
    cfg: &GbdtConfig,
) -> Result<GbdtModel> {
    let rows = select(records, train_ids)?;
    let feats = image.map(|p| {
        let wanted: HashSet<&str> = train_ids.iter().map(String::as_str).collect();
        feature_map(p).into_iter().filter(|(k, _)| wanted.contains(k.as_str())).collect::<HashMap<_, _>>()
    });
    fit_gbdt(&encode_clinical(&rows, feats.as_ref())?, cfg)
}

pub fn score_fusion(
    model: &GbdtModel,
    records: &BTreeMap<String, ClinicalRecord>,
    image: Option<&[Prediction]>,
    ids: &[String],
) -> Result<Vec<Score>> {
    let rows = select(records, ids)?;
    let feats = image.map(|p| {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        feature_map(p).into_iter().filter(|(k, _)| wanted.contains(k.as_str())).collect::<HashMap<_, _>>()
    });
    let x = encode_clinical(&rows, feats.as_ref())?;
    let probs = predict_gbdt(model, &x)?;
    Ok(ids.iter().cloned().zip(probs).map(|(subject_id, score)| Score { subject_id, score }).collect())
}

pub fn write_fusion_outputs(model: &GbdtModel, out: &Path, stem: &str) -> Result<()> {
    create_dir(out)?;
    save_model(model, out.join(format!("{stem}_model.json")))?;
    let imp = feature_importance(model);
    write_importance_csv(&imp, out.join(format!("{stem}_importance.csv")))?;
    write_text(&out.join(format!("{stem}_importance.svg")), &importance_svg(&imp, "Feature importance"))
}

/// Malignancy score of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub subject_id: String,
    pub score: f64,
}

pub fn image_scores(preds: &[Prediction]) -> Vec<Score> {
    preds
        .iter()
        .map(|p| Score {
            subject_id: p.subject_id.clone(),
            score: p.probs[1],
        })
        .collect()
}

pub fn write_scores_csv(scores: &[Score], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("subject_id,score\n");
    for s in scores {
        text.push_str(&format!("{},{}\n", s.subject_id, s.score));
    }
    write_text(path, &text)
}

/// Reads `subject_id,score`, or a predictions file whose `image_feature_1` is the score.
pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<Vec<Score>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    let column = headers
        .iter()
        .position(|h| h == "score")
        .or_else(|| headers.iter().position(|h| h == "image_feature_1"))
        .ok_or_else(|| Error::format(path, "expected a `score` or `image_feature_1` column"))?;
    if headers.get(0) != Some("subject_id") {
        return Err(Error::format(path, "first column must be subject_id"));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let score = row[column].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Csv {
            path: path.to_path_buf(),
            line,
            column: headers[column].to_string(),
            message: format!("`{}` is not a finite number", &row[column]),
        })?;
        out.push(Score {
            subject_id: row[0].to_string(),
            score,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub arms: Vec<ArmReport>,
}

impl Comparison {
    pub fn auc(&self, name: &str) -> Option<f64> {
        self.arms.iter().find(|a| a.name == name).map(|a| a.metrics.auc)
    }
}

/// Scores every arm against `labels` and writes per-arm metrics, ROC points,
/// an overlay chart and a combined report to `out`.
pub fn evaluate_arms(arms: &[(String, Vec<Score>)], labels: &HashMap<String, Label>, out: &Path) -> Result<Comparison> {
    create_dir(out)?;
    let mut reports = Vec::new();
    let mut series = Vec::new();
    let mut roc_csv = String::from("arm,fpr,tpr,threshold\n");
    for (name, scores) in arms {
        let mut seen = HashSet::new();
        let mut s = Vec::with_capacity(scores.len());
        let mut y = Vec::with_capacity(scores.len());
        for sc in scores {
            if !seen.insert(sc.subject_id.as_str()) {
                return Err(invalid!("arm {name}: subject {} scored twice", sc.subject_id));
            }
            let label = labels
                .get(&sc.subject_id)
                .ok_or_else(|| invalid!("arm {name}: subject {} has no label", sc.subject_id))?;
            s.push(sc.score);
            y.push(*label);
        }
        let metrics = MetricsReport::from_scores(&s, &y, None)?;
        write_metrics(&metrics, out.join(format!("metrics_{name}.json")))?;
        let curve = roc_curve(&s, &y)?;
        for p in &curve.points {
            roc_csv.push_str(&format!("{name},{},{},{}\n", p.fpr, p.tpr, canonical::format_g17(p.threshold)));
        }
        series.push(Series::new(
            format!("{name} (AUC {:.3})", metrics.auc),
            curve.points.iter().map(|p| p.fpr).collect(),
            curve.points.iter().map(|p| p.tpr).collect(),
        ));
        reports.push(ArmReport {
            name: name.clone(),
            metrics,
        });
    }
    write_text(&out.join("roc_points.csv"), &roc_csv)?;
    write_text(
        &out.join("roc_overlay.svg"),
        &line_chart("ROC", "false positive rate", "true positive rate", &series, Some((0.0, 1.0))),
    )?;
    let cmp = Comparison { arms: reports };
    canonical::write(&cmp, out.join("comparison.json"))?;
    Ok(cmp)
}

fn to_tensor<T: Element>(t: &InputTensor) -> Result<Tensor<T>> {
    let s = t.side();
    let data = t.data().iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
    Ok(Tensor::new([INPUT_CHANNELS, s, s, s], data)?)
}

/// Mean gate value inside and outside the bounding box of the nodule channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub subject_id: String,
    pub inside_mean: f64,
    pub outside_mean: f64,
    pub bbox: [usize; 6],
}

/// Half-open `[z0, y0, x0, z1, y1, x1]` bounds of the non-zero voxels.
pub fn mask_bbox(mask: &Volume) -> Option<[usize; 6]> {
    let [d, h, w] = mask.shape();
    let mut b = [usize::MAX, usize::MAX, usize::MAX, 0, 0, 0];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if mask.get(z, y, x) != 0.0 {
                    for (i, c) in [z, y, x].into_iter().enumerate() {
                        b[i] = b[i].min(c);
                        b[i + 3] = b[i + 3].max(c + 1);
                    }
                }
            }
        }
    }
    (b[0] != usize::MAX).then_some(b)
}

pub fn box_contrast(map: &Volume, bbox: [usize; 6]) -> (f64, f64) {
    let [d, h, w] = map.shape();
    let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let v = map.get(z, y, x) as f64;
                let inside = (bbox[0]..bbox[3]).contains(&z) && (bbox[1]..bbox[4]).contains(&y) && (bbox[2]..bbox[5]).contains(&x);
                if inside {
                    si += v;
                    ni += 1;
                } else {
                    so += v;
                    no += 1;
                }
            }
        }
    }
    (si / ni.max(1) as f64, so / no.max(1) as f64)
}

/// Upsampled gate maps for `samples`; writes volumes and mid-slice images
/// under `out/<id>/` when `out` is given.
pub fn attention_export<T: Element>(pg: &ParamGraph<T>, samples: &[Sample], out: Option<&Path>) -> Result<Vec<AttentionSummary>> {
    let mut summaries = Vec::with_capacity(samples.len());
    for s in samples {
        let map = pg.extract_attention(&to_tensor::<T>(&s.input)?)?;
        let bbox = mask_bbox(&s.input.mask_volume())
            .ok_or_else(|| invalid!("subject {} has an empty nodule mask", s.subject_id))?;
        let (inside_mean, outside_mean) = box_contrast(&map.upsampled, bbox);
        if let Some(out) = out {
            let dir = out.join(&s.subject_id);
            write_volume(&map.upsampled, dir.join("attention.mvol.json"))?;
            write_pgm_slices(&map.upsampled, &dir, "attention")?;
        }
        summaries.push(AttentionSummary {
            subject_id: s.subject_id.clone(),
            inside_mean,
            outside_mean,
            bbox,
        });
    }
    if let Some(out) = out {
        let mut text = String::from("subject_id,inside_mean,outside_mean\n");
        for a in &summaries {
            text.push_str(&format!("{},{},{}\n", a.subject_id, a.inside_mean, a.outside_mean));
        }
        create_dir(out)?;
        write_text(&out.join("attention_summary.csv"), &text)?;
    }
    Ok(summaries)
}

/// Subjects that fed each model, for leakage audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub best_epoch: Option<usize>,
    pub val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossvalReport {
    pub test: Vec<String>,
    pub folds: Vec<FoldAudit>,
    /// Subjects used to fit both boosted models.
    pub fusion_train: Vec<String>,
    pub comparison: Comparison,
}

impl CrossvalReport {
    /// Fails if any test subject fed a model.
    pub fn audit(&self) -> Result<()> {
        let test: HashSet<&String> = self.test.iter().collect();
        let used = self
            .folds
            .iter()
            .flat_map(|f| f.train.iter().chain(&f.val))
            .chain(&self.fusion_train);
        for id in used {
            if test.contains(id) {
                return Err(invalid!("test subject {id} was used for training"));
            }
        }
        Ok(())
    }
}

/// Trains one CNN per fold and collects out-of-fold image features for the
/// training cohort and fold-averaged features for the test subjects. The
/// boosted clinical and fusion models are fit on the whole training cohort
/// and all three arms are compared on the withheld test subjects.
pub fn crossval(cfg: &RunConfig, data: &Path, seed: u64, out: &Path) -> Result<CrossvalReport> {
    cfg.validate()?;
    let split = dataset_split(data, &cfg.crossval, seed)?;
    create_dir(out)?;
    cfg.echo(out)?;
    canonical::write(&split, out.join("split.json"))?;
    let labels = read_labels_csv(data.join("labels.csv"))?;
    let k = split.folds.len();

    let mut oof = Vec::new();
    let mut test_sum: BTreeMap<String, [f64; 2]> = split.test.iter().map(|id| (id.clone(), [0.0; 2])).collect();
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let dir = out.join(format!("fold_{fold}"));
        let train_ids = split.train_ids(fold);
        let val_ids = split.val_ids(fold).to_vec();
        let init = seeds::derive(seed, &[stream::INIT, fold as u64]);
        let fold_cfg = RunConfig {
            train: TrainConfig {
                seed: seeds::derive(seed, &[stream::SHUFFLE, fold as u64]),
                ..cfg.train.clone()
            },
            ..cfg.clone()
        };
        let (history, best) = train_cnn(&fold_cfg, data, &train_ids, &val_ids, init, &dir)?;
        let val_pred = predict(&best, &load_samples(data, &val_ids, &cfg.preprocess)?, cfg.train.batch_size)?;
        let test_pred = predict(&best, &load_samples(data, &split.test, &cfg.preprocess)?, cfg.train.batch_size)?;
        write_predictions_csv(&val_pred, dir.join("val_predictions.csv"))?;
        write_predictions_csv(&test_pred, dir.join("test_predictions.csv"))?;
        let val_scores: Vec<f64> = val_pred.iter().map(|p| p.probs[1]).collect();
        let val_labels: Vec<Label> = val_ids.iter().map(|id| labels[id]).collect();
        let val_auc = MetricsReport::from_scores(&val_scores, &val_labels, None)?.auc;
        for p in &test_pred {
            let acc = test_sum.get_mut(&p.subject_id).expect("test id");
            acc[0] += p.probs[0];
            acc[1] += p.probs[1];
        }
        oof.extend(val_pred);
        folds.push(FoldAudit {
            fold,
            train: train_ids,
            val: val_ids,
            best_epoch: history.best_epoch,
            val_auc,
        });
    }
    oof.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
    let test_pred: Vec<Prediction> = test_sum
        .into_iter()
        .map(|(subject_id, s)| Prediction {
            subject_id,
            probs: [s[0] / k as f64, s[1] / k as f64],
        })
        .collect();
    write_predictions_csv(&oof, out.join("oof_image_features.csv"))?;
    write_predictions_csv(&test_pred, out.join("test_image_features.csv"))?;

    let records = read_clinical(data)?;
    let mut cohort: Vec<String> = split.folds.iter().flatten().cloned().collect();
    cohort.sort();
    let gcfg = GbdtConfig {
        seed,
        ..cfg.gbdt.clone()
    };
    let clinical = train_fusion(&records, None, &cohort, &gcfg)?;
    let fusion = train_fusion(&records, Some(&oof), &cohort, &gcfg)?;
    write_fusion_outputs(&clinical, out, "clinical")?;
    write_fusion_outputs(&fusion, out, "fusion")?;

    let arms = vec![
        ("image".to_string(), image_scores(&test_pred)),
        ("clinical".to_string(), score_fusion(&clinical, &records, None, &split.test)?),
        ("fusion".to_string(), score_fusion(&fusion, &records, Some(&test_pred), &split.test)?),
    ];
    for (name, scores) in &arms {
        write_scores_csv(scores, out.join(format!("scores_{name}.csv")))?;
    }
    let comparison = evaluate_arms(&arms, &labels, out)?;
    let report = CrossvalReport {
        test: split.test.clone(),
        folds,
        fusion_train: cohort,
        comparison,
    };
    report.audit()?;
    canonical::write(&report, out.join("crossval_report.json"))?;
    Ok(report)
}
