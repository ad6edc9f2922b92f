//! Second-order gradient-boosted regression trees with logistic loss.
//!
//! Splits are found by exact greedy enumeration over sorted present values.
//! Rows missing the split feature follow a learned default direction. Among
//! equal-gain candidates the lowest column index wins, then the smallest
//! threshold. A row goes left when its value is below the threshold, which
//! sits halfway between two consecutive distinct values.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::canonical;
use crate::clinical::{ClinicalRecord, Gender, Label, SmokerStatus};
use crate::error::{invalid, Error, Result};
use crate::plots::bar_chart;
use crate::seeds::{self, stream};

pub const CLINICAL_COLUMNS: [&str; 9] = [
    "gender_male",
    "bmi",
    "age_started_smoking",
    "age_quit_smoking",
    "cigs_per_day",
    "smoker_current",
    "smoker_ex",
    "pack_years",
    "smoking_duration",
];
pub const IMAGE_COLUMNS: [&str; 2] = ["image_feature_0", "image_feature_1"];

/// Named feature columns over subjects; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub subject_ids: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub labels: Option<Vec<Label>>,
}

impl FeatureMatrix {
    pub fn new(
        columns: Vec<String>,
        subject_ids: Vec<String>,
        rows: Vec<Vec<Option<f64>>>,
        labels: Option<Vec<Label>>,
    ) -> Result<Self> {
        let unique: HashSet<&String> = columns.iter().collect();
        if unique.len() != columns.len() {
            return Err(invalid!("feature column names are not unique"));
        }
        if subject_ids.len() != rows.len() || labels.as_ref().is_some_and(|l| l.len() != rows.len()) {
            return Err(invalid!("row, id and label counts disagree"));
        }
        if let Some(r) = rows.iter().position(|r| r.len() != columns.len()) {
            return Err(invalid!("row {r} has {} cells for {} columns", rows[r].len(), columns.len()));
        }
        if rows.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(invalid!("feature values must be finite or missing"));
        }
        if labels.as_ref().is_some_and(|l| l.iter().any(|&v| v > 1)) {
            return Err(invalid!("labels must be 0 or 1"));
        }
        Ok(Self {
            columns,
            subject_ids,
            rows,
            labels,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// Column-major copy of one feature.
    fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtConfig {
    pub num_rounds: usize,
    pub max_depth: usize,
    pub eta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
    /// Fraction of columns considered by each tree.
    pub colsample: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            num_rounds: 100,
            max_depth: 3,
            eta: 0.1,
            lambda: 1.0,
            gamma: 0.0,
            min_child_weight: 1.0,
            colsample: 1.0,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(invalid!("eta must lie in (0, 1], got {}", self.eta));
        }
        if [self.lambda, self.gamma, self.min_child_weight].iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid!("lambda, gamma and min_child_weight must be non-negative"));
        }
        if !(self.colsample > 0.0 && self.colsample <= 1.0) {
            return Err(invalid!("colsample must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        default_left: bool,
        left: usize,
        right: usize,
        gain: f64,
    },
    Leaf {
        weight: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[Option<f64>]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { weight } => return *weight,
                Node::Split {
                    feature,
                    threshold,
                    default_left,
                    left,
                    right,
                    ..
                } => {
                    let go_left = match row[*feature] {
                        Some(v) => v < *threshold,
                        None => *default_left,
                    };
                    i = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtModel {
    pub columns: Vec<String>,
    pub base_score: f64,
    pub config: GbdtConfig,
    pub trees: Vec<Tree>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logistic_grad_hess(pred_logit: f64, label: Label) -> (f64, f64) {
    let p = sigmoid(pred_logit);
    (p - label as f64, p * (1.0 - p))
}

pub fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64, gamma: f64) -> f64 {
    0.5 * (gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - (gl + gr).powi(2) / (hl + hr + lambda)) - gamma
}

/// Mean logistic loss of margins against labels.
pub fn logistic_loss(margins: &[f64], labels: &[Label]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(labels)
        .map(|(&m, &y)| {
            // log(1 + e^m) - y·m, computed stably.
            let softplus = if m > 0.0 { m + (-m).exp().ln_1p() } else { m.exp().ln_1p() };
            softplus - y as f64 * m
        })
        .sum();
    total / margins.len() as f64
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    default_left: bool,
}

struct Grower<'a> {
    cfg: &'a GbdtConfig,
    /// Per column: present row indices sorted by value (stable in row order).
    sorted: Vec<Vec<(usize, f64)>>,
    grad: Vec<f64>,
    hess: Vec<f64>,
    features: Vec<usize>,
    nodes: Vec<Node>,
    in_node: Vec<bool>,
}

impl Grower<'_> {
    fn leaf(&self, rows: &[usize]) -> Node {
        let g: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        Node::Leaf {
            weight: -g / (h + self.cfg.lambda) * self.cfg.eta,
        }
    }

    fn best_split(&mut self, rows: &[usize]) -> Option<Candidate> {
        let g_total: f64 = rows.iter().map(|&r| self.grad[r]).sum();
        let h_total: f64 = rows.iter().map(|&r| self.hess[r]).sum();
        rows.iter().for_each(|&r| self.in_node[r] = true);
        let mut best: Option<Candidate> = None;
        let mcw = self.cfg.min_child_weight;
        for &j in &self.features {
            let present: Vec<(usize, f64)> = self.sorted[j].iter().copied().filter(|(r, _)| self.in_node[*r]).collect();
            let (g_present, h_present) = present
                .iter()
                .fold((0.0, 0.0), |(g, h), &(r, _)| (g + self.grad[r], h + self.hess[r]));
            let (g_miss, h_miss) = (g_total - g_present, h_total - h_present);
            let has_missing = present.len() < rows.len();
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..present.len().saturating_sub(1) {
                let (r, v) = present[k];
                gl += self.grad[r];
                hl += self.hess[r];
                let next = present[k + 1].1;
                if next == v {
                    continue;
                }
                let threshold = v + (next - v) / 2.0;
                let (gr, hr) = (g_present - gl, h_present - hl);
                let options: &[bool] = if has_missing { &[false, true] } else { &[false] };
                for &default_left in options {
                    let (gl2, hl2, gr2, hr2) = if default_left {
                        (gl + g_miss, hl + h_miss, gr, hr)
                    } else {
                        (gl, hl, gr + g_miss, hr + h_miss)
                    };
                    if hl2 < mcw || hr2 < mcw {
                        continue;
                    }
                    let gain = split_gain(gl2, hl2, gr2, hr2, self.cfg.lambda, self.cfg.gamma);
                    if best.as_ref().is_none_or(|b| gain > b.gain) {
                        best = Some(Candidate {
                            gain,
                            feature: j,
                            threshold,
                            default_left,
                        });
                    }
                }
            }
        }
        rows.iter().for_each(|&r| self.in_node[r] = false);
        best.filter(|b| b.gain > 0.0)
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize, x: &FeatureMatrix) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { weight: 0.0 });
        let split = if depth < self.cfg.max_depth { self.best_split(&rows) } else { None };
        let Some(c) = split else {
            self.nodes[id] = self.leaf(&rows);
            return id;
        };
        let (l_rows, r_rows): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| match x.rows[r][c.feature] {
            Some(v) => v < c.threshold,
            None => c.default_left,
        });
        let left = self.grow(l_rows, depth + 1, x);
        let right = self.grow(r_rows, depth + 1, x);
        self.nodes[id] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            default_left: c.default_left,
            left,
            right,
            gain: c.gain,
        };
        id
    }
}

/// Training margins after each round, for auditing the fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitTrace {
    pub loss_per_round: Vec<f64>,
    pub margins: Vec<f64>,
}

pub fn fit_gbdt(x: &FeatureMatrix, cfg: &GbdtConfig) -> Result<GbdtModel> {
    fit_gbdt_traced(x, cfg).map(|(m, _)| m)
}

pub fn fit_gbdt_traced(x: &FeatureMatrix, cfg: &GbdtConfig) -> Result<(GbdtModel, FitTrace)> {
    cfg.validate()?;
    let labels = x.labels.as_ref().ok_or_else(|| invalid!("fitting needs labels"))?;
    if x.columns.is_empty() {
        return Err(invalid!("feature matrix has no columns"));
    }
    if x.n_rows() < 2 {
        return Err(invalid!("fitting needs at least 2 rows"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(invalid!("labels are all {}; both classes are required", labels[0]));
    }
    let prevalence = pos as f64 / labels.len() as f64;
    let base_score = (prevalence / (1.0 - prevalence)).ln();

    let sorted: Vec<Vec<(usize, f64)>> = (0..x.columns.len())
        .map(|j| {
            let mut present: Vec<(usize, f64)> = x
                .column(j)
                .into_iter()
                .enumerate()
                .filter_map(|(r, v)| v.map(|v| (r, v)))
                .collect();
            present.sort_by(|a, b| a.1.total_cmp(&b.1));
            present
        })
        .collect();
    let n = x.n_rows();
    let p = x.columns.len();
    let per_tree = ((cfg.colsample * p as f64).ceil() as usize).clamp(1, p);
    let mut margins = vec![base_score; n];
    let mut trees = Vec::with_capacity(cfg.num_rounds);
    let mut loss_per_round = Vec::with_capacity(cfg.num_rounds);
    let mut grower = Grower {
        cfg,
        sorted,
        grad: vec![0.0; n],
        hess: vec![0.0; n],
        features: Vec::new(),
        nodes: Vec::new(),
        in_node: vec![false; n],
    };
    for round in 0..cfg.num_rounds {
        for r in 0..n {
            (grower.grad[r], grower.hess[r]) = logistic_grad_hess(margins[r], labels[r]);
        }
        grower.features = if per_tree == p {
            (0..p).collect()
        } else {
            let mut f = sample(&mut seeds::rng(cfg.seed, &[stream::GBDT, round as u64]), p, per_tree).into_vec();
            f.sort_unstable();
            f
        };
        grower.nodes = Vec::new();
        grower.grow((0..n).collect(), 0, x);
        let tree = Tree {
            nodes: std::mem::take(&mut grower.nodes),
        };
        for (m, row) in margins.iter_mut().zip(&x.rows) {
            *m += tree.predict_row(row);
        }
        loss_per_round.push(logistic_loss(&margins, labels));
        trees.push(tree);
    }
    let model = GbdtModel {
        columns: x.columns.clone(),
        base_score,
        config: cfg.clone(),
        trees,
    };
    Ok((model, FitTrace { loss_per_round, margins }))
}

impl GbdtModel {
    fn check_schema(&self, x: &FeatureMatrix) -> Result<()> {
        if let Some(c) = x.columns.iter().find(|c| !self.columns.contains(c)) {
            return Err(invalid!("unknown column `{c}`"));
        }
        if x.columns != self.columns {
            return Err(invalid!("columns {:?} do not match the training schema {:?}", x.columns, self.columns));
        }
        Ok(())
    }

    /// Raw additive scores `base_score + Σ tree outputs`.
    pub fn margins(&self, x: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_schema(x)?;
        Ok(x.rows
            .iter()
            .map(|row| self.trees.iter().fold(self.base_score, |m, t| m + t.predict_row(row)))
            .collect())
    }
}

pub fn predict_gbdt(model: &GbdtModel, x: &FeatureMatrix) -> Result<Vec<f64>> {
    Ok(model.margins(x)?.into_iter().map(sigmoid).collect())
}

/// Total realized split gain per feature, sorted descending (ties by column order).
pub fn feature_importance(model: &GbdtModel) -> Vec<(String, f64)> {
    let mut gain = vec![0.0; model.columns.len()];
    for t in &model.trees {
        for n in &t.nodes {
            if let Node::Split { feature, gain: g, .. } = n {
                gain[*feature] += g;
            }
        }
    }
    let mut out: Vec<(usize, f64)> = gain.into_iter().enumerate().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out.into_iter().map(|(j, g)| (model.columns[j].clone(), g)).collect()
}

/// Clinical encoding, optionally followed by the two image features.
pub fn encode_clinical(records: &[ClinicalRecord], image_feats: Option<&HashMap<String, [f64; 2]>>) -> Result<FeatureMatrix> {
    let mut columns: Vec<String> = CLINICAL_COLUMNS.iter().map(|s| s.to_string()).collect();
    if image_feats.is_some() {
        columns.extend(IMAGE_COLUMNS.iter().map(|s| s.to_string()));
    }
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
        let mut row = vec![
            flag(r.gender == Gender::Male),
            Some(r.bmi),
            r.age_started_smoking,
            r.age_quit_smoking,
            r.cigs_per_day,
            flag(r.smoker_status == SmokerStatus::Current),
            flag(r.smoker_status == SmokerStatus::Ex),
            r.pack_years,
            r.smoking_duration,
        ];
        if let Some(feats) = image_feats {
            let f = feats
                .get(&r.subject_id)
                .ok_or_else(|| invalid!("no image features for subject {}", r.subject_id))?;
            row.extend([Some(f[0]), Some(f[1])]);
        }
        rows.push(row);
    }
    if let Some(feats) = image_feats {
        let ids: HashSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
        if let Some(extra) = feats.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(invalid!("image features given for unknown subject {extra}"));
        }
    }
    let labels: Option<Vec<Label>> = records.iter().map(|r| r.label).collect();
    FeatureMatrix::new(columns, records.iter().map(|r| r.subject_id.clone()).collect(), rows, labels)
}

pub fn save_model(model: &GbdtModel, path: impl AsRef<Path>) -> Result<()> {
    canonical::write(model, path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<GbdtModel> {
    let path = path.as_ref();
    let m: GbdtModel = canonical::read(path)?;
    for t in &m.trees {
        for n in &t.nodes {
            if let Node::Split { feature, left, right, .. } = n {
                if *feature >= m.columns.len() || *left >= t.nodes.len() || *right >= t.nodes.len() {
                    return Err(Error::format(path, "tree references a missing node or column"));
                }
            }
        }
    }
    Ok(m)
}

pub fn write_importance_csv(importance: &[(String, f64)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("feature,gain\n");
    for (f, g) in importance {
        text.push_str(&format!("{f},{}\n", canonical::format_g17(*g)));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn importance_svg(importance: &[(String, f64)], title: &str) -> String {
    bar_chart(title, "total split gain", importance)
}

/// Importance keyed by feature, for lookups.
pub fn importance_map(model: &GbdtModel) -> BTreeMap<String, f64> {
    feature_importance(model).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_hess_at_zero() {
        assert_eq!(logistic_grad_hess(0.0, 1), (-0.5, 0.25));
        assert_eq!(logistic_grad_hess(0.0, 0), (0.5, 0.25));
    }

    #[test]
    fn gain_formula() {
        assert_eq!(split_gain(2.0, 3.0, -2.0, 3.0, 1.0, 0.0), 1.0);
        assert_eq!(split_gain(1.0, 1.0, 1.0, 1.0, 0.0, 0.0), 0.0);
        assert!(split_gain(2.0, 3.0, -2.0, 3.0, 1.0, 1.5) < 0.0);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = FeatureMatrix::new(
            vec!["a".into()],
            vec!["1".into(), "2".into()],
            vec![vec![Some(0.0)], vec![Some(1.0)]],
            Some(vec![1, 1]),
        )
        .unwrap();
        assert!(fit_gbdt(&x, &GbdtConfig::default()).is_err());
    }
}
