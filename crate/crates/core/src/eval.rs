//! F1@IoU evaluation for set-valued grounding predictions.

use crate::error::{Error, Result};
use crate::scene::{Dataset, Query, Scene, Subset};
use crate::model::{GroundingNet, SceneInputs};
use crate::tensor::Tensor;
use crate::trainer::Checkpoint;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;

/// Axis-aligned 3-D box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub centroid: [f64; 3],
    pub size: [f64; 3],
}

impl Box3D {
    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }
}

pub fn iou_aabb(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for k in 0..3 {
        let lo = (a.centroid[k] - a.size[k] / 2.0).max(b.centroid[k] - b.size[k] / 2.0);
        let hi = (a.centroid[k] + a.size[k] / 2.0).min(b.centroid[k] + b.size[k] / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices whose sigmoid probability strictly exceeds `threshold`.
pub fn select_predictions(logits: &[f64], threshold: f64) -> Vec<usize> {
    logits
        .iter()
        .enumerate()
        .filter(|(_, &z)| crate::tensor::sigmoid_scalar(z) > threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Greedy one-to-one matching by descending IoU; a pair counts when IoU > tau.
pub fn match_predictions(preds: &[Box3D], gts: &[Box3D], tau: f64) -> usize {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(preds.len() * gts.len());
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou_aabb(p, g);
            if v > tau {
                pairs.push((v, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; preds.len()];
    let mut used_g = vec![false; gts.len()];
    let mut tp = 0;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_g[j] {
            used_p[i] = true;
            used_g[j] = true;
            tp += 1;
        }
    }
    tp
}

/// Per-query F1 with the zero-target convention: no ground truth and no
/// prediction scores 1, no ground truth with any prediction scores 0.
pub fn query_f1(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    if n_gt == 0 {
        return if n_pred == 0 { 1.0 } else { 0.0 };
    }
    if n_pred == 0 || tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / n_pred as f64;
    let r = tp as f64 / n_gt as f64;
    2.0 * p * r / (p + r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub subset: String,
    pub count: usize,
    pub f1: f64,
}

/// Per-subset mean F1 plus the query-weighted `all` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    pub all: MetricsRow,
}

pub const CSV_HEADER: &str = "subset,count,f1_at_0.5";

impl MetricsTable {
    pub fn from_scores(scores: &[(Subset, f64)]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("cannot evaluate an empty dataset".into()));
        }
        let mut rows = Vec::new();
        for s in Subset::ALL {
            let v: Vec<f64> = scores.iter().filter(|x| x.0 == s).map(|x| x.1).collect();
            let f1 = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
            rows.push(MetricsRow {
                subset: s.label().to_string(),
                count: v.len(),
                f1,
            });
        }
        let all = MetricsRow {
            subset: "all".into(),
            count: scores.len(),
            f1: scores.iter().map(|x| x.1).sum::<f64>() / scores.len() as f64,
        };
        Ok(MetricsTable { rows, all })
    }

    pub fn get(&self, s: Subset) -> &MetricsRow {
        &self.rows[s.index()]
    }

    /// `all` equals the count-weighted mean of subset scores.
    pub fn weighted_all(&self) -> f64 {
        let n: usize = self.rows.iter().map(|r| r.count).sum();
        self.rows.iter().map(|r| r.f1 * r.count as f64).sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in self.rows.iter().chain(std::iter::once(&self.all)) {
            let _ = writeln!(s, "{},{},{}", r.subset, r.count, r.f1);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Data("metrics CSV header mismatch".into()));
        }
        let mut rows = Vec::new();
        let mut all = None;
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Data(format!("bad metrics row {line:?}")));
            }
            let row = MetricsRow {
                subset: f[0].to_string(),
                count: f[1].parse().map_err(|_| Error::Data(format!("bad count in {line:?}")))?,
                f1: f[2].parse().map_err(|_| Error::Data(format!("bad f1 in {line:?}")))?,
            };
            if row.subset == "all" {
                all = Some(row);
            } else {
                rows.push(row);
            }
        }
        let all = all.ok_or_else(|| Error::Data("metrics CSV lacks an all row".into()))?;
        Ok(MetricsTable { rows, all })
    }
}

/// Which boxes stand in for the selected objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoxSource {
    /// Jittered proposal boxes (the realistic setting).
    Candidates,
    /// Exact ground-truth boxes.
    GroundTruth,
}

/// Scores one query given the selected object indices.
pub fn score_query(scene: &Scene, query: &Query, selected: &[usize], boxes: BoxSource, tau: f64) -> f64 {
    let source: Vec<Box3D> = match boxes {
        BoxSource::Candidates => scene.candidate_boxes(),
        BoxSource::GroundTruth => scene.objects.iter().map(|o| o.gt_box()).collect(),
    };
    let preds: Vec<Box3D> = selected.iter().map(|&i| source[i]).collect();
    let gts: Vec<Box3D> = query.target_ids.iter().map(|&i| scene.objects[i].gt_box()).collect();
    let tp = match_predictions(&preds, &gts, tau);
    query_f1(tp, preds.len(), gts.len())
}

/// Runs `select` on every (scene, query) and aggregates F1@tau per subset.
pub fn evaluate<F>(dataset: &Dataset, boxes: BoxSource, tau: f64, select: F) -> Result<MetricsTable>
where
    F: Fn(&Scene, &Query) -> Result<Vec<usize>> + Sync,
{
    let items: Vec<(&Scene, &Query)> = dataset
        .scenes
        .iter()
        .flat_map(|s| s.queries.iter().map(move |q| (s, q)))
        .collect();
    let scores = items
        .par_iter()
        .map(|(s, q)| Ok((q.subset, score_query(s, q, &select(s, q)?, boxes, tau))))
        .collect::<Result<Vec<_>>>()?;
    MetricsTable::from_scores(&scores)
}

/// Converts a logit tensor to the selected index set.
pub fn select_from_tensor(z: &Tensor, threshold: f64) -> Vec<usize> {
    select_predictions(z.data(), threshold)
}

/// Scores a network's thresholded final-stage predictions on every query.
pub fn evaluate_net(dataset: &Dataset, net: &GroundingNet, threshold: f64, tau: f64) -> Result<MetricsTable> {
    if dataset.header.vocabulary.len() != net.arch.vocab_size {
        return Err(Error::Config(format!(
            "dataset vocabulary has {} words, network expects {}",
            dataset.header.vocabulary.len(),
            net.arch.vocab_size
        )));
    }
    let inputs = dataset
        .scenes
        .par_iter()
        .map(|s| Ok((s.scene_id.clone(), SceneInputs::new(s)?)))
        .collect::<Result<HashMap<_, _>>>()?;
    evaluate(dataset, BoxSource::Candidates, tau, |scene, query| {
        let logits = net.predict_logits(&inputs[&scene.scene_id], &query.tokens)?;
        Ok(select_predictions(&logits, threshold))
    })
}

/// F1@tau of a checkpoint, thresholding at its recorded prediction cutoff.
pub fn f1_at_threshold(dataset: &Dataset, checkpoint: &Checkpoint, tau: f64) -> Result<MetricsTable> {
    let net = checkpoint.to_net()?;
    evaluate_net(dataset, &net, checkpoint.loss_config.predict_threshold, tau)
}

/// Upper-bound harness: selects exactly the targets and scores them with
/// ground-truth boxes.
pub fn oracle_metrics(dataset: &Dataset, tau: f64) -> Result<MetricsTable> {
    evaluate(dataset, BoxSource::GroundTruth, tau, |_, q| Ok(q.target_ids.clone()))
}
