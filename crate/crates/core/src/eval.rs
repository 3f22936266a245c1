//! Instance segmentation AP/AR.
//!
//! Matching is greedy per class and per IoU threshold: predictions are
//! ranked by confidence (ties: larger mask first, then lower id) and each is
//! matched to the still-unmatched ground-truth instance of its class with
//! the highest IoU, provided that IoU reaches the threshold. AP integrates
//! the precision envelope over every recall step (all-point interpolation);
//! AR is the matched fraction of ground truth.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sets::PointMask;

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub mask: PointMask,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrediction {
    pub id: u32,
    pub mask: PointMask,
    pub class_id: u32,
    pub confidence: f64,
}

/// 0.25, 0.50, 0.55, …, 0.95.
pub fn standard_thresholds() -> Vec<f64> {
    let mut t = vec![0.25];
    t.extend((0..10).map(|i| (50 + 5 * i) as f64 / 100.0));
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub thresholds: Vec<f64>,
    pub class_agnostic: bool,
    /// Classes dropped from both ground truth and predictions.
    pub excluded_classes: Vec<u32>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            thresholds: standard_thresholds(),
            class_agnostic: false,
            excluded_classes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub ap: f64,
    pub ap50: f64,
    pub ap25: f64,
    pub ar: f64,
    pub ar50: f64,
    pub ar25: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: u32,
    pub num_gt: usize,
    pub num_predictions: usize,
    /// AP and AR at each threshold of the report.
    pub ap_at: Vec<f64>,
    pub ar_at: Vec<f64>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub class_agnostic: bool,
    /// Classes with at least one ground-truth instance, ascending id.
    pub classes: Vec<ClassMetrics>,
    pub mean: Summary,
}

fn summarize(thresholds: &[f64], ap: &[f64], ar: &[f64]) -> Summary {
    let at = |vals: &[f64], t: f64| {
        thresholds
            .iter()
            .position(|x| (x - t).abs() < 1e-9)
            .map_or(f64::NAN, |i| vals[i])
    };
    let avg = |vals: &[f64]| {
        let sel: Vec<f64> = thresholds
            .iter()
            .zip(vals)
            .filter(|(t, _)| **t >= 0.5 - 1e-9 && **t <= 0.95 + 1e-9)
            .map(|(_, v)| *v)
            .collect();
        if sel.is_empty() {
            f64::NAN
        } else {
            sel.iter().sum::<f64>() / sel.len() as f64
        }
    };
    Summary {
        ap: avg(ap),
        ap50: at(ap, 0.5),
        ap25: at(ap, 0.25),
        ar: avg(ar),
        ar50: at(ar, 0.5),
        ar25: at(ar, 0.25),
    }
}

/// All-point interpolated AP from a ranked TP/FP sequence.
pub fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || tp.is_empty() {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut recall = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Greedy matching of ranked predictions; returns the TP flag per prediction.
fn greedy_match(ious: &[Vec<f64>], threshold: f64) -> Vec<bool> {
    let num_gt = ious.first().map_or(0, Vec::len);
    let mut taken = vec![false; num_gt];
    ious.iter()
        .map(|row| {
            let mut best: Option<usize> = None;
            for (g, &iou) in row.iter().enumerate() {
                if taken[g] || iou < threshold {
                    continue;
                }
                if best.is_none_or(|b| iou > row[b]) {
                    best = Some(g);
                }
            }
            if let Some(g) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

pub fn evaluate(
    predictions: &[EvalPrediction],
    ground_truth: &[GroundTruthInstance],
    options: &EvalOptions,
) -> Result<EvalReport> {
    let width = ground_truth
        .first()
        .map(|g| g.mask.width())
        .or_else(|| predictions.first().map(|p| p.mask.width()));
    if let Some(n) = width {
        let bad = ground_truth.iter().map(|g| g.mask.width()).chain(predictions.iter().map(|p| p.mask.width()));
        if let Some(w) = bad.into_iter().find(|&w| w != n) {
            return Err(Error::structural(format!("mask over {w} points where {n} expected")));
        }
    }
    if ground_truth.iter().any(|g| g.mask.is_empty()) {
        return Err(Error::Invalid("ground-truth instance with an empty mask".into()));
    }

    let excluded: BTreeSet<u32> = options.excluded_classes.iter().copied().collect();
    let class_of = |c: u32| if options.class_agnostic { 0 } else { c };
    let mut by_class: BTreeMap<u32, (Vec<&GroundTruthInstance>, Vec<&EvalPrediction>)> = BTreeMap::new();
    for g in ground_truth.iter().filter(|g| !excluded.contains(&g.class_id)) {
        by_class.entry(class_of(g.class_id)).or_default().0.push(g);
    }
    for p in predictions.iter().filter(|p| !excluded.contains(&p.class_id)) {
        if let Some(entry) = by_class.get_mut(&class_of(p.class_id)) {
            entry.1.push(p);
        }
    }

    let thresholds = options.thresholds.clone();
    let classes: Vec<ClassMetrics> = by_class
        .into_par_iter()
        .map(|(class_id, (gts, mut preds))| {
            preds.sort_by(|a, b| {
                b.confidence
                    .total_cmp(&a.confidence)
                    .then(b.mask.len().cmp(&a.mask.len()))
                    .then(a.id.cmp(&b.id))
            });
            let ious: Vec<Vec<f64>> = preds
                .iter()
                .map(|p| gts.iter().map(|g| p.mask.iou(&g.mask)).collect())
                .collect();
            let (ap_at, ar_at): (Vec<f64>, Vec<f64>) = thresholds
                .iter()
                .map(|&t| {
                    let tp = greedy_match(&ious, t);
                    let hits = tp.iter().filter(|&&x| x).count();
                    (average_precision(&tp, gts.len()), hits as f64 / gts.len() as f64)
                })
                .unzip();
            ClassMetrics {
                class_id,
                num_gt: gts.len(),
                num_predictions: preds.len(),
                summary: summarize(&thresholds, &ap_at, &ar_at),
                ap_at,
                ar_at,
            }
        })
        .collect();

    let mean_at = |f: &dyn Fn(&ClassMetrics) -> Vec<f64>| -> Vec<f64> {
        (0..thresholds.len())
            .map(|i| {
                if classes.is_empty() {
                    0.0
                } else {
                    classes.iter().map(|c| f(c)[i]).sum::<f64>() / classes.len() as f64
                }
            })
            .collect()
    };
    let mean_ap = mean_at(&|c| c.ap_at.clone());
    let mean_ar = mean_at(&|c| c.ar_at.clone());
    Ok(EvalReport {
        mean: summarize(&thresholds, &mean_ap, &mean_ar),
        thresholds,
        class_agnostic: options.class_agnostic,
        classes,
    })
}

/// Mean of per-class summaries within each named group. Groups with no
/// evaluated class are reported as `None`; a class id the report does not
/// know is an error.
pub fn group_report(
    report: &EvalReport,
    groups: &BTreeMap<String, Vec<u32>>,
) -> Result<BTreeMap<String, Option<Summary>>> {
    let lookup: BTreeMap<u32, &ClassMetrics> = report.classes.iter().map(|c| (c.class_id, c)).collect();
    groups
        .iter()
        .map(|(name, ids)| {
            let members = ids
                .iter()
                .map(|id| {
                    lookup.get(id).copied().ok_or_else(|| {
                        Error::Invalid(format!("group {name:?} lists unknown class {id}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            if members.is_empty() {
                return Ok((name.clone(), None));
            }
            let n = members.len() as f64;
            let mean = |f: fn(&Summary) -> f64| members.iter().map(|c| f(&c.summary)).sum::<f64>() / n;
            Ok((
                name.clone(),
                Some(Summary {
                    ap: mean(|s| s.ap),
                    ap50: mean(|s| s.ap50),
                    ap25: mean(|s| s.ap25),
                    ar: mean(|s| s.ar),
                    ar50: mean(|s| s.ar50),
                    ar25: mean(|s| s.ar25),
                }),
            ))
        })
        .collect()
}

/// Tab-separated flat table: one row per class plus a `mean` row.
pub fn flat_table(report: &EvalReport) -> String {
    let mut out = String::from("class\tnum_gt\tAP\tAP50\tAP25\tAR\tAR50\tAR25\n");
    let mut row = |name: String, n: usize, s: &Summary| {
        out.push_str(&format!(
            "{name}\t{n}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            s.ap, s.ap50, s.ap25, s.ar, s.ar50, s.ar25
        ));
    };
    for c in &report.classes {
        row(c.class_id.to_string(), c.num_gt, &c.summary);
    }
    let total = report.classes.iter().map(|c| c.num_gt).sum();
    row("mean".into(), total, &report.mean);
    out
}
