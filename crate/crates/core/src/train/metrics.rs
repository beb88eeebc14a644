use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::LabeledExample;
use crate::error::{Error, Result};
use crate::models::Classifier;

pub const TOP_KS: [usize; 3] = [1, 2, 3];

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub examples: usize,
    /// k to fraction of examples whose label is among the top k.
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

impl MetricsReport {
    pub fn top1(&self) -> f64 {
        self.topk_accuracy[&1]
    }
}

/// Top-k accuracy for k in 1..=3 (capped at the class count) and per-class
/// precision, recall and f1 from top-1 predictions.
pub fn evaluate(model: &dyn Classifier, examples: &[LabeledExample]) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("evaluate needs at least one example".into()));
    }
    let labels = model.labels();
    let index: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let truth = examples
        .iter()
        .map(|ex| {
            index
                .get(ex.label.as_str())
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("label {:?} is unknown to the model", ex.label)))
        })
        .collect::<Result<Vec<_>>>()?;
    let kmax = TOP_KS[TOP_KS.len() - 1].min(labels.len());
    let ranked: Vec<Vec<usize>> = examples
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let products: Vec<_> = chunk.iter().map(|ex| &ex.product).collect();
            model
                .predict_topk_batch(&products, kmax)
                .map(|rows| rows.into_iter().map(|r| r.into_iter().map(|p| p.class).collect()).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let n = examples.len();
    let mut topk_accuracy = BTreeMap::new();
    for k in TOP_KS {
        let k_eff = k.min(kmax);
        let hits = ranked
            .iter()
            .zip(&truth)
            .filter(|(r, t)| r[..k_eff].contains(t))
            .count();
        topk_accuracy.insert(k, hits as f64 / n as f64);
    }

    let c = labels.len();
    let (mut tp, mut predicted, mut support) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for (r, &t) in ranked.iter().zip(&truth) {
        predicted[r[0]] += 1;
        support[t] += 1;
        if r[0] == t {
            tp[t] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let precision = ratio(tp[i], predicted[i]);
            let recall = ratio(tp[i], support[i]);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            (
                l.clone(),
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: support[i],
                },
            )
        })
        .collect();
    Ok(MetricsReport {
        examples: n,
        topk_accuracy,
        per_class,
    })
}

/// Per-label `f1_b - f1_a` for labels with at least `min_support` examples,
/// largest lift first (ties by label).
pub fn f1_lift_report(a: &MetricsReport, b: &MetricsReport, min_support: usize) -> Result<Vec<(String, f64)>> {
    if !a.per_class.keys().eq(b.per_class.keys()) {
        return Err(Error::InvalidArgument("reports cover different label sets".into()));
    }
    let mut out = Vec::new();
    for ((label, ma), mb) in a.per_class.iter().zip(b.per_class.values()) {
        if ma.support != mb.support {
            return Err(Error::InvalidArgument(format!(
                "support for {label:?} differs ({} vs {}); reports come from different evaluation sets",
                ma.support, mb.support
            )));
        }
        if ma.support >= min_support {
            out.push((label.clone(), mb.f1 - ma.f1));
        }
    }
    out.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    Ok(out)
}
