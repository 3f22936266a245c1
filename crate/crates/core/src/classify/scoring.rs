use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::Real;

/// K×C cosine similarities between proposal features and text queries.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Real> SimilarityMatrix<T> {
    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::structural("ragged similarity rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn num_proposals(&self) -> usize {
        self.rows
    }

    pub fn num_queries(&self) -> usize {
        self.cols
    }

    pub fn get(&self, k: usize, c: usize) -> T {
        self.values[k * self.cols + c]
    }

    pub fn row(&self, k: usize) -> &[T] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }

    /// Index of the largest entry in row `k`; ties go to the lower query index.
    pub fn argmax(&self, k: usize) -> usize {
        let row = self.row(k);
        let mut best = 0;
        for (c, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = c;
            }
        }
        best
    }
}

/// `L = features · textᵀ`. Both inputs are expected to have unit rows.
pub fn similarity<T: Real>(features: &[Vec<T>], text: &[Vec<T>]) -> Result<SimilarityMatrix<T>> {
    let dim = text.first().map(Vec::len).or_else(|| features.first().map(Vec::len));
    if let Some(d) = dim {
        if let Some(bad) = features.iter().chain(text).find(|v| v.len() != d) {
            return Err(Error::structural(format!(
                "embedding of length {} where {d} was expected",
                bad.len()
            )));
        }
    }
    let values = features
        .iter()
        .flat_map(|f| {
            text.iter()
                .map(move |t| f.iter().zip(t).map(|(a, b)| *a * *b).sum::<T>())
        })
        .collect();
    Ok(SimilarityMatrix {
        rows: features.len(),
        cols: text.len(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmsStats<T> {
    /// Per-query mean over proposals.
    pub mean: Vec<T>,
    /// Per-query population standard deviation.
    pub std: Vec<T>,
    /// Per-proposal best query.
    pub best_query: Vec<usize>,
    /// Per-proposal standardized maximum similarity; `None` when the best
    /// query's deviation is zero.
    pub score: Vec<Option<T>>,
}

/// Standardizes each proposal's maximum similarity against its query's
/// distribution and keeps proposals scoring at least `tau_sms`. Proposals
/// whose best query has zero spread are kept.
pub fn sms_filter<T: Real>(sim: &SimilarityMatrix<T>, tau_sms: T) -> (Vec<usize>, SmsStats<T>) {
    let (k, c) = (sim.num_proposals(), sim.num_queries());
    let kk = T::count(k.max(1));
    let mut mean = vec![T::zero(); c];
    let mut std = vec![T::zero(); c];
    for q in 0..c {
        let mut sum = T::zero();
        for p in 0..k {
            sum = sum + sim.get(p, q);
        }
        let mu = sum / kk;
        let mut ss = T::zero();
        for p in 0..k {
            let d = sim.get(p, q) - mu;
            ss = ss + d * d;
        }
        mean[q] = mu;
        std[q] = (ss / kk).sqrt();
    }

    let best_query: Vec<usize> = (0..k).map(|p| sim.argmax(p)).collect();
    let score: Vec<Option<T>> = (0..k)
        .map(|p| {
            let q = best_query[p];
            (std[q] > T::zero()).then(|| (sim.get(p, q) - mean[q]) / std[q])
        })
        .collect();
    let kept = (0..k)
        .filter(|&p| score[p].is_none_or(|s| s >= tau_sms))
        .collect();
    (
        kept,
        SmsStats {
            mean,
            std,
            best_query,
            score,
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// One class per proposal.
    #[default]
    Top1,
    /// The globally highest-scoring (proposal, class) pairs.
    TopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction<T> {
    pub proposal: usize,
    pub class: usize,
    pub confidence: f64,
    pub similarity: T,
}

/// Emits predictions for the kept proposals. Every prediction carries
/// confidence 1.0; the similarity is recorded separately.
pub fn assign_labels<T: Real>(
    sim: &SimilarityMatrix<T>,
    kept: &[usize],
    protocol: Protocol,
    top_k: usize,
) -> Vec<Prediction<T>> {
    let make = |p: usize, c: usize| Prediction {
        proposal: p,
        class: c,
        confidence: 1.0,
        similarity: sim.get(p, c),
    };
    match protocol {
        Protocol::Top1 => kept.iter().map(|&p| make(p, sim.argmax(p))).collect(),
        Protocol::TopK => {
            let mut cells: Vec<(usize, usize)> = kept
                .iter()
                .flat_map(|&p| (0..sim.num_queries()).map(move |c| (p, c)))
                .collect();
            cells.sort_by(|&(p1, c1), &(p2, c2)| {
                sim.get(p2, c2)
                    .partial_cmp(&sim.get(p1, c1))
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(c1.cmp(&c2))
                    .then(p1.cmp(&p2))
            });
            cells.truncate(top_k);
            cells.into_iter().map(|(p, c)| make(p, c)).collect()
        }
    }
}
