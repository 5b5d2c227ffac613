//! Ranking and calibration metrics.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::linalg::Matrix;

/// Scores (higher means more positive) paired with binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBinarySet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredBinarySet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return domain(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            ));
        }
        if scores.iter().any(|s| s.is_nan()) {
            return domain("NaN score");
        }
        let pos = labels.iter().filter(|&&l| l).count();
        if pos == 0 || pos == labels.len() {
            return domain("ranking metrics need at least one positive and one negative label");
        }
        Ok(Self { scores, labels })
    }

    /// Positive-class scores followed by negative-class scores.
    pub fn from_groups(positives: &[f64], negatives: &[f64]) -> Result<Self> {
        let scores = positives.iter().chain(negatives).copied().collect();
        let labels = std::iter::repeat(true)
            .take(positives.len())
            .chain(std::iter::repeat(false).take(negatives.len()))
            .collect();
        Self::new(scores, labels)
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Indices sorted by descending score, split into runs of equal score.
    fn tie_groups_desc(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some(g) if self.scores[g[0]] == self.scores[i] => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        groups
    }
}

/// Area under the ROC curve as the Mann–Whitney statistic
/// `P(s⁺ > s⁻) + ½ P(s⁺ = s⁻)`, via tie-averaged rank sums.
pub fn auroc(data: &ScoredBinarySet) -> f64 {
    let (pos, neg) = data.counts();
    let groups = data.tie_groups_desc();
    // ascending ranks: walk groups from the lowest score upwards
    let mut rank_sum_pos = 0.0;
    let mut next_rank = 1.0;
    for g in groups.iter().rev() {
        let k = g.len() as f64;
        let avg = next_rank + (k - 1.0) / 2.0;
        let p = g.iter().filter(|&&i| data.labels[i]).count() as f64;
        rank_sum_pos += avg * p;
        next_rank += k;
    }
    let (p, n) = (pos as f64, neg as f64);
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n)
}

/// Average precision: `Σ precision · Δrecall` over thresholds at each distinct
/// score, in descending order, with tied scores forming a single threshold.
pub fn aupr(data: &ScoredBinarySet) -> f64 {
    let (pos, _) = data.counts();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut ap = 0.0;
    for g in data.tie_groups_desc() {
        let new_tp = g.iter().filter(|&&i| data.labels[i]).count();
        tp += new_tp;
        seen += g.len();
        if new_tp > 0 {
            ap += (tp as f64 / seen as f64) * (new_tp as f64 / pos as f64);
        }
    }
    ap
}

/// Trapezoidal area under the precision–recall curve, starting from
/// `(recall 0, precision 1)`. Reported next to [`aupr`] for comparison.
pub fn aupr_trapezoid(data: &ScoredBinarySet) -> f64 {
    let (pos, _) = data.counts();
    let mut tp = 0usize;
    let mut seen = 0usize;
    let (mut last_r, mut last_p) = (0.0, 1.0);
    let mut area = 0.0;
    for g in data.tie_groups_desc() {
        tp += g.iter().filter(|&&i| data.labels[i]).count();
        seen += g.len();
        let r = tp as f64 / pos as f64;
        let p = tp as f64 / seen as f64;
        area += (r - last_r) * (p + last_p) / 2.0;
        last_r = r;
        last_p = p;
    }
    area
}

/// Brier score ×100: mean over rows of `Σ_c (p_c − y_c)²`.
pub fn brier(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() {
        return domain(format!(
            "{} probability rows but {} labels",
            probs.rows(),
            labels.len()
        ));
    }
    if labels.is_empty() {
        return domain("empty input");
    }
    let mut total = 0.0;
    for (i, (row, &l)) in probs.iter_rows().zip(labels).enumerate() {
        if l >= row.len() {
            return domain(format!("label {l} out of range in row {i}"));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return domain(format!("row {i} is not a probability vector (sum {sum})"));
        }
        total += row
            .iter()
            .enumerate()
            .map(|(c, p)| {
                let y = if c == l { 1.0 } else { 0.0 };
                (p - y) * (p - y)
            })
            .sum::<f64>();
    }
    Ok(100.0 * total / labels.len() as f64)
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return domain(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        ));
    }
    if preds.is_empty() {
        return domain("empty input");
    }
    let hits = preds.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Ranks starting at 1, with tied values sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of tie-averaged ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return domain("spearman needs two equal-length samples of size ≥ 2");
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return domain("NaN in spearman input");
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return domain("spearman is undefined for a constant sample");
    }
    Ok(sab / (saa * sbb).sqrt())
}
