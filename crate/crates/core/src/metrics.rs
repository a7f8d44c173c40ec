//! Classification metrics and the analysis computations used by the
//! evaluation protocol: balanced accuracy, rank-based AUC, cosine
//! consistency, group-average maps and structure/pair rankings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// Balanced accuracy: (sensitivity + specificity) / 2.
pub fn bacc(labels: &[bool], predictions: &[bool]) -> Result<f64> {
    if labels.len() != predictions.len() {
        return Err(Error::data("bacc operands differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("bacc requires both classes in the labels"));
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&l, &p) in labels.iter().zip(predictions) {
        if l && p {
            tp += 1;
        }
        if !l && !p {
            tn += 1;
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}

/// Area under the ROC curve by the rank statistic: the probability that a
/// positive outscores a negative, counting ties as half.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::data("auc operands differ in length"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::data("auc requires both classes in the labels"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::numeric("auc scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // average ranks over tie groups (1-based)
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    Ok((rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64))
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::data("cosine operands differ in length or are empty"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::numeric("cosine similarity of a zero vector"));
    }
    Ok(dot / (nu * nv))
}

/// Median of a sample (mean of the two central order statistics for even n).
pub fn median(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::data("median of an empty sample"));
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    Ok(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Pair per-subject grading vectors from two models and report the median
/// cosine similarity.
pub fn consistency_study(dg_a: &[Vec<f64>], dg_b: &[Vec<f64>]) -> Result<f64> {
    if dg_a.len() != dg_b.len() || dg_a.is_empty() {
        return Err(Error::data("consistency study needs paired nonempty vector sets"));
    }
    let sims: Vec<f64> = dg_a
        .iter()
        .zip(dg_b)
        .map(|(a, b)| cosine_similarity(a, b))
        .collect::<Result<Vec<_>>>()?;
    median(&sims)
}

/// Voxelwise mean of a set of grading maps with identical geometry.
pub fn group_average_map(maps: &[&Volume3D]) -> Result<Volume3D> {
    let first = maps.first().ok_or_else(|| Error::data("empty group"))?;
    let dims = first.dims();
    if maps.iter().any(|m| m.dims() != dims) {
        return Err(Error::data("group maps have mixed dims"));
    }
    let n = first.len();
    let mut acc = vec![0.0f64; n];
    for m in maps {
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += v as f64;
        }
    }
    let inv = 1.0 / maps.len() as f64;
    let data: Vec<f32> = acc.into_iter().map(|a| (a * inv) as f32).collect();
    Volume3D::new(dims, first.spacing(), data)
}

/// Structures ranked by mean absolute grading score over subjects,
/// descending, ties broken by smaller structure id. Returns 1-based ids with
/// their scores, at most k entries.
pub fn top_structures(dg_vectors: &[Vec<f64>], k: usize) -> Result<Vec<(usize, f64)>> {
    let first = dg_vectors.first().ok_or_else(|| Error::data("no DG vectors"))?;
    let s = first.len();
    if dg_vectors.iter().any(|v| v.len() != s) {
        return Err(Error::data("inconsistent DG vector lengths"));
    }
    let n = dg_vectors.len() as f64;
    let mut scored: Vec<(usize, f64)> = (0..s)
        .map(|i| {
            let mean_abs = dg_vectors.iter().map(|v| v[i].abs()).sum::<f64>() / n;
            (i + 1, mean_abs)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Result of the cross-structure connectivity analysis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdjacencyAnalysis {
    /// Mean adjacency of the positive class (row-major s x s).
    pub mean_pos: Vec<f64>,
    /// Mean adjacency of the negative class.
    pub mean_neg: Vec<f64>,
    pub structures: usize,
    /// Upper-triangle pairs (a < b, 1-based) ranked by |mean_pos - mean_neg|
    /// descending; ties by ascending (a, b).
    pub top_pairs: Vec<(usize, usize, f64)>,
}

/// Average the adjacency matrices per class, take the absolute elementwise
/// difference and rank the upper-triangle entries.
pub fn adjacency_group_analysis(
    pos_adjacencies: &[Vec<f64>],
    neg_adjacencies: &[Vec<f64>],
    structures: usize,
    top_k: usize,
) -> Result<AdjacencyAnalysis> {
    let n2 = structures * structures;
    if pos_adjacencies.is_empty() || neg_adjacencies.is_empty() {
        return Err(Error::data("adjacency analysis needs both classes"));
    }
    for a in pos_adjacencies.iter().chain(neg_adjacencies) {
        if a.len() != n2 {
            return Err(Error::data("adjacency matrix size mismatch"));
        }
    }
    let mean_of = |set: &[Vec<f64>]| -> Vec<f64> {
        let inv = 1.0 / set.len() as f64;
        let mut acc = vec![0.0f64; n2];
        for a in set {
            for (x, &v) in acc.iter_mut().zip(a) {
                *x += v;
            }
        }
        acc.iter_mut().for_each(|x| *x *= inv);
        acc
    };
    let mean_pos = mean_of(pos_adjacencies);
    let mean_neg = mean_of(neg_adjacencies);
    let mut pairs = Vec::with_capacity(structures * (structures - 1) / 2);
    for a in 0..structures {
        for b in (a + 1)..structures {
            let d = (mean_pos[a * structures + b] - mean_neg[a * structures + b]).abs();
            pairs.push((a + 1, b + 1, d));
        }
    }
    pairs.sort_by(|x, y| {
        y.2.partial_cmp(&x.2)
            .expect("finite differences")
            .then(x.0.cmp(&y.0))
            .then(x.1.cmp(&y.1))
    });
    pairs.truncate(top_k);
    Ok(AdjacencyAnalysis {
        mean_pos,
        mean_neg,
        structures,
        top_pairs: pairs,
    })
}

/// Normalize a matrix to [0, 1] for export; constant matrices map to zeros.
pub fn normalize_unit_interval(m: &[f64]) -> Vec<f64> {
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; m.len()];
    }
    m.iter().map(|&x| (x - lo) / (hi - lo)).collect()
}

/// Per-repetition evaluation results for one task/dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub dataset: String,
    pub bacc: Vec<f64>,
    pub auc: Vec<f64>,
    pub mean_bacc: f64,
    pub mean_auc: f64,
}

impl TaskReport {
    pub fn from_runs(dataset: &str, bacc: Vec<f64>, auc: Vec<f64>) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        TaskReport {
            dataset: dataset.to_string(),
            mean_bacc: mean(&bacc),
            mean_auc: mean(&auc),
            bacc,
            auc,
        }
    }
}

/// Evaluation report across repetitions and datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub repetitions: usize,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, dataset: &str) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.dataset == dataset)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn bacc_cases() {
        let labels = [true, true, false, false];
        assert_eq!(bacc(&labels, &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(bacc(&labels, &[true, true, true, true]).unwrap(), 0.5);
        assert_eq!(bacc(&labels, &[true, false, false, false]).unwrap(), 0.75);
        assert!(bacc(&[true, true], &[true, true]).is_err());
    }

    #[test]
    fn bacc_symmetric_under_relabeling() {
        let mut rng = Rng::seed_from_u64(2);
        for _ in 0..50 {
            let labels: Vec<bool> = (0..20).map(|i| i < 10 || rng.next_f64() < 0.3).collect();
            let preds: Vec<bool> = (0..20).map(|_| rng.next_f64() < 0.5).collect();
            if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
                continue;
            }
            let a = bacc(&labels, &preds).unwrap();
            let flipped_l: Vec<bool> = labels.iter().map(|&l| !l).collect();
            let flipped_p: Vec<bool> = preds.iter().map(|&p| !p).collect();
            let b = bacc(&flipped_l, &flipped_p).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_cases() {
        let labels = [true, true, false, false];
        assert_eq!(auc(&labels, &[0.9, 0.8, 0.2, 0.1]).unwrap(), 1.0);
        assert_eq!(auc(&labels, &[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert_eq!(auc(&labels, &[0.9, 0.4, 0.5, 0.1]).unwrap(), 0.75);
        assert!(auc(&[true], &[0.5]).is_err());
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = Rng::seed_from_u64(17);
        for trial in 0..200 {
            let n = 2 + rng.below(48);
            let mut labels: Vec<bool> = (0..n).map(|_| rng.next_f64() < 0.5).collect();
            labels[0] = true;
            if n > 1 {
                labels[1] = false;
            }
            // quantized scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(7) as f64) / 6.0).collect();
            let fast = auc(&labels, &scores).unwrap();
            let mut wins = 0.0f64;
            let mut total = 0.0f64;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] && !labels[j] {
                        total += 1.0;
                        if scores[i] > scores[j] {
                            wins += 1.0;
                        } else if scores[i] == scores[j] {
                            wins += 0.5;
                        }
                    }
                }
            }
            let slow = wins / total;
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn cosine_scale_invariant() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100 {
            let u: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let v: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let c1 = cosine_similarity(&u, &v).unwrap();
            let scaled: Vec<f64> = u.iter().map(|x| x * 37.5).collect();
            let c2 = cosine_similarity(&scaled, &v).unwrap();
            assert!((c1 - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn consistency_identical_sets_is_one() {
        let set: Vec<Vec<f64>> = vec![vec![0.5, -0.5, 0.1], vec![1.0, 0.2, 0.3]];
        assert_eq!(consistency_study(&set, &set).unwrap(), 1.0);
    }

    #[test]
    fn group_average_single_subject_is_identity() {
        let v = Volume3D::new((2, 2, 1), (1.0, 1.0, 1.0), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let avg = group_average_map(&[&v]).unwrap();
        assert_eq!(avg.data(), v.data());
        assert!(group_average_map(&[]).is_err());
    }

    #[test]
    fn group_average_of_two() {
        let a = Volume3D::filled((2, 1, 1), (1.0, 1.0, 1.0), 1.0);
        let b = Volume3D::filled((2, 1, 1), (1.0, 1.0, 1.0), 0.0);
        let avg = group_average_map(&[&a, &b]).unwrap();
        assert_eq!(avg.data(), &[0.5, 0.5]);
    }

    #[test]
    fn top_structures_ranking_and_ties() {
        let vs = vec![vec![0.1, -0.9, 0.5, 0.5], vec![-0.1, 0.9, 0.5, 0.5]];
        let top = top_structures(&vs, 10).unwrap();
        assert_eq!(top.len(), 4);
        assert_eq!(top[0].0, 2);
        // tie between structures 3 and 4 resolves by smaller id
        assert_eq!(top[1].0, 3);
        assert_eq!(top[2].0, 4);
        assert_eq!(top[3].0, 1);
        let top1 = top_structures(&vs, 1).unwrap();
        assert_eq!(top1.len(), 1);
    }

    #[test]
    fn adjacency_analysis_identical_means() {
        let a = vec![vec![0.0, 1.0, 1.0, 0.0]];
        let analysis = adjacency_group_analysis(&a, &a, 2, 25).unwrap();
        assert_eq!(analysis.top_pairs.len(), 1);
        assert_eq!(analysis.top_pairs[0], (1, 2, 0.0));
    }

    #[test]
    fn adjacency_analysis_ranks_difference() {
        // 3 structures; pair (1,3) differs most
        let pos = vec![vec![0.0, 0.1, 0.9, 0.1, 0.0, 0.2, 0.9, 0.2, 0.0]];
        let neg = vec![vec![0.0, 0.1, 0.1, 0.1, 0.0, 0.2, 0.1, 0.2, 0.0]];
        let analysis = adjacency_group_analysis(&pos, &neg, 3, 2).unwrap();
        assert_eq!(analysis.top_pairs[0].0, 1);
        assert_eq!(analysis.top_pairs[0].1, 3);
        assert!((analysis.top_pairs[0].2 - 0.8).abs() < 1e-12);
        assert_eq!(analysis.top_pairs.len(), 2);
        assert!(adjacency_group_analysis(&pos, &[], 3, 2).is_err());
    }

    #[test]
    fn unit_normalization() {
        let m = vec![2.0, 4.0, 6.0];
        assert_eq!(normalize_unit_interval(&m), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize_unit_interval(&[3.0, 3.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]).unwrap(), 2.5);
        assert!(median(&[]).is_err());
    }
}
