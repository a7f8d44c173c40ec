//! Per-subject complete graph over brain structures: node feature matrix
//! plus one of three symmetric nonnegative edge-weight matrices, and the
//! self-loop renormalization used by the classifier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Edge-weight construction variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeMode {
    /// All edges set to 1.
    FullyOne,
    /// |Pearson r| of structure grading scores across the training cohort.
    Correlation,
    /// |V_a - V_b| of the subject's structure volumes.
    VolumeDiff,
}

impl EdgeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fully_one" => Ok(EdgeMode::FullyOne),
            "correlation" => Ok(EdgeMode::Correlation),
            "volume_diff" => Ok(EdgeMode::VolumeDiff),
            other => Err(Error::config(format!("unknown edge mode {other:?}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeMode::FullyOne => "fully_one",
            EdgeMode::Correlation => "correlation",
            EdgeMode::VolumeDiff => "volume_diff",
        }
    }
}

/// All-ones adjacency (including the diagonal).
pub fn edges_fully_one(s: usize) -> Vec<f64> {
    vec![1.0; s * s]
}

/// Cohort-level adjacency: entry (a, b) is |Pearson r| between DG columns a
/// and b across training subjects; diagonal 1; structures with constant
/// grading get 0 off-diagonal.
pub fn edges_correlation(train_dg: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = train_dg.len();
    if n < 3 {
        return Err(Error::data(format!(
            "correlation edges need >= 3 training subjects, got {n}"
        )));
    }
    let s = train_dg[0].len();
    if train_dg.iter().any(|v| v.len() != s) {
        return Err(Error::data("inconsistent DG vector lengths"));
    }
    let nf = n as f64;
    let means: Vec<f64> = (0..s)
        .map(|c| train_dg.iter().map(|v| v[c]).sum::<f64>() / nf)
        .collect();
    let sds: Vec<f64> = (0..s)
        .map(|c| {
            (train_dg
                .iter()
                .map(|v| (v[c] - means[c]).powi(2))
                .sum::<f64>()
                / nf)
                .sqrt()
        })
        .collect();
    let mut adj = vec![0.0f64; s * s];
    for a in 0..s {
        adj[a * s + a] = 1.0;
        for b in (a + 1)..s {
            let r = if sds[a] == 0.0 || sds[b] == 0.0 {
                0.0
            } else {
                let cov = train_dg
                    .iter()
                    .map(|v| (v[a] - means[a]) * (v[b] - means[b]))
                    .sum::<f64>()
                    / nf;
                (cov / (sds[a] * sds[b])).clamp(-1.0, 1.0)
            };
            adj[a * s + b] = r.abs();
            adj[b * s + a] = r.abs();
        }
    }
    Ok(adj)
}

/// Per-subject adjacency: entry (a, b) = |V_a - V_b|, diagonal 0.
pub fn edges_volume_diff(volumes: &[f64]) -> Vec<f64> {
    let s = volumes.len();
    let mut adj = vec![0.0f64; s * s];
    for a in 0..s {
        for b in 0..s {
            adj[a * s + b] = (volumes[a] - volumes[b]).abs();
        }
    }
    adj
}

/// Self-loop renormalization: with A~ = A + I and D~ the diagonal of its row
/// sums, returns D~^{-1/2} A~ D~^{-1/2}. Symmetric with eigenvalues in
/// [-1, 1] for symmetric nonnegative A.
pub fn normalize_adjacency(adj: &[f64], s: usize) -> Result<Vec<f64>> {
    if adj.len() != s * s {
        return Err(Error::data("adjacency size mismatch"));
    }
    for a in 0..s {
        for b in 0..s {
            let v = adj[a * s + b];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::numeric(format!("adjacency entry ({a},{b}) = {v} invalid")));
            }
            if (v - adj[b * s + a]).abs() > 1e-7 {
                return Err(Error::data(format!("adjacency not symmetric at ({a},{b})")));
            }
        }
    }
    let mut tilde = adj.to_vec();
    for a in 0..s {
        tilde[a * s + a] += 1.0;
    }
    let deg: Vec<f64> = (0..s)
        .map(|a| tilde[a * s..(a + 1) * s].iter().sum())
        .collect();
    let mut out = vec![0.0f64; s * s];
    for a in 0..s {
        for b in 0..s {
            out[a * s + b] = tilde[a * s + b] / (deg[a] * deg[b]).sqrt();
        }
    }
    Ok(out)
}

/// Node features plus raw adjacency for one subject.
#[derive(Clone, Debug)]
pub struct SubjectGraph {
    /// Number of nodes (structures).
    pub s: usize,
    /// Node feature width.
    pub f: usize,
    /// Row-major s x f feature matrix.
    pub x: Vec<f32>,
    /// Row-major s x s symmetric nonnegative edge weights.
    pub adjacency: Vec<f64>,
}

impl SubjectGraph {
    pub fn new(s: usize, f: usize, x: Vec<f32>, adjacency: Vec<f64>) -> Result<Self> {
        if f == 0 || x.len() != s * f {
            return Err(Error::data(format!(
                "feature matrix {} does not match {s} x {f}",
                x.len()
            )));
        }
        // normalize_adjacency re-validates symmetry/nonnegativity
        if adjacency.len() != s * s {
            return Err(Error::data("adjacency size mismatch"));
        }
        Ok(SubjectGraph { s, f, x, adjacency })
    }

    /// Propagation matrix for the classifier, in f32.
    pub fn propagation_matrix(&self) -> Result<Vec<f32>> {
        Ok(normalize_adjacency(&self.adjacency, self.s)?
            .into_iter()
            .map(|v| v as f32)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn fully_one_shape() {
        let a = edges_fully_one(3);
        assert_eq!(a.len(), 9);
        assert!(a.iter().all(|&v| v == 1.0));
        for row in 0..3 {
            let sum: f64 = a[row * 3..(row + 1) * 3].iter().sum();
            assert_eq!(sum, 3.0);
        }
    }

    #[test]
    fn correlation_copy_and_negation() {
        // structure 1 copies structure 0; structure 2 negates it
        let dg = vec![
            vec![1.0, 1.0, -1.0],
            vec![2.0, 2.0, -2.0],
            vec![3.0, 3.0, -3.0],
            vec![0.5, 0.5, -0.5],
        ];
        let a = edges_correlation(&dg).unwrap();
        assert!((a[1] - 1.0).abs() < 1e-12);
        assert!((a[2] - 1.0).abs() < 1e-12); // absolute value of r = -1
        assert_eq!(a[0], 1.0);
    }

    #[test]
    fn correlation_hand_case() {
        let dg = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 4.0]];
        let a = edges_correlation(&dg).unwrap();
        assert!((a[1] - 0.9819805060619659).abs() < 1e-9, "r = {}", a[1]);
    }

    #[test]
    fn correlation_constant_column_is_zero() {
        let dg = vec![vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]];
        let a = edges_correlation(&dg).unwrap();
        assert_eq!(a[1], 0.0);
        assert_eq!(a[3], 1.0); // diagonal stays 1
    }

    #[test]
    fn correlation_needs_three_subjects() {
        assert!(edges_correlation(&[vec![1.0], vec![2.0]]).is_err());
    }

    #[test]
    fn correlation_invariant_to_affine_rescaling() {
        let mut rng = Rng::seed_from_u64(12);
        let dg: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect())
            .collect();
        let a1 = edges_correlation(&dg).unwrap();
        let scaled: Vec<Vec<f64>> = dg
            .iter()
            .map(|v| {
                let mut w = v.clone();
                w[2] = -3.0 * w[2] + 0.7;
                w
            })
            .collect();
        let a2 = edges_correlation(&scaled).unwrap();
        for (x, y) in a1.iter().zip(&a2) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_diff_cases() {
        assert!(edges_volume_diff(&[50.0, 50.0]).iter().all(|&v| v == 0.0));
        let a = edges_volume_diff(&[60.0, 40.0]);
        assert_eq!(a, vec![0.0, 20.0, 20.0, 0.0]);
    }

    #[test]
    fn volume_diff_triangle_inequality() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..100 {
            let v: Vec<f64> = (0..5).map(|_| rng.uniform(0.0, 100.0)).collect();
            let a = edges_volume_diff(&v);
            for i in 0..5 {
                for j in 0..5 {
                    for k in 0..5 {
                        assert!(a[i * 5 + k] <= a[i * 5 + j] + a[j * 5 + k] + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn normalization_single_node() {
        let out = normalize_adjacency(&[1.0], 1).unwrap();
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn normalization_fully_one_hand_case() {
        let out = normalize_adjacency(&edges_fully_one(3), 3).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let expect = if a == b { 0.5 } else { 0.25 };
                assert!((out[a * 3 + b] - expect).abs() < 1e-12);
            }
        }
    }

    /// Jacobi eigenvalue sweep for small symmetric matrices (test oracle).
    fn sym_eigenvalues(m: &[f64], s: usize) -> Vec<f64> {
        let mut a = m.to_vec();
        for _ in 0..100 {
            // largest off-diagonal element
            let mut p = 0;
            let mut q = 1;
            let mut max = 0.0f64;
            for i in 0..s {
                for j in (i + 1)..s {
                    if a[i * s + j].abs() > max {
                        max = a[i * s + j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if max < 1e-12 {
                break;
            }
            let app = a[p * s + p];
            let aqq = a[q * s + q];
            let apq = a[p * s + q];
            let theta = 0.5 * (aqq - app) / apq;
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let sgn = t * c;
            for k in 0..s {
                let akp = a[k * s + p];
                let akq = a[k * s + q];
                a[k * s + p] = c * akp - sgn * akq;
                a[k * s + q] = sgn * akp + c * akq;
            }
            for k in 0..s {
                let apk = a[p * s + k];
                let aqk = a[q * s + k];
                a[p * s + k] = c * apk - sgn * aqk;
                a[q * s + k] = sgn * apk + c * aqk;
            }
        }
        (0..s).map(|i| a[i * s + i]).collect()
    }

    #[test]
    fn normalized_spectrum_in_unit_interval() {
        let mut rng = Rng::seed_from_u64(7);
        for _ in 0..20 {
            let s = 2 + rng.below(5);
            let mut adj = vec![0.0f64; s * s];
            for i in 0..s {
                for j in i..s {
                    let v = rng.uniform(0.0, 2.0);
                    adj[i * s + j] = v;
                    adj[j * s + i] = v;
                }
            }
            let norm = normalize_adjacency(&adj, s).unwrap();
            for ev in sym_eigenvalues(&norm, s) {
                assert!(ev >= -1.0 - 1e-9 && ev <= 1.0 + 1e-9, "eigenvalue {ev}");
            }
        }
    }

    #[test]
    fn normalization_commutes_with_permutation() {
        let mut rng = Rng::seed_from_u64(8);
        let s = 5;
        let mut adj = vec![0.0f64; s * s];
        for i in 0..s {
            for j in i..s {
                let v = rng.uniform(0.0, 1.0);
                adj[i * s + j] = v;
                adj[j * s + i] = v;
            }
        }
        let mut perm: Vec<usize> = (0..s).collect();
        rng.shuffle(&mut perm);
        // P A P^T
        let mut permuted = vec![0.0f64; s * s];
        for i in 0..s {
            for j in 0..s {
                permuted[i * s + j] = adj[perm[i] * s + perm[j]];
            }
        }
        let n1 = normalize_adjacency(&permuted, s).unwrap();
        let n0 = normalize_adjacency(&adj, s).unwrap();
        for i in 0..s {
            for j in 0..s {
                assert!((n1[i * s + j] - n0[perm[i] * s + perm[j]]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn asymmetric_adjacency_rejected() {
        let adj = vec![0.0, 1.0, 0.5, 0.0];
        assert!(normalize_adjacency(&adj, 2).is_err());
        let neg = vec![0.0, -1.0, -1.0, 0.0];
        assert!(normalize_adjacency(&neg, 2).is_err());
    }
}
