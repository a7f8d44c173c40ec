//! Structure-level aggregation of grading maps and label volumes into
//! per-subject feature vectors, plus the z-score normalizer fitted on
//! training data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume3D};

/// Diagnostic group of a subject.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassLabel {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "sMCI")]
    Smci,
    #[serde(rename = "pMCI")]
    Pmci,
}

impl ClassLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClassLabel::Cn => "CN",
            ClassLabel::Ad => "AD",
            ClassLabel::Smci => "sMCI",
            ClassLabel::Pmci => "pMCI",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CN" => Ok(ClassLabel::Cn),
            "AD" => Ok(ClassLabel::Ad),
            "sMCI" => Ok(ClassLabel::Smci),
            "pMCI" => Ok(ClassLabel::Pmci),
            other => Err(Error::data(format!("unknown class label {other:?}"))),
        }
    }

    /// Positive class of the task the label belongs to (AD for diagnosis,
    /// pMCI for prognosis).
    pub fn is_positive(&self) -> bool {
        matches!(self, ClassLabel::Ad | ClassLabel::Pmci)
    }
}

impl std::fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-subject structure features: mean grade and normalized volume per
/// structure, plus age and the diagnostic label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StructureFeatureVector {
    pub subject_id: String,
    pub label: ClassLabel,
    pub age: f64,
    pub dg: Vec<f64>,
    pub volumes: Vec<f64>,
}

/// Mean grading score per structure. Structures absent from the label volume
/// get 0 (callers may warn; the value is well-defined downstream).
pub fn structure_grading(map: &Volume3D, lab: &LabelVolume) -> Result<Vec<f64>> {
    if map.dims() != lab.dims() {
        return Err(Error::data(format!(
            "grading map dims {:?} do not match labels {:?}",
            map.dims(),
            lab.dims()
        )));
    }
    let s = lab.num_structures() as usize;
    let mut sums = vec![0.0f64; s + 1];
    let mut counts = vec![0usize; s + 1];
    for (&v, &l) in map.data().iter().zip(lab.labels()) {
        sums[l as usize] += v as f64;
        counts[l as usize] += 1;
    }
    Ok((1..=s)
        .map(|l| {
            if counts[l] == 0 {
                0.0
            } else {
                sums[l] / counts[l] as f64
            }
        })
        .collect())
}

/// Structure volumes as a percentage of the ICC voxel count.
pub fn structure_volumes(lab: &LabelVolume) -> Result<Vec<f64>> {
    let s = lab.num_structures() as usize;
    let mut counts = vec![0usize; s + 1];
    for &l in lab.labels() {
        counts[l as usize] += 1;
    }
    let icc: usize = counts[1..].iter().sum();
    if icc == 0 {
        return Err(Error::data("empty ICC: no labeled voxels"));
    }
    Ok((1..=s)
        .map(|l| 100.0 * counts[l] as f64 / icc as f64)
        .collect())
}

/// Feature channels a node can embed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureChannel {
    Dg,
    Volume,
    Age,
}

impl FeatureChannel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dg" => Ok(FeatureChannel::Dg),
            "volume" | "v" => Ok(FeatureChannel::Volume),
            "age" | "a" => Ok(FeatureChannel::Age),
            other => Err(Error::config(format!("unknown feature channel {other:?}"))),
        }
    }
}

/// Parse a comma-separated channel list like "dg,age".
pub fn parse_channels(s: &str) -> Result<Vec<FeatureChannel>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let c = FeatureChannel::parse(part.trim())?;
        if out.contains(&c) {
            return Err(Error::config(format!("duplicate feature channel {part:?}")));
        }
        out.push(c);
    }
    if out.is_empty() {
        return Err(Error::config("at least one feature channel required"));
    }
    Ok(out)
}

const STD_FLOOR: f64 = 1e-8;

/// Per-column z-score statistics estimated on a training cohort. DG and V
/// are normalized per structure; age has a single pair of statistics.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNormalizer {
    pub channels: Vec<FeatureChannel>,
    pub dg_mean: Vec<f64>,
    pub dg_std: Vec<f64>,
    pub vol_mean: Vec<f64>,
    pub vol_std: Vec<f64>,
    pub age_mean: f64,
    pub age_std: f64,
}

fn column_stats(rows: &[&[f64]], col: usize) -> (f64, f64) {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r[col]).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt().max(STD_FLOOR))
}

pub fn fit_normalizer(
    train: &[StructureFeatureVector],
    channels: &[FeatureChannel],
) -> Result<FeatureNormalizer> {
    if train.len() < 2 {
        return Err(Error::data("normalizer needs at least 2 training subjects"));
    }
    let s = train[0].dg.len();
    if train.iter().any(|v| v.dg.len() != s || v.volumes.len() != s) {
        return Err(Error::data("inconsistent structure count across cohort"));
    }
    let dg_rows: Vec<&[f64]> = train.iter().map(|v| v.dg.as_slice()).collect();
    let vol_rows: Vec<&[f64]> = train.iter().map(|v| v.volumes.as_slice()).collect();
    let mut dg_mean = Vec::with_capacity(s);
    let mut dg_std = Vec::with_capacity(s);
    let mut vol_mean = Vec::with_capacity(s);
    let mut vol_std = Vec::with_capacity(s);
    for c in 0..s {
        let (m, sd) = column_stats(&dg_rows, c);
        dg_mean.push(m);
        dg_std.push(sd);
        let (m, sd) = column_stats(&vol_rows, c);
        vol_mean.push(m);
        vol_std.push(sd);
    }
    let n = train.len() as f64;
    let age_mean = train.iter().map(|v| v.age).sum::<f64>() / n;
    let age_var = train.iter().map(|v| (v.age - age_mean).powi(2)).sum::<f64>() / n;
    Ok(FeatureNormalizer {
        channels: channels.to_vec(),
        dg_mean,
        dg_std,
        vol_mean,
        vol_std,
        age_mean,
        age_std: age_var.sqrt().max(STD_FLOOR),
    })
}

impl FeatureNormalizer {
    pub fn structures(&self) -> usize {
        self.dg_mean.len()
    }

    /// Z-score a feature vector using training statistics.
    pub fn apply(&self, v: &StructureFeatureVector) -> Result<StructureFeatureVector> {
        let s = self.structures();
        if v.dg.len() != s || v.volumes.len() != s {
            return Err(Error::data(format!(
                "vector has {} structures, normalizer was fitted on {s}",
                v.dg.len()
            )));
        }
        let dg = v
            .dg
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.dg_mean[i]) / self.dg_std[i])
            .collect();
        let volumes = v
            .volumes
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - self.vol_mean[i]) / self.vol_std[i])
            .collect();
        Ok(StructureFeatureVector {
            subject_id: v.subject_id.clone(),
            label: v.label,
            age: (v.age - self.age_mean) / self.age_std,
            dg,
            volumes,
        })
    }

    /// Node feature matrix (s rows, one column per selected channel, row
    /// major). The normalized age scalar is broadcast onto every node.
    pub fn node_features(&self, v: &StructureFeatureVector) -> Result<Vec<f32>> {
        let normalized = self.apply(v)?;
        let s = self.structures();
        let f = self.channels.len();
        let mut x = vec![0.0f32; s * f];
        for row in 0..s {
            for (col, ch) in self.channels.iter().enumerate() {
                x[row * f + col] = match ch {
                    FeatureChannel::Dg => normalized.dg[row],
                    FeatureChannel::Volume => normalized.volumes[row],
                    FeatureChannel::Age => normalized.age,
                } as f32;
            }
        }
        Ok(x)
    }
}

/// Features CSV: subject_id, label, age, DG_1..DG_s, V_1..V_s.
pub fn write_features_csv(path: &std::path::Path, vectors: &[StructureFeatureVector]) -> Result<()> {
    if vectors.is_empty() {
        return Err(Error::data("no feature vectors to write"));
    }
    let s = vectors[0].dg.len();
    let mut out = String::new();
    out.push_str("subject_id,label,age");
    for i in 1..=s {
        out.push_str(&format!(",DG_{i}"));
    }
    for i in 1..=s {
        out.push_str(&format!(",V_{i}"));
    }
    out.push('\n');
    for v in vectors {
        if v.dg.len() != s || v.volumes.len() != s {
            return Err(Error::data("inconsistent structure count across cohort"));
        }
        out.push_str(&format!("{},{},{}", v.subject_id, v.label, v.age));
        for x in &v.dg {
            out.push_str(&format!(",{x}"));
        }
        for x in &v.volumes {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_features_csv(path: &std::path::Path) -> Result<Vec<StructureFeatureVector>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty features CSV"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "subject_id" || cols[1] != "label" || cols[2] != "age" {
        return Err(Error::format("unexpected features CSV header"));
    }
    let s = cols.iter().filter(|c| c.starts_with("DG_")).count();
    if s == 0 || cols.len() != 3 + 2 * s {
        return Err(Error::format("features CSV must carry DG_1..s and V_1..s columns"));
    }
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(format!("line {}: wrong field count", lineno + 2)));
        }
        let parse_f64 = |x: &str| -> Result<f64> {
            x.parse::<f64>()
                .map_err(|_| Error::format(format!("line {}: bad number {x:?}", lineno + 2)))
        };
        let age = parse_f64(fields[2])?;
        let dg = fields[3..3 + s].iter().map(|x| parse_f64(x)).collect::<Result<Vec<_>>>()?;
        let volumes = fields[3 + s..].iter().map(|x| parse_f64(x)).collect::<Result<Vec<_>>>()?;
        out.push(StructureFeatureVector {
            subject_id: fields[0].to_string(),
            label: ClassLabel::parse(fields[1])?,
            age,
            dg,
            volumes,
        });
    }
    Ok(out)
}
