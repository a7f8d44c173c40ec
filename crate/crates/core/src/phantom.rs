//! Synthetic cohort generator: labeled 3D "brains" with class-conditional
//! atrophy so the whole pipeline can train and be audited at desk scale.
//!
//! A subject is an ellipsoidal cavity tiled by blob structures plus a filler
//! tissue structure (the last label). Diseased classes shrink the affected
//! blobs (the lost shell becomes filler, mimicking atrophy) and darken their
//! intensity; everything else is identical across classes, so the null
//! configuration produces bit-identical class distributions.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClassLabel;
use crate::nifti::{write_labels_nifti, write_volume_nifti};
use crate::rng::{derive_seed, Rng};
use crate::stats::welch_ttest;
use crate::volume::{LabelVolume, Volume3D};

/// Canonical blob layout in unit-ellipsoid coordinates:
/// (center, radius fraction of the cavity semi-axes, intensity).
/// The first three sit clustered in one corner so that a clean subset of
/// patches never sees diseased tissue; they are the default affected set.
const BLOBS: [([f64; 3], f64, f64); 11] = [
    ([-0.60, -0.15, -0.15], 0.20, 0.80),
    ([-0.15, -0.60, -0.15], 0.20, 0.74),
    ([-0.15, -0.15, -0.60], 0.20, 0.84),
    ([0.62, 0.10, 0.10], 0.18, 0.70),
    ([0.10, 0.62, 0.10], 0.18, 0.64),
    ([0.10, 0.10, 0.62], 0.18, 0.76),
    ([0.40, 0.40, 0.40], 0.16, 0.60),
    ([0.45, -0.40, 0.05], 0.17, 0.66),
    ([0.05, 0.45, -0.40], 0.17, 0.72),
    ([-0.40, 0.05, 0.45], 0.17, 0.62),
    ([0.15, -0.45, 0.40], 0.17, 0.68),
];

const FILLER_INTENSITY: f64 = 0.35;
/// Cavity semi-axes as a fraction of the volume dims.
const CAVITY_FRACTION: f64 = 0.45;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: (usize, usize, usize),
    /// Structure count s; structures 1..s-1 are blobs, s is filler tissue.
    pub structures: u16,
    /// Blob ids carrying the disease signal.
    pub affected: Vec<u16>,
    /// Fraction of affected-structure volume retained in AD (1.0 = null).
    pub shrink: f64,
    /// Intensity shift of affected tissue in AD (on unit-normalized values).
    pub intensity_shift: f64,
    pub noise_std: f64,
    /// Uniform age ranges per class.
    pub age_cn: (f64, f64),
    pub age_ad: (f64, f64),
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: (46, 54, 46),
            structures: 12,
            affected: vec![1, 2, 3],
            shrink: 0.7,
            intensity_shift: -0.3,
            noise_std: 0.05,
            age_cn: (60.0, 85.0),
            age_ad: (62.0, 88.0),
            seed: 42,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let max_s = BLOBS.len() as u16 + 1;
        if self.structures < 2 || self.structures > max_s {
            return Err(Error::config(format!(
                "structure count must be in 2..={max_s}, got {}",
                self.structures
            )));
        }
        for &a in &self.affected {
            if a == 0 || a >= self.structures {
                return Err(Error::config(format!(
                    "affected id {a} must name a blob structure (1..={})",
                    self.structures - 1
                )));
            }
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::config(format!("shrink {} outside (0, 1]", self.shrink)));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        if self.dims.0 < 8 || self.dims.1 < 8 || self.dims.2 < 8 {
            return Err(Error::config(format!("dims {:?} too small for a phantom", self.dims)));
        }
        for (lo, hi) in [self.age_cn, self.age_ad] {
            if !(lo < hi) {
                return Err(Error::config("age ranges must satisfy lo < hi"));
            }
        }
        // blobs must fit inside the cavity with jitter headroom
        for (i, (c, r, _)) in BLOBS
            .iter()
            .enumerate()
            .take(self.structures as usize - 1)
        {
            let norm = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
            if norm + r * 1.1 + 0.04 > 0.98 {
                return Err(Error::config(format!("blob {} overflows the cavity", i + 1)));
            }
        }
        Ok(())
    }

    /// Null-signal variant: no shrink, no intensity shift and one shared age
    /// model, making AD and CN subject distributions identical.
    pub fn null_signal(&self) -> Self {
        PhantomConfig {
            shrink: 1.0,
            intensity_shift: 0.0,
            age_ad: self.age_cn,
            ..self.clone()
        }
    }
}

/// Disease severity scaling per class: CN 0, sMCI 1/3, pMCI 1/2, AD 1.
/// The pMCI value turns the default shrink 0.7 into the intermediate 0.85.
fn severity(class: ClassLabel) -> f64 {
    match class {
        ClassLabel::Cn => 0.0,
        ClassLabel::Smci => 1.0 / 3.0,
        ClassLabel::Pmci => 0.5,
        ClassLabel::Ad => 1.0,
    }
}

fn age_range(cfg: &PhantomConfig, class: ClassLabel) -> (f64, f64) {
    match class {
        ClassLabel::Cn => cfg.age_cn,
        ClassLabel::Ad => cfg.age_ad,
        // progressors draw from the midpoint range
        ClassLabel::Smci | ClassLabel::Pmci => (
            0.5 * (cfg.age_cn.0 + cfg.age_ad.0),
            0.5 * (cfg.age_cn.1 + cfg.age_ad.1),
        ),
    }
}

/// Generate one subject. The random draw sequence is identical for every
/// class, so with the null configuration two classes at the same seed give
/// bit-identical volumes.
pub fn generate_subject(
    cfg: &PhantomConfig,
    class: ClassLabel,
    rng: &mut Rng,
) -> Result<(Volume3D, LabelVolume, f64)> {
    cfg.validate()?;
    let s = cfg.structures as usize;
    let (nx, ny, nz) = cfg.dims;
    let center = (
        (nx as f64 - 1.0) / 2.0,
        (ny as f64 - 1.0) / 2.0,
        (nz as f64 - 1.0) / 2.0,
    );
    let semi = [
        CAVITY_FRACTION * nx as f64 * rng.uniform(0.97, 1.03),
        CAVITY_FRACTION * ny as f64 * rng.uniform(0.97, 1.03),
        CAVITY_FRACTION * nz as f64 * rng.uniform(0.97, 1.03),
    ];

    let sev = severity(class);
    let shrink_c = 1.0 - sev * (1.0 - cfg.shrink);
    let shift_c = sev * cfg.intensity_shift;
    let radius_factor = shrink_c.cbrt();

    // jittered blob geometry in voxel coordinates
    struct Blob {
        center: [f64; 3],
        radii: [f64; 3],
        intensity: f64,
    }
    let mut blobs = Vec::with_capacity(s - 1);
    for (idx, (u, frac, tone)) in BLOBS.iter().enumerate().take(s - 1) {
        let label = (idx + 1) as u16;
        let cjit = [
            rng.uniform(-0.03, 0.03),
            rng.uniform(-0.03, 0.03),
            rng.uniform(-0.03, 0.03),
        ];
        let rjit = rng.uniform(0.92, 1.08);
        let affected = cfg.affected.contains(&label);
        let rf = if affected { radius_factor } else { 1.0 };
        blobs.push(Blob {
            center: [
                center.0 + (u[0] + cjit[0]) * semi[0],
                center.1 + (u[1] + cjit[1]) * semi[1],
                center.2 + (u[2] + cjit[2]) * semi[2],
            ],
            radii: [
                frac * rjit * rf * semi[0],
                frac * rjit * rf * semi[1],
                frac * rjit * rf * semi[2],
            ],
            intensity: tone + if affected { shift_c } else { 0.0 },
        });
    }
    let age = rng.uniform(age_range(cfg, class).0, age_range(cfg, class).1);

    let n = nx * ny * nz;
    let mut data = vec![0.0f32; n];
    let mut labels = vec![0u16; n];
    let mut idx = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let e = ((p[0] - center.0) / semi[0]).powi(2)
                    + ((p[1] - center.1) / semi[1]).powi(2)
                    + ((p[2] - center.2) / semi[2]).powi(2);
                if e <= 1.0 {
                    let mut label = s as u16; // filler
                    let mut tone = FILLER_INTENSITY;
                    for (bi, b) in blobs.iter().enumerate() {
                        let d = ((p[0] - b.center[0]) / b.radii[0]).powi(2)
                            + ((p[1] - b.center[1]) / b.radii[1]).powi(2)
                            + ((p[2] - b.center[2]) / b.radii[2]).powi(2);
                        if d <= 1.0 {
                            label = (bi + 1) as u16;
                            tone = b.intensity;
                            break;
                        }
                    }
                    labels[idx] = label;
                    data[idx] = (tone + rng.normal() * cfg.noise_std) as f32;
                }
                idx += 1;
            }
        }
    }
    let vol = Volume3D::new(cfg.dims, (1.0, 1.0, 1.0), data)?;
    let lab = LabelVolume::new(cfg.dims, (1.0, 1.0, 1.0), labels, cfg.structures)?;
    Ok((vol, lab, age))
}

/// Number of subjects per class and split.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortCounts {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub progress_per_class: usize,
}

impl Default for CohortCounts {
    fn default() -> Self {
        CohortCounts {
            train_per_class: 40,
            test_per_class: 20,
            progress_per_class: 0,
        }
    }
}

/// One generated cohort member as recorded in the metadata CSV.
#[derive(Clone, Debug)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: ClassLabel,
    pub age: f64,
    pub split: String,
}

/// Generate a balanced cohort on disk: `images/<id>_t1.nii`,
/// `images/<id>_seg.nii` and `metadata.csv` with columns
/// subject_id, label, age, split.
pub fn generate_cohort(
    cfg: &PhantomConfig,
    counts: &CohortCounts,
    out_dir: &Path,
) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    if counts.train_per_class < 2 || counts.test_per_class < 1 {
        return Err(Error::config("cohort needs >= 2 train and >= 1 test subjects per class"));
    }
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images)?;

    let mut plan: Vec<(ClassLabel, &str)> = Vec::new();
    for _ in 0..counts.train_per_class {
        plan.push((ClassLabel::Cn, "train"));
    }
    for _ in 0..counts.train_per_class {
        plan.push((ClassLabel::Ad, "train"));
    }
    for _ in 0..counts.test_per_class {
        plan.push((ClassLabel::Cn, "test"));
    }
    for _ in 0..counts.test_per_class {
        plan.push((ClassLabel::Ad, "test"));
    }
    for _ in 0..counts.progress_per_class {
        plan.push((ClassLabel::Smci, "progress"));
    }
    for _ in 0..counts.progress_per_class {
        plan.push((ClassLabel::Pmci, "progress"));
    }

    let mut records = Vec::with_capacity(plan.len());
    use rayon::prelude::*;
    let generated: Vec<Result<(Volume3D, LabelVolume, f64)>> = plan
        .par_iter()
        .enumerate()
        .map(|(i, (class, _))| {
            let mut rng = Rng::seed_from_u64(derive_seed(cfg.seed, "phantom-subject", i as u64));
            generate_subject(cfg, *class, &mut rng)
        })
        .collect();
    for (i, ((class, split), gen)) in plan.iter().zip(generated).enumerate() {
        let (vol, lab, age) = gen?;
        let id = format!("sub-{i:04}");
        write_volume_nifti(&images.join(format!("{id}_t1.nii")), &vol)?;
        write_labels_nifti(&images.join(format!("{id}_seg.nii")), &lab)?;
        records.push(SubjectRecord {
            subject_id: id,
            label: *class,
            age,
            split: split.to_string(),
        });
    }
    rebalance_ages(cfg, &mut records)?;
    write_metadata_csv(&out_dir.join("metadata.csv"), &records)?;
    Ok(records)
}

/// Cohorts are selected for age balance: if a split's Welch p-value falls
/// at or below 0.05, ages are redrawn (volumes untouched) from a derived
/// stream until every split is balanced. Deterministic given the seed.
fn rebalance_ages(cfg: &PhantomConfig, records: &mut [SubjectRecord]) -> Result<()> {
    const MAX_ROUNDS: u64 = 200;
    for round in 1..=MAX_ROUNDS {
        if age_balance(records).iter().all(|(_, p)| *p > 0.05) {
            return Ok(());
        }
        let round_seed = derive_seed(cfg.seed, "age-rebalance", round);
        for (i, r) in records.iter_mut().enumerate() {
            let mut rng = Rng::seed_from_u64(derive_seed(round_seed, "subject-age", i as u64));
            let (lo, hi) = age_range(cfg, r.label);
            r.age = rng.uniform(lo, hi);
        }
    }
    if age_balance(records).iter().all(|(_, p)| *p > 0.05) {
        Ok(())
    } else {
        Err(Error::numeric("could not draw an age-balanced cohort"))
    }
}

pub fn write_metadata_csv(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let mut out = String::from("subject_id,label,age,split\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.subject_id, r.label, r.age, r.split));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metadata_csv(path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("subject_id,label,age,split") => {}
        other => return Err(Error::format(format!("unexpected metadata header {other:?}"))),
    }
    let mut out = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::format(format!("metadata line {}: wrong field count", ln + 2)));
        }
        out.push(SubjectRecord {
            subject_id: f[0].to_string(),
            label: ClassLabel::parse(f[1])?,
            age: f[2]
                .parse()
                .map_err(|_| Error::format(format!("metadata line {}: bad age", ln + 2)))?,
            split: f[3].to_string(),
        });
    }
    Ok(out)
}

/// Age-balance p-values per split (CN vs AD), mirroring a cohort summary
/// table.
pub fn age_balance(records: &[SubjectRecord]) -> Vec<(String, f64)> {
    let mut splits: Vec<String> = records.iter().map(|r| r.split.clone()).collect();
    splits.sort();
    splits.dedup();
    let mut out = Vec::new();
    for split in splits {
        let ages = |class: ClassLabel| -> Vec<f64> {
            records
                .iter()
                .filter(|r| r.split == split && r.label == class)
                .map(|r| r.age)
                .collect()
        };
        let (a, b) = if records
            .iter()
            .any(|r| r.split == split && matches!(r.label, ClassLabel::Smci | ClassLabel::Pmci))
        {
            (ages(ClassLabel::Pmci), ages(ClassLabel::Smci))
        } else {
            (ages(ClassLabel::Ad), ages(ClassLabel::Cn))
        };
        if a.len() >= 2 && b.len() >= 2 {
            if let Ok(p) = welch_ttest(&a, &b) {
                out.push((split, p));
            }
        }
    }
    out
}
