//! Stage orchestration shared by the CLI and the test suites: cohort
//! loading, ensemble training entry points, cohort grading, the classifier
//! bundle and the repeated-evaluation protocol.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
use crate::config::RunConfig;
use crate::ensemble::{
    save_grading_model, train_ensemble, EnsembleEntry, EnsembleManifest, LoadedEnsemble, Strategy,
};
use crate::error::{Error, Result};
use crate::features::{
    read_features_csv, structure_grading, structure_volumes, write_features_csv, ClassLabel,
    FeatureChannel, FeatureNormalizer, StructureFeatureVector,
};
use crate::gcn::{
    gcn_forward, predict_tta, train_classifier, ClassifierTrainConfig, GcnModel, PreparedGraph,
    TTA_NOISE_STD, TTA_PASSES,
};
use crate::grader::{balanced_split_indices, train_pooled_model, GraderSubject};
use crate::graph::{edges_correlation, edges_fully_one, edges_volume_diff, EdgeMode, SubjectGraph};
use crate::metrics::{auc, bacc, EvalReport, TaskReport};
use crate::nifti::{read_labels, read_volume, write_volume_nifti};
use crate::patch::PatchGridSpec;
use crate::phantom::{read_metadata_csv, SubjectRecord};
use crate::rng::{derive_seed, Rng};
use crate::stats::wilcoxon_one_sided;
use crate::volume::{downsample_labels_stride2, downsample_stride2, icc_mask, Volume3D};

/// Resolve a subject's image pair inside a cohort directory (NIfTI first,
/// raw fallback second).
pub fn subject_paths(cohort_dir: &Path, id: &str) -> Result<(PathBuf, PathBuf)> {
    let images = cohort_dir.join("images");
    for ext in ["nii", "json"] {
        let vol = images.join(format!("{id}_t1.{ext}"));
        let seg = images.join(format!("{id}_seg.{ext}"));
        if vol.exists() && seg.exists() {
            return Ok((vol, seg));
        }
    }
    Err(Error::data(format!("missing image pair for subject {id} under {images:?}")))
}

/// Read the cohort metadata table.
pub fn load_cohort(cohort_dir: &Path) -> Result<Vec<SubjectRecord>> {
    let meta = cohort_dir.join("metadata.csv");
    if !meta.exists() {
        return Err(Error::data(format!("no metadata.csv in {cohort_dir:?}")));
    }
    let records = read_metadata_csv(&meta)?;
    if records.is_empty() {
        return Err(Error::data("empty cohort metadata"));
    }
    Ok(records)
}

/// Load the AD/CN training subjects at grading resolution.
pub fn prepare_grader_cohort(cohort_dir: &Path, records: &[SubjectRecord]) -> Result<Vec<GraderSubject>> {
    let train: Vec<&SubjectRecord> = records
        .iter()
        .filter(|r| r.split == "train" && matches!(r.label, ClassLabel::Ad | ClassLabel::Cn))
        .collect();
    train
        .par_iter()
        .map(|r| -> Result<GraderSubject> {
            let (vol_path, seg_path) = subject_paths(cohort_dir, &r.subject_id)?;
            let vol = read_volume(&vol_path)?;
            let lab = read_labels(&seg_path)?;
            if vol.dims() != lab.dims() {
                return Err(Error::data(format!("subject {}: volume/label dims differ", r.subject_id)));
            }
            let low = downsample_stride2(&vol);
            let low_lab = downsample_labels_stride2(&lab);
            Ok(GraderSubject {
                id: r.subject_id.clone(),
                class: r.label,
                icc: icc_mask(&low_lab),
                volume: low,
            })
        })
        .collect()
}

/// Train the grading ensemble (or the pooled single-model baseline) for a
/// cohort directory and write checkpoints + manifest into `out_dir`.
pub fn run_train_ensemble(
    cohort_dir: &Path,
    out_dir: &Path,
    cfg: &RunConfig,
    strategy: Strategy,
    resume: bool,
) -> Result<EnsembleManifest> {
    let records = load_cohort(cohort_dir)?;
    let cohort = prepare_grader_cohort(cohort_dir, &records)?;
    if cohort.is_empty() {
        return Err(Error::data("cohort has no AD/CN training subjects"));
    }
    let grading_dims = cohort[0].volume.dims();
    let spec = PatchGridSpec::new(grading_dims, cfg.grid.patch_dims, cfg.grid.k_per_axis)?;
    std::fs::create_dir_all(out_dir)?;
    let manifest = match strategy {
        Strategy::Collective => train_ensemble(
            &cohort,
            &spec,
            cfg.arch,
            &cfg.train,
            cfg.fusion_mode,
            out_dir,
            resume,
        )?,
        Strategy::Individual => {
            let origins: Vec<(usize, usize, usize)> =
                (0..spec.num_patches()).map(|j| spec.origin(j)).collect();
            let (model, stats) =
                train_pooled_model(&origins, spec.patch_dims, &cohort, cfg.arch, &cfg.train)?;
            let name = "ckpt_pooled.dgck";
            save_grading_model(&out_dir.join(name), &model, stats.alpha, 0, spec.origin(0))?;
            let entries: Vec<EnsembleEntry> = (0..spec.num_patches())
                .map(|j| EnsembleEntry {
                    patch_index: j,
                    origin: spec.origin(j),
                    checkpoint: name.to_string(),
                    alpha: stats.alpha,
                })
                .collect();
            let manifest = EnsembleManifest {
                grid: spec,
                arch: cfg.arch,
                strategy: Strategy::Individual,
                fusion_mode: cfg.fusion_mode,
                seed: cfg.train.seed,
                entries,
            };
            manifest.save(&out_dir.join("manifest.json"))?;
            manifest
        }
    };
    cfg.write_resolved(out_dir)?;
    Ok(manifest)
}

/// Pooled-checkpoint manifests reference the same file many times; load each
/// distinct checkpoint once.
fn load_ensemble(manifest_path: &Path) -> Result<LoadedEnsemble> {
    let manifest = EnsembleManifest::load(manifest_path)?;
    let base = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut names: Vec<&str> = manifest.entries.iter().map(|e| e.checkpoint.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    let mut cache = std::collections::BTreeMap::new();
    for name in names {
        let (model, _) = crate::ensemble::load_grading_model(&base.join(name))?;
        cache.insert(name.to_string(), model);
    }
    let mut models = vec![None; manifest.entries.len()];
    for e in &manifest.entries {
        models[e.patch_index] = Some(cache[&e.checkpoint].clone());
    }
    LoadedEnsemble::from_parts(manifest, models.into_iter().map(|m| m.expect("complete")).collect())
}

/// Grade every subject of a cohort: writes `maps/<id>_grading.nii` plus
/// `features.csv` and returns the feature vectors in metadata order.
pub fn run_grade(
    manifest_path: &Path,
    cohort_dir: &Path,
    out_dir: &Path,
    write_maps: bool,
) -> Result<Vec<StructureFeatureVector>> {
    let ensemble = load_ensemble(manifest_path)?;
    let records = load_cohort(cohort_dir)?;
    std::fs::create_dir_all(out_dir)?;
    let maps_dir = out_dir.join("maps");
    if write_maps {
        std::fs::create_dir_all(&maps_dir)?;
    }
    let vectors: Vec<StructureFeatureVector> = records
        .par_iter()
        .map(|r| -> Result<StructureFeatureVector> {
            let (vol_path, seg_path) = subject_paths(cohort_dir, &r.subject_id)?;
            let vol = read_volume(&vol_path)?;
            let lab = read_labels(&seg_path)?;
            let map = ensemble.grade_subject(&vol, &lab)?;
            if write_maps {
                write_volume_nifti(&maps_dir.join(format!("{}_grading.nii", r.subject_id)), &map)?;
            }
            Ok(StructureFeatureVector {
                subject_id: r.subject_id.clone(),
                label: r.label,
                age: r.age,
                dg: structure_grading(&map, &lab)?,
                volumes: structure_volumes(&lab)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_features_csv(&out_dir.join("features.csv"), &vectors)?;
    Ok(vectors)
}

/// Everything needed to classify a new feature vector: the trained GCN plus
/// the feature normalizer and edge construction fitted on the training
/// cohort.
#[derive(Clone, Debug)]
pub struct ClassifierBundle {
    pub model: GcnModel,
    pub channels: Vec<FeatureChannel>,
    pub edge_mode: EdgeMode,
    pub normalizer: FeatureNormalizer,
    /// Cohort-level adjacency, present for correlation edges.
    pub corr_adjacency: Option<Vec<f64>>,
    pub structures: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    kind: String,
    channels: Vec<FeatureChannel>,
    edge_mode: EdgeMode,
    input_dim: usize,
    hidden: usize,
    seed: u64,
    structures: usize,
    dense_b: f64,
    normalizer: FeatureNormalizer,
    corr_adjacency: Option<Vec<f64>>,
}

impl ClassifierBundle {
    /// Per-subject graph from a raw (unnormalized) feature vector.
    pub fn build_graph(&self, v: &StructureFeatureVector) -> Result<SubjectGraph> {
        if v.dg.len() != self.structures {
            return Err(Error::data(format!(
                "vector has {} structures, classifier expects {}",
                v.dg.len(),
                self.structures
            )));
        }
        let x = self.normalizer.node_features(v)?;
        let adjacency = match self.edge_mode {
            EdgeMode::FullyOne => edges_fully_one(self.structures),
            EdgeMode::VolumeDiff => edges_volume_diff(&v.volumes),
            EdgeMode::Correlation => self
                .corr_adjacency
                .clone()
                .ok_or_else(|| Error::data("bundle lacks the correlation adjacency"))?,
        };
        SubjectGraph::new(self.structures, self.channels.len(), x, adjacency)
    }

    /// Noise-averaged probability for one subject.
    pub fn predict(&self, v: &StructureFeatureVector, rng: &mut Rng) -> Result<f64> {
        let g = PreparedGraph::from_graph(&self.build_graph(v)?)?;
        predict_tta(&self.model, &g, rng, TTA_NOISE_STD, TTA_PASSES)
    }

    /// Plain forward probability (no test-time noise).
    pub fn predict_plain(&self, v: &StructureFeatureVector) -> Result<f64> {
        let g = PreparedGraph::from_graph(&self.build_graph(v)?)?;
        gcn_forward(&self.model, &g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = BundleMeta {
            kind: "classifier".into(),
            channels: self.channels.clone(),
            edge_mode: self.edge_mode,
            input_dim: self.model.input_dim,
            hidden: self.model.hidden,
            seed: self.model.seed,
            structures: self.structures,
            dense_b: self.model.dense_b as f64,
            normalizer: self.normalizer.clone(),
            corr_adjacency: self.corr_adjacency.clone(),
        };
        let mut tensors = Vec::new();
        for (l, (w, b)) in self.model.w.iter().zip(self.model.b.iter()).enumerate() {
            let in_dim = if l == 0 { self.model.input_dim } else { self.model.hidden };
            tensors.push(NamedTensor::new(&format!("gcn{l}.w"), vec![in_dim, self.model.hidden], w.clone())?);
            tensors.push(NamedTensor::new(&format!("gcn{l}.b"), vec![self.model.hidden], b.clone())?);
        }
        tensors.push(NamedTensor::new(
            "dense.w",
            vec![self.model.dense_w.len()],
            self.model.dense_w.clone(),
        )?);
        write_checkpoint(path, &serde_json::to_string(&meta).expect("serializable"), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta_json, tensors) = read_checkpoint(path)?;
        let meta: BundleMeta = serde_json::from_str(&meta_json)
            .map_err(|e| Error::format(format!("bad classifier metadata: {e}")))?;
        if meta.kind != "classifier" {
            return Err(Error::format(format!("checkpoint kind {:?} is not a classifier", meta.kind)));
        }
        let get = |name: &str| -> Result<Vec<f32>> {
            tensors
                .iter()
                .find(|t| t.name == name)
                .map(|t| t.data.clone())
                .ok_or_else(|| Error::format(format!("classifier checkpoint missing tensor {name}")))
        };
        let model = GcnModel {
            input_dim: meta.input_dim,
            hidden: meta.hidden,
            seed: meta.seed,
            w: [get("gcn0.w")?, get("gcn1.w")?, get("gcn2.w")?],
            b: [get("gcn0.b")?, get("gcn1.b")?, get("gcn2.b")?],
            dense_w: get("dense.w")?,
            dense_b: meta.dense_b as f32,
        };
        Ok(ClassifierBundle {
            model,
            channels: meta.channels,
            edge_mode: meta.edge_mode,
            normalizer: meta.normalizer,
            corr_adjacency: meta.corr_adjacency,
            structures: meta.structures,
        })
    }
}

fn trainable(vectors: &[StructureFeatureVector]) -> Vec<&StructureFeatureVector> {
    vectors
        .iter()
        .filter(|v| matches!(v.label, ClassLabel::Ad | ClassLabel::Cn))
        .collect()
}

/// Fit the normalizer + edges on the training cohort and train one
/// classifier with a class-balanced 80/20 split derived from `seed`.
pub fn train_classifier_bundle(
    train_vectors: &[StructureFeatureVector],
    cfg: &ClassifierTrainConfig,
    channels: &[FeatureChannel],
    edge_mode: EdgeMode,
    seed: u64,
) -> Result<ClassifierBundle> {
    let train_set = trainable(train_vectors);
    if train_set.len() < 4 {
        return Err(Error::data("classifier training needs >= 4 AD/CN subjects"));
    }
    let structures = train_set[0].dg.len();
    let normalizer = crate::features::fit_normalizer(
        &train_set.iter().map(|v| (*v).clone()).collect::<Vec<_>>(),
        channels,
    )?;
    let corr_adjacency = if edge_mode == EdgeMode::Correlation {
        let dg: Vec<Vec<f64>> = train_set.iter().map(|v| v.dg.clone()).collect();
        Some(edges_correlation(&dg)?)
    } else {
        None
    };
    let mut bundle = ClassifierBundle {
        model: GcnModel::init(channels.len(), cfg.hidden, 0)?,
        channels: channels.to_vec(),
        edge_mode,
        normalizer,
        corr_adjacency,
        structures,
    };

    let graphs: Vec<(PreparedGraph, bool)> = train_set
        .iter()
        .map(|v| -> Result<(PreparedGraph, bool)> {
            let g = PreparedGraph::from_graph(&bundle.build_graph(v)?)?;
            Ok((g, v.label.is_positive()))
        })
        .collect::<Result<Vec<_>>>()?;
    let flags: Vec<bool> = graphs.iter().map(|(_, y)| *y).collect();
    let mut split_rng = Rng::seed_from_u64(derive_seed(seed, "classifier-split", 0));
    let (train_idx, val_idx) = balanced_split_indices(&flags, &mut split_rng)?;
    let train_graphs: Vec<(PreparedGraph, bool)> =
        train_idx.iter().map(|&i| graphs[i].clone()).collect();
    let val_graphs: Vec<(PreparedGraph, bool)> =
        val_idx.iter().map(|&i| graphs[i].clone()).collect();
    let mut cls_cfg = cfg.clone();
    cls_cfg.seed = seed;
    bundle.model = train_classifier(&train_graphs, &val_graphs, &cls_cfg)?;
    Ok(bundle)
}

/// Predictions for one evaluation set.
pub fn evaluate_bundle(
    bundle: &ClassifierBundle,
    vectors: &[StructureFeatureVector],
    tta_seed: u64,
) -> Result<(f64, f64)> {
    let labels: Vec<bool> = vectors.iter().map(|v| v.label.is_positive()).collect();
    let mut scores = Vec::with_capacity(vectors.len());
    for (i, v) in vectors.iter().enumerate() {
        let mut rng = Rng::seed_from_u64(derive_seed(tta_seed, "tta-subject", i as u64));
        scores.push(bundle.predict(v, &mut rng)?);
    }
    let preds: Vec<bool> = scores.iter().map(|&s| s > 0.5).collect();
    Ok((bacc(&labels, &preds)?, auc(&labels, &scores)?))
}

/// Group graded vectors into named evaluation tasks: "test" (AD/CN
/// diagnosis) and, when progressors exist, "progress" (pMCI/sMCI).
pub fn evaluation_tasks<'a>(
    vectors: &'a [StructureFeatureVector],
    records: &[SubjectRecord],
) -> Vec<(String, Vec<&'a StructureFeatureVector>)> {
    let split_of = |id: &str| -> Option<String> {
        records
            .iter()
            .find(|r| r.subject_id == id)
            .map(|r| r.split.clone())
    };
    let mut test = Vec::new();
    let mut progress = Vec::new();
    for v in vectors {
        match split_of(&v.subject_id).as_deref() {
            Some("test") if matches!(v.label, ClassLabel::Ad | ClassLabel::Cn) => test.push(v),
            Some("progress") if matches!(v.label, ClassLabel::Smci | ClassLabel::Pmci) => {
                progress.push(v)
            }
            _ => {}
        }
    }
    let mut out = Vec::new();
    if !test.is_empty() {
        out.push(("test".to_string(), test));
    }
    if !progress.is_empty() {
        out.push(("progress".to_string(), progress));
    }
    out
}

/// The repeated-evaluation protocol: `repetitions` classifier retrainings
/// with derived seeds, each evaluated on every task.
pub fn evaluate_protocol(
    train_vectors: &[StructureFeatureVector],
    tasks: &[(String, Vec<&StructureFeatureVector>)],
    cls_cfg: &ClassifierTrainConfig,
    channels: &[FeatureChannel],
    edge_mode: EdgeMode,
    root_seed: u64,
    repetitions: usize,
) -> Result<EvalReport> {
    if repetitions == 0 {
        return Err(Error::config("repetitions must be positive"));
    }
    if tasks.is_empty() {
        return Err(Error::data("no evaluation tasks (check the metadata splits)"));
    }
    let runs: Vec<Vec<(f64, f64)>> = (0..repetitions)
        .into_par_iter()
        .map(|rep| -> Result<Vec<(f64, f64)>> {
            let rep_seed = derive_seed(root_seed, "repetition", rep as u64);
            let bundle =
                train_classifier_bundle(train_vectors, cls_cfg, channels, edge_mode, rep_seed)?;
            tasks
                .iter()
                .map(|(_, vs)| {
                    let owned: Vec<StructureFeatureVector> =
                        vs.iter().map(|v| (*v).clone()).collect();
                    evaluate_bundle(&bundle, &owned, derive_seed(rep_seed, "tta", 0))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::new();
    for (ti, (name, _)) in tasks.iter().enumerate() {
        let bacc_runs: Vec<f64> = runs.iter().map(|r| r[ti].0).collect();
        let auc_runs: Vec<f64> = runs.iter().map(|r| r[ti].1).collect();
        reports.push(TaskReport::from_runs(name, bacc_runs, auc_runs));
    }
    Ok(EvalReport {
        repetitions,
        tasks: reports,
    })
}

/// One-sided Wilcoxon comparing per-repetition values against a baseline
/// (alternative: ours > baseline). Identical lists give p = 1.
pub fn compare_to_baseline(ours: &[f64], baseline: &[f64]) -> Result<f64> {
    if ours.len() != baseline.len() {
        return Err(Error::data("repetition counts differ"));
    }
    if ours.iter().zip(baseline).all(|(a, b)| a == b) {
        return Ok(1.0);
    }
    wilcoxon_one_sided(ours, baseline)
}

/// Median cosine similarity of per-subject DG vectors from two ensembles
/// over the test split of a cohort.
pub fn consistency_run(
    manifest_a: &Path,
    manifest_b: &Path,
    cohort_dir: &Path,
) -> Result<(f64, Vec<(String, f64)>)> {
    let ens_a = load_ensemble(manifest_a)?;
    let ens_b = load_ensemble(manifest_b)?;
    let records = load_cohort(cohort_dir)?;
    let test: Vec<&SubjectRecord> = records.iter().filter(|r| r.split == "test").collect();
    if test.is_empty() {
        return Err(Error::data("cohort has no test subjects"));
    }
    let sims: Vec<(String, f64)> = test
        .par_iter()
        .map(|r| -> Result<(String, f64)> {
            let (vol_path, seg_path) = subject_paths(cohort_dir, &r.subject_id)?;
            let vol = read_volume(&vol_path)?;
            let lab = read_labels(&seg_path)?;
            let dg_a = structure_grading(&ens_a.grade_subject(&vol, &lab)?, &lab)?;
            let dg_b = structure_grading(&ens_b.grade_subject(&vol, &lab)?, &lab)?;
            Ok((r.subject_id.clone(), crate::metrics::cosine_similarity(&dg_a, &dg_b)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let median = crate::metrics::median(&sims.iter().map(|(_, s)| *s).collect::<Vec<_>>())?;
    Ok((median, sims))
}

/// Join features with metadata splits; errors on unknown subjects.
pub fn split_features(
    vectors: &[StructureFeatureVector],
    records: &[SubjectRecord],
    split: &str,
) -> Result<Vec<StructureFeatureVector>> {
    let mut out = Vec::new();
    for v in vectors {
        let rec = records
            .iter()
            .find(|r| r.subject_id == v.subject_id)
            .ok_or_else(|| Error::data(format!("subject {} missing from metadata", v.subject_id)))?;
        if rec.split == split {
            out.push(v.clone());
        }
    }
    Ok(out)
}

/// Convenience loader for (features.csv, metadata.csv) pairs.
pub fn load_features_and_metadata(
    features: &Path,
    metadata: &Path,
) -> Result<(Vec<StructureFeatureVector>, Vec<SubjectRecord>)> {
    Ok((read_features_csv(features)?, read_metadata_csv(metadata)?))
}

/// Group-average grading maps per class label from a maps directory.
pub fn group_maps(
    maps_dir: &Path,
    records: &[SubjectRecord],
    subjects: &[String],
) -> Result<Vec<(ClassLabel, Volume3D)>> {
    let mut by_class: std::collections::BTreeMap<&'static str, Vec<Volume3D>> = Default::default();
    for id in subjects {
        let rec = records
            .iter()
            .find(|r| &r.subject_id == id)
            .ok_or_else(|| Error::data(format!("subject {id} missing from metadata")))?;
        let map = read_volume(&maps_dir.join(format!("{id}_grading.nii")))?;
        by_class.entry(rec.label.as_str()).or_default().push(map);
    }
    let mut out = Vec::new();
    for (label, maps) in by_class {
        let refs: Vec<&Volume3D> = maps.iter().collect();
        out.push((ClassLabel::parse(label)?, crate::metrics::group_average_map(&refs)?));
    }
    Ok(out)
}
