//! Collective orchestration of the patch-model ensemble: neighbor-transfer
//! training order, on-disk manifest, weighted grading fusion and
//! whole-subject grading.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
use crate::error::{Error, Result};
use crate::grader::{train_patch_model, GraderSubject, TrainConfig, TrainStats};
use crate::patch::{extract_patch, PatchGridSpec};
use crate::unet::{ConvLayer, GradingModel, UnetArch, LAYER_NAMES};
use crate::volume::{downsample_stride2, upsample_trilinear, LabelVolume, Volume3D};

/// How patch grades are combined per voxel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Validation-accuracy weighted average.
    Weighted,
    /// Plain mean over covering patches.
    Unweighted,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(FusionMode::Weighted),
            "unweighted" => Ok(FusionMode::Unweighted),
            other => Err(Error::config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

/// Ensemble training strategy: one specialist per location, or one shared
/// model trained on samples pooled from every location.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Collective,
    Individual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleEntry {
    pub patch_index: usize,
    pub origin: (usize, usize, usize),
    /// Checkpoint path relative to the manifest file.
    pub checkpoint: String,
    pub alpha: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleManifest {
    pub grid: PatchGridSpec,
    pub arch: UnetArch,
    pub strategy: Strategy,
    pub fusion_mode: FusionMode,
    pub seed: u64,
    pub entries: Vec<EnsembleEntry>,
}

impl EnsembleManifest {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        let m = self.grid.num_patches();
        if self.entries.len() != m {
            return Err(Error::data(format!(
                "manifest has {} entries for {m} patches",
                self.entries.len()
            )));
        }
        let mut seen = vec![false; m];
        for e in &self.entries {
            if e.patch_index >= m || seen[e.patch_index] {
                return Err(Error::data(format!("bad or duplicate patch index {}", e.patch_index)));
            }
            seen[e.patch_index] = true;
            if !(0.0..=1.0).contains(&e.alpha) {
                return Err(Error::data(format!("alpha {} outside [0, 1]", e.alpha)));
            }
            if e.origin != self.grid.origin(e.patch_index) {
                return Err(Error::data(format!(
                    "entry origin {:?} disagrees with grid for patch {}",
                    e.origin, e.patch_index
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self).expect("serializable manifest");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let manifest: EnsembleManifest = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::format(format!("bad manifest: {e}")))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// Neighbor-transfer schedule: patches in raster order, each initialized
/// from the nearest already-scheduled patch (Euclidean distance on integer
/// grid coordinates, ties to the smaller raster index). The result is a
/// spanning tree rooted at patch 0.
pub fn training_order(spec: &PatchGridSpec) -> Vec<(usize, Option<usize>)> {
    let m = spec.num_patches();
    let mut order = Vec::with_capacity(m);
    for j in 0..m {
        if j == 0 {
            order.push((0, None));
            continue;
        }
        let (jx, jy, jz) = spec.grid_coords(j);
        let mut best: Option<(usize, usize)> = None; // (distance^2, parent)
        for p in 0..j {
            let (px, py, pz) = spec.grid_coords(p);
            let d2 = jx.abs_diff(px).pow(2) + jy.abs_diff(py).pow(2) + jz.abs_diff(pz).pow(2);
            match best {
                Some((bd, _)) if bd <= d2 => {}
                _ => best = Some((d2, p)),
            }
        }
        order.push((j, best.map(|(_, p)| p)));
    }
    order
}

/// Group the schedule into dependency levels: a patch may train once its
/// parent's level finished.
fn dependency_levels(order: &[(usize, Option<usize>)]) -> Vec<Vec<usize>> {
    let mut depth = vec![0usize; order.len()];
    let mut levels: Vec<Vec<usize>> = Vec::new();
    for &(j, parent) in order {
        let d = match parent {
            None => 0,
            Some(p) => depth[p] + 1,
        };
        depth[j] = d;
        if levels.len() <= d {
            levels.resize(d + 1, Vec::new());
        }
        levels[d].push(j);
    }
    levels
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraderMeta {
    kind: String,
    arch: UnetArch,
    patch_dims: (usize, usize, usize),
    seed: u64,
    alpha: f64,
    patch_index: usize,
    origin: (usize, usize, usize),
}

/// Persist a grading model with its fusion weight.
pub fn save_grading_model(
    path: &Path,
    model: &GradingModel,
    alpha: f64,
    patch_index: usize,
    origin: (usize, usize, usize),
) -> Result<()> {
    let meta = GraderMeta {
        kind: "grading".into(),
        arch: model.arch,
        patch_dims: model.patch_dims,
        seed: model.seed,
        alpha,
        patch_index,
        origin,
    };
    let tensors: Vec<NamedTensor> = model
        .layers
        .iter()
        .zip(LAYER_NAMES)
        .flat_map(|(l, name)| {
            [
                NamedTensor {
                    name: format!("{name}.w"),
                    dims: vec![l.out_c, l.in_c, l.kernel, l.kernel, l.kernel],
                    data: l.w.clone(),
                },
                NamedTensor {
                    name: format!("{name}.b"),
                    dims: vec![l.out_c],
                    data: l.b.clone(),
                },
            ]
        })
        .collect();
    write_checkpoint(path, &serde_json::to_string(&meta).expect("serializable"), &tensors)
}

/// Load a grading model; returns the model and its stored alpha.
pub fn load_grading_model(path: &Path) -> Result<(GradingModel, f64)> {
    let (meta_json, tensors) = read_checkpoint(path)?;
    let meta: GraderMeta = serde_json::from_str(&meta_json)
        .map_err(|e| Error::format(format!("bad grading checkpoint metadata: {e}")))?;
    if meta.kind != "grading" {
        return Err(Error::format(format!("checkpoint kind {:?} is not a grading model", meta.kind)));
    }
    let mut layers = Vec::with_capacity(LAYER_NAMES.len());
    for name in LAYER_NAMES {
        let find = |suffix: &str| -> Result<&NamedTensor> {
            tensors
                .iter()
                .find(|t| t.name == format!("{name}.{suffix}"))
                .ok_or_else(|| Error::format(format!("checkpoint missing tensor {name}.{suffix}")))
        };
        let w = find("w")?;
        let b = find("b")?;
        if w.dims.len() != 5 {
            return Err(Error::format(format!("tensor {name}.w must have rank 5")));
        }
        layers.push(ConvLayer {
            out_c: w.dims[0],
            in_c: w.dims[1],
            kernel: w.dims[2],
            w: w.data.clone(),
            b: b.data.clone(),
        });
    }
    let model = GradingModel {
        arch: meta.arch,
        patch_dims: meta.patch_dims,
        seed: meta.seed,
        layers,
    };
    Ok((model, meta.alpha))
}

fn checkpoint_name(patch_index: usize) -> String {
    format!("ckpt_{patch_index:03}.dgck")
}

/// Train the full ensemble in neighbor-transfer order, writing one
/// checkpoint per patch into `out_dir` plus `manifest.json`.
///
/// Patches whose parent finished may train concurrently; per-patch derived
/// seeds keep results independent of scheduling. With `resume`, loadable
/// checkpoints are kept and only missing patches train.
pub fn train_ensemble(
    cohort: &[GraderSubject],
    spec: &PatchGridSpec,
    arch: UnetArch,
    cfg: &TrainConfig,
    fusion_mode: FusionMode,
    out_dir: &Path,
    resume: bool,
) -> Result<EnsembleManifest> {
    std::fs::create_dir_all(out_dir)?;
    let m = spec.num_patches();
    let order = training_order(spec);
    let levels = dependency_levels(&order);
    let parent_of: Vec<Option<usize>> = {
        let mut v = vec![None; m];
        for &(j, p) in &order {
            v[j] = p;
        }
        v
    };

    let mut models: Vec<Option<(GradingModel, f64)>> = (0..m).map(|_| None).collect();
    let mut stats: Vec<Option<TrainStats>> = (0..m).map(|_| None).collect();
    for level in levels {
        let results: Vec<(usize, Result<(GradingModel, f64, Option<TrainStats>)>)> = level
            .par_iter()
            .map(|&j| {
                let path = out_dir.join(checkpoint_name(j));
                if resume && path.exists() {
                    if let Ok((model, alpha)) = load_grading_model(&path) {
                        if model.patch_dims == spec.patch_dims && model.arch == arch {
                            return (j, Ok((model, alpha, None)));
                        }
                    }
                }
                let origin = spec.origin(j);
                let parent_model = parent_of[j].map(|p| {
                    &models[p]
                        .as_ref()
                        .expect("parent level completed before child")
                        .0
                });
                let trained = train_patch_model(
                    j,
                    origin,
                    spec.patch_dims,
                    cohort,
                    parent_model,
                    arch,
                    cfg,
                )
                .and_then(|(model, st)| {
                    save_grading_model(&path, &model, st.alpha, j, origin)?;
                    Ok((model, st.alpha, Some(st)))
                });
                (j, trained)
            })
            .collect();
        for (j, r) in results {
            let (model, alpha, st) = r?;
            models[j] = Some((model, alpha));
            stats[j] = st;
        }
    }

    let entries: Vec<EnsembleEntry> = (0..m)
        .map(|j| EnsembleEntry {
            patch_index: j,
            origin: spec.origin(j),
            checkpoint: checkpoint_name(j),
            alpha: models[j].as_ref().expect("all patches trained").1,
        })
        .collect();
    let manifest = EnsembleManifest {
        grid: spec.clone(),
        arch,
        strategy: Strategy::Collective,
        fusion_mode,
        seed: cfg.seed,
        entries,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Per-voxel weighted average of overlapping patch grades:
/// `G_v = sum_j alpha_j g_jv / sum_j alpha_j` over patches covering v,
/// accumulated in ascending patch order. Voxels whose covering alphas are
/// all zero fall back to the unweighted mean.
pub fn fuse(
    spec: &PatchGridSpec,
    patches: &[Vec<f32>],
    alphas: &[f64],
    mode: FusionMode,
    spacing: (f32, f32, f32),
) -> Result<Volume3D> {
    let m = spec.num_patches();
    if patches.len() != m || alphas.len() != m {
        return Err(Error::data(format!(
            "fusion needs {m} patches and weights, got {} / {}",
            patches.len(),
            alphas.len()
        )));
    }
    let pn = spec.patch_dims.0 * spec.patch_dims.1 * spec.patch_dims.2;
    for (j, p) in patches.iter().enumerate() {
        if p.len() != pn {
            return Err(Error::data(format!("patch {j} has {} voxels, expected {pn}", p.len())));
        }
    }
    for (j, &a) in alphas.iter().enumerate() {
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::data(format!("alpha {a} for patch {j} outside [0, 1]")));
        }
    }
    let dims = spec.volume_dims;
    let n = dims.0 * dims.1 * dims.2;
    let mut weighted_sum = vec![0.0f64; n];
    let mut weight_sum = vec![0.0f64; n];
    let mut plain_sum = vec![0.0f64; n];
    let mut count = vec![0u32; n];
    let (px, py, pz) = spec.patch_dims;
    for j in 0..m {
        let o = spec.origin(j);
        let a = alphas[j];
        let patch = &patches[j];
        for z in 0..pz {
            for y in 0..py {
                let row = (o.0) + dims.0 * ((o.1 + y) + dims.1 * (o.2 + z));
                let prow = px * (y + py * z);
                for x in 0..px {
                    let g = patch[prow + x] as f64;
                    let v = row + x;
                    weighted_sum[v] += a * g;
                    weight_sum[v] += a;
                    plain_sum[v] += g;
                    count[v] += 1;
                }
            }
        }
    }
    let data: Vec<f32> = (0..n)
        .map(|v| {
            if count[v] == 0 {
                return 0.0;
            }
            let value = match mode {
                FusionMode::Weighted if weight_sum[v] > 0.0 => weighted_sum[v] / weight_sum[v],
                _ => plain_sum[v] / count[v] as f64,
            };
            value as f32
        })
        .collect();
    Volume3D::new(dims, spacing, data)
}

/// A manifest with its models in memory, ready to grade subjects.
pub struct LoadedEnsemble {
    pub manifest: EnsembleManifest,
    pub models: Vec<GradingModel>,
}

impl LoadedEnsemble {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = EnsembleManifest::load(manifest_path)?;
        let base: PathBuf = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut models: Vec<Option<GradingModel>> = (0..manifest.entries.len()).map(|_| None).collect();
        for e in &manifest.entries {
            let (model, _) = load_grading_model(&base.join(&e.checkpoint))?;
            models[e.patch_index] = Some(model);
        }
        Ok(LoadedEnsemble {
            manifest,
            models: models.into_iter().map(|m| m.expect("validated complete")).collect(),
        })
    }

    pub fn from_parts(manifest: EnsembleManifest, models: Vec<GradingModel>) -> Result<Self> {
        manifest.validate()?;
        if models.len() != manifest.entries.len() {
            return Err(Error::data("model count does not match manifest"));
        }
        Ok(LoadedEnsemble { manifest, models })
    }

    pub fn alphas(&self) -> Vec<f64> {
        let mut a = vec![0.0f64; self.manifest.entries.len()];
        for e in &self.manifest.entries {
            a[e.patch_index] = e.alpha;
        }
        a
    }

    /// Full-resolution grading map for one subject: downsample, grade every
    /// patch at its manifest origin, fuse, upsample back and zero voxels
    /// outside the full-resolution ICC.
    pub fn grade_subject(&self, vol: &Volume3D, labels: &LabelVolume) -> Result<Volume3D> {
        if vol.dims() != labels.dims() {
            return Err(Error::data(format!(
                "volume dims {:?} do not match labels {:?}",
                vol.dims(),
                labels.dims()
            )));
        }
        let low = downsample_stride2(vol);
        let spec = &self.manifest.grid;
        if low.dims() != spec.volume_dims {
            return Err(Error::data(format!(
                "grading-resolution dims {:?} do not match the manifest grid {:?}",
                low.dims(),
                spec.volume_dims
            )));
        }
        let m = spec.num_patches();
        let grades: Vec<Vec<f32>> = (0..m)
            .into_par_iter()
            .map(|j| -> Result<Vec<f32>> {
                let patch = extract_patch(&low, spec.origin(j), spec.patch_dims)?;
                self.models[j].forward(patch.data())
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = fuse(
            spec,
            &grades,
            &self.alphas(),
            self.manifest.fusion_mode,
            low.spacing(),
        )?;
        let mut full = upsample_trilinear(&fused, vol.dims())?;
        for (v, &l) in full.data_mut().iter_mut().zip(labels.labels()) {
            if l == 0 {
                *v = 0.0;
            }
        }
        Ok(full)
    }
}
