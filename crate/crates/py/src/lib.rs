//! Python bindings for the grading pipeline: volume containers and I/O,
//! resampling, patch geometry, the phantom generator, trained-artifact
//! loading (ensemble + classifier) and the evaluation statistics.
//!
//! Data crosses the boundary as plain lists; volumes stay row-major with x
//! fastest, matching the on-disk layout.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use voxgrade_core::cluster;
use voxgrade_core::ensemble::LoadedEnsemble;
use voxgrade_core::error::Error;
use voxgrade_core::features::{self, ClassLabel, StructureFeatureVector};
use voxgrade_core::metrics;
use voxgrade_core::nifti;
use voxgrade_core::patch;
use voxgrade_core::phantom::{self, PhantomConfig};
use voxgrade_core::pipeline::ClassifierBundle;
use voxgrade_core::rng::Rng;
use voxgrade_core::stats;
use voxgrade_core::volume;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Scalar intensity grid with voxel spacing.
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Volume {
    inner: volume::Volume3D,
}

#[pymethods]
impl Volume {
    #[new]
    fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> PyResult<Self> {
        Ok(Volume {
            inner: volume::Volume3D::new(dims, spacing, data).map_err(to_py)?,
        })
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> (f32, f32, f32) {
        self.inner.spacing()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.inner.get(x, y, z)
    }

    /// Exact stride-2 subsampling (spacing doubles).
    fn downsample(&self) -> Volume {
        Volume {
            inner: volume::downsample_stride2(&self.inner),
        }
    }

    /// Corner-aligned trilinear upsampling to the target dims.
    fn upsample(&self, target_dims: (usize, usize, usize)) -> PyResult<Volume> {
        Ok(Volume {
            inner: volume::upsample_trilinear(&self.inner, target_dims).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

/// Integer structure-label grid (0 = outside the intracranial cavity).
#[pyclass(skip_from_py_object)]
#[derive(Clone)]
struct Labels {
    inner: volume::LabelVolume,
}

#[pymethods]
impl Labels {
    #[new]
    fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        labels: Vec<u16>,
        structures: u16,
    ) -> PyResult<Self> {
        Ok(Labels {
            inner: volume::LabelVolume::new(dims, spacing, labels, structures).map_err(to_py)?,
        })
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn structures(&self) -> u16 {
        self.inner.num_structures()
    }

    fn labels(&self) -> Vec<u16> {
        self.inner.labels().to_vec()
    }

    fn used_labels(&self) -> Vec<u16> {
        self.inner.used_labels().to_vec()
    }

    /// Boolean mask: true where label > 0.
    fn icc_mask(&self) -> Vec<bool> {
        volume::icc_mask(&self.inner)
    }

    fn downsample(&self) -> Labels {
        Labels {
            inner: volume::downsample_labels_stride2(&self.inner),
        }
    }

    /// Structure volumes as % of the intracranial cavity.
    fn structure_volumes(&self) -> PyResult<Vec<f64>> {
        features::structure_volumes(&self.inner).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Labels(dims={:?}, structures={})",
            self.inner.dims(),
            self.inner.num_structures()
        )
    }
}

#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<Volume> {
    Ok(Volume {
        inner: nifti::read_volume(&path).map_err(to_py)?,
    })
}

#[pyfunction]
fn write_volume(path: PathBuf, vol: &Volume) -> PyResult<()> {
    nifti::write_volume_nifti(&path, &vol.inner).map_err(to_py)
}

#[pyfunction]
fn read_labels(path: PathBuf) -> PyResult<Labels> {
    Ok(Labels {
        inner: nifti::read_labels(&path).map_err(to_py)?,
    })
}

#[pyfunction]
fn write_labels(path: PathBuf, labels: &Labels) -> PyResult<()> {
    nifti::write_labels_nifti(&path, &labels.inner).map_err(to_py)
}

/// Evenly spaced overlapping patch origins along one axis.
#[pyfunction]
fn compute_origins(axis_len: usize, patch_len: usize, count: usize) -> PyResult<Vec<usize>> {
    patch::compute_origins(axis_len, patch_len, count).map_err(to_py)
}

/// Mean grading score per structure.
#[pyfunction]
fn structure_grading(map: &Volume, labels: &Labels) -> PyResult<Vec<f64>> {
    features::structure_grading(&map.inner, &labels.inner).map_err(to_py)
}

/// One synthetic subject: (volume, labels, age).
/// `cls` is one of "CN", "AD", "sMCI", "pMCI".
#[pyfunction]
#[pyo3(signature = (cls, seed, null_signal = false))]
fn generate_phantom_subject(cls: &str, seed: u64, null_signal: bool) -> PyResult<(Volume, Labels, f64)> {
    let class = ClassLabel::parse(cls).map_err(to_py)?;
    let cfg = if null_signal {
        PhantomConfig::default().null_signal()
    } else {
        PhantomConfig::default()
    };
    let mut rng = Rng::seed_from_u64(seed);
    let (vol, lab, age) = phantom::generate_subject(&cfg, class, &mut rng).map_err(to_py)?;
    Ok((Volume { inner: vol }, Labels { inner: lab }, age))
}

#[pyfunction]
fn bacc(labels: Vec<bool>, predictions: Vec<bool>) -> PyResult<f64> {
    metrics::bacc(&labels, &predictions).map_err(to_py)
}

#[pyfunction]
fn auc(labels: Vec<bool>, scores: Vec<f64>) -> PyResult<f64> {
    metrics::auc(&labels, &scores).map_err(to_py)
}

#[pyfunction]
fn cosine_similarity(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    metrics::cosine_similarity(&u, &v).map_err(to_py)
}

/// One-sided Wilcoxon signed-rank p-value (alternative: x > y).
#[pyfunction]
fn wilcoxon_one_sided(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    stats::wilcoxon_one_sided(&x, &y).map_err(to_py)
}

/// Two-sided Welch t-test p-value.
#[pyfunction]
fn welch_ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    stats::welch_ttest(&a, &b).map_err(to_py)
}

/// Two-cluster K-means assignment and its silhouette score.
#[pyfunction]
fn kmeans_silhouette(points: Vec<Vec<f64>>, seed: u64) -> PyResult<(Vec<usize>, f64)> {
    let assign = cluster::kmeans2(&points, seed).map_err(to_py)?;
    let score = cluster::silhouette(&points, &assign).map_err(to_py)?;
    Ok((assign, score))
}

/// A trained patch-model ensemble, ready to grade subjects.
#[pyclass]
struct Ensemble {
    inner: LoadedEnsemble,
}

#[pymethods]
impl Ensemble {
    /// Load from a manifest.json written by `voxgrade train-ensemble`.
    #[staticmethod]
    fn load(manifest: PathBuf) -> PyResult<Self> {
        Ok(Ensemble {
            inner: LoadedEnsemble::load(&manifest).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_patches(&self) -> usize {
        self.inner.manifest.entries.len()
    }

    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas()
    }

    /// Full-resolution grading map for one subject.
    fn grade(&self, vol: &Volume, labels: &Labels) -> PyResult<Volume> {
        Ok(Volume {
            inner: self.inner.grade_subject(&vol.inner, &labels.inner).map_err(to_py)?,
        })
    }
}

/// A trained graph classifier with its fitted normalizer and edge recipe.
#[pyclass]
struct Classifier {
    inner: ClassifierBundle,
}

#[pymethods]
impl Classifier {
    /// Load from a classifier.dgck written by `voxgrade train-classifier`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Classifier {
            inner: ClassifierBundle::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn structures(&self) -> usize {
        self.inner.structures
    }

    /// Probability of the positive class with noise-averaged test-time
    /// augmentation (`seed` fixes the noise draws).
    #[pyo3(signature = (dg, volumes, age, seed = 0))]
    fn predict(&self, dg: Vec<f64>, volumes: Vec<f64>, age: f64, seed: u64) -> PyResult<f64> {
        let v = StructureFeatureVector {
            subject_id: String::new(),
            label: ClassLabel::Cn, // unused for prediction
            age,
            dg,
            volumes,
        };
        let mut rng = Rng::seed_from_u64(seed);
        self.inner.predict(&v, &mut rng).map_err(to_py)
    }

    /// Plain forward probability without test-time noise.
    fn predict_plain(&self, dg: Vec<f64>, volumes: Vec<f64>, age: f64) -> PyResult<f64> {
        let v = StructureFeatureVector {
            subject_id: String::new(),
            label: ClassLabel::Cn,
            age,
            dg,
            volumes,
        };
        self.inner.predict_plain(&v).map_err(to_py)
    }
}

#[pymodule]
fn voxgrade(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Volume>()?;
    m.add_class::<Labels>()?;
    m.add_class::<Ensemble>()?;
    m.add_class::<Classifier>()?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_labels, m)?)?;
    m.add_function(wrap_pyfunction!(write_labels, m)?)?;
    m.add_function(wrap_pyfunction!(compute_origins, m)?)?;
    m.add_function(wrap_pyfunction!(structure_grading, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom_subject, m)?)?;
    m.add_function(wrap_pyfunction!(bacc, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_one_sided, m)?)?;
    m.add_function(wrap_pyfunction!(welch_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans_silhouette, m)?)?;
    Ok(())
}
