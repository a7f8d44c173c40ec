//! Volume containers and the resampling/masking operations shared by all
//! pipeline stages.
//!
//! Voxel data is stored row-major with x fastest: `index = x + nx*(y + ny*z)`.
//! The same order is used for every on-disk payload.

use crate::error::{Error, Result};

/// Scalar intensity grid with voxel spacing in mm.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    data: Vec<f32>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), spacing: (f32, f32, f32), data: Vec<f32>) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::config(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != n {
            return Err(Error::data(format!(
                "volume data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                dims,
                n
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::config(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("volume contains non-finite values"));
        }
        Ok(Volume3D { dims, spacing, data })
    }

    pub fn filled(dims: (usize, usize, usize), spacing: (f32, f32, f32), value: f32) -> Self {
        let n = dims.0 * dims.1 * dims.2;
        Volume3D {
            dims,
            spacing,
            data: vec![value; n],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims.0 && y < self.dims.1 && z < self.dims.2);
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Integer structure-label grid. Label 0 marks voxels outside the
/// intracranial cavity (ICC); labels 1..=s identify structures, so the ICC
/// mask is exactly `label > 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: (usize, usize, usize),
    spacing: (f32, f32, f32),
    labels: Vec<u16>,
    num_structures: u16,
    used_labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(
        dims: (usize, usize, usize),
        spacing: (f32, f32, f32),
        labels: Vec<u16>,
        num_structures: u16,
    ) -> Result<Self> {
        let n = dims.0 * dims.1 * dims.2;
        if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
            return Err(Error::config(format!("label volume dims must be positive, got {dims:?}")));
        }
        if labels.len() != n {
            return Err(Error::data(format!(
                "label data length {} does not match dims {:?}",
                labels.len(),
                dims
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.2 > 0.0) {
            return Err(Error::config(format!("spacing must be strictly positive, got {spacing:?}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l > num_structures) {
            return Err(Error::data(format!(
                "label {bad} exceeds declared structure count {num_structures}"
            )));
        }
        let used_labels = collect_used(&labels);
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
            num_structures,
            used_labels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn spacing(&self) -> (f32, f32, f32) {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn num_structures(&self) -> u16 {
        self.num_structures
    }

    /// Sorted distinct nonzero labels present in the volume.
    pub fn used_labels(&self) -> &[u16] {
        &self.used_labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.labels[self.index(x, y, z)]
    }

    pub fn icc_voxel_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }
}

fn collect_used(labels: &[u16]) -> Vec<u16> {
    let mut seen = std::collections::BTreeSet::new();
    for &l in labels {
        if l > 0 {
            seen.insert(l);
        }
    }
    seen.into_iter().collect()
}

fn half_up(d: usize) -> usize {
    d.div_ceil(2)
}

/// Exact stride-2 subsampling: output voxel (i,j,k) is input voxel
/// (2i,2j,2k); output dim per axis is ceil(D/2) and spacing doubles.
pub fn downsample_stride2(vol: &Volume3D) -> Volume3D {
    let (nx, ny, nz) = vol.dims();
    let (ox, oy, oz) = (half_up(nx), half_up(ny), half_up(nz));
    let mut data = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                data.push(vol.get(2 * x, 2 * y, 2 * z));
            }
        }
    }
    let (sx, sy, sz) = vol.spacing();
    Volume3D {
        dims: (ox, oy, oz),
        spacing: (2.0 * sx, 2.0 * sy, 2.0 * sz),
        data,
    }
}

/// Stride-2 subsampling of a label grid with the same index rule as
/// [`downsample_stride2`] (nearest = exact stride pick).
pub fn downsample_labels_stride2(lab: &LabelVolume) -> LabelVolume {
    let (nx, ny, nz) = lab.dims();
    let (ox, oy, oz) = (half_up(nx), half_up(ny), half_up(nz));
    let mut labels = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                labels.push(lab.get(2 * x, 2 * y, 2 * z));
            }
        }
    }
    let (sx, sy, sz) = lab.spacing();
    let used_labels = collect_used(&labels);
    LabelVolume {
        dims: (ox, oy, oz),
        spacing: (2.0 * sx, 2.0 * sy, 2.0 * sz),
        labels,
        num_structures: lab.num_structures,
        used_labels,
    }
}

/// Corner-aligned trilinear upsampling: source coordinate for output index i
/// is `i*(Dsrc-1)/(Ddst-1)`. Output values are convex combinations of input
/// values, so min/max bounds are preserved.
pub fn upsample_trilinear(vol: &Volume3D, target_dims: (usize, usize, usize)) -> Result<Volume3D> {
    let src = vol.dims();
    for (d, (t, s)) in [
        (0, (target_dims.0, src.0)),
        (1, (target_dims.1, src.1)),
        (2, (target_dims.2, src.2)),
    ] {
        if t < s {
            return Err(Error::config(format!(
                "target dim {t} smaller than source dim {s} on axis {d}"
            )));
        }
        if t == 1 && s > 1 {
            return Err(Error::config(format!(
                "cannot collapse axis {d} from {s} to 1 by interpolation"
            )));
        }
    }
    if target_dims == src {
        return Ok(vol.clone());
    }

    // per-axis precomputed (lower index, fraction)
    let axis_map = |s: usize, t: usize| -> Vec<(usize, f64)> {
        (0..t)
            .map(|i| {
                if t == 1 || s == 1 {
                    return (0, 0.0);
                }
                let c = i as f64 * (s - 1) as f64 / (t - 1) as f64;
                let lo = (c.floor() as usize).min(s - 2);
                (lo, c - lo as f64)
            })
            .collect()
    };
    let mx = axis_map(src.0, target_dims.0);
    let my = axis_map(src.1, target_dims.1);
    let mz = axis_map(src.2, target_dims.2);

    let mut data = Vec::with_capacity(target_dims.0 * target_dims.1 * target_dims.2);
    for &(z0, fz) in &mz {
        let z1 = if src.2 == 1 { z0 } else { z0 + 1 };
        for &(y0, fy) in &my {
            let y1 = if src.1 == 1 { y0 } else { y0 + 1 };
            for &(x0, fx) in &mx {
                let x1 = if src.0 == 1 { x0 } else { x0 + 1 };
                let c000 = vol.get(x0, y0, z0) as f64;
                let c100 = vol.get(x1, y0, z0) as f64;
                let c010 = vol.get(x0, y1, z0) as f64;
                let c110 = vol.get(x1, y1, z0) as f64;
                let c001 = vol.get(x0, y0, z1) as f64;
                let c101 = vol.get(x1, y0, z1) as f64;
                let c011 = vol.get(x0, y1, z1) as f64;
                let c111 = vol.get(x1, y1, z1) as f64;
                let c00 = c000 + (c100 - c000) * fx;
                let c10 = c010 + (c110 - c010) * fx;
                let c01 = c001 + (c101 - c001) * fx;
                let c11 = c011 + (c111 - c011) * fx;
                let c0 = c00 + (c10 - c00) * fy;
                let c1 = c01 + (c11 - c01) * fy;
                data.push((c0 + (c1 - c0) * fz) as f32);
            }
        }
    }
    let (sx, sy, sz) = vol.spacing();
    let scale = |s: usize, t: usize, sp: f32| -> f32 {
        if t <= 1 {
            sp
        } else {
            sp * (s.max(1) - 1).max(1) as f32 / (t - 1) as f32
        }
    };
    Ok(Volume3D {
        dims: target_dims,
        spacing: (
            scale(src.0, target_dims.0, sx),
            scale(src.1, target_dims.1, sy),
            scale(src.2, target_dims.2, sz),
        ),
        data,
    })
}

/// Boolean ICC mask: true exactly where label > 0.
pub fn icc_mask(lab: &LabelVolume) -> Vec<bool> {
    lab.labels().iter().map(|&l| l > 0).collect()
}
