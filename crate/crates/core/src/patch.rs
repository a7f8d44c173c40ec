//! Deterministic overlapping patch layout over a volume.
//!
//! Origins are evenly spaced per axis with round-half-up so that the first
//! patch starts at 0, the last ends flush with the axis, and neighbors share
//! roughly half their extent. Patch index j runs in raster order with x
//! fastest: `j = jx + kx*(jy + ky*jz)`; this fixes both the transfer-learning
//! neighbor order and the fusion summation order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::volume::Volume3D;

/// Evenly spaced origins for `k` patches of length `p` on an axis of length
/// `d`: `origin_j = round_half_up(j*(d-p)/(k-1))`, or the centered single
/// patch for k = 1.
pub fn compute_origins(d: usize, p: usize, k: usize) -> Result<Vec<usize>> {
    if p == 0 || k == 0 {
        return Err(Error::config(format!("patch length {p} and count {k} must be positive")));
    }
    if p > d {
        return Err(Error::config(format!("patch length {p} exceeds axis length {d}")));
    }
    let span = d - p;
    if k == 1 {
        return Ok(vec![span / 2]);
    }
    let mut origins = Vec::with_capacity(k);
    for j in 0..k {
        // round-half-up of j*span/(k-1) in exact integer arithmetic
        let o = (2 * j * span + (k - 1)) / (2 * (k - 1));
        origins.push(o);
    }
    if origins.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "origins {origins:?} not strictly increasing; too many patches (d={d}, p={p}, k={k})"
        )));
    }
    Ok(origins)
}

/// Immutable overlapping-patch layout for one volume geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchGridSpec {
    pub volume_dims: (usize, usize, usize),
    pub patch_dims: (usize, usize, usize),
    pub k_per_axis: (usize, usize, usize),
    pub origins: [Vec<usize>; 3],
}

impl PatchGridSpec {
    pub fn new(
        volume_dims: (usize, usize, usize),
        patch_dims: (usize, usize, usize),
        k_per_axis: (usize, usize, usize),
    ) -> Result<Self> {
        let origins = [
            compute_origins(volume_dims.0, patch_dims.0, k_per_axis.0)?,
            compute_origins(volume_dims.1, patch_dims.1, k_per_axis.1)?,
            compute_origins(volume_dims.2, patch_dims.2, k_per_axis.2)?,
        ];
        let spec = PatchGridSpec {
            volume_dims,
            patch_dims,
            k_per_axis,
            origins,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Recheck structural invariants (also applied to deserialized specs).
    pub fn validate(&self) -> Result<()> {
        let dims = [self.volume_dims.0, self.volume_dims.1, self.volume_dims.2];
        let pd = [self.patch_dims.0, self.patch_dims.1, self.patch_dims.2];
        let ks = [self.k_per_axis.0, self.k_per_axis.1, self.k_per_axis.2];
        for a in 0..3 {
            let os = &self.origins[a];
            if os.len() != ks[a] || os.is_empty() {
                return Err(Error::config(format!("axis {a}: expected {} origins, found {}", ks[a], os.len())));
            }
            for &o in os {
                if o + pd[a] > dims[a] {
                    return Err(Error::config(format!("axis {a}: origin {o} overruns the volume")));
                }
            }
            if ks[a] >= 2 {
                if os[0] != 0 || *os.last().unwrap() != dims[a] - pd[a] {
                    return Err(Error::config(format!("axis {a}: origins must span the axis")));
                }
                // union of patches covers the axis
                for w in os.windows(2) {
                    if w[1] > w[0] + pd[a] {
                        return Err(Error::config(format!("axis {a}: gap between origins {} and {}", w[0], w[1])));
                    }
                }
            }
        }
        Ok(())
    }

    /// Total patch count m.
    pub fn num_patches(&self) -> usize {
        self.k_per_axis.0 * self.k_per_axis.1 * self.k_per_axis.2
    }

    /// Grid coordinates of patch j (x fastest raster order).
    pub fn grid_coords(&self, j: usize) -> (usize, usize, usize) {
        let (kx, ky, _) = self.k_per_axis;
        (j % kx, (j / kx) % ky, j / (kx * ky))
    }

    pub fn patch_index(&self, gx: usize, gy: usize, gz: usize) -> usize {
        let (kx, ky, _) = self.k_per_axis;
        gx + kx * (gy + ky * gz)
    }

    /// Start voxel of patch j.
    pub fn origin(&self, j: usize) -> (usize, usize, usize) {
        let (gx, gy, gz) = self.grid_coords(j);
        (self.origins[0][gx], self.origins[1][gy], self.origins[2][gz])
    }

    /// Indices (ascending) of every patch whose region contains the voxel.
    pub fn covering_patches(&self, voxel: (usize, usize, usize)) -> Result<Vec<usize>> {
        let v = [voxel.0, voxel.1, voxel.2];
        let dims = [self.volume_dims.0, self.volume_dims.1, self.volume_dims.2];
        let pd = [self.patch_dims.0, self.patch_dims.1, self.patch_dims.2];
        if v.iter().zip(&dims).any(|(a, b)| a >= b) {
            return Err(Error::config(format!("voxel {voxel:?} outside volume {dims:?}")));
        }
        let mut per_axis: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for a in 0..3 {
            for (gi, &o) in self.origins[a].iter().enumerate() {
                if o <= v[a] && v[a] < o + pd[a] {
                    per_axis[a].push(gi);
                }
            }
        }
        let mut out = Vec::new();
        for &gz in &per_axis[2] {
            for &gy in &per_axis[1] {
                for &gx in &per_axis[0] {
                    out.push(self.patch_index(gx, gy, gz));
                }
            }
        }
        out.sort_unstable();
        Ok(out)
    }
}

/// Exact sub-block copy of `patch_dims` voxels starting at `origin`.
pub fn extract_patch(
    vol: &Volume3D,
    origin: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
) -> Result<Volume3D> {
    let (nx, ny, nz) = vol.dims();
    if origin.0 + patch_dims.0 > nx || origin.1 + patch_dims.1 > ny || origin.2 + patch_dims.2 > nz {
        return Err(Error::config(format!(
            "patch {patch_dims:?} at {origin:?} out of bounds for {:?}",
            vol.dims()
        )));
    }
    let mut data = Vec::with_capacity(patch_dims.0 * patch_dims.1 * patch_dims.2);
    for z in 0..patch_dims.2 {
        for y in 0..patch_dims.1 {
            let row = vol.index(origin.0, origin.1 + y, origin.2 + z);
            data.extend_from_slice(&vol.data()[row..row + patch_dims.0]);
        }
    }
    Volume3D::new(patch_dims, vol.spacing(), data)
}

/// Sub-block copy of a boolean mask stored alongside volume dims.
pub fn extract_mask_patch(
    dims: (usize, usize, usize),
    mask: &[bool],
    origin: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
) -> Result<Vec<bool>> {
    if mask.len() != dims.0 * dims.1 * dims.2 {
        return Err(Error::data("mask length does not match dims"));
    }
    if origin.0 + patch_dims.0 > dims.0 || origin.1 + patch_dims.1 > dims.1 || origin.2 + patch_dims.2 > dims.2 {
        return Err(Error::config(format!("mask patch at {origin:?} out of bounds")));
    }
    let mut out = Vec::with_capacity(patch_dims.0 * patch_dims.1 * patch_dims.2);
    for z in 0..patch_dims.2 {
        for y in 0..patch_dims.1 {
            let row = origin.0 + dims.0 * (origin.1 + y + dims.1 * (origin.2 + z));
            out.extend_from_slice(&mask[row..row + patch_dims.0]);
        }
    }
    Ok(out)
}

/// Translate an origin by an independent uniform draw from {-1, 0, 1} per
/// axis, clamped to keep the patch inside the volume.
pub fn jitter_origin(
    origin: (usize, usize, usize),
    patch_dims: (usize, usize, usize),
    volume_dims: (usize, usize, usize),
    rng: &mut Rng,
) -> (usize, usize, usize) {
    let shift = |o: usize, p: usize, d: usize, t: i64| -> usize {
        let max = (d - p) as i64;
        (o as i64 + t).clamp(0, max) as usize
    };
    let (tx, ty, tz) = (rng.jitter_step(), rng.jitter_step(), rng.jitter_step());
    (
        shift(origin.0, patch_dims.0, volume_dims.0, tx),
        shift(origin.1, patch_dims.1, volume_dims.1, ty),
        shift(origin.2, patch_dims.2, volume_dims.2, tz),
    )
}
