//! Analysis artifact emission: group-average maps, structure rankings,
//! cross-structure connectivity tables and grayscale slice images.

use std::path::Path;

use crate::error::{Error, Result};
use crate::features::{ClassLabel, StructureFeatureVector};
use crate::graph::edges_volume_diff;
use crate::metrics::{adjacency_group_analysis, normalize_unit_interval, top_structures, AdjacencyAnalysis};
use crate::nifti::write_volume_nifti;
use crate::phantom::SubjectRecord;
use crate::volume::Volume3D;

/// Map a grading value in [-1, 1] to an 8-bit gray level.
pub fn grade_to_gray(g: f32) -> u8 {
    let clamped = g.clamp(-1.0, 1.0);
    ((clamped + 1.0) / 2.0 * 255.0).round() as u8
}

/// Binary PGM (P5) of one axial slice (fixed z) of a volume.
pub fn write_axial_slice_pgm(path: &Path, vol: &Volume3D, z: usize) -> Result<()> {
    let (nx, ny, nz) = vol.dims();
    if z >= nz {
        return Err(Error::config(format!("slice {z} outside volume depth {nz}")));
    }
    let mut out = Vec::with_capacity(32 + nx * ny);
    out.extend_from_slice(format!("P5\n{nx} {ny}\n255\n").as_bytes());
    for y in 0..ny {
        for x in 0..nx {
            out.push(grade_to_gray(vol.get(x, y, z)));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_top_structures_csv(path: &Path, ranked: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("rank,structure_id,mean_abs_grading\n");
    for (rank, (id, score)) in ranked.iter().enumerate() {
        out.push_str(&format!("{},{},{}\n", rank + 1, id, score));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_top_pairs_csv(path: &Path, analysis: &AdjacencyAnalysis) -> Result<()> {
    let mut out = String::from("rank,structure_a,structure_b,abs_mean_difference\n");
    for (rank, (a, b, d)) in analysis.top_pairs.iter().enumerate() {
        out.push_str(&format!("{},{},{},{}\n", rank + 1, a, b, d));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// s x s matrix as CSV, normalized to [0, 1] for export.
pub fn write_adjacency_csv(path: &Path, matrix: &[f64], s: usize) -> Result<()> {
    if matrix.len() != s * s {
        return Err(Error::data("matrix size mismatch"));
    }
    let normed = normalize_unit_interval(matrix);
    let mut out = String::new();
    for row in 0..s {
        let cells: Vec<String> = (0..s).map(|c| format!("{}", normed[row * s + c])).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Emit the full analysis report for graded test subjects:
/// per-group average maps (+ PGM slices), the top-k structure ranking and
/// the top-25 volume-difference connectivity pairs.
pub fn write_report(
    out_dir: &Path,
    group_maps: &[(ClassLabel, Volume3D)],
    test_vectors: &[StructureFeatureVector],
    records: &[SubjectRecord],
    slices: &[usize],
    top_k_structures: usize,
    top_k_pairs: usize,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for (label, map) in group_maps {
        write_volume_nifti(&out_dir.join(format!("group_{label}_grading.nii")), map)?;
        for &z in slices {
            write_axial_slice_pgm(
                &out_dir.join(format!("group_{label}_axial_{z:03}.pgm")),
                map,
                z,
            )?;
        }
    }

    let dg: Vec<Vec<f64>> = test_vectors.iter().map(|v| v.dg.clone()).collect();
    if dg.is_empty() {
        return Err(Error::data("no test vectors for the report"));
    }
    let ranked = top_structures(&dg, top_k_structures)?;
    write_top_structures_csv(&out_dir.join("top_structures.csv"), &ranked)?;

    let class_of = |id: &str| -> Option<ClassLabel> {
        records.iter().find(|r| r.subject_id == id).map(|r| r.label)
    };
    let mut pos_adj = Vec::new();
    let mut neg_adj = Vec::new();
    for v in test_vectors {
        let adj = edges_volume_diff(&v.volumes);
        match class_of(&v.subject_id) {
            Some(l) if l.is_positive() => pos_adj.push(adj),
            Some(_) => neg_adj.push(adj),
            None => return Err(Error::data(format!("subject {} missing from metadata", v.subject_id))),
        }
    }
    let s = test_vectors[0].dg.len();
    let analysis = adjacency_group_analysis(&pos_adj, &neg_adj, s, top_k_pairs)?;
    write_top_pairs_csv(&out_dir.join("top_pairs.csv"), &analysis)?;
    write_adjacency_csv(&out_dir.join("adjacency_positive.csv"), &analysis.mean_pos, s)?;
    write_adjacency_csv(&out_dir.join("adjacency_negative.csv"), &analysis.mean_neg, s)?;
    Ok(())
}
