//! Asymmetrical abnormal region selection: the part of a tumor mask whose
//! mirror voxel (across the mid-sagittal plane) is not tumor.

use crate::volume::BinaryMask;

/// Per-case asymmetry summary used in evaluation reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymStats {
    pub asym_voxels: usize,
    pub total_voxels: usize,
    pub asym_volume_ml: f64,
}

/// Asymmetrical region mask: `m(p) = s(p) · (1 − s(mirror p))`, i.e.
/// `m = s − s ∩ s′` with `s′` the sagittal flip of `s`. A 1 marks an
/// asymmetrical lesion voxel.
pub fn asym_mask(s: &BinaryMask) -> BinaryMask {
    let [d, h, w] = s.shape();
    let data = s.data();
    let mut out = Vec::with_capacity(data.len());
    for row in 0..d * h {
        let base = row * w;
        for k in 0..w {
            let own = data[base + k];
            let mirror = data[base + (w - 1 - k)];
            out.push(own & (1 - mirror));
        }
    }
    BinaryMask::new(s.shape(), s.spacing(), out).expect("asym mask inherits valid geometry")
}

/// Counts of asymmetric and total lesion voxels plus the asymmetric volume
/// in milliliters (1 ml = 1000 mm³).
pub fn asym_stats(s: &BinaryMask) -> AsymStats {
    let m = asym_mask(s);
    let [sd, sh, sw] = s.spacing();
    let voxel_mm3 = sd as f64 * sh as f64 * sw as f64;
    let asym_voxels = m.count_ones();
    AsymStats {
        asym_voxels,
        total_voxels: s.count_ones(),
        asym_volume_ml: asym_voxels as f64 * voxel_mm3 / 1000.0,
    }
}
