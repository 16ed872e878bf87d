//! Dense 3D volumes and binary masks with physical spacing, the sagittal
//! flip, rigid symmetry normalization, and the `.json` + `.raw` on-disk
//! format.
//!
//! Axis convention: data is stored row-major in `(D, H, W)` order and the
//! `W` axis is the left-right (sagittal-flip) axis. All types are immutable
//! after construction.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported dtype \"{0}\" (only \"f32\" and \"u8\")")]
    UnsupportedDtype(String),
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Voxel grid dimensions as `(D, H, W)`.
pub type Shape3 = [usize; 3];

/// Dense 3D scalar volume with millimeter spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: Shape3,
    spacing: [f32; 3],
    data: Vec<f32>,
}

/// Dense 3D `{0,1}` mask with the same geometry conventions as [`Volume`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    shape: Shape3,
    spacing: [f32; 3],
    data: Vec<u8>,
}

/// Rigid transform searched by [`symmetry_normalize`]: in-plane yaw and
/// roll rotations (radians) plus a translation along W (millimeters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidParams {
    pub yaw: f64,
    pub roll: f64,
    pub tw: f64,
}

impl RigidParams {
    pub const IDENTITY: RigidParams = RigidParams {
        yaw: 0.0,
        roll: 0.0,
        tw: 0.0,
    };
}

fn check_geometry(shape: Shape3, spacing: [f32; 3], len: usize) -> Result<(), VolumeError> {
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(VolumeError::Invalid(format!("empty shape {shape:?}")));
    }
    if len != n {
        return Err(VolumeError::ShapeMismatch(format!(
            "data length {len} != D*H*W = {n} for shape {shape:?}"
        )));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(VolumeError::Invalid(format!(
            "spacing must be finite and positive, got {spacing:?}"
        )));
    }
    Ok(())
}

impl Volume {
    pub fn new(shape: Shape3, spacing: [f32; 3], data: Vec<f32>) -> Result<Self, VolumeError> {
        check_geometry(shape, spacing, data.len())?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid("non-finite intensity".into()));
        }
        Ok(Volume {
            shape,
            spacing,
            data,
        })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.data[self.idx(d, h, w)]
    }

    /// Mirror across the mid-W plane: `out(i,j,k) = in(i,j,W-1-k)`.
    pub fn flip_sagittal(&self) -> Volume {
        Volume {
            shape: self.shape,
            spacing: self.spacing,
            data: flip_w(&self.data, self.shape),
        }
    }

    pub fn min_intensity(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

impl BinaryMask {
    pub fn new(shape: Shape3, spacing: [f32; 3], data: Vec<u8>) -> Result<Self, VolumeError> {
        check_geometry(shape, spacing, data.len())?;
        if data.iter().any(|v| *v > 1) {
            return Err(VolumeError::Invalid("mask voxel not in {0,1}".into()));
        }
        Ok(BinaryMask {
            shape,
            spacing,
            data,
        })
    }

    pub fn zeros(shape: Shape3, spacing: [f32; 3]) -> Self {
        BinaryMask {
            shape,
            spacing,
            data: vec![0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn idx(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, d: usize, h: usize, w: usize) -> u8 {
        self.data[self.idx(d, h, w)]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|v| **v == 1).count()
    }

    pub fn flip_sagittal(&self) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            spacing: self.spacing,
            data: flip_w(&self.data, self.shape),
        }
    }
}

fn flip_w<T: Copy>(data: &[T], shape: Shape3) -> Vec<T> {
    let [d, h, w] = shape;
    let mut out = Vec::with_capacity(data.len());
    for row in 0..d * h {
        let base = row * w;
        out.extend(data[base..base + w].iter().rev());
    }
    out
}

// ---------------------------------------------------------------------------
// Rigid resampling
// ---------------------------------------------------------------------------

/// Physical-space mapping for [`RigidParams`]: content is rotated by
/// `Rz(yaw)·Ry(roll)` about the volume center and translated by `tw`
/// millimeters along W. Output voxel `p` samples the input at
/// `R⁻¹·(p_phys − t)`.
struct RigidMap {
    center: [f64; 3], // voxel-index center (d, h, w)
    spacing: [f64; 3],
    // inverse rotation, row-major, acting on (x=W, y=H, z=D) physical coords
    rinv: [[f64; 3]; 3],
    tw: f64,
}

impl RigidMap {
    fn new(shape: Shape3, spacing: [f32; 3], p: &RigidParams) -> Self {
        let (cy, sy) = (p.yaw.cos(), p.yaw.sin());
        let (cr, sr) = (p.roll.cos(), p.roll.sin());
        // R = Rz(yaw)·Ry(roll); inverse = Ry(-roll)·Rz(-yaw), all orthonormal.
        let r = [
            [cy * cr, -sy, cy * sr],
            [sy * cr, cy, sy * sr],
            [-sr, 0.0, cr],
        ];
        let rinv = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        RigidMap {
            center: [
                (shape[0] as f64 - 1.0) / 2.0,
                (shape[1] as f64 - 1.0) / 2.0,
                (shape[2] as f64 - 1.0) / 2.0,
            ],
            spacing: [spacing[0] as f64, spacing[1] as f64, spacing[2] as f64],
            rinv,
            tw: p.tw,
        }
    }

    /// Source voxel coordinate (fractional) for output voxel (d, h, w).
    #[inline]
    fn source(&self, d: usize, h: usize, w: usize) -> (f64, f64, f64) {
        let z = (d as f64 - self.center[0]) * self.spacing[0];
        let y = (h as f64 - self.center[1]) * self.spacing[1];
        let x = (w as f64 - self.center[2]) * self.spacing[2] - self.tw;
        let sx = self.rinv[0][0] * x + self.rinv[0][1] * y + self.rinv[0][2] * z;
        let sy = self.rinv[1][0] * x + self.rinv[1][1] * y + self.rinv[1][2] * z;
        let sz = self.rinv[2][0] * x + self.rinv[2][1] * y + self.rinv[2][2] * z;
        (
            sz / self.spacing[0] + self.center[0],
            sy / self.spacing[1] + self.center[1],
            sx / self.spacing[2] + self.center[2],
        )
    }
}

/// Trilinear resampling of a volume under a rigid transform. Out-of-bounds
/// samples are filled with the volume's minimum intensity.
pub fn resample_volume(v: &Volume, p: &RigidParams) -> Volume {
    let map = RigidMap::new(v.shape, v.spacing, p);
    let fill = v.min_intensity();
    let [nd, nh, nw] = v.shape;
    let mut data = vec![0f32; v.data.len()];
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            for w in 0..nw {
                let (sd, sh, sw) = map.source(d, h, w);
                data[base + w] = trilinear(v, sd, sh, sw, fill);
            }
        }
    }
    Volume {
        shape: v.shape,
        spacing: v.spacing,
        data,
    }
}

/// Nearest-neighbor resampling of a mask under a rigid transform; output
/// values stay in `{0,1}` and out-of-bounds samples are 0.
pub fn resample_mask(m: &BinaryMask, p: &RigidParams) -> BinaryMask {
    let map = RigidMap::new(m.shape, m.spacing, p);
    let [nd, nh, nw] = m.shape;
    let mut data = vec![0u8; m.data.len()];
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            for w in 0..nw {
                let (sd, sh, sw) = map.source(d, h, w);
                let (rd, rh, rw) = (sd.round(), sh.round(), sw.round());
                if rd >= 0.0
                    && rh >= 0.0
                    && rw >= 0.0
                    && (rd as usize) < nd
                    && (rh as usize) < nh
                    && (rw as usize) < nw
                {
                    data[base + w] = m.data[(rd as usize * nh + rh as usize) * nw + rw as usize];
                }
            }
        }
    }
    BinaryMask {
        shape: m.shape,
        spacing: m.spacing,
        data,
    }
}

#[inline]
fn trilinear(v: &Volume, sd: f64, sh: f64, sw: f64, fill: f32) -> f32 {
    let [nd, nh, nw] = v.shape;
    let (d0, h0, w0) = (sd.floor(), sh.floor(), sw.floor());
    let (fd, fh, fw) = (sd - d0, sh - h0, sw - w0);
    let (d0, h0, w0) = (d0 as isize, h0 as isize, w0 as isize);

    let mut acc = 0.0f64;
    for (dz, wz) in [(0isize, 1.0 - fd), (1, fd)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0isize, 1.0 - fh), (1, fh)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0isize, 1.0 - fw), (1, fw)] {
                if wx == 0.0 {
                    continue;
                }
                let (d, h, w) = (d0 + dz, h0 + dy, w0 + dx);
                let val = if d >= 0
                    && h >= 0
                    && w >= 0
                    && (d as usize) < nd
                    && (h as usize) < nh
                    && (w as usize) < nw
                {
                    v.data[(d as usize * nh + h as usize) * nw + w as usize]
                } else {
                    fill
                };
                acc += wz * wy * wx * val as f64;
            }
        }
    }
    acc as f32
}

// ---------------------------------------------------------------------------
// Symmetry normalization
// ---------------------------------------------------------------------------

/// Pearson correlation between a volume's samples and its sagittal flip,
/// evaluated on a strided subset of voxels (`step` = 1 for all voxels).
fn flip_correlation(v: &Volume, step: usize) -> f64 {
    let [nd, nh, nw] = v.shape;
    let mut n = 0u64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0f64, 0f64, 0f64, 0f64, 0f64);
    for d in (0..nd).step_by(step) {
        for h in (0..nh).step_by(step) {
            let base = (d * nh + h) * nw;
            for w in (0..nw).step_by(step) {
                let a = v.data[base + w] as f64;
                let b = v.data[base + (nw - 1 - w)] as f64;
                sa += a;
                sb += b;
                saa += a * a;
                sbb += b * b;
                sab += a * b;
                n += 1;
            }
        }
    }
    let n = n as f64;
    let cov = sab - sa * sb / n;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va <= 0.0 || vb <= 0.0 {
        // constant under this sampling; treat as uncorrelated
        return f64::NEG_INFINITY;
    }
    cov / (va * vb).sqrt()
}

fn candidate_better(score: f64, p: &RigidParams, best: f64, bp: &RigidParams) -> bool {
    score > best
        || (score == best && (p.yaw, p.roll, p.tw) < (bp.yaw, bp.roll, bp.tw))
}

/// Rigid alignment that makes a volume bilaterally symmetric about the
/// central sagittal plane by maximizing the Pearson correlation between the
/// transformed volume and its own sagittal flip.
///
/// The search is a 3-level coarse-to-fine grid over (yaw, roll, tw) with
/// final resolution ≤ 0.01 rad and ≤ 0.5·sw; ties are broken toward the
/// lexicographically smallest parameter triple and the result never scores
/// below the identity transform.
pub fn symmetry_normalize(v: &Volume) -> Result<(Volume, RigidParams), VolumeError> {
    let [_, _, nw] = v.shape;
    if nw < 8 {
        return Err(VolumeError::Invalid(format!(
            "W = {nw} too small for symmetry normalization (need ≥ 8)"
        )));
    }
    let mean = v.data.iter().map(|x| *x as f64).sum::<f64>() / v.data.len() as f64;
    let var = v
        .data
        .iter()
        .map(|x| (*x as f64 - mean).powi(2))
        .sum::<f64>()
        / v.data.len() as f64;
    if var == 0.0 {
        return Err(VolumeError::DegenerateVolume(
            "zero intensity variance, flip correlation undefined".into(),
        ));
    }

    let sw = v.spacing[2] as f64;
    let fov_w = nw as f64 * sw;

    let angle_range = 0.35;
    let a_step0 = angle_range / 5.0; // 11 points including 0
    let t_range = fov_w / 4.0;
    let t_step0 = t_range / 6.0; // 13 points including 0

    let score_of = |p: &RigidParams, step: usize| -> f64 {
        flip_correlation(&resample_volume(v, p), step)
    };
    // Decimated correlation is only a safe shortcut when there are enough
    // voxels for the subsample to stay representative.
    let coarse_step: usize = if v.data.len() >= 1 << 18 { 2 } else { 1 };

    // Level 0: full range, decimated correlation for speed.
    let mut grid: Vec<RigidParams> = Vec::new();
    for iy in -5i32..=5 {
        for ir in -5i32..=5 {
            for it in -6i32..=6 {
                grid.push(RigidParams {
                    yaw: iy as f64 * a_step0,
                    roll: ir as f64 * a_step0,
                    tw: it as f64 * t_step0,
                });
            }
        }
    }
    let mut best = search_level(&grid, &|p| score_of(p, coarse_step));

    // Levels 1 and 2: shrink around the incumbent.
    let mut a_step = a_step0;
    let mut t_step = t_step0;
    for level in 1..3 {
        a_step /= 4.0;
        t_step /= 4.0;
        if level == 2 {
            a_step = a_step.min(0.01);
            t_step = t_step.min(0.5 * sw);
        }
        let center = best.1;
        let mut refine: Vec<RigidParams> = Vec::new();
        for iy in -4i32..=4 {
            for ir in -4i32..=4 {
                for it in -4i32..=4 {
                    let p = RigidParams {
                        yaw: (center.yaw + iy as f64 * a_step).clamp(-angle_range, angle_range),
                        roll: (center.roll + ir as f64 * a_step).clamp(-angle_range, angle_range),
                        tw: (center.tw + it as f64 * t_step).clamp(-t_range, t_range),
                    };
                    refine.push(p);
                }
            }
        }
        let step = if level == 2 { 1 } else { coarse_step };
        let cand = search_level(&refine, &|p| score_of(p, step));
        if level == 2 {
            best = cand;
        } else if cand.0 > best.0 || candidate_better(cand.0, &cand.1, best.0, &best.1) {
            best = cand;
        }
    }

    // The result must never score below identity at full resolution.
    let id_score = score_of(&RigidParams::IDENTITY, 1);
    let best_score = score_of(&best.1, 1);
    let params = if candidate_better(best_score, &best.1, id_score, &RigidParams::IDENTITY) {
        best.1
    } else {
        RigidParams::IDENTITY
    };
    Ok((resample_volume(v, &params), params))
}

fn search_level(grid: &[RigidParams], score: &(dyn Fn(&RigidParams) -> f64 + Sync)) -> (f64, RigidParams) {
    use rayon::prelude::*;
    let scored: Vec<(f64, RigidParams)> = grid.par_iter().map(|p| (score(p), *p)).collect();
    let mut best = (f64::NEG_INFINITY, RigidParams::IDENTITY);
    let mut have = false;
    for (s, p) in scored {
        if !have || candidate_better(s, &p, best.0, &best.1) {
            best = (s, p);
            have = true;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// On-disk format: <name>.json header + <name>.raw payload
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: [usize; 3],
    spacing_mm: [f32; 3],
    dtype: String,
    order: String,
    byte_order: String,
}

fn split_paths(path: &Path) -> (PathBuf, PathBuf) {
    let base = if path.extension().map_or(false, |e| e == "json") {
        path.with_extension("")
    } else {
        path.to_path_buf()
    };
    (base.with_extension("json"), base.with_extension("raw"))
}

fn read_header(json_path: &Path) -> Result<Header, VolumeError> {
    let text = fs::read_to_string(json_path)?;
    let h: Header = serde_json::from_str(&text)
        .map_err(|e| VolumeError::MalformedHeader(format!("{}: {e}", json_path.display())))?;
    if h.order != "DHW" {
        return Err(VolumeError::MalformedHeader(format!(
            "order must be \"DHW\", got \"{}\"",
            h.order
        )));
    }
    if h.byte_order != "little" {
        return Err(VolumeError::MalformedHeader(format!(
            "byte_order must be \"little\", got \"{}\"",
            h.byte_order
        )));
    }
    if h.shape.iter().any(|s| *s == 0) {
        return Err(VolumeError::MalformedHeader(format!(
            "zero shape component {:?}",
            h.shape
        )));
    }
    Ok(h)
}

fn read_raw(raw_path: &Path, expected: usize) -> Result<Vec<u8>, VolumeError> {
    let mut buf = Vec::new();
    fs::File::open(raw_path)?.read_to_end(&mut buf)?;
    if buf.len() != expected {
        return Err(VolumeError::ShapeMismatch(format!(
            "{}: raw payload {} bytes, header implies {}",
            raw_path.display(),
            buf.len(),
            expected
        )));
    }
    Ok(buf)
}

pub fn read_volume(path: &Path) -> Result<Volume, VolumeError> {
    let (json_path, raw_path) = split_paths(path);
    let h = read_header(&json_path)?;
    match h.dtype.as_str() {
        "f32" => {}
        "u8" => {
            return Err(VolumeError::UnsupportedDtype(
                "u8 (mask dtype; expected an f32 volume)".into(),
            ))
        }
        other => return Err(VolumeError::UnsupportedDtype(other.into())),
    }
    let n: usize = h.shape.iter().product();
    let raw = read_raw(&raw_path, n * 4)?;
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(h.shape, h.spacing_mm, data)
}

pub fn read_mask(path: &Path) -> Result<BinaryMask, VolumeError> {
    let (json_path, raw_path) = split_paths(path);
    let h = read_header(&json_path)?;
    match h.dtype.as_str() {
        "u8" => {}
        "f32" => {
            return Err(VolumeError::UnsupportedDtype(
                "f32 (volume dtype; expected a u8 mask)".into(),
            ))
        }
        other => return Err(VolumeError::UnsupportedDtype(other.into())),
    }
    let n: usize = h.shape.iter().product();
    let raw = read_raw(&raw_path, n)?;
    BinaryMask::new(h.shape, h.spacing_mm, raw)
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<(), VolumeError> {
    let (json_path, raw_path) = split_paths(path);
    let h = Header {
        shape: v.shape,
        spacing_mm: v.spacing,
        dtype: "f32".into(),
        order: "DHW".into(),
        byte_order: "little".into(),
    };
    fs::write(&json_path, serde_json::to_string_pretty(&h).unwrap())?;
    let mut raw = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        raw.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, raw)?;
    Ok(())
}

pub fn write_mask(path: &Path, m: &BinaryMask) -> Result<(), VolumeError> {
    let (json_path, raw_path) = split_paths(path);
    let h = Header {
        shape: m.shape,
        spacing_mm: m.spacing,
        dtype: "u8".into(),
        order: "DHW".into(),
        byte_order: "little".into(),
    };
    fs::write(&json_path, serde_json::to_string_pretty(&h).unwrap())?;
    fs::write(&raw_path, &m.data)?;
    Ok(())
}
