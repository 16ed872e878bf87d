//! Seeded generation of bilaterally symmetric head phantoms with one
//! low-contrast lesion and its ground-truth mask.
//!
//! The background (head ellipsoid plus mirrored structure pairs) is exactly
//! mirror-symmetric about the mid-W plane by construction; the lesion is a
//! single ellipsoid whose offset from the midline is solved so that the
//! asymmetric part of the lesion occupies a requested fraction of it.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{write_mask, write_volume, BinaryMask, Shape3, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("infeasible spec{}: {reason} ({attempts} attempts)", case.map(|c| format!(" (case {c})")).unwrap_or_default())]
    InfeasibleSpec {
        case: Option<usize>,
        attempts: u32,
        reason: String,
    },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Intensity model (nominal dynamic range 1.0): air 0, head tissue 0.4,
/// structures in [0.55, 0.9], lesion = head tissue + contrast.
const HEAD_INTENSITY: f64 = 0.4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub shape: Shape3,
    pub spacing: [f32; 3],
    /// Additive Gaussian noise sigma, as a fraction of the dynamic range.
    pub noise_sigma: f64,
    /// Lesion intensity offset over the local background.
    pub lesion_contrast: f64,
    pub n_symmetric_structures: usize,
    /// Requested fraction of the lesion with no mirror counterpart, in [0,1].
    pub lesion_asym_fraction: f64,
    pub rng_seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: [48, 96, 96],
            spacing: [1.0, 1.0, 1.0],
            noise_sigma: 0.02,
            lesion_contrast: 0.04,
            n_symmetric_structures: 3,
            lesion_asym_fraction: 0.75,
            rng_seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.shape.iter().any(|s| *s < 16) {
            return Err(PhantomError::InvalidSpec(format!(
                "shape components must be ≥ 16, got {:?}",
                self.shape
            )));
        }
        if self.lesion_contrast == 0.0 {
            return Err(PhantomError::InvalidSpec("lesion_contrast must be nonzero".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(PhantomError::InvalidSpec("noise_sigma must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_asym_fraction) {
            return Err(PhantomError::InvalidSpec(format!(
                "lesion_asym_fraction must be in [0,1], got {}",
                self.lesion_asym_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3], // (d, h, w) voxel coordinates
    semi: [f64; 3],
}

impl Ellipsoid {
    #[inline]
    fn contains(&self, d: f64, h: f64, w: f64) -> bool {
        let a = (d - self.center[0]) / self.semi[0];
        let b = (h - self.center[1]) / self.semi[1];
        let c = (w - self.center[2]) / self.semi[2];
        a * a + b * b + c * c <= 1.0
    }

    fn mirrored(&self, w_max: f64) -> Ellipsoid {
        Ellipsoid {
            center: [self.center[0], self.center[1], w_max - self.center[2]],
            semi: self.semi,
        }
    }

    /// Conservative inside-ellipsoid test via a margin on the outer hull.
    fn inside_of(&self, outer: &Ellipsoid, margin: f64) -> bool {
        for dir in [
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
        ] {
            let p = [
                self.center[0] + dir[0] * self.semi[0],
                self.center[1] + dir[1] * self.semi[1],
                self.center[2] + dir[2] * self.semi[2],
            ];
            let a = (p[0] - outer.center[0]) / (outer.semi[0] * margin);
            let b = (p[1] - outer.center[1]) / (outer.semi[1] * margin);
            let c = (p[2] - outer.center[2]) / (outer.semi[2] * margin);
            if a * a + b * b + c * c > 1.0 {
                return false;
            }
        }
        true
    }

    fn overlaps(&self, other: &Ellipsoid) -> bool {
        // conservative bounding-ellipsoid distance test
        let mut s = 0.0;
        for ax in 0..3 {
            let gap = (self.center[ax] - other.center[ax]).abs();
            let reach = self.semi[ax] + other.semi[ax];
            s += (gap / reach).powi(2);
        }
        s <= 1.0
    }
}

struct Scene {
    head: Ellipsoid,
    structures: Vec<(Ellipsoid, f64)>, // left member of each mirrored pair
    lesion: Ellipsoid,
}

/// Solve the lesion offset (in units of its W semiaxis) that yields a target
/// asymmetric fraction, using the analytic overlap of an ellipsoid with its
/// mirror image: overlap_fraction(u) = (1-u)²(u+2)/2 for u = offset/semiaxis.
fn offset_for_fraction(phi: f64) -> f64 {
    if phi >= 1.0 {
        return 1.2; // fully separated from its mirror, with margin
    }
    if phi <= 0.0 {
        return 0.0;
    }
    let target_overlap = 1.0 - phi;
    let f = |u: f64| (1.0 - u).powi(2) * (u + 2.0) / 2.0;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > target_overlap {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Discrete asymmetric fraction of a lesion ellipsoid: the fraction of its
/// voxels whose mirror voxel is not inside the ellipsoid.
fn discrete_asym_fraction(lesion: &Ellipsoid, shape: Shape3) -> (f64, usize) {
    let w_max = shape[2] as f64 - 1.0;
    let (mut total, mut asym) = (0usize, 0usize);
    let lo = |c: f64, s: f64| (c - s).floor().max(0.0) as usize;
    let hi = |c: f64, s: f64, n: usize| ((c + s).ceil() as usize).min(n - 1);
    for d in lo(lesion.center[0], lesion.semi[0])..=hi(lesion.center[0], lesion.semi[0], shape[0]) {
        for h in
            lo(lesion.center[1], lesion.semi[1])..=hi(lesion.center[1], lesion.semi[1], shape[1])
        {
            for w in lo(lesion.center[2], lesion.semi[2])
                ..=hi(lesion.center[2], lesion.semi[2], shape[2])
            {
                if lesion.contains(d as f64, h as f64, w as f64) {
                    total += 1;
                    if !lesion.contains(d as f64, h as f64, w_max - w as f64) {
                        asym += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        (0.0, 0)
    } else {
        (asym as f64 / total as f64, total)
    }
}

fn place_scene(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Scene, PhantomError> {
    let [nd, nh, nw] = spec.shape;
    let center = [
        (nd as f64 - 1.0) / 2.0,
        (nh as f64 - 1.0) / 2.0,
        (nw as f64 - 1.0) / 2.0,
    ];
    let w_max = nw as f64 - 1.0;
    let head = Ellipsoid {
        center,
        semi: [
            nd as f64 * rng.gen_range(0.38..0.42),
            nh as f64 * rng.gen_range(0.38..0.42),
            nw as f64 * rng.gen_range(0.36..0.40),
        ],
    };

    let mut structures = Vec::new();
    for _ in 0..spec.n_symmetric_structures {
        for _attempt in 0..50 {
            let semi = [
                nd as f64 * rng.gen_range(0.05..0.09),
                nh as f64 * rng.gen_range(0.05..0.09),
                nw as f64 * rng.gen_range(0.05..0.09),
            ];
            let e = Ellipsoid {
                center: [
                    center[0] + nd as f64 * rng.gen_range(-0.22..0.22),
                    center[1] + nh as f64 * rng.gen_range(-0.22..0.22),
                    center[2] + nw as f64 * rng.gen_range(-0.28..-0.08),
                ],
                semi,
            };
            let intensity = rng.gen_range(0.55..0.9);
            if e.inside_of(&head, 0.92) {
                structures.push((e, intensity));
                break;
            }
        }
    }

    // Lesion: solve midline offset for the requested asymmetric fraction,
    // then adjust against the discrete voxel count.
    let phi = spec.lesion_asym_fraction;
    let mut attempts = 0u32;
    'placement: while attempts < 100 {
        attempts += 1;
        let semi = [
            nd as f64 * rng.gen_range(0.07..0.11),
            nh as f64 * rng.gen_range(0.07..0.11),
            nw as f64 * rng.gen_range(0.07..0.11),
        ];
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let dc = center[0] + nd as f64 * rng.gen_range(-0.12..0.12);
        let hc = center[1] + nh as f64 * rng.gen_range(-0.12..0.12);
        let mut u = offset_for_fraction(phi);
        for _refine in 0..8 {
            let lesion = Ellipsoid {
                center: [dc, hc, center[2] + side * u * semi[2]],
                semi,
            };
            let (achieved, total) = discrete_asym_fraction(&lesion, spec.shape);
            if total < 32 {
                continue 'placement;
            }
            if (achieved - phi).abs() <= 0.05 || (phi >= 1.0 && achieved >= 1.0) {
                // containment and structure-disjointness checks
                let mirror = lesion.mirrored(w_max);
                if !lesion.inside_of(&head, 0.9) {
                    continue 'placement;
                }
                if structures
                    .iter()
                    .any(|(s, _)| s.overlaps(&lesion) || s.mirrored(w_max).overlaps(&lesion)
                        || s.overlaps(&mirror) || s.mirrored(w_max).overlaps(&mirror))
                {
                    continue 'placement;
                }
                return Ok(Scene {
                    head,
                    structures,
                    lesion,
                });
            }
            // secant-ish nudge on the offset
            u = (u + 0.15 * (phi - achieved).signum() * 0.5f64.max((phi - achieved).abs())).max(0.0);
        }
    }
    Err(PhantomError::InfeasibleSpec {
        case: None,
        attempts: 100,
        reason: format!("could not realize asymmetric fraction {phi} within tolerance"),
    })
}

/// Rasterize the exactly mirror-symmetric background (head + structure
/// pairs), without lesion or noise.
fn rasterize_background(spec: &PhantomSpec, scene: &Scene) -> Vec<f32> {
    let [nd, nh, nw] = spec.shape;
    let w_max = nw as f64 - 1.0;
    let mut data = vec![0f32; nd * nh * nw];
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            for w in 0..nw {
                let (df, hf, wf) = (d as f64, h as f64, w as f64);
                let mut v = 0.0;
                if scene.head.contains(df, hf, wf) {
                    v = HEAD_INTENSITY;
                    for (e, intensity) in &scene.structures {
                        // testing both pair members keeps the result bit-symmetric
                        if e.contains(df, hf, wf) || e.mirrored(w_max).contains(df, hf, wf) {
                            v = *intensity;
                        }
                    }
                }
                data[base + w] = v as f32;
            }
        }
    }
    data
}

/// Generate one phantom volume and its lesion mask. Pure function of the
/// spec: the same spec yields bit-identical output.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, BinaryMask), PhantomError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let scene = place_scene(spec, &mut rng)?;
    let mut data = rasterize_background(spec, &scene);

    let [nd, nh, nw] = spec.shape;
    let mut mask = vec![0u8; data.len()];
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            for w in 0..nw {
                if scene.lesion.contains(d as f64, h as f64, w as f64) {
                    mask[base + w] = 1;
                    data[base + w] += spec.lesion_contrast as f32;
                }
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("sigma > 0");
        for v in data.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }

    let volume = Volume::new(spec.shape, spec.spacing, data)?;
    let mask = BinaryMask::new(spec.shape, spec.spacing, mask)?;
    Ok((volume, mask))
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub base: PhantomSpec,
    pub count: usize,
    pub seed: u64,
    /// Per-case asymmetric fraction is drawn uniformly from this range.
    pub asym_fraction_range: (f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub spec: PhantomSpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub cases: Vec<CaseEntry>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generate `count` phantoms with per-case seeds derived from `seed` via a
/// splittable counter, writing `case_<id>.json/.raw`,
/// `case_<id>_mask.json/.raw` and `manifest.json` into `dir`.
pub fn generate_dataset(ds: &DatasetSpec, dir: &Path) -> Result<Manifest, PhantomError> {
    if ds.count == 0 {
        return Err(PhantomError::InvalidSpec("count must be ≥ 1".into()));
    }
    let (lo, hi) = ds.asym_fraction_range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(PhantomError::InvalidSpec(format!(
            "asym fraction range [{lo}, {hi}] invalid"
        )));
    }
    fs::create_dir_all(dir).map_err(VolumeError::from)?;

    let mut cases = Vec::with_capacity(ds.count);
    for i in 0..ds.count {
        let case_seed = splitmix64(ds.seed ^ (i as u64).wrapping_mul(0xA24BAED4963EE407));
        let mut jitter = ChaCha8Rng::seed_from_u64(case_seed);
        let mut spec = ds.base.clone();
        spec.rng_seed = splitmix64(case_seed);
        spec.lesion_asym_fraction = if lo == hi { lo } else { jitter.gen_range(lo..hi) };

        let id = format!("{i:03}");
        let (volume, mask) = generate(&spec).map_err(|e| match e {
            PhantomError::InfeasibleSpec {
                attempts, reason, ..
            } => PhantomError::InfeasibleSpec {
                case: Some(i),
                attempts,
                reason,
            },
            other => other,
        })?;
        write_volume(&dir.join(format!("case_{id}.json")), &volume)?;
        write_mask(&dir.join(format!("case_{id}_mask.json")), &mask)?;
        cases.push(CaseEntry { id, spec });
    }

    let manifest = Manifest {
        count: ds.count,
        seed: ds.seed,
        cases,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )
    .map_err(VolumeError::from)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, PhantomError> {
    let text = fs::read_to_string(dir.join("manifest.json")).map_err(VolumeError::from)?;
    serde_json::from_str(&text)
        .map_err(|e| PhantomError::InvalidSpec(format!("manifest.json: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asymmetry::asym_stats;

    fn quick_spec(asym: f64, seed: u64) -> PhantomSpec {
        PhantomSpec {
            shape: [24, 48, 48],
            lesion_asym_fraction: asym,
            rng_seed: seed,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn background_is_exactly_symmetric() {
        let spec = quick_spec(0.7, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let scene = place_scene(&spec, &mut rng).unwrap();
        let bg = rasterize_background(&spec, &scene);
        let v = Volume::new(spec.shape, spec.spacing, bg).unwrap();
        assert_eq!(v.flip_sagittal(), v);
    }

    #[test]
    fn full_asym_fraction_means_m_equals_s() {
        let spec = quick_spec(1.0, 7);
        let (_, mask) = generate(&spec).unwrap();
        let st = asym_stats(&mask);
        assert!(st.total_voxels > 0);
        assert_eq!(st.asym_voxels, st.total_voxels);
    }

    #[test]
    fn zero_asym_fraction_means_empty_m() {
        let spec = quick_spec(0.0, 9);
        let (_, mask) = generate(&spec).unwrap();
        let st = asym_stats(&mask);
        assert!(st.total_voxels > 0);
        assert_eq!(st.asym_voxels, 0);
    }

    #[test]
    fn achieved_fraction_tracks_request() {
        for (phi, seed) in [(0.3, 1u64), (0.5, 2), (0.75, 3), (0.9, 4)] {
            let spec = quick_spec(phi, seed);
            let (_, mask) = generate(&spec).unwrap();
            let st = asym_stats(&mask);
            let achieved = st.asym_voxels as f64 / st.total_voxels as f64;
            assert!(
                (achieved - phi).abs() <= 0.1,
                "requested {phi}, achieved {achieved}"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = quick_spec(0.6, 42);
        let (v1, m1) = generate(&spec).unwrap();
        let (v2, m2) = generate(&spec).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn lesion_mask_is_single_connected_component() {
        let spec = quick_spec(0.8, 13);
        let (_, mask) = generate(&spec).unwrap();
        let [nd, nh, nw] = mask.shape();
        let data = mask.data();
        let start = data.iter().position(|v| *v == 1).expect("nonempty");
        let mut seen = vec![false; data.len()];
        let mut stack = vec![start];
        seen[start] = true;
        let mut visited = 0usize;
        while let Some(i) = stack.pop() {
            visited += 1;
            let (d, rem) = (i / (nh * nw), i % (nh * nw));
            let (h, w) = (rem / nw, rem % nw);
            let mut push = |cond: bool, j: usize| {
                if cond && data[j] == 1 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            push(d > 0, i.wrapping_sub(nh * nw));
            push(d + 1 < nd, i + nh * nw);
            push(h > 0, i.wrapping_sub(nw));
            push(h + 1 < nh, i + nw);
            push(w > 0, i.wrapping_sub(1));
            push(w + 1 < nw, i + 1);
        }
        assert_eq!(visited, mask.count_ones(), "lesion not 6-connected");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = quick_spec(0.5, 0);
        spec.shape = [8, 48, 48];
        assert!(matches!(generate(&spec), Err(PhantomError::InvalidSpec(_))));
        let mut spec = quick_spec(0.5, 0);
        spec.lesion_contrast = 0.0;
        assert!(matches!(generate(&spec), Err(PhantomError::InvalidSpec(_))));
    }

    #[test]
    fn dataset_roundtrip_and_determinism() {
        let ds = DatasetSpec {
            base: quick_spec(0.7, 0),
            count: 3,
            seed: 99,
            asym_fraction_range: (0.5, 1.0),
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_dataset(&ds, d1.path()).unwrap();
        let m2 = generate_dataset(&ds, d2.path()).unwrap();
        assert_eq!(m1.cases.len(), 3);
        for case in &m1.cases {
            for suffix in ["", "_mask"] {
                let f = format!("case_{}{suffix}.raw", case.id);
                let a = fs::read(d1.path().join(&f)).unwrap();
                let b = fs::read(d2.path().join(&f)).unwrap();
                assert_eq!(a, b, "{f} differs between equal-seed runs");
            }
        }
        assert_eq!(
            fs::read(d1.path().join("manifest.json")).unwrap(),
            fs::read(d2.path().join("manifest.json")).unwrap()
        );
        let back = read_manifest(d1.path()).unwrap();
        assert_eq!(back.cases.len(), m2.cases.len());
    }

    #[test]
    fn zero_count_dataset_is_an_error() {
        let ds = DatasetSpec {
            base: quick_spec(0.7, 0),
            count: 0,
            seed: 1,
            asym_fraction_range: (0.5, 1.0),
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            generate_dataset(&ds, dir.path()),
            Err(PhantomError::InvalidSpec(_))
        ));
    }
}
