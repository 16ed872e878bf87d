//! Segmentation evaluation metrics: Dice similarity coefficient, the
//! 95th-percentile Hausdorff distance, and average surface distance, plus
//! per-directory CSV reports.
//!
//! Pinned definitions (published toolkits disagree on these details):
//! surface voxels are mask voxels with at least one 6-neighbor outside the
//! mask, with the volume border counting as outside; distances are
//! spacing-scaled Euclidean distances between surface-voxel centers; the
//! percentile is nearest-rank on the sorted directed distance list; HD95 is
//! the max of the two directed 95th percentiles; ASD is the mean of all
//! directed distances pooled from both directions.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::asymmetry::asym_stats;
use crate::volume::{read_mask, BinaryMask, Shape3, VolumeError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{side} mask is empty, surface distances undefined")]
    EmptyMask { side: &'static str },
    #[error("missing case: {0}")]
    MissingCase(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch(format!(
            "pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient in percent; 100 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        p += *a as usize;
        g += *b as usize;
        inter += (*a & *b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Surface voxels: mask voxels with ≥ 1 face-neighbor outside the mask
/// (6-connectivity, volume border counts as outside).
pub fn surface_voxels(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [nd, nh, nw] = m.shape();
    let data = m.data();
    let mut out = Vec::new();
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            for w in 0..nw {
                if data[base + w] == 0 {
                    continue;
                }
                let boundary = d == 0
                    || d == nd - 1
                    || h == 0
                    || h == nh - 1
                    || w == 0
                    || w == nw - 1
                    || data[((d - 1) * nh + h) * nw + w] == 0
                    || data[((d + 1) * nh + h) * nw + w] == 0
                    || data[(d * nh + h - 1) * nw + w] == 0
                    || data[(d * nh + h + 1) * nw + w] == 0
                    || data[base + w - 1] == 0
                    || data[base + w + 1] == 0;
                if boundary {
                    out.push([d, h, w]);
                }
            }
        }
    }
    out
}

/// 1D squared-distance transform (lower envelope of parabolas) with uniform
/// sample spacing `step`; `INFINITY` marks absent sources.
fn dt1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        let pq = q as f64 * step;
        loop {
            match v.last() {
                None => break,
                Some(&p) => {
                    let pp = p as f64 * step;
                    let s = ((f[q] + pq * pq) - (f[p] + pp * pp)) / (2.0 * (pq - pp));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        }
    }
    if v.is_empty() {
        out[..n].fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        let pq = q as f64 * step;
        while k + 1 < v.len() && z[k + 1] < pq {
            k += 1;
        }
        let pp = v[k] as f64 * step;
        out[q] = (pq - pp) * (pq - pp) + f[v[k]];
    }
}

/// Exact anisotropic squared Euclidean distance transform to the seed set.
fn edt_sq(seeds: &[bool], shape: Shape3, spacing: [f64; 3]) -> Vec<f64> {
    let [nd, nh, nw] = shape;
    let mut dist: Vec<f64> = seeds
        .iter()
        .map(|s| if *s { 0.0 } else { f64::INFINITY })
        .collect();

    let max_len = nd.max(nh).max(nw);
    let mut f = vec![0f64; max_len];
    let mut out = vec![0f64; max_len];
    let mut v: Vec<usize> = Vec::with_capacity(max_len);
    let mut z: Vec<f64> = Vec::with_capacity(max_len + 1);

    // pass along W
    for d in 0..nd {
        for h in 0..nh {
            let base = (d * nh + h) * nw;
            f[..nw].copy_from_slice(&dist[base..base + nw]);
            dt1d(&f[..nw], spacing[2], &mut out[..nw], &mut v, &mut z);
            dist[base..base + nw].copy_from_slice(&out[..nw]);
        }
    }
    // pass along H
    for d in 0..nd {
        for w in 0..nw {
            for h in 0..nh {
                f[h] = dist[(d * nh + h) * nw + w];
            }
            dt1d(&f[..nh], spacing[1], &mut out[..nh], &mut v, &mut z);
            for h in 0..nh {
                dist[(d * nh + h) * nw + w] = out[h];
            }
        }
    }
    // pass along D
    for h in 0..nh {
        for w in 0..nw {
            for d in 0..nd {
                f[d] = dist[(d * nh + h) * nw + w];
            }
            dt1d(&f[..nd], spacing[0], &mut out[..nd], &mut v, &mut z);
            for d in 0..nd {
                dist[(d * nh + h) * nw + w] = out[d];
            }
        }
    }
    dist
}

fn directed_distances(from: &[[usize; 3]], to_dist: &[f64], shape: Shape3) -> Vec<f64> {
    let [_, nh, nw] = shape;
    from.iter()
        .map(|&[d, h, w]| to_dist[(d * nh + h) * nw + w].sqrt())
        .collect()
}

/// Nearest-rank percentile of an unsorted distance list (p in (0, 100]).
fn nearest_rank(mut xs: Vec<f64>, p: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    let k = ((p / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    xs[k - 1]
}

/// 95th-percentile Hausdorff distance and average surface distance in
/// millimeters. Errors with [`MetricsError::EmptyMask`] if either mask has
/// no foreground.
pub fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<(f64, f64), MetricsError> {
    check_shapes(pred, gt)?;
    if pred.count_ones() == 0 {
        return Err(MetricsError::EmptyMask { side: "pred" });
    }
    if gt.count_ones() == 0 {
        return Err(MetricsError::EmptyMask { side: "gt" });
    }
    let shape = pred.shape();
    let spacing = [
        pred.spacing()[0] as f64,
        pred.spacing()[1] as f64,
        pred.spacing()[2] as f64,
    ];
    let ps = surface_voxels(pred);
    let gs = surface_voxels(gt);

    let mut seeds = vec![false; pred.data().len()];
    for &[d, h, w] in &gs {
        seeds[(d * shape[1] + h) * shape[2] + w] = true;
    }
    let to_gt = edt_sq(&seeds, shape, spacing);
    seeds.fill(false);
    for &[d, h, w] in &ps {
        seeds[(d * shape[1] + h) * shape[2] + w] = true;
    }
    let to_pred = edt_sq(&seeds, shape, spacing);

    let d_pg = directed_distances(&ps, &to_gt, shape);
    let d_gp = directed_distances(&gs, &to_pred, shape);

    let hd95 = nearest_rank(d_pg.clone(), 95.0).max(nearest_rank(d_gp.clone(), 95.0));
    let pooled_sum: f64 = d_pg.iter().chain(d_gp.iter()).sum();
    let asd = pooled_sum / (d_pg.len() + d_gp.len()) as f64;
    Ok((hd95, asd))
}

// ---------------------------------------------------------------------------
// Directory evaluation report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dsc: f64,
    /// `None` when either mask is empty (reported as `NA`, never a sentinel).
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub asym_voxels: usize,
    pub lesion_voxels: usize,
    pub asym_ml: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Report {
    pub cases: Vec<CaseMetrics>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl Report {
    pub fn dsc_values(&self) -> Vec<f64> {
        self.cases.iter().map(|c| c.dsc).collect()
    }

    pub fn dsc_mean(&self) -> f64 {
        mean_sd(&self.dsc_values()).0
    }

    /// CSV with fixed column order
    /// `case_id,dsc,hd95,asd,asym_voxels,lesion_voxels,asym_ml` and a final
    /// `summary` row holding `mean ± population-sd` per numeric column
    /// (NA-valued distances are excluded from their column summary).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case_id,dsc,hd95,asd,asym_voxels,lesion_voxels,asym_ml\n");
        let fmt_opt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "NA".to_string(),
        };
        for c in &self.cases {
            s.push_str(&format!(
                "{},{:.4},{},{},{},{},{:.4}\n",
                c.case_id,
                c.dsc,
                fmt_opt(c.hd95),
                fmt_opt(c.asd),
                c.asym_voxels,
                c.lesion_voxels,
                c.asym_ml
            ));
        }
        let dscs: Vec<f64> = self.cases.iter().map(|c| c.dsc).collect();
        let hd95s: Vec<f64> = self.cases.iter().filter_map(|c| c.hd95).collect();
        let asds: Vec<f64> = self.cases.iter().filter_map(|c| c.asd).collect();
        let avox: Vec<f64> = self.cases.iter().map(|c| c.asym_voxels as f64).collect();
        let lvox: Vec<f64> = self.cases.iter().map(|c| c.lesion_voxels as f64).collect();
        let aml: Vec<f64> = self.cases.iter().map(|c| c.asym_ml).collect();
        let cell = |xs: &[f64]| {
            if xs.is_empty() {
                "NA".to_string()
            } else {
                let (m, sd) = mean_sd(xs);
                format!("{m:.2} ± {sd:.2}")
            }
        };
        s.push_str(&format!(
            "summary,{},{},{},{},{},{}\n",
            cell(&dscs),
            cell(&hd95s),
            cell(&asds),
            cell(&avox),
            cell(&lvox),
            cell(&aml)
        ));
        s
    }
}

fn mask_cases(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>, MetricsError> {
    let mut map = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(VolumeError::from)? {
        let entry = entry.map_err(VolumeError::from)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name
            .strip_prefix("case_")
            .and_then(|r| r.strip_suffix("_mask.json"))
        {
            map.insert(stem.to_string(), entry.path());
        }
    }
    Ok(map)
}

/// Evaluate every `case_<id>_mask` pair shared by two directories; errors
/// with [`MetricsError::MissingCase`] when the directories disagree on the
/// case set. Cases are ordered by id.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<Report, MetricsError> {
    let preds = mask_cases(pred_dir)?;
    let gts = mask_cases(gt_dir)?;
    for id in preds.keys() {
        if !gts.contains_key(id) {
            return Err(MetricsError::MissingCase(format!(
                "case {id} present in pred dir but absent from gt dir"
            )));
        }
    }
    let mut cases = Vec::with_capacity(gts.len());
    for (id, gt_path) in &gts {
        let pred_path = preds
            .get(id)
            .ok_or_else(|| MetricsError::MissingCase(format!("no prediction for case {id}")))?;
        let pred = read_mask(pred_path)?;
        let gt = read_mask(gt_path)?;
        let dice = dsc(&pred, &gt)?;
        let (hd95, asd) = match surface_distances(&pred, &gt) {
            Ok((h, a)) => (Some(h), Some(a)),
            Err(MetricsError::EmptyMask { .. }) => (None, None),
            Err(e) => return Err(e),
        };
        let st = asym_stats(&gt);
        cases.push(CaseMetrics {
            case_id: id.clone(),
            dsc: dice,
            hd95,
            asd,
            asym_voxels: st.asym_voxels,
            lesion_voxels: st.total_voxels,
            asym_ml: st.asym_volume_ml,
        });
    }
    Ok(Report { cases })
}
