//! Segmentation metrics: Dice overlap and Hausdorff boundary distance, with
//! per-case 3D assembly and report aggregation.
//!
//! Hausdorff distances run on exact Euclidean distance transforms
//! (Felzenszwalb's separable parabola method, with anisotropic spacing), so
//! the fast path reproduces the brute-force all-pairs answer exactly up to
//! the final square root.

use std::collections::BTreeMap;

use ndarray::{Array2, Array3, ArrayViewD, IxDyn};
use thiserror::Error;

use crate::config::{OrganClass, NUM_CLASSES};
use crate::error::{DataError, ShapeError};
use crate::losses::argmax_classes;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty organ mask (prediction empty: {pred_empty}, truth empty: {truth_empty})")]
    EmptyMask { pred_empty: bool, truth_empty: bool },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

/// Dice overlap 2|P∩T| / (|P|+|T|) on one organ's binary masks. Both masks
/// empty is defined as 1; exactly one empty as 0.
pub fn dsc_metric(
    pred: &ArrayViewD<u8>,
    truth: &ArrayViewD<u8>,
    organ: u8,
) -> Result<f64, ShapeError> {
    if pred.shape() != truth.shape() {
        return Err(ShapeError(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut t_count = 0usize;
    for (p, t) in pred.iter().zip(truth.iter()) {
        let pm = *p == organ;
        let tm = *t == organ;
        p_count += pm as usize;
        t_count += tm as usize;
        inter += (pm && tm) as usize;
    }
    if p_count + t_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p_count + t_count) as f64)
}

/// Coordinates of mask voxels with at least one face neighbor outside the
/// mask (volume borders count as outside).
pub fn boundary_points(mask: &ArrayViewD<bool>) -> Vec<Vec<usize>> {
    let shape = mask.shape().to_vec();
    let ndim = shape.len();
    let mut points = Vec::new();
    for (idx, &inside) in mask.indexed_iter() {
        if !inside {
            continue;
        }
        let coord: Vec<usize> = (0..ndim).map(|d| idx[d]).collect();
        let mut on_boundary = false;
        'outer: for d in 0..ndim {
            for dir in [-1isize, 1] {
                let nd = coord[d] as isize + dir;
                if nd < 0 || nd >= shape[d] as isize {
                    on_boundary = true;
                    break 'outer;
                }
                let mut nidx = coord.clone();
                nidx[d] = nd as usize;
                if !mask[IxDyn(&nidx)] {
                    on_boundary = true;
                    break 'outer;
                }
            }
        }
        if on_boundary {
            points.push(coord);
        }
    }
    points
}

const DT_INF: f64 = 1e30;

/// 1D squared distance transform with sample spacing `s` (Felzenszwalb).
fn dt1d(f: &mut Vec<f64>, s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, d: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    v.resize(n, 0);
    z.clear();
    z.resize(n + 1, 0.0);
    d.clear();
    d.resize(n, 0.0);
    let sq = s * s;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let inter = (f[q] + sq * (q * q) as f64 - f[p] - sq * (p * p) as f64)
                / (2.0 * sq * (q - p) as f64);
            if inter <= z[k] {
                if k == 0 {
                    // Replace the lone parabola.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = inter;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = (q as isize - v[k] as isize) as f64;
        d[q] = sq * dq * dq + f[v[k]];
    }
    f.copy_from_slice(d);
}

/// Exact anisotropic squared Euclidean distance transform to the given
/// seed points.
fn squared_edt(shape: &[usize], spacing: &[f64], seeds: &[Vec<usize>]) -> ndarray::ArrayD<f64> {
    let mut dist = ndarray::ArrayD::<f64>::from_elem(IxDyn(shape), DT_INF);
    for p in seeds {
        dist[IxDyn(p)] = 0.0;
    }
    let mut f = Vec::new();
    let mut v = Vec::new();
    let mut z = Vec::new();
    let mut d = Vec::new();
    for axis in 0..shape.len() {
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            f.clear();
            f.extend(lane.iter().copied());
            dt1d(&mut f, spacing[axis], &mut v, &mut z, &mut d);
            for (o, val) in lane.iter_mut().zip(f.iter()) {
                *o = *val;
            }
        }
    }
    dist
}

/// Symmetric Hausdorff distance and its 95th-percentile variant between
/// one organ's boundary point sets, in physical units.
#[derive(Debug, Clone, Copy)]
pub struct Hausdorff {
    pub hd: f64,
    pub hd95: f64,
}

pub fn hausdorff_distance(
    pred: &ArrayViewD<u8>,
    truth: &ArrayViewD<u8>,
    organ: u8,
    spacing: &[f64],
) -> Result<Hausdorff, MetricError> {
    if pred.shape() != truth.shape() {
        return Err(ShapeError(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        ))
        .into());
    }
    if spacing.len() != pred.ndim() || spacing.iter().any(|s| !(*s > 0.0)) {
        return Err(ShapeError(format!(
            "spacing must be {} positive entries",
            pred.ndim()
        ))
        .into());
    }
    let pred_mask = pred.mapv(|v| v == organ);
    let truth_mask = truth.mapv(|v| v == organ);
    let pred_pts = boundary_points(&pred_mask.view());
    let truth_pts = boundary_points(&truth_mask.view());
    if pred_pts.is_empty() || truth_pts.is_empty() {
        return Err(MetricError::EmptyMask {
            pred_empty: pred_pts.is_empty(),
            truth_empty: truth_pts.is_empty(),
        });
    }

    let shape = pred.shape();
    let edt_truth = squared_edt(shape, spacing, &truth_pts);
    let edt_pred = squared_edt(shape, spacing, &pred_pts);

    let mut distances = Vec::with_capacity(pred_pts.len() + truth_pts.len());
    let mut hd = 0.0f64;
    for p in &pred_pts {
        let d = edt_truth[IxDyn(p)].sqrt();
        hd = hd.max(d);
        distances.push(d);
    }
    for t in &truth_pts {
        let d = edt_pred[IxDyn(t)].sqrt();
        hd = hd.max(d);
        distances.push(d);
    }
    distances.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(Hausdorff {
        hd,
        hd95: percentile_sorted(&distances, 95.0),
    })
}

/// Linear-interpolation percentile of an ascending-sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * q / 100.0;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Maximum voxel-center separation, used as the defined Hausdorff value when
/// exactly one mask is empty.
pub fn image_diagonal(shape: &[usize], spacing: &[f64]) -> f64 {
    shape
        .iter()
        .zip(spacing)
        .map(|(&n, &s)| {
            let extent = (n.saturating_sub(1)) as f64 * s;
            extent * extent
        })
        .sum::<f64>()
        .sqrt()
}

/// Per-organ metrics for one case.
#[derive(Debug, Clone, Copy)]
pub struct OrganResult {
    pub dsc: f64,
    pub hd: f64,
    pub hd95: f64,
    /// Set when the empty-mask policy decided the entry (exactly one of
    /// prediction/truth had no voxels for this organ).
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct CaseReport {
    pub case_id: String,
    pub organs: BTreeMap<u8, OrganResult>,
}

/// Evaluate all eight organs of one assembled case volume pair.
pub fn evaluate_volumes(
    case_id: &str,
    pred: &Array3<u8>,
    truth: &Array3<u8>,
    spacing: [f64; 3],
) -> Result<CaseReport, ShapeError> {
    if pred.dim() != truth.dim() {
        return Err(ShapeError(format!(
            "prediction {:?} vs truth {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    let pv = pred.view().into_dyn();
    let tv = truth.view().into_dyn();
    let mut organs = BTreeMap::new();
    for organ in OrganClass::ORGANS {
        let id = organ.id() as u8;
        let dsc = dsc_metric(&pv, &tv, id)?;
        let result = match hausdorff_distance(&pv, &tv, id, &spacing) {
            Ok(h) => OrganResult {
                dsc,
                hd: h.hd,
                hd95: h.hd95,
                flagged: false,
            },
            Err(MetricError::EmptyMask {
                pred_empty,
                truth_empty,
            }) => {
                if pred_empty && truth_empty {
                    OrganResult {
                        dsc: 1.0,
                        hd: 0.0,
                        hd95: 0.0,
                        flagged: false,
                    }
                } else {
                    let diag = image_diagonal(pv.shape(), &spacing);
                    OrganResult {
                        dsc: 0.0,
                        hd: diag,
                        hd95: diag,
                        flagged: true,
                    }
                }
            }
            Err(MetricError::Shape(e)) => return Err(e),
        };
        organs.insert(id, result);
    }
    Ok(CaseReport {
        case_id: case_id.to_string(),
        organs,
    })
}

/// Assemble per-slice logits into a 3D prediction (argmax, then stack) and
/// evaluate against the case label volume.
pub fn evaluate_case(
    case_id: &str,
    slice_logits: &[Array3<f64>],
    labels: &Array3<u8>,
    spacing: [f64; 3],
) -> Result<CaseReport, DataError> {
    let (s, h, w) = labels.dim();
    if slice_logits.len() != s {
        return Err(DataError::MissingSlice {
            case: case_id.to_string(),
            slice: slice_logits.len().min(s),
        });
    }
    let mut pred = Array3::<u8>::zeros((s, h, w));
    for (i, logits) in slice_logits.iter().enumerate() {
        let (c, lh, lw) = logits.dim();
        if c != NUM_CLASSES || lh != h || lw != w {
            return Err(DataError::Format {
                path: case_id.into(),
                reason: format!("slice {i} logits shape {:?}", logits.dim()),
            });
        }
        pred.index_axis_mut(ndarray::Axis(0), i)
            .assign(&argmax_classes(&logits.view()));
    }
    evaluate_volumes(case_id, &pred, labels, spacing)
        .map_err(|e| DataError::Format {
            path: case_id.into(),
            reason: e.to_string(),
        })
}

/// Per-organ aggregate over cases plus the organ-averaged headline numbers.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// organ id -> (mean DSC %, mean HD, mean HD95)
    pub per_organ: BTreeMap<u8, OrganStats>,
    pub mean_dsc_pct: f64,
    pub mean_hd: f64,
    pub mean_hd95: f64,
    pub case_count: usize,
    /// (case id, organ id) entries decided by the empty-mask policy.
    pub flagged: Vec<(String, u8)>,
}

#[derive(Debug, Clone, Copy)]
pub struct OrganStats {
    pub dsc_pct: f64,
    pub hd: f64,
    pub hd95: f64,
}

impl EvalReport {
    pub fn from_cases(cases: &[CaseReport]) -> EvalReport {
        let mut per_organ = BTreeMap::new();
        let mut flagged = Vec::new();
        for organ in OrganClass::ORGANS {
            let id = organ.id() as u8;
            let mut dsc = 0.0;
            let mut hd = 0.0;
            let mut hd95 = 0.0;
            for case in cases {
                let r = &case.organs[&id];
                dsc += r.dsc;
                hd += r.hd;
                hd95 += r.hd95;
                if r.flagged {
                    flagged.push((case.case_id.clone(), id));
                }
            }
            let n = cases.len().max(1) as f64;
            per_organ.insert(
                id,
                OrganStats {
                    dsc_pct: 100.0 * dsc / n,
                    hd: hd / n,
                    hd95: hd95 / n,
                },
            );
        }
        let k = per_organ.len() as f64;
        EvalReport {
            mean_dsc_pct: per_organ.values().map(|s| s.dsc_pct).sum::<f64>() / k,
            mean_hd: per_organ.values().map(|s| s.hd).sum::<f64>() / k,
            mean_hd95: per_organ.values().map(|s| s.hd95).sum::<f64>() / k,
            per_organ,
            case_count: cases.len(),
            flagged,
        }
    }
}

/// 2D helper for desk checks.
pub fn mask2d(rows: usize, cols: usize, filled: &[(usize, usize)]) -> Array2<u8> {
    let mut m = Array2::<u8>::zeros((rows, cols));
    for &(r, c) in filled {
        m[[r, c]] = 1;
    }
    m
}
