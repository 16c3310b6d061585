//! Segmentation accuracy measures: mutual overlap (Dice), Tanimoto
//! coefficient, precision/recall/F-score, Rand index and Hausdorff distance,
//! plus object matching and per-volume report aggregation.
//!
//! Region arguments are sorted raster-index slices (as produced by
//! [`LabelVolume::region_voxels`]).

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, NEIGHBORS_6};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Number of voxels shared by two sorted index slices.
fn intersection_size(r1: &[usize], r2: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < r1.len() && j < r2.len() {
        match r1[i].cmp(&r2[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Mutual overlap: `2|r1 ∩ r2| / (|r1| + |r2|)`.
pub fn dice(r1: &[usize], r2: &[usize]) -> Result<f64> {
    if r1.is_empty() && r2.is_empty() {
        return Err(Error::EmptyRegionPair);
    }
    let inter = intersection_size(r1, r2) as f64;
    Ok(2.0 * inter / (r1.len() + r2.len()) as f64)
}

/// Tanimoto coefficient: `|r1 ∩ r2| / |r1 ∪ r2|`.
pub fn tanimoto(r1: &[usize], r2: &[usize]) -> Result<f64> {
    if r1.is_empty() && r2.is_empty() {
        return Err(Error::EmptyRegionPair);
    }
    let inter = intersection_size(r1, r2);
    let union = r1.len() + r2.len() - inter;
    Ok(inter as f64 / union as f64)
}

/// Precision, recall and their harmonic mean. `r1` is the automated region,
/// `r2` the manual one.
pub fn fscore(r1: &[usize], r2: &[usize]) -> Result<(f64, f64, f64)> {
    if r1.is_empty() || r2.is_empty() {
        return Err(Error::EmptyRegionPair);
    }
    let inter = intersection_size(r1, r2) as f64;
    let p = inter / r1.len() as f64;
    let r = inter / r2.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

/// Voxels over which the Rand index is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandDomain {
    /// Voxels that are foreground in at least one labeling. The default:
    /// a giant shared background object would otherwise dominate the count.
    ForegroundUnion,
    /// Every voxel, with background as one more object.
    AllVoxels,
}

fn pairs_of(n: u64) -> f64 {
    n as f64 * (n as f64 - 1.0) / 2.0
}

/// Rand index over the foreground-union domain (see [`RandDomain`]).
pub fn rand_index(l1: &LabelVolume, l2: &LabelVolume) -> Result<f64> {
    rand_index_with_domain(l1, l2, RandDomain::ForegroundUnion)
}

/// Rand index: the frequency with which the two labelings agree on whether a
/// voxel pair belongs to the same object. Computed from the contingency
/// table, not by pair enumeration.
pub fn rand_index_with_domain(
    l1: &LabelVolume,
    l2: &LabelVolume,
    domain: RandDomain,
) -> Result<f64> {
    if l1.dims() != l2.dims() {
        return Err(Error::DimensionMismatch {
            left: l1.dims().as_tuple(),
            right: l2.dims().as_tuple(),
        });
    }
    let mut cells: HashMap<(u32, u32), u64> = HashMap::new();
    let mut rows: HashMap<u32, u64> = HashMap::new();
    let mut cols: HashMap<u32, u64> = HashMap::new();
    let mut n = 0u64;
    for (&a, &b) in l1.labels().iter().zip(l2.labels()) {
        if domain == RandDomain::ForegroundUnion && a == 0 && b == 0 {
            continue;
        }
        n += 1;
        *cells.entry((a, b)).or_insert(0) += 1;
        *rows.entry(a).or_insert(0) += 1;
        *cols.entry(b).or_insert(0) += 1;
    }
    if n < 2 {
        return Err(Error::InvalidParameter(
            "Rand index needs at least 2 voxels in the evaluation domain".into(),
        ));
    }
    let same_both: f64 = cells.values().map(|&c| pairs_of(c)).sum();
    let same_1: f64 = rows.values().map(|&c| pairs_of(c)).sum();
    let same_2: f64 = cols.values().map(|&c| pairs_of(c)).sum();
    let total = pairs_of(n);
    let diff_both = total - same_1 - same_2 + same_both;
    Ok((same_both + diff_both) / total)
}

/// Region voxels with at least one 6-neighbor outside the region
/// (volume borders count as outside).
pub fn boundary_voxels(region: &[usize], dims: Dims) -> Vec<usize> {
    let mut member = vec![false; dims.len()];
    for &i in region {
        member[i] = true;
    }
    region
        .iter()
        .copied()
        .filter(|&i| {
            let (x, y, z) = dims.pos(i);
            NEIGHBORS_6.iter().any(|&(dx, dy, dz)| {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                !dims.contains(nx, ny, nz)
                    || !member[dims.idx(nx as usize, ny as usize, nz as usize)]
            })
        })
        .collect()
}

fn scaled_points(voxels: &[usize], dims: Dims, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    voxels
        .iter()
        .map(|&i| {
            let (x, y, z) = dims.pos(i);
            [
                x as f64 * spacing[0],
                y as f64 * spacing[1],
                z as f64 * spacing[2],
            ]
        })
        .collect()
}

/// Directed Hausdorff with the early-break scan: once a target point within
/// the running maximum is found, the source point cannot raise it.
fn directed_hausdorff_sq(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut cmax = 0.0f64;
    for p in from {
        let mut cmin = f64::INFINITY;
        for q in to {
            let dx = p[0] - q[0];
            let dy = p[1] - q[1];
            let dz = p[2] - q[2];
            let d = dx * dx + dy * dy + dz * dz;
            if d <= cmax {
                cmin = d;
                break;
            }
            if d < cmin {
                cmin = d;
            }
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

/// Symmetric Hausdorff distance between two region boundaries, in voxel
/// units.
pub fn hausdorff(r1: &[usize], r2: &[usize], dims: Dims) -> Result<f64> {
    hausdorff_scaled(r1, r2, dims, [1.0; 3])
}

/// Hausdorff distance with physical voxel spacing applied per axis.
pub fn hausdorff_scaled(
    r1: &[usize],
    r2: &[usize],
    dims: Dims,
    spacing: [f64; 3],
) -> Result<f64> {
    if r1.is_empty() || r2.is_empty() {
        return Err(Error::EmptyRegionPair);
    }
    let b1 = scaled_points(&boundary_voxels(r1, dims), dims, spacing);
    let b2 = scaled_points(&boundary_voxels(r2, dims), dims, spacing);
    let fwd = directed_hausdorff_sq(&b1, &b2);
    let rev = directed_hausdorff_sq(&b2, &b1);
    Ok(fwd.max(rev).sqrt())
}

/// Metrics of one matched auto/truth object pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairMetrics {
    #[serde(rename = "auto")]
    pub auto_label: u32,
    #[serde(rename = "truth")]
    pub truth_label: u32,
    pub dice: f64,
    pub tanimoto: f64,
    pub precision: f64,
    pub recall: f64,
    pub fscore: f64,
    pub hausdorff: f64,
}

/// Mean and sample standard deviation of one metric.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricStats {
    pub mean: f64,
    pub std: f64,
}

impl MetricStats {
    fn from_values(values: &[f64]) -> Self {
        if values.is_empty() {
            return MetricStats { mean: 0.0, std: 0.0 };
        }
        // Kahan-compensated sums keep the aggregation order-independent in
        // practice for the volume counts we see.
        let mut sum = 0.0;
        let mut c = 0.0;
        for &v in values {
            let y = v - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
        }
        let mean = sum / values.len() as f64;
        let std = if values.len() < 2 {
            0.0
        } else {
            let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (values.len() - 1) as f64).sqrt()
        };
        MetricStats { mean, std }
    }
}

/// Aggregate statistics over object pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateSet {
    pub dice: MetricStats,
    pub tanimoto: MetricStats,
    pub precision: MetricStats,
    pub recall: MetricStats,
    pub fscore: MetricStats,
    pub hausdorff: MetricStats,
}

/// Aggregates at both reporting levels: over matched pairs only, and with
/// unmatched objects scored 0 on the overlap metrics (Hausdorff is undefined
/// for unmatched objects and always aggregates over matched pairs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregates {
    pub matched: AggregateSet,
    pub with_unmatched: AggregateSet,
    pub matched_pairs: usize,
}

/// Full evaluation of an automated labeling against ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pairs: Vec<PairMetrics>,
    pub aggregates: Aggregates,
    pub rand_index: f64,
    pub unmatched_auto: Vec<u32>,
    pub unmatched_truth: Vec<u32>,
}

fn aggregate(pairs: &[PairMetrics], zero_pad: usize) -> AggregateSet {
    let collect = |f: fn(&PairMetrics) -> f64, pad: usize| -> Vec<f64> {
        let mut v: Vec<f64> = pairs.iter().map(f).collect();
        v.extend(std::iter::repeat(0.0).take(pad));
        v
    };
    AggregateSet {
        dice: MetricStats::from_values(&collect(|p| p.dice, zero_pad)),
        tanimoto: MetricStats::from_values(&collect(|p| p.tanimoto, zero_pad)),
        precision: MetricStats::from_values(&collect(|p| p.precision, zero_pad)),
        recall: MetricStats::from_values(&collect(|p| p.recall, zero_pad)),
        fscore: MetricStats::from_values(&collect(|p| p.fscore, zero_pad)),
        hausdorff: MetricStats::from_values(&collect(|p| p.hausdorff, 0)),
    }
}

/// Matches auto objects to truth objects by greedy maximal overlap and
/// reports per-pair and aggregate metrics plus the global Rand index.
pub fn match_and_report(auto: &LabelVolume, truth: &LabelVolume) -> Result<MetricsReport> {
    if auto.dims() != truth.dims() {
        return Err(Error::DimensionMismatch {
            left: auto.dims().as_tuple(),
            right: truth.dims().as_tuple(),
        });
    }
    let dims = auto.dims();

    // Region voxel lists per label (raster order, hence sorted).
    let mut auto_regions: Vec<Vec<usize>> = vec![Vec::new(); auto.num_labels() as usize + 1];
    let mut truth_regions: Vec<Vec<usize>> = vec![Vec::new(); truth.num_labels() as usize + 1];
    let mut overlaps: HashMap<(u32, u32), u64> = HashMap::new();
    for (i, (&a, &t)) in auto.labels().iter().zip(truth.labels()).enumerate() {
        if a != 0 {
            auto_regions[a as usize].push(i);
        }
        if t != 0 {
            truth_regions[t as usize].push(i);
        }
        if a != 0 && t != 0 {
            *overlaps.entry((a, t)).or_insert(0) += 1;
        }
    }

    // Greedy matching: largest intersection first, deterministic tie-break.
    let mut candidates: Vec<((u32, u32), u64)> = overlaps.into_iter().collect();
    candidates.sort_by(|l, r| r.1.cmp(&l.1).then(l.0.cmp(&r.0)));
    let mut auto_used = vec![false; auto.num_labels() as usize + 1];
    let mut truth_used = vec![false; truth.num_labels() as usize + 1];
    let mut pairs = Vec::new();
    for ((a, t), _) in candidates {
        if auto_used[a as usize] || truth_used[t as usize] {
            continue;
        }
        auto_used[a as usize] = true;
        truth_used[t as usize] = true;
        let ra = &auto_regions[a as usize];
        let rt = &truth_regions[t as usize];
        let (precision, recall, f) = fscore(ra, rt)?;
        pairs.push(PairMetrics {
            auto_label: a,
            truth_label: t,
            dice: dice(ra, rt)?,
            tanimoto: tanimoto(ra, rt)?,
            precision,
            recall,
            fscore: f,
            hausdorff: hausdorff(ra, rt, dims)?,
        });
    }

    let unmatched_auto: Vec<u32> = (1..=auto.num_labels())
        .filter(|&l| !auto_used[l as usize])
        .collect();
    let unmatched_truth: Vec<u32> = (1..=truth.num_labels())
        .filter(|&l| !truth_used[l as usize])
        .collect();

    let aggregates = Aggregates {
        matched: aggregate(&pairs, 0),
        with_unmatched: aggregate(&pairs, unmatched_auto.len() + unmatched_truth.len()),
        matched_pairs: pairs.len(),
    };
    let rand = match rand_index(auto, truth) {
        Ok(r) => r,
        // Degenerate volumes (both labelings empty) have no evaluation domain.
        Err(Error::InvalidParameter(_)) => 0.0,
        Err(e) => return Err(e),
    };

    Ok(MetricsReport {
        pairs,
        aggregates,
        rand_index: rand,
        unmatched_auto,
        unmatched_truth,
    })
}
