//! Seed detection: one voxel per nucleus.
//!
//! A 3-D fast radial symmetry transform votes along gradient directions at a
//! range of integer radii. The radius range adapts per voxel to the distance
//! transform of the foreground mask, which makes detection size-invariant:
//! small and large nuclei in the same volume both peak at their centers.
//! Greedy non-maximum suppression then turns response maxima into a labeled
//! seed set.

use crate::error::Result;
use crate::volume::{
    distance_transform, gaussian_blur, neighbors_26, BinaryMask, Dims, Volume3D,
};

/// Parameters of the radial symmetry transform.
///
/// The kernel variance used to spread each radius' votes follows
/// `sigma^2 = (n_min + n) / 2` for radius `n`.
#[derive(Debug, Clone, Copy)]
pub struct FrstParams {
    /// Smallest voting radius in voxels.
    pub n_min: usize,
    /// Per-voxel radius cap is `ceil(n_max_factor * D)` with `D` the distance
    /// transform value.
    pub n_max_factor: f64,
    /// Radial strictness exponent.
    pub gamma: f64,
    /// Vote normalization constant.
    pub k_n: f64,
}

impl Default for FrstParams {
    fn default() -> Self {
        FrstParams {
            n_min: 2,
            n_max_factor: 3.0,
            gamma: 2.0,
            k_n: 10.0,
        }
    }
}

impl FrstParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 {
            return Err(crate::Error::InvalidParameter("n_min must be >= 1".into()));
        }
        if !(self.n_max_factor > 0.0) {
            return Err(crate::Error::InvalidParameter(
                "n_max_factor must be > 0".into(),
            ));
        }
        if !(self.gamma > 0.0) {
            return Err(crate::Error::InvalidParameter("gamma must be > 0".into()));
        }
        if !(self.k_n > 0.0) {
            return Err(crate::Error::InvalidParameter("k_n must be > 0".into()));
        }
        Ok(())
    }
}

/// One detected seed voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Seed {
    pub pos: (usize, usize, usize),
    pub label: u32,
    pub score: f64,
}

/// Labeled seed voxels, labels `1..=K` in detection order.
#[derive(Debug, Clone, Default)]
pub struct SeedSet {
    seeds: Vec<Seed>,
}

impl SeedSet {
    pub fn new(seeds: Vec<Seed>) -> Self {
        debug_assert!(seeds
            .iter()
            .enumerate()
            .all(|(i, s)| s.label == i as u32 + 1));
        SeedSet { seeds }
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Seed> {
        self.seeds.iter()
    }

    pub fn seeds(&self) -> &[Seed] {
        &self.seeds
    }
}

/// Central-difference gradient with reflective boundaries.
fn gradients(v: &Volume3D) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let dims = v.dims();
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let n = dims.len();
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut gz = vec![0.0; n];
    let refl = |i: i64, n: usize| -> usize {
        if i < 0 {
            0
        } else if i >= n as i64 {
            n - 1
        } else {
            i as usize
        }
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = dims.idx(x, y, z);
                gx[i] = (v.get(refl(x as i64 + 1, nx), y, z)
                    - v.get(refl(x as i64 - 1, nx), y, z))
                    / 2.0;
                gy[i] = (v.get(x, refl(y as i64 + 1, ny), z)
                    - v.get(x, refl(y as i64 - 1, ny), z))
                    / 2.0;
                gz[i] = (v.get(x, y, refl(z as i64 + 1, nz))
                    - v.get(x, y, refl(z as i64 - 1, nz)))
                    / 2.0;
            }
        }
    }
    (gx, gy, gz)
}

/// 3-D fast radial symmetry response.
///
/// For each integer radius `n` in `[n_min, max ceil(n_max_factor * D)]`,
/// every voxel with non-zero gradient casts one vote at the voxel `n` steps
/// along its gradient direction (bright-blob polarity only). Orientation
/// votes are clamped at `k_n`, raised to the strictness exponent and scaled
/// by the magnitude accumulator, then spread with a Gaussian of variance
/// `(n_min + n)/2`. The response at a voxel is the maximum over radii up to
/// that voxel's own cap, and is zero on background.
pub fn frst3d(v: &Volume3D, mask: &BinaryMask, params: &FrstParams) -> Result<Volume3D> {
    params.validate()?;
    let dims = v.dims();
    let n_voxels = dims.len();
    if mask.count_foreground() == 0 {
        return Volume3D::new(dims, v.spacing(), vec![0.0; n_voxels]);
    }
    let dt = distance_transform(mask)?;

    // Per-voxel radius cap; the global maximum bounds the radius loop.
    let caps: Vec<usize> = dt
        .data()
        .iter()
        .map(|&d| (params.n_max_factor * d).ceil() as usize)
        .collect();
    let max_radius = caps.iter().copied().max().unwrap_or(0);
    let mut response = vec![0.0; n_voxels];
    if max_radius < params.n_min {
        return Volume3D::new(dims, v.spacing(), response);
    }

    let (gx, gy, gz) = gradients(v);
    // Unit directions and magnitudes of all voting voxels.
    let mut votes: Vec<(usize, f64, f64, f64, f64)> = Vec::new();
    for i in 0..n_voxels {
        let mag = (gx[i] * gx[i] + gy[i] * gy[i] + gz[i] * gz[i]).sqrt();
        if mag > 1e-12 {
            votes.push((i, gx[i] / mag, gy[i] / mag, gz[i] / mag, mag));
        }
    }

    let mut orient = vec![0.0f64; n_voxels];
    let mut magn = vec![0.0f64; n_voxels];
    for radius in params.n_min..=max_radius {
        orient.iter_mut().for_each(|o| *o = 0.0);
        magn.iter_mut().for_each(|m| *m = 0.0);
        let r = radius as f64;
        for &(i, ux, uy, uz, mag) in &votes {
            let (x, y, z) = dims.pos(i);
            let tx = x as i64 + (r * ux).round() as i64;
            let ty = y as i64 + (r * uy).round() as i64;
            let tz = z as i64 + (r * uz).round() as i64;
            if dims.contains(tx, ty, tz) {
                let t = dims.idx(tx as usize, ty as usize, tz as usize);
                orient[t] += 1.0;
                magn[t] += mag;
            }
        }
        let mut field: Vec<f64> = orient
            .iter()
            .zip(&magn)
            .map(|(&o, &m)| (o.min(params.k_n) / params.k_n).powf(params.gamma) * (m / params.k_n))
            .collect();
        let sigma = ((params.n_min as f64 + r) / 2.0).sqrt();
        field = gaussian_blur(&field, dims, [sigma; 3]);
        for i in 0..n_voxels {
            if mask.at(i) && caps[i] >= radius && field[i] > response[i] {
                response[i] = field[i];
            }
        }
    }
    Volume3D::new(dims, v.spacing(), response)
}

/// Default non-maximum suppression radius: `n_min` plus the median distance
/// transform value over the foreground, tying suppression to object scale.
pub fn default_nms_radius(dt: &Volume3D, mask: &BinaryMask, n_min: usize) -> f64 {
    let mut fg: Vec<f64> = dt
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .collect();
    if fg.is_empty() {
        return n_min as f64;
    }
    fg.sort_by(f64::total_cmp);
    n_min as f64 + fg[fg.len() / 2]
}

/// Local maxima of the response on the foreground, greedily selected in
/// descending score order with Euclidean suppression.
///
/// A candidate is a voxel whose 26-neighborhood holds no larger response;
/// equal-valued adjacent candidates form a plateau represented by their
/// lowest raster index. Candidates must score strictly above `min_score`.
/// Accepted seeds are labeled `1..=K` in acceptance order, and any candidate
/// strictly closer than `nms_radius` to an accepted seed is suppressed.
pub fn detect_seeds(
    response: &Volume3D,
    mask: &BinaryMask,
    nms_radius: f64,
    min_score: f64,
) -> SeedSet {
    let dims = response.dims();
    let n26 = neighbors_26();

    let mut is_candidate = vec![false; dims.len()];
    for i in 0..dims.len() {
        if !mask.at(i) || !(response.at(i) > min_score) {
            continue;
        }
        let (x, y, z) = dims.pos(i);
        let val = response.at(i);
        let local_max = n26.iter().all(|&(dx, dy, dz)| {
            let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            !dims.contains(nx, ny, nz)
                || response.at(dims.idx(nx as usize, ny as usize, nz as usize)) <= val
        });
        is_candidate[i] = local_max;
    }

    // Collapse equal-valued adjacent candidates to their lowest raster index.
    let mut visited = vec![false; dims.len()];
    let mut reps: Vec<(usize, f64)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if !is_candidate[start] || visited[start] {
            continue;
        }
        let val = response.at(start);
        let mut rep = start;
        visited[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            rep = rep.min(i);
            let (x, y, z) = dims.pos(i);
            for &(dx, dy, dz) in &n26 {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if !dims.contains(nx, ny, nz) {
                    continue;
                }
                let j = dims.idx(nx as usize, ny as usize, nz as usize);
                if is_candidate[j] && !visited[j] && response.at(j) == val {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        reps.push((rep, val));
    }

    // Score descending, raster index ascending.
    reps.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let r2 = nms_radius * nms_radius;
    let mut accepted: Vec<(usize, f64)> = Vec::new();
    for &(idx, score) in &reps {
        let (x, y, z) = dims.pos(idx);
        let suppressed = accepted.iter().any(|&(a, _)| {
            let (ax, ay, az) = dims.pos(a);
            let dx = x as f64 - ax as f64;
            let dy = y as f64 - ay as f64;
            let dz = z as f64 - az as f64;
            dx * dx + dy * dy + dz * dz < r2
        });
        if !suppressed {
            accepted.push((idx, score));
        }
    }

    SeedSet::new(
        accepted
            .into_iter()
            .enumerate()
            .map(|(k, (idx, score))| Seed {
                pos: dims.pos(idx),
                label: k as u32 + 1,
                score,
            })
            .collect(),
    )
}
