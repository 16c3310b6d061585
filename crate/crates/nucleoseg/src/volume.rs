//! Volumetric containers and the low-level transforms shared by the whole
//! pipeline: separable Gaussian smoothing, Otsu thresholding, the exact
//! Euclidean distance transform and connected-component labeling.
//!
//! Voxels are stored in raster order, x fastest: `idx = (z * ny + y) * nx + x`.
//! All operations are pure; volumes are cheap to share read-only across
//! threads.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Lattice extents of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Raster index of a voxel.
    #[inline]
    pub fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.ny + y) * self.nx + x
    }

    /// Voxel coordinates of a raster index.
    #[inline]
    pub fn pos(&self, idx: usize) -> (usize, usize, usize) {
        let x = idx % self.nx;
        let y = (idx / self.nx) % self.ny;
        let z = idx / (self.nx * self.ny);
        (x, y, z)
    }

    #[inline]
    pub fn contains(&self, x: i64, y: i64, z: i64) -> bool {
        x >= 0
            && y >= 0
            && z >= 0
            && (x as usize) < self.nx
            && (y as usize) < self.ny
            && (z as usize) < self.nz
    }

    pub fn as_tuple(&self) -> (usize, usize, usize) {
        (self.nx, self.ny, self.nz)
    }
}

/// Face-neighbor offsets (6-connectivity), in fixed scan order.
pub const NEIGHBORS_6: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// The 26 neighbor offsets of the full 3x3x3 cube, in raster order.
pub fn neighbors_26() -> Vec<(i64, i64, i64)> {
    let mut out = Vec::with_capacity(26);
    for dz in -1..=1i64 {
        for dy in -1..=1i64 {
            for dx in -1..=1i64 {
                if dx != 0 || dy != 0 || dz != 0 {
                    out.push((dx, dy, dz));
                }
            }
        }
    }
    out
}

/// Dense scalar field over an x-y-z lattice with physical voxel spacing.
///
/// Intensity images are normalized to `[0, 1]` at ingestion; derived fields
/// (symmetry responses, distance maps) use whatever range their producer
/// documents.
#[derive(Debug, Clone)]
pub struct Volume3D {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume3D {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.nx < 1 || dims.ny < 1 || dims.nz < 1 {
            return Err(Error::InvalidParameter(format!(
                "volume dims must be >= 1, got {dims:?}"
            )));
        }
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Volume3D {
            dims,
            spacing,
            data,
        })
    }

    /// Volume filled with a constant value, unit spacing.
    pub fn from_elem(dims: Dims, value: f64) -> Self {
        Volume3D {
            dims,
            spacing: [1.0; 3],
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.idx(x, y, z)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }
}

/// One flag per voxel: foreground or background.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    dims: Dims,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(BinaryMask { dims, data })
    }

    pub fn filled(dims: Dims, value: bool) -> Self {
        BinaryMask {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.dims.idx(x, y, z)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.data[idx]
    }

    pub fn count_foreground(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Integer label per voxel: 0 = background, `1..=num_labels` = objects.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u32>,
    num_labels: u32,
}

impl LabelVolume {
    /// Builds a label volume, compacting arbitrary non-zero ids to `1..=K`
    /// in ascending order of the original id.
    pub fn from_raw(dims: Dims, raw: Vec<u32>) -> Result<Self> {
        if raw.len() != dims.len() {
            return Err(Error::InvalidParameter(format!(
                "label data length {} does not match dims {:?}",
                raw.len(),
                dims
            )));
        }
        let mut ids: Vec<u32> = raw.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let compact = ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (id, i as u32 + 1))
            .collect::<std::collections::HashMap<_, _>>();
        let labels = raw
            .into_iter()
            .map(|l| if l == 0 { 0 } else { compact[&l] })
            .collect();
        Ok(LabelVolume {
            dims,
            labels,
            num_labels: ids.len() as u32,
        })
    }

    /// Wraps labels already known to be compact (`1..=num_labels`, each used).
    pub(crate) fn new_unchecked(dims: Dims, labels: Vec<u32>, num_labels: u32) -> Self {
        debug_assert_eq!(labels.len(), dims.len());
        LabelVolume {
            dims,
            labels,
            num_labels,
        }
    }

    pub fn zeros(dims: Dims) -> Self {
        LabelVolume {
            dims,
            labels: vec![0; dims.len()],
            num_labels: 0,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn num_labels(&self) -> u32 {
        self.num_labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u32 {
        self.labels[self.dims.idx(x, y, z)]
    }

    #[inline]
    pub fn at(&self, idx: usize) -> u32 {
        self.labels[idx]
    }

    /// Raster indices of every voxel carrying `label`.
    pub fn region_voxels(&self, label: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Foreground mask (any non-zero label).
    pub fn foreground_mask(&self) -> BinaryMask {
        BinaryMask {
            dims: self.dims,
            data: self.labels.iter().map(|&l| l != 0).collect(),
        }
    }
}

/// Reflects an out-of-range line coordinate back into `0..n`
/// (half-sample symmetric boundary).
#[inline]
fn reflect(mut i: i64, n: i64) -> usize {
    loop {
        if i < 0 {
            i = -1 - i;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized 1-D Gaussian taps for `sigma > 0`, radius `ceil(3 sigma)`.
fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Convolves one axis of a raster buffer with the given taps, reflective
/// boundaries. Every output line is an independent fixed-order sum, so the
/// result is bit-identical regardless of thread count.
fn convolve_axis(input: &[f64], dims: Dims, taps: &[f64], axis: usize) -> Vec<f64> {
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let radius = (taps.len() / 2) as i64;
    let mut out = vec![0.0; input.len()];
    match axis {
        0 => {
            out.par_chunks_mut(nx)
                .zip(input.par_chunks(nx))
                .for_each(|(o, line)| {
                    for (x, slot) in o.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (t, &w) in taps.iter().enumerate() {
                            let sx = reflect(x as i64 + t as i64 - radius, nx as i64);
                            acc += w * line[sx];
                        }
                        *slot = acc;
                    }
                });
        }
        1 => {
            out.par_chunks_mut(nx).enumerate().for_each(|(line, o)| {
                let z = line / ny;
                let y = line % ny;
                for (x, slot) in o.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (t, &w) in taps.iter().enumerate() {
                        let sy = reflect(y as i64 + t as i64 - radius, ny as i64);
                        acc += w * input[dims.idx(x, sy, z)];
                    }
                    *slot = acc;
                }
            });
        }
        2 => {
            out.par_chunks_mut(nx).enumerate().for_each(|(line, o)| {
                let z = line / ny;
                let y = line % ny;
                for (x, slot) in o.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (t, &w) in taps.iter().enumerate() {
                        let sz = reflect(z as i64 + t as i64 - radius, nz as i64);
                        acc += w * input[dims.idx(x, y, sz)];
                    }
                    *slot = acc;
                }
            });
        }
        _ => unreachable!(),
    }
    out
}

/// Separable Gaussian blur of a raw buffer; `sigma` per axis, zero skips the
/// axis. Shared by image denoising and the radial-symmetry accumulators.
pub(crate) fn gaussian_blur(data: &[f64], dims: Dims, sigma: [f64; 3]) -> Vec<f64> {
    let mut cur: Vec<f64> = data.to_vec();
    for (axis, &s) in sigma.iter().enumerate() {
        if s > 0.0 {
            let taps = gaussian_kernel(s);
            cur = convolve_axis(&cur, dims, &taps, axis);
        }
    }
    cur
}

/// Separable Gaussian smoothing with reflective boundary handling.
///
/// `sigma` is in voxels, per axis; a zero component leaves that axis
/// untouched and an all-zero sigma returns a bitwise copy of the input.
pub fn gaussian_smooth(v: &Volume3D, sigma: [f64; 3]) -> Result<Volume3D> {
    if sigma.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter(format!(
            "gaussian sigma must be finite and >= 0, got {sigma:?}"
        )));
    }
    if sigma.iter().all(|&s| s == 0.0) {
        return Ok(v.clone());
    }
    let data = gaussian_blur(v.data(), v.dims(), sigma);
    Volume3D::new(v.dims(), v.spacing(), data)
}

const OTSU_BINS: usize = 256;

#[inline]
fn intensity_bin(v: f64) -> usize {
    ((v * OTSU_BINS as f64) as usize).min(OTSU_BINS - 1)
}

/// Otsu histogram thresholding over 256 bins.
///
/// Returns the mask of voxels above the threshold that maximizes
/// between-class variance. Volumes whose histogram collapses into a single
/// bin are rejected.
pub fn otsu_threshold(v: &Volume3D) -> Result<BinaryMask> {
    let mut hist = [0u64; OTSU_BINS];
    for &val in v.data() {
        hist[intensity_bin(val)] += 1;
    }
    let total = v.data().len() as f64;
    let total_mean: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum::<f64>()
        / total;

    let mut best_split: Option<usize> = None;
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for split in 0..OTSU_BINS - 1 {
        w0 += hist[split] as f64 / total;
        sum0 += split as f64 * hist[split] as f64 / total;
        let w1 = 1.0 - w0;
        if w0 <= 0.0 || w1 <= 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (total_mean - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_split = Some(split);
        }
    }
    let split = best_split.ok_or(Error::DegenerateHistogram)?;
    let data = v.data().iter().map(|&val| intensity_bin(val) > split).collect();
    BinaryMask::new(v.dims(), data)
}

const DT_INF: f64 = 1e20;

/// 1-D squared-distance transform of a sampled function (lower envelope of
/// parabolas). `f` holds the input costs, `d` receives the output.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
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
        let p = v[k];
        let dq = q as f64 - p as f64;
        d[q] = dq * dq + f[p];
    }
}

/// Exact squared Euclidean distance (in voxel units) from every voxel to the
/// nearest `true` voxel of `sources`. Voxels in `sources` get 0.
pub(crate) fn edt_squared_to_set(sources: &[bool], dims: Dims) -> Vec<f64> {
    let (nx, ny, nz) = (dims.nx, dims.ny, dims.nz);
    let mut dist: Vec<f64> = sources
        .iter()
        .map(|&s| if s { 0.0 } else { DT_INF })
        .collect();

    let max_n = nx.max(ny).max(nz);
    let mut f = vec![0.0; max_n];
    let mut d = vec![0.0; max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![0.0; max_n + 1];

    // x pass
    if nx > 1 {
        for line in 0..ny * nz {
            let base = line * nx;
            f[..nx].copy_from_slice(&dist[base..base + nx]);
            dt1d(&f[..nx], &mut d[..nx], &mut v, &mut z);
            dist[base..base + nx].copy_from_slice(&d[..nx]);
        }
    }
    // y pass
    if ny > 1 {
        for zc in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    f[y] = dist[dims.idx(x, y, zc)];
                }
                dt1d(&f[..ny], &mut d[..ny], &mut v, &mut z);
                for y in 0..ny {
                    dist[dims.idx(x, y, zc)] = d[y];
                }
            }
        }
    }
    // z pass
    if nz > 1 {
        for y in 0..ny {
            for x in 0..nx {
                for zc in 0..nz {
                    f[zc] = dist[dims.idx(x, y, zc)];
                }
                dt1d(&f[..nz], &mut d[..nz], &mut v, &mut z);
                for zc in 0..nz {
                    dist[dims.idx(x, y, zc)] = d[zc];
                }
            }
        }
    }
    dist
}

/// Exact Euclidean distance transform in voxel units.
///
/// Foreground voxels receive their distance to the nearest background voxel;
/// background stays 0. The squared distances are computed exactly with the
/// separable lower-envelope algorithm before the final square root.
pub fn distance_transform(m: &BinaryMask) -> Result<Volume3D> {
    let background: Vec<bool> = m.data().iter().map(|&b| !b).collect();
    if background.iter().all(|&b| !b) {
        return Err(Error::MaskAllForeground);
    }
    let sq = edt_squared_to_set(&background, m.dims());
    let data = sq.into_iter().map(f64::sqrt).collect();
    Volume3D::new(m.dims(), [1.0; 3], data)
}

/// Connectivity choice for component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Six,
    TwentySix,
}

/// Labels maximal connected foreground components `1..=C`, ordered by the
/// raster index of each component's first voxel.
pub fn connected_components(m: &BinaryMask, connectivity: Connectivity) -> LabelVolume {
    let dims = m.dims();
    let offsets: Vec<(i64, i64, i64)> = match connectivity {
        Connectivity::Six => NEIGHBORS_6.to_vec(),
        Connectivity::TwentySix => neighbors_26(),
    };
    let mut labels = vec![0u32; dims.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..dims.len() {
        if !m.at(start) || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (x, y, z) = dims.pos(idx);
            for &(dx, dy, dz) in &offsets {
                let (nx, ny, nz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if !dims.contains(nx, ny, nz) {
                    continue;
                }
                let nidx = dims.idx(nx as usize, ny as usize, nz as usize);
                if m.at(nidx) && labels[nidx] == 0 {
                    labels[nidx] = next;
                    stack.push(nidx);
                }
            }
        }
    }
    LabelVolume::new_unchecked(dims, labels, next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube_dims(n: usize) -> Dims {
        Dims::new(n, n, n)
    }

    #[test]
    fn constant_volume_smooths_to_itself() {
        let v = Volume3D::from_elem(cube_dims(7), 0.37);
        let s = gaussian_smooth(&v, [1.5, 0.8, 2.0]).unwrap();
        for &val in s.data() {
            assert!((val - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_sigma_is_bitwise_identity() {
        let dims = cube_dims(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..dims.len()).map(|_| rng.gen::<f64>()).collect();
        let v = Volume3D::new(dims, [1.0; 3], data.clone()).unwrap();
        let s = gaussian_smooth(&v, [0.0; 3]).unwrap();
        assert_eq!(s.data(), data.as_slice());
    }

    #[test]
    fn impulse_center_matches_tabulated_kernel() {
        // Oracle: dense 3-D convolution with an explicitly tabulated kernel.
        let dims = cube_dims(9);
        let mut data = vec![0.0; dims.len()];
        data[dims.idx(4, 4, 4)] = 1.0;
        let v = Volume3D::new(dims, [1.0; 3], data).unwrap();
        let s = gaussian_smooth(&v, [1.0, 1.0, 1.0]).unwrap();

        let taps: Vec<f64> = (-3i64..=3)
            .map(|k| (-(k * k) as f64 / 2.0).exp())
            .collect();
        let norm: f64 = taps.iter().sum();
        let central = taps[3] / norm;
        let expected = central * central * central;
        assert!((s.get(4, 4, 4) - expected).abs() < 1e-12);

        // Same oracle at an off-center tap.
        let expected_off = (taps[2] / norm) * (taps[3] / norm) * (taps[3] / norm);
        assert!((s.get(3, 4, 4) - expected_off).abs() < 1e-12);
    }

    #[test]
    fn smoothing_preserves_mass_of_interior_impulse() {
        let dims = Dims::new(21, 19, 17);
        let mut data = vec![0.0; dims.len()];
        data[dims.idx(10, 9, 8)] = 1.0;
        let v = Volume3D::new(dims, [1.0; 3], data).unwrap();
        let s = gaussian_smooth(&v, [1.0, 1.2, 0.9]).unwrap();
        let mass: f64 = s.data().iter().sum();
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_sigma_rejected() {
        let v = Volume3D::from_elem(cube_dims(3), 0.5);
        assert!(gaussian_smooth(&v, [f64::NAN, 1.0, 1.0]).is_err());
        assert!(gaussian_smooth(&v, [-1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn otsu_separates_two_modes() {
        let dims = cube_dims(10);
        let n = dims.len();
        let cut = (n as f64 * 0.4) as usize;
        let data: Vec<f64> = (0..n).map(|i| if i < cut { 0.1 } else { 0.9 }).collect();
        let v = Volume3D::new(dims, [1.0; 3], data).unwrap();
        let mask = otsu_threshold(&v).unwrap();
        for (i, &fg) in mask.data().iter().enumerate() {
            assert_eq!(fg, i >= cut);
        }
    }

    #[test]
    fn otsu_rejects_constant_volume() {
        let v = Volume3D::from_elem(cube_dims(4), 0.3);
        assert!(matches!(
            otsu_threshold(&v),
            Err(Error::DegenerateHistogram)
        ));
    }

    /// Independent oracle: recompute the between-class variance for every
    /// split from scratch and pick the argmax.
    fn otsu_split_oracle(hist: &[u64]) -> usize {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best = (f64::NEG_INFINITY, 0usize);
        for split in 0..hist.len() - 1 {
            let w0: f64 = hist[..=split].iter().map(|&c| c as f64).sum::<f64>() / total;
            let w1 = 1.0 - w0;
            if w0 <= 0.0 || w1 <= 0.0 {
                continue;
            }
            let mu0: f64 = hist[..=split]
                .iter()
                .enumerate()
                .map(|(i, &c)| i as f64 * c as f64)
                .sum::<f64>()
                / (w0 * total);
            let mu1: f64 = hist[split + 1..]
                .iter()
                .enumerate()
                .map(|(i, &c)| (split + 1 + i) as f64 * c as f64)
                .sum::<f64>()
                / (w1 * total);
            let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
            if var > best.0 {
                best = (var, split);
            }
        }
        best.1
    }

    #[test]
    fn otsu_matches_sweep_oracle_on_bimodal_mixture() {
        let dims = cube_dims(24);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let weight_fg = 0.35;
        let mut truth_fg = 0usize;
        let data: Vec<f64> = (0..dims.len())
            .map(|_| {
                let fg = rng.gen::<f64>() < weight_fg;
                if fg {
                    truth_fg += 1;
                }
                let mean = if fg { 0.8 } else { 0.2 };
                let noise: f64 = rng.gen::<f64>() * 2.0 - 1.0;
                (mean + 0.05 * noise).clamp(0.0, 1.0)
            })
            .collect();
        let v = Volume3D::new(dims, [1.0; 3], data).unwrap();

        let mut hist = [0u64; OTSU_BINS];
        for &val in v.data() {
            hist[intensity_bin(val)] += 1;
        }
        let oracle_split = otsu_split_oracle(&hist);
        let mask = otsu_threshold(&v).unwrap();
        let oracle_fg = v
            .data()
            .iter()
            .filter(|&&val| intensity_bin(val) > oracle_split)
            .count();
        assert_eq!(mask.count_foreground(), oracle_fg);

        let frac = mask.count_foreground() as f64 / dims.len() as f64;
        let truth_frac = truth_fg as f64 / dims.len() as f64;
        assert!(
            (frac - truth_frac).abs() <= 0.02,
            "foreground fraction {frac} vs mixture weight {truth_frac}"
        );
    }

    #[test]
    fn dt_zero_on_all_background() {
        let m = BinaryMask::filled(cube_dims(6), false);
        let d = distance_transform(&m).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dt_single_foreground_voxel_is_one() {
        let dims = cube_dims(5);
        let mut m = BinaryMask::filled(dims, false);
        let idx = dims.idx(2, 2, 2);
        m.data_mut()[idx] = true;
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.at(idx), 1.0);
    }

    #[test]
    fn dt_errors_on_all_foreground() {
        let m = BinaryMask::filled(cube_dims(4), true);
        assert!(matches!(
            distance_transform(&m),
            Err(Error::MaskAllForeground)
        ));
    }

    #[test]
    fn dt_cube_center_equals_brute_force() {
        let dims = cube_dims(11);
        let mut m = BinaryMask::filled(dims, false);
        for z in 3..8 {
            for y in 3..8 {
                for x in 3..8 {
                    m.data_mut()[dims.idx(x, y, z)] = true;
                }
            }
        }
        let d = distance_transform(&m).unwrap();
        assert_eq!(d.get(5, 5, 5), 3.0);

        // Brute force over all background voxels.
        let brute = |px: usize, py: usize, pz: usize| -> f64 {
            let mut best = f64::INFINITY;
            for z in 0..dims.nz {
                for y in 0..dims.ny {
                    for x in 0..dims.nx {
                        if !m.get(x, y, z) {
                            let dx = px as f64 - x as f64;
                            let dy = py as f64 - y as f64;
                            let dz = pz as f64 - z as f64;
                            best = best.min((dx * dx + dy * dy + dz * dz).sqrt());
                        }
                    }
                }
            }
            best
        };
        assert!((d.get(5, 5, 5) - brute(5, 5, 5)).abs() < 1e-9);
        assert!((d.get(3, 5, 6) - brute(3, 5, 6)).abs() < 1e-9);
    }

    #[test]
    fn dt_matches_brute_force_on_random_masks_and_squares_are_integers() {
        let dims = cube_dims(16);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let data: Vec<bool> = (0..dims.len()).map(|_| rng.gen::<f64>() < 0.6).collect();
            if data.iter().all(|&b| b) || data.iter().all(|&b| !b) {
                continue;
            }
            let m = BinaryMask::new(dims, data).unwrap();
            let d = distance_transform(&m).unwrap();

            let bg: Vec<usize> = (0..dims.len()).filter(|&i| !m.at(i)).collect();
            for i in 0..dims.len() {
                let sq = d.at(i) * d.at(i);
                assert!(
                    (sq - sq.round()).abs() < 1e-6,
                    "squared EDT not integral: {sq}"
                );
                if !m.at(i) {
                    assert_eq!(d.at(i), 0.0);
                    continue;
                }
                let (x, y, z) = dims.pos(i);
                let mut best = f64::INFINITY;
                for &b in &bg {
                    let (bx, by, bz) = dims.pos(b);
                    let dx = x as f64 - bx as f64;
                    let dy = y as f64 - by as f64;
                    let dz = z as f64 - bz as f64;
                    best = best.min(dx * dx + dy * dy + dz * dz);
                }
                assert!((sq - best).abs() < 1e-9, "EDT mismatch at {i}");
            }
        }
    }

    #[test]
    fn components_empty_mask() {
        let m = BinaryMask::filled(cube_dims(3), false);
        let l = connected_components(&m, Connectivity::Six);
        assert_eq!(l.num_labels(), 0);
    }

    #[test]
    fn components_two_disjoint_voxels() {
        let dims = cube_dims(5);
        let mut m = BinaryMask::filled(dims, false);
        m.data_mut()[dims.idx(0, 0, 0)] = true;
        m.data_mut()[dims.idx(4, 4, 4)] = true;
        let l = connected_components(&m, Connectivity::Six);
        assert_eq!(l.num_labels(), 2);
        assert_eq!(l.get(0, 0, 0), 1);
        assert_eq!(l.get(4, 4, 4), 2);
    }

    #[test]
    fn diagonal_voxels_depend_on_connectivity() {
        let dims = cube_dims(4);
        let mut m = BinaryMask::filled(dims, false);
        m.data_mut()[dims.idx(1, 1, 1)] = true;
        m.data_mut()[dims.idx(2, 2, 1)] = true;
        assert_eq!(connected_components(&m, Connectivity::Six).num_labels(), 2);
        assert_eq!(
            connected_components(&m, Connectivity::TwentySix).num_labels(),
            1
        );
    }

    #[test]
    fn components_idempotent_under_relabeling() {
        let dims = cube_dims(12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<bool> = (0..dims.len()).map(|_| rng.gen::<f64>() < 0.45).collect();
        let m = BinaryMask::new(dims, data).unwrap();
        let l1 = connected_components(&m, Connectivity::Six);
        let l2 = connected_components(&l1.foreground_mask(), Connectivity::Six);
        assert_eq!(l1.labels(), l2.labels());
    }
}
