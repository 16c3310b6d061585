//! Random-walker segmentation machinery.
//!
//! The foreground is treated as a 6-connected weighted graph with Gaussian
//! intensity weights `w_ij = exp(-beta (q_i - q_j)^2) + 1e-6`. Arrival
//! probabilities at the K seeds solve the combinatorial Dirichlet problem:
//! one sparse SPD system per label (only K-1 of them, the last channel
//! follows from the unit-sum identity), solved with Jacobi-preconditioned
//! conjugate gradients. Probabilities combine into a response image whose
//! ridges lie on equal-probability surfaces between nuclei; seed regions
//! grow along non-decreasing response paths until those ridges.

use crate::error::{Error, Result};
use crate::seeds::SeedSet;
use crate::volume::{BinaryMask, Dims, LabelVolume, Volume3D, NEIGHBORS_6};
use rayon::prelude::*;
use std::collections::BinaryHeap;

/// Additive weight floor: keeps every edge strictly positive even where
/// `exp(-beta dq^2)` underflows, preserving positive definiteness.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Probability floor inside the log-domain response combination.
const PROB_FLOOR: f64 = 1e-12;

/// Weighted 6-connected graph over the foreground voxels.
///
/// Adjacency is stored symmetrically in CSR form; vertex degrees are the
/// floating-point sums of their incident weights in storage order, so the
/// implicit Laplacian has exactly cancelling rows.
#[derive(Debug, Clone)]
pub struct VoxelGraph {
    dims: Dims,
    /// vertex -> raster voxel index
    voxels: Vec<usize>,
    /// voxel -> vertex index, `u32::MAX` for background
    vertex_of: Vec<u32>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<f64>,
    degrees: Vec<f64>,
    component: Vec<u32>,
    num_components: u32,
    beta: f64,
}

impl VoxelGraph {
    pub fn num_vertices(&self) -> usize {
        self.voxels.len()
    }

    pub fn num_components(&self) -> u32 {
        self.num_components
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// Raster voxel index of a vertex.
    pub fn voxel(&self, vertex: usize) -> usize {
        self.voxels[vertex]
    }

    /// Vertex index of a raster voxel, if it is foreground.
    pub fn vertex_at(&self, voxel: usize) -> Option<usize> {
        match self.vertex_of[voxel] {
            u32::MAX => None,
            v => Some(v as usize),
        }
    }

    pub fn component_of(&self, vertex: usize) -> u32 {
        self.component[vertex]
    }

    /// Incident edges of a vertex in storage order.
    pub fn adjacency(&self, vertex: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.offsets[vertex]..self.offsets[vertex + 1];
        self.targets[range.clone()]
            .iter()
            .zip(&self.weights[range])
            .map(|(&t, &w)| (t as usize, w))
    }

    /// Degree: the stored row sum of incident weights.
    pub fn degree(&self, vertex: usize) -> f64 {
        self.degrees[vertex]
    }

    fn compute_components(n: usize, offsets: &[usize], targets: &[u32]) -> (Vec<u32>, u32) {
        let mut component = vec![u32::MAX; n];
        let mut num = 0u32;
        let mut stack = Vec::new();
        for start in 0..n {
            if component[start] != u32::MAX {
                continue;
            }
            component[start] = num;
            stack.push(start);
            while let Some(v) = stack.pop() {
                for &t in &targets[offsets[v]..offsets[v + 1]] {
                    let t = t as usize;
                    if component[t] == u32::MAX {
                        component[t] = num;
                        stack.push(t);
                    }
                }
            }
            num += 1;
        }
        (component, num)
    }

    /// Builds a graph from an explicit edge list (vertices `0..n`); mainly
    /// for driving the solver on non-image graphs. Edge weights must be
    /// positive; duplicate edges are rejected implicitly by degree checks
    /// being the caller's concern.
    pub fn from_edges(n: usize, edges: &[(u32, u32, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptyForeground);
        }
        for &(a, b, w) in edges {
            if a as usize >= n || b as usize >= n || a == b {
                return Err(Error::InvalidParameter(format!(
                    "bad edge ({a},{b}) for {n} vertices"
                )));
            }
            if !(w > 0.0) {
                return Err(Error::InvalidParameter(
                    "edge weights must be > 0".into(),
                ));
            }
        }
        let mut counts = vec![0usize; n];
        for &(a, b, _) in edges {
            counts[a as usize] += 1;
            counts[b as usize] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + counts[i];
        }
        let mut targets = vec![0u32; offsets[n]];
        let mut weights = vec![0.0; offsets[n]];
        let mut fill = offsets.clone();
        for &(a, b, w) in edges {
            targets[fill[a as usize]] = b;
            weights[fill[a as usize]] = w;
            fill[a as usize] += 1;
            targets[fill[b as usize]] = a;
            weights[fill[b as usize]] = w;
            fill[b as usize] += 1;
        }
        let degrees: Vec<f64> = (0..n)
            .map(|v| weights[offsets[v]..offsets[v + 1]].iter().sum())
            .collect();
        let (component, num_components) = Self::compute_components(n, &offsets, &targets);
        let dims = Dims::new(n, 1, 1);
        Ok(VoxelGraph {
            dims,
            voxels: (0..n).collect(),
            vertex_of: (0..n as u32).collect(),
            offsets,
            targets,
            weights,
            degrees,
            component,
            num_components,
            beta: 0.0,
        })
    }
}

/// Gaussian edge weight of Eq-style intensity differences.
#[inline]
pub fn edge_weight(qi: f64, qj: f64, beta: f64) -> f64 {
    (-beta * (qi - qj) * (qi - qj)).exp() + WEIGHT_FLOOR
}

/// Builds the weighted 6-connected foreground graph.
pub fn build_graph(v: &Volume3D, mask: &BinaryMask, beta: f64) -> Result<VoxelGraph> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "beta must be positive and finite, got {beta}"
        )));
    }
    let dims = v.dims();
    let mut vertex_of = vec![u32::MAX; dims.len()];
    let mut voxels = Vec::new();
    for i in 0..dims.len() {
        if mask.at(i) {
            vertex_of[i] = voxels.len() as u32;
            voxels.push(i);
        }
    }
    if voxels.is_empty() {
        return Err(Error::EmptyForeground);
    }

    let n = voxels.len();
    let mut offsets = vec![0usize; n + 1];
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for (vtx, &vox) in voxels.iter().enumerate() {
        let (x, y, z) = dims.pos(vox);
        let qi = v.at(vox);
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let nvox = dims.idx(ax as usize, ay as usize, az as usize);
            let nvtx = vertex_of[nvox];
            if nvtx == u32::MAX {
                continue;
            }
            targets.push(nvtx);
            weights.push(edge_weight(qi, v.at(nvox), beta));
        }
        offsets[vtx + 1] = targets.len();
    }
    let degrees: Vec<f64> = (0..n)
        .map(|vtx| weights[offsets[vtx]..offsets[vtx + 1]].iter().sum())
        .collect();
    let (component, num_components) = VoxelGraph::compute_components(n, &offsets, &targets);
    Ok(VoxelGraph {
        dims,
        voxels,
        vertex_of,
        offsets,
        targets,
        weights,
        degrees,
        component,
        num_components,
        beta,
    })
}

/// Per-voxel arrival probabilities for the K seed labels.
///
/// Channels are stored per vertex of the originating graph. At a seed the
/// field is the exact indicator of its label; elsewhere the channels are in
/// `[0, 1]` and sum to one over the labels present in that vertex's
/// component (channels of absent labels are zero).
#[derive(Debug, Clone)]
pub struct ProbabilityField {
    dims: Dims,
    k: usize,
    /// vertex-major: `probs[vertex * k + (label-1)]`
    probs: Vec<f64>,
    voxels: Vec<usize>,
    component: Vec<u32>,
    /// ascending labels present in each component
    comp_labels: Vec<Vec<u32>>,
}

impl ProbabilityField {
    pub fn num_labels(&self) -> usize {
        self.k
    }

    pub fn num_vertices(&self) -> usize {
        self.voxels.len()
    }

    /// Probability that a walk from `vertex` first reaches seed `label`.
    pub fn prob(&self, vertex: usize, label: u32) -> f64 {
        self.probs[vertex * self.k + (label - 1) as usize]
    }

    pub fn voxel(&self, vertex: usize) -> usize {
        self.voxels[vertex]
    }

    pub fn labels_in_component_of(&self, vertex: usize) -> &[u32] {
        &self.comp_labels[self.component[vertex] as usize]
    }
}

/// Sparse symmetric matrix in CSR form (the unlabeled-block Laplacian).
struct Csr {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    diag: Vec<f64>,
}

impl Csr {
    fn spmv(&self, x: &[f64], y: &mut [f64]) {
        for row in 0..self.n {
            let mut acc = self.diag[row] * x[row];
            for i in self.offsets[row]..self.offsets[row + 1] {
                acc += self.vals[i] * x[self.cols[i] as usize];
            }
            y[row] = acc;
        }
    }
}

/// Jacobi-preconditioned conjugate gradients.
///
/// Aims well below the acceptance bound (`tol_target`) and fails only if the
/// relative residual cannot reach `tol_accept` within `max_iters`.
fn pcg_jacobi(
    a: &Csr,
    b: &[f64],
    tol_target: f64,
    tol_accept: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    let n = a.n;
    let norm_b = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if norm_b == 0.0 {
        return Ok(x);
    }
    let inv_diag: Vec<f64> = a.diag.iter().map(|&d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(&r, &m)| r * m).collect();
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
    let mut ap = vec![0.0; n];
    let mut res = norm_b;
    for _ in 0..max_iters {
        a.spmv(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(&a, &b)| a * b).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if res <= tol_target * norm_b {
            return Ok(x);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new: f64 = r.iter().zip(&z).map(|(&a, &b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= tol_accept * norm_b {
        Ok(x)
    } else {
        Err(Error::SolverDiverged {
            residual: res / norm_b,
            iterations: max_iters,
        })
    }
}

/// Solver knobs; the defaults satisfy the documented `1e-8` residual bound
/// with margin.
#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol_target: f64,
    pub tol_accept: f64,
    pub max_iters: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol_target: 1e-12,
            tol_accept: 1e-8,
            max_iters: 2000,
        }
    }
}

/// Solves the combinatorial Dirichlet problem for the seed labels.
///
/// Each connected component is solved independently with the seeds it
/// contains; a component without any seed is an error. Within a component
/// holding labels `S`, the systems for all but the largest label are solved
/// and the last channel is recovered from the unit-sum identity, then the
/// channels are clamped to `[0,1]` and renormalized against round-off.
pub fn solve_dirichlet(g: &VoxelGraph, seeds: &SeedSet) -> Result<ProbabilityField> {
    solve_dirichlet_with(g, seeds, SolverOptions::default())
}

pub fn solve_dirichlet_with(
    g: &VoxelGraph,
    seeds: &SeedSet,
    opts: SolverOptions,
) -> Result<ProbabilityField> {
    let k = seeds.len();
    if k == 0 {
        return Err(Error::InvalidParameter("seed set is empty".into()));
    }
    let n = g.num_vertices();

    // Seed vertex per label; seeds must sit on the foreground.
    let mut seed_label_of = vec![0u32; n];
    let mut seed_vertices = Vec::with_capacity(k);
    for s in seeds.iter() {
        let vox = g.dims.idx(s.pos.0, s.pos.1, s.pos.2);
        let vtx = g.vertex_at(vox).ok_or_else(|| {
            Error::InvalidParameter(format!("seed {:?} is not on the foreground", s.pos))
        })?;
        if seed_label_of[vtx] != 0 {
            return Err(Error::InvalidParameter(format!(
                "two seeds share voxel {:?}",
                s.pos
            )));
        }
        seed_label_of[vtx] = s.label;
        seed_vertices.push(vtx);
    }

    // Labels present per component; every component needs at least one.
    let num_comps = g.num_components as usize;
    let mut comp_labels: Vec<Vec<u32>> = vec![Vec::new(); num_comps];
    for (&vtx, s) in seed_vertices.iter().zip(seeds.iter()) {
        comp_labels[g.component[vtx] as usize].push(s.label);
    }
    for labels in comp_labels.iter_mut() {
        labels.sort_unstable();
    }
    if let Some(c) = comp_labels.iter().position(|l| l.is_empty()) {
        return Err(Error::UnseededComponent { component: c });
    }

    let mut probs = vec![0.0f64; n * k];

    // Seeds are exact indicators.
    for (&vtx, s) in seed_vertices.iter().zip(seeds.iter()) {
        probs[vtx * k + (s.label - 1) as usize] = 1.0;
    }

    // Assemble and solve per component.
    struct CompSystem {
        comp: usize,
        unknowns: Vec<usize>,
        matrix: Csr,
        rhs: Vec<Vec<f64>>, // one per solved label
        labels: Vec<u32>,   // all labels in this component, ascending
    }

    let mut systems: Vec<CompSystem> = Vec::new();
    for comp in 0..num_comps {
        let labels = comp_labels[comp].clone();
        let members: Vec<usize> = (0..n)
            .filter(|&v| g.component[v] as usize == comp)
            .collect();
        if labels.len() == 1 {
            // Single seed: its channel is one on the whole component.
            let j = (labels[0] - 1) as usize;
            for &v in &members {
                probs[v * k + j] = 1.0;
            }
            continue;
        }
        let unknowns: Vec<usize> = members
            .iter()
            .copied()
            .filter(|&v| seed_label_of[v] == 0)
            .collect();
        if unknowns.is_empty() {
            continue;
        }
        let mut local = vec![u32::MAX; n];
        for (li, &v) in unknowns.iter().enumerate() {
            local[v] = li as u32;
        }
        let m = unknowns.len();
        let mut offsets = vec![0usize; m + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut diag = Vec::with_capacity(m);
        let solved = &labels[..labels.len() - 1];
        let mut rhs = vec![vec![0.0; m]; solved.len()];
        for (row, &v) in unknowns.iter().enumerate() {
            diag.push(g.degree(v));
            for (t, w) in g.adjacency(v) {
                if seed_label_of[t] != 0 {
                    if let Some(pos) = solved.iter().position(|&l| l == seed_label_of[t]) {
                        rhs[pos][row] += w;
                    }
                } else {
                    cols.push(local[t]);
                    vals.push(-w);
                }
            }
            offsets[row + 1] = cols.len();
        }
        systems.push(CompSystem {
            comp,
            unknowns,
            matrix: Csr {
                n: m,
                offsets,
                cols,
                vals,
                diag,
            },
            rhs,
            labels,
        });
    }

    // The per-label systems share their matrix and are independent; solve
    // them in parallel and write back in deterministic order.
    let solutions: Vec<Result<(usize, usize, Vec<f64>)>> = systems
        .par_iter()
        .enumerate()
        .flat_map_iter(|(si, sys)| {
            sys.rhs.iter().enumerate().map(move |(li, b)| (si, li, b))
        })
        .map(|(si, li, b)| {
            let sys = &systems[si];
            pcg_jacobi(
                &sys.matrix,
                b,
                opts.tol_target,
                opts.tol_accept,
                opts.max_iters,
            )
            .map(|x| (si, li, x))
        })
        .collect();

    let mut solved_channels: Vec<Vec<Vec<f64>>> = systems
        .iter()
        .map(|s| vec![Vec::new(); s.rhs.len()])
        .collect();
    for r in solutions {
        let (si, li, x) = r?;
        solved_channels[si][li] = x;
    }

    for (sys, channels) in systems.iter().zip(solved_channels) {
        let _ = sys.comp;
        let last = *sys.labels.last().unwrap();
        for (row, &v) in sys.unknowns.iter().enumerate() {
            let mut sum = 0.0;
            for (li, &label) in sys.labels[..sys.labels.len() - 1].iter().enumerate() {
                let p = channels[li][row];
                probs[v * k + (label - 1) as usize] = p;
                sum += p;
            }
            probs[v * k + (last - 1) as usize] = 1.0 - sum;
            // Clamp and renormalize against round-off.
            let base = v * k;
            let mut total = 0.0;
            for &label in &sys.labels {
                let slot = &mut probs[base + (label - 1) as usize];
                *slot = slot.clamp(0.0, 1.0);
                total += *slot;
            }
            if total > 0.0 {
                for &label in &sys.labels {
                    probs[base + (label - 1) as usize] /= total;
                }
            }
        }
    }

    #[cfg(debug_assertions)]
    {
        for v in 0..n {
            let sum: f64 = (0..k).map(|j| probs[v * k + j]).sum();
            debug_assert!(
                (sum - 1.0).abs() < 1e-6,
                "channel sum {sum} at vertex {v}"
            );
            debug_assert!((0..k).all(|j| (0.0..=1.0).contains(&probs[v * k + j])));
        }
    }

    Ok(ProbabilityField {
        dims: g.dims,
        k,
        probs,
        voxels: g.voxels.clone(),
        component: g.component.clone(),
        comp_labels,
    })
}

/// Log-domain combination of one vertex's probability tuple.
pub(crate) fn log_sum_response(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| (p + PROB_FLOOR).ln()).sum()
}

/// Combines each vertex's probability tuple into the response image.
///
/// The raw value is the sum of channel logs over the labels present in the
/// vertex's component (a monotone transform of the channel product, which
/// underflows for large K), affinely rescaled to `[0,1]` over the
/// foreground. Background voxels are 0. With a single label the response is
/// identically zero: the lone nucleus is its whole component.
pub fn response_image(p: &ProbabilityField) -> Volume3D {
    let dims = p.dims;
    let mut data = vec![0.0; dims.len()];
    if p.k < 2 || p.num_vertices() == 0 {
        return Volume3D::new(dims, [1.0; 3], data).expect("dims validated upstream");
    }
    let raw: Vec<f64> = (0..p.num_vertices())
        .map(|v| {
            let labels = &p.comp_labels[p.component[v] as usize];
            let tuple: Vec<f64> = labels.iter().map(|&l| p.prob(v, l)).collect();
            log_sum_response(&tuple)
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-300 {
        for (v, &r) in raw.iter().enumerate() {
            data[p.voxels[v]] = (r - lo) / (hi - lo);
        }
    }
    Volume3D::new(dims, [1.0; 3], data).expect("dims validated upstream")
}

#[derive(PartialEq)]
struct GrowEntry {
    r: f64,
    raster: usize,
    label: u32,
}

impl Eq for GrowEntry {}

impl Ord for GrowEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Max-heap: highest response first, then lowest raster index.
        self.r
            .total_cmp(&other.r)
            .then_with(|| other.raster.cmp(&self.raster))
    }
}

impl PartialOrd for GrowEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Grows each seed along 6-connected non-decreasing response paths.
///
/// A neighbor is admitted iff it is foreground, unclaimed and its response
/// is at least the current voxel's; growth therefore stops just past each
/// ridge crest. Claims are first-come under a deterministic queue order:
/// response descending at admission, then raster index.
pub fn grow_seed_regions(r: &Volume3D, seeds: &SeedSet, mask: &BinaryMask) -> LabelVolume {
    let dims = r.dims();
    let mut labels = vec![0u32; dims.len()];
    let mut heap = BinaryHeap::new();
    for s in seeds.iter() {
        let idx = dims.idx(s.pos.0, s.pos.1, s.pos.2);
        if labels[idx] == 0 && mask.at(idx) {
            labels[idx] = s.label;
            heap.push(GrowEntry {
                r: r.at(idx),
                raster: idx,
                label: s.label,
            });
        }
    }
    while let Some(e) = heap.pop() {
        let (x, y, z) = dims.pos(e.raster);
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let nidx = dims.idx(ax as usize, ay as usize, az as usize);
            if labels[nidx] == 0 && mask.at(nidx) && r.at(nidx) >= e.r {
                labels[nidx] = e.label;
                heap.push(GrowEntry {
                    r: r.at(nidx),
                    raster: nidx,
                    label: e.label,
                });
            }
        }
    }
    LabelVolume::new_unchecked(dims, labels, seeds.len() as u32)
}
