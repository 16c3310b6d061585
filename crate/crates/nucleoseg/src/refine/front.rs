//! Sparse-field level-set front: signed distance over a per-nucleus working
//! subvolume, maintained in thin layers around the zero set so no global
//! reinitialization is ever needed.
//!
//! The sign convention is positive inside the region. Layer codes: 0 is the
//! active (zero) layer, +1/+2 the first/second inside layers, -1/-2 the
//! outside layers, and +3/-3 the far inside/outside.

use crate::error::{Error, Result};
use crate::volume::{edt_squared_to_set, Dims, LabelVolume, Volume3D, NEIGHBORS_6};

use super::{smoothed_dirac, smoothed_heaviside, LocalizationParams};

const FAR_INSIDE: f64 = 3.0;
const FAR_OUTSIDE: f64 = -3.0;

/// One evolving nucleus surface with its sparse-field bookkeeping.
#[derive(Debug, Clone)]
pub struct LevelSetFront {
    label: u32,
    /// Global coordinates of the subvolume origin.
    origin: (usize, usize, usize),
    dims: Dims,
    global_dims: Dims,
    phi: Vec<f64>,
    status: Vec<i8>,
    lz: Vec<u32>,
    lp1: Vec<u32>,
    ln1: Vec<u32>,
    lp2: Vec<u32>,
    ln2: Vec<u32>,
    far_inside: usize,
    converged: bool,
    calm_streak: u32,
    iterations: usize,
}

impl LevelSetFront {
    pub fn label(&self) -> u32 {
        self.label
    }

    pub fn subvolume_dims(&self) -> Dims {
        self.dims
    }

    pub fn origin(&self) -> (usize, usize, usize) {
        self.origin
    }

    pub fn zero_layer_len(&self) -> usize {
        self.lz.len()
    }

    pub fn is_converged(&self) -> bool {
        self.converged
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Signed distance at subvolume raster index.
    pub fn phi_at(&self, sub_idx: usize) -> f64 {
        self.phi[sub_idx]
    }

    pub(crate) fn phi_snapshot(&self) -> Vec<f64> {
        self.phi.clone()
    }

    pub(crate) fn restore_phi(&mut self, phi: Vec<f64>) {
        self.phi = phi;
        self.rebuild_layers();
        self.converged = true;
    }

    /// Global raster index of a subvolume index.
    #[inline]
    pub fn to_global(&self, sub_idx: usize) -> usize {
        let (x, y, z) = self.dims.pos(sub_idx);
        self.global_dims
            .idx(x + self.origin.0, y + self.origin.1, z + self.origin.2)
    }

    /// Interior claims `(global_index, phi)` of this front.
    pub fn claims(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.phi
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (self.to_global(i), p))
    }

    /// True while any voxel is strictly inside the front.
    fn has_interior(&self) -> bool {
        self.far_inside > 0
            || !self.lp1.is_empty()
            || !self.lp2.is_empty()
            || self.lz.iter().any(|&v| self.phi[v as usize] > 0.0)
    }

    fn rebuild_layers(&mut self) {
        self.lz.clear();
        self.lp1.clear();
        self.ln1.clear();
        self.lp2.clear();
        self.ln2.clear();
        self.far_inside = 0;
        for (i, &p) in self.phi.iter().enumerate() {
            let s = if p.abs() <= 0.5 {
                self.lz.push(i as u32);
                0
            } else if p > 0.5 && p <= 1.5 {
                self.lp1.push(i as u32);
                1
            } else if p < -0.5 && p >= -1.5 {
                self.ln1.push(i as u32);
                -1
            } else if p > 1.5 && p <= 2.5 {
                self.lp2.push(i as u32);
                2
            } else if p < -1.5 && p >= -2.5 {
                self.ln2.push(i as u32);
                -2
            } else if p > 0.0 {
                self.far_inside += 1;
                3
            } else {
                -3
            };
            self.status[i] = s;
        }
    }

    #[cfg(debug_assertions)]
    pub(crate) fn check_invariants(&self) {
        for &v in &self.lz {
            debug_assert!(
                self.phi[v as usize].abs() <= 0.5 + 1e-12,
                "zero-layer |phi| = {} exceeds 0.5",
                self.phi[v as usize]
            );
            debug_assert_eq!(self.status[v as usize], 0);
        }
        for (list, code) in [(&self.lp1, 1i8), (&self.ln1, -1), (&self.lp2, 2), (&self.ln2, -2)] {
            for &v in list {
                debug_assert_eq!(self.status[v as usize], code);
            }
        }
    }

    /// Layer adjacency: every layer-k voxel has a 6-neighbor one layer closer
    /// to the zero set. Freshly moved voxels may lag one update cycle, so
    /// this is asserted on settled fronts (initialization and convergence).
    #[cfg(debug_assertions)]
    pub(crate) fn check_layer_adjacency(&self) {
        let has_nb = |v: u32, want: i8| -> bool {
            let (x, y, z) = self.dims.pos(v as usize);
            NEIGHBORS_6.iter().any(|&(dx, dy, dz)| {
                let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                self.dims.contains(ax, ay, az)
                    && self.status[self.dims.idx(ax as usize, ay as usize, az as usize)] == want
            })
        };
        for &v in &self.lp1 {
            debug_assert!(has_nb(v, 0), "+1 voxel without zero-layer neighbor");
        }
        for &v in &self.ln1 {
            debug_assert!(has_nb(v, 0), "-1 voxel without zero-layer neighbor");
        }
        for &v in &self.lp2 {
            debug_assert!(has_nb(v, 1), "+2 voxel without +1 neighbor");
        }
        for &v in &self.ln2 {
            debug_assert!(has_nb(v, -1), "-2 voxel without -1 neighbor");
        }
    }
}

/// Builds the signed-distance front for one label of a segmentation.
///
/// `phi` is the exact Euclidean distance to the region boundary, positive
/// inside, offset half a voxel so the discrete interface sits between the
/// two boundary voxel shells. The working subvolume is the region's bounding
/// box dilated by `psi + 3` voxels, clamped to the volume.
pub fn init_signed_distance(
    labels: &LabelVolume,
    label: u32,
    params: &LocalizationParams,
) -> Result<LevelSetFront> {
    let gdims = labels.dims();
    let region = labels.region_voxels(label);
    if region.is_empty() {
        return Err(Error::EmptyRegion { label });
    }
    let pad = params.psi.ceil() as usize + 3;
    let (mut x0, mut y0, mut z0) = (usize::MAX, usize::MAX, usize::MAX);
    let (mut x1, mut y1, mut z1) = (0usize, 0usize, 0usize);
    for &i in &region {
        let (x, y, z) = gdims.pos(i);
        x0 = x0.min(x);
        y0 = y0.min(y);
        z0 = z0.min(z);
        x1 = x1.max(x);
        y1 = y1.max(y);
        z1 = z1.max(z);
    }
    let ox = x0.saturating_sub(pad);
    let oy = y0.saturating_sub(pad);
    let oz = z0.saturating_sub(pad);
    let ex = (x1 + pad + 1).min(gdims.nx);
    let ey = (y1 + pad + 1).min(gdims.ny);
    let ez = (z1 + pad + 1).min(gdims.nz);
    let dims = Dims::new(ex - ox, ey - oy, ez - oz);

    let mut inside = vec![false; dims.len()];
    for &i in &region {
        let (x, y, z) = gdims.pos(i);
        inside[dims.idx(x - ox, y - oy, z - oz)] = true;
    }
    let outside: Vec<bool> = inside.iter().map(|&b| !b).collect();
    if outside.iter().all(|&b| !b) {
        return Err(Error::InvalidParameter(format!(
            "region {label} fills its working subvolume; nothing to refine"
        )));
    }

    // Distance to the opposite set, from both sides.
    let d_to_outside = edt_squared_to_set(&outside, dims);
    let d_to_inside = edt_squared_to_set(&inside, dims);
    let phi: Vec<f64> = (0..dims.len())
        .map(|i| {
            if inside[i] {
                d_to_outside[i].sqrt() - 0.5
            } else {
                0.5 - d_to_inside[i].sqrt()
            }
        })
        .collect();

    let mut front = LevelSetFront {
        label,
        origin: (ox, oy, oz),
        dims,
        global_dims: gdims,
        status: vec![0; dims.len()],
        phi,
        lz: Vec::new(),
        lp1: Vec::new(),
        ln1: Vec::new(),
        lp2: Vec::new(),
        ln2: Vec::new(),
        far_inside: 0,
        converged: false,
        calm_streak: 0,
        iterations: 0,
    };
    front.rebuild_layers();
    #[cfg(debug_assertions)]
    {
        front.check_invariants();
        front.check_layer_adjacency();
    }
    Ok(front)
}

/// Ball offsets sorted by radius; shared across zero-layer points, truncated
/// per point at its local radius.
pub(super) struct BallOffsets {
    /// (dx, dy, dz, radius), radius ascending then raster order.
    offsets: Vec<(i64, i64, i64, f64)>,
}

impl BallOffsets {
    pub(super) fn new(psi: f64) -> Self {
        let r = psi.ceil() as i64;
        let mut offsets = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d = ((dx * dx + dy * dy + dz * dz) as f64).sqrt();
                    if d < psi {
                        offsets.push((dx, dy, dz, d));
                    }
                }
            }
        }
        offsets.sort_by(|a, b| a.3.total_cmp(&b.3).then_with(|| {
            (a.2, a.1, a.0).cmp(&(b.2, b.1, b.0))
        }));
        BallOffsets { offsets }
    }
}

/// One evolution step bundle: data force, curvature, CFL time step, layer
/// update. Returns the number of voxels that changed layer.
fn sfm_iteration(
    front: &mut LevelSetFront,
    image: &[f64],
    psi_map: &[f64],
    ball: &BallOffsets,
    params: &LocalizationParams,
) -> usize {
    let dims = front.dims;
    let eps = params.epsilon;

    // Data force on the active layer.
    let mut force = vec![0.0; front.lz.len()];
    {
        for (slot, &v) in force.iter_mut().zip(&front.lz) {
            let idx = v as usize;
            let (x, y, z) = dims.pos(idx);
            let psi_here = psi_map[idx];

            let mut w_in = 0.0;
            let mut s_in = 0.0;
            let mut w_out = 0.0;
            let mut s_out = 0.0;
            for &(dx, dy, dz, r) in &ball.offsets {
                if r >= psi_here {
                    break;
                }
                let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if !dims.contains(ax, ay, az) {
                    continue;
                }
                let j = dims.idx(ax as usize, ay as usize, az as usize);
                let h = smoothed_heaviside(front.phi[j], eps);
                let i_val = image[j];
                w_in += h;
                s_in += h * i_val;
                w_out += 1.0 - h;
                s_out += (1.0 - h) * i_val;
            }
            if w_in < 1e-12 || w_out < 1e-12 {
                continue;
            }
            let u = s_in / w_in;
            let v_mean = s_out / w_out;

            let mut f = 0.0;
            for &(dx, dy, dz, r) in &ball.offsets {
                if r >= psi_here {
                    break;
                }
                let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                if !dims.contains(ax, ay, az) {
                    continue;
                }
                let j = dims.idx(ax as usize, ay as usize, az as usize);
                if front.phi[j].abs() > eps {
                    continue;
                }
                let d = smoothed_dirac(front.phi[j], eps);
                let i_val = image[j];
                f += d * ((i_val - u) * (i_val - u) - (i_val - v_mean) * (i_val - v_mean));
            }
            *slot = f;
        }
    }

    // Normalize the data force to unit peak so the arc-length weight and the
    // CFL bound are scale-free, then add curvature regularization.
    let fmax = force.iter().fold(0.0f64, |m, &f| m.max(f.abs()));
    let mut total = vec![0.0; front.lz.len()];
    for (i, &v) in front.lz.iter().enumerate() {
        let data = if fmax > 1e-12 { -force[i] / fmax } else { 0.0 };
        let curv = if params.lambda > 0.0 {
            params.lambda * mean_curvature(&front.phi, dims, v as usize)
        } else {
            0.0
        };
        total[i] = data + curv;
    }

    let tmax = total.iter().fold(0.0f64, |m, &f| m.max(f.abs()));
    if tmax < 1e-12 {
        return 0;
    }
    let dt = 0.45 / tmax;
    for (i, &v) in front.lz.iter().enumerate() {
        front.phi[v as usize] += dt * total[i];
    }

    update_layers(front)
}

fn mean_curvature(phi: &[f64], dims: Dims, idx: usize) -> f64 {
    let (x, y, z) = dims.pos(idx);
    if x == 0
        || y == 0
        || z == 0
        || x + 1 >= dims.nx
        || y + 1 >= dims.ny
        || z + 1 >= dims.nz
    {
        return 0.0;
    }
    let p = |dx: i64, dy: i64, dz: i64| -> f64 {
        phi[dims.idx(
            (x as i64 + dx) as usize,
            (y as i64 + dy) as usize,
            (z as i64 + dz) as usize,
        )]
    };
    let c = p(0, 0, 0);
    let px = (p(1, 0, 0) - p(-1, 0, 0)) / 2.0;
    let py = (p(0, 1, 0) - p(0, -1, 0)) / 2.0;
    let pz = (p(0, 0, 1) - p(0, 0, -1)) / 2.0;
    let pxx = p(1, 0, 0) - 2.0 * c + p(-1, 0, 0);
    let pyy = p(0, 1, 0) - 2.0 * c + p(0, -1, 0);
    let pzz = p(0, 0, 1) - 2.0 * c + p(0, 0, -1);
    let pxy = (p(1, 1, 0) - p(1, -1, 0) - p(-1, 1, 0) + p(-1, -1, 0)) / 4.0;
    let pxz = (p(1, 0, 1) - p(1, 0, -1) - p(-1, 0, 1) + p(-1, 0, -1)) / 4.0;
    let pyz = (p(0, 1, 1) - p(0, 1, -1) - p(0, -1, 1) + p(0, -1, -1)) / 4.0;
    let g2 = px * px + py * py + pz * pz;
    if g2 < 1e-12 {
        return 0.0;
    }
    let num = pxx * (py * py + pz * pz) + pyy * (px * px + pz * pz)
        + pzz * (px * px + py * py)
        - 2.0 * (px * py * pxy + px * pz * pxz + py * pz * pyz);
    num / g2.powf(1.5)
}

/// Whitaker layer maintenance after the active layer moved. Scans each list
/// against the pre-move statuses, stages transfers, then applies them and
/// recruits fresh band voxels from the far regions.
fn update_layers(front: &mut LevelSetFront) -> usize {
    let dims = front.dims;

    let mut sz: Vec<u32> = Vec::new();
    let mut sp1: Vec<u32> = Vec::new();
    let mut sn1: Vec<u32> = Vec::new();
    let mut sp2: Vec<u32> = Vec::new();
    let mut sn2: Vec<u32> = Vec::new();

    // Active layer: promote/demote voxels pushed past +-0.5.
    let phi_ref = &front.phi;
    front.lz.retain(|&v| {
        let p = phi_ref[v as usize];
        if p > 0.5 {
            sp1.push(v);
            false
        } else if p < -0.5 {
            sn1.push(v);
            false
        } else {
            true
        }
    });

    // Neighbor extreme over voxels currently flagged as the given layer.
    let neighbor_extreme = |phi: &[f64], status: &[i8], v: u32, want: i8, take_min: bool| -> Option<f64> {
        let (x, y, z) = dims.pos(v as usize);
        let mut best: Option<f64> = None;
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let j = dims.idx(ax as usize, ay as usize, az as usize);
            if status[j] != want {
                continue;
            }
            let p = phi[j];
            best = Some(match best {
                None => p,
                Some(b) => {
                    if take_min {
                        b.min(p)
                    } else {
                        b.max(p)
                    }
                }
            });
        }
        best
    };

    // First inside layer.
    {
        let phi = &mut front.phi;
        let status = &front.status;
        front.lp1.retain(|&v| {
            match neighbor_extreme(phi, status, v, 0, true) {
                None => {
                    sp2.push(v);
                    false
                }
                Some(m) => {
                    let p = m + 1.0;
                    phi[v as usize] = p;
                    if p <= 0.5 {
                        sz.push(v);
                        false
                    } else if p > 1.5 {
                        sp2.push(v);
                        false
                    } else {
                        true
                    }
                }
            }
        });
    }
    // First outside layer.
    {
        let phi = &mut front.phi;
        let status = &front.status;
        front.ln1.retain(|&v| {
            match neighbor_extreme(phi, status, v, 0, false) {
                None => {
                    sn2.push(v);
                    false
                }
                Some(m) => {
                    let p = m - 1.0;
                    phi[v as usize] = p;
                    if p >= -0.5 {
                        sz.push(v);
                        false
                    } else if p < -1.5 {
                        sn2.push(v);
                        false
                    } else {
                        true
                    }
                }
            }
        });
    }
    // Second inside layer.
    let mut to_far_in: Vec<u32> = Vec::new();
    {
        let phi = &mut front.phi;
        let status = &front.status;
        front.lp2.retain(|&v| {
            match neighbor_extreme(phi, status, v, 1, true) {
                None => {
                    to_far_in.push(v);
                    false
                }
                Some(m) => {
                    let p = m + 1.0;
                    phi[v as usize] = p;
                    if p <= 1.5 {
                        sp1.push(v);
                        false
                    } else if p > 2.5 {
                        to_far_in.push(v);
                        false
                    } else {
                        true
                    }
                }
            }
        });
    }
    // Second outside layer.
    let mut to_far_out: Vec<u32> = Vec::new();
    {
        let phi = &mut front.phi;
        let status = &front.status;
        front.ln2.retain(|&v| {
            match neighbor_extreme(phi, status, v, -1, false) {
                None => {
                    to_far_out.push(v);
                    false
                }
                Some(m) => {
                    let p = m - 1.0;
                    phi[v as usize] = p;
                    if p >= -1.5 {
                        sn1.push(v);
                        false
                    } else if p < -2.5 {
                        to_far_out.push(v);
                        false
                    } else {
                        true
                    }
                }
            }
        });
    }

    let moved = sz.len() + sp1.len() + sn1.len();

    // Apply staged moves; order fixed for determinism.
    for &v in &to_far_in {
        front.status[v as usize] = 3;
        front.phi[v as usize] = FAR_INSIDE;
        front.far_inside += 1;
    }
    for &v in &to_far_out {
        front.status[v as usize] = -3;
        front.phi[v as usize] = FAR_OUTSIDE;
    }
    for &v in &sz {
        front.status[v as usize] = 0;
        front.lz.push(v);
    }
    for &v in &sp1 {
        front.status[v as usize] = 1;
        front.lp1.push(v);
    }
    for &v in &sn1 {
        front.status[v as usize] = -1;
        front.ln1.push(v);
    }
    // Recruit far voxels uncovered next to the refreshed +-1 layers.
    for &v in &sp1 {
        let (x, y, z) = dims.pos(v as usize);
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let j = dims.idx(ax as usize, ay as usize, az as usize);
            if front.status[j] == 3 {
                front.status[j] = 2;
                front.phi[j] = front.phi[v as usize] + 1.0;
                front.lp2.push(j as u32);
                front.far_inside -= 1;
            }
        }
    }
    for &v in &sn1 {
        let (x, y, z) = dims.pos(v as usize);
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let j = dims.idx(ax as usize, ay as usize, az as usize);
            if front.status[j] == -3 {
                front.status[j] = -2;
                front.phi[j] = front.phi[v as usize] - 1.0;
                front.ln2.push(j as u32);
            }
        }
    }
    for &v in &sp2 {
        front.status[v as usize] = 2;
        front.lp2.push(v);
    }
    for &v in &sn2 {
        front.status[v as usize] = -2;
        front.ln2.push(v);
    }

    moved
}

/// Evolves the front against a fixed snapshot of the neighboring labels.
///
/// Runs at most `iters` update cycles, stopping early once fewer than
/// `convergence_frac` of the zero-layer voxels change layer for five
/// consecutive iterations. The localization radius shrinks to the distance
/// of the nearest other-label region, so the local statistics never reach
/// into a neighboring nucleus. Returns `true` once converged; a vanished
/// interior is reported as a collapsed contour.
pub fn evolve(
    front: &mut LevelSetFront,
    v: &Volume3D,
    params: &LocalizationParams,
    neighbors: &LabelVolume,
    iters: usize,
) -> Result<bool> {
    params.validate()?;
    if front.converged {
        return Ok(true);
    }
    let dims = front.dims;

    // Subvolume image copy.
    let mut image = vec![0.0; dims.len()];
    for i in 0..dims.len() {
        image[i] = v.at(front.to_global(i));
    }

    // Localization radii: distance to the nearest other evolving front.
    let mut others = vec![false; dims.len()];
    let mut any_other = false;
    for i in 0..dims.len() {
        let l = neighbors.at(front.to_global(i));
        if l != 0 && l != front.label {
            others[i] = true;
            any_other = true;
        }
    }
    let psi_map: Vec<f64> = if any_other {
        edt_squared_to_set(&others, dims)
            .into_iter()
            .map(|d2| d2.sqrt().min(params.psi).max(1.0))
            .collect()
    } else {
        vec![params.psi; dims.len()]
    };

    let ball = BallOffsets::new(params.psi);

    for _ in 0..iters {
        if front.lz.is_empty() || !front.has_interior() {
            return Err(Error::ContourCollapsed {
                label: front.label,
            });
        }
        let active = front.lz.len().max(1);
        let moved = sfm_iteration(front, &image, &psi_map, &ball, params);
        front.iterations += 1;
        #[cfg(debug_assertions)]
        front.check_invariants();

        if (moved as f64) < params.convergence_frac * active as f64 {
            front.calm_streak += 1;
            if front.calm_streak >= 5 {
                front.converged = true;
                #[cfg(debug_assertions)]
                front.check_layer_adjacency();
                return Ok(true);
            }
        } else {
            front.calm_streak = 0;
        }
        if front.iterations >= params.max_iters {
            front.converged = true;
            return Ok(true);
        }
    }
    Ok(front.converged)
}
