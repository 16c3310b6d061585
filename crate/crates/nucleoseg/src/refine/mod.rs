//! Localized region-based level-set refinement of a watershed labeling.
//!
//! Each nucleus evolves its own sparse-field front inside a padded bounding
//! box, driven by the uniform-modeling force: at every surface point the
//! mean intensities of the local ball's interior and exterior compete, so
//! mislabeled background is discarded and jagged boundaries are smoothed
//! while leaving the rest of the volume untouched. Fronts evolve in rounds
//! against snapshots of each other and are re-arbitrated between rounds.

mod front;

pub use front::{evolve, init_signed_distance, LevelSetFront};

use crate::error::{Error, Result};
use crate::volume::{LabelVolume, Volume3D};
use rayon::prelude::*;

/// Local energy selection. Only the uniform-modeling energy is implemented;
/// the other localized energies of the literature are deliberate extension
/// points, not variants of this build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EnergyKind {
    #[default]
    UniformModeling,
}

/// Tunables of the localized level-set stage.
#[derive(Debug, Clone, Copy)]
pub struct LocalizationParams {
    /// Localization ball radius in voxels.
    pub psi: f64,
    /// Arc-length penalty weight on the curvature term.
    pub lambda: f64,
    /// Heaviside/Dirac smoothing width in voxels.
    pub epsilon: f64,
    pub energy: EnergyKind,
    /// Total update-cycle budget per front.
    pub max_iters: usize,
    /// A front is converged once fewer than this fraction of its zero-layer
    /// voxels change layer for five consecutive iterations.
    pub convergence_frac: f64,
}

impl Default for LocalizationParams {
    fn default() -> Self {
        LocalizationParams {
            psi: 9.0,
            lambda: 0.5,
            epsilon: 1.5,
            energy: EnergyKind::UniformModeling,
            max_iters: 200,
            convergence_frac: 0.001,
        }
    }
}

impl LocalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi >= 1.0) {
            return Err(Error::InvalidParameter("psi must be >= 1 voxel".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter("lambda must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidParameter("epsilon must be > 0".into()));
        }
        if !(self.convergence_frac >= 0.0) {
            return Err(Error::InvalidParameter(
                "convergence_frac must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Smoothed Heaviside: 1 above `eps`, 0 below `-eps`, sine-eased between.
#[inline]
pub fn smoothed_heaviside(phi: f64, eps: f64) -> f64 {
    if phi > eps {
        1.0
    } else if phi < -eps {
        0.0
    } else {
        0.5 * (1.0 + phi / eps + (1.0 / std::f64::consts::PI) * (std::f64::consts::PI * phi / eps).sin())
    }
}

/// Smoothed Dirac delta: the analytic derivative of [`smoothed_heaviside`],
/// a raised cosine of unit integral supported on `[-eps, eps]`.
#[inline]
pub fn smoothed_dirac(phi: f64, eps: f64) -> f64 {
    if phi.abs() > eps {
        0.0
    } else {
        (1.0 / (2.0 * eps)) * (1.0 + (std::f64::consts::PI * phi / eps).cos())
    }
}

/// Refinement output: the re-arbitrated labeling plus any fronts that
/// collapsed and kept their pre-refinement region.
#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub labels: LabelVolume,
    pub collapsed: Vec<u32>,
}

/// Per-round iteration chunk between neighbor-snapshot refreshes.
const ROUND_ITERS: usize = 10;

/// Refines every label of a watershed output.
///
/// Fronts evolve in parallel in rounds of ten iterations against the label
/// snapshot taken at the round start, then claims are re-arbitrated: a voxel
/// claimed by several fronts goes to the one with the larger `phi` (lower
/// label on exact ties), and voxels abandoned by every front become
/// background. A collapsed front keeps its input region and is reported, not
/// fatal. `max_iters == 0` returns the input unchanged.
pub fn refine_all(
    labels: &LabelVolume,
    v: &Volume3D,
    params: &LocalizationParams,
) -> Result<RefineOutcome> {
    params.validate()?;
    if labels.dims() != v.dims() {
        return Err(Error::DimensionMismatch {
            left: labels.dims().as_tuple(),
            right: v.dims().as_tuple(),
        });
    }
    if params.max_iters == 0 || labels.num_labels() == 0 {
        return Ok(RefineOutcome {
            labels: labels.clone(),
            collapsed: Vec::new(),
        });
    }

    let dims = labels.dims();
    let k = labels.num_labels();
    let mut fronts: Vec<LevelSetFront> = (1..=k)
        .map(|label| init_signed_distance(labels, label, params))
        .collect::<Result<_>>()?;
    let initial_phi: Vec<Vec<f64>> = fronts.iter().map(|f| f.phi_snapshot()).collect();
    let mut collapsed: Vec<u32> = Vec::new();

    let mut snapshot = labels.clone();
    while fronts.iter().any(|f| !f.is_converged()) {
        let results: Vec<Option<Error>> = fronts
            .par_iter_mut()
            .map(|front| {
                if front.is_converged() {
                    return None;
                }
                match evolve(front, v, params, &snapshot, ROUND_ITERS) {
                    Ok(_) => None,
                    Err(e) => Some(e),
                }
            })
            .collect();
        for (front, err) in fronts.iter_mut().zip(results) {
            match err {
                None => {}
                Some(Error::ContourCollapsed { label }) => {
                    // Keep the pre-refinement region; warn, don't fail.
                    front.restore_phi(initial_phi[(label - 1) as usize].clone());
                    collapsed.push(label);
                    eprintln!("warning: contour collapsed for label {label}; keeping watershed region");
                }
                Some(e) => return Err(e),
            }
        }
        snapshot = arbitrate(&fronts, dims, k);
    }

    collapsed.sort_unstable();
    Ok(RefineOutcome {
        labels: snapshot,
        collapsed,
    })
}

/// Resolves overlapping claims: larger `phi` wins, lower label on ties.
fn arbitrate(fronts: &[LevelSetFront], dims: crate::volume::Dims, k: u32) -> LabelVolume {
    let mut best_phi = vec![f64::NEG_INFINITY; dims.len()];
    let mut labels = vec![0u32; dims.len()];
    for front in fronts {
        for (g, phi) in front.claims() {
            if phi > best_phi[g] {
                best_phi[g] = phi;
                labels[g] = front.label();
            }
        }
    }
    LabelVolume::new_unchecked(dims, labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;
    use crate::volume::Dims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heaviside_branch_values() {
        let eps = 1.5;
        assert_eq!(smoothed_heaviside(0.0, eps), 0.5);
        assert_eq!(smoothed_heaviside(2.0 * eps, eps), 1.0);
        assert_eq!(smoothed_heaviside(-2.0 * eps, eps), 0.0);
        // phi = eps/2: 0.75 + 1/(2 pi)
        let expected = 0.75 + 1.0 / (2.0 * std::f64::consts::PI);
        assert!((smoothed_heaviside(eps / 2.0, eps) - expected).abs() < 1e-12);
        assert!((expected - 0.909_154_943_091_895_2).abs() < 1e-12);
    }

    #[test]
    fn heaviside_is_monotone_and_complements_sum_to_one() {
        let eps = 1.5;
        let mut prev = -1.0;
        let mut phi = -3.0;
        while phi <= 3.0 {
            let h = smoothed_heaviside(phi, eps);
            assert!(h >= prev);
            assert!((h + (1.0 - h)) == 1.0);
            prev = h;
            phi += 0.01;
        }
    }

    #[test]
    fn dirac_values_and_support() {
        let eps = 1.5;
        assert!((smoothed_dirac(0.0, eps) - 1.0 / eps).abs() < 1e-12);
        assert_eq!(smoothed_dirac(eps + 0.01, eps), 0.0);
        assert_eq!(smoothed_dirac(-eps - 5.0, eps), 0.0);
    }

    #[test]
    fn dirac_integrates_to_one() {
        let eps = 1.5;
        let step = 1e-4;
        let mut sum = 0.0;
        let mut phi = -eps;
        while phi < eps {
            sum += smoothed_dirac(phi + step / 2.0, eps) * step;
            phi += step;
        }
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dirac_matches_numerical_heaviside_derivative() {
        let eps = 1.5;
        let h = 1e-3;
        let mut phi = -2.0;
        while phi <= 2.0 {
            let numeric =
                (smoothed_heaviside(phi + h, eps) - smoothed_heaviside(phi - h, eps)) / (2.0 * h);
            assert!(
                (numeric - smoothed_dirac(phi, eps)).abs() < 1e-4,
                "derivative mismatch at {phi}"
            );
            phi += h;
        }
    }

    fn ball_labels(dims: Dims, center: (f64, f64, f64), radius: f64, label: u32) -> Vec<u32> {
        let mut l = vec![0u32; dims.len()];
        for z in 0..dims.nz {
            for y in 0..dims.ny {
                for x in 0..dims.nx {
                    let dx = x as f64 - center.0;
                    let dy = y as f64 - center.1;
                    let dz = z as f64 - center.2;
                    if dx * dx + dy * dy + dz * dz <= radius * radius {
                        l[dims.idx(x, y, z)] = label;
                    }
                }
            }
        }
        l
    }

    #[test]
    fn init_single_voxel_region() {
        let dims = Dims::new(16, 16, 16);
        let mut l = vec![0u32; dims.len()];
        l[dims.idx(8, 8, 8)] = 1;
        let labels = LabelVolume::from_raw(dims, l).unwrap();
        let front = init_signed_distance(&labels, 1, &LocalizationParams::default()).unwrap();
        let sub = front.subvolume_dims();
        let o = front.origin();
        let at = |x: usize, y: usize, z: usize| {
            front.phi_at(sub.idx(x - o.0, y - o.1, z - o.2))
        };
        assert!(at(8, 8, 8) > 0.0);
        assert!(at(7, 8, 8) < 0.0 && at(9, 8, 8) < 0.0);
        // Zero crossing within one voxel of the region.
        assert!(at(8, 8, 8) <= 1.0);
    }

    #[test]
    fn init_ball_center_distance_and_layer_bands() {
        let dims = Dims::new(32, 32, 32);
        let labels = LabelVolume::from_raw(
            dims,
            ball_labels(dims, (16.0, 16.0, 16.0), 5.0, 1),
        )
        .unwrap();
        let front = init_signed_distance(&labels, 1, &LocalizationParams::default()).unwrap();
        let sub = front.subvolume_dims();
        let o = front.origin();
        let center = front.phi_at(sub.idx(16 - o.0, 16 - o.1, 16 - o.2));
        assert!(
            (center - 5.0).abs() <= 0.5,
            "discrete EDT at ball center: {center}"
        );
        // +-1 layer magnitudes lie in (0.5, 1.5].
        for i in 0..sub.len() {
            let p = front.phi_at(i);
            if p > 0.5 && p <= 1.5 || p < -0.5 && p >= -1.5 {
                assert!(p.abs() > 0.5 && p.abs() <= 1.5);
            }
        }
    }

    #[test]
    fn init_empty_region_is_error() {
        let dims = Dims::new(8, 8, 8);
        let labels = LabelVolume::zeros(dims);
        assert!(matches!(
            init_signed_distance(&labels, 1, &LocalizationParams::default()),
            Err(Error::EmptyRegion { label: 1 })
        ));
    }

    #[test]
    fn constant_image_with_zero_lambda_is_stationary() {
        let dims = Dims::new(24, 24, 24);
        let labels = LabelVolume::from_raw(
            dims,
            ball_labels(dims, (12.0, 12.0, 12.0), 5.0, 1),
        )
        .unwrap();
        let v = Volume3D::from_elem(dims, 0.5);
        let params = LocalizationParams {
            lambda: 0.0,
            max_iters: 30,
            ..Default::default()
        };
        let mut front = init_signed_distance(&labels, 1, &params).unwrap();
        let before: Vec<usize> = front.claims().map(|(g, _)| g).collect();
        let converged = evolve(&mut front, &v, &params, &labels, 30).unwrap();
        assert!(converged);
        let after: Vec<usize> = front.claims().map(|(g, _)| g).collect();
        assert_eq!(before, after, "zero-force front must not move");
    }

    fn cube_labels(dims: Dims, lo: usize, hi: usize) -> LabelVolume {
        let mut l = vec![0u32; dims.len()];
        for z in lo..hi {
            for y in lo..hi {
                for x in lo..hi {
                    l[dims.idx(x, y, z)] = 1;
                }
            }
        }
        LabelVolume::from_raw(dims, l).unwrap()
    }

    #[test]
    fn curvature_flow_shrinks_cube_surface() {
        let dims = Dims::new(36, 36, 36);
        let labels = cube_labels(dims, 10, 26);
        let v = Volume3D::from_elem(dims, 0.5);
        let params = LocalizationParams {
            lambda: 1.0,
            convergence_frac: 0.0, // run the full budget
            max_iters: 50,
            ..Default::default()
        };
        let mut front = init_signed_distance(&labels, 1, &params).unwrap();
        let area_before = front.zero_layer_len();
        let volume_before = front.claims().count();
        for _ in 0..50 {
            evolve(&mut front, &v, &params, &labels, 1).unwrap();
        }
        let area_after = front.zero_layer_len();
        let volume_after = front.claims().count();
        assert!(
            area_after < area_before,
            "curvature flow must shrink surface area: {area_before} -> {area_after}"
        );
        assert!(volume_after < volume_before);
    }

    #[test]
    fn binary_ball_image_converges_to_true_surface() {
        let dims = Dims::new(36, 36, 36);
        let c = (18.0, 18.0, 18.0);
        let image_data: Vec<f64> = ball_labels(dims, c, 8.0, 1)
            .into_iter()
            .map(|l| if l == 1 { 1.0 } else { 0.0 })
            .collect();
        let v = Volume3D::new(dims, [1.0; 3], image_data).unwrap();
        // Initialize two voxels too wide.
        let labels = LabelVolume::from_raw(dims, ball_labels(dims, c, 10.0, 1)).unwrap();
        let params = LocalizationParams {
            max_iters: 200,
            ..Default::default()
        };
        let mut front = init_signed_distance(&labels, 1, &params).unwrap();
        evolve(&mut front, &v, &params, &labels, 200).unwrap();
        // Claimed volume should match the true ball closely.
        let truth = LabelVolume::from_raw(dims, ball_labels(dims, c, 8.0, 1)).unwrap();
        let claimed: Vec<usize> = {
            let mut c: Vec<usize> = front.claims().map(|(g, _)| g).collect();
            c.sort_unstable();
            c
        };
        let d = dice(&claimed, &truth.region_voxels(1)).unwrap();
        assert!(d > 0.93, "dice vs true ball after refinement: {d}");
        // Every claimed voxel lies within one voxel of the true ball.
        let sub = front.subvolume_dims();
        let o = front.origin();
        for i in 0..sub.len() {
            if front.phi_at(i).abs() <= 0.5 {
                let (x, y, z) = sub.pos(i);
                let dx = (x + o.0) as f64 - c.0;
                let dy = (y + o.1) as f64 - c.1;
                let dz = (z + o.2) as f64 - c.2;
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                assert!(
                    (r - 8.0).abs() <= 1.0 + 0.5,
                    "zero-layer voxel at radius {r} (expected 8 +- 1)"
                );
            }
        }
    }

    #[test]
    fn zero_iterations_is_identity() {
        let dims = Dims::new(20, 20, 20);
        let labels = cube_labels(dims, 5, 15);
        let v = Volume3D::from_elem(dims, 0.5);
        let params = LocalizationParams {
            max_iters: 0,
            ..Default::default()
        };
        let out = refine_all(&labels, &v, &params).unwrap();
        assert_eq!(out.labels.labels(), labels.labels());
        assert!(out.collapsed.is_empty());
    }

    #[test]
    fn jagged_sphere_dice_improves() {
        let dims = Dims::new(36, 36, 36);
        let c = (18.0, 18.0, 18.0);
        let truth = LabelVolume::from_raw(dims, ball_labels(dims, c, 8.0, 1)).unwrap();
        // Clean bright ball image.
        let image_data: Vec<f64> = truth
            .labels()
            .iter()
            .map(|&l| if l == 1 { 0.8 } else { 0.1 })
            .collect();
        let v = Volume3D::new(dims, [1.0; 3], image_data).unwrap();
        // Jagged input labeling: the ball plus salt noise on its outskirts.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut jagged = ball_labels(dims, c, 8.0, 1);
        for i in 0..dims.len() {
            let (x, y, z) = dims.pos(i);
            let dx = x as f64 - c.0;
            let dy = y as f64 - c.1;
            let dz = z as f64 - c.2;
            let r = (dx * dx + dy * dy + dz * dz).sqrt();
            if r > 8.0 && r < 11.0 && rng.gen::<f64>() < 0.15 {
                jagged[i] = 1;
            }
        }
        let jagged = LabelVolume::from_raw(dims, jagged).unwrap();
        let params = LocalizationParams::default();
        let out = refine_all(&jagged, &v, &params).unwrap();
        let truth_region = truth.region_voxels(1);
        let before = dice(&jagged.region_voxels(1), &truth_region).unwrap();
        let after = dice(&out.labels.region_voxels(1), &truth_region).unwrap();
        assert!(
            after > before,
            "refinement must improve dice: {before} -> {after}"
        );
    }

    #[test]
    fn adjacent_nuclei_stay_disjoint() {
        let dims = Dims::new(48, 28, 28);
        let c1 = (15.0, 14.0, 14.0);
        let c2 = (32.0, 14.0, 14.0);
        let mut labels = ball_labels(dims, c1, 7.0, 1);
        for (i, l) in ball_labels(dims, c2, 7.0, 2).into_iter().enumerate() {
            if l != 0 && labels[i] == 0 {
                labels[i] = l;
            }
        }
        let image_data: Vec<f64> = labels
            .iter()
            .map(|&l| if l != 0 { 0.8 } else { 0.1 })
            .collect();
        let labels = LabelVolume::from_raw(dims, labels).unwrap();
        let v = Volume3D::new(dims, [1.0; 3], image_data).unwrap();
        let out = refine_all(&labels, &v, &LocalizationParams::default()).unwrap();
        // Arbitration guarantees disjoint regions; both labels must survive.
        assert!(out.labels.region_voxels(1).len() > 100);
        assert!(out.labels.region_voxels(2).len() > 100);
        assert_eq!(out.labels.num_labels(), 2);
    }
}
