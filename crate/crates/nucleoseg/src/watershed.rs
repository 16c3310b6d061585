//! Marker-controlled 3-D watershed by priority flood.
//!
//! The grown seed regions are imposed as minima on the negated response
//! image and flooded outward over the foreground in topography order. Every
//! foreground voxel receives the label of the flood that reaches it first;
//! ties go to the earlier-inserted front, which makes the output
//! bit-reproducible across runs and thread counts. There is no separate
//! watershed-line voxel class.

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelVolume, Volume3D, NEIGHBORS_6};
use std::cmp::Reverse;
use std::collections::BinaryHeap;

#[derive(PartialEq)]
struct FloodEntry {
    height: f64,
    counter: u64,
    raster: usize,
    label: u32,
}

impl Eq for FloodEntry {}

impl Ord for FloodEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.height
            .total_cmp(&other.height)
            .then_with(|| self.counter.cmp(&other.counter))
    }
}

impl PartialOrd for FloodEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Floods the topography `T = -response` from the marker regions.
///
/// Markers enter the queue at negative infinity (imposed minima) in raster
/// order; flooding is 6-connected and restricted to the mask foreground.
/// Output labels are the marker labels; background stays 0.
pub fn marker_watershed(
    response: &Volume3D,
    grown: &LabelVolume,
    mask: &BinaryMask,
) -> Result<LabelVolume> {
    let dims = response.dims();
    if grown.dims() != dims || mask.dims() != dims {
        return Err(Error::DimensionMismatch {
            left: dims.as_tuple(),
            right: grown.dims().as_tuple(),
        });
    }
    if grown.num_labels() == 0 || grown.labels().iter().all(|&l| l == 0) {
        return Err(Error::EmptyMarkerSet);
    }

    let mut labels = vec![0u32; dims.len()];
    let mut heap: BinaryHeap<Reverse<FloodEntry>> = BinaryHeap::new();
    let mut counter = 0u64;
    for i in 0..dims.len() {
        let l = grown.at(i);
        if l != 0 {
            labels[i] = l;
            heap.push(Reverse(FloodEntry {
                height: f64::NEG_INFINITY,
                counter,
                raster: i,
                label: l,
            }));
            counter += 1;
        }
    }

    while let Some(Reverse(e)) = heap.pop() {
        let (x, y, z) = dims.pos(e.raster);
        for &(dx, dy, dz) in &NEIGHBORS_6 {
            let (ax, ay, az) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
            if !dims.contains(ax, ay, az) {
                continue;
            }
            let n = dims.idx(ax as usize, ay as usize, az as usize);
            if labels[n] == 0 && mask.at(n) {
                labels[n] = e.label;
                heap.push(Reverse(FloodEntry {
                    height: -response.at(n),
                    counter,
                    raster: n,
                    label: e.label,
                }));
                counter += 1;
            }
        }
    }

    Ok(LabelVolume::new_unchecked(
        dims,
        labels,
        grown.num_labels(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{connected_components, Connectivity, Dims};

    fn line(values: &[f64]) -> Volume3D {
        Volume3D::new(Dims::new(values.len(), 1, 1), [1.0; 3], values.to_vec()).unwrap()
    }

    fn markers(dims: Dims, assignments: &[(usize, u32)]) -> LabelVolume {
        let mut l = vec![0u32; dims.len()];
        let mut k = 0;
        for &(i, lab) in assignments {
            l[i] = lab;
            k = k.max(lab);
        }
        LabelVolume::new_unchecked(dims, l, k)
    }

    #[test]
    fn single_marker_floods_component() {
        let r = line(&[0.2, 0.5, 0.9, 0.4, 0.1]);
        let dims = r.dims();
        let mask = BinaryMask::filled(dims, true);
        let grown = markers(dims, &[(2, 1)]);
        let out = marker_watershed(&r, &grown, &mask).unwrap();
        assert!(out.labels().iter().all(|&l| l == 1));
    }

    #[test]
    fn grown_profile_example_is_fully_prelabeled() {
        let r = line(&[0.0, 0.4, 0.9, 0.4, 0.0]);
        let dims = r.dims();
        let mask = BinaryMask::filled(dims, true);
        let grown = markers(dims, &[(0, 1), (1, 1), (2, 1), (3, 2), (4, 2)]);
        let out = marker_watershed(&r, &grown, &mask).unwrap();
        assert_eq!(out.labels(), &[1, 1, 1, 2, 2]);
    }

    #[test]
    fn leftover_crest_voxel_goes_to_earlier_front() {
        let r = line(&[0.0, 0.4, 0.9, 0.4, 0.0]);
        let dims = r.dims();
        let mask = BinaryMask::filled(dims, true);
        // Crest voxel 2 is unclaimed; both sides reach it at equal priority.
        let grown = markers(dims, &[(0, 1), (1, 1), (3, 2), (4, 2)]);
        let out = marker_watershed(&r, &grown, &mask).unwrap();
        assert_eq!(out.labels(), &[1, 1, 1, 2, 2]);
    }

    #[test]
    fn floods_cannot_cross_background() {
        let r = line(&[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let dims = r.dims();
        let mut mask = BinaryMask::filled(dims, true);
        mask.data_mut()[3] = false;
        let grown = markers(dims, &[(1, 1), (5, 2)]);
        let out = marker_watershed(&r, &grown, &mask).unwrap();
        assert_eq!(out.labels(), &[1, 1, 1, 0, 2, 2, 2]);
    }

    #[test]
    fn empty_markers_rejected() {
        let r = line(&[0.1, 0.2]);
        let dims = r.dims();
        let mask = BinaryMask::filled(dims, true);
        let grown = LabelVolume::zeros(dims);
        assert!(matches!(
            marker_watershed(&r, &grown, &mask),
            Err(Error::EmptyMarkerSet)
        ));
    }

    #[test]
    fn output_partitions_foreground_with_connected_labels() {
        // Two bright blobs joined by a dim bridge; markers inside each blob.
        let dims = Dims::new(11, 5, 3);
        let mut data = vec![0.0; dims.len()];
        let mut mask = BinaryMask::filled(dims, false);
        for z in 0..3 {
            for y in 0..5 {
                for x in 0..11 {
                    let i = dims.idx(x, y, z);
                    mask.data_mut()[i] = true;
                    // Response ridge mid-volume at x == 5.
                    data[i] = 1.0 - ((x as f64 - 5.0).abs() / 5.0);
                }
            }
        }
        let r = Volume3D::new(dims, [1.0; 3], data).unwrap();
        let grown = markers(dims, &[(dims.idx(1, 2, 1), 1), (dims.idx(9, 2, 1), 2)]);
        let out = marker_watershed(&r, &grown, &mask).unwrap();
        // Partition of the foreground.
        for i in 0..dims.len() {
            assert!(out.at(i) >= 1 && out.at(i) <= 2);
        }
        // Each label region is 6-connected and contains its marker.
        for label in 1..=2u32 {
            let region_mask = BinaryMask::new(
                dims,
                out.labels().iter().map(|&l| l == label).collect(),
            )
            .unwrap();
            assert_eq!(
                connected_components(&region_mask, Connectivity::Six).num_labels(),
                1
            );
        }
        assert_eq!(out.at(dims.idx(1, 2, 1)), 1);
        assert_eq!(out.at(dims.idx(9, 2, 1)), 2);
    }

    #[test]
    fn marker_permutation_permutes_output() {
        let r = line(&[0.0, 0.3, 0.8, 0.3, 0.0, 0.4, 0.9, 0.4, 0.0]);
        let dims = r.dims();
        let mask = BinaryMask::filled(dims, true);
        let g1 = markers(dims, &[(0, 1), (4, 2), (8, 3)]);
        let g2 = markers(dims, &[(0, 2), (4, 3), (8, 1)]);
        let o1 = marker_watershed(&r, &g1, &mask).unwrap();
        let o2 = marker_watershed(&r, &g2, &mask).unwrap();
        let perm = [0u32, 2, 3, 1]; // label l in o1 appears as perm[l] in o2
        for i in 0..dims.len() {
            assert_eq!(perm[o1.at(i) as usize], o2.at(i));
        }
    }
}
