use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::preprocess::subvolume_starts;
use crate::tensor::{Real, Tensor};
use crate::volume::{voxel_count, Dims, Mask, Spacing, Volume};

/// Anything that maps a single-channel grid to per-voxel probabilities of the
/// same extent.
pub trait ProbabilityModel {
    fn probabilities(&self, dims: Dims, values: &[f32]) -> Result<Vec<f32>>;
}

impl ProbabilityModel for Network {
    fn probabilities(&self, dims: Dims, values: &[f32]) -> Result<Vec<f32>> {
        let input = Tensor::from_vec(
            &[1, 1, dims[0], dims[1], dims[2]],
            values.iter().map(|&v| v as Real).collect(),
        )?;
        Ok(self
            .forward_frozen(&input)?
            .values()
            .iter()
            .map(|&p| p as f32)
            .collect())
    }
}

/// Depth windows used to cover a volume at inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tiling {
    pub depth: usize,
    pub stride: usize,
}

/// Probabilities over the whole volume. Slices covered by several windows
/// receive the mean of the window outputs.
pub fn tiled_probabilities<M: ProbabilityModel + ?Sized>(
    model: &M,
    volume: &Volume,
    tiling: Tiling,
) -> Result<Vec<f32>> {
    if tiling.depth == 0 || tiling.stride == 0 || tiling.stride > tiling.depth {
        return Err(Error::invalid(format!("invalid tiling {tiling:?}")));
    }
    let [d, h, w] = volume.dims;
    let plane = h * w;
    let window = [tiling.depth, h, w];
    let mut sum = vec![0f64; voxel_count(volume.dims)];
    let mut hits = vec![0u32; d];
    let mut buf = vec![0f32; voxel_count(window)];
    for z0 in subvolume_starts(d, tiling.depth, tiling.stride) {
        let z1 = (z0 + tiling.depth).min(d);
        let n = (z1 - z0) * plane;
        buf[..n].copy_from_slice(&volume.values[z0 * plane..z1 * plane]);
        buf[n..].fill(0.0);
        let probs = model.probabilities(window, &buf)?;
        if probs.len() != buf.len() {
            return Err(Error::shape(format!(
                "model returned {} probabilities for a {window:?} window",
                probs.len()
            )));
        }
        for (acc, &p) in sum[z0 * plane..z1 * plane].iter_mut().zip(&probs[..n]) {
            *acc += p as f64;
        }
        hits[z0..z1].iter_mut().for_each(|c| *c += 1);
    }
    Ok(sum
        .chunks(plane)
        .zip(&hits)
        .flat_map(|(row, &c)| row.iter().map(move |&s| (s / c as f64) as f32))
        .collect())
}

/// Voxels with probability at or above `threshold` become 1.
pub fn threshold_mask(probs: &[f32], dims: Dims, spacing: Spacing, threshold: f32) -> Result<Mask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Mask::new(
        dims,
        spacing,
        probs.iter().map(|&p| (p >= threshold) as u8).collect(),
    )
}

impl Network {
    pub fn predict_probabilities(&self, volume: &Volume, tiling: Tiling) -> Result<Vec<f32>> {
        tiled_probabilities(self, volume, tiling)
    }

    pub fn predict_mask(&self, volume: &Volume, tiling: Tiling, threshold: f32) -> Result<Mask> {
        let probs = self.predict_probabilities(volume, tiling)?;
        threshold_mask(&probs, volume.dims, volume.spacing, threshold)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a constant that depends on which call this is.
    struct Scripted(std::cell::RefCell<Vec<f32>>);

    impl ProbabilityModel for Scripted {
        fn probabilities(&self, dims: Dims, _: &[f32]) -> Result<Vec<f32>> {
            let p = self.0.borrow_mut().remove(0);
            Ok(vec![p; voxel_count(dims)])
        }
    }

    #[test]
    fn overlap_is_averaged() {
        let v = Volume::filled([12, 2, 2], [1.0; 3], 0.0).unwrap();
        let model = Scripted(vec![0.4, 0.8].into());
        let p = tiled_probabilities(
            &model,
            &v,
            Tiling {
                depth: 8,
                stride: 4,
            },
        )
        .unwrap();
        // windows [0,8) and [4,12)
        assert!((p[0] - 0.4).abs() < 1e-6);
        assert!((p[5 * 4] - 0.6).abs() < 1e-6);
        assert!((p[11 * 4] - 0.8).abs() < 1e-6);
        let m = threshold_mask(&p, v.dims, v.spacing, 0.5).unwrap();
        assert_eq!(m.get(5, 0, 0), 1);
        assert_eq!(m.get(0, 0, 0), 0);
    }

    #[test]
    fn thresholds() {
        assert_eq!(
            threshold_mask(&[0.6; 8], [2, 2, 2], [1.0; 3], 0.5)
                .unwrap()
                .count_nonzero(),
            8
        );
        assert_eq!(
            threshold_mask(&[0.49; 8], [2, 2, 2], [1.0; 3], 0.5)
                .unwrap()
                .count_nonzero(),
            0
        );
        assert!(threshold_mask(&[0.5; 8], [2, 2, 2], [1.0; 3], 1.0).is_err());
    }

    #[test]
    fn shallow_volume_is_padded_then_cropped() {
        let v = Volume::filled([3, 2, 2], [1.0; 3], 0.0).unwrap();
        let model = Scripted(vec![0.7].into());
        let p = tiled_probabilities(
            &model,
            &v,
            Tiling {
                depth: 8,
                stride: 4,
            },
        )
        .unwrap();
        assert_eq!(p.len(), 12);
    }
}
