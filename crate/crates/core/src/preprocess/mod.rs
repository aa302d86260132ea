//! CT preprocessing: spacing interpolation, intensity windowing,
//! effective-range cropping, and sub-volume / tumor-patch sampling.
//!
//! The chain always runs in that order; [`prepare_case`] applies the first
//! three steps plus the in-plane rescale that brings a case to network
//! resolution, and the samplers in [`sampling`] cut training samples from
//! the result.

pub mod sampling;
pub mod store;
pub use store::{load_manifest, load_samples, save_samples, SampleEntry, SampleManifest};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sampling::{
    crop_mask, crop_volume, extract_negative_patches, extract_tumor_patches, generate_subvolumes,
    generate_subvolumes_for, max_tumor_extent, subvolume_starts, Sample, SampleKind,
};

use crate::digest::case_seed;
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, Mask, Spacing, Volume, LABEL_LIVER};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing_mm: Spacing,
    pub window_lo: f32,
    pub window_hi: f32,
    /// Slices kept above and below the liver.
    pub z_margin: usize,
    pub subvol_depth: usize,
    pub subvol_stride: usize,
    /// In-plane `(H, W)` at network resolution.
    pub inplane_size: [usize; 2],
    pub patch_round_multiple: usize,
    /// Per-axis positive-patch jitter as a fraction of the patch extent.
    pub jitter_fraction: f64,
    /// Negative patches cut per positive patch of the same case.
    pub negatives_per_positive: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_spacing_mm: [2.0, 1.0, 1.0],
            window_lo: -200.0,
            window_hi: 250.0,
            z_margin: 2,
            subvol_depth: 16,
            subvol_stride: 8,
            inplane_size: [64, 64],
            patch_round_multiple: 8,
            jitter_fraction: 0.25,
            negatives_per_positive: 0.5,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_lo < self.window_hi) {
            return Err(Error::invalid(format!(
                "window_lo ({}) must be below window_hi ({})",
                self.window_lo, self.window_hi
            )));
        }
        if self.subvol_depth == 0
            || self.subvol_stride == 0
            || self.subvol_stride > self.subvol_depth
        {
            return Err(Error::invalid(format!(
                "need 0 < subvol_stride ({}) <= subvol_depth ({})",
                self.subvol_stride, self.subvol_depth
            )));
        }
        if !self.patch_round_multiple.is_power_of_two() {
            return Err(Error::invalid(format!(
                "patch_round_multiple ({}) must be a power of two",
                self.patch_round_multiple
            )));
        }
        if self.inplane_size.contains(&0) {
            return Err(Error::invalid("inplane_size must be positive"));
        }
        if self.target_spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("target spacing must be positive"));
        }
        if !(0.0..0.5).contains(&self.jitter_fraction) {
            return Err(Error::invalid("jitter_fraction must lie in [0, 0.5)"));
        }
        if !(self.negatives_per_positive >= 0.0) {
            return Err(Error::invalid(
                "negatives_per_positive must be non-negative",
            ));
        }
        Ok(())
    }

    /// Checks that sub-volumes and patches survive `levels - 1` halvings.
    pub fn check_network_divisibility(&self, levels: usize) -> Result<()> {
        let factor = 1usize << levels.saturating_sub(1);
        if self.patch_round_multiple < factor {
            return Err(Error::invalid(format!(
                "patch_round_multiple ({}) is below the network downsampling factor {factor}",
                self.patch_round_multiple
            )));
        }
        for (name, v) in [
            ("subvol_depth", self.subvol_depth),
            ("inplane H", self.inplane_size[0]),
            ("inplane W", self.inplane_size[1]),
        ] {
            if v % factor != 0 {
                return Err(Error::invalid(format!(
                    "{name} ({v}) must be a multiple of {factor}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Source coordinate of output sample `i` when `old` samples are mapped onto
/// `new` with the end samples aligned.
fn source_coord(i: usize, old: usize, new: usize) -> f64 {
    if new == 1 {
        (old - 1) as f64 / 2.0
    } else {
        i as f64 * (old - 1) as f64 / (new - 1) as f64
    }
}

fn axis_taps(old: usize, new: usize) -> Vec<(usize, usize, f64)> {
    (0..new)
        .map(|i| {
            let s = source_coord(i, old, new);
            let i0 = (s.floor() as usize).min(old - 1);
            let i1 = (i0 + 1).min(old - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Resamples a grid to explicit extents with aligned end samples.
pub fn resample_grid(values: &[f32], dims: Dims, new_dims: Dims, mode: Interpolation) -> Vec<f32> {
    assert_eq!(values.len(), voxel_count(dims));
    if dims == new_dims {
        return values.to_vec();
    }
    let taps: Vec<_> = (0..3).map(|a| axis_taps(dims[a], new_dims[a])).collect();
    let at = |z: usize, y: usize, x: usize| values[(z * dims[1] + y) * dims[2] + x] as f64;
    let mut out = Vec::with_capacity(voxel_count(new_dims));
    for &(z0, z1, fz) in &taps[0] {
        for &(y0, y1, fy) in &taps[1] {
            for &(x0, x1, fx) in &taps[2] {
                let v = match mode {
                    Interpolation::Nearest => {
                        let z = if fz >= 0.5 { z1 } else { z0 };
                        let y = if fy >= 0.5 { y1 } else { y0 };
                        let x = if fx >= 0.5 { x1 } else { x0 };
                        at(z, y, x)
                    }
                    Interpolation::Trilinear => {
                        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                        let c00 = lerp(at(z0, y0, x0), at(z0, y0, x1), fx);
                        let c01 = lerp(at(z0, y1, x0), at(z0, y1, x1), fx);
                        let c10 = lerp(at(z1, y0, x0), at(z1, y0, x1), fx);
                        let c11 = lerp(at(z1, y1, x0), at(z1, y1, x1), fx);
                        lerp(lerp(c00, c01, fy), lerp(c10, c11, fy), fz)
                    }
                };
                out.push(v as f32);
            }
        }
    }
    out
}

/// Extents after changing spacing: `round(old * old_spacing / target)`, at least 1.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    [0, 1, 2].map(|a| ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1))
}

pub fn resample(volume: &Volume, target: Spacing, mode: Interpolation) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let new_dims = resampled_dims(volume.dims, volume.spacing, target);
    let values = resample_grid(&volume.values, volume.dims, new_dims, mode);
    Ok(Volume::new(new_dims, target, values)?.with_provenance(volume.provenance.clone()))
}

/// Nearest-neighbour resampling of a label mask.
pub fn resample_mask(mask: &Mask, target: Spacing) -> Result<Mask> {
    if target.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::invalid(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    let new_dims = resampled_dims(mask.dims, mask.spacing, target);
    let as_f: Vec<f32> = mask.labels.iter().map(|&l| l as f32).collect();
    let labels = resample_grid(&as_f, mask.dims, new_dims, Interpolation::Nearest)
        .into_iter()
        .map(|v| v as u8)
        .collect();
    Mask::new(new_dims, target, labels)
}

/// Clamps to `[lo, hi]` and maps linearly onto `[0, 1]`.
pub fn window_transform(volume: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::invalid(format!(
            "window bounds must satisfy lo < hi, got ({lo}, {hi})"
        )));
    }
    let span = hi - lo;
    let values = volume
        .values
        .iter()
        .map(|&v| (v.clamp(lo, hi) - lo) / span)
        .collect();
    Ok(Volume {
        values,
        ..volume.clone()
    })
}

/// Crop along z to the liver (label ≥ 1) extent plus `z_margin` slices,
/// clipped to the grid. Returns the cropped pair and the first kept slice.
pub fn effective_range(
    volume: &Volume,
    mask: &Mask,
    z_margin: usize,
) -> Result<(Volume, Mask, usize)> {
    if !mask.is_aligned_with(volume) {
        return Err(Error::shape(format!(
            "mask {:?} is not aligned with volume {:?}",
            mask.dims, volume.dims
        )));
    }
    let bb = mask
        .binarize(LABEL_LIVER)?
        .bounding_box()
        .ok_or_else(|| Error::data("effective range: no foreground in mask"))?;
    let z0 = bb.lo[0].saturating_sub(z_margin);
    let z1 = (bb.hi[0] + z_margin).min(volume.dims[0] - 1) + 1;
    Ok((volume.slab(z0, z1), mask.slab(z0, z1), z0))
}

/// Rescales in-plane extents to `(H, W)`: trilinear for the image, nearest
/// for the mask. Spacing grows in proportion to the shrink.
pub fn rescale_inplane(volume: &Volume, mask: &Mask, size: [usize; 2]) -> Result<(Volume, Mask)> {
    if volume.dims[1..] == size {
        return Ok((volume.clone(), mask.clone()));
    }
    let new_dims = [volume.dims[0], size[0], size[1]];
    let spacing = [
        volume.spacing[0],
        volume.spacing[1] * volume.dims[1] as f64 / size[0] as f64,
        volume.spacing[2] * volume.dims[2] as f64 / size[1] as f64,
    ];
    let img = resample_grid(
        &volume.values,
        volume.dims,
        new_dims,
        Interpolation::Trilinear,
    );
    let lab: Vec<f32> = mask.labels.iter().map(|&l| l as f32).collect();
    let lab = resample_grid(&lab, mask.dims, new_dims, Interpolation::Nearest);
    Ok((
        Volume::new(new_dims, spacing, img)?.with_provenance(volume.provenance.clone()),
        Mask::new(
            new_dims,
            spacing,
            lab.into_iter().map(|v| v as u8).collect(),
        )?,
    ))
}

/// A case at network resolution.
#[derive(Debug, Clone)]
pub struct PreparedCase {
    pub id: String,
    /// Normalized intensities in `[0, 1]`.
    pub image: Volume,
    /// Full label set `{0, 1, 2}`.
    pub labels: Mask,
    /// First kept slice of the resampled volume.
    pub z_offset: usize,
}

/// resample → window → effective range → in-plane rescale.
pub fn prepare_case(
    id: &str,
    volume: &Volume,
    mask: &Mask,
    config: &PreprocessConfig,
) -> Result<PreparedCase> {
    config.validate()?;
    if !mask.is_aligned_with(volume) {
        return Err(Error::shape(format!(
            "case {id}: mask {:?} is not aligned with volume {:?}",
            mask.dims, volume.dims
        )));
    }
    let resampled = resample(volume, config.target_spacing_mm, Interpolation::Trilinear)?;
    let resampled_mask = resample_mask(mask, config.target_spacing_mm)?;
    let windowed = window_transform(&resampled, config.window_lo, config.window_hi)?;
    let (cropped, cropped_mask, z_offset) =
        effective_range(&windowed, &resampled_mask, config.z_margin)
            .map_err(|e| Error::data(format!("case {id}: {e}")))?;
    let (image, labels) = rescale_inplane(&cropped, &cropped_mask, config.inplane_size)?;
    Ok(PreparedCase {
        id: id.to_string(),
        image,
        labels,
        z_offset,
    })
}

/// Samples cut from a set of prepared training cases.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub whole: Vec<Sample>,
    pub positives: Vec<Sample>,
    pub negatives: Vec<Sample>,
    pub patch_dims: Dims,
}

/// Whole sub-volumes plus positive and negative tumor patches. Patch dims
/// come from the largest tumor across `cases`; each case draws from its own
/// seeded stream.
pub fn sample_cases(
    cases: &[PreparedCase],
    config: &PreprocessConfig,
    seed: u64,
) -> Result<SampleSet> {
    config.validate()?;
    let patch_dims =
        max_tumor_extent(cases.iter().map(|c| &c.labels), config.patch_round_multiple)?;
    let mut set = SampleSet {
        whole: Vec::new(),
        positives: Vec::new(),
        negatives: Vec::new(),
        patch_dims,
    };
    for case in cases {
        let mut rng = ChaCha8Rng::seed_from_u64(case_seed(seed, &case.id));
        set.whole.extend(generate_subvolumes(
            &case.id,
            &case.image,
            &case.labels,
            config,
        )?);
        let pos = extract_tumor_patches(
            &case.id,
            &case.image,
            &case.labels,
            patch_dims,
            config.jitter_fraction,
            &mut rng,
        )?;
        let n_neg = (pos.len() as f64 * config.negatives_per_positive).ceil() as usize;
        set.negatives.extend(extract_negative_patches(
            &case.id,
            &case.image,
            &case.labels,
            patch_dims,
            n_neg,
            &mut rng,
        )?);
        set.positives.extend(pos);
    }
    Ok(set)
}
