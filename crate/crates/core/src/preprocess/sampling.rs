use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rescale_inplane, PreprocessConfig};
use crate::error::{Error, Result};
use crate::volume::{
    connected_components, voxel_count, Connectivity, Dims, Mask, Volume, LABEL_TUMOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Whole,
    PatchPositive,
    PatchNegative,
}

/// One training input. `target` is the binary tumor mask of the crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub target: Mask,
    pub kind: SampleKind,
    pub case_id: String,
    /// Crop origin in the case grid; may be negative where zero padding was used.
    pub origin: [i64; 3],
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        if self.image.dims != self.target.dims {
            return Err(Error::shape(format!(
                "sample image {:?} and target {:?} differ",
                self.image.dims, self.target.dims
            )));
        }
        if !self.target.is_binary() {
            return Err(Error::data("sample target is not binary"));
        }
        let tumor = self.target.count_nonzero();
        match self.kind {
            SampleKind::PatchPositive if tumor == 0 => {
                Err(Error::data("positive patch without tumor voxels"))
            }
            SampleKind::PatchNegative if tumor != 0 => {
                Err(Error::data("negative patch with tumor voxels"))
            }
            _ => Ok(()),
        }
    }
}

/// Copies a `size` box at `origin` out of a grid, reading `fill` outside it.
fn crop<T: Copy>(src: &[T], dims: Dims, origin: [i64; 3], size: Dims, fill: T) -> Vec<T> {
    let mut out = vec![fill; voxel_count(size)];
    for z in 0..size[0] {
        let sz = origin[0] + z as i64;
        if sz < 0 || sz >= dims[0] as i64 {
            continue;
        }
        for y in 0..size[1] {
            let sy = origin[1] + y as i64;
            if sy < 0 || sy >= dims[1] as i64 {
                continue;
            }
            for x in 0..size[2] {
                let sx = origin[2] + x as i64;
                if sx < 0 || sx >= dims[2] as i64 {
                    continue;
                }
                out[(z * size[1] + y) * size[2] + x] =
                    src[((sz as usize) * dims[1] + sy as usize) * dims[2] + sx as usize];
            }
        }
    }
    out
}

/// Zero-padded crop of `size` at `origin`.
pub fn crop_volume(volume: &Volume, origin: [i64; 3], size: Dims) -> Result<Volume> {
    let values = crop(&volume.values, volume.dims, origin, size, 0.0f32);
    Ok(Volume::new(size, volume.spacing, values)?.with_provenance(volume.provenance.clone()))
}

/// Background-padded crop of `size` at `origin`.
pub fn crop_mask(mask: &Mask, origin: [i64; 3], size: Dims) -> Result<Mask> {
    Mask::new(
        size,
        mask.spacing,
        crop(&mask.labels, mask.dims, origin, size, 0u8),
    )
}

fn cut(image: &Volume, target: &Mask, origin: [i64; 3], size: Dims) -> Result<(Volume, Mask)> {
    Ok((
        crop_volume(image, origin, size)?,
        crop_mask(target, origin, size)?,
    ))
}

/// Window starts covering `depth` slices; the last window ends at the last slice.
pub fn subvolume_starts(depth: usize, window: usize, stride: usize) -> Vec<usize> {
    if depth <= window {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=depth - window).step_by(stride).collect();
    if *starts.last().unwrap() != depth - window {
        starts.push(depth - window);
    }
    starts
}

/// Whole-input samples: in-plane rescale to `inplane_size`, then depth
/// windows. Shallow volumes are zero-padded at the bottom.
pub fn generate_subvolumes(
    case_id: &str,
    volume: &Volume,
    mask: &Mask,
    config: &PreprocessConfig,
) -> Result<Vec<Sample>> {
    generate_subvolumes_for(case_id, volume, mask, config, LABEL_TUMOR)
}

/// [`generate_subvolumes`] with targets binarized for `label` instead of tumor.
pub fn generate_subvolumes_for(
    case_id: &str,
    volume: &Volume,
    mask: &Mask,
    config: &PreprocessConfig,
    label: u8,
) -> Result<Vec<Sample>> {
    config.validate()?;
    let (image, labels) = rescale_inplane(volume, mask, config.inplane_size)?;
    let tumor = labels.binarize(label)?;
    let size = [config.subvol_depth, image.dims[1], image.dims[2]];
    subvolume_starts(image.dims[0], config.subvol_depth, config.subvol_stride)
        .into_iter()
        .map(|z| {
            let origin = [z as i64, 0, 0];
            let (image, target) = cut(&image, &tumor, origin, size)?;
            Ok(Sample {
                image,
                target,
                kind: SampleKind::Whole,
                case_id: case_id.to_string(),
                origin,
            })
        })
        .collect()
}

/// Per-axis maximum tumor component extent (26-connected), rounded up to a
/// multiple of `multiple`.
pub fn max_tumor_extent<'a>(
    masks: impl IntoIterator<Item = &'a Mask>,
    multiple: usize,
) -> Result<Dims> {
    if multiple == 0 {
        return Err(Error::invalid("round multiple must be positive"));
    }
    let mut best: Option<Dims> = None;
    for mask in masks {
        let comps = connected_components(&mask.binarize(LABEL_TUMOR)?, Connectivity::TwentySix);
        for bb in comps.bounding_boxes() {
            let e = bb.extent();
            best = Some(match best {
                None => e,
                Some(b) => [0, 1, 2].map(|a| b[a].max(e[a])),
            });
        }
    }
    let best =
        best.ok_or_else(|| Error::data("max tumor extent: no tumor in any training mask"))?;
    Ok(best.map(|e| e.div_ceil(multiple) * multiple))
}

/// One positive patch per tumor component, centred on its bounding box with
/// uniform jitter of up to `jitter_fraction` of the patch extent per axis.
pub fn extract_tumor_patches<R: Rng + ?Sized>(
    case_id: &str,
    volume: &Volume,
    mask: &Mask,
    patch: Dims,
    jitter_fraction: f64,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if mask.dims != volume.dims {
        return Err(Error::shape(format!(
            "mask {:?} is not aligned with volume {:?}",
            mask.dims, volume.dims
        )));
    }
    let tumor = mask.binarize(LABEL_TUMOR)?;
    let comps = connected_components(&tumor, Connectivity::TwentySix);
    let mut out = Vec::with_capacity(comps.count);
    for (i, bb) in comps.bounding_boxes().into_iter().enumerate() {
        let center = bb.center();
        let mut origin = [0i64; 3];
        for a in 0..3 {
            let j = (patch[a] as f64 * jitter_fraction).floor() as i64;
            let shift = if j > 0 { rng.random_range(-j..=j) } else { 0 };
            origin[a] = clip_origin(
                center[a] as i64 + shift - patch[a] as i64 / 2,
                volume.dims[a],
                patch[a],
            );
        }
        let (mut image, mut target) = cut(volume, &tumor, origin, patch)?;
        if target.count_nonzero() == 0 {
            // fall back to a patch centred on a voxel of this component
            let p = comps.voxels(i as u32 + 1)[0];
            origin = [0, 1, 2]
                .map(|a| clip_origin(p[a] as i64 - patch[a] as i64 / 2, volume.dims[a], patch[a]));
            (image, target) = cut(volume, &tumor, origin, patch)?;
        }
        out.push(Sample {
            image,
            target,
            kind: SampleKind::PatchPositive,
            case_id: case_id.to_string(),
            origin,
        });
    }
    Ok(out)
}

/// Keeps a window of `size` inside `[0, dim)`; a window larger than the
/// grid is centred on it.
fn clip_origin(o: i64, dim: usize, size: usize) -> i64 {
    if size >= dim {
        -((size - dim) as i64 / 2)
    } else {
        o.clamp(0, (dim - size) as i64)
    }
}

/// Up to `count` uniformly placed tumor-free patches, drawn by rejection
/// within `100 * count` attempts.
pub fn extract_negative_patches<R: Rng + ?Sized>(
    case_id: &str,
    volume: &Volume,
    mask: &Mask,
    patch: Dims,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if mask.dims != volume.dims {
        return Err(Error::shape(format!(
            "mask {:?} is not aligned with volume {:?}",
            mask.dims, volume.dims
        )));
    }
    let tumor = mask.binarize(LABEL_TUMOR)?;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count && attempts < 100 * count {
        attempts += 1;
        let origin = [0, 1, 2].map(|a| {
            if patch[a] >= volume.dims[a] {
                clip_origin(0, volume.dims[a], patch[a])
            } else {
                rng.random_range(0..=(volume.dims[a] - patch[a]) as i64)
            }
        });
        let (image, target) = cut(volume, &tumor, origin, patch)?;
        if target.count_nonzero() == 0 {
            out.push(Sample {
                image,
                target,
                kind: SampleKind::PatchNegative,
                case_id: case_id.to_string(),
                origin,
            });
        }
    }
    if out.len() < count {
        warn!(
            "case {case_id}: {} of {count} negative patches after {attempts} attempts",
            out.len()
        );
    }
    Ok(out)
}
