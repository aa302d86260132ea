use log::warn;

use super::{train_stage, StageSpec, TrainLog};
use crate::digest::case_seed;
use crate::error::{Error, Result};
use crate::network::{build_network, Network, NetworkConfig, ProbabilityModel, Tiling};
use crate::preprocess::{
    crop_mask, crop_volume, generate_subvolumes_for, PreparedCase, PreprocessConfig, Sample,
    SampleKind,
};
use crate::volume::{Dims, Mask, Volume, LABEL_LIVER, LABEL_TUMOR};

/// Box of the grid handed to the tumor network; may reach past the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRegion {
    pub origin: [i64; 3],
    pub size: Dims,
}

impl CropRegion {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| {
            let v = p[a] as i64;
            v >= self.origin[a] && v < self.origin[a] + self.size[a] as i64
        })
    }
}

/// Bounding box of `liver` grown by `margin` (clipped to the grid), then
/// widened symmetrically until every extent is a multiple of `multiple`.
pub fn liver_crop_region(liver: &Mask, margin: usize, multiple: usize) -> Option<CropRegion> {
    let bb = liver.bounding_box()?;
    let mut origin = [0i64; 3];
    let mut size = [0usize; 3];
    for a in 0..3 {
        let lo = bb.lo[a].saturating_sub(margin);
        let hi = (bb.hi[a] + margin).min(liver.dims[a] - 1);
        let extent = hi - lo + 1;
        size[a] = extent.div_ceil(multiple) * multiple;
        origin[a] = lo as i64 - ((size[a] - extent) / 2) as i64;
    }
    Some(CropRegion { origin, size })
}

/// Liver network followed by a tumor network on the liver crop.
#[derive(Debug, Clone)]
pub struct CascadeModel {
    pub liver: Network,
    pub tumor: Network,
    pub margin: usize,
    /// Depth windows for the liver network.
    pub tiling: Tiling,
}

#[derive(Debug, Clone)]
pub struct CascadePrediction {
    pub liver: Mask,
    pub tumor: Mask,
    pub region: Option<CropRegion>,
}

pub fn cascade_predict(
    model: &CascadeModel,
    image: &Volume,
    threshold: f32,
) -> Result<CascadePrediction> {
    let liver = model.liver.predict_mask(image, model.tiling, threshold)?;
    let mut tumor = Mask::empty(image.dims, image.spacing)?;
    let factor = model.tumor.config().downsampling_factor();
    let Some(region) = liver_crop_region(&liver, model.margin, factor) else {
        return Ok(CascadePrediction {
            liver,
            tumor,
            region: None,
        });
    };
    let crop = crop_volume(image, region.origin, region.size)?;
    let probs = model.tumor.probabilities(crop.dims, &crop.values)?;
    let [cd, ch, cw] = region.size;
    let d = image.dims;
    for z in 0..cd {
        let gz = region.origin[0] + z as i64;
        if gz < 0 || gz >= d[0] as i64 {
            continue;
        }
        for y in 0..ch {
            let gy = region.origin[1] + y as i64;
            if gy < 0 || gy >= d[1] as i64 {
                continue;
            }
            for x in 0..cw {
                let gx = region.origin[2] + x as i64;
                if gx < 0 || gx >= d[2] as i64 {
                    continue;
                }
                if probs[(z * ch + y) * cw + x] >= threshold {
                    tumor.labels[(gz as usize * d[1] + gy as usize) * d[2] + gx as usize] = 1;
                }
            }
        }
    }
    Ok(CascadePrediction {
        liver,
        tumor,
        region: Some(region),
    })
}

/// Trains the liver network on whole sub-volumes with liver targets, then
/// the tumor network on ground-truth liver crops, each for one `stage`.
pub fn run_cascade(
    config: &NetworkConfig,
    cases: &[PreparedCase],
    preprocess: &PreprocessConfig,
    stage: &StageSpec,
    margin: usize,
    seed: u64,
) -> Result<(CascadeModel, TrainLog, TrainLog)> {
    let factor = config.downsampling_factor();
    let mut liver_samples = Vec::new();
    let mut tumor_samples = Vec::new();
    for case in cases {
        let liver = case.labels.binarize(LABEL_LIVER)?;
        let Some(region) = liver_crop_region(&liver, margin, factor) else {
            warn!("case {}: empty liver mask, skipped by the cascade", case.id);
            continue;
        };
        liver_samples.extend(generate_subvolumes_for(
            &case.id,
            &case.image,
            &case.labels,
            preprocess,
            LABEL_LIVER,
        )?);
        tumor_samples.push(Sample {
            image: crop_volume(&case.image, region.origin, region.size)?,
            target: crop_mask(
                &case.labels.binarize(LABEL_TUMOR)?,
                region.origin,
                region.size,
            )?,
            kind: SampleKind::Whole,
            case_id: case.id.clone(),
            origin: region.origin,
        });
    }
    if tumor_samples.is_empty() {
        return Err(Error::data("no training case has a liver"));
    }
    let stage = StageSpec {
        batch_size: 1,
        ..stage.clone()
    };

    let mut liver = build_network(config, seed)?;
    let mut liver_log = TrainLog::new(seed, "cascade-liver");
    train_stage(
        &mut liver,
        &liver_samples,
        &[],
        &stage,
        seed,
        0,
        &mut liver_log,
    )?;

    let tumor_seed = case_seed(seed, "cascade-tumor");
    let mut tumor = build_network(config, tumor_seed)?;
    let mut tumor_log = TrainLog::new(tumor_seed, "cascade-tumor");
    train_stage(
        &mut tumor,
        &tumor_samples,
        &[],
        &stage,
        tumor_seed,
        0,
        &mut tumor_log,
    )?;

    let model = CascadeModel {
        liver,
        tumor,
        margin,
        tiling: Tiling {
            depth: preprocess.subvol_depth,
            stride: preprocess.subvol_stride,
        },
    };
    Ok((model, liver_log, tumor_log))
}
