//! Qualitative slice export as binary PPM: input, ground truth and
//! prediction side by side, tumor voxels painted red.

use crate::error::{Error, Result};
use crate::volume::{Mask, Volume, LABEL_TUMOR};

pub const OVERLAY: [u8; 3] = [255, 0, 0];

fn gray_levels(volume: &Volume) -> impl Fn(f32) -> u8 {
    let (lo, hi) = volume
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    move |v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Three panels of width `W` for slice `z`: the image, the image with the
/// ground-truth tumor (label 2) overlaid, and the image with the non-zero
/// prediction voxels overlaid. `comment` goes into the header.
pub fn render_slice(
    volume: &Volume,
    gt: &Mask,
    pred: &Mask,
    z: usize,
    comment: &str,
) -> Result<Vec<u8>> {
    if gt.dims != volume.dims || pred.dims != volume.dims {
        return Err(Error::shape(format!(
            "slice export needs aligned inputs: volume {:?}, ground truth {:?}, prediction {:?}",
            volume.dims, gt.dims, pred.dims
        )));
    }
    let [d, h, w] = volume.dims;
    if z >= d {
        return Err(Error::invalid(format!("slice z={z} is outside 0..{d}")));
    }
    let gray = gray_levels(volume);
    let mut out = format!(
        "P6\n# {}\n{} {}\n255\n",
        comment.replace('\n', " "),
        3 * w,
        h
    )
    .into_bytes();
    for y in 0..h {
        for panel in 0..3 {
            for x in 0..w {
                let g = gray(volume.get(z, y, x));
                let overlay = match panel {
                    1 => gt.get(z, y, x) == LABEL_TUMOR,
                    2 => pred.get(z, y, x) != 0,
                    _ => false,
                };
                out.extend_from_slice(&if overlay { OVERLAY } else { [g, g, g] });
            }
        }
    }
    Ok(out)
}
