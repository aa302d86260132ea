//! Seeded synthetic CT phantoms: one ellipsoidal liver with small
//! ellipsoidal tumors inside it.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::digest::config_hash;
use crate::error::{Error, Result};
use crate::volume::{
    raw, voxel_count, CaseEntry, DatasetManifest, Dims, Mask, Spacing, Split, Volume, LABEL_LIVER,
    LABEL_TUMOR,
};

const PLACEMENT_RETRIES: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    /// `(mean, sd)` of the per-case region intensity.
    pub background_hu: (f64, f64),
    pub liver_hu: (f64, f64),
    pub tumor_hu: (f64, f64),
    /// Inclusive.
    pub tumor_count: (usize, usize),
    pub tumor_radius_mm: (f64, f64),
    /// Liver semi-axes as fractions of the physical extent per axis.
    pub liver_semi_axis_fraction: (f64, f64),
    pub smoothing_sigma_voxels: f64,
    pub noise_sigma_hu: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [32, 64, 64],
            spacing_mm: [2.0, 1.0, 1.0],
            background_hu: (-80.0, 20.0),
            liver_hu: (60.0, 10.0),
            tumor_hu: (25.0, 10.0),
            tumor_count: (1, 3),
            tumor_radius_mm: (4.0, 7.0),
            liver_semi_axis_fraction: (0.28, 0.38),
            smoothing_sigma_voxels: 1.0,
            noise_sigma_hu: 8.0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!(
                "phantom dims must be ≥ 16 per axis, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("phantom spacing must be positive"));
        }
        let (lo, hi) = self.tumor_count;
        if lo > hi {
            return Err(Error::invalid(format!(
                "tumor count range ({lo}, {hi}) is empty"
            )));
        }
        let (rlo, rhi) = self.tumor_radius_mm;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::invalid(format!(
                "tumor radius range ({rlo}, {rhi}) is invalid"
            )));
        }
        let (flo, fhi) = self.liver_semi_axis_fraction;
        if !(flo > 0.0 && flo <= fhi && fhi < 0.5) {
            return Err(Error::invalid(format!(
                "liver semi-axis fractions ({flo}, {fhi}) must lie in (0, 0.5)"
            )));
        }
        let smallest_axis = (0..3)
            .map(|a| flo * self.dims[a] as f64 * self.spacing_mm[a])
            .fold(f64::INFINITY, f64::min);
        if rhi >= smallest_axis {
            return Err(Error::invalid(format!(
                "tumor radius {rhi} mm does not fit the smallest liver semi-axis {smallest_axis:.1} mm"
            )));
        }
        for (name, (_, sd)) in [
            ("background", self.background_hu),
            ("liver", self.liver_hu),
            ("tumor", self.tumor_hu),
        ] {
            if !(sd >= 0.0) {
                return Err(Error::invalid(format!("{name} HU sd must be non-negative")));
            }
        }
        if !(self.smoothing_sigma_voxels >= 0.0 && self.noise_sigma_hu >= 0.0) {
            return Err(Error::invalid(
                "smoothing and noise sigmas must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid in millimetres, measured from voxel-centre origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center_mm: [f64; 3],
    pub semi_axes_mm: [f64; 3],
}

impl Ellipsoid {
    fn contains_voxel(&self, p: [usize; 3], spacing: Spacing) -> bool {
        (0..3)
            .map(|a| {
                let d = (p[a] as f64 * spacing[a] - self.center_mm[a]) / self.semi_axes_mm[a];
                d * d
            })
            .sum::<f64>()
            <= 1.0
    }

    pub fn volume_mm3(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes_mm.iter().product::<f64>()
    }

    /// Voxels whose centres fall inside, limited to the bounding range.
    fn voxels(&self, dims: Dims, spacing: Spacing) -> Vec<[usize; 3]> {
        let range = |a: usize| {
            let lo = ((self.center_mm[a] - self.semi_axes_mm[a]) / spacing[a])
                .floor()
                .max(0.0) as usize;
            let hi = ((self.center_mm[a] + self.semi_axes_mm[a]) / spacing[a])
                .ceil()
                .max(0.0) as usize;
            lo..(hi + 1).min(dims[a])
        };
        let mut out = Vec::new();
        for z in range(0) {
            for y in range(1) {
                for x in range(2) {
                    if self.contains_voxel([z, y, x], spacing) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    /// Intensities in HU.
    pub volume: Volume,
    pub mask: Mask,
    pub liver: Ellipsoid,
    pub tumors: Vec<Ellipsoid>,
    /// Voxel count of each tumor, in `tumors` order.
    pub tumor_voxels: Vec<usize>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with edge clamping.
fn smooth(values: &mut [f64], dims: Dims, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut line = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..n).map(|t| values[base + t * strides[axis]]));
                for t in 0..n {
                    let mut acc = 0.0;
                    for (o, &w) in k.iter().enumerate() {
                        let s = (t as i64 + o as i64 - r).clamp(0, n as i64 - 1) as usize;
                        acc += w * line[s];
                    }
                    values[base + t * strides[axis]] = acc;
                }
            }
        }
    }
}

fn draw(rng: &mut impl Rng, (mean, sd): (f64, f64)) -> f64 {
    if sd == 0.0 {
        mean
    } else {
        Normal::new(mean, sd).expect("finite sd").sample(rng)
    }
}

/// Deterministic in `(config, seed)`.
pub fn generate_phantom(config: &PhantomConfig, seed: u64) -> Result<Phantom> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = config.dims;
    let spacing = config.spacing_mm;
    let extent = [0, 1, 2].map(|a| (dims[a] - 1) as f64 * spacing[a]);

    let (flo, fhi) = config.liver_semi_axis_fraction;
    let semi = [0, 1, 2].map(|a| rng.random_range(flo..=fhi) * extent[a]);
    let center = [0, 1, 2].map(|a| {
        let slack = (extent[a] / 2.0 - semi[a]).max(0.0) * 0.5;
        extent[a] / 2.0 + rng.random_range(-slack..=slack)
    });
    let liver = Ellipsoid {
        center_mm: center,
        semi_axes_mm: semi,
    };

    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let idx = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    for p in liver.voxels(dims, spacing) {
        labels[idx(p)] = LABEL_LIVER;
    }

    let (cmin, cmax) = config.tumor_count;
    let wanted = rng.random_range(cmin..=cmax);
    let (rlo, rhi) = config.tumor_radius_mm;
    let mut tumors = Vec::with_capacity(wanted);
    let mut tumor_voxels = Vec::with_capacity(wanted);
    for t in 0..wanted {
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let semi = [0, 1, 2].map(|_| rng.random_range(rlo..=rhi));
            // sample the centre inside the liver shrunk by the tumor size
            let center = [0, 1, 2].map(|a| {
                let room = (liver.semi_axes_mm[a] - semi[a]).max(0.0);
                liver.center_mm[a] + rng.random_range(-room..=room)
            });
            let tumor = Ellipsoid {
                center_mm: center,
                semi_axes_mm: semi,
            };
            let vox = tumor.voxels(dims, spacing);
            // keep a one-voxel liver gap between tumors so each stays a separate component
            let clear = !vox.is_empty()
                && vox.iter().all(|&p| {
                    labels[idx(p)] == LABEL_LIVER
                        && neighbours(p, dims).all(|q| labels[idx(q)] != LABEL_TUMOR)
                });
            if clear {
                for &p in &vox {
                    labels[idx(p)] = LABEL_TUMOR;
                }
                tumors.push(tumor);
                tumor_voxels.push(vox.len());
                placed = true;
                break;
            }
        }
        if !placed {
            if t == 0 {
                return Err(Error::data(format!(
                    "no tumor could be placed inside the liver after {PLACEMENT_RETRIES} attempts"
                )));
            }
            log::warn!(
                "phantom seed {seed}: kept {t} of {wanted} tumors, the liver has no room for more"
            );
            break;
        }
    }

    let hu = [
        draw(&mut rng, config.background_hu),
        draw(&mut rng, config.liver_hu),
        draw(&mut rng, config.tumor_hu),
    ];
    let mut values: Vec<f64> = labels.iter().map(|&l| hu[l as usize]).collect();
    smooth(&mut values, dims, config.smoothing_sigma_voxels);
    if config.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0, config.noise_sigma_hu).expect("finite sigma");
        for v in &mut values {
            *v += noise.sample(&mut rng);
        }
    }
    let volume = Volume::new(
        dims,
        spacing,
        values.into_iter().map(|v| v as f32).collect(),
    )?
    .with_provenance(format!("phantom seed={seed}"));
    Ok(Phantom {
        volume,
        mask: Mask::new(dims, spacing, labels)?,
        liver,
        tumors,
        tumor_voxels,
    })
}

fn neighbours(p: [usize; 3], dims: Dims) -> impl Iterator<Item = [usize; 3]> {
    (0..27).filter_map(move |k| {
        let off = [k / 9, (k / 3) % 3, k % 3];
        let mut q = [0usize; 3];
        for a in 0..3 {
            let v = p[a] as i64 + off[a] as i64 - 1;
            if v < 0 || v >= dims[a] as i64 {
                return None;
            }
            q[a] = v as usize;
        }
        Some(q)
    })
}

/// Seed of case `index` within a dataset seeded with `seed`.
pub fn case_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.next_u64()
}

/// Train count for a split: `round(n * fraction)` kept within `[1, n - 1]`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n - 1)
}

/// Train/test membership from a seeded shuffle of the case indices.
pub fn split_assignment(n: usize, fraction: f64, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    order.shuffle(&mut rng);
    let n_train = train_count(n, fraction);
    let mut out = vec![Split::Test; n];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    out
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

/// Writes `n_cases` phantoms and `manifest.json` into `out_dir`.
pub fn generate_dataset(
    config: &PhantomConfig,
    n_cases: usize,
    seed: u64,
    split_fraction: f64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_cases < 2 {
        return Err(Error::invalid(format!(
            "a dataset needs at least 2 cases, got {n_cases}"
        )));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "split fraction must lie in (0, 1), got {split_fraction}"
        )));
    }
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let splits = split_assignment(n_cases, split_fraction, seed);
    let mut cases = Vec::with_capacity(n_cases);
    for (i, split) in splits.into_iter().enumerate() {
        let id = case_id(i);
        let ph = generate_phantom(config, case_seed(seed, i))?;
        let volume = format!("{id}_vol.raw").into();
        let mask = format!("{id}_seg.raw").into();
        raw::write_volume(&ph.volume, &out_dir.join(&volume))?;
        raw::write_mask(&ph.mask, &ph.volume.provenance, &out_dir.join(&mask))?;
        cases.push(CaseEntry {
            id,
            volume,
            mask,
            split,
        });
    }
    let manifest = DatasetManifest {
        seed,
        config_hash: config_hash(&(config, n_cases, split_fraction))?,
        cases,
    };
    manifest.save(&out_dir.join(DatasetManifest::FILE_NAME))?;
    Ok(manifest)
}
