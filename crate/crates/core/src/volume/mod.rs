//! Volume and label-mask data model, persistence, and mask geometry.
//!
//! Every grid is stored row-major in `(z, y, x)` order with `x` fastest.
//! Spacing is given per axis in millimetres in the same order.

mod components;
mod manifest;
pub mod nifti;
pub mod raw;

pub use components::{connected_components, Components, Connectivity};
pub use manifest::{CaseEntry, DatasetManifest, Split};

use crate::error::{Error, Result};

/// Grid extents `(D, H, W)`.
pub type Dims = [usize; 3];
/// Voxel size in mm, `(z, y, x)`.
pub type Spacing = [f64; 3];

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_LIVER: u8 = 1;
pub const LABEL_TUMOR: u8 = 2;

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[inline]
pub fn coords(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[2];
    let y = (i / dims[2]) % dims[1];
    let z = i / (dims[1] * dims[2]);
    [z, y, x]
}

fn check_geometry(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::shape(format!(
            "grid extents must be positive, got {dims:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    if voxel_count(dims) != len {
        return Err(Error::shape(format!(
            "grid {dims:?} needs {} values, got {len}",
            voxel_count(dims)
        )));
    }
    Ok(())
}

/// Scalar image: Hounsfield units as read, or normalized intensity.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub values: Vec<f32>,
    pub provenance: String,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, values: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, values.len())?;
        Ok(Volume {
            dims,
            spacing,
            values,
            provenance: String::new(),
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)])
    }

    pub fn with_provenance(mut self, provenance: impl Into<String>) -> Self {
        self.provenance = provenance.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.values.len())
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.values[linear_index(self.dims, z, y, x)]
    }

    /// Copies the z-slab `z0..z1`.
    pub fn slab(&self, z0: usize, z1: usize) -> Volume {
        let plane = self.dims[1] * self.dims[2];
        Volume {
            dims: [z1 - z0, self.dims[1], self.dims[2]],
            spacing: self.spacing,
            values: self.values[z0 * plane..z1 * plane].to_vec(),
            provenance: self.provenance.clone(),
        }
    }
}

/// Label grid aligned to a [`Volume`]: 0 background, 1 liver, 2 tumor, or
/// a binarized `{0, 1}` mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub labels: Vec<u8>,
}

impl Mask {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u8>) -> Result<Self> {
        let m = Mask {
            dims,
            spacing,
            labels,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.labels.len())?;
        if let Some(bad) = self.labels.iter().find(|&&l| l > LABEL_TUMOR) {
            return Err(Error::invalid(format!(
                "label {bad} is outside the supported set {{0, 1, 2}}"
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[linear_index(self.dims, z, y, x)]
    }

    pub fn is_binary(&self) -> bool {
        self.labels.iter().all(|&l| l <= 1)
    }

    pub fn count_nonzero(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn is_aligned_with(&self, volume: &Volume) -> bool {
        self.dims == volume.dims
    }

    /// Binary mask of one structure. Selecting the liver also counts tumor
    /// voxels, since tumors lie inside the liver.
    pub fn binarize(&self, label: u8) -> Result<Mask> {
        let keep: fn(u8) -> bool = match label {
            LABEL_LIVER => |l| l == LABEL_LIVER || l == LABEL_TUMOR,
            LABEL_TUMOR => |l| l == LABEL_TUMOR,
            other => {
                return Err(Error::invalid(format!(
                    "binarize selects label 1 (liver) or 2 (tumor), got {other}"
                )))
            }
        };
        Ok(Mask {
            dims: self.dims,
            spacing: self.spacing,
            labels: self.labels.iter().map(|&l| keep(l) as u8).collect(),
        })
    }

    pub fn slab(&self, z0: usize, z1: usize) -> Mask {
        let plane = self.dims[1] * self.dims[2];
        Mask {
            dims: [z1 - z0, self.dims[1], self.dims[2]],
            spacing: self.spacing,
            labels: self.labels[z0 * plane..z1 * plane].to_vec(),
        }
    }

    /// Tightest box around all non-zero voxels.
    pub fn bounding_box(&self) -> Option<BoundingBox> {
        bounding_box_where(self.dims, |i| self.labels[i] != 0)
    }
}

/// Inclusive per-axis voxel index ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn point(p: [usize; 3]) -> Self {
        BoundingBox { lo: p, hi: p }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.hi[a] - self.lo[a] + 1)
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    /// Integer centre (rounded down) per axis.
    pub fn center(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| (self.lo[a] + self.hi[a]) / 2)
    }

    pub fn include(&mut self, p: [usize; 3]) {
        for a in 0..3 {
            self.lo[a] = self.lo[a].min(p[a]);
            self.hi[a] = self.hi[a].max(p[a]);
        }
    }
}

pub(crate) fn bounding_box_where(
    dims: Dims,
    mut pred: impl FnMut(usize) -> bool,
) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for i in 0..voxel_count(dims) {
        if pred(i) {
            let p = coords(dims, i);
            match bb.as_mut() {
                Some(b) => b.include(p),
                None => bb = Some(BoundingBox::point(p)),
            }
        }
    }
    bb
}

#[cfg(test)]
mod tests {
    use super::*;

    const ISO: Spacing = [1.0, 1.0, 1.0];

    #[test]
    fn geometry_is_validated() {
        assert!(Volume::new([2, 2, 2], ISO, vec![0.0; 8]).is_ok());
        assert!(Volume::new([2, 2, 2], ISO, vec![0.0; 7]).is_err());
        assert!(Volume::new([2, 2, 2], [1.0, 0.0, 1.0], vec![0.0; 8]).is_err());
        assert!(Mask::new([1, 1, 2], ISO, vec![0, 3]).is_err());
    }

    #[test]
    fn binarize_tumor_and_liver() {
        let m = Mask::new([1, 1, 4], ISO, vec![0, 1, 2, 2]).unwrap();
        assert_eq!(m.binarize(LABEL_TUMOR).unwrap().labels, vec![0, 0, 1, 1]);
        let m = Mask::new([1, 1, 3], ISO, vec![0, 1, 2]).unwrap();
        assert_eq!(m.binarize(LABEL_LIVER).unwrap().labels, vec![0, 1, 1]);
        let z = Mask::empty([2, 2, 2], ISO).unwrap();
        assert_eq!(z.binarize(LABEL_TUMOR).unwrap().count_nonzero(), 0);
        assert!(m.binarize(0).is_err());
    }

    #[test]
    fn bounding_box_examples() {
        let dims = [6, 7, 8];
        let mut m = Mask::empty(dims, ISO).unwrap();
        assert_eq!(m.bounding_box(), None);
        m.labels[linear_index(dims, 3, 4, 5)] = 1;
        assert_eq!(
            m.bounding_box(),
            Some(BoundingBox {
                lo: [3, 4, 5],
                hi: [3, 4, 5]
            })
        );
        let mut m = Mask::empty(dims, ISO).unwrap();
        m.labels[linear_index(dims, 0, 0, 0)] = 1;
        m.labels[linear_index(dims, 2, 5, 1)] = 1;
        assert_eq!(
            m.bounding_box(),
            Some(BoundingBox {
                lo: [0, 0, 0],
                hi: [2, 5, 1]
            })
        );
    }

    #[test]
    fn coords_invert_linear_index() {
        let dims = [3, 4, 5];
        for i in 0..60 {
            let [z, y, x] = coords(dims, i);
            assert_eq!(linear_index(dims, z, y, x), i);
        }
    }
}
