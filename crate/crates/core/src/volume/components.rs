use std::collections::VecDeque;

use super::{coords, linear_index, voxel_count, BoundingBox, Dims, Mask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    TwentySix,
}

impl TryFrom<u32> for Connectivity {
    type Error = Error;

    fn try_from(n: u32) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::invalid(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

impl Connectivity {
    fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let manhattan = dz.abs() + dy.abs() + dx.abs();
                    let keep = match self {
                        Connectivity::Six => manhattan == 1,
                        Connectivity::TwentySix => manhattan > 0,
                    };
                    if keep {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

/// Labelled components: 0 is background, `1..=count` are components in
/// raster order of their first voxel.
#[derive(Debug, Clone)]
pub struct Components {
    pub dims: Dims,
    pub labels: Vec<u32>,
    pub count: usize,
}

impl Components {
    pub fn bounding_boxes(&self) -> Vec<BoundingBox> {
        let mut boxes: Vec<Option<BoundingBox>> = vec![None; self.count];
        for (i, &l) in self.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let p = coords(self.dims, i);
            match boxes[l as usize - 1].as_mut() {
                Some(b) => b.include(p),
                None => boxes[l as usize - 1] = Some(BoundingBox::point(p)),
            }
        }
        boxes
            .into_iter()
            .map(|b| b.expect("every label has a voxel"))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.count];
        for &l in &self.labels {
            if l != 0 {
                sizes[l as usize - 1] += 1;
            }
        }
        sizes
    }

    /// Voxel coordinates of one component (label `1..=count`).
    pub fn voxels(&self, label: u32) -> Vec<[usize; 3]> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| coords(self.dims, i))
            .collect()
    }
}

/// Breadth-first labelling of the non-zero voxels of `mask`.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> Components {
    let dims = mask.dims;
    let mut labels = vec![0u32; voxel_count(dims)];
    let offsets = connectivity.offsets();
    let mut queue = VecDeque::new();
    let mut count = 0u32;
    for start in 0..labels.len() {
        if mask.labels[start] == 0 || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let [z, y, x] = coords(dims, i);
            for off in &offsets {
                let nz = z as isize + off[0];
                let ny = y as isize + off[1];
                let nx = x as isize + off[2];
                if nz < 0 || ny < 0 || nx < 0 {
                    continue;
                }
                let (nz, ny, nx) = (nz as usize, ny as usize, nx as usize);
                if nz >= dims[0] || ny >= dims[1] || nx >= dims[2] {
                    continue;
                }
                let j = linear_index(dims, nz, ny, nx);
                if mask.labels[j] != 0 && labels[j] == 0 {
                    labels[j] = count;
                    queue.push_back(j);
                }
            }
        }
    }
    Components {
        dims,
        labels,
        count: count as usize,
    }
}
