use crate::error::{Error, Result};
use crate::volume::{linear_index, voxel_count, Dims, Mask, Spacing};

/// Foreground voxels with at least one background face neighbour; the
/// outside of the grid counts as background.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceSet {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Vec<[usize; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }
}

pub fn surface_voxels(mask: &Mask) -> SurfaceSet {
    let d = mask.dims;
    let fg = |z: usize, y: usize, x: usize| mask.labels[linear_index(d, z, y, x)] != 0;
    let mut voxels = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                if !fg(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == d[0]
                    || y + 1 == d[1]
                    || x + 1 == d[2]
                    || !fg(z - 1, y, x)
                    || !fg(z + 1, y, x)
                    || !fg(z, y - 1, x)
                    || !fg(z, y + 1, x)
                    || !fg(z, y, x - 1)
                    || !fg(z, y, x + 1);
                if boundary {
                    voxels.push([z, y, x]);
                }
            }
        }
    }
    SurfaceSet {
        dims: d,
        spacing: mask.spacing,
        voxels,
    }
}

/// Lower envelope of parabolas `(w·(i − q))² + f[q]` over one line, written
/// back into `f`. Infinite entries are not sites.
fn envelope_1d(f: &mut [f64], w: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    let pos = |i: usize| i as f64 * w;
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + pos(q) * pos(q);
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (fq - (f[last] + pos(last) * pos(last))) / (2.0 * (pos(q) - pos(last)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for i in 0..n {
        let x = pos(i);
        while k + 1 < v.len() && z[k + 1] < x {
            k += 1;
        }
        let d = x - pos(v[k]);
        out.push(d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared distance in mm from every voxel centre to the nearest site.
pub fn squared_distance_field(dims: Dims, spacing: Spacing, sites: &[[usize; 3]]) -> Vec<f64> {
    let mut f = vec![f64::INFINITY; voxel_count(dims)];
    for p in sites {
        f[linear_index(dims, p[0], p[1], p[2])] = 0.0;
    }
    let strides = [dims[1] * dims[2], dims[2], 1];
    let (mut v, mut z, mut out, mut line) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for axis in [2, 1, 0] {
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                line.clear();
                line.extend((0..dims[axis]).map(|t| f[base + t * strides[axis]]));
                envelope_1d(&mut line, spacing[axis], &mut v, &mut z, &mut out);
                for (t, &val) in line.iter().enumerate() {
                    f[base + t * strides[axis]] = val;
                }
            }
        }
    }
    f
}

/// Nearest-surface distances from every voxel of `a` to `b` followed by
/// those from `b` to `a`, in mm.
pub fn symmetric_surface_distances(a: &SurfaceSet, b: &SurfaceSet) -> Result<Vec<f64>> {
    if a.dims != b.dims {
        return Err(Error::shape(format!(
            "surface grids {:?} and {:?} differ",
            a.dims, b.dims
        )));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::data("surface distances need two non-empty surfaces"));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (from, to) in [(a, b), (b, a)] {
        let field = squared_distance_field(to.dims, to.spacing, &to.voxels);
        out.extend(
            from.voxels
                .iter()
                .map(|p| field[linear_index(from.dims, p[0], p[1], p[2])].sqrt()),
        );
    }
    Ok(out)
}

fn non_empty(d: &[f64]) -> Result<()> {
    if d.is_empty() {
        Err(Error::data("empty distance set"))
    } else {
        Ok(())
    }
}

pub fn assd(distances: &[f64]) -> Result<f64> {
    non_empty(distances)?;
    Ok(distances.iter().sum::<f64>() / distances.len() as f64)
}

pub fn msd(distances: &[f64]) -> Result<f64> {
    non_empty(distances)?;
    Ok(distances.iter().copied().fold(0.0, f64::max))
}

pub fn rmsd(distances: &[f64]) -> Result<f64> {
    non_empty(distances)?;
    Ok((distances.iter().map(|d| d * d).sum::<f64>() / distances.len() as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(dims: Dims, spacing: Spacing, pts: &[[usize; 3]]) -> Mask {
        let mut m = Mask::empty(dims, spacing).unwrap();
        for p in pts {
            m.labels[linear_index(dims, p[0], p[1], p[2])] = 1;
        }
        m
    }

    #[test]
    fn cube_surface() {
        let mut pts = Vec::new();
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    pts.push([z, y, x]);
                }
            }
        }
        let s = surface_voxels(&points([7, 7, 7], [1.0; 3], &pts));
        assert_eq!(s.len(), 26);
        assert!(!s.voxels.contains(&[3, 3, 3]));
    }

    #[test]
    fn full_grid_surface_is_border() {
        let m = Mask::new([4, 5, 6], [1.0; 3], vec![1; 120]).unwrap();
        assert_eq!(surface_voxels(&m).len(), 120 - 2 * 3 * 4);
    }

    #[test]
    fn single_voxel_distances() {
        let a = surface_voxels(&points([4, 4, 8], [1.0; 3], &[[1, 1, 1]]));
        let b = surface_voxels(&points([4, 4, 8], [1.0; 3], &[[1, 1, 4]]));
        let d = symmetric_surface_distances(&a, &b).unwrap();
        assert_eq!(d, vec![3.0, 3.0]);
        assert_eq!(
            (assd(&d).unwrap(), msd(&d).unwrap(), rmsd(&d).unwrap()),
            (3.0, 3.0, 3.0)
        );

        let a = surface_voxels(&points([4, 4, 4], [2.0, 1.0, 1.0], &[[1, 1, 1]]));
        let b = surface_voxels(&points([4, 4, 4], [2.0, 1.0, 1.0], &[[2, 1, 1]]));
        assert_eq!(symmetric_surface_distances(&a, &b).unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn aggregates() {
        let d = [3.0, 4.0];
        assert_eq!(assd(&d).unwrap(), 3.5);
        assert_eq!(msd(&d).unwrap(), 4.0);
        assert!((rmsd(&d).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!(assd(&[]).is_err());
    }

    #[test]
    fn field_matches_brute_force() {
        let dims = [5, 6, 7];
        let spacing = [2.5, 0.7, 1.3];
        let sites = [[0, 0, 0], [4, 5, 6], [2, 1, 3], [2, 4, 3]];
        let f = squared_distance_field(dims, spacing, &sites);
        for i in 0..voxel_count(dims) {
            let p = crate::volume::coords(dims, i);
            let best = sites
                .iter()
                .map(|q| {
                    (0..3)
                        .map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a]).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((f[i] - best).abs() < 1e-9, "{p:?}: {} vs {best}", f[i]);
        }
    }
}
