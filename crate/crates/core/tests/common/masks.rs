//! Set-counting and all-pairs oracles for the segmentation metrics.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Voxel = (usize, usize, usize);

pub fn voxel_set(dims: [usize; 3], labels: &[u8]) -> HashSet<Voxel> {
    let mut s = HashSet::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                if labels[(z * dims[1] + y) * dims[2] + x] != 0 {
                    s.insert((z, y, x));
                }
            }
        }
    }
    s
}

pub struct OracleOverlap {
    pub dc: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub pred: usize,
    pub gt: usize,
    pub inter: usize,
}

pub fn overlap(p: &HashSet<Voxel>, g: &HashSet<Voxel>) -> OracleOverlap {
    let inter = p.intersection(g).count();
    let union = p.union(g).count();
    let (dc, voe) = if union == 0 {
        (1.0, 0.0)
    } else {
        (
            2.0 * inter as f64 / (p.len() + g.len()) as f64,
            1.0 - inter as f64 / union as f64,
        )
    };
    OracleOverlap {
        dc,
        voe,
        rvd: (!g.is_empty()).then(|| (p.len() as f64 - g.len() as f64) / g.len() as f64),
        pred: p.len(),
        gt: g.len(),
        inter,
    }
}

/// Foreground voxels with a face neighbour outside the set or the grid.
pub fn surface(dims: [usize; 3], s: &HashSet<Voxel>) -> Vec<Voxel> {
    let mut out: Vec<Voxel> = s
        .iter()
        .copied()
        .filter(|&(z, y, x)| {
            let p = [z as i64, y as i64, x as i64];
            [
                [1, 0, 0],
                [-1, 0, 0],
                [0, 1, 0],
                [0, -1, 0],
                [0, 0, 1],
                [0, 0, -1],
            ]
            .iter()
            .any(|d: &[i64; 3]| {
                let q: Vec<i64> = (0..3).map(|a| p[a] + d[a]).collect();
                let outside = (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64);
                outside || !s.contains(&(q[0] as usize, q[1] as usize, q[2] as usize))
            })
        })
        .collect();
    out.sort();
    out
}

fn nearest(p: Voxel, to: &[Voxel], spacing: [f64; 3]) -> f64 {
    to.iter()
        .map(|&q| {
            let dz = (p.0 as f64 - q.0 as f64) * spacing[0];
            let dy = (p.1 as f64 - q.1 as f64) * spacing[1];
            let dx = (p.2 as f64 - q.2 as f64) * spacing[2];
            (dz * dz + dy * dy + dx * dx).sqrt()
        })
        .fold(f64::INFINITY, f64::min)
}

/// (ASSD, MSD, RMSD) by exhaustive nearest-neighbour search in both
/// directions.
pub fn surface_metrics(a: &[Voxel], b: &[Voxel], spacing: [f64; 3]) -> Option<(f64, f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let d: Vec<f64> = a
        .iter()
        .map(|&p| nearest(p, b, spacing))
        .chain(b.iter().map(|&p| nearest(p, a, spacing)))
        .collect();
    let n = d.len() as f64;
    Some((
        d.iter().sum::<f64>() / n,
        d.iter().copied().fold(0.0, f64::max),
        (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt(),
    ))
}

/// Random 0/1 labels: a blob plus salt noise, sometimes empty.
pub fn random_labels(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<u8> {
    let n = dims.iter().product();
    match rng.random_range(0..10) {
        0 => vec![0; n],
        1..=4 => {
            let density = rng.random_range(0.05..0.6);
            (0..n).map(|_| rng.random_bool(density) as u8).collect()
        }
        _ => {
            let c: Vec<f64> = dims
                .iter()
                .map(|&d| rng.random_range(0.0..d as f64))
                .collect();
            let r = rng.random_range(1.0..4.0);
            let mut out = vec![0u8; n];
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let d2 = (z as f64 - c[0]).powi(2)
                            + (y as f64 - c[1]).powi(2)
                            + (x as f64 - c[2]).powi(2);
                        let noise = rng.random_bool(0.05);
                        out[(z * dims[1] + y) * dims[2] + x] = ((d2 <= r * r) ^ noise) as u8;
                    }
                }
            }
            out
        }
    }
}
