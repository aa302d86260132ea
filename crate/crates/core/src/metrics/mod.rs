//! Overlap and surface-distance evaluation of binary segmentations.
//!
//! Empty-mask conventions: two empty masks agree perfectly (DC 1, VOE 0);
//! exactly one empty mask gives DC 0 and VOE 1. RVD is undefined for an
//! empty ground truth and surface distances are undefined when either mask
//! is empty; such cases are flagged and left out of the matching means.

mod report;
mod surface;

use log::warn;
use serde::{Deserialize, Serialize};

pub use report::{render_table, MetricsReport, Summary, METRIC_COLUMNS};
pub use surface::{
    assd, msd, rmsd, squared_distance_field, surface_voxels, symmetric_surface_distances,
    SurfaceSet,
};

use crate::error::{Error, Result};
use crate::volume::Mask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverlapCounts {
    pub pred: u64,
    pub gt: u64,
    pub intersection: u64,
    pub union: u64,
}

impl OverlapCounts {
    pub fn dice(&self) -> f64 {
        if self.pred + self.gt == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / (self.pred + self.gt) as f64
        }
    }

    pub fn voe(&self) -> f64 {
        if self.union == 0 {
            0.0
        } else {
            1.0 - self.intersection as f64 / self.union as f64
        }
    }

    /// Signed `(|P| − |G|) / |G|`; `None` for an empty ground truth.
    pub fn rvd(&self) -> Option<f64> {
        (self.gt > 0).then(|| (self.pred as f64 - self.gt as f64) / self.gt as f64)
    }
}

fn check_pair(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dims != gt.dims {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.dims, gt.dims
        )));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::invalid("metrics take binary masks"));
    }
    Ok(())
}

pub fn overlap_counts(pred: &Mask, gt: &Mask) -> Result<OverlapCounts> {
    check_pair(pred, gt)?;
    let mut c = OverlapCounts::default();
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        let (p, g) = (p != 0, g != 0);
        c.pred += p as u64;
        c.gt += g as u64;
        c.intersection += (p && g) as u64;
        c.union += (p || g) as u64;
    }
    Ok(c)
}

pub fn dice_per_case(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(overlap_counts(pred, gt)?.dice())
}

pub fn voe(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(overlap_counts(pred, gt)?.voe())
}

pub fn rvd(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    Ok(overlap_counts(pred, gt)?.rvd())
}

/// Dice of the counts pooled over all cases.
pub fn dice_global_counts(counts: &[OverlapCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::invalid("global dice needs at least one case"));
    }
    let pooled = counts
        .iter()
        .fold(OverlapCounts::default(), |a, c| OverlapCounts {
            pred: a.pred + c.pred,
            gt: a.gt + c.gt,
            intersection: a.intersection + c.intersection,
            union: a.union + c.union,
        });
    Ok(pooled.dice())
}

pub fn dice_global(cases: &[(&Mask, &Mask)]) -> Result<f64> {
    let counts = cases
        .iter()
        .map(|(p, g)| overlap_counts(p, g))
        .collect::<Result<Vec<_>>>()?;
    dice_global_counts(&counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub counts: OverlapCounts,
    pub dc: f64,
    pub voe: f64,
    pub rvd: Option<f64>,
    pub assd_mm: Option<f64>,
    pub msd_mm: Option<f64>,
    pub rmsd_mm: Option<f64>,
    /// Inference wall time, when measured.
    pub seconds: Option<f64>,
}

impl CaseMetrics {
    pub fn rvd_degenerate(&self) -> bool {
        self.rvd.is_none()
    }

    pub fn surface_degenerate(&self) -> bool {
        self.assd_mm.is_none()
    }
}

/// All seven criteria for one aligned pair; distances use the mask spacing.
pub fn evaluate_case(id: &str, pred: &Mask, gt: &Mask) -> Result<CaseMetrics> {
    let counts = overlap_counts(pred, gt)?;
    if pred.spacing != gt.spacing {
        return Err(Error::invalid(format!(
            "case {id}: spacings {:?} and {:?} differ",
            pred.spacing, gt.spacing
        )));
    }
    let (sp, sg) = (surface_voxels(pred), surface_voxels(gt));
    let (assd_mm, msd_mm, rmsd_mm) = if sp.is_empty() || sg.is_empty() {
        warn!("case {id}: empty surface, distance metrics left out");
        (None, None, None)
    } else {
        let d = symmetric_surface_distances(&sp, &sg)?;
        (Some(assd(&d)?), Some(msd(&d)?), Some(rmsd(&d)?))
    };
    Ok(CaseMetrics {
        id: id.to_string(),
        counts,
        dc: counts.dice(),
        voe: counts.voe(),
        rvd: counts.rvd(),
        assd_mm,
        msd_mm,
        rmsd_mm,
        seconds: None,
    })
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (s, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Means over cases (defined values only) plus pooled DG.
pub fn aggregate(name: &str, cases: Vec<CaseMetrics>) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::invalid("cannot aggregate zero cases"));
    }
    let counts: Vec<_> = cases.iter().map(|c| c.counts).collect();
    let summary = Summary {
        cases: cases.len(),
        dc: mean_of(cases.iter().map(|c| Some(c.dc))).expect("non-empty"),
        dg: dice_global_counts(&counts)?,
        voe: mean_of(cases.iter().map(|c| Some(c.voe))).expect("non-empty"),
        rvd: mean_of(cases.iter().map(|c| c.rvd)),
        rvd_abs: mean_of(cases.iter().map(|c| c.rvd.map(f64::abs))),
        assd_mm: mean_of(cases.iter().map(|c| c.assd_mm)),
        msd_mm: mean_of(cases.iter().map(|c| c.msd_mm)),
        rmsd_mm: mean_of(cases.iter().map(|c| c.rmsd_mm)),
        rvd_degenerate: cases
            .iter()
            .filter(|c| c.rvd_degenerate())
            .map(|c| c.id.clone())
            .collect(),
        surface_degenerate: cases
            .iter()
            .filter(|c| c.surface_degenerate())
            .map(|c| c.id.clone())
            .collect(),
        mean_seconds: mean_of(cases.iter().map(|c| c.seconds)),
    };
    Ok(MetricsReport {
        name: name.to_string(),
        metadata: Default::default(),
        summary,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::linear_index;

    fn mask(pts: &[[usize; 3]]) -> Mask {
        let dims = [4, 4, 4];
        let mut m = Mask::empty(dims, [1.0; 3]).unwrap();
        for p in pts {
            m.labels[linear_index(dims, p[0], p[1], p[2])] = 1;
        }
        m
    }

    fn row(x: usize, n: usize) -> Vec<[usize; 3]> {
        (0..n).map(|i| [x, i / 4, i % 4]).collect()
    }

    #[test]
    fn count_examples() {
        let a = mask(&row(0, 5));
        assert_eq!(
            overlap_counts(&a, &a).unwrap(),
            OverlapCounts {
                pred: 5,
                gt: 5,
                intersection: 5,
                union: 5
            }
        );
        let c = overlap_counts(&mask(&row(0, 4)), &mask(&row(1, 6))).unwrap();
        assert_eq!((c.pred, c.gt, c.intersection, c.union), (4, 6, 0, 10));
        assert_eq!((c.dice(), c.voe()), (0.0, 1.0));

        let p = mask(&[[0, 0, 0], [0, 0, 1], [0, 0, 2], [3, 3, 3]]);
        let g = mask(&[
            [0, 0, 0],
            [0, 0, 1],
            [0, 0, 2],
            [1, 1, 1],
            [1, 1, 2],
            [1, 2, 2],
        ]);
        let c = overlap_counts(&p, &g).unwrap();
        assert_eq!((c.pred, c.gt, c.intersection, c.union), (4, 6, 3, 7));
        assert!((c.dice() - 0.6).abs() < 1e-15);
        assert!((c.voe() - 4.0 / 7.0).abs() < 1e-15);
        assert!((c.rvd().unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pooled_versus_mean() {
        let a = OverlapCounts {
            pred: 10,
            gt: 10,
            intersection: 10,
            union: 10,
        };
        let b = OverlapCounts {
            pred: 4,
            gt: 6,
            intersection: 3,
            union: 7,
        };
        let dg = dice_global_counts(&[a, b]).unwrap();
        assert!((dg - 26.0 / 30.0).abs() < 1e-15);
        assert!(((a.dice() + b.dice()) / 2.0 - 0.8).abs() < 1e-15);
        assert!(dice_global_counts(&[]).is_err());
    }

    #[test]
    fn empty_conventions() {
        let e = mask(&[]);
        let c = overlap_counts(&e, &e).unwrap();
        assert_eq!((c.dice(), c.voe(), c.rvd()), (1.0, 0.0, None));
        let m = evaluate_case("x", &mask(&[[1, 1, 1]]), &e).unwrap();
        assert_eq!((m.dc, m.voe), (0.0, 1.0));
        assert!(m.rvd_degenerate() && m.surface_degenerate());
    }

    #[test]
    fn degenerate_case_excluded_from_distance_means() {
        let a = mask(&[[1, 1, 1]]);
        let b = mask(&[[1, 1, 3]]);
        let cases = vec![
            evaluate_case("a", &a, &a).unwrap(),
            evaluate_case("b", &a, &b).unwrap(),
            evaluate_case("c", &mask(&[]), &b).unwrap(),
        ];
        let r = aggregate("t", cases).unwrap();
        assert_eq!(r.summary.assd_mm, Some(1.0));
        assert_eq!(r.summary.surface_degenerate, vec!["c".to_string()]);
        assert!((r.summary.dc - 1.0 / 3.0).abs() < 1e-15);
    }
}
