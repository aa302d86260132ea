//! Sample sets on disk: one raw image and one raw target per sample plus a
//! JSON listing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Sample, SampleKind};
use crate::error::{Error, Result};
use crate::volume::{raw, Dims};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub case_id: String,
    pub kind: SampleKind,
    pub origin: [i64; 3],
    pub image: PathBuf,
    pub target: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub config_hash: String,
    /// Set when the directory holds tumor patches.
    pub patch_dims: Option<Dims>,
    pub samples: Vec<SampleEntry>,
}

impl SampleManifest {
    pub const FILE_NAME: &'static str = "samples.json";
}

fn kind_tag(kind: SampleKind) -> &'static str {
    match kind {
        SampleKind::Whole => "whole",
        SampleKind::PatchPositive => "pos",
        SampleKind::PatchNegative => "neg",
    }
}

pub fn save_samples(
    dir: &Path,
    samples: &[Sample],
    config_hash: &str,
    patch_dims: Option<Dims>,
) -> Result<SampleManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        s.validate()?;
        let stem = format!("{}_{}_{i:05}", s.case_id, kind_tag(s.kind));
        let image = PathBuf::from(format!("{stem}.img.raw"));
        let target = PathBuf::from(format!("{stem}.lab.raw"));
        raw::write_volume(&s.image, &dir.join(&image))?;
        raw::write_mask(&s.target, &s.case_id, &dir.join(&target))?;
        entries.push(SampleEntry {
            case_id: s.case_id.clone(),
            kind: s.kind,
            origin: s.origin,
            image,
            target,
        });
    }
    let manifest = SampleManifest {
        config_hash: config_hash.to_string(),
        patch_dims,
        samples: entries,
    };
    let path = dir.join(SampleManifest::FILE_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<SampleManifest> {
    let path = dir.join(SampleManifest::FILE_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_samples(dir: &Path) -> Result<(SampleManifest, Vec<Sample>)> {
    let manifest = load_manifest(dir)?;
    let samples = manifest
        .samples
        .iter()
        .map(|e| {
            let s = Sample {
                image: raw::read_volume(&dir.join(&e.image))?,
                target: raw::read_mask(&dir.join(&e.target))?,
                kind: e.kind,
                case_id: e.case_id.clone(),
                origin: e.origin,
            };
            s.validate()?;
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}
