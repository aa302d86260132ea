use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cli, Command, ExperimentConfig, OutputLock};
use crate::curriculum::{
    cascade_predict, make_schedule, run_cascade, run_schedule_with, CascadeModel, ScheduleKind,
    StageSpec,
};
use crate::digest::{case_seed, config_hash};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, evaluate_case, render_table, MetricsReport};
use crate::network::{Network, Tiling};
use crate::phantom::generate_dataset;
use crate::preprocess::{
    generate_subvolumes, load_samples, prepare_case, sample_cases, save_samples, PreparedCase,
    PreprocessConfig, SampleKind, SampleSet,
};
use crate::volume::{raw, DatasetManifest, Mask, Split, Volume, LABEL_TUMOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub id: String,
    pub role: Role,
    pub image: PathBuf,
    pub labels: PathBuf,
    pub z_offset: usize,
}

/// Listing of a preprocessed directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessManifest {
    pub seed: u64,
    pub config_hash: String,
    pub preprocess_hash: String,
    pub dataset_hash: String,
    pub preprocess: PreprocessConfig,
    pub cases: Vec<PreparedEntry>,
}

impl PreprocessManifest {
    pub const FILE_NAME: &'static str = "preprocess.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load_cases(&self, dir: &Path, role: Role) -> Result<Vec<PreparedCase>> {
        self.cases
            .iter()
            .filter(|c| c.role == role)
            .map(|c| {
                Ok(PreparedCase {
                    id: c.id.clone(),
                    image: raw::read_volume(&dir.join(&c.image))?,
                    labels: raw::read_mask(&dir.join(&c.labels))?,
                    z_offset: c.z_offset,
                })
            })
            .collect()
    }
}

/// Written next to the checkpoints of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub schedule: ScheduleKind,
    pub seed: u64,
    pub config_hash: String,
    pub deterministic: bool,
    /// One file per stage, relative to the summary.
    pub checkpoints: Vec<PathBuf>,
    /// The model to evaluate; for the cascade, the liver network.
    pub final_checkpoint: PathBuf,
    pub tumor_checkpoint: Option<PathBuf>,
    pub seconds: f64,
}

impl TrainSummary {
    pub const FILE_NAME: &'static str = "train.json";
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn refuse_existing(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::invalid(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.deterministic |= cli.deterministic;
    Ok(cfg)
}

fn provenance(cfg: &ExperimentConfig, hash: &str) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("seed".to_string(), cfg.seed.to_string()),
        ("config_hash".to_string(), hash.to_string()),
        ("deterministic".to_string(), cfg.deterministic.to_string()),
    ])
}

pub(super) fn dispatch(cli: &Cli) -> Result<()> {
    let mut cfg = load_config(cli)?;
    match &cli.command {
        Command::Phantom { cases, split } => {
            if let Some(n) = cases {
                cfg.dataset.cases = *n;
            }
            if let Some(f) = split {
                cfg.dataset.split = *f;
            }
            cfg.validate()?;
            let out = cli.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
            phantom(&cfg, &out, cli.force)
        }
        Command::Preprocess { data } => {
            cfg.validate()?;
            let data = data.clone().unwrap_or_else(|| cfg.paths.data.clone());
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join("preprocessed"));
            preprocess(&cfg, &data, &out, cli.force)
        }
        Command::Train {
            data,
            schedule,
            epochs,
            lr,
        } => {
            if let Some(s) = schedule {
                cfg.training.schedule = *s;
            }
            if let Some(e) = epochs {
                cfg.training.epochs = *e;
            }
            if let Some(l) = lr {
                cfg.training.base_lr = *l;
            }
            cfg.validate()?;
            let data = data
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join("preprocessed"));
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join(cfg.training.schedule.name()));
            train(&cfg, &data, &out, cli.force)
        }
        Command::Eval {
            data,
            model,
            checkpoint,
            tumor_checkpoint,
            ground_truth,
            name,
            save_predictions,
        } => {
            cfg.validate()?;
            let data = data
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join("preprocessed"));
            let (source, default_out) = if *ground_truth {
                (Source::GroundTruth, cfg.paths.out.clone())
            } else if let Some(dir) = model {
                let path = dir.join(TrainSummary::FILE_NAME);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let summary: TrainSummary = serde_json::from_str(&text)?;
                let source = Source::Checkpoints {
                    network: dir.join(&summary.final_checkpoint),
                    tumor: summary.tumor_checkpoint.map(|t| dir.join(t)),
                };
                (source, dir.clone())
            } else if let Some(c) = checkpoint {
                let dir = c.parent().map(Path::to_path_buf).unwrap_or_default();
                (
                    Source::Checkpoints {
                        network: c.clone(),
                        tumor: tumor_checkpoint.clone(),
                    },
                    dir,
                )
            } else {
                return Err(Error::invalid(
                    "eval needs --model, --checkpoint or --ground-truth",
                ));
            };
            let out = cli.out.clone().unwrap_or(default_out);
            let name = name.clone().unwrap_or_else(|| source.default_name());
            let opts = EvalOptions {
                check_topology: cli.config.is_some(),
                save_predictions: *save_predictions,
                force: cli.force,
            };
            eval(&cfg, &data, source, &name, &out, opts)
        }
        Command::Report { files } => {
            let reports = files
                .iter()
                .map(|f| MetricsReport::load(f))
                .collect::<Result<Vec<_>>>()?;
            print!("{}", render_table(&reports)?);
            Ok(())
        }
        Command::Slices {
            volume,
            gt,
            pred,
            z,
        } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| cfg.paths.out.join("slices"));
            slices(&cfg, volume, gt, pred, z, &out, cli.force)
        }
    }
}

fn phantom(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<()> {
    refuse_existing(&out.join(DatasetManifest::FILE_NAME), force)?;
    let _lock = OutputLock::acquire(out)?;
    let m = generate_dataset(
        &cfg.phantom,
        cfg.dataset.cases,
        cfg.seed,
        cfg.dataset.split,
        out,
    )?;
    println!(
        "wrote {} cases ({} train, {} test) to {}",
        m.cases.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        out.display()
    );
    Ok(())
}

/// Picks `round(n·fraction)` validation cases, keeping at least one for
/// training.
fn validation_ids(train: &[String], fraction: f64, seed: u64) -> Vec<String> {
    if fraction <= 0.0 || train.len() < 2 {
        return Vec::new();
    }
    let k = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len() - 1);
    let mut ids = train.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(case_seed(
        seed,
        "validation",
    )));
    ids.truncate(k);
    ids
}

fn preprocess(cfg: &ExperimentConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    refuse_existing(&out.join(PreprocessManifest::FILE_NAME), force)?;
    let dataset = DatasetManifest::load(&data.join(DatasetManifest::FILE_NAME))?;
    let _lock = OutputLock::acquire(out)?;
    let hash = cfg.hash()?;
    let train_ids: Vec<String> = dataset.split(Split::Train).map(|c| c.id.clone()).collect();
    let held_out = validation_ids(&train_ids, cfg.training.validation_fraction, cfg.seed);

    let case_dir = out.join("cases");
    fs::create_dir_all(&case_dir).map_err(|e| Error::io(&case_dir, e))?;
    let mut entries = Vec::new();
    let mut train_cases = Vec::new();
    let mut validation = Vec::new();
    for c in &dataset.cases {
        let volume = raw::read_volume(&data.join(&c.volume))?;
        let mask = raw::read_mask(&data.join(&c.mask))?;
        let prepared = prepare_case(&c.id, &volume, &mask, &cfg.preprocess)?;
        let role = match c.split {
            Split::Test => Role::Test,
            Split::Train if held_out.contains(&c.id) => Role::Validation,
            Split::Train => Role::Train,
        };
        let image = PathBuf::from("cases").join(format!("{}_img.raw", c.id));
        let labels = PathBuf::from("cases").join(format!("{}_lab.raw", c.id));
        raw::write_volume(&prepared.image, &out.join(&image))?;
        raw::write_mask(&prepared.labels, &c.id, &out.join(&labels))?;
        info!("{}: {:?} after preprocessing", c.id, prepared.image.dims);
        entries.push(PreparedEntry {
            id: c.id.clone(),
            role,
            image,
            labels,
            z_offset: prepared.z_offset,
        });
        match role {
            Role::Train => train_cases.push(prepared),
            Role::Validation => validation.extend(generate_subvolumes(
                &c.id,
                &prepared.image,
                &prepared.labels,
                &cfg.preprocess,
            )?),
            Role::Test => {}
        }
    }
    if train_cases.is_empty() {
        return Err(Error::data("the dataset has no training cases"));
    }
    let set = sample_cases(&train_cases, &cfg.preprocess, cfg.seed)?;
    save_samples(&out.join("whole"), &set.whole, &hash, None)?;
    let patches: Vec<_> = set
        .positives
        .iter()
        .chain(&set.negatives)
        .cloned()
        .collect();
    save_samples(&out.join("patches"), &patches, &hash, Some(set.patch_dims))?;
    save_samples(&out.join("validation"), &validation, &hash, None)?;
    let manifest = PreprocessManifest {
        seed: cfg.seed,
        config_hash: hash,
        preprocess_hash: config_hash(&cfg.preprocess)?,
        dataset_hash: dataset.config_hash.clone(),
        preprocess: cfg.preprocess.clone(),
        cases: entries,
    };
    write_json(&out.join(PreprocessManifest::FILE_NAME), &manifest)?;
    println!(
        "prepared {} cases: {} whole, {} positive and {} negative patches of {:?}, {} validation inputs",
        manifest.cases.len(),
        set.whole.len(),
        set.positives.len(),
        set.negatives.len(),
        set.patch_dims,
        validation.len()
    );
    Ok(())
}

fn check_preprocess(cfg: &ExperimentConfig, manifest: &PreprocessManifest) -> Result<()> {
    if manifest.preprocess != cfg.preprocess {
        return Err(Error::invalid(format!(
            "preprocessing settings differ from those of the data (hash {}); rerun preprocess",
            manifest.preprocess_hash
        )));
    }
    Ok(())
}

fn train(cfg: &ExperimentConfig, data: &Path, out: &Path, force: bool) -> Result<()> {
    refuse_existing(&out.join(TrainSummary::FILE_NAME), force)?;
    let manifest = PreprocessManifest::load(data)?;
    check_preprocess(cfg, &manifest)?;
    let _lock = OutputLock::acquire(out)?;
    let hash = cfg.hash()?;
    let kind = cfg.training.schedule;
    let started = Instant::now();
    let mut meta = provenance(cfg, &hash);
    meta.insert("schedule".into(), kind.name().into());

    let summary = if kind == ScheduleKind::Cascade {
        let cases = manifest.load_cases(data, Role::Train)?;
        let stage = StageSpec::whole(cfg.training.base_lr, cfg.training.epochs);
        let (model, liver_log, tumor_log) = run_cascade(
            &cfg.network,
            &cases,
            &cfg.preprocess,
            &stage,
            cfg.training.cascade_margin,
            cfg.seed,
        )?;
        meta.insert("cascade_margin".into(), model.margin.to_string());
        let liver = PathBuf::from("cascade_liver.ckpt");
        let tumor = PathBuf::from("cascade_tumor.ckpt");
        model.liver.save(&out.join(&liver), None, meta.clone())?;
        model.tumor.save(&out.join(&tumor), None, meta)?;
        for (log, file) in [
            (liver_log, "train_log_liver.jsonl"),
            (tumor_log, "train_log_tumor.jsonl"),
        ] {
            let mut log = log;
            log.config_hash = hash.clone();
            log.write_jsonl(&out.join(file))?;
        }
        TrainSummary {
            schedule: kind,
            seed: cfg.seed,
            config_hash: hash.clone(),
            deterministic: cfg.deterministic,
            checkpoints: vec![liver.clone(), tumor.clone()],
            final_checkpoint: liver,
            tumor_checkpoint: Some(tumor),
            seconds: 0.0,
        }
    } else {
        let schedule = make_schedule(kind, cfg.training.base_lr, cfg.training.epochs)?;
        let (_, whole) = load_samples(&data.join("whole"))?;
        let (patch_manifest, patches) = load_samples(&data.join("patches"))?;
        let (_, validation) = load_samples(&data.join("validation"))?;
        let (positives, negatives) = patches
            .into_iter()
            .partition(|s| s.kind != SampleKind::PatchNegative);
        let set = SampleSet {
            whole,
            positives,
            negatives,
            patch_dims: patch_manifest
                .patch_dims
                .ok_or_else(|| Error::format("patch listing lacks patch dimensions"))?,
        };
        let mut checkpoints = Vec::new();
        let (_, mut log) = run_schedule_with(
            &cfg.network,
            &schedule,
            &set,
            &validation,
            cfg.seed,
            |i, net, opt| {
                let file = PathBuf::from(format!("{}_stage{i}.ckpt", kind.name()));
                let mut meta = meta.clone();
                meta.insert("stage".into(), i.to_string());
                net.save(&out.join(&file), Some(opt), meta)?;
                info!("stage {i} done, saved {}", file.display());
                checkpoints.push(file);
                Ok(())
            },
        )?;
        log.config_hash = hash.clone();
        log.write_jsonl(&out.join("train_log.jsonl"))?;
        for s in &log.stages {
            println!(
                "stage {}: {:?} lr {:e}, {} steps, final train dice {:.3}",
                s.stage,
                s.source,
                s.learning_rate,
                s.steps,
                s.train_dice.last().copied().unwrap_or(f64::NAN)
            );
        }
        TrainSummary {
            schedule: kind,
            seed: cfg.seed,
            config_hash: hash.clone(),
            deterministic: cfg.deterministic,
            final_checkpoint: checkpoints.last().cloned().expect("at least one stage"),
            checkpoints,
            tumor_checkpoint: None,
            seconds: 0.0,
        }
    };
    let summary = TrainSummary {
        seconds: started.elapsed().as_secs_f64(),
        ..summary
    };
    write_json(&out.join(TrainSummary::FILE_NAME), &summary)?;
    println!(
        "trained {} in {:.1} s, outputs in {}",
        kind,
        summary.seconds,
        out.display()
    );
    Ok(())
}

enum Source {
    GroundTruth,
    Checkpoints {
        network: PathBuf,
        tumor: Option<PathBuf>,
    },
}

impl Source {
    fn default_name(&self) -> String {
        match self {
            Source::GroundTruth => "ground-truth".into(),
            Source::Checkpoints { network, .. } => network
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "model".into()),
        }
    }
}

/// Segments tumor in a preprocessed image.
pub enum Predictor {
    Single { network: Network, tiling: Tiling },
    Cascade(CascadeModel),
}

impl Predictor {
    pub fn predict(&self, image: &Volume, threshold: f32) -> Result<Mask> {
        match self {
            Predictor::Single { network, tiling } => {
                network.predict_mask(image, *tiling, threshold)
            }
            Predictor::Cascade(model) => Ok(cascade_predict(model, image, threshold)?.tumor),
        }
    }
}

/// Tumor metrics of `predict` over `cases`, with per-case inference time.
pub fn evaluate_prepared(
    name: &str,
    cases: &[PreparedCase],
    mut predict: impl FnMut(&Volume) -> Result<Mask>,
) -> Result<(MetricsReport, Vec<Mask>)> {
    let mut metrics = Vec::with_capacity(cases.len());
    let mut predictions = Vec::with_capacity(cases.len());
    for case in cases {
        let gt = case.labels.binarize(LABEL_TUMOR)?;
        let started = Instant::now();
        let pred = predict(&case.image)?;
        let seconds = started.elapsed().as_secs_f64();
        let mut m = evaluate_case(&case.id, &pred, &gt)?;
        m.seconds = Some(seconds);
        metrics.push(m);
        predictions.push(pred);
    }
    Ok((aggregate(name, metrics)?, predictions))
}

struct EvalOptions {
    check_topology: bool,
    save_predictions: bool,
    force: bool,
}

fn load_network(
    path: &Path,
    cfg: &ExperimentConfig,
    check_topology: bool,
) -> Result<(Network, BTreeMap<String, String>)> {
    let (net, ckpt) = Network::load(path)?;
    if check_topology && net.config() != &cfg.network {
        return Err(Error::invalid(format!(
            "{} was trained with network {:?}, the configuration asks for {:?}",
            path.display(),
            net.config(),
            cfg.network
        )));
    }
    Ok((net, ckpt.metadata))
}

fn eval(
    cfg: &ExperimentConfig,
    data: &Path,
    source: Source,
    name: &str,
    out: &Path,
    opts: EvalOptions,
) -> Result<()> {
    let report_path = out.join(format!("report_{name}.json"));
    refuse_existing(&report_path, opts.force)?;
    let manifest = PreprocessManifest::load(data)?;
    let cases = manifest.load_cases(data, Role::Test)?;
    if cases.is_empty() {
        return Err(Error::data("the preprocessed data has no test cases"));
    }
    let tiling = Tiling {
        depth: manifest.preprocess.subvol_depth,
        stride: manifest.preprocess.subvol_stride,
    };
    let mut metadata = BTreeMap::from([
        ("data_config_hash".to_string(), manifest.config_hash.clone()),
        ("threshold".to_string(), cfg.threshold.to_string()),
    ]);
    let predictor = match source {
        Source::GroundTruth => None,
        Source::Checkpoints { network, tumor } => {
            let (net, meta) = load_network(&network, cfg, opts.check_topology)?;
            for (k, v) in &meta {
                if !k.starts_with("network") {
                    metadata.insert(k.clone(), v.clone());
                }
            }
            metadata.insert("checkpoint".into(), network.display().to_string());
            Some(match tumor {
                None => Predictor::Single {
                    network: net,
                    tiling,
                },
                Some(t) => {
                    let (tumor_net, _) = load_network(&t, cfg, opts.check_topology)?;
                    let margin = match meta.get("cascade_margin") {
                        Some(m) => m.parse().map_err(|_| {
                            Error::format(format!("bad cascade_margin {m:?} in checkpoint"))
                        })?,
                        None => cfg.training.cascade_margin,
                    };
                    Predictor::Cascade(CascadeModel {
                        liver: net,
                        tumor: tumor_net,
                        margin,
                        tiling,
                    })
                }
            })
        }
    };
    metadata
        .entry("seed".into())
        .or_insert_with(|| cfg.seed.to_string());
    let (mut report, predictions) = match &predictor {
        Some(p) => evaluate_prepared(name, &cases, |image| p.predict(image, cfg.threshold))?,
        None => {
            let mut gts = cases.iter();
            evaluate_prepared(name, &cases, move |_| {
                gts.next()
                    .expect("one call per case")
                    .labels
                    .binarize(LABEL_TUMOR)
            })?
        }
    };
    report.metadata = metadata;

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.save(&report_path)?;
    if opts.save_predictions {
        let dir = out.join(format!("predictions_{name}"));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (case, pred) in cases.iter().zip(&predictions) {
            raw::write_volume(&case.image, &dir.join(format!("{}_img.raw", case.id)))?;
            raw::write_mask(
                &case.labels,
                &case.id,
                &dir.join(format!("{}_gt.raw", case.id)),
            )?;
            raw::write_mask(pred, name, &dir.join(format!("{}_pred.raw", case.id)))?;
        }
    }
    print!("{}", render_table(std::slice::from_ref(&report))?);
    println!("report written to {}", report_path.display());
    Ok(())
}

fn slices(
    cfg: &ExperimentConfig,
    volume: &Path,
    gt: &Path,
    pred: &Path,
    zs: &[usize],
    out: &Path,
    force: bool,
) -> Result<()> {
    let volume = raw::read_volume(volume)?;
    let gt = raw::read_mask(gt)?;
    let pred = raw::read_mask(pred)?;
    let comment = format!("seed={} config_hash={}", cfg.seed, cfg.hash()?);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for &z in zs {
        let path = out.join(format!("slice_z{z:03}.ppm"));
        refuse_existing(&path, force)?;
        let img = super::render_slice(&volume, &gt, &pred, z, &comment)?;
        fs::write(&path, img).map_err(|e| Error::io(&path, e))?;
        println!("{}", path.display());
    }
    Ok(())
}
