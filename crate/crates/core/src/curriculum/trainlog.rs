use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataSource;
use crate::error::{Error, Result};
use crate::preprocess::SampleKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub source: DataSource,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub first_step: usize,
    pub steps: usize,
    /// Sample kinds that reached the optimizer.
    pub kinds: Vec<SampleKind>,
    /// Per epoch, `1 − mean batch loss`.
    pub train_dice: Vec<f64>,
    pub validation_dice: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub seed: u64,
    pub schedule: String,
    /// Hash of the experiment configuration, when known.
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub stages: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header {
        seed: u64,
        schedule: String,
        config_hash: String,
    },
    Step(StepRecord),
    Stage(StageRecord),
}

impl TrainLog {
    pub fn new(seed: u64, schedule: &str) -> Self {
        TrainLog {
            seed,
            schedule: schedule.to_string(),
            config_hash: String::new(),
            steps: Vec::new(),
            stages: Vec::new(),
        }
    }

    /// First step index of every stage after the first.
    pub fn boundaries(&self) -> Vec<usize> {
        self.stages.iter().skip(1).map(|s| s.first_step).collect()
    }

    /// JSON Lines: a header, then each stage's steps followed by its summary.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = |line: &Line| -> Result<()> {
            serde_json::to_writer(&mut w, line)?;
            w.write_all(b"\n").map_err(|e| Error::io(path, e))
        };
        emit(&Line::Header {
            seed: self.seed,
            schedule: self.schedule.clone(),
            config_hash: self.config_hash.clone(),
        })?;
        for stage in &self.stages {
            for s in &self.steps[stage.first_step..stage.first_step + stage.steps] {
                emit(&Line::Step(s.clone()))?;
            }
            emit(&Line::Stage(stage.clone()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut log: Option<TrainLog> = None;
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            match (serde_json::from_str::<Line>(&line)?, log.as_mut()) {
                (
                    Line::Header {
                        seed,
                        schedule,
                        config_hash,
                    },
                    None,
                ) => {
                    log = Some(TrainLog {
                        config_hash,
                        ..TrainLog::new(seed, &schedule)
                    })
                }
                (Line::Step(s), Some(l)) => l.steps.push(s),
                (Line::Stage(s), Some(l)) => l.stages.push(s),
                _ => {
                    return Err(Error::format(format!(
                        "{}: malformed train log",
                        path.display()
                    )))
                }
            }
        }
        log.ok_or_else(|| Error::format(format!("{}: empty train log", path.display())))
    }
}
