//! JSON-lines dataset files and the vocabulary manifest.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DatasetRecord, EditResult, Instruction, PairLabels, PrefLabel, Scene, Scores, Vocabs};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: schema version {found}, expected {expected}")]
    Version {
        path: PathBuf,
        line: usize,
        found: u64,
        expected: u32,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRecord {
    schema_version: u32,
    scene: Scene,
    instruction: Instruction,
    result_a: EditResult,
    result_b: EditResult,
    labels_if: PrefLabel,
    labels_vq: PrefLabel,
    gt_a: Scores,
    gt_b: Scores,
    expl_a: Vec<String>,
    expl_b: Vec<String>,
    noise_flags: [bool; 2],
}

impl From<&DatasetRecord> for WireRecord {
    fn from(r: &DatasetRecord) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: r.scene.clone(),
            instruction: r.instruction.clone(),
            result_a: r.result_a.clone(),
            result_b: r.result_b.clone(),
            labels_if: r.labels.instruction,
            labels_vq: r.labels.visual,
            gt_a: r.gt_a,
            gt_b: r.gt_b,
            expl_a: r.expl_a.clone(),
            expl_b: r.expl_b.clone(),
            noise_flags: r.labels.flipped,
        }
    }
}

impl From<WireRecord> for DatasetRecord {
    fn from(w: WireRecord) -> Self {
        Self {
            scene: w.scene,
            instruction: w.instruction,
            result_a: w.result_a,
            result_b: w.result_b,
            labels: PairLabels {
                instruction: w.labels_if,
                visual: w.labels_vq,
                flipped: w.noise_flags,
            },
            gt_a: w.gt_a,
            gt_b: w.gt_b,
            expl_a: w.expl_a,
            expl_b: w.expl_b,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(&WireRecord::from(r)).expect("records serialize");
        w.write_all(line.as_bytes()).map_err(io_err(path))?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(found) => {
                return Err(DatasetError::Version {
                    path: path.to_path_buf(),
                    line: line_no,
                    found,
                    expected: SCHEMA_VERSION,
                })
            }
            None => return Err(parse("missing schema_version".into())),
        }
        let wire: WireRecord = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
        out.push(wire.into());
    }
    Ok(out)
}

pub fn write_vocab(vocabs: &Vocabs, path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(vocabs).expect("vocab serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocabs, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}
