use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PolicyKind;
use crate::error::{Error, Result};

pub const RESULT_HEADER: [&str; 11] = [
    "policy",
    "drift",
    "lambda",
    "seed",
    "episode",
    "adi",
    "orr",
    "train_adi",
    "train_orr",
    "mean_loss",
    "wall_time_s",
];

/// One episode of one cell. `adi` and `orr` come from the greedy
/// evaluation episode; the `train_*` columns from the exploring episode
/// before it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub policy: PolicyKind,
    pub drift: f64,
    pub lambda: f64,
    pub seed: u64,
    pub episode: u64,
    pub adi: f64,
    pub orr: f64,
    pub train_adi: f64,
    pub train_orr: f64,
    pub mean_loss: f64,
    pub wall_time_s: f64,
}

impl ResultRow {
    /// Equality on everything except wall time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self {
            wall_time_s: 0.0,
            ..self.clone()
        } == Self {
            wall_time_s: 0.0,
            ..other.clone()
        }
    }
}

pub fn read_rows(path: &Path) -> Result<Vec<ResultRow>> {
    let mut reader = csv::Reader::from_reader(std::io::BufReader::new(std::fs::File::open(path)?));
    let header = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .clone();
    if header.iter().ne(RESULT_HEADER) {
        return Err(Error::Parse(format!(
            "{}: unexpected header {:?}",
            path.display(),
            header
        )));
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn write_rows(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(std::io::BufWriter::new(std::fs::File::create(path)?));
    w.write_record(RESULT_HEADER).map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
