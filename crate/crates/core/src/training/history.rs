use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::error::{Error, Result};

pub const HISTORY_HEADER: &str = "epoch,split,cd,emd";

/// One metric row: train rows hold train-mode averages over the epoch,
/// val rows evaluation-mode results after it (epoch 0 = initialization).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub cd: f64,
    pub emd: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut text = String::from(HISTORY_HEADER);
    text.push('\n');
    for r in history {
        // `{}` prints the shortest representation that parses back exactly
        text.push_str(&format!("{},{},{},{}\n", r.epoch, r.split.as_str(), r.cd, r.emd));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => return Err(Error::format(path, format!("expected header {HISTORY_HEADER:?}"))),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 fields, got {}", fields.len())));
        }
        let split = match fields[1] {
            "train" => Split::Train,
            "val" => Split::Val,
            other => return Err(parse_err(format!("unknown split {other:?}"))),
        };
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(format!("{s:?}: {e}")));
        out.push(EpochRecord {
            epoch: fields[0].parse().map_err(|e| parse_err(format!("epoch: {e}")))?,
            split,
            cd: num(fields[2])?,
            emd: num(fields[3])?,
        });
    }
    Ok(out)
}
