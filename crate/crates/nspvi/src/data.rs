//! Dataset and checkpoint IO. Sequences travel as JSON lines
//! (`{"T": 20.0, "events": [{"t": 1.5, "k": 1}, ...]}`, 1-based types);
//! checkpoints as one versioned JSON container.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EventSeq, ModelParams};
use crate::train::LogRecord;
use crate::variational::{UnspParams, UsapParams};

#[derive(Debug, Serialize, Deserialize)]
struct JsonEvent {
    t: f64,
    k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonSeq {
    #[serde(rename = "T")]
    window: f64,
    events: Vec<JsonEvent>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::InvalidData(format!("{}: {source}", path.display()))
}

/// Read a JSON-lines dataset, validating sortedness, windows, and the
/// 1-based type range. Errors carry the offending line number.
pub fn read_dataset(path: &Path, n_types: usize) -> Result<Vec<EventSeq>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: JsonSeq = serde_json::from_str(&line).map_err(|e| {
            Error::InvalidData(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        let events = seq
            .events
            .iter()
            .map(|ev| {
                if ev.k == 0 {
                    return Err(Error::InvalidData(format!(
                        "{}:{}: event type 0 (types are 1-based)",
                        path.display(),
                        lineno + 1
                    )));
                }
                Ok((ev.t, ev.k - 1))
            })
            .collect::<Result<Vec<_>>>()?;
        let seq = EventSeq::new(events, seq.window, n_types).map_err(|e| {
            Error::InvalidData(format!("{}:{}: {e}", path.display(), lineno + 1))
        })?;
        out.push(seq);
    }
    Ok(out)
}

/// Write sequences as JSON lines (types converted back to 1-based).
pub fn write_dataset(path: &Path, seqs: &[EventSeq]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for seq in seqs {
        let line = JsonSeq {
            window: seq.window,
            events: seq
                .events
                .iter()
                .map(|&(t, k)| JsonEvent { t, k: k + 1 })
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| {
            Error::InvalidData(format!("{}: {e}", path.display()))
        })?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters plus the link-function convention, so a reader can
/// reconstruct constrained values without this crate's source.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    /// Human-readable record of how raw values map to constrained ones.
    pub links: String,
    pub model: ModelParams,
    pub unsp: UnspParams,
    pub usap: UsapParams,
    pub log: Vec<LogRecord>,
}

impl Checkpoint {
    pub fn new(
        model: ModelParams,
        unsp: UnspParams,
        usap: UsapParams,
        log: Vec<LogRecord>,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            links: "kernel params: softplus(raw) + 1e-3; base rates: softplus(raw) + 1e-8"
                .into(),
            model,
            unsp,
            usap,
            log,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        serde_json::to_writer(BufWriter::new(file), self)
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_err(path, e))?;
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidData(format!(
                "checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::fixtures::one_hidden_model;
    use crate::variational::fixtures::small_usap;

    fn tmp(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("nspvi-test-{name}-{}", std::process::id()));
        p
    }

    #[test]
    fn dataset_round_trip() {
        let path = tmp("roundtrip.jsonl");
        let seqs = vec![
            EventSeq::new(vec![(1.5, 0), (3.0, 1)], 20.0, 2).unwrap(),
            EventSeq::new(vec![], 20.0, 2).unwrap(),
        ];
        write_dataset(&path, &seqs).unwrap();
        let back = read_dataset(&path, 2).unwrap();
        assert_eq!(back, seqs);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn rejection_carries_line_numbers() {
        let path = tmp("bad.jsonl");
        std::fs::write(
            &path,
            "{\"T\": 20.0, \"events\": []}\n{\"T\": 20.0, \"events\": [{\"t\": 25.0, \"k\": 1}]}\n",
        )
        .unwrap();
        let err = read_dataset(&path, 1).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        // k = 0 rejected (1-based)
        std::fs::write(&path, "{\"T\": 20.0, \"events\": [{\"t\": 1.0, \"k\": 0}]}\n").unwrap();
        let err = read_dataset(&path, 1).unwrap_err().to_string();
        assert!(err.contains("1-based"), "{err}");
        // unsorted
        std::fs::write(
            &path,
            "{\"T\": 20.0, \"events\": [{\"t\": 3.0, \"k\": 1}, {\"t\": 1.0, \"k\": 1}]}\n",
        )
        .unwrap();
        assert!(read_dataset(&path, 1).is_err());
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn checkpoint_round_trip() {
        let path = tmp("ckpt.json");
        let model = one_hidden_model(1.0, 2.0, 0.15);
        let unsp = crate::train::init_unsp(&model);
        let usap = small_usap(vec![1, 1]);
        let ckpt = Checkpoint::new(model, unsp, usap, vec![]);
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, ckpt.model);
        assert_eq!(back.unsp, ckpt.unsp);
        assert_eq!(back.usap, ckpt.usap);
        std::fs::remove_file(&path).ok();
    }
}
