//! JSON-lines trace formats: sparse index sets (per layer and head) and the
//! block-access sequence consumed by the cache simulator.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index_gen::{BlockIndexSet, Pattern};
use crate::kv_cache::TraceRecord;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {0}: {1}")]
    Parse(usize, serde_json::Error),
}

/// One emitted index set: which key blocks each query block of a head reads.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexSetRecord {
    pub layer: usize,
    pub head: usize,
    pub pattern: Pattern,
    pub blocks: Vec<Vec<usize>>,
}

impl IndexSetRecord {
    pub fn new(layer: usize, set: &BlockIndexSet) -> IndexSetRecord {
        IndexSetRecord {
            layer,
            head: set.head,
            pattern: set.pattern,
            blocks: set.blocks.clone(),
        }
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), TraceError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_block_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| TraceError::Parse(i + 1, e))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_trace_round_trip() {
        let dir = std::env::temp_dir().join(format!("fp-trace-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("trace.jsonl");
        let records = vec![
            TraceRecord { kv_head: 0, block: 3, consumers: 2 },
            TraceRecord { kv_head: 1, block: 0, consumers: 5 },
        ];
        write_jsonl(&path, &records).unwrap();
        let back = read_block_trace(&path).unwrap();
        assert_eq!(back, records);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn index_record_round_trips_pattern_names() {
        let rec = IndexSetRecord {
            layer: 1,
            head: 2,
            pattern: Pattern::VerticalSlash,
            blocks: vec![vec![0], vec![0, 1]],
        };
        let json = serde_json::to_string(&rec).unwrap();
        assert!(json.contains("\"vertical_slash\""));
        let back: IndexSetRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }
}
