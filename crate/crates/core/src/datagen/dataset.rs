use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RewardTriplet;
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub segment_length: u32,
    pub triplets: Vec<RewardTriplet>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u64,
    segment_length: u32,
}

impl Dataset {
    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let header = Header { format_version: DATASET_FORMAT_VERSION, segment_length: self.segment_length };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for t in &self.triplets {
            serde_json::to_writer(&mut w, t)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses and validates a JSONL dataset. Line numbers start at 1.
    pub fn read_from<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or(Error::Parse { line: 1, message: "missing header".into() })??;
        let header: Header =
            serde_json::from_str(&first).map_err(|e| Error::Parse { line: 1, message: e.to_string() })?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version { found: header.format_version, expected: DATASET_FORMAT_VERSION });
        }
        if header.segment_length == 0 {
            return Err(Error::Validation { line: Some(1), message: "segment_length must be at least 1".into() });
        }
        let mut triplets = Vec::new();
        let mut starts = Vec::new();
        for (i, line) in lines.enumerate() {
            let no = i + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let t: RewardTriplet =
                serde_json::from_str(&line).map_err(|e| Error::Parse { line: no, message: e.to_string() })?;
            t.validate(header.segment_length).map_err(|e| Error::Validation {
                line: Some(no),
                message: match e {
                    Error::Validation { message, .. } => message,
                    other => other.to_string(),
                },
            })?;
            starts.push(no);
            triplets.push(t);
        }
        check_groups(&triplets, &starts)?;
        Ok(Dataset { segment_length: header.segment_length, triplets })
    }

    /// Triplets per `(problem_id, step_index)` group that are chosen, which
    /// must be exactly one everywhere.
    pub fn check_groups(&self) -> Result<()> {
        let lines: Vec<usize> = (0..self.triplets.len()).map(|i| i + 2).collect();
        check_groups(&self.triplets, &lines)
    }
}

fn check_groups(triplets: &[RewardTriplet], lines: &[usize]) -> Result<()> {
    let mut i = 0;
    while i < triplets.len() {
        let mut j = i;
        while j < triplets.len()
            && triplets[j].problem_id == triplets[i].problem_id
            && triplets[j].step_index == triplets[i].step_index
        {
            j += 1;
        }
        let chosen = triplets[i..j].iter().filter(|t| t.chosen).count();
        if chosen != 1 {
            return Err(Error::Validation {
                line: Some(lines[i]),
                message: format!(
                    "group ({}, step {}) has {chosen} chosen triplets",
                    triplets[i].problem_id, triplets[i].step_index
                ),
            });
        }
        i = j;
    }
    Ok(())
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.write_to(std::fs::File::create(path)?)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_from(BufReader::new(std::fs::File::open(path)?))
}
