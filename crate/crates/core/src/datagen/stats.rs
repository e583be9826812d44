use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

/// Reward statistics of one `(bucket, step)` cell. Bucket `n` holds the
/// triplets whose problem's chosen path is `(n-1)L <= |y| < nL` tokens long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepBucketStats {
    pub bucket: usize,
    pub step: usize,
    pub count: usize,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

/// Bucket of a completed response of `len` tokens.
pub fn bucket_of(len: u64, segment_length: u32) -> usize {
    (len / u64::from(segment_length)) as usize + 1
}

pub fn step_bucket_stats(dataset: &Dataset) -> Result<Vec<StepBucketStats>> {
    if dataset.triplets.is_empty() {
        return Err(Error::usage("dataset is empty"));
    }
    let mut lengths: HashMap<&str, u64> = HashMap::new();
    for t in dataset.triplets.iter().filter(|t| t.chosen) {
        *lengths.entry(&t.problem_id).or_default() += u64::from(t.action_tokens);
    }
    let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for t in &dataset.triplets {
        let len = lengths.get(t.problem_id.as_str()).copied().unwrap_or(0);
        cells.entry((bucket_of(len, dataset.segment_length), t.step_index)).or_default().push(t.reward);
    }
    Ok(cells
        .into_iter()
        .map(|((bucket, step), xs)| {
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let variance = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            StepBucketStats { bucket, step, count: xs.len(), mean, variance: variance.max(0.0) }
        })
        .collect())
}

/// CSV with columns `bucket,step,count,mean,variance`.
pub fn write_stats_csv<W: Write>(stats: &[StepBucketStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in stats {
        w.serialize(s).map_err(crate::search::csv_error)?;
    }
    w.flush()?;
    Ok(())
}
