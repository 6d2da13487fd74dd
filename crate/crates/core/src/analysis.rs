//! Random dimension-preservation sweeps and dimension redundancy matrices.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{linear_classify_cv, CvConfig, EmbeddingTable};
use crate::rng::{name_hash, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub rate: f64,
    /// 0 for the all-dimensions baseline, 1.. for random trials.
    pub trial: usize,
    pub preserved_count: usize,
    pub preserved_hash: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub baseline: f64,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    /// Rows `rate,trial,preserved_count,accuracy`, baseline first.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rate,trial,preserved_count,accuracy\n");
        for r in &self.records {
            let _ = writeln!(s, "{:?},{},{},{:?}", r.rate, r.trial, r.preserved_count, r.accuracy);
        }
        s
    }
}

fn set_hash(keep: &[usize]) -> u64 {
    let text: Vec<String> = keep.iter().map(usize::to_string).collect();
    name_hash(&text.join(","))
}

/// Mean cross-validated accuracy with only the columns in `keep` retained.
pub fn preserved_accuracy(table: &EmbeddingTable, keep: &[usize], cv: &CvConfig) -> Result<f64> {
    Ok(linear_classify_cv(&table.masked(keep), cv)?.mean)
}

/// Accuracy after zeroing all but `round(rate·D)` random columns, for each
/// rate and trial. `cv` is used unchanged for every evaluation, so results
/// depend only on the preserved set.
pub fn dimension_sweep(
    table: &EmbeddingTable,
    rates: &[f64],
    trials_per_rate: usize,
    cv: &CvConfig,
    rng: &mut Rng,
) -> Result<SweepResult> {
    let d = table.dim();
    for &rate in rates {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(Error::Invalid(format!("sweep rate {rate} outside (0, 1]")));
        }
        if (rate * d as f64).round() as usize == 0 {
            return Err(Error::Invalid(format!("rate {rate} preserves no dimension of {d}")));
        }
    }
    let all: Vec<usize> = (0..d).collect();
    let baseline = preserved_accuracy(table, &all, cv)?;
    let mut records = vec![SweepRecord {
        rate: 1.0,
        trial: 0,
        preserved_count: d,
        preserved_hash: set_hash(&all),
        accuracy: baseline,
    }];
    for &rate in rates {
        let count = (rate * d as f64).round() as usize;
        for trial in 1..=trials_per_rate {
            let mut keep = index::sample(rng, d, count).into_vec();
            keep.sort_unstable();
            records.push(SweepRecord {
                rate,
                trial,
                preserved_count: count,
                preserved_hash: set_hash(&keep),
                accuracy: preserved_accuracy(table, &keep, cv)?,
            });
        }
    }
    Ok(SweepResult { baseline, records })
}

/// Absolute Pearson correlation between embedding columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub dim: usize,
    /// Row-major `dim × dim`.
    pub matrix: Vec<f64>,
    pub mean_abs_offdiag: f64,
}

pub fn redundancy_matrix(table: &EmbeddingTable) -> Result<RedundancyReport> {
    let m = table.rows();
    if m < 2 {
        return Err(Error::Invalid("redundancy analysis needs at least 2 rows".into()));
    }
    let d = table.dim();
    let mut centered = vec![vec![0.0; m]; d];
    let mut energy = vec![0.0; d];
    for (k, col) in centered.iter_mut().enumerate() {
        let values: Vec<f64> = (0..m).map(|i| table.data.get(i, k)).collect();
        let mean = values.iter().sum::<f64>() / m as f64;
        let scale = values.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1.0);
        for (c, x) in col.iter_mut().zip(&values) {
            *c = x - mean;
        }
        let ss: f64 = col.iter().map(|c| c * c).sum();
        // Numerically constant columns are treated as uncorrelated with everything.
        energy[k] = if (ss / m as f64).sqrt() > 1e-12 * scale { ss } else { 0.0 };
    }
    let mut matrix = vec![0.0; d * d];
    for k in 0..d {
        if energy[k] == 0.0 {
            continue;
        }
        matrix[k * d + k] = 1.0;
        for l in k + 1..d {
            if energy[l] == 0.0 {
                continue;
            }
            let cross: f64 = centered[k].iter().zip(&centered[l]).map(|(a, b)| a * b).sum();
            let r = (cross / (energy[k].sqrt() * energy[l].sqrt())).abs().min(1.0);
            matrix[k * d + l] = r;
            matrix[l * d + k] = r;
        }
    }
    let off: f64 = (0..d)
        .flat_map(|k| (0..d).filter(move |&l| l != k).map(move |l| (k, l)))
        .map(|(k, l)| matrix[k * d + l])
        .sum();
    let pairs = (d * d.saturating_sub(1)).max(1) as f64;
    Ok(RedundancyReport {
        dim: d,
        matrix,
        mean_abs_offdiag: off / pairs,
    })
}

impl RedundancyReport {
    pub fn get(&self, k: usize, l: usize) -> f64 {
        self.matrix[k * self.dim + l]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.matrix.chunks(self.dim.max(1)) {
            let cells: Vec<String> = row.iter().map(|x| format!("{x:?}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain-text graymap with one pixel per entry; darker means more correlated.
    pub fn to_pgm(&self) -> String {
        let mut s = format!("P2\n{} {}\n255\n", self.dim, self.dim);
        for row in self.matrix.chunks(self.dim.max(1)) {
            let px: Vec<String> = row
                .iter()
                .map(|c| ((1.0 - c) * 255.0).round().clamp(0.0, 255.0).to_string())
                .collect();
            s.push_str(&px.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn write(&self, csv: &Path, pgm: &Path) -> Result<()> {
        fs::write(csv, self.to_csv())?;
        fs::write(pgm, self.to_pgm())?;
        Ok(())
    }
}
