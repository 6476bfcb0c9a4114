//! Tick data ingestion: `time,value` CSV with a header row.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DataSection;
use crate::error::CliError;

/// Affine unit change `t' = t / time_scale`, `y' = (y - value_offset) / value_scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub time_scale: f64,
    pub value_scale: f64,
    pub value_offset: f64,
}

impl Normalization {
    pub fn from_config(d: &DataSection) -> Self {
        Normalization {
            time_scale: d.time_scale,
            value_scale: d.value_scale,
            value_offset: d.value_offset,
        }
    }

    pub fn value(&self, y: f64) -> f64 {
        (y - self.value_offset) / self.value_scale
    }

    pub fn denormalize_value(&self, y: f64) -> f64 {
        y * self.value_scale + self.value_offset
    }

    pub fn time(&self, t: f64) -> f64 {
        t / self.time_scale
    }

    pub fn denormalize_time(&self, t: f64) -> f64 {
        t * self.time_scale
    }
}

/// Normalized ticks with strictly increasing times.
#[derive(Debug, Clone, PartialEq)]
pub struct TickDataset {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub normalization: Normalization,
}

#[derive(Deserialize)]
struct Row {
    time: f64,
    value: f64,
}

/// Reads ticks, collapsing exact duplicate timestamps to their last value.
pub fn ingest(path: &Path, normalization: Normalization) -> Result<TickDataset, CliError> {
    let name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut times: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let input_err = |line: u64, reason: String| CliError::Input {
        path: name.clone(),
        line,
        reason,
    };
    let headers = reader.headers()?.clone();
    let mut record = csv::StringRecord::new();
    loop {
        let more = reader.read_record(&mut record).map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            input_err(line, e.to_string())
        })?;
        if !more {
            break;
        }
        let line = record.position().map_or(0, |p| p.line());
        let row: Row = record.deserialize(Some(&headers)).map_err(|e| input_err(line, e.to_string()))?;
        if !row.time.is_finite() || !row.value.is_finite() {
            return Err(input_err(line, "time and value must be finite".into()));
        }
        match times.last() {
            Some(&last) if row.time == last => {
                *values.last_mut().expect("parallel vectors") = row.value;
            }
            Some(&last) if row.time < last => {
                return Err(input_err(line, format!("time {} goes backwards (previous {last})", row.time)));
            }
            _ => {
                times.push(row.time);
                values.push(row.value);
            }
        }
    }
    if times.is_empty() {
        return Err(input_err(1, "no data rows".into()));
    }
    Ok(TickDataset {
        times: times.iter().map(|&t| normalization.time(t)).collect(),
        values: values.iter().map(|&y| normalization.value(y)).collect(),
        normalization,
    })
}
