//! Line-delimited training metrics.

use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const METRICS_SCHEMA: &str = "c2v-metrics-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub schema: String,
    pub step: u64,
    pub loss: f64,
    pub accuracy_per_head: Vec<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ema_decay: Option<f64>,
    pub masked_frames: usize,
    pub batch_frames: usize,
    pub frames_per_sec: f64,
    pub step_wall_ms: f64,
    /// Batches so far whose mask came up empty (loss defined as zero).
    pub zero_mask_batches: u64,
}

impl TrainMetrics {
    pub fn mean_accuracy(&self) -> f64 {
        if self.accuracy_per_head.is_empty() {
            0.0
        } else {
            self.accuracy_per_head.iter().sum::<f64>() / self.accuracy_per_head.len() as f64
        }
    }
}

/// Appends records to a JSONL file.
pub struct MetricsLog {
    writer: BufWriter<std::fs::File>,
}

impl MetricsLog {
    pub fn append_to<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    pub fn write(&mut self, record: &TrainMetrics) -> Result<()> {
        let line = serde_json::to_string(record).expect("metrics serialize");
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        Ok(())
    }
}

/// Reads every record of a JSONL metrics file.
pub fn read_metrics<P: AsRef<Path>>(path: P) -> Result<Vec<TrainMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainMetrics = serde_json::from_str(line).map_err(|e| {
            crate::error::Error::InvalidConfig(format!("bad metrics line: {e}"))
        })?;
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        {
            let mut log = MetricsLog::append_to(&path).unwrap();
            for step in 0..3 {
                log.write(&TrainMetrics {
                    schema: METRICS_SCHEMA.to_string(),
                    step,
                    loss: 1.5 - step as f64 * 0.1,
                    accuracy_per_head: vec![0.1, 0.2],
                    lr: 1e-4,
                    ema_decay: (step == 2).then_some(0.999),
                    masked_frames: 40,
                    batch_frames: 200,
                    frames_per_sec: 1000.0,
                    step_wall_ms: 12.0,
                    zero_mask_batches: 0,
                })
                .unwrap();
            }
        }
        let records = read_metrics(&path).unwrap();
        assert_eq!(records.len(), 3);
        assert_eq!(records[2].step, 2);
        assert_eq!(records[2].ema_decay, Some(0.999));
        assert_eq!(records[0].ema_decay, None);
        assert!((records[1].mean_accuracy() - 0.15).abs() < 1e-12);
        // Monotone steps, accuracy in range.
        for w in records.windows(2) {
            assert!(w[0].step < w[1].step);
        }
        for r in &records {
            assert!(r.accuracy_per_head.iter().all(|&a| (0.0..=1.0).contains(&a)));
        }
    }
}
