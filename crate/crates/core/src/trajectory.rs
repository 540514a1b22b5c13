//! Per-step training records and their JSONL form.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Precondition,
    MaskLearning,
}

/// One line of a trajectory file. Every key is written on every line;
/// `switched_at` is `null` except on the step where the switch happened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecord {
    pub step: u64,
    pub phase: Phase,
    pub loss: f64,
    pub v_l1: f64,
    pub v_l2: f64,
    pub z: f64,
    pub z_bar: f64,
    pub switched_at: Option<u64>,
}

/// End-of-run evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub sparse_eval_loss: f64,
    pub dense_eval_loss: f64,
    pub switched_at: Option<u64>,
    pub mask_sparsity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrajectory {
    pub records: Vec<TrainRecord>,
    pub final_record: FinalRecord,
}

impl TrainTrajectory {
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn switched_at(&self) -> Option<u64> {
        self.final_record.switched_at
    }
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<TrainRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_lines_carry_every_key() {
        let rec = |step, sw| TrainRecord {
            step,
            phase: Phase::Precondition,
            loss: 0.5,
            v_l1: 1.0,
            v_l2: 1.0,
            z: 0.0,
            z_bar: 0.0,
            switched_at: sw,
        };
        let traj = TrainTrajectory {
            records: vec![rec(1, None), rec(2, Some(2))],
            final_record: FinalRecord {
                sparse_eval_loss: 1.0,
                dense_eval_loss: 0.5,
                switched_at: Some(2),
                mask_sparsity: BTreeMap::new(),
            },
        };
        let mut buf = Vec::new();
        traj.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for key in ["step", "phase", "loss", "v_l1", "v_l2", "z", "z_bar", "switched_at"] {
                assert!(v.get(key).is_some(), "{key} missing in {line}");
            }
        }
        assert_eq!(read_jsonl(&buf[..]).unwrap(), traj.records);
    }
}
