//! Per-iteration training log.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const RECORD_HEADER: &str = "epoch,iter,lr,train_loss,eval_loss,wall_seconds";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRow {
    pub epoch: usize,
    pub iter: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainRecord {
    /// Emitted as `# ` lines ahead of the header.
    pub comments: Vec<String>,
    pub rows: Vec<TrainRow>,
}

fn bad_row(line: usize, reason: impl Into<String>) -> Error {
    Error::config("record", format!("line {line}: {}", reason.into()))
}

impl TrainRecord {
    pub fn last(&self) -> Option<&TrainRow> {
        self.rows.last()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.last().map(|r| r.train_loss)
    }

    pub fn column(&self, f: impl Fn(&TrainRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    /// Floats are written with 17 significant digits, which round-trips.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for c in &self.comments {
            writeln!(out, "# {c}")?;
        }
        writeln!(out, "{RECORD_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.epoch, r.iter, r.lr, r.train_loss, r.eval_loss, r.wall_seconds
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut rec = TrainRecord::default();
        let mut seen_header = false;
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| bad_row(i + 1, e.to_string()))?;
            if let Some(c) = line.strip_prefix('#') {
                rec.comments
                    .push(c.strip_prefix(' ').unwrap_or(c).to_string());
                continue;
            }
            if !seen_header {
                if line != RECORD_HEADER {
                    return Err(bad_row(i + 1, format!("expected header `{RECORD_HEADER}`")));
                }
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad_row(i + 1, "expected 6 fields"));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| bad_row(i + 1, e.to_string()))
            };
            let flt = |s: &str| s.parse::<f64>().map_err(|e| bad_row(i + 1, e.to_string()));
            rec.rows.push(TrainRow {
                epoch: int(f[0])?,
                iter: int(f[1])?,
                lr: flt(f[2])?,
                train_loss: flt(f[3])?,
                eval_loss: flt(f[4])?,
                wall_seconds: flt(f[5])?,
            });
        }
        if !seen_header {
            return Err(bad_row(0, "missing header"));
        }
        Ok(rec)
    }
}
