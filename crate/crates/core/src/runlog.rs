//! Closed-loop trajectory log and its CSV form.
//!
//! One row per agent per RK4 substep of each executed sampling interval.
//! Leading `#` lines carry `key = value` metadata. Floats are written with
//! shortest round-trip formatting, so a written log reads back bit-identical.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::constraints::ConstraintKind;
use crate::error::{Error, Result};
use crate::ocp::SolveStatus;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Sampling step index `k` of the agent's clock.
    pub step: usize,
    /// Substep within the executed interval, `0..=substeps`.
    pub sub: usize,
    pub t: f64,
    /// 1-based agent id.
    pub agent: usize,
    pub state: Vec<f64>,
    pub input: Vec<f64>,
    pub w_norm: f64,
    /// `V(e)` of the true state.
    pub v: f64,
    /// Untightened margins indexed like [`ConstraintKind::ALL`]; `+∞` when
    /// the kind does not apply.
    pub margins: [f64; 5],
    pub status: SolveStatus,
    pub relaxed: bool,
    /// Optimal cost of the solve issued at the start of the interval.
    pub cost: f64,
    /// `∫‖ē‖²` of that solve's prediction over the executed interval.
    pub int_e2: f64,
}

impl LogRow {
    pub fn margin(&self, kind: ConstraintKind) -> f64 {
        self.margins[kind_index(kind)]
    }
}

pub fn kind_index(kind: ConstraintKind) -> usize {
    ConstraintKind::ALL
        .iter()
        .position(|k| *k == kind)
        .expect("kind listed in ALL")
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryLog {
    pub state_labels: Vec<String>,
    pub input_labels: Vec<String>,
    pub metadata: Vec<(String, String)>,
    pub rows: Vec<LogRow>,
}

impl TrajectoryLog {
    pub fn new(state_labels: Vec<String>, input_labels: Vec<String>) -> Self {
        Self {
            state_labels,
            input_labels,
            metadata: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "sub", "t", "agent"].iter().map(|s| s.to_string()).collect();
        h.extend(self.state_labels.iter().cloned());
        h.extend(self.input_labels.iter().cloned());
        h.push("w_norm".into());
        h.push("V".into());
        for k in ConstraintKind::ALL {
            h.push(format!("m_{}", k.label()));
        }
        h.extend(["status", "relaxed", "cost", "int_e2"].iter().map(|s| s.to_string()));
        h
    }

    /// First metadata value stored under `key`.
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Rows of one agent in log order.
    pub fn agent_rows(&self, agent: usize) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.agent == agent)
    }

    pub fn agents(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.rows.iter().map(|r| r.agent).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = LogWriter::create(path, self)?;
        for r in &self.rows {
            w.write_row(r)?;
        }
        w.finish()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            message,
        };
        let file = File::open(path)?;
        let mut metadata = Vec::new();
        let mut body = String::new();
        for line in BufReader::new(file).lines() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.split_once('=') {
                    metadata.push((k.trim().to_string(), v.trim().to_string()));
                }
            } else {
                body.push_str(&line);
                body.push('\n');
            }
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let fixed_tail = 2 + ConstraintKind::ALL.len() + 4;
        let mut state_dim = None;
        for (k, v) in &metadata {
            if k == "state_dim" {
                state_dim = v.parse::<usize>().ok();
            }
        }
        let state_dim = state_dim.ok_or_else(|| parse_err("missing state_dim metadata".into()))?;
        if header.len() < 4 + state_dim + fixed_tail {
            return Err(parse_err(format!("header has only {} columns", header.len())));
        }
        let input_dim = header.len() - 4 - state_dim - fixed_tail;
        let mut log = TrajectoryLog {
            state_labels: header[4..4 + state_dim].to_vec(),
            input_labels: header[4 + state_dim..4 + state_dim + input_dim].to_vec(),
            metadata,
            rows: Vec::new(),
        };
        let expected = log.header();
        if expected != header {
            return Err(parse_err(format!("unexpected header {header:?}")));
        }
        for (line_no, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = line_no + 2;
            let f = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| parse_err(format!("row {line}: missing column {i}")))?
                    .parse::<f64>()
                    .map_err(|e| parse_err(format!("row {line}, column {}: {e}", header[i])))
            };
            let u = |i: usize| -> Result<usize> {
                rec.get(i)
                    .ok_or_else(|| parse_err(format!("row {line}: missing column {i}")))?
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("row {line}, column {}: {e}", header[i])))
            };
            let mut c = 4;
            let state = (0..state_dim).map(|i| f(c + i)).collect::<Result<Vec<_>>>()?;
            c += state_dim;
            let input = (0..input_dim).map(|i| f(c + i)).collect::<Result<Vec<_>>>()?;
            c += input_dim;
            let w_norm = f(c)?;
            let v = f(c + 1)?;
            c += 2;
            let mut margins = [0.0; 5];
            for (i, m) in margins.iter_mut().enumerate() {
                *m = f(c + i)?;
            }
            c += 5;
            let status_txt = rec.get(c).unwrap_or_default();
            let status = SolveStatus::parse(status_txt)
                .ok_or_else(|| parse_err(format!("row {line}: unknown status {status_txt:?}")))?;
            let relaxed = u(c + 1)? != 0;
            log.rows.push(LogRow {
                step: u(0)?,
                sub: u(1)?,
                t: f(2)?,
                agent: u(3)?,
                state,
                input,
                w_norm,
                v,
                margins,
                status,
                relaxed,
                cost: f(c + 2)?,
                int_e2: f(c + 3)?,
            });
        }
        Ok(log)
    }
}

/// Streams rows to disk; each call to [`LogWriter::flush`] makes the rows so
/// far durable.
pub struct LogWriter {
    inner: csv::Writer<BufWriter<File>>,
}

impl LogWriter {
    pub fn create(path: &Path, log: &TrajectoryLog) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "# state_dim = {}", log.state_labels.len())?;
        for (k, v) in &log.metadata {
            if k != "state_dim" {
                writeln!(file, "# {k} = {v}")?;
            }
        }
        let mut inner = csv::WriterBuilder::new().from_writer(file);
        inner.write_record(log.header())?;
        Ok(Self { inner })
    }

    pub fn write_row(&mut self, r: &LogRow) -> Result<()> {
        let mut rec: Vec<String> = vec![
            r.step.to_string(),
            r.sub.to_string(),
            r.t.to_string(),
            r.agent.to_string(),
        ];
        rec.extend(r.state.iter().map(f64::to_string));
        rec.extend(r.input.iter().map(f64::to_string));
        rec.push(r.w_norm.to_string());
        rec.push(r.v.to_string());
        rec.extend(r.margins.iter().map(f64::to_string));
        rec.push(r.status.label().to_string());
        rec.push(u8::from(r.relaxed).to_string());
        rec.push(r.cost.to_string());
        rec.push(r.int_e2.to_string());
        self.inner.write_record(&rec)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(t: f64) -> LogRow {
        LogRow {
            step: 3,
            sub: 7,
            t,
            agent: 2,
            state: vec![0.1 + t, -2.0 / 3.0, std::f64::consts::PI],
            input: vec![1e-17, -11.313708498984761],
            w_norm: 0.1,
            v: 1.0 / 7.0,
            margins: [0.5, 0.25, f64::INFINITY, 3.0, f64::INFINITY],
            status: SolveStatus::FeasibleSuboptimal,
            relaxed: true,
            cost: 12.345678901234567,
            int_e2: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut log = TrajectoryLog::new(
            vec!["x".into(), "y".into(), "theta".into()],
            vec!["v".into(), "omega".into()],
        );
        log.metadata.push(("interpolation".into(), "linear".into()));
        log.rows.push(row(0.1));
        log.rows.push(row(0.30000000000000004));
        log.write_csv(&path).unwrap();
        let back = TrajectoryLog::read_csv(&path).unwrap();
        assert_eq!(back.rows, log.rows);
        assert_eq!(back.state_labels, log.state_labels);
        assert!(back.metadata.contains(&("interpolation".into(), "linear".into())));
    }

    #[test]
    fn malformed_rows_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let log = TrajectoryLog::new(vec!["x".into()], vec!["u".into()]);
        log.write_csv(&path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("0,0,zero,1,0,0,0,0,0,0,0,0,0,optimal,0,0,0\n");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(TrajectoryLog::read_csv(&path), Err(Error::Parse { .. })));
    }
}
