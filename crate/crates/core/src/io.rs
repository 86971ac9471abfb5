//! File formats: lab-style measurement CSVs, current-profile CSVs and
//! voltage/error traces.
//!
//! A measurement file holds one or more blocks. Each block is one
//! experiment started from equilibrium and is introduced by comment lines:
//!
//! ```text
//! # block: input_1
//! # v0_V: 3.7
//! time_s,current_A,voltage_V,phase
//! 0,1.5,3.71,prep
//! ...
//! ```
//!
//! The column header may appear once at the top or repeated per block.
//! Times increase strictly within a block and the first row's time is taken
//! as the block's origin.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::estimation::{DataBlock, DataSet, Phase, Provenance};
use crate::model::{CurrentProfile, VoltageTrace};
use crate::{Error, Result};

pub const MEASUREMENT_HEADER: &str = "time_s,current_A,voltage_V,phase";

/// One row of a measurement file.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRow {
    pub time: f64,
    pub current: f64,
    pub voltage: f64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementBlock {
    pub label: String,
    /// Equilibrium voltage at the first row.
    pub v0: f64,
    pub rows: Vec<MeasurementRow>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MeasurementFile {
    pub blocks: Vec<MeasurementBlock>,
}

/// Which protocol phases a data set keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IngestMode {
    /// Impulse samples only.
    Cut,
    /// Impulse, rest and preparation samples.
    Full,
}

impl IngestMode {
    pub fn kept_phases(self) -> &'static [Phase] {
        match self {
            IngestMode::Cut => &[Phase::Impulse],
            IngestMode::Full => &[Phase::Prep, Phase::Rest, Phase::Impulse],
        }
    }
}

impl std::str::FromStr for IngestMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cut" => Ok(IngestMode::Cut),
            "full" => Ok(IngestMode::Full),
            other => Err(Error::Config(format!("unknown ingest mode {other:?}"))),
        }
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// `# key: value` comment, if the line is one.
fn comment_field(line: &str) -> Option<(&str, &str)> {
    let body = line.strip_prefix('#')?.trim();
    let (key, value) = body.split_once(':')?;
    Some((key.trim(), value.trim()))
}

impl MeasurementFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parse file contents; `path` is only used in error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        struct Pending {
            label: String,
            v0: Option<f64>,
            rows: Vec<MeasurementRow>,
            line: usize,
        }
        let mut blocks: Vec<MeasurementBlock> = Vec::new();
        let mut current: Option<Pending> = None;
        let finish = |p: Pending, blocks: &mut Vec<MeasurementBlock>| -> Result<()> {
            let v0 =
                p.v0.ok_or_else(|| parse_error(path, p.line, format!("block {} has no '# v0_V:' line", p.label)))?;
            if p.rows.is_empty() {
                return Err(parse_error(path, p.line, format!("block {} has no rows", p.label)));
            }
            blocks.push(MeasurementBlock {
                label: p.label,
                v0,
                rows: p.rows,
            });
            Ok(())
        };

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                match comment_field(line) {
                    Some(("block", label)) => {
                        if let Some(p) = current.take() {
                            finish(p, &mut blocks)?;
                        }
                        current = Some(Pending {
                            label: label.to_string(),
                            v0: None,
                            rows: Vec::new(),
                            line: line_no,
                        });
                    }
                    Some(("v0_V", value)) => {
                        let v0: f64 = value
                            .parse()
                            .map_err(|_| parse_error(path, line_no, format!("bad v0 {value:?}")))?;
                        let p = current.get_or_insert_with(|| Pending {
                            label: format!("block_{}", blocks.len() + 1),
                            v0: None,
                            rows: Vec::new(),
                            line: line_no,
                        });
                        if !p.rows.is_empty() {
                            return Err(parse_error(path, line_no, "'# v0_V:' after data rows"));
                        }
                        p.v0 = Some(v0);
                    }
                    _ => {}
                }
                continue;
            }
            if line.replace(' ', "") == MEASUREMENT_HEADER {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("expected 4 fields, found {}", fields.len()),
                ));
            }
            let num = |s: &str, what: &str| -> Result<f64> {
                let v: f64 = s
                    .parse()
                    .map_err(|_| parse_error(path, line_no, format!("bad {what} {s:?}")))?;
                if !v.is_finite() {
                    return Err(parse_error(path, line_no, format!("non-finite {what}")));
                }
                Ok(v)
            };
            let row = MeasurementRow {
                time: num(fields[0], "time")?,
                current: num(fields[1], "current")?,
                voltage: num(fields[2], "voltage")?,
                phase: fields[3].parse().map_err(|m: String| parse_error(path, line_no, m))?,
            };
            if row.voltage <= 0.0 {
                return Err(parse_error(
                    path,
                    line_no,
                    format!("voltage {} is not positive", row.voltage),
                ));
            }
            let p = current
                .as_mut()
                .ok_or_else(|| parse_error(path, line_no, "data row before '# v0_V:'"))?;
            if let Some(last) = p.rows.last() {
                if !(row.time > last.time) {
                    return Err(parse_error(
                        path,
                        line_no,
                        format!("time {} does not increase (previous {})", row.time, last.time),
                    ));
                }
            }
            p.rows.push(row);
        }
        if let Some(p) = current.take() {
            finish(p, &mut blocks)?;
        }
        if blocks.is_empty() {
            return Err(parse_error(path, 1, "no data"));
        }
        Ok(Self { blocks })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let _ = writeln!(out, "# block: {}", b.label);
            let _ = writeln!(out, "# v0_V: {}", b.v0);
            let _ = writeln!(out, "{MEASUREMENT_HEADER}");
            for r in &b.rows {
                let _ = writeln!(out, "{},{},{},{}", r.time, r.current, r.voltage, r.phase.as_str());
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.blocks.iter().map(|b| b.rows.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Data set for `mode`, with current profiles rebuilt on the `step` grid.
    pub fn to_dataset(&self, mode: IngestMode, step: f64) -> Result<DataSet> {
        let blocks = self
            .blocks
            .iter()
            .map(|b| match mode {
                IngestMode::Full => block_to_data(&b.label, b.v0, &b.rows, None, step),
                IngestMode::Cut => {
                    let (v0, rows, end) = impulse_window(b)?;
                    block_to_data(&b.label, v0, rows, end, step)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        DataSet::new(Provenance::Measured, blocks)
    }

    /// Inverse of [`MeasurementFile::to_dataset`]. Blocks without recorded
    /// currents read them off their profile.
    pub fn from_dataset(data: &DataSet) -> Self {
        let blocks = data
            .blocks
            .iter()
            .map(|b| MeasurementBlock {
                label: b.label.clone(),
                v0: b.v0,
                rows: (0..b.times.len())
                    .map(|k| MeasurementRow {
                        time: b.times[k],
                        current: b
                            .currents
                            .as_ref()
                            .map_or_else(|| b.profile.current_at(b.times[k]), |c| c[k]),
                        voltage: b.voltages[k],
                        phase: b.phases[k],
                    })
                    .collect(),
            })
            .collect();
        Self { blocks }
    }
}

/// The contiguous impulse rows of a block, the equilibrium voltage in
/// front of them (the block's `v0` if the impulse opens the block, else the
/// last rest sample before it) and the time of the row that follows them,
/// which closes the impulse.
fn impulse_window(block: &MeasurementBlock) -> Result<(f64, &[MeasurementRow], Option<f64>)> {
    let rows = &block.rows;
    let first = rows
        .iter()
        .position(|r| r.phase == Phase::Impulse)
        .ok_or_else(|| Error::Data(format!("block {} has no impulse samples", block.label)))?;
    let last = rows
        .iter()
        .rposition(|r| r.phase == Phase::Impulse)
        .expect("found above");
    if rows[first..=last].iter().any(|r| r.phase != Phase::Impulse) {
        return Err(Error::Data(format!(
            "block {}: impulse samples are not contiguous",
            block.label
        )));
    }
    let v0 = match first.checked_sub(1).map(|k| &rows[k]) {
        None => block.v0,
        Some(r) if r.phase == Phase::Rest => r.voltage,
        Some(_) => {
            return Err(Error::Data(format!(
                "block {}: the impulse must open the block or follow a rest phase",
                block.label
            )))
        }
    };
    let end = rows.get(last + 1).map(|r| r.time);
    Ok((v0, &rows[first..=last], end))
}

/// Rebuild the applied current on the `step` grid. Each interval
/// `[k step, (k+1) step)` takes the current of its first sample; intervals
/// without samples hold the previous value.
pub fn reconstruct_profile(times: &[f64], currents: &[f64], step: f64) -> Result<CurrentProfile> {
    reconstruct_profile_until(times, currents, step, None)
}

/// [`reconstruct_profile`] with the last value held until `end` (relative to
/// the first sample) instead of stopping at the last sample.
pub fn reconstruct_profile_until(
    times: &[f64],
    currents: &[f64],
    step: f64,
    end: Option<f64>,
) -> Result<CurrentProfile> {
    let n = times.len();
    if n == 0 || currents.len() != n {
        return Err(Error::Data("profile reconstruction needs matching samples".into()));
    }
    let span = (times[n - 1] - times[0]).max(end.unwrap_or(0.0));
    let intervals = ((span / step) - 1e-9).ceil().max(1.0) as usize;
    let mut amps = Vec::with_capacity(intervals);
    let mut j = 0;
    let mut held = currents[0];
    for k in 0..intervals {
        let lo = k as f64 * step - 1e-9 * step;
        while j < n && times[j] - times[0] < lo {
            j += 1;
        }
        if j < n && times[j] - times[0] < (k + 1) as f64 * step - 1e-9 * step {
            held = currents[j];
        }
        amps.push(held);
    }
    let mut breakpoints = vec![0.0];
    let mut values = vec![amps[0]];
    for (k, &a) in amps.iter().enumerate().skip(1) {
        if a != *values.last().expect("non-empty") {
            breakpoints.push(k as f64 * step);
            values.push(a);
        }
    }
    breakpoints.push(intervals as f64 * step);
    CurrentProfile::new(breakpoints, values)
}

fn block_to_data(label: &str, v0: f64, rows: &[MeasurementRow], end: Option<f64>, step: f64) -> Result<DataBlock> {
    let t0 = rows[0].time;
    let times: Vec<f64> = rows.iter().map(|r| r.time - t0).collect();
    let currents: Vec<f64> = rows.iter().map(|r| r.current).collect();
    let block = DataBlock {
        label: label.to_string(),
        profile: reconstruct_profile_until(&times, &currents, step, end.map(|e| e - t0))?,
        v0,
        times,
        voltages: rows.iter().map(|r| r.voltage).collect(),
        phases: rows.iter().map(|r| r.phase).collect(),
        currents: Some(currents),
    };
    block.validate()?;
    Ok(block)
}

/// Read a measurement file and keep the phases selected by `mode`.
pub fn ingest_measurements(path: &Path, mode: IngestMode, step: f64) -> Result<DataSet> {
    MeasurementFile::read(path)?.to_dataset(mode, step)
}

/// `time_s,current_A` at the step left endpoints, preceded by
/// `# horizon_s:` and (optionally) `# v0_V:` comments.
pub fn write_profile_csv(profile: &CurrentProfile, v0: Option<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# horizon_s: {}", profile.horizon());
    if let Some(v0) = v0 {
        let _ = writeln!(out, "# v0_V: {v0}");
    }
    out.push_str("time_s,current_A\n");
    for (start, _, amp) in profile.steps() {
        let _ = writeln!(out, "{start},{amp}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Inverse of [`write_profile_csv`]. Without a horizon comment the last
/// row is read as the closing time.
pub fn read_profile_csv(path: &Path) -> Result<(CurrentProfile, Option<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut horizon = None;
    let mut v0 = None;
    let mut starts = Vec::new();
    let mut amps = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.replace(' ', "") == "time_s,current_A" {
            continue;
        }
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| parse_error(path, line_no, format!("bad number {s:?}")))
        };
        if line.starts_with('#') {
            match comment_field(line) {
                Some(("horizon_s", v)) => horizon = Some(num(v)?),
                Some(("v0_V", v)) => v0 = Some(num(v)?),
                _ => {}
            }
            continue;
        }
        let (t, a) = line
            .split_once(',')
            .ok_or_else(|| parse_error(path, line_no, "expected time_s,current_A"))?;
        starts.push(num(t)?);
        amps.push(num(a)?);
    }
    if horizon.is_none() {
        if starts.len() < 2 {
            return Err(parse_error(path, 1, "profile needs '# horizon_s:' or a closing row"));
        }
        horizon = starts.pop();
        amps.pop();
    }
    if starts.is_empty() {
        return Err(parse_error(path, 1, "profile has no steps"));
    }
    starts.push(horizon.expect("set above"));
    Ok((CurrentProfile::new(starts, amps)?, v0))
}

/// `time_s,current_A,voltage_V` of a simulation.
pub fn write_trace_csv(trace: &VoltageTrace, profile: &CurrentProfile, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time_s", "current_A", "voltage_V"])?;
    for (&t, &v) in trace.times.iter().zip(&trace.voltages) {
        w.write_record([t.to_string(), profile.current_at(t).to_string(), v.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Relative output error `(w - v) / w` at the data times of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub label: String,
    pub times: Vec<f64>,
    pub data: Vec<f64>,
    pub model: Vec<f64>,
}

impl ErrorTrace {
    pub fn relative(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().zip(&self.model).map(|(w, v)| (w - v) / w)
    }

    pub fn max_abs(&self) -> f64 {
        self.relative().fold(0.0, |m, e| m.max(e.abs()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["time_s", "w_V", "v_V", "rel_err"])?;
        for (k, e) in self.relative().enumerate() {
            w.write_record([
                self.times[k].to_string(),
                self.data[k].to_string(),
                self.model[k].to_string(),
                format!("{e:e}"),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Fails early if a referenced input file is missing.
pub fn require_file(path: &Path, what: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> &'static str {
        "# synthetic\n\
         # block: a\n\
         # v0_V: 3.7\n\
         time_s,current_A,voltage_V,phase\n\
         0,2,3.6,prep\n\
         0.1,2,3.6,prep\n\
         0.2,0,3.65,rest\n\
         0.3,0,3.66,rest\n\
         0.4,1,3.7,impulse\n\
         0.45,1,3.71,impulse\n\
         0.5,-1,3.69,impulse\n\
         0.6,-1,3.68,impulse\n\
         0.7,0,3.68,rest\n\
         # block: b\n\
         # v0_V: 3.9\n\
         0,5,3.9,impulse\n\
         0.2,5,3.95,impulse\n"
    }

    #[test]
    fn parses_blocks_and_modes() {
        let f = MeasurementFile::parse(sample(), Path::new("x.csv")).unwrap();
        assert_eq!(f.blocks.len(), 2);
        assert_eq!(f.len(), 11);
        let full = f.to_dataset(IngestMode::Full, 0.1).unwrap();
        let cut = f.to_dataset(IngestMode::Cut, 0.1).unwrap();
        assert_eq!(full.len(), 11);
        assert_eq!(cut.len(), 6);
        assert!(full.len() > cut.len());
        let a = &cut.blocks[0];
        // Cut blocks start at the impulse, from the preceding rest voltage.
        assert_eq!(a.v0, 3.66);
        assert!(a.times[0] == 0.0 && (a.times[3] - 0.2).abs() < 1e-12);
        assert_eq!(a.profile.amplitudes(), &[1.0, -1.0]);
        // The following rest row closes the impulse.
        assert!((a.profile.horizon() - 0.3).abs() < 1e-12);
        assert!((cut.blocks[1].profile.horizon() - 0.2).abs() < 1e-12);
        let fa = &full.blocks[0];
        assert_eq!(fa.profile.amplitudes(), &[2.0, 0.0, 1.0, -1.0]);
        assert_eq!(full.provenance, Provenance::Measured);
    }

    #[test]
    fn full_ingestion_is_lossless() {
        let f = MeasurementFile::parse(sample(), Path::new("x.csv")).unwrap();
        let back = MeasurementFile::from_dataset(&f.to_dataset(IngestMode::Full, 0.1).unwrap());
        assert_eq!(back, f);
        let text = back.to_text();
        assert_eq!(MeasurementFile::parse(&text, Path::new("y")).unwrap(), f);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = "# v0_V: 3.7\ntime_s,current_A,voltage_V,phase\n0,1,3.7,impulse\n0.1,1,abc,impulse\n";
        match MeasurementFile::parse(bad, Path::new("f.csv")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        let back = "# v0_V: 3.7\n0,1,3.7,impulse\n0.2,1,3.7,impulse\n0.1,1,3.7,impulse\n";
        match MeasurementFile::parse(back, Path::new("f.csv")) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 4);
                assert!(message.contains("does not increase"));
            }
            other => panic!("{other:?}"),
        }
        let label = "# v0_V: 3.7\n0,1,3.7,charge\n";
        assert!(matches!(
            MeasurementFile::parse(label, Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
        let neg = "# v0_V: 3.7\n0,1,-3.7,rest\n";
        assert!(matches!(
            MeasurementFile::parse(neg, Path::new("f")),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn impulse_after_prep_is_rejected_in_cut_mode() {
        let text = "# v0_V: 3.7\n0,1,3.7,prep\n0.1,1,3.7,impulse\n0.2,1,3.7,impulse\n";
        let f = MeasurementFile::parse(text, Path::new("f")).unwrap();
        assert!(f.to_dataset(IngestMode::Full, 0.1).is_ok());
        assert!(f.to_dataset(IngestMode::Cut, 0.1).is_err());
    }

    #[test]
    fn reconstruction_handles_unaligned_samples() {
        // Steps change at 0.25 s, sampled every 0.03 s.
        let times: Vec<f64> = (0..=20).map(|k| k as f64 * 0.03).collect();
        let currents: Vec<f64> = times.iter().map(|&t| if t < 0.25 { 3.0 } else { -3.0 }).collect();
        let p = reconstruct_profile(&times, &currents, 0.05).unwrap();
        assert_eq!(p.breakpoints(), &[0.0, 0.25, 0.6000000000000001]);
        assert_eq!(p.amplitudes(), &[3.0, -3.0]);
    }

    #[test]
    fn profile_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.csv");
        let p = CurrentProfile::uniform(&[1.0, -2.5, 0.0], 60.0).unwrap();
        write_profile_csv(&p, Some(3.8), &path).unwrap();
        let (q, v0) = read_profile_csv(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(v0, Some(3.8));
        std::fs::write(&path, "time_s,current_A\n0,1\n30,2\n60,2\n").unwrap();
        let (q, v0) = read_profile_csv(&path).unwrap();
        assert_eq!(q.breakpoints(), &[0.0, 30.0, 60.0]);
        assert_eq!(v0, None);
    }
}
