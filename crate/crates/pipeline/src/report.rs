//! Training reports (tab-separated) and image mosaics (PPM).
//!
//! The per-iteration table is a pure function of configuration and seed,
//! so two identical runs produce identical bytes; wall-clock time goes to a
//! separate summary file.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use diat_core::Tensor32;

use crate::error::{config_err, io_err, Result};

pub const REPORT_HEADER: &str =
    "iteration\tloss_d\tloss_adversarial\tloss_identity\tloss_smooth\tloss_total\tattribute_score\tidentity_distance";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub iteration: u64,
    /// Mean over the iteration's discriminator updates.
    pub loss_d: f64,
    /// Means over the iteration's transform updates; absent terms are `None`.
    pub adversarial: f64,
    pub identity: Option<f64>,
    pub smooth: Option<f64>,
    pub total: f64,
    /// Latest attribute score and matched identity distance on the monitor set.
    pub attribute_score: f64,
    pub identity_distance: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| v.to_string())
}

impl fmt::Display for ReportRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.iteration,
            self.loss_d,
            self.adversarial,
            opt(self.identity),
            opt(self.smooth),
            self.total,
            self.attribute_score,
            self.identity_distance
        )
    }
}

impl ReportRow {
    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return config_err(format!("report row has {} fields, expected 8", f.len()));
        }
        let num = |s: &str| s.parse::<f64>().or_else(|_| config_err(format!("bad number {s:?} in report")));
        let opt = |s: &str| if s == "-" { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            iteration: f[0].parse().or_else(|_| config_err(format!("bad iteration {:?}", f[0])))?,
            loss_d: num(f[1])?,
            adversarial: num(f[2])?,
            identity: opt(f[3])?,
            smooth: opt(f[4])?,
            total: num(f[5])?,
            attribute_score: num(f[6])?,
            identity_distance: num(f[7])?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    Plateau,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MaxIterations => "max_iterations",
            Self::Plateau => "plateau",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<ReportRow>,
    pub wall_clock_secs: f64,
    /// First scored iteration whose attribute score met the threshold.
    pub iterations_to_threshold: Option<u64>,
    pub stop: StopReason,
}

impl TrainReport {
    pub fn to_tsv(&self) -> String {
        let mut s = String::with_capacity(64 * (self.rows.len() + 1));
        s.push_str(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse_rows(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return config_err("report does not start with the expected header");
        }
        lines.map(ReportRow::parse).collect()
    }

    pub fn summary_tsv(&self) -> String {
        format!(
            "iterations\t{}\nstop_reason\t{}\niterations_to_threshold\t{}\nwall_clock_secs\t{:.3}\n",
            self.rows.last().map_or(0, |r| r.iteration),
            self.stop,
            self.iterations_to_threshold.map_or_else(|| "-".into(), |v| v.to_string()),
            self.wall_clock_secs
        )
    }
}

/// Append-only report file, one flushed line per row.
pub struct ReportWriter {
    path: PathBuf,
    file: std::fs::File,
}

impl ReportWriter {
    /// Starts a fresh report, truncating any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(io_err(path))?;
        writeln!(file, "{REPORT_HEADER}").map_err(io_err(path))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    /// Continues a report, keeping only rows up to `iteration`.
    pub fn resume(path: &Path, iteration: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let rows = TrainReport::parse_rows(&text)?;
        let mut w = Self::create(path)?;
        for r in rows.iter().filter(|r| r.iteration <= iteration) {
            w.append(r)?;
        }
        Ok(w)
    }

    pub fn append(&mut self, row: &ReportRow) -> Result<()> {
        writeln!(self.file, "{row}").map_err(io_err(&self.path))?;
        self.file.flush().map_err(io_err(&self.path))
    }
}

/// Writes `columns` (each `[N,3,S,S]`) side by side, one sample per row.
pub fn write_mosaic(path: &Path, columns: &[&Tensor32]) -> Result<()> {
    let Some(first) = columns.first() else {
        return config_err("mosaic needs at least one column");
    };
    let (n, c, h, w) = first.image_dims()?;
    if c != 3 || columns.iter().any(|t| t.shape() != first.shape()) {
        return config_err("mosaic columns must share an [N,3,H,W] shape");
    }
    let k = columns.len();
    let (width, height) = (w * k, h * n);
    let mut data = vec![0f32; 3 * width * height];
    for (col, t) in columns.iter().enumerate() {
        for s in 0..n {
            for ch in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let v = t.data()[((s * 3 + ch) * h + y) * w + x];
                        data[(ch * height + s * h + y) * width + col * w + x] = v;
                    }
                }
            }
        }
    }
    let img = Tensor32::new(&[3, height, width], data)?;
    Ok(diat_data::ppm::write_image(path, &img)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> ReportRow {
        ReportRow {
            iteration: i,
            loss_d: 1.25,
            adversarial: 0.1 + i as f64,
            identity: Some(1e-9),
            smooth: None,
            total: 3.0,
            attribute_score: 0.5,
            identity_distance: 0.0,
        }
    }

    #[test]
    fn rows_round_trip_exactly() {
        let r = TrainReport {
            rows: (1..4).map(row).collect(),
            wall_clock_secs: 1.0,
            iterations_to_threshold: None,
            stop: StopReason::MaxIterations,
        };
        let text = r.to_tsv();
        assert_eq!(TrainReport::parse_rows(&text).unwrap(), r.rows);
        assert!(text.lines().nth(1).unwrap().contains("\t-\t"));
        assert!(TrainReport::parse_rows("bogus\n").is_err());
    }

    #[test]
    fn writer_resumes_by_truncating_later_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        let mut w = ReportWriter::create(&p).unwrap();
        for i in 1..=5 {
            w.append(&row(i)).unwrap();
        }
        drop(w);
        let mut w = ReportWriter::resume(&p, 3).unwrap();
        w.append(&row(4)).unwrap();
        let rows = TrainReport::parse_rows(&std::fs::read_to_string(&p).unwrap()).unwrap();
        assert_eq!(rows, (1..=4).map(row).collect::<Vec<_>>());
    }

    #[test]
    fn mosaic_places_columns() {
        let dir = tempfile::tempdir().unwrap();
        let a = Tensor32::zeros(&[2, 3, 2, 2]).unwrap();
        let b = Tensor32::ones(&[2, 3, 2, 2]).unwrap();
        let p = dir.path().join("m.ppm");
        write_mosaic(&p, &[&a, &b]).unwrap();
        let img: Tensor32 = diat_data::ppm::read_image(&p, None).unwrap();
        assert_eq!(img.shape(), &[3, 4, 4]);
        assert_eq!(&img.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!(write_mosaic(&p, &[&a, &Tensor32::zeros(&[1, 3, 2, 2]).unwrap()]).is_err());
    }
}
