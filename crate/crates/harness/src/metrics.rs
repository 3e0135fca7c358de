//! Metrics records and their file formats.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// One evaluated (configuration, seed) pair. Field order is the CSV column
/// order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub scenario: String,
    pub method: String,
    /// Empty for the untrained baseline.
    pub loss: String,
    pub learning_rate: f64,
    pub data_size: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
    pub mean_accepted_per_round: f64,
    pub rounds: u64,
    pub train_loss_final: Option<f64>,
    /// Zero unless timing was requested, so outputs stay byte-identical.
    pub wall_time_seconds: f64,
}

impl MetricsRecord {
    /// Domain component of the run id.
    pub fn domain(&self) -> &str {
        self.run_id.split('/').nth(1).unwrap_or("")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Plotdata,
}

/// Sweep axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    DataSize,
    LearningRate,
    Method,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::DataSize => "data_size",
            Axis::LearningRate => "learning_rate",
            Axis::Method => "method",
        }
    }

    fn value(self, r: &MetricsRecord) -> String {
        match self {
            Axis::DataSize => r.data_size.to_string(),
            Axis::LearningRate => r.learning_rate.to_string(),
            Axis::Method => r.method.clone(),
        }
    }

    /// Series a record belongs to when plotting along this axis.
    fn series(self, r: &MetricsRecord) -> String {
        match self {
            Axis::Method => format!("{}-{}", r.scenario, r.domain()),
            Axis::DataSize | Axis::LearningRate => format!("{}-{}-{}", r.scenario, r.domain(), r.method),
        }
    }
}

pub fn write_csv<W: Write>(records: &[MetricsRecord], w: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(w);
    if records.is_empty() {
        writer.write_record(CSV_COLUMNS)?;
    }
    for r in records {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub const CSV_COLUMNS: [&str; 12] = [
    "run_id",
    "scenario",
    "method",
    "loss",
    "learning_rate",
    "data_size",
    "seed",
    "acceptance_rate",
    "mean_accepted_per_round",
    "rounds",
    "train_loss_final",
    "wall_time_seconds",
];

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut reader = csv::Reader::from_reader(r);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(HarnessError::Config(format!("unexpected metrics columns: {headers:?}")));
    }
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}

pub fn csv_string(records: &[MetricsRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn write_json<W: Write>(records: &[MetricsRecord], mut w: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, records)?;
    writeln!(w)?;
    Ok(())
}

/// Mean, standard error of the mean and count of a sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, stderr: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, stderr, n }
    }
}

/// Acceptance-rate summary of the records whose run id satisfies `select`.
pub fn summarize(records: &[MetricsRecord], select: impl Fn(&MetricsRecord) -> bool) -> Summary {
    Summary::of(&records.iter().filter(|r| select(r)).map(|r| r.acceptance_rate).collect::<Vec<_>>())
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

/// One tab-separated file per series with the mean acceptance rate at each
/// axis value, in first-appearance order.
pub fn write_plotdata(records: &[MetricsRecord], axis: Axis, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut series: BTreeMap<String, Vec<(String, Vec<f64>)>> = BTreeMap::new();
    for r in records {
        let points = series.entry(axis.series(r)).or_default();
        let x = axis.value(r);
        match points.iter_mut().find(|(px, _)| *px == x) {
            Some((_, ys)) => ys.push(r.acceptance_rate),
            None => points.push((x, vec![r.acceptance_rate])),
        }
    }
    fs::create_dir_all(dir)?;
    let mut paths = Vec::with_capacity(series.len());
    for (name, points) in series {
        let path = dir.join(format!("plot_{}_{}.tsv", axis.name(), file_safe(&name)));
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "{}\tmean_acceptance\tstderr\tn", axis.name())?;
        for (x, ys) in points {
            let s = Summary::of(&ys);
            writeln!(w, "{x}\t{}\t{}\t{}", s.mean, s.stderr, s.n)?;
        }
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}

/// Writes `records` into `dir` in the requested format and returns the
/// files written.
pub fn emit(records: &[MetricsRecord], format: Format, dir: &Path, axis: Axis) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    match format {
        Format::Csv => {
            let path = dir.join("metrics.csv");
            write_csv(records, BufWriter::new(File::create(&path)?))?;
            Ok(vec![path])
        }
        Format::Json => {
            let path = dir.join("metrics.json");
            write_json(records, BufWriter::new(File::create(&path)?))?;
            Ok(vec![path])
        }
        Format::Plotdata => write_plotdata(records, axis, dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(method: &str, data_size: usize, seed: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            run_id: format!("I/TOPIC/{method}/n{data_size}"),
            scenario: "I".into(),
            method: method.into(),
            loss: if method == "baseline" { String::new() } else { "FKL".into() },
            learning_rate: 0.5,
            data_size,
            seed,
            acceptance_rate: acc,
            mean_accepted_per_round: 2.5,
            rounds: 40,
            train_loss_final: (method != "baseline").then_some(0.125),
            wall_time_seconds: 0.0,
        }
    }

    #[test]
    fn csv_header_matches_field_order() {
        let s = csv_string(&[record("SFT", 10, 1, 0.5)]).unwrap();
        assert_eq!(s.lines().next().unwrap(), CSV_COLUMNS.join(","));
        assert_eq!(csv_string(&[]).unwrap().trim_end(), CSV_COLUMNS.join(","));
    }

    proptest! {
        #[test]
        fn csv_round_trip(acc in 0.0f64..=1.0, lr in 0.0f64..2.0, loss in proptest::option::of(0.0f64..10.0), seed in any::<u64>()) {
            let mut r = record("offline-FKL", 500, seed, acc);
            r.learning_rate = lr;
            r.train_loss_final = loss;
            let records = vec![r, record("baseline", 500, 3, 0.25)];
            let back = read_csv(csv_string(&records).unwrap().as_bytes()).unwrap();
            prop_assert_eq!(back, records);
        }
    }

    #[test]
    fn json_is_one_array() {
        let mut buf = Vec::new();
        write_json(&[record("SFT", 1, 1, 0.1), record("SFT", 1, 2, 0.2)], &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        assert_eq!(v.as_array().unwrap().len(), 2);
        assert_eq!(v[0]["method"], "SFT");
    }

    #[test]
    fn plotdata_has_one_series_per_method() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = Vec::new();
        for method in ["baseline", "SFT"] {
            for n in [500, 2000] {
                for seed in 0..2 {
                    records.push(record(method, n, seed, 0.1 * seed as f64));
                }
            }
        }
        let files = write_plotdata(&records, Axis::DataSize, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        let text = fs::read_to_string(&files[0]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("500\t0.05"));
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 2.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.stderr - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[4.0]).stderr, 0.0);
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let file = tempfile::NamedTempFile::new().unwrap();
        assert!(emit(&[], Format::Csv, &file.path().join("sub"), Axis::Method).is_err());
    }
}
