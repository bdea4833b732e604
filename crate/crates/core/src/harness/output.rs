use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::{RunRecord, SweepAxis};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn seed_cell(r: &RunRecord) -> String {
    r.seed.map(|s| s.to_string()).unwrap_or_else(|| "mean".into())
}

/// One row per record. Target columns follow the first record that has OOD
/// results; wall-clock appears only if some record carries it.
pub fn records_csv(records: &[RunRecord]) -> String {
    let targets: Vec<String> = records
        .iter()
        .find(|r| !r.accuracy_ood.is_empty())
        .map(|r| r.accuracy_ood.iter().map(|t| t.name.clone()).collect())
        .unwrap_or_default();
    let timed = records.iter().any(|r| r.wall_clock_seconds.is_some());
    let mut out = String::from("protocol,variant,seed,shots,depth,rank,accuracy_id");
    for t in &targets {
        write!(out, ",ood_{t}").unwrap();
    }
    out.push_str(",accuracy_ood_mean,hm,delta_id,delta_ood,delta_hm,history");
    if timed {
        out.push_str(",wall_clock_seconds");
    }
    out.push('\n');
    for r in records {
        write!(
            out,
            "{},{},{},{},{},{},{:.2}",
            r.protocol,
            r.variant,
            seed_cell(r),
            r.shots,
            r.depth,
            r.rank,
            r.accuracy_id
        )
        .unwrap();
        for t in &targets {
            let v = r.accuracy_ood.iter().find(|a| &a.name == t).map(|a| a.accuracy);
            write!(out, ",{}", pct(v)).unwrap();
        }
        let d = r.deltas;
        write!(
            out,
            ",{},{},{},{},{},{}",
            pct(r.accuracy_ood_mean),
            pct(r.hm),
            pct(d.map(|d| d.id)),
            pct(d.map(|d| d.ood)),
            pct(d.map(|d| d.hm)),
            r.history.as_deref().unwrap_or("")
        )
        .unwrap();
        if timed {
            write!(out, ",{}", r.wall_clock_seconds.map(|s| format!("{s:.3}")).unwrap_or_default()).unwrap();
        }
        out.push('\n');
    }
    out
}

/// `(value, seed, ID, OOD, HM)` rows of a sweep, in record order.
pub fn sweep_csv(axis: SweepAxis, records: &[RunRecord]) -> String {
    let mut out = format!("{},seed,accuracy_id,accuracy_ood_mean,hm\n", axis.name());
    for r in records {
        let value = match axis {
            SweepAxis::Depth => r.depth,
            SweepAxis::Dimension => r.rank,
        };
        writeln!(
            out,
            "{value},{},{:.2},{},{}",
            seed_cell(r),
            r.accuracy_id,
            pct(r.accuracy_ood_mean),
            pct(r.hm)
        )
        .unwrap();
    }
    out
}

/// Writes `<dir>/<stem>.csv` (using `csv`, or [`records_csv`] when `None`)
/// or `<dir>/<stem>.json` holding the record array. Returns the path.
pub fn write_records(
    dir: &Path,
    stem: &str,
    records: &[RunRecord],
    format: OutputFormat,
    csv: Option<String>,
) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let (path, body) = match format {
        OutputFormat::Csv => (
            dir.join(format!("{stem}.csv")),
            csv.unwrap_or_else(|| records_csv(records)),
        ),
        OutputFormat::Json => (
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(records)? + "\n",
        ),
    };
    std::fs::write(&path, body)?;
    Ok(path)
}
