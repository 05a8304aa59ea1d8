//! Report serialization: JSON for machines, CSV for grids, text for people.

use std::fs;
use std::path::Path;

use super::{EvalReport, SeparabilityReport, SweepReport};
use crate::error::{Error, Result};
use crate::separability::{CellSummary, SeparabilityRecord};

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(header).map_err(wrap)?;
    for row in rows {
        w.write_record(&row).map_err(wrap)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json_string<T: serde::Serialize>(value: &T, context: &str) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|source| Error::Json {
            context: context.into(),
            source,
        })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::file(&path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

pub fn eval_json(report: &EvalReport) -> Result<String> {
    json_string(report, "eval report")
}

pub fn eval_csv(report: &EvalReport) -> Result<String> {
    csv_string(
        &["sample_id", "intersection", "union", "iou", "flags"],
        report.samples.iter().map(|s| match &s.record {
            Some(r) => vec![
                s.sample_id.clone(),
                r.intersection.to_string(),
                r.union.to_string(),
                r.iou.to_string(),
                if r.empty_union { "empty-union" } else { "" }.to_owned(),
            ],
            None => vec![
                s.sample_id.clone(),
                String::new(),
                String::new(),
                String::new(),
                "failed".to_owned(),
            ],
        }),
    )
}

pub fn eval_text(report: &EvalReport) -> String {
    let width = report
        .samples
        .iter()
        .map(|s| s.sample_id.len())
        .max()
        .unwrap_or(0)
        .max("sample".len());
    let mut out = format!(
        "{:<width$}  {:>12}  {:>12}  {:>8}  {}\n",
        "sample", "intersection", "union", "iou", "note"
    );
    for s in &report.samples {
        match (&s.record, &s.error) {
            (Some(r), _) => {
                let line = format!(
                    "{:<width$}  {:>12}  {:>12}  {:>8.4}  {}",
                    s.sample_id,
                    r.intersection,
                    r.union,
                    r.iou,
                    if r.empty_union { "empty-union" } else { "" }
                );
                out.push_str(line.trim_end());
                out.push('\n');
            }
            (None, e) => out.push_str(&format!(
                "{:<width$}  {:>12}  {:>12}  {:>8}  failed: {}\n",
                s.sample_id,
                "-",
                "-",
                "-",
                e.as_deref().unwrap_or("unknown error")
            )),
        }
    }
    let sm = &report.summary;
    out.push_str(&format!(
        "\noIoU {:.4}  mIoU {:.4}  samples {}  failed {}  empty-union {}\n",
        sm.oiou, sm.miou, sm.samples, sm.failed, sm.empty_union
    ));
    out
}

/// Writes `report.json`, `report.csv` and `report.txt` into `dir`.
pub fn write_eval_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    write_file(dir, "report.json", &eval_json(report)?)?;
    write_file(dir, "report.csv", &eval_csv(report)?)?;
    write_file(dir, "report.txt", &eval_text(report))
}

pub fn separability_records_csv(records: &[SeparabilityRecord]) -> Result<String> {
    csv_string(
        &["sample_id", "t", "l", "J", "flag"],
        records.iter().map(|r| {
            vec![
                r.sample_id.clone(),
                r.timestep.to_string(),
                r.block.to_string(),
                match (r.score, r.flag) {
                    (Some(j), _) => j.to_string(),
                    (None, crate::separability::RecordFlag::Infinite) => "inf".to_owned(),
                    (None, _) => String::new(),
                },
                r.flag.as_str().to_owned(),
            ]
        }),
    )
}

pub fn separability_summary_csv(summary: &[CellSummary]) -> Result<String> {
    csv_string(
        &[
            "t",
            "l",
            "count",
            "single_class",
            "infinite",
            "min",
            "q1",
            "median",
            "q3",
            "max",
            "status",
        ],
        summary.iter().map(|c| {
            let mut row = vec![
                c.timestep.to_string(),
                c.block.to_string(),
                c.count.to_string(),
                c.single_class.to_string(),
                c.infinite.to_string(),
            ];
            match c.stats {
                Some(b) => {
                    row.extend([b.min, b.q1, b.median, b.q3, b.max].map(|v| v.to_string()));
                    row.push("ok".to_owned());
                }
                None => {
                    row.extend(std::iter::repeat_n(String::new(), 5));
                    row.push("empty".to_owned());
                }
            }
            row
        }),
    )
}

/// Writes `separability_records.csv` and `separability_summary.csv` into `dir`.
pub fn write_separability_report(report: &SeparabilityReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    write_file(
        dir,
        "separability_records.csv",
        &separability_records_csv(&report.records)?,
    )?;
    write_file(
        dir,
        "separability_summary.csv",
        &separability_summary_csv(&report.summary)?,
    )
}

pub fn sweep_segmentation_csv(report: &SweepReport) -> Result<String> {
    csv_string(
        &[
            "t", "l", "status", "samples", "absent", "failed", "oiou", "miou",
        ],
        report.cells.iter().map(|c| {
            let (status, n, o, m) = match c.aggregate {
                Some(a) => ("ok", a.samples, a.oiou.to_string(), a.miou.to_string()),
                None => ("absent", 0, String::new(), String::new()),
            };
            vec![
                c.timestep.to_string(),
                c.block.to_string(),
                status.to_owned(),
                n.to_string(),
                c.absent.to_string(),
                c.failed.to_string(),
                o,
                m,
            ]
        }),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridMetric {
    Oiou,
    Miou,
}

/// One metric laid out as a timestep-by-block table.
pub fn sweep_grid_csv(report: &SweepReport, metric: GridMetric) -> Result<String> {
    let mut header = vec!["t\\l".to_owned()];
    header.extend(report.blocks.iter().map(|l| l.to_string()));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_string(
        &header,
        report.timesteps.iter().map(|&t| {
            let mut row = vec![t.to_string()];
            row.extend(report.blocks.iter().map(|&l| {
                report
                    .cells
                    .iter()
                    .find(|c| c.timestep == t && c.block == l)
                    .and_then(|c| c.aggregate)
                    .map(|a| match metric {
                        GridMetric::Oiou => a.oiou.to_string(),
                        GridMetric::Miou => a.miou.to_string(),
                    })
                    .unwrap_or_else(|| "NA".to_owned())
            }));
            row
        }),
    )
}

/// Writes the sweep tables plus `sweep_config.json` into `dir`.
pub fn write_sweep_report(report: &SweepReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    ensure_dir(dir)?;
    write_file(
        dir,
        "sweep_config.json",
        &json_string(&report.config, "sweep config")?,
    )?;
    write_file(
        dir,
        "sweep_segmentation.csv",
        &sweep_segmentation_csv(report)?,
    )?;
    write_file(
        dir,
        "sweep_oiou.csv",
        &sweep_grid_csv(report, GridMetric::Oiou)?,
    )?;
    write_file(
        dir,
        "sweep_miou.csv",
        &sweep_grid_csv(report, GridMetric::Miou)?,
    )?;
    write_file(
        dir,
        "separability_records.csv",
        &separability_records_csv(&report.separability)?,
    )?;
    write_file(
        dir,
        "separability_summary.csv",
        &separability_summary_csv(&report.separability_summary)?,
    )
}
