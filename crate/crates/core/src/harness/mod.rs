//! Evaluation runs over a manifest.
//!
//! Every entry point processes samples independently and in parallel, then
//! reduces in manifest order, so reports do not depend on the worker count.
//! A sample that fails to load or segment is recorded with its error and the
//! run continues.

mod report;

pub use report::{
    eval_csv, eval_json, eval_text, separability_records_csv, separability_summary_csv,
    sweep_grid_csv, sweep_segmentation_csv, write_eval_report, write_separability_report,
    write_sweep_report, GridMetric,
};

use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::localization::{attention_map, segment, segment_with_attention};
use crate::metrics::{aggregate, iou, Aggregate, IouRecord};
use crate::par;
use crate::separability::{feature_separability, summarize, CellSummary, SeparabilityRecord};
use crate::tensor_io::{
    load_sample_bundle, read_mask_pgm_file, DumpBundle, Manifest, SampleManifest,
};

/// Turns a referring expression into an editing instruction.
pub fn build_instruction(expression: &str) -> Result<String> {
    let expr = expression.trim();
    if expr.is_empty() {
        return Err(Error::Validation("empty referring expression".into()));
    }
    Ok(format!("remove {expr}"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleResult {
    pub sample_id: String,
    pub instruction: Option<String>,
    #[serde(flatten, skip_serializing_if = "Option::is_none")]
    pub record: Option<IouRecord>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub oiou: f64,
    pub miou: f64,
    pub samples: usize,
    pub failed: usize,
    pub empty_union: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config: RunConfig,
    pub summary: EvalSummary,
    pub samples: Vec<SampleResult>,
}

impl EvalReport {
    pub fn has_failures(&self) -> bool {
        self.summary.failed > 0
    }
}

fn load_sample(entry: &SampleManifest) -> Result<(DumpBundle, Mask)> {
    let gt_path = entry.gt_mask_path.as_ref().ok_or_else(|| {
        Error::Validation(format!(
            "sample {} has no ground-truth mask",
            entry.sample_id
        ))
    })?;
    let bundle = load_sample_bundle(entry)?;
    let gt = read_mask_pgm_file(gt_path, Some(entry.image_size))?;
    Ok((bundle, gt))
}

fn eval_sample(entry: &SampleManifest, config: &RunConfig) -> SampleResult {
    let instruction = build_instruction(&entry.expression);
    let outcome = instruction
        .as_ref()
        .map_err(|e| e.to_string())
        .and_then(|_| {
            let (bundle, gt) = load_sample(entry).map_err(|e| e.to_string())?;
            let seg = segment(&bundle, config).map_err(|e| e.to_string())?;
            iou(&entry.sample_id, &seg.mask, &gt).map_err(|e| e.to_string())
        });
    let (record, error) = match outcome {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e)),
    };
    SampleResult {
        sample_id: entry.sample_id.clone(),
        instruction: instruction.ok(),
        record,
        error,
    }
}

fn summarize_eval(samples: &[SampleResult]) -> Result<EvalSummary> {
    let records: Vec<IouRecord> = samples.iter().filter_map(|s| s.record.clone()).collect();
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "none of the {} samples could be evaluated",
            samples.len()
        )));
    }
    let Aggregate {
        oiou,
        miou,
        samples: n,
    } = aggregate(&records)?;
    Ok(EvalSummary {
        oiou,
        miou,
        samples: n,
        failed: samples.len() - n,
        empty_union: records.iter().filter(|r| r.empty_union).count(),
    })
}

/// Segments and scores every manifest entry.
pub fn run_eval(manifest: &Manifest, config: &RunConfig) -> Result<EvalReport> {
    config.validate()?;
    let entries = manifest.resolved();
    let samples = par::with_workers(config.workers, || {
        par::map_ordered(&entries, |e| eval_sample(e, config))
    });
    Ok(EvalReport {
        config: config.clone(),
        summary: summarize_eval(&samples)?,
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub timestep: u32,
    pub block: usize,
    /// Samples that lack a feature dump for this cell.
    pub absent: usize,
    pub failed: usize,
    /// `None` when no sample could be scored in this cell.
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub timesteps: Vec<u32>,
    pub blocks: Vec<usize>,
    pub cells: Vec<SweepCell>,
    pub separability: Vec<SeparabilityRecord>,
    pub separability_summary: Vec<CellSummary>,
    /// Samples that could not be loaded at all.
    pub load_failures: Vec<(String, String)>,
}

enum CellOutcome {
    Absent,
    Failed,
    Scored(IouRecord, SeparabilityRecord),
}

fn sweep_sample(
    entry: &SampleManifest,
    cells: &[(u32, usize)],
    config: &RunConfig,
) -> std::result::Result<Vec<CellOutcome>, String> {
    let (bundle, gt) = load_sample(entry).map_err(|e| e.to_string())?;
    let attention = attention_map(&bundle, config).map_err(|e| e.to_string())?;
    Ok(cells
        .iter()
        .map(|&(t, l)| {
            let Some(feature) = bundle.feature_at(t, l) else {
                return CellOutcome::Absent;
            };
            let cfg = RunConfig {
                feature_timestep: t,
                feature_block: Some(l),
                ..config.clone()
            };
            let scored = segment_with_attention(&bundle, attention.clone(), &cfg)
                .and_then(|seg| iou(&entry.sample_id, &seg.mask, &gt))
                .and_then(|rec| {
                    let (score, flag) = feature_separability(&feature.data, bundle.grid, &gt)?;
                    Ok((
                        rec,
                        SeparabilityRecord {
                            sample_id: entry.sample_id.clone(),
                            timestep: t,
                            block: l,
                            score,
                            flag,
                        },
                    ))
                });
            match scored {
                Ok((rec, sep)) => CellOutcome::Scored(rec, sep),
                Err(_) => CellOutcome::Failed,
            }
        })
        .collect())
}

/// Segmentation quality and separability for each `(t', l')` feature cell.
pub fn run_sweep(
    manifest: &Manifest,
    timesteps: &[u32],
    blocks: &[usize],
    config: &RunConfig,
) -> Result<SweepReport> {
    config.validate()?;
    if timesteps.is_empty() || blocks.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one timestep and one block".into(),
        ));
    }
    let cells: Vec<(u32, usize)> = timesteps
        .iter()
        .flat_map(|&t| blocks.iter().map(move |&l| (t, l)))
        .collect();
    let entries = manifest.resolved();
    let per_sample = par::with_workers(config.workers, || {
        par::map_ordered(&entries, |e| sweep_sample(e, &cells, config))
    });

    let mut load_failures = Vec::new();
    let mut records: Vec<Vec<IouRecord>> = vec![Vec::new(); cells.len()];
    let mut absent = vec![0usize; cells.len()];
    let mut failed = vec![0usize; cells.len()];
    let mut separability = Vec::new();
    for (entry, outcome) in entries.iter().zip(per_sample) {
        match outcome {
            Err(e) => load_failures.push((entry.sample_id.clone(), e)),
            Ok(outcomes) => {
                for (k, o) in outcomes.into_iter().enumerate() {
                    match o {
                        CellOutcome::Absent => absent[k] += 1,
                        CellOutcome::Failed => failed[k] += 1,
                        CellOutcome::Scored(rec, sep) => {
                            records[k].push(rec);
                            separability.push(sep);
                        }
                    }
                }
            }
        }
    }
    if load_failures.len() == entries.len() {
        return Err(Error::Validation(format!(
            "none of the {} samples could be loaded",
            entries.len()
        )));
    }
    let cells = cells
        .iter()
        .enumerate()
        .map(|(k, &(timestep, block))| SweepCell {
            timestep,
            block,
            absent: absent[k],
            failed: failed[k],
            aggregate: aggregate(&records[k]).ok(),
        })
        .collect();
    separability.sort_by_key(|r| (r.timestep, r.block));
    let separability_summary = summarize(&separability);
    Ok(SweepReport {
        config: config.clone(),
        timesteps: timesteps.to_vec(),
        blocks: blocks.to_vec(),
        cells,
        separability,
        separability_summary,
        load_failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparabilityReport {
    pub records: Vec<SeparabilityRecord>,
    pub summary: Vec<CellSummary>,
    pub failures: Vec<(String, String)>,
}

/// Separability of every feature dump in every bundle of the manifest.
pub fn run_separability(manifest: &Manifest, workers: usize) -> Result<SeparabilityReport> {
    let entries = manifest.resolved();
    let per_sample = par::with_workers(workers, || {
        par::map_ordered(&entries, |e| -> Result<Vec<SeparabilityRecord>> {
            let (bundle, gt) = load_sample(e)?;
            bundle
                .features()
                .map(|f| {
                    let (score, flag) = feature_separability(&f.data, bundle.grid, &gt)?;
                    Ok(SeparabilityRecord {
                        sample_id: e.sample_id.clone(),
                        timestep: f.timestep,
                        block: f.block,
                        score,
                        flag,
                    })
                })
                .collect()
        })
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (e, r) in entries.iter().zip(per_sample) {
        match r {
            Ok(rs) => records.extend(rs),
            Err(err) => failures.push((e.sample_id.clone(), err.to_string())),
        }
    }
    if records.is_empty() {
        return Err(Error::Validation(
            "no separability records could be computed".into(),
        ));
    }
    records.sort_by_key(|r| (r.timestep, r.block));
    Ok(SeparabilityReport {
        summary: summarize(&records),
        records,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn instruction_prefix() {
        assert_eq!(build_instruction("green van").unwrap(), "remove green van");
        assert_eq!(build_instruction("  dog ").unwrap(), "remove dog");
        assert!(matches!(build_instruction(""), Err(Error::Validation(_))));
        assert!(matches!(
            build_instruction(" \t"),
            Err(Error::Validation(_))
        ));
    }
}
