//! `plot`: turn an eval report's JSON data into figure CSV files. Output
//! bytes are a pure function of the report data, so regenerating a figure
//! from the same report is always byte-identical.

use std::path::PathBuf;

use latent_align::corruption::ErrorType;
use latent_align::error::{Error, Result};
use latent_align::eval::{BonEvalTable, ConsistencyCurve, DeltaCurve, RangeGrid};
use serde::{Deserialize, Serialize};

use crate::common::Context;

#[derive(clap::Args)]
pub struct Args {
    /// Report JSON produced by `eval` (consistency.json, delta.json,
    /// bon_table.json or range_grid.json).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub report: Option<PathBuf>,
    /// consistency | delta | bon | range-grid; inferred from the file name
    /// when omitted.
    pub kind: Option<String>,
}

fn infer_kind(path: &std::path::Path) -> Option<String> {
    let name = path.file_name()?.to_string_lossy();
    for kind in ["consistency", "delta", "bon", "range_grid"] {
        if name.contains(kind) {
            return Some(kind.replace('_', "-"));
        }
    }
    None
}

pub fn run(ctx: &Context, args: Args) -> Result<()> {
    let mut config: Config = ctx.load_config()?;
    if let Some(report) = args.report {
        config.report = Some(report);
    }
    ctx.write_snapshot("plot", &config)?;

    let report = config
        .report
        .clone()
        .ok_or_else(|| Error::Config("plot needs a report path".into()))?;
    let kind = config
        .kind
        .clone()
        .or_else(|| infer_kind(&report))
        .ok_or_else(|| Error::Config("cannot infer report kind; set \"kind\"".into()))?;
    let text = std::fs::read_to_string(&report)
        .map_err(|_| Error::NotFound(format!("report {report:?}")))?;

    let (name, csv) = match kind.as_str() {
        "consistency" => {
            let curve: ConsistencyCurve = serde_json::from_str(&text)?;
            // solid correct-caption curve plus the dashed distractor mean
            let mut out = String::from(
                "step,recall_at_1_solid,distractor_mean_dashed,color,count,background,main_subject\n",
            );
            for (i, &step) in curve.steps.iter().enumerate() {
                out.push_str(&format!(
                    "{step},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                    curve.recall_at_1[i],
                    curve.distractor_mean[i],
                    curve.per_error_recall[&ErrorType::Color][i],
                    curve.per_error_recall[&ErrorType::Count][i],
                    curve.per_error_recall[&ErrorType::Background][i],
                    curve.per_error_recall[&ErrorType::MainSubject][i],
                ));
            }
            ("figure_consistency.csv", out)
        }
        "delta" => {
            let curve: DeltaCurve = serde_json::from_str(&text)?;
            let ranks = curve.mean_by_rank.first().map(|m| m.len()).unwrap_or(0);
            let mut out = String::from("step");
            for r in 0..ranks {
                out.push_str(&format!(",rank{r}"));
            }
            out.push_str(",gap\n");
            for (i, &step) in curve.steps.iter().enumerate() {
                out.push_str(&format!("{step}"));
                for r in 0..ranks {
                    out.push_str(&format!(",{:.6}", curve.mean_by_rank[i][r]));
                }
                out.push_str(&format!(",{:.6}\n", curve.gap[i]));
            }
            ("figure_delta.csv", out)
        }
        "bon" => {
            let table: BonEvalTable = serde_json::from_str(&text)?;
            let mut out = String::from("cost,mean_score,n,stop_step,keep\n");
            for row in &table.rows {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    row.cost,
                    row.mean_score.map_or("-".into(), |v| format!("{v:.6}")),
                    row.n,
                    row.stop_step,
                    row.keep
                ));
            }
            if let Some(mean) = table.mean_of_candidates {
                out.push_str(&format!("baseline_mean_of_candidates,{mean:.6},,,\n"));
            }
            ("figure_bon_frontier.csv", out)
        }
        "range-grid" => {
            let grid: RangeGrid = serde_json::from_str(&text)?;
            let mut out = String::from("scorer");
            for col in &grid.col_labels {
                out.push_str(&format!(",{col}"));
            }
            out.push('\n');
            for (i, label) in grid.row_labels.iter().enumerate() {
                out.push_str(label);
                for cell in &grid.scores[i] {
                    out.push_str(&format!(
                        ",{}",
                        cell.map_or("-".into(), |v| format!("{v:.6}"))
                    ));
                }
                out.push('\n');
            }
            ("figure_range_grid.csv", out)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown report kind {other:?}; expected consistency, delta, bon or range-grid"
            )))
        }
    };
    let path = ctx.out(name);
    std::fs::write(&path, csv)?;
    println!("figure data -> {path:?}");
    Ok(())
}
